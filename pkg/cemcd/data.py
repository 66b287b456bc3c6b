from dataclasses import dataclass, field
from pathlib import Path

import torch

from .constants import DEFAULT_TILE_SIZE, SCALE_DIVISOR
from .exceptions import ConfigError, ShapeError
from .typedefs import Split


def check_divisible(size: int, name: str = "tile_size") -> None:
    if size <= 0 or size % SCALE_DIVISOR != 0:
        raise ConfigError(f"`{name}` must be a positive multiple of {SCALE_DIVISOR}, got {size}")


@dataclass(frozen=True, slots=True, kw_only=True, eq=False)
class BitemporalSample:
    """Co-registered pre/post images ``[3,H,W]`` in [0,1] and a binary mask ``[H,W]``."""

    pre_image: torch.Tensor
    post_image: torch.Tensor
    gt_mask: torch.Tensor
    id: str

    def __post_init__(self) -> None:
        if self.pre_image.dim() != 3 or self.pre_image.shape[0] != 3:
            raise ShapeError(f"pre_image must be [3,H,W], got {list(self.pre_image.shape)}")
        if self.post_image.shape != self.pre_image.shape:
            raise ShapeError(
                f"post_image {list(self.post_image.shape)} does not match pre_image {list(self.pre_image.shape)}"
            )
        if self.gt_mask.shape != self.pre_image.shape[1:]:
            raise ShapeError(f"gt_mask {list(self.gt_mask.shape)} does not match image size {self.size}")
        if bool(((self.gt_mask != 0) & (self.gt_mask != 1)).any()):
            raise ShapeError(f"gt_mask of sample {self.id!r} must only contain 0 and 1")
        height, width = self.size
        if height % SCALE_DIVISOR or width % SCALE_DIVISOR:
            raise ShapeError(f"sample {self.id!r} size {height}x{width} is not divisible by {SCALE_DIVISOR}")

    @property
    def size(self) -> tuple[int, int]:
        return int(self.pre_image.shape[1]), int(self.pre_image.shape[2])

    @property
    def change_fraction(self) -> float:
        return float(self.gt_mask.float().mean())

    def batched(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Return ``pre [1,3,H,W]``, ``post [1,3,H,W]`` and ``gt [1,1,H,W]``."""
        return (
            self.pre_image.unsqueeze(0),
            self.post_image.unsqueeze(0),
            self.gt_mask.float().unsqueeze(0).unsqueeze(0),
        )


@dataclass(frozen=True, slots=True, kw_only=True)
class DatasetManifest:
    root_path: Path
    split: Split
    sample_ids: tuple[str, ...]
    tile_size: int = DEFAULT_TILE_SIZE

    def __len__(self) -> int:
        return len(self.sample_ids)


@dataclass(frozen=True, slots=True, kw_only=True)
class SynthesisConfig:
    """Parameters of the synthetic bitemporal scene generator.

    ``object_count_range`` bounds the number of persistent objects per scene and
    ``changed_count_range`` the number of objects added or removed between the
    two dates. ``object_size_range`` bounds object side lengths in pixels.
    """

    num_samples: int
    tile_size: int = DEFAULT_TILE_SIZE
    change_fraction_target: float = 0.05
    object_count_range: tuple[int, int] = (4, 12)
    changed_count_range: tuple[int, int] = (1, 4)
    object_size_range: tuple[int, int] = (6, 64)
    noise_level: float = 0.02
    seed: int = 0
    tolerance: float = 0.01
    max_retries: int = 50
    split_fractions: dict[str, float] = field(default_factory=lambda: {"train": 1.0})

    def __post_init__(self) -> None:
        if self.num_samples <= 0:
            raise ConfigError(f"`num_samples` must be positive, got {self.num_samples}")
        check_divisible(self.tile_size)
        if not 0.0 < self.change_fraction_target < 1.0:
            raise ConfigError(f"`change_fraction_target` must be in (0, 1), got {self.change_fraction_target}")
        for name in ("object_count_range", "changed_count_range", "object_size_range"):
            low, high = getattr(self, name)
            if low < 0 or high < low:
                raise ConfigError(f"`{name}` must be a non-negative interval, got {(low, high)}")
        if self.object_size_range[0] < 1:
            raise ConfigError("objects must be at least one pixel wide")
        if self.noise_level < 0:
            raise ConfigError(f"`noise_level` must be >= 0, got {self.noise_level}")
        if self.seed < 0:
            raise ConfigError(f"`seed` must be unsigned, got {self.seed}")
        unknown = set(self.split_fractions) - {"train", "val", "test"}
        if unknown or abs(sum(self.split_fractions.values()) - 1.0) > 1e-9:
            raise ConfigError(f"`split_fractions` must cover train/val/test and sum to 1, got {self.split_fractions}")
