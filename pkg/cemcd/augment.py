"""Geometric transforms shared by training augmentation and test-time augmentation."""

import enum
from dataclasses import dataclass

import torch

from .data import BitemporalSample, check_divisible
from .exceptions import ConfigError

FLIP_PROBABILITY = 0.5


@enum.unique
class Flip(str, enum.Enum):
    IDENTITY = "identity"
    HORIZONTAL = "hflip"
    VERTICAL = "vflip"
    BOTH = "hvflip"

    @property
    def dims(self) -> tuple[int, ...]:
        # Width is always the last axis, height the one before it
        return {
            Flip.IDENTITY: (),
            Flip.HORIZONTAL: (-1,),
            Flip.VERTICAL: (-2,),
            Flip.BOTH: (-2, -1),
        }[self]

    def __call__(self, tensor: torch.Tensor) -> torch.Tensor:
        """Apply the flip to the two trailing axes. Every flip is its own inverse."""
        if not self.dims:
            return tensor
        return torch.flip(tensor, dims=self.dims)


@dataclass(frozen=True, slots=True, kw_only=True)
class AugmentParams:
    hflip: bool
    vflip: bool
    top: int
    left: int
    crop_size: int


def _flip_for(hflip: bool, vflip: bool) -> Flip:
    if hflip and vflip:
        return Flip.BOTH
    if hflip:
        return Flip.HORIZONTAL
    if vflip:
        return Flip.VERTICAL
    return Flip.IDENTITY


def sample_augment_params(
    size: tuple[int, int],
    crop_size: int,
    generator: torch.Generator,
) -> AugmentParams:
    """Draw flip decisions and a crop window from a caller-owned generator."""
    check_divisible(crop_size, "crop_size")
    height, width = size
    if crop_size > height or crop_size > width:
        raise ConfigError(f"crop size {crop_size} exceeds tile {height}x{width}")

    flips = torch.rand(2, generator=generator)
    top = int(torch.randint(0, height - crop_size + 1, (1,), generator=generator))
    left = int(torch.randint(0, width - crop_size + 1, (1,), generator=generator))
    return AugmentParams(
        hflip=bool(flips[0] < FLIP_PROBABILITY),
        vflip=bool(flips[1] < FLIP_PROBABILITY),
        top=top,
        left=left,
        crop_size=crop_size,
    )


def apply_augment(sample: BitemporalSample, params: AugmentParams) -> BitemporalSample:
    """Flip, then crop; the same geometry is applied to all three tensors."""
    height, width = sample.size
    size = params.crop_size
    if params.top + size > height or params.left + size > width:
        raise ConfigError(f"crop window {params} exceeds tile {height}x{width}")

    flip = _flip_for(params.hflip, params.vflip)
    rows = slice(params.top, params.top + size)
    cols = slice(params.left, params.left + size)
    return BitemporalSample(
        pre_image=flip(sample.pre_image)[:, rows, cols].contiguous(),
        post_image=flip(sample.post_image)[:, rows, cols].contiguous(),
        gt_mask=flip(sample.gt_mask)[rows, cols].contiguous(),
        id=sample.id,
    )


def augment(sample: BitemporalSample, generator: torch.Generator, crop_size: int) -> BitemporalSample:
    params = sample_augment_params(sample.size, crop_size, generator)
    return apply_augment(sample, params)
