import enum
import logging
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .checkpoint import check_state_shapes, load_checkpoint, save_checkpoint
from .constants import DEFAULT_CHANNELS, PYRAMID_STRIDES, SCALE_DIVISOR
from .data import BitemporalSample
from .exceptions import CheckpointError, ConfigError, ShapeError
from .layers import ConvBnSiLU

logger = logging.getLogger(__name__)

ENCODER_KIND = "encoder"
MIN_CHANNELS = 8


@enum.unique
class EncoderBackend(str, enum.Enum):
    TOY = "toy"
    EXTERNAL = "external"


@dataclass(frozen=True, slots=True, kw_only=True)
class EncoderSpec:
    backend: EncoderBackend = EncoderBackend.TOY
    channels: tuple[int, int, int, int] = DEFAULT_CHANNELS
    weights: Path | None = None
    freeze: bool = False

    def __post_init__(self) -> None:
        if len(self.channels) != len(PYRAMID_STRIDES):
            raise ConfigError(f"Encoder needs {len(PYRAMID_STRIDES)} channel widths, got {self.channels}")
        if min(self.channels) < MIN_CHANNELS:
            raise ConfigError(f"Encoder channel widths must be >= {MIN_CHANNELS}, got {self.channels}")
        if self.backend is EncoderBackend.EXTERNAL and self.weights is None:
            raise ConfigError("The external encoder backend needs `encoder.weights`")


@dataclass(frozen=True, slots=True)
class FeaturePyramid:
    """Feature maps at 1/4, 1/8, 1/16 and 1/32 of the input resolution."""

    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor
    f4: torch.Tensor

    @property
    def levels(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.f1, self.f2, self.f3, self.f4

    def __iter__(self) -> Iterator[torch.Tensor]:
        return iter(self.levels)

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(int(f.shape[-3]) for f in self.levels)

    def check(self, size: tuple[int, int]) -> None:
        height, width = size
        for level, stride in zip(self.levels, PYRAMID_STRIDES, strict=True):
            expected = (height // stride, width // stride)
            if tuple(level.shape[-2:]) != expected:
                raise ShapeError(f"Pyramid level at 1/{stride} has size {tuple(level.shape[-2:])}, expected {expected}")


def check_input_size(image: torch.Tensor) -> None:
    height, width = image.shape[-2:]
    if height % SCALE_DIVISOR or width % SCALE_DIVISOR:
        raise ShapeError(f"Input size {height}x{width} is not divisible by {SCALE_DIVISOR}")


class PyramidEncoder(nn.Module):
    """
    Built-in strided convolutional pyramid.

    A stride-4 stem (two stride-2 Conv3x3-BN-SiLU layers) produces the 1/4 level,
    then three stride-2 Conv3x3-BN-SiLU stages produce 1/8, 1/16 and 1/32.
    """

    def __init__(self, channels: tuple[int, int, int, int] = DEFAULT_CHANNELS) -> None:
        super().__init__()
        c1, c2, c3, c4 = channels
        self.channels = tuple(channels)
        self.stem = nn.Sequential(ConvBnSiLU(3, c1 // 2, stride=2), ConvBnSiLU(c1 // 2, c1, stride=2))
        self.stage2 = ConvBnSiLU(c1, c2, stride=2)
        self.stage3 = ConvBnSiLU(c2, c3, stride=2)
        self.stage4 = ConvBnSiLU(c3, c4, stride=2)

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        check_input_size(image)
        f1 = self.stem(image)
        f2 = self.stage2(f1)
        f3 = self.stage3(f2)
        f4 = self.stage4(f3)
        return FeaturePyramid(f1, f2, f3, f4)


class PyramidAdapter(nn.Module):
    """
    Adapts any module returning four feature maps (finest first) to the pyramid contract.

    This is the hook for pre-trained dense-prediction backbones: wrap the backbone,
    declare its tap widths, and the adapter checks the scale contract on every call.
    """

    def __init__(self, backbone: nn.Module, channels: tuple[int, int, int, int]) -> None:
        super().__init__()
        self.backbone = backbone
        self.channels = tuple(channels)

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        check_input_size(image)
        levels = self.backbone(image)
        if len(levels) != len(PYRAMID_STRIDES):
            raise ShapeError(f"Backbone returned {len(levels)} feature maps, expected {len(PYRAMID_STRIDES)}")
        pyramid = FeaturePyramid(*levels)
        pyramid.check((int(image.shape[-2]), int(image.shape[-1])))
        if pyramid.channels != self.channels:
            raise ShapeError(f"Backbone channels {pyramid.channels} differ from declared {self.channels}")
        return pyramid


class SiameseEncoder(nn.Module):
    """
    One backbone applied to both dates.

    Both images go through a single forward pass as one concatenated batch, so
    batch-normalisation statistics are shared between the two branches.
    """

    def __init__(self, backbone: nn.Module) -> None:
        super().__init__()
        self.backbone = backbone

    @property
    def channels(self) -> tuple[int, int, int, int]:
        return self.backbone.channels  # type: ignore[no-any-return]

    def forward(self, pre: torch.Tensor, post: torch.Tensor) -> tuple[FeaturePyramid, FeaturePyramid]:
        if pre.shape != post.shape:
            raise ShapeError(f"Pre image {list(pre.shape)} and post image {list(post.shape)} differ in shape")
        batch = pre.shape[0]
        pyramid = self.backbone(torch.cat([pre, post], dim=0))
        pre_levels = [level[:batch] for level in pyramid]
        post_levels = [level[batch:] for level in pyramid]
        return FeaturePyramid(*pre_levels), FeaturePyramid(*post_levels)


def encode(encoder: nn.Module, image: torch.Tensor) -> FeaturePyramid:
    """Encode a single image ``[3,H,W]`` (or a batch) into a feature pyramid."""
    if image.dim() == 3:
        pyramid: FeaturePyramid = encoder(image.unsqueeze(0))
        return FeaturePyramid(*(level[0] for level in pyramid))
    result: FeaturePyramid = encoder(image)
    return result


def encode_pair(encoder: SiameseEncoder, sample: BitemporalSample) -> tuple[FeaturePyramid, FeaturePyramid]:
    pre, post, _ = sample.batched()
    pre_pyramid, post_pyramid = encoder(pre, post)
    return (
        FeaturePyramid(*(level[0] for level in pre_pyramid)),
        FeaturePyramid(*(level[0] for level in post_pyramid)),
    )


def set_trainable(module: nn.Module, trainable: bool) -> None:
    for param in module.parameters():
        param.requires_grad_(trainable)


def save_encoder(encoder: PyramidEncoder, path: str | Path) -> Path:
    return save_checkpoint(
        path,
        kind=ENCODER_KIND,
        state=encoder.state_dict(),
        metadata={"channels": list(encoder.channels)},
    )


def load_external_encoder(
    path: str | Path,
    channels: tuple[int, int, int, int] | None = None,
    freeze: bool = False,
) -> PyramidEncoder:
    """
    Load encoder weights from a checkpoint for fine-tuning.

    When ``channels`` is given, the checkpoint must match it; a mismatch raises
    :class:`CheckpointError` listing expected and found tensor shapes. Parameters
    stay trainable unless ``freeze`` is set.
    """
    checkpoint = load_checkpoint(path, kind=ENCODER_KIND)
    found = tuple(int(c) for c in checkpoint.metadata.get("channels", ()))
    expected_channels = tuple(channels) if channels is not None else found
    if len(expected_channels) != len(PYRAMID_STRIDES):
        raise CheckpointError(f"Checkpoint {path} declares channels {found}, expected four widths")

    encoder = PyramidEncoder(expected_channels)  # type: ignore[arg-type]
    check_state_shapes(encoder.state_dict(), checkpoint.state, path)
    if found != expected_channels:
        raise CheckpointError(f"Checkpoint {path} declares channels {found}, expected {expected_channels}")

    encoder.load_state_dict(checkpoint.state)
    set_trainable(encoder, not freeze)
    logger.info("Loaded encoder weights from %s (channels %s, frozen=%s)", path, expected_channels, freeze)
    return encoder


def build_encoder(spec: EncoderSpec) -> SiameseEncoder:
    if spec.backend is EncoderBackend.EXTERNAL:
        assert spec.weights is not None
        backbone = load_external_encoder(spec.weights, spec.channels, freeze=spec.freeze)
    else:
        backbone = PyramidEncoder(spec.channels)
        set_trainable(backbone, not spec.freeze)
    return SiameseEncoder(backbone)
