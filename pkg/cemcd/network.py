import logging
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .constants import DEFAULT_HEAD_WIDTH, DEFAULT_RESIDUAL_BLOCKS
from .data import BitemporalSample
from .encoder import EncoderSpec, FeaturePyramid, SiameseEncoder, build_encoder
from .exceptions import ConfigError, ShapeError
from .layers import ConvBnSiLU, ResidualBlock
from .typedefs import FusionKind

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True, kw_only=True)
class ModelConfig:
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    head_width: int = DEFAULT_HEAD_WIDTH
    residual_blocks: int = DEFAULT_RESIDUAL_BLOCKS
    fusion: FusionKind = "stfe"
    msdf: bool = True

    def __post_init__(self) -> None:
        if self.head_width <= 0:
            raise ConfigError(f"`model.head_width` must be positive, got {self.head_width}")
        if self.residual_blocks < 0:
            raise ConfigError(f"`model.residual_blocks` must be >= 0, got {self.residual_blocks}")
        if self.fusion not in ("stfe", "diff"):
            raise ConfigError(f"`model.fusion` must be 'stfe' or 'diff', got {self.fusion!r}")


@dataclass(frozen=True, slots=True)
class DecoderState:
    """Decoder outputs at 1/16, 1/8 and 1/4 scale (deepest first)."""

    d3: torch.Tensor
    d2: torch.Tensor
    d1: torch.Tensor

    @property
    def stages(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.d3, self.d2, self.d1


class Stfe(nn.Module):
    """Spatial-temporal feature enhancement: concat(pre, post) -> Conv3x3 -> BN -> SiLU, halving channels."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.block = ConvBnSiLU(2 * channels, channels)

    def forward(self, f_pre: torch.Tensor, f_post: torch.Tensor) -> torch.Tensor:
        if f_pre.shape != f_post.shape:
            raise ShapeError(f"STFE inputs differ in shape: {list(f_pre.shape)} vs {list(f_post.shape)}")
        return self.block(torch.cat([f_pre, f_post], dim=1))


class AbsDifference(nn.Module):
    """Parameter-free |pre - post| fusion, used to ablate STFE."""

    def forward(self, f_pre: torch.Tensor, f_post: torch.Tensor) -> torch.Tensor:
        if f_pre.shape != f_post.shape:
            raise ShapeError(f"Fusion inputs differ in shape: {list(f_pre.shape)} vs {list(f_post.shape)}")
        return torch.abs(f_pre - f_post)


class DecoderBlock(nn.Module):
    """Upsample x2 with a 2x2 transpose convolution, concatenate the skip, Conv3x3 -> BN -> SiLU."""

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int) -> None:
        super().__init__()
        self.up = nn.ConvTranspose2d(in_channels, out_channels, kernel_size=2, stride=2)
        self.conv = ConvBnSiLU(out_channels + skip_channels, out_channels)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = self.up(x)
        if x.shape[-2:] != skip.shape[-2:]:
            raise ShapeError(f"Upsampled size {tuple(x.shape[-2:])} does not match skip {tuple(skip.shape[-2:])}")
        return self.conv(torch.cat([x, skip], dim=1))


class UNetDecoder(nn.Module):
    """Three upsampling stages from the 1/32 level, consuming the 1/16, 1/8 and 1/4 skips."""

    def __init__(self, channels: tuple[int, int, int, int]) -> None:
        super().__init__()
        c1, c2, c3, c4 = channels
        self.block3 = DecoderBlock(c4, c3, c3)
        self.block2 = DecoderBlock(c3, c2, c2)
        self.block1 = DecoderBlock(c2, c1, c1)
        self.channels = (c3, c2, c1)

    def forward(self, enhanced: FeaturePyramid) -> DecoderState:
        e1, e2, e3, e4 = enhanced.levels
        d3 = self.block3(e4, e3)
        d2 = self.block2(d3, e2)
        d1 = self.block1(d2, e1)
        return DecoderState(d3, d2, d1)


class ChangeHead(nn.Module):
    """
    Multi-scale decoder fusion followed by the residual classification head.

    Every decoder stage is bilinearly upsampled to full resolution, concatenated
    and fused by a 1x1 convolution; residual blocks then refine the fused map and
    a final 1x1 convolution yields one logit per pixel. With ``msdf=False`` only
    the shallowest stage is used.
    """

    def __init__(
        self,
        decoder_channels: tuple[int, int, int],
        width: int = DEFAULT_HEAD_WIDTH,
        blocks: int = DEFAULT_RESIDUAL_BLOCKS,
        msdf: bool = True,
    ) -> None:
        super().__init__()
        self.msdf = msdf
        fused_in = sum(decoder_channels) if msdf else decoder_channels[-1]
        self.fuse = nn.Conv2d(fused_in, width, kernel_size=1)
        self.blocks = nn.Sequential(*(ResidualBlock(width) for _ in range(blocks)))
        self.classifier = nn.Conv2d(width, 1, kernel_size=1)

    def fused(self, dec: DecoderState, size: tuple[int, int]) -> torch.Tensor:
        stages = dec.stages if self.msdf else (dec.d1,)
        upsampled = [F.interpolate(d, size=size, mode="bilinear", align_corners=False) for d in stages]
        return self.fuse(torch.cat(upsampled, dim=1))

    def forward(self, dec: DecoderState, size: tuple[int, int]) -> torch.Tensor:
        return self.classifier(self.blocks(self.fused(dec, size)))


class ChangeDetector(nn.Module):
    """Siamese encoder -> per-scale fusion -> UNet decoder -> MSDF + residual head."""

    def __init__(self, config: ModelConfig | None = None, encoder: SiameseEncoder | None = None) -> None:
        super().__init__()
        self.config = config or ModelConfig()
        self.encoder = encoder or build_encoder(self.config.encoder)
        channels = self.encoder.channels
        if self.config.fusion == "stfe":
            self.fusion = nn.ModuleList(Stfe(c) for c in channels)
        else:
            self.fusion = nn.ModuleList(AbsDifference() for _ in channels)
        self.decoder = UNetDecoder(channels)
        self.head = ChangeHead(
            self.decoder.channels,
            width=self.config.head_width,
            blocks=self.config.residual_blocks,
            msdf=self.config.msdf,
        )

    def enhance(self, pre: FeaturePyramid, post: FeaturePyramid) -> FeaturePyramid:
        return FeaturePyramid(
            *(fuse(a, b) for fuse, a, b in zip(self.fusion, pre.levels, post.levels, strict=True))
        )

    def decode(self, enhanced: FeaturePyramid) -> DecoderState:
        return self.decoder(enhanced)  # type: ignore[no-any-return]

    def forward(self, pre: torch.Tensor, post: torch.Tensor) -> torch.Tensor:
        """Map ``[B,3,H,W]`` image pairs to change logits ``[B,1,H,W]``."""
        size = (int(pre.shape[-2]), int(pre.shape[-1]))
        pre_pyramid, post_pyramid = self.encoder(pre, post)
        dec = self.decode(self.enhance(pre_pyramid, post_pyramid))
        return self.head(dec, size)  # type: ignore[no-any-return]

    def forward_sample(self, sample: BitemporalSample) -> torch.Tensor:
        """Change logits ``[1,H,W]`` for one sample."""
        pre, post, _ = sample.batched()
        return self(pre, post)[0]  # type: ignore[no-any-return]


def count_parameters(model: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


def build_model(config: ModelConfig | None = None) -> ChangeDetector:
    model = ChangeDetector(config)
    logger.info("Built change detector with %d parameters", count_parameters(model))
    return model
