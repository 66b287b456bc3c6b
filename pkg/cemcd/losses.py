"""
Cross-entropy masking and the baseline imbalance losses.

All functions take probabilities (or logits for the ``*_from_logits`` variants)
and binary ground truth of the same shape. Reductions run over every element
passed in, so a batch ``[B,1,H,W]`` is normalised over all of its pixels.
"""

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .exceptions import ConfigError, ShapeError
from .typedefs import LOSS_KINDS, Criterion, LossKind

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-7
DICE_SMOOTHING = 1.0


@dataclass(frozen=True, slots=True, kw_only=True)
class LossConfig:
    kind: LossKind = "cem"
    delta: float = 0.3
    epsilon: float = DEFAULT_EPSILON
    alpha: float = 0.5
    gamma: float = 2.0
    w0: float = 0.7
    w1: float = 1.0
    bce_weight: float = 0.7
    dice_weight: float = 0.3

    def __post_init__(self) -> None:
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"`loss.kind` must be one of {LOSS_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.delta < 1.0:
            raise ConfigError(f"`loss.delta` must be in [0, 1), got {self.delta}")
        if self.epsilon <= 0.0:
            raise ConfigError(f"`loss.epsilon` must be positive, got {self.epsilon}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"`loss.alpha` must be in (0, 1), got {self.alpha}")
        if self.gamma < 0.0:
            raise ConfigError(f"`loss.gamma` must be >= 0, got {self.gamma}")


def _check_shapes(probs: torch.Tensor, gt: torch.Tensor) -> None:
    if probs.shape != gt.shape:
        raise ShapeError(f"Prediction {list(probs.shape)} and ground truth {list(gt.shape)} differ in shape")


def _mean(values: torch.Tensor) -> torch.Tensor:
    # sum / count, the same reduction the masked mean uses, so an all-ones mask matches bit for bit
    return values.sum() / values.numel()


def bce_map(probs: torch.Tensor, gt: torch.Tensor, epsilon: float = DEFAULT_EPSILON) -> torch.Tensor:
    """Per-element ``-[y log p + (1 - y) log(1 - p)]`` with ``p`` clamped to ``[eps, 1 - eps]``."""
    _check_shapes(probs, gt)
    gt = gt.to(probs.dtype)
    p = probs.clamp(epsilon, 1.0 - epsilon)
    return -(gt * torch.log(p) + (1.0 - gt) * torch.log1p(-p))


def cem_mask(gt: torch.Tensor, delta: float, generator: torch.Generator | None = None) -> torch.Tensor:
    """
    Loss mask: change pixels are always kept, background pixels are kept when ``R >= delta``.

    ``R ~ Uniform(0, 1)`` is drawn afresh on every call. The result is a float tensor
    of zeros and ones with no autograd history.
    """
    device = gt.device if generator is None else generator.device
    noise = torch.rand(gt.shape, generator=generator, device=device).to(gt.device)
    keep = (gt > 0.5) | (noise >= delta)
    return keep.to(gt.dtype if gt.is_floating_point() else torch.float32)


class MaskFallbackCounter:
    """Counts CEM evaluations whose mask kept no pixel at all."""

    __slots__ = ("count",)

    def __init__(self) -> None:
        self.count = 0

    def increment(self) -> None:
        self.count += 1
        logger.warning("CEM mask dropped every pixel; fell back to unmasked BCE (%d times so far)", self.count)


fallback_counter = MaskFallbackCounter()


def masked_bce(bce: torch.Tensor, mask: torch.Tensor, counter: MaskFallbackCounter | None = None) -> torch.Tensor:
    """``sum(bce * M) / sum(M)``; falls back to the plain mean when ``sum(M) == 0``."""
    mask = mask.detach().to(bce.dtype)
    kept = mask.sum()
    if kept.item() == 0:
        (counter or fallback_counter).increment()
        return _mean(bce)
    return (bce * mask).sum() / kept


def cem_loss(
    probs: torch.Tensor,
    gt: torch.Tensor,
    delta: float = 0.3,
    generator: torch.Generator | None = None,
    *,
    mask: torch.Tensor | None = None,
    epsilon: float = DEFAULT_EPSILON,
    counter: MaskFallbackCounter | None = None,
) -> torch.Tensor:
    """Cross-entropy masking loss. Pass ``mask`` to reuse a frozen mask instead of sampling one."""
    bce = bce_map(probs, gt, epsilon)
    if mask is None:
        mask = cem_mask(gt, delta, generator)
    elif mask.shape != gt.shape:
        raise ShapeError(f"Mask {list(mask.shape)} and ground truth {list(gt.shape)} differ in shape")
    return masked_bce(bce, mask, counter)


def cem_loss_from_logits(
    logits: torch.Tensor,
    gt: torch.Tensor,
    delta: float = 0.3,
    generator: torch.Generator | None = None,
    *,
    mask: torch.Tensor | None = None,
    counter: MaskFallbackCounter | None = None,
) -> torch.Tensor:
    """Numerically stable CEM computed from raw logits."""
    _check_shapes(logits, gt)
    bce = F.binary_cross_entropy_with_logits(logits, gt.to(logits.dtype), reduction="none")
    if mask is None:
        mask = cem_mask(gt, delta, generator)
    elif mask.shape != gt.shape:
        raise ShapeError(f"Mask {list(mask.shape)} and ground truth {list(gt.shape)} differ in shape")
    return masked_bce(bce, mask, counter)


def bce_loss(probs: torch.Tensor, gt: torch.Tensor, epsilon: float = DEFAULT_EPSILON) -> torch.Tensor:
    return _mean(bce_map(probs, gt, epsilon))


def focal_loss(
    probs: torch.Tensor,
    gt: torch.Tensor,
    alpha: float = 0.5,
    gamma: float = 2.0,
    epsilon: float = DEFAULT_EPSILON,
) -> torch.Tensor:
    """Mean of ``-alpha_t (1 - p_t)^gamma log(p_t)`` with ``alpha_t = alpha`` on change pixels."""
    _check_shapes(probs, gt)
    gt = gt.to(probs.dtype)
    p = probs.clamp(epsilon, 1.0 - epsilon)
    p_t = gt * p + (1.0 - gt) * (1.0 - p)
    alpha_t = gt * alpha + (1.0 - gt) * (1.0 - alpha)
    return _mean(-alpha_t * (1.0 - p_t).pow(gamma) * torch.log(p_t))


def weighted_bce(
    probs: torch.Tensor,
    gt: torch.Tensor,
    w0: float = 0.7,
    w1: float = 1.0,
    epsilon: float = DEFAULT_EPSILON,
) -> torch.Tensor:
    """Mean BCE with weight ``w1`` on change pixels and ``w0`` on background."""
    bce = bce_map(probs, gt, epsilon)
    gt = gt.to(probs.dtype)
    weights = gt * w1 + (1.0 - gt) * w0
    return _mean(weights * bce)


def dice_loss(probs: torch.Tensor, gt: torch.Tensor, smoothing: float = DICE_SMOOTHING) -> torch.Tensor:
    _check_shapes(probs, gt)
    gt = gt.to(probs.dtype)
    intersection = (probs * gt).sum()
    return 1.0 - (2.0 * intersection + smoothing) / (probs.sum() + gt.sum() + smoothing)


def bce_dice(
    probs: torch.Tensor,
    gt: torch.Tensor,
    bce_weight: float = 0.7,
    dice_weight: float = 0.3,
    epsilon: float = DEFAULT_EPSILON,
) -> torch.Tensor:
    return bce_weight * bce_loss(probs, gt, epsilon) + dice_weight * dice_loss(probs, gt)


def build_criterion(
    config: LossConfig,
    generator: torch.Generator | None = None,
    counter: MaskFallbackCounter | None = None,
) -> Criterion:
    """Return a ``(logits, gt) -> loss`` callable for the configured loss kind."""

    def criterion(logits: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
        probs = torch.sigmoid(logits)
        if config.kind == "cem":
            return cem_loss(probs, gt, config.delta, generator, epsilon=config.epsilon, counter=counter)
        if config.kind == "bce":
            return bce_loss(probs, gt, config.epsilon)
        if config.kind == "focal":
            return focal_loss(probs, gt, config.alpha, config.gamma, config.epsilon)
        if config.kind == "wbce":
            return weighted_bce(probs, gt, config.w0, config.w1, config.epsilon)
        return bce_dice(probs, gt, config.bce_weight, config.dice_weight, config.epsilon)

    return criterion


def kept_fraction_bound(delta: float, pixels: int, sigmas: float = 4.0) -> float:
    """Half-width of the ``sigmas``-sigma binomial band around the expected kept fraction ``1 - delta``."""
    return sigmas * math.sqrt(delta * (1.0 - delta) / pixels)
