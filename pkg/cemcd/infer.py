import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import torch
from PIL import Image
from torch import nn

from .augment import Flip
from .constants import COLOR_DROPPED, COLOR_FN, COLOR_FP, COLOR_TP, DEFAULT_THRESHOLD, TN_DIM_FACTOR
from .data import BitemporalSample
from .dataset import image_to_uint8
from .exceptions import ShapeError
from .losses import cem_mask
from .metrics import ConfusionCounts, MetricReport, confusion, report
from .typedefs import ChangeModel

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True, kw_only=True)
class TtaPolicy:
    """Flip group used at inference; each flip is undone on the prediction before merging."""

    transforms: tuple[Flip, ...] = (Flip.IDENTITY, Flip.HORIZONTAL, Flip.VERTICAL, Flip.BOTH)
    merge: Literal["mean_prob"] = "mean_prob"


SINGLE_PASS = TtaPolicy(transforms=(Flip.IDENTITY,))
FOUR_FLIPS = TtaPolicy()


def _pairwise_mean(maps: Sequence[torch.Tensor]) -> torch.Tensor:
    # Tree summation: n copies of the same map average back to that map exactly for n = 2^k
    level = list(maps)
    while len(level) > 1:
        paired = [level[i] + level[i + 1] for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            paired.append(level[-1])
        level = paired
    return level[0] / len(maps)


def predict_probs(model: ChangeModel, pre: torch.Tensor, post: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(model(pre, post))


def predict_tta(
    model: ChangeModel,
    pre: torch.Tensor,
    post: torch.Tensor,
    policy: TtaPolicy = FOUR_FLIPS,
) -> torch.Tensor:
    """Mean of the sigmoid probabilities over the policy's flips, each aligned back to the input frame."""
    maps = [flip(predict_probs(model, flip(pre), flip(post))) for flip in policy.transforms]
    return _pairwise_mean(maps).clamp(0.0, 1.0)


def predict_sample(model: ChangeModel, sample: BitemporalSample, tta: bool = True) -> torch.Tensor:
    """Change probabilities ``[H,W]`` for one sample."""
    pre, post, _ = sample.batched()
    with torch.no_grad():
        probs = predict_tta(model, pre, post, FOUR_FLIPS if tta else SINGLE_PASS)
    return probs[0, 0]


def _check_overlay_inputs(masks: Iterable[torch.Tensor], base_image: torch.Tensor) -> None:
    size = tuple(base_image.shape[-2:])
    for mask in masks:
        if tuple(mask.shape) != size:
            raise ShapeError(f"Mask {list(mask.shape)} does not match base image size {list(size)}")


def render_error_overlay(pred_mask: torch.Tensor, gt_mask: torch.Tensor, base_image: torch.Tensor) -> np.ndarray:
    """
    Error map as ``[H,W,3]`` uint8.

    True positives are white, false positives red, false negatives blue; true
    negatives show the base image dimmed to half brightness.
    """
    _check_overlay_inputs((pred_mask, gt_mask), base_image)
    pred = pred_mask.bool().cpu().numpy()
    gt = gt_mask.bool().cpu().numpy()

    overlay = np.round(image_to_uint8(base_image).astype(np.float64) * TN_DIM_FACTOR).astype(np.uint8)
    overlay[pred & gt] = COLOR_TP
    overlay[pred & ~gt] = COLOR_FP
    overlay[~pred & gt] = COLOR_FN
    return overlay


def render_dropped_overlay(gt_mask: torch.Tensor, loss_mask: torch.Tensor, base_image: torch.Tensor) -> np.ndarray:
    """Base image with every pixel dropped from the loss (``M = 0``) painted red."""
    _check_overlay_inputs((gt_mask, loss_mask), base_image)
    overlay = image_to_uint8(base_image).copy()
    overlay[loss_mask.cpu().numpy() == 0] = COLOR_DROPPED
    return overlay


@dataclass(frozen=True, slots=True, kw_only=True)
class Evaluation:
    counts: ConfusionCounts
    report: MetricReport


def evaluate(
    model: nn.Module,
    samples: Iterable[BitemporalSample],
    tta: bool = False,
    threshold: float = DEFAULT_THRESHOLD,
) -> Evaluation:
    """Pool confusion counts over all samples (micro-averaging) and derive the metrics."""
    was_training = model.training
    model.eval()
    counts = ConfusionCounts()
    try:
        for sample in samples:
            probs = predict_sample(model, sample, tta=tta)
            counts = counts + confusion(probs > threshold, sample.gt_mask)
    finally:
        model.train(was_training)
    return Evaluation(counts=counts, report=report(counts))


def _save_png(array: np.ndarray, path: Path) -> None:
    Image.fromarray(array, mode="RGB" if array.ndim == 3 else "L").save(path)


def write_predictions(
    model: nn.Module,
    samples: Iterable[BitemporalSample],
    out_dir: str | Path,
    tta: bool = True,
    threshold: float = DEFAULT_THRESHOLD,
    delta: float = 0.3,
    seed: int = 0,
) -> int:
    """
    Write ``<id>_prob.png``, ``<id>_mask.png``, ``<id>_overlay.png`` and ``<id>_dropped.png``.

    The dropped-pixel overlay shows one CEM mask draw with masking ratio ``delta``.
    Returns the number of samples written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    generator = torch.Generator().manual_seed(seed)
    was_training = model.training
    model.eval()
    written = 0
    try:
        for sample in samples:
            probs = predict_sample(model, sample, tta=tta)
            pred = probs > threshold
            prob_png = probs.mul(255.0).round().to(torch.uint8).cpu().numpy()
            mask_png = pred.to(torch.uint8).mul(255).cpu().numpy()
            loss_mask = cem_mask(sample.gt_mask.float(), delta, generator)

            _save_png(prob_png, out_dir / f"{sample.id}_prob.png")
            _save_png(mask_png, out_dir / f"{sample.id}_mask.png")
            _save_png(
                render_error_overlay(pred, sample.gt_mask, sample.post_image),
                out_dir / f"{sample.id}_overlay.png",
            )
            _save_png(
                render_dropped_overlay(sample.gt_mask, loss_mask, sample.post_image),
                out_dir / f"{sample.id}_dropped.png",
            )
            written += 1
    finally:
        model.train(was_training)
    logger.info("Wrote predictions for %d samples to %s", written, out_dir)
    return written
