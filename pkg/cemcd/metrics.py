"""Confusion counting and the change-detection metric suite."""

import json
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import marshmallow_recipe as mr
import torch

from .exceptions import EmptyEvaluationError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True, kw_only=True)
class ConfusionCounts:
    """Pixel tallies with change as the positive class. Addition pools counts across tiles."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if not isinstance(other, ConfusionCounts):
            return NotImplemented
        return ConfusionCounts(
            tp=self.tp + other.tp,
            fp=self.fp + other.fp,
            fn=self.fn + other.fn,
            tn=self.tn + other.tn,
        )


@dataclass(frozen=True, slots=True, kw_only=True)
class MetricReport:
    precision: float
    recall: float
    f1: float
    oa: float
    iou: float
    f1_bg: float
    iou_bg: float
    mf1: float
    miou: float


def confusion(pred: torch.Tensor, gt: torch.Tensor) -> ConfusionCounts:
    if pred.shape != gt.shape:
        raise ShapeError(f"Prediction {list(pred.shape)} and ground truth {list(gt.shape)} differ in shape")
    pred = pred.detach().bool()
    gt = gt.detach().bool()
    return ConfusionCounts(
        tp=int((pred & gt).sum()),
        fp=int((pred & ~gt).sum()),
        fn=int((~pred & gt).sum()),
        tn=int((~pred & ~gt).sum()),
    )


def pool(counts: Iterable[ConfusionCounts]) -> ConfusionCounts:
    return sum(counts, ConfusionCounts())


def _ratio(numerator: int, denominator: int) -> float:
    # 0/0 is reported as 0
    return numerator / denominator if denominator else 0.0


def _f1(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


def report(counts: ConfusionCounts) -> MetricReport:
    """
    Derive every metric from pooled counts.

    Background metrics swap the class roles (TN becomes the true positive);
    ``mf1`` and ``miou`` are unweighted means over the two classes.
    """
    if counts.total <= 0:
        raise EmptyEvaluationError("Cannot compute metrics over zero pixels")

    precision = _ratio(counts.tp, counts.tp + counts.fp)
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    f1 = _f1(precision, recall)
    iou = _ratio(counts.tp, counts.tp + counts.fp + counts.fn)

    precision_bg = _ratio(counts.tn, counts.tn + counts.fn)
    recall_bg = _ratio(counts.tn, counts.tn + counts.fp)
    f1_bg = _f1(precision_bg, recall_bg)
    iou_bg = _ratio(counts.tn, counts.tn + counts.fn + counts.fp)

    return MetricReport(
        precision=precision,
        recall=recall,
        f1=f1,
        oa=(counts.tp + counts.tn) / counts.total,
        iou=iou,
        f1_bg=f1_bg,
        iou_bg=iou_bg,
        mf1=(f1 + f1_bg) / 2,
        miou=(iou + iou_bg) / 2,
    )


def format_report(metrics: MetricReport) -> str:
    """Flat ``key=value`` block with percentages to two decimals."""
    return "\n".join(f"{f.name}={100 * getattr(metrics, f.name):.2f}" for f in fields(metrics))


def write_report(metrics: MetricReport, path: str | Path, counts: ConfusionCounts | None = None) -> None:
    """Write the structured report as JSON next to its ``key=value`` text form."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload: dict[str, Any] = {"metrics": mr.dump(metrics)}
    if counts is not None:
        payload["counts"] = mr.dump(counts)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    path.with_suffix(".txt").write_text(format_report(metrics) + "\n", encoding="utf-8")


def read_report(path: str | Path) -> MetricReport:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    result: MetricReport = mr.load(MetricReport, payload["metrics"])
    return result


@dataclass(frozen=True, slots=True, kw_only=True)
class SeedSummary:
    """Mean and range of each metric over repeated runs, with the per-run reports kept."""

    mean: MetricReport
    minimum: MetricReport
    maximum: MetricReport
    runs: tuple[MetricReport, ...]


def aggregate(reports: Sequence[MetricReport]) -> SeedSummary:
    if not reports:
        raise EmptyEvaluationError("Cannot aggregate zero reports")
    names = [f.name for f in fields(MetricReport)]

    def reduce(fn: Any) -> MetricReport:
        return MetricReport(**{name: fn([getattr(r, name) for r in reports]) for name in names})

    return SeedSummary(
        mean=reduce(lambda values: sum(values) / len(values)),
        minimum=reduce(min),
        maximum=reduce(max),
        runs=tuple(reports),
    )
