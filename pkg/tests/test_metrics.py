import json
from pathlib import Path

import pytest
import torch

from cemcd.exceptions import EmptyEvaluationError, ShapeError
from cemcd.metrics import (
    ConfusionCounts,
    MetricReport,
    aggregate,
    confusion,
    format_report,
    pool,
    read_report,
    report,
    write_report,
)


def _brute_force(pred: torch.Tensor, gt: torch.Tensor) -> ConfusionCounts:
    tp = fp = fn = tn = 0
    for p, g in zip(pred.flatten().tolist(), gt.flatten().tolist(), strict=True):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def _safe(a: float, b: float) -> float:
    return a / b if b else 0.0


class TestConfusion:
    def test_perfect_prediction(self) -> None:
        """pred == gt with K change pixels of N gives tp = K, tn = N - K."""
        gt = torch.zeros(8, 8, dtype=torch.uint8)
        gt[2:4, 2:5] = 1
        assert confusion(gt.clone(), gt) == ConfusionCounts(tp=6, fp=0, fn=0, tn=58)

    def test_all_false_positives(self) -> None:
        """All-ones prediction on all-zero truth is N false positives."""
        assert confusion(torch.ones(4, 4), torch.zeros(4, 4)) == ConfusionCounts(fp=16)

    def test_matches_pixel_loop(self) -> None:
        """Counts and metrics match a per-pixel computation on 100 random 8x8 pairs."""
        generator = torch.Generator().manual_seed(0)
        for _ in range(100):
            pred = torch.rand(8, 8, generator=generator) > 0.6
            gt = torch.rand(8, 8, generator=generator) > 0.7
            counts = confusion(pred, gt)
            assert counts == _brute_force(pred, gt)

            metrics = report(counts)
            precision = _safe(counts.tp, counts.tp + counts.fp)
            recall = _safe(counts.tp, counts.tp + counts.fn)
            assert metrics.precision == precision
            assert metrics.recall == recall
            assert metrics.f1 == _safe(2 * precision * recall, precision + recall)
            assert metrics.iou == _safe(counts.tp, counts.tp + counts.fp + counts.fn)
            assert metrics.oa == (counts.tp + counts.tn) / 64

    def test_shape_mismatch(self) -> None:
        """Prediction and truth must share a shape."""
        with pytest.raises(ShapeError):
            confusion(torch.zeros(4, 4), torch.zeros(4, 5))


class TestReport:
    def test_worked_example(self) -> None:
        """tp=50, fp=50 gives P=0.5, R=1, F1=2/3, OA=0.5, IoU=0.5."""
        metrics = report(ConfusionCounts(tp=50, fp=50, fn=0, tn=0))
        assert metrics.precision == 0.5
        assert metrics.recall == 1.0
        assert metrics.f1 == pytest.approx(2 / 3)
        assert metrics.oa == 0.5
        assert metrics.iou == 0.5

    def test_both_classes(self) -> None:
        """tp=2, fp=1, fn=1, tn=6 gives IoU_bg = 6/8 and mIoU = 0.625."""
        metrics = report(ConfusionCounts(tp=2, fp=1, fn=1, tn=6))
        assert metrics.precision == pytest.approx(2 / 3)
        assert metrics.recall == pytest.approx(2 / 3)
        assert metrics.f1 == pytest.approx(2 / 3)
        assert metrics.oa == pytest.approx(0.8)
        assert metrics.iou == pytest.approx(0.5)
        assert metrics.iou_bg == pytest.approx(6 / 8)
        assert metrics.miou == pytest.approx(0.625)
        assert metrics.f1_bg == pytest.approx(6 / 7)
        assert metrics.mf1 == pytest.approx((2 / 3 + 6 / 7) / 2)

    def test_perfect(self) -> None:
        """A perfect prediction scores 1.0 everywhere."""
        metrics = report(ConfusionCounts(tp=10, tn=90))
        assert all(value == 1.0 for value in vars_of(metrics).values())

    def test_no_change_anywhere(self) -> None:
        """0/0 ratios are reported as 0."""
        metrics = report(ConfusionCounts(tn=16))
        assert metrics.precision == 0.0
        assert metrics.recall == 0.0
        assert metrics.f1 == 0.0
        assert metrics.oa == 1.0

    def test_empty(self) -> None:
        """Zero pixels cannot be scored."""
        with pytest.raises(EmptyEvaluationError):
            report(ConfusionCounts())

    def test_pooling_is_micro_average(self) -> None:
        """Pooled counts are the element-wise sum of per-tile counts."""
        tiles = [ConfusionCounts(tp=1, fp=2, fn=3, tn=4), ConfusionCounts(tp=10, fp=0, fn=0, tn=6)]
        assert pool(tiles) == ConfusionCounts(tp=11, fp=2, fn=3, tn=10)


def vars_of(metrics: MetricReport) -> dict[str, float]:
    return {name: getattr(metrics, name) for name in MetricReport.__dataclass_fields__}


class TestReportFiles:
    def test_format_two_decimals(self) -> None:
        """Percentages are printed with two decimals."""
        text = format_report(report(ConfusionCounts(tp=50, fp=50)))
        lines = dict(line.split("=") for line in text.splitlines())
        assert lines["precision"] == "50.00"
        assert lines["f1"] == "66.67"

    def test_write_and_read(self, tmp_path: Path) -> None:
        """Reports persist as JSON with a key=value text twin."""
        counts = ConfusionCounts(tp=2, fp=1, fn=1, tn=6)
        metrics = report(counts)
        path = tmp_path / "out" / "report.json"
        write_report(metrics, path, counts)
        assert read_report(path) == metrics
        assert json.loads(path.read_text())["counts"]["tn"] == 6
        assert "miou=62.50" in path.with_suffix(".txt").read_text()


class TestAggregate:
    def test_single_run(self) -> None:
        """One run aggregates to itself."""
        metrics = report(ConfusionCounts(tp=3, fp=1, fn=2, tn=10))
        summary = aggregate([metrics])
        assert summary.mean == metrics
        assert summary.minimum == summary.maximum == metrics

    def test_mean_within_range(self) -> None:
        """The mean of each metric lies between its minimum and maximum."""
        runs = [
            report(ConfusionCounts(tp=3, fp=1, fn=2, tn=10)),
            report(ConfusionCounts(tp=5, fp=3, fn=0, tn=8)),
            report(ConfusionCounts(tp=1, fp=0, fn=4, tn=11)),
        ]
        summary = aggregate(runs)
        for name, value in vars_of(summary.mean).items():
            assert getattr(summary.minimum, name) <= value <= getattr(summary.maximum, name)

    def test_nothing_to_aggregate(self) -> None:
        """Aggregating zero runs is an error."""
        with pytest.raises(EmptyEvaluationError):
            aggregate([])
