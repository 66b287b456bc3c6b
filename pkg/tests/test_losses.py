import math
from collections.abc import Callable

import pytest
import torch

from cemcd.exceptions import ConfigError, ShapeError
from cemcd.losses import (
    LossConfig,
    MaskFallbackCounter,
    bce_dice,
    bce_loss,
    bce_map,
    build_criterion,
    cem_loss,
    cem_loss_from_logits,
    cem_mask,
    dice_loss,
    focal_loss,
    kept_fraction_bound,
    weighted_bce,
)
from cemcd.typedefs import LOSS_KINDS

LN2 = math.log(2.0)
MASKING_RATIOS = [0.2, 0.3, 0.4, 0.5, 0.6]


def _instance(generator: torch.Generator, shape: tuple[int, ...] = (16, 16)) -> tuple[torch.Tensor, torch.Tensor]:
    probs = torch.rand(shape, generator=generator, dtype=torch.float64) * 0.98 + 0.01
    gt = (torch.rand(shape, generator=generator, dtype=torch.float64) > 0.9).double()
    return probs, gt


def _reference_cem(probs: torch.Tensor, gt: torch.Tensor, noise: torch.Tensor, delta: float, eps: float) -> float:
    """Pixel-by-pixel masked cross entropy."""
    total = 0.0
    kept = 0
    height, width = probs.shape
    for i in range(height):
        for j in range(width):
            y = float(gt[i, j])
            if y == 1.0 or float(noise[i, j]) >= delta:
                p = min(max(float(probs[i, j]), eps), 1.0 - eps)
                total += -(y * math.log(p) + (1.0 - y) * math.log(1.0 - p))
                kept += 1
    return total / kept


class TestBceMap:
    @pytest.mark.parametrize("y", [0.0, 1.0])
    def test_half_probability(self, y: float) -> None:
        """p = 0.5 costs ln 2 for either label."""
        value = bce_map(torch.tensor([0.5], dtype=torch.float64), torch.tensor([y], dtype=torch.float64))
        assert float(value[0]) == pytest.approx(LN2, abs=1e-12)

    @pytest.mark.parametrize("y", [0.0, 1.0])
    def test_perfect_prediction(self, y: float) -> None:
        """Clamped perfect predictions cost almost nothing."""
        value = bce_map(torch.tensor([y], dtype=torch.float64), torch.tensor([y], dtype=torch.float64))
        assert 0.0 <= float(value[0]) <= 1.2e-7

    def test_shape_mismatch(self) -> None:
        """Prediction and ground truth must have the same shape."""
        with pytest.raises(ShapeError):
            bce_map(torch.rand(4, 4), torch.zeros(4, 5))


class TestCemMask:
    def test_change_pixels_always_kept(self) -> None:
        """A million change pixels survive any masking ratio."""
        gt = torch.ones(1000, 1000)
        mask = cem_mask(gt, 0.6, torch.Generator().manual_seed(0))
        assert bool((mask == 1).all())

    def test_zero_ratio_keeps_everything(self) -> None:
        """With delta = 0 nothing is dropped."""
        mask = cem_mask(torch.zeros(64, 64), 0.0, torch.Generator().manual_seed(0))
        assert bool((mask == 1).all())

    @pytest.mark.parametrize("delta", MASKING_RATIOS)
    def test_kept_fraction(self, delta: float) -> None:
        """On pure background the kept fraction stays within the binomial band around 1 - delta."""
        gt = torch.zeros(256, 256)
        mask = cem_mask(gt, delta, torch.Generator().manual_seed(11))
        kept = float(mask.mean())
        assert abs(kept - (1.0 - delta)) <= kept_fraction_bound(delta, gt.numel())

    def test_values_and_dtype(self) -> None:
        """Masks are float tensors of zeros and ones without autograd history."""
        gt = torch.zeros(8, 8, dtype=torch.float64, requires_grad=True)
        mask = cem_mask(gt, 0.5, torch.Generator().manual_seed(2))
        assert mask.dtype == torch.float64
        assert not mask.requires_grad
        assert set(mask.unique().tolist()) <= {0.0, 1.0}

    def test_fresh_draw_per_call(self) -> None:
        """Consecutive calls on one generator give different masks."""
        generator = torch.Generator().manual_seed(0)
        gt = torch.zeros(32, 32)
        assert not torch.equal(cem_mask(gt, 0.5, generator), cem_mask(gt, 0.5, generator))


class TestCemLoss:
    def test_zero_ratio_equals_bce(self) -> None:
        """With delta = 0 CEM is the mean BCE on 100 random instances."""
        generator = torch.Generator().manual_seed(0)
        for _ in range(100):
            probs, gt = _instance(generator)
            assert abs(float(cem_loss(probs, gt, 0.0, generator)) - float(bce_loss(probs, gt))) <= 1e-10

    def test_matches_pixel_loop(self) -> None:
        """CEM agrees with a per-pixel reference on 25 random 16x16 instances."""
        data = torch.Generator().manual_seed(5)
        for seed in range(25):
            probs, gt = _instance(data)
            delta = MASKING_RATIOS[seed % len(MASKING_RATIOS)]
            loss = cem_loss(probs, gt, delta, torch.Generator().manual_seed(seed))
            noise = torch.rand(gt.shape, generator=torch.Generator().manual_seed(seed))
            assert abs(float(loss) - _reference_cem(probs, gt, noise, delta, 1e-7)) <= 1e-10

    def test_two_pixel_example(self) -> None:
        """y = [1, 0], p = [0.5, 0.5] with both pixels kept costs ln 2."""
        probs = torch.tensor([[0.5], [0.5]], dtype=torch.float64)
        gt = torch.tensor([[1.0], [0.0]], dtype=torch.float64)
        loss = cem_loss(probs, gt, mask=torch.ones(2, 1, dtype=torch.float64))
        assert float(loss) == pytest.approx(LN2, abs=1e-12)

    def test_dropped_pixels_do_not_count(self) -> None:
        """Only kept pixels enter the mean."""
        probs = torch.tensor([0.9, 0.1, 0.5], dtype=torch.float64)
        gt = torch.tensor([1.0, 1.0, 0.0], dtype=torch.float64)
        loss = cem_loss(probs, gt, mask=torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64))
        assert float(loss) == pytest.approx((-math.log(0.9) + LN2) / 2, abs=1e-12)

    def test_empty_mask_falls_back_to_bce(self) -> None:
        """A mask that keeps nothing degrades to plain BCE and is counted."""
        counter = MaskFallbackCounter()
        probs, gt = _instance(torch.Generator().manual_seed(1), (4, 4))
        loss = cem_loss(probs, gt, mask=torch.zeros(4, 4, dtype=torch.float64), counter=counter)
        assert float(loss) == pytest.approx(float(bce_loss(probs, gt)), abs=1e-12)
        assert counter.count == 1

    def test_mask_shape_mismatch(self) -> None:
        """Frozen masks must match the ground truth."""
        with pytest.raises(ShapeError):
            cem_loss(torch.rand(4, 4), torch.zeros(4, 4), mask=torch.ones(2, 2))

    def test_gradient_matches_finite_differences(self) -> None:
        """The gradient with respect to probabilities agrees with central differences on 4x4."""
        probs, gt = _instance(torch.Generator().manual_seed(2), (4, 4))
        mask = cem_mask(gt, 0.3, torch.Generator().manual_seed(3))
        probs.requires_grad_(True)
        cem_loss(probs, gt, mask=mask).backward()
        assert probs.grad is not None

        step = 1e-6
        with torch.no_grad():
            for i in range(4):
                for j in range(4):
                    shifted = probs.detach().clone()
                    shifted[i, j] += step
                    upper = float(cem_loss(shifted, gt, mask=mask))
                    shifted[i, j] -= 2 * step
                    lower = float(cem_loss(shifted, gt, mask=mask))
                    numeric = (upper - lower) / (2 * step)
                    analytic = float(probs.grad[i, j])
                    if numeric == 0.0:
                        assert analytic == 0.0
                    else:
                        assert abs(analytic - numeric) / abs(numeric) < 1e-6

    def test_from_logits_agrees(self) -> None:
        """The logit form matches the probability form away from saturation."""
        logits = torch.randn(8, 8, dtype=torch.float64)
        gt = (torch.rand(8, 8) > 0.7).double()
        mask = cem_mask(gt, 0.3, torch.Generator().manual_seed(0))
        expected = cem_loss(torch.sigmoid(logits), gt, mask=mask)
        assert float(cem_loss_from_logits(logits, gt, mask=mask)) == pytest.approx(float(expected), rel=1e-9)

    def test_from_logits_mask_shape_mismatch(self) -> None:
        """The logit form rejects a frozen mask of the wrong shape too."""
        with pytest.raises(ShapeError, match="Mask"):
            cem_loss_from_logits(torch.randn(4, 4), torch.zeros(4, 4), mask=torch.ones(4, 2))


def _fixed_mask_cem(gt: torch.Tensor) -> Callable[..., torch.Tensor]:
    mask = cem_mask(gt, 0.3, torch.Generator().manual_seed(11))
    return lambda probs, target: cem_loss(probs, target, mask=mask)


class TestLossShape:
    GT = torch.tensor([[0.0, 1.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]], dtype=torch.float64)

    @pytest.mark.parametrize("name", ["bce", "cem", "focal", "wbce", "bce_dice"])
    def test_decreases_towards_truth(self, name: str) -> None:
        """Moving every prediction towards its label lowers the loss."""
        losses = {
            "bce": bce_loss,
            "cem": _fixed_mask_cem(self.GT),
            "focal": focal_loss,
            "wbce": weighted_bce,
            "bce_dice": bce_dice,
        }
        values = []
        for t in (0.2, 0.4, 0.6, 0.8, 0.95):
            probs = self.GT * t + (1.0 - self.GT) * (1.0 - t)
            values.append(float(losses[name](probs, self.GT)))
        assert all(a > b for a, b in zip(values, values[1:]))

    @pytest.mark.parametrize("name", ["cem", "focal", "wbce", "bce_dice"])
    def test_pixel_order_does_not_matter(self, name: str) -> None:
        """Permuting pixels of prediction and truth together leaves the loss unchanged."""
        probs, gt = _instance(torch.Generator().manual_seed(12))
        mask = cem_mask(gt, 0.3, torch.Generator().manual_seed(13))
        order = torch.randperm(probs.numel(), generator=torch.Generator().manual_seed(14))

        def shuffled(t: torch.Tensor) -> torch.Tensor:
            return t.flatten()[order].reshape(t.shape)

        losses = {
            "cem": lambda p, y, m: cem_loss(p, y, mask=m),
            "focal": lambda p, y, m: focal_loss(p, y),
            "wbce": lambda p, y, m: weighted_bce(p, y),
            "bce_dice": lambda p, y, m: bce_dice(p, y),
        }
        original = float(losses[name](probs, gt, mask))
        permuted = float(losses[name](shuffled(probs), shuffled(gt), shuffled(mask)))
        assert permuted == pytest.approx(original, rel=1e-12)


class TestBaselineLosses:
    def test_focal_single_pixel(self) -> None:
        """y = 1, p = 0.5, alpha = 0.5, gamma = 2 gives 0.5 * 0.25 * ln 2."""
        value = focal_loss(torch.tensor([0.5], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64))
        assert float(value) == pytest.approx(0.5 * 0.25 * LN2, abs=1e-12)

    def test_focal_without_focusing_is_half_bce(self) -> None:
        """gamma = 0 and alpha = 0.5 reduce focal loss to half the mean BCE."""
        probs, gt = _instance(torch.Generator().manual_seed(4))
        assert float(focal_loss(probs, gt, alpha=0.5, gamma=0.0)) == pytest.approx(
            0.5 * float(bce_loss(probs, gt)), abs=1e-12
        )

    def test_focal_perfect_prediction(self) -> None:
        """Perfect predictions cost almost nothing."""
        gt = torch.tensor([0.0, 1.0, 1.0], dtype=torch.float64)
        assert float(focal_loss(gt.clone(), gt)) <= 1e-7

    def test_weighted_bce_unit_weights(self) -> None:
        """w0 = w1 = 1 is plain mean BCE."""
        probs, gt = _instance(torch.Generator().manual_seed(6))
        assert float(weighted_bce(probs, gt, w0=1.0, w1=1.0)) == pytest.approx(float(bce_loss(probs, gt)), abs=1e-12)

    def test_weighted_bce_single_background_pixel(self) -> None:
        """y = 0, p = 0.5, w0 = 0.7 gives 0.7 ln 2."""
        value = weighted_bce(torch.tensor([0.5], dtype=torch.float64), torch.tensor([0.0], dtype=torch.float64))
        assert float(value) == pytest.approx(0.7 * LN2, abs=1e-12)

    def test_weighted_bce_two_pixels(self) -> None:
        """A mixed two-pixel case matches the hand sum."""
        probs = torch.tensor([0.8, 0.4], dtype=torch.float64)
        gt = torch.tensor([1.0, 0.0], dtype=torch.float64)
        expected = (1.0 * -math.log(0.8) + 0.7 * -math.log(0.6)) / 2
        assert float(weighted_bce(probs, gt, w0=0.7, w1=1.0)) == pytest.approx(expected, abs=1e-12)

    def test_bce_dice_perfect_prediction(self) -> None:
        """Both terms vanish on a perfect prediction."""
        gt = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
        assert float(bce_dice(gt.clone(), gt)) == pytest.approx(0.0, abs=1e-6)

    def test_bce_dice_weights(self) -> None:
        """Weights (1, 0) give plain BCE."""
        probs, gt = _instance(torch.Generator().manual_seed(7))
        assert float(bce_dice(probs, gt, 1.0, 0.0)) == pytest.approx(float(bce_loss(probs, gt)), abs=1e-12)

    def test_bce_dice_reference(self) -> None:
        """bce_dice on a random 8x8 map matches an independent computation."""
        probs, gt = _instance(torch.Generator().manual_seed(8), (8, 8))
        p, y = probs.flatten().tolist(), gt.flatten().tolist()
        bce = sum(-(yi * math.log(pi) + (1 - yi) * math.log(1 - pi)) for pi, yi in zip(p, y, strict=True)) / len(p)
        dice = 1 - (2 * sum(pi * yi for pi, yi in zip(p, y, strict=True)) + 1) / (sum(p) + sum(y) + 1)
        assert abs(float(bce_dice(probs, gt)) - (0.7 * bce + 0.3 * dice)) <= 1e-10

    def test_dice_disjoint(self) -> None:
        """Disjoint prediction and truth approach a dice loss of one."""
        probs = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=torch.float64)
        gt = torch.tensor([0.0, 0.0, 1.0, 1.0], dtype=torch.float64)
        assert float(dice_loss(probs, gt)) == pytest.approx(1 - 1 / 4)


class TestBuildCriterion:
    @pytest.mark.parametrize("kind", LOSS_KINDS)
    def test_finite_scalar(self, kind: str) -> None:
        """Every configured loss maps logits to a finite, differentiable scalar."""
        criterion = build_criterion(LossConfig(kind=kind), torch.Generator().manual_seed(0))  # type: ignore[arg-type]
        logits = torch.randn(2, 1, 8, 8, requires_grad=True)
        gt = (torch.rand(2, 1, 8, 8) > 0.9).float()
        loss = criterion(logits, gt)
        loss.backward()
        assert loss.dim() == 0
        assert math.isfinite(float(loss))
        assert logits.grad is not None

    def test_cem_zero_ratio_matches_bce(self) -> None:
        """Configured CEM with delta = 0 equals configured BCE."""
        logits = torch.randn(2, 1, 8, 8, dtype=torch.float64)
        gt = (torch.rand(2, 1, 8, 8) > 0.9).double()
        cem = build_criterion(LossConfig(kind="cem", delta=0.0), torch.Generator().manual_seed(0))
        bce = build_criterion(LossConfig(kind="bce"))
        assert float(cem(logits, gt)) == float(bce(logits, gt))


class TestLossConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [{"kind": "hinge"}, {"delta": 1.0}, {"delta": -0.1}, {"epsilon": 0.0}, {"alpha": 1.0}, {"gamma": -1.0}],
    )
    def test_invalid(self, kwargs: dict[str, object]) -> None:
        """Out-of-range settings are configuration errors."""
        with pytest.raises(ConfigError):
            LossConfig(**kwargs)  # type: ignore[arg-type]

    def test_default_ratio(self) -> None:
        """The default masking ratio is 0.3."""
        assert LossConfig().delta == 0.3
