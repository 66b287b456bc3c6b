import numpy as np
import pytest
import torch

from cemcd.data import SynthesisConfig
from cemcd.exceptions import SynthesisError
from cemcd.synthesis import _changed_count, split_ids, synthesize_dataset, synthesize_pair


class TestSynthesizePair:
    def test_no_change_no_noise(self) -> None:
        """Without changed objects or noise the two dates are identical."""
        cfg = SynthesisConfig(num_samples=1, tile_size=64, noise_level=0.0)
        sample = synthesize_pair(cfg, np.random.default_rng(0), "p", changed_count=0)
        assert int(sample.gt_mask.sum()) == 0
        assert torch.equal(sample.post_image, sample.pre_image)

    def test_mask_marks_membership_changes(self) -> None:
        """Without noise, unchanged pixels are identical and changed pixels exist."""
        cfg = SynthesisConfig(num_samples=1, tile_size=64, noise_level=0.0, changed_count_range=(2, 2))
        sample = synthesize_pair(cfg, np.random.default_rng(4), "p", changed_count=2)
        unchanged = sample.gt_mask == 0
        assert int(sample.gt_mask.sum()) > 0
        assert torch.equal(sample.pre_image[:, unchanged], sample.post_image[:, unchanged])

    def test_noise_only_touches_post_image(self) -> None:
        """Pixel noise perturbs the post image but never the mask."""
        cfg = SynthesisConfig(num_samples=1, tile_size=64, noise_level=0.05)
        sample = synthesize_pair(cfg, np.random.default_rng(0), "p", changed_count=0)
        assert int(sample.gt_mask.sum()) == 0
        assert not torch.equal(sample.post_image, sample.pre_image)
        assert float(sample.post_image.min()) >= 0.0
        assert float(sample.post_image.max()) <= 1.0


class TestSynthesizeDataset:
    def test_seeded_runs_are_identical(self) -> None:
        """The same seed reproduces every tensor bit for bit."""
        cfg = SynthesisConfig(num_samples=3, tile_size=64, seed=7)
        first = synthesize_dataset(cfg)
        second = synthesize_dataset(cfg)
        assert [s.id for s in first] == [s.id for s in second]
        for a, b in zip(first, second, strict=True):
            assert torch.equal(a.pre_image, b.pre_image)
            assert torch.equal(a.post_image, b.post_image)
            assert torch.equal(a.gt_mask, b.gt_mask)

    def test_different_seeds_differ(self) -> None:
        """Changing the seed changes the scenes."""
        first = synthesize_dataset(SynthesisConfig(num_samples=1, tile_size=64, seed=1))
        second = synthesize_dataset(SynthesisConfig(num_samples=1, tile_size=64, seed=2))
        assert not torch.equal(first[0].pre_image, second[0].pre_image)

    def test_change_fraction_near_target(self) -> None:
        """The dataset-mean change fraction is within 0.02 of the target."""
        cfg = SynthesisConfig(num_samples=10, tile_size=128, change_fraction_target=0.05, seed=3)
        samples = synthesize_dataset(cfg)
        assert len(samples) == 10
        mean = float(np.mean([s.change_fraction for s in samples]))
        assert abs(mean - 0.05) <= 0.02

    def test_samples_are_valid(self) -> None:
        """Generated samples satisfy the sample invariants."""
        for sample in synthesize_dataset(SynthesisConfig(num_samples=2, tile_size=64, seed=0)):
            assert sample.size == (64, 64)
            assert set(sample.gt_mask.unique().tolist()) <= {0, 1}
            assert float(sample.pre_image.min()) >= 0.0
            assert float(sample.pre_image.max()) <= 1.0

    def test_majority_change_is_rejected(self) -> None:
        """Targets above one half are refused."""
        with pytest.raises(SynthesisError, match="minority"):
            synthesize_dataset(SynthesisConfig(num_samples=1, tile_size=64, change_fraction_target=0.9))

    def test_unreachable_target(self) -> None:
        """Tiny objects cannot cover a large target; generation refuses before drawing."""
        cfg = SynthesisConfig(
            num_samples=1,
            tile_size=64,
            change_fraction_target=0.4,
            changed_count_range=(1, 1),
            object_size_range=(1, 2),
            max_retries=3,
        )
        with pytest.raises(SynthesisError, match="out of reach"):
            synthesize_dataset(cfg)

    def test_no_changed_objects(self) -> None:
        """A changed-object range of (0, 0) cannot produce change and is refused."""
        cfg = SynthesisConfig(num_samples=1, tile_size=64, changed_count_range=(0, 0), change_fraction_target=0.05)
        with pytest.raises(SynthesisError, match="out of reach"):
            synthesize_dataset(cfg)

    def test_retries_are_bounded(self) -> None:
        """A target no pixel count can hit exhausts the retries."""
        cfg = SynthesisConfig(num_samples=1, tile_size=64, tolerance=1e-6, max_retries=2)
        with pytest.raises(SynthesisError, match="2 retries"):
            synthesize_dataset(cfg)

    @pytest.mark.parametrize("bounds", [(1, 1), (2, 3), (3, 4)])
    def test_changed_count_stays_in_range(self, bounds: tuple[int, int]) -> None:
        """The number of changed objects per scene never leaves the configured range."""
        cfg = SynthesisConfig(num_samples=1, tile_size=64, changed_count_range=bounds)
        rng = np.random.default_rng(0)
        counts = {_changed_count(rng, cfg) for _ in range(50)}
        assert min(counts) >= bounds[0]
        assert max(counts) <= bounds[1]


class TestSplitIds:
    def test_consecutive_blocks(self) -> None:
        """Splits take consecutive ids in train, val, test order."""
        ids = [f"i{n}" for n in range(10)]
        splits = split_ids(ids, {"train": 0.6, "val": 0.2, "test": 0.2})
        assert splits == {"train": ids[:6], "val": ids[6:8], "test": ids[8:]}

    def test_last_split_takes_remainder(self) -> None:
        """Rounding never loses ids."""
        ids = [f"i{n}" for n in range(7)]
        splits = split_ids(ids, {"train": 0.5, "test": 0.5})
        assert splits["train"] + splits["test"] == ids
