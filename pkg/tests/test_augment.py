import pytest
import torch

from cemcd.augment import AugmentParams, Flip, apply_augment, augment, sample_augment_params
from cemcd.data import BitemporalSample
from cemcd.exceptions import ConfigError


def _marked_sample(size: int = 64) -> BitemporalSample:
    """A sample whose mask is recoverable from the red channel of the pre image."""
    generator = torch.Generator().manual_seed(1)
    gt = (torch.rand(size, size, generator=generator) > 0.8).to(torch.uint8)
    pre = torch.rand(3, size, size, generator=generator) * 0.4
    pre[0] = gt.float() * 0.5 + 0.25
    post = pre.flip(0)
    return BitemporalSample(pre_image=pre, post_image=post, gt_mask=gt, id="m")


class TestFlip:
    @pytest.mark.parametrize("flip", list(Flip))
    def test_involution(self, flip: Flip) -> None:
        """Applying a flip twice restores the input."""
        x = torch.arange(2 * 3 * 4, dtype=torch.float32).reshape(2, 3, 4)
        assert torch.equal(flip(flip(x)), x)

    def test_axes(self) -> None:
        """Horizontal flips reverse columns, vertical flips reverse rows."""
        x = torch.tensor([[1, 2], [3, 4]])
        assert Flip.HORIZONTAL(x).tolist() == [[2, 1], [4, 3]]
        assert Flip.VERTICAL(x).tolist() == [[3, 4], [1, 2]]
        assert Flip.BOTH(x).tolist() == [[4, 3], [2, 1]]
        assert Flip.IDENTITY(x) is x


class TestAugment:
    def test_geometry_shared_by_all_tensors(self) -> None:
        """After flip and crop the mask still lines up with the images."""
        sample = _marked_sample()
        params = AugmentParams(hflip=True, vflip=True, top=10, left=22, crop_size=32)
        out = apply_augment(sample, params)
        assert out.size == (32, 32)
        assert torch.equal(out.gt_mask, (out.pre_image[0] > 0.5).to(torch.uint8))
        assert torch.equal(out.post_image, out.pre_image.flip(0))

    def test_crop_window(self) -> None:
        """Without flips the crop is a plain slice."""
        sample = _marked_sample()
        out = apply_augment(sample, AugmentParams(hflip=False, vflip=False, top=32, left=0, crop_size=32))
        assert torch.equal(out.pre_image, sample.pre_image[:, 32:64, 0:32])

    def test_random_augment_keeps_alignment(self) -> None:
        """Sampled augmentations preserve the mask alignment as well."""
        sample = _marked_sample()
        generator = torch.Generator().manual_seed(0)
        for _ in range(8):
            out = augment(sample, generator, 32)
            assert torch.equal(out.gt_mask, (out.pre_image[0] > 0.5).to(torch.uint8))

    def test_same_generator_state_same_params(self) -> None:
        """Parameters depend only on the generator state."""
        first = sample_augment_params((64, 64), 32, torch.Generator().manual_seed(9))
        second = sample_augment_params((64, 64), 32, torch.Generator().manual_seed(9))
        assert first == second
        assert 0 <= first.top <= 32
        assert 0 <= first.left <= 32

    def test_crop_larger_than_tile(self) -> None:
        """Crops cannot exceed the tile."""
        with pytest.raises(ConfigError, match="exceeds"):
            sample_augment_params((32, 32), 64, torch.Generator())

    def test_crop_window_out_of_bounds(self) -> None:
        """Hand-built windows are checked too."""
        with pytest.raises(ConfigError, match="exceeds"):
            apply_augment(_marked_sample(), AugmentParams(hflip=False, vflip=False, top=40, left=0, crop_size=32))
