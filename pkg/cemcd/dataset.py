import logging
from collections.abc import Iterable, Iterator, Sequence
from pathlib import Path
from typing import Any

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from torch.utils.data import Dataset, Sampler

from .augment import augment
from .constants import IMAGE_SUFFIX, LABEL_DIR, LABEL_THRESHOLD, LIST_DIR, POST_DIR, PRE_DIR, SCALE_DIVISOR
from .data import BitemporalSample, DatasetManifest, check_divisible
from .exceptions import DatasetLayoutError, ImageIOError
from .typedefs import SPLITS, Split

logger = logging.getLogger(__name__)

_LAYOUT_DIRS = (PRE_DIR, POST_DIR, LABEL_DIR)


def _image_ids(directory: Path) -> set[str]:
    return {p.stem for p in directory.iterdir() if p.is_file() and p.suffix.lower() == IMAGE_SUFFIX}


def _read_list_file(path: Path) -> list[str]:
    ids = []
    for line in path.read_text(encoding="utf-8").splitlines():
        name = line.strip()
        if name:
            # Some distributions list file names rather than bare ids
            ids.append(name[: -len(IMAGE_SUFFIX)] if name.endswith(IMAGE_SUFFIX) else name)
    return ids


def load_dataset(root: str | Path, split: Split, tile_size: int) -> DatasetManifest:
    """
    Build a manifest for a bitemporal tile directory.

    The root must contain ``A/`` (pre-change), ``B/`` (post-change) and ``label/``
    directories holding identically named PNG files. When ``list/<split>.txt``
    exists it selects and orders the ids; otherwise every id is used, sorted.
    """
    check_divisible(tile_size)
    if split not in SPLITS:
        raise DatasetLayoutError(f"Unknown split {split!r}, expected one of {SPLITS}")

    root = Path(root)
    for name in _LAYOUT_DIRS:
        if not (root / name).is_dir():
            raise DatasetLayoutError(f"Missing directory {root / name}")

    pre_ids, post_ids, label_ids = (_image_ids(root / name) for name in _LAYOUT_DIRS)
    complete = pre_ids & post_ids & label_ids
    incomplete = sorted((pre_ids | post_ids | label_ids) - complete)
    if incomplete:
        raise DatasetLayoutError(f"Sample {incomplete[0]!r} is missing from one of {_LAYOUT_DIRS}")

    list_file = root / LIST_DIR / f"{split}.txt"
    if list_file.is_file():
        sample_ids = _read_list_file(list_file)
        for sample_id in sample_ids:
            if sample_id not in complete:
                raise DatasetLayoutError(f"Sample {sample_id!r} listed in {list_file} has no image files")
    else:
        sample_ids = sorted(complete)

    logger.info("Loaded %s split from %s: %d samples", split, root, len(sample_ids))
    return DatasetManifest(root_path=root, split=split, sample_ids=tuple(sample_ids), tile_size=tile_size)


def _open_image(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert(mode))
    except (OSError, UnidentifiedImageError) as e:
        raise ImageIOError(f"Cannot read image {path}: {e}") from e


def read_sample(manifest: DatasetManifest, sample_id: str) -> BitemporalSample:
    """Read one triple; images are scaled to [0,1], labels binarised at > 127."""
    if sample_id not in manifest.sample_ids:
        raise DatasetLayoutError(f"Sample {sample_id!r} is not part of the {manifest.split} split")

    file_name = sample_id + IMAGE_SUFFIX
    pre = _open_image(manifest.root_path / PRE_DIR / file_name, "RGB")
    post = _open_image(manifest.root_path / POST_DIR / file_name, "RGB")
    label = _open_image(manifest.root_path / LABEL_DIR / file_name, "L")

    if not pre.shape[:2] == post.shape[:2] == label.shape:
        raise DatasetLayoutError(
            f"Sample {sample_id!r} has mismatched sizes: A={pre.shape[:2]}, B={post.shape[:2]}, label={label.shape}"
        )
    height, width = label.shape
    if height % SCALE_DIVISOR or width % SCALE_DIVISOR:
        raise DatasetLayoutError(f"Sample {sample_id!r} is {height}x{width}, not a multiple of {SCALE_DIVISOR}")
    if (height, width) != (manifest.tile_size, manifest.tile_size):
        raise DatasetLayoutError(
            f"Sample {sample_id!r} is {height}x{width}, expected {manifest.tile_size}x{manifest.tile_size} tiles"
        )

    return BitemporalSample(
        pre_image=torch.from_numpy(pre.copy()).permute(2, 0, 1).float().div(255.0),
        post_image=torch.from_numpy(post.copy()).permute(2, 0, 1).float().div(255.0),
        gt_mask=torch.from_numpy((label > LABEL_THRESHOLD).astype(np.uint8)),
        id=sample_id,
    )


def image_to_uint8(image: torch.Tensor) -> np.ndarray:
    """Convert a ``[3,H,W]`` image in [0,1] to an ``[H,W,3]`` uint8 array."""
    array = image.detach().cpu().clamp(0.0, 1.0).mul(255.0).round().to(torch.uint8)
    return array.permute(1, 2, 0).numpy()


def write_sample(sample: BitemporalSample, root: str | Path) -> None:
    root = Path(root)
    file_name = sample.id + IMAGE_SUFFIX
    for name in _LAYOUT_DIRS:
        (root / name).mkdir(parents=True, exist_ok=True)

    Image.fromarray(image_to_uint8(sample.pre_image), mode="RGB").save(root / PRE_DIR / file_name)
    Image.fromarray(image_to_uint8(sample.post_image), mode="RGB").save(root / POST_DIR / file_name)
    label = (sample.gt_mask.cpu().numpy() > 0).astype(np.uint8) * 255
    Image.fromarray(label, mode="L").save(root / LABEL_DIR / file_name)


def write_split_lists(root: str | Path, splits: dict[str, Sequence[str]]) -> None:
    list_dir = Path(root) / LIST_DIR
    list_dir.mkdir(parents=True, exist_ok=True)
    for split, ids in splits.items():
        (list_dir / f"{split}.txt").write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")


def write_dataset(
    samples: Iterable[BitemporalSample],
    root: str | Path,
    splits: dict[str, Sequence[str]] | None = None,
) -> None:
    """Write samples in the ``A/ B/ label/ list/`` layout read by :func:`load_dataset`."""
    count = 0
    for sample in samples:
        write_sample(sample, root)
        count += 1
    if splits:
        write_split_lists(root, splits)
    logger.info("Wrote %d samples to %s", count, root)


class BitemporalDataset(Dataset[dict[str, Any]]):
    """
    Torch dataset over a manifest or an in-memory sample list.

    With ``crop_size`` set, every item is augmented with a generator derived from
    ``(seed, epoch, index)``, so DataLoader workers share no mutable random state
    and a run is reproducible regardless of the worker count.
    """

    def __init__(
        self,
        source: DatasetManifest | Sequence[BitemporalSample],
        crop_size: int | None = None,
        seed: int = 0,
    ) -> None:
        self._manifest = source if isinstance(source, DatasetManifest) else None
        self._samples = None if isinstance(source, DatasetManifest) else list(source)
        self.crop_size = crop_size
        self.seed = seed
        self.epoch = 0

    def __len__(self) -> int:
        if self._manifest is not None:
            return len(self._manifest)
        assert self._samples is not None
        return len(self._samples)

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def sample(self, index: int) -> BitemporalSample:
        if self._manifest is not None:
            return read_sample(self._manifest, self._manifest.sample_ids[index])
        assert self._samples is not None
        return self._samples[index]

    def __getitem__(self, index: int) -> dict[str, Any]:
        sample = self.sample(index)
        if self.crop_size is not None:
            stream = np.random.SeedSequence([self.seed, self.epoch, index]).generate_state(1)[0]
            generator = torch.Generator().manual_seed(int(stream))
            sample = augment(sample, generator, self.crop_size)
        return {
            "pre": sample.pre_image,
            "post": sample.post_image,
            "gt": sample.gt_mask.float().unsqueeze(0),
            "id": sample.id,
        }


class EpochSampler(Sampler[int]):
    """
    Seeded per-epoch permutation of ``range(size)``.

    The order of epoch ``e`` depends only on ``(seed, e)``, so a run stopped part
    way through an epoch can resume from ``start`` with the same remaining order.
    """

    def __init__(self, size: int, seed: int = 0) -> None:
        self.size = size
        self.seed = seed
        self.epoch = 0
        self.start = 0

    def set_epoch(self, epoch: int, start: int = 0) -> None:
        self.epoch = epoch
        self.start = start

    def permutation(self) -> list[int]:
        stream = np.random.SeedSequence([self.seed, self.epoch]).generate_state(1)[0]
        generator = torch.Generator().manual_seed(int(stream))
        return torch.randperm(self.size, generator=generator).tolist()

    def __iter__(self) -> Iterator[int]:
        return iter(self.permutation()[self.start :])

    def __len__(self) -> int:
        return max(self.size - self.start, 0)
