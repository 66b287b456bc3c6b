"""Synthetic bitemporal scenes with a controllable change fraction."""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import torch

from .data import BitemporalSample, SynthesisConfig
from .exceptions import SynthesisError

logger = logging.getLogger(__name__)

# Maximum deviation of the dataset-mean change fraction from the target
DATASET_TOLERANCE = 0.02
MAX_CHANGE_FRACTION = 0.5
TEXTURE_CELL = 16
TEXTURE_AMPLITUDE = 0.15


@dataclass(frozen=True, slots=True)
class _SceneObject:
    top: int
    left: int
    height: int
    width: int
    ellipse: bool
    color: tuple[float, float, float]

    def mask(self, size: int) -> np.ndarray:
        yy, xx = np.ogrid[:size, :size]
        if not self.ellipse:
            return (
                (yy >= self.top) & (yy < self.top + self.height) & (xx >= self.left) & (xx < self.left + self.width)
            )
        cy = self.top + (self.height - 1) / 2.0
        cx = self.left + (self.width - 1) / 2.0
        ry = self.height / 2.0
        rx = self.width / 2.0
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _random_object(
    rng: np.random.Generator, size: int, height: int, width: int, ellipse: bool | None = None
) -> _SceneObject:
    height = min(height, size)
    width = min(width, size)
    return _SceneObject(
        top=int(rng.integers(0, size - height + 1)),
        left=int(rng.integers(0, size - width + 1)),
        height=height,
        width=width,
        ellipse=bool(rng.random() < 0.5) if ellipse is None else ellipse,
        color=(float(rng.random()), float(rng.random()), float(rng.random())),
    )


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.2, 0.8, size=(3, 1, 1))
    cells = -(-size // TEXTURE_CELL)
    coarse = rng.uniform(-TEXTURE_AMPLITUDE, TEXTURE_AMPLITUDE, size=(3, cells, cells))
    texture = coarse.repeat(TEXTURE_CELL, axis=1).repeat(TEXTURE_CELL, axis=2)[:, :size, :size]
    fine = rng.uniform(-0.03, 0.03, size=(3, size, size))
    return np.clip(base + texture + fine, 0.0, 1.0)


def _render(background: np.ndarray, objects: Sequence[_SceneObject]) -> tuple[np.ndarray, np.ndarray]:
    """Paint objects in order; returns the image and the top-most object index map (0 = background)."""
    size = background.shape[1]
    image = background.copy()
    owner = np.zeros((size, size), dtype=np.int64)
    for index, obj in enumerate(objects, start=1):
        region = obj.mask(size)
        image[:, region] = np.asarray(obj.color)[:, None]
        owner[region] = index
    return image, owner


def _changed_objects(
    rng: np.random.Generator,
    cfg: SynthesisConfig,
    count: int,
) -> list[_SceneObject]:
    size = cfg.tile_size
    min_side, max_side = cfg.object_size_range
    budget = cfg.change_fraction_target * size * size
    objects = []
    for _ in range(count):
        aspect = float(rng.uniform(0.6, 1.6))
        ellipse = bool(rng.random() < 0.5)
        # An ellipse covers pi/4 of its bounding box
        area = budget / count / (math.pi / 4.0 if ellipse else 1.0)
        height = int(np.clip(round(math.sqrt(area * aspect)), min_side, max_side))
        width = int(np.clip(round(area / max(height, 1)), min_side, max_side))
        objects.append(_random_object(rng, size, height, width, ellipse))
    return objects


def synthesize_pair(
    cfg: SynthesisConfig,
    rng: np.random.Generator,
    sample_id: str,
    changed_count: int,
) -> BitemporalSample:
    """
    Render one scene and its post-change version.

    Persistent objects are painted first, then ``changed_count`` objects that exist
    only in the pre image (removed) or only in the post image (added). The mask marks
    every pixel whose top-most object differs between the two dates.
    """
    size = cfg.tile_size
    min_side, max_side = cfg.object_size_range
    background = _background(rng, size)

    count = int(rng.integers(cfg.object_count_range[0], cfg.object_count_range[1] + 1))
    persistent = [
        _random_object(rng, size, int(rng.integers(min_side, max_side + 1)), int(rng.integers(min_side, max_side + 1)))
        for _ in range(count)
    ]
    changed = _changed_objects(rng, cfg, changed_count) if changed_count > 0 else []
    added = rng.random(len(changed)) < 0.5

    # Object keys: 0 is background, persistent objects 1..count, changed objects after them
    persistent_keys = list(range(1, count + 1))
    removed = [j for j in range(len(changed)) if not added[j]]
    appeared = [j for j in range(len(changed)) if added[j]]
    pre_keys = np.asarray([0, *persistent_keys, *(count + 1 + j for j in removed)], dtype=np.int64)
    post_keys = np.asarray([0, *persistent_keys, *(count + 1 + j for j in appeared)], dtype=np.int64)

    pre, pre_owner = _render(background, persistent + [changed[j] for j in removed])
    post, post_owner = _render(background, persistent + [changed[j] for j in appeared])
    gt = (pre_keys[pre_owner] != post_keys[post_owner]).astype(np.uint8)

    noise = rng.standard_normal(post.shape) * cfg.noise_level
    post = np.clip(post + noise, 0.0, 1.0)

    return BitemporalSample(
        pre_image=torch.from_numpy(pre.astype(np.float32)),
        post_image=torch.from_numpy(post.astype(np.float32)),
        gt_mask=torch.from_numpy(gt),
        id=sample_id,
    )


def _changed_count(rng: np.random.Generator, cfg: SynthesisConfig) -> int:
    """Draw from ``changed_count_range``, raised towards the count the target needs but never past its upper bound."""
    low, high = cfg.changed_count_range
    max_area = cfg.object_size_range[1] ** 2
    needed = math.ceil(cfg.change_fraction_target * cfg.tile_size**2 / max_area)
    drawn = int(rng.integers(low, high + 1))
    return min(max(drawn, needed), high)


def _check_reachable(cfg: SynthesisConfig) -> None:
    high = cfg.changed_count_range[1]
    max_side = cfg.object_size_range[1]
    reachable = high * max_side**2
    wanted = cfg.change_fraction_target * cfg.tile_size**2
    if reachable < wanted:
        raise SynthesisError(
            f"Change fraction {cfg.change_fraction_target} is out of reach: at most {high} changed objects "
            f"of side {max_side} cover {reachable} of {cfg.tile_size**2} pixels"
        )


def synthesize_dataset(cfg: SynthesisConfig) -> list[BitemporalSample]:
    """
    Generate ``cfg.num_samples`` scenes; a pure function of ``cfg``.

    Each scene is redrawn (at most ``cfg.max_retries`` times) until its change
    fraction lies within ``cfg.tolerance`` of the target, so the dataset mean stays
    within 0.02 of it.
    """
    if cfg.change_fraction_target > MAX_CHANGE_FRACTION:
        raise SynthesisError(
            f"Change fraction {cfg.change_fraction_target} exceeds {MAX_CHANGE_FRACTION}; "
            "change must stay the minority class"
        )
    _check_reachable(cfg)
    rng = np.random.default_rng(cfg.seed)
    target = cfg.change_fraction_target
    samples: list[BitemporalSample] = []
    for index in range(cfg.num_samples):
        sample_id = f"synth_{index:05d}"
        for attempt in range(cfg.max_retries):
            sample = synthesize_pair(cfg, rng, sample_id, _changed_count(rng, cfg))
            if abs(sample.change_fraction - target) <= cfg.tolerance:
                break
            logger.debug(
                "Sample %s attempt %d: change fraction %.4f outside %.4f +/- %.4f",
                sample_id,
                attempt,
                sample.change_fraction,
                target,
                cfg.tolerance,
            )
        else:
            raise SynthesisError(
                f"Could not reach change fraction {target} within {cfg.max_retries} retries "
                f"(object sizes {cfg.object_size_range}, changed objects {cfg.changed_count_range})"
            )
        samples.append(sample)

    mean_fraction = float(np.mean([s.change_fraction for s in samples]))
    if abs(mean_fraction - target) > DATASET_TOLERANCE:
        raise SynthesisError(
            f"Dataset change fraction {mean_fraction:.4f} is not within {DATASET_TOLERANCE} of {target}"
        )
    logger.info("Synthesized %d samples, mean change fraction %.4f", len(samples), mean_fraction)
    return samples


def split_ids(ids: Sequence[str], fractions: dict[str, float]) -> dict[str, list[str]]:
    """Assign consecutive ids to splits in train/val/test order."""
    result: dict[str, list[str]] = {}
    start = 0
    names = [name for name in ("train", "val", "test") if fractions.get(name, 0.0) > 0.0]
    for position, name in enumerate(names):
        stop = len(ids) if position == len(names) - 1 else start + round(fractions[name] * len(ids))
        result[name] = list(ids[start:stop])
        start = stop
    return result
