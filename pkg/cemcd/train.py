import csv
import dataclasses
import json
import logging
import math
import random
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import marshmallow_recipe as mr
import numpy as np
import torch
from torch import nn
from torch.utils.data import DataLoader

from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, build_config, to_flat
from .constants import SCALE_DIVISOR
from .data import BitemporalSample, DatasetManifest
from .dataset import BitemporalDataset, EpochSampler
from .encoder import EncoderBackend
from .exceptions import ConfigError, DivergenceError
from .infer import evaluate
from .losses import MaskFallbackCounter, build_criterion
from .metrics import MetricReport, SeedSummary, aggregate, format_report, read_report, write_report
from .network import ChangeDetector, build_model

logger = logging.getLogger(__name__)

MODEL_KIND = "model"
LOG_HEADER = ("epoch", "lr", "train_loss", "val_mf1", "val_miou")
LAST_CHECKPOINT = "checkpoint_last.pt"
BEST_CHECKPOINT = "checkpoint_best.pt"
TRAIN_LOG = "train_log.csv"

SampleSource = Sequence[BitemporalSample] | DatasetManifest


def lr_at(t: float, cfg: TrainConfig) -> float:
    """Polynomial decay ``base_lr * (1 - t / horizon) ** decay``, zero at and beyond the horizon."""
    if t >= cfg.schedule_horizon:
        return 0.0
    progress = max(t, 0.0) / cfg.schedule_horizon
    return max(cfg.base_lr * (1.0 - progress) ** cfg.decay_exponent, 0.0)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def iter_samples(source: SampleSource) -> Iterator[BitemporalSample]:
    dataset = BitemporalDataset(source)
    for index in range(len(dataset)):
        yield dataset.sample(index)


@dataclass(slots=True, kw_only=True)
class TrainState:
    epoch: int = 0
    iteration: int = 0
    # Batches already trained in the current, unfinished epoch
    batches_done: int = 0
    best_mf1: float | None = None
    best_epoch: int | None = None
    loss_history: list[float] = field(default_factory=list)
    fallback_count: int = 0


@dataclass(frozen=True, slots=True, kw_only=True)
class TrainResult:
    state: TrainState
    last_checkpoint: Path | None
    best_checkpoint: Path | None


class Trainer:
    """
    SGD with momentum and polynomial learning-rate decay.

    Data order and augmentation are functions of ``(config.seed, epoch)``; CEM masks
    draw from their own generator whose state travels with the checkpoint. A run
    stopped part way through an epoch resumes at the next batch of that epoch.

    A trailing batch of a single sample is dropped so batch norm never normalises
    a lone sample at the coarsest scale.
    """

    __slots__ = (
        "_batches_per_epoch",
        "_counter",
        "_criterion",
        "_dataset",
        "_loader",
        "_loss_generator",
        "_sampler",
        "config",
        "model",
        "optimizer",
        "out_dir",
        "state",
        "val_data",
    )

    def __init__(
        self,
        model: nn.Module,
        train_data: SampleSource,
        config: TrainConfig,
        val_data: SampleSource | None = None,
        out_dir: str | Path | None = None,
    ) -> None:
        self.model = model
        self.config = config
        self.val_data = val_data
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.state = TrainState()

        self._dataset = BitemporalDataset(train_data, crop_size=config.crop_size, seed=config.seed)
        size = len(self._dataset)
        if size == 0:
            raise ConfigError("The training split is empty")
        if min(size, config.batch_size) == 1 and config.crop_size == SCALE_DIVISOR:
            raise ConfigError(
                f"Batches of one sample cannot train at crop_size {SCALE_DIVISOR}: "
                "batch norm needs more than one value per channel at the 1x1 coarsest scale"
            )
        drop_last = size > config.batch_size and size % config.batch_size == 1
        if drop_last:
            logger.info("Dropping the one-sample trailing batch of each epoch (%d samples)", size)
        self._batches_per_epoch = size // config.batch_size if drop_last else math.ceil(size / config.batch_size)

        self._sampler = EpochSampler(size, seed=config.seed)
        self._loss_generator = torch.Generator().manual_seed(config.seed + 1)
        self._loader = DataLoader(
            self._dataset,
            batch_size=config.batch_size,
            sampler=self._sampler,
            num_workers=config.num_workers,
            drop_last=drop_last,
        )
        self._counter = MaskFallbackCounter()
        self._criterion = build_criterion(config.loss, self._loss_generator, self._counter)
        params = [p for p in model.parameters() if p.requires_grad]
        self.optimizer = torch.optim.SGD(params, lr=config.base_lr, momentum=config.momentum)

    def _set_lr(self, lr: float) -> None:
        for group in self.optimizer.param_groups:
            group["lr"] = lr

    def _current_lr(self) -> float:
        return float(self.optimizer.param_groups[0]["lr"])

    def _path(self, name: str) -> Path | None:
        return self.out_dir / name if self.out_dir is not None else None

    def _finished(self) -> bool:
        limit = self.config.max_iterations
        return limit is not None and self.state.iteration >= limit

    def step(self, batch: dict[str, Any]) -> float:
        if self.config.schedule_unit == "iteration":
            self._set_lr(lr_at(self.state.iteration, self.config))

        logits = self.model(batch["pre"], batch["post"])
        loss = self._criterion(logits, batch["gt"])
        value = float(loss.detach())
        if not math.isfinite(value):
            last_good = self._path(LAST_CHECKPOINT)
            logger.error("Non-finite loss at iteration %d; last good checkpoint: %s", self.state.iteration, last_good)
            raise DivergenceError(
                f"Loss became {value} at iteration {self.state.iteration}",
                last_good if last_good is not None and last_good.exists() else None,
            )

        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()

        self.state.iteration += 1
        self.state.loss_history.append(value)
        return value

    def train_epoch(self) -> bool:
        """Train the remaining batches of the current epoch; returns whether the epoch is complete."""
        epoch = self.state.epoch
        if self.config.schedule_unit == "epoch":
            self._set_lr(lr_at(epoch, self.config))
        self._dataset.set_epoch(epoch)
        self._sampler.set_epoch(epoch, start=self.state.batches_done * self.config.batch_size)
        self.model.train()

        for batch in self._loader:
            self.step(batch)
            self.state.batches_done += 1
            if self._finished():
                break
        return self.state.batches_done >= self._batches_per_epoch

    def _epoch_loss(self) -> float:
        losses = self.state.loss_history[-self._batches_per_epoch :]
        return float(np.mean(losses)) if losses else float("nan")

    def validate(self) -> MetricReport | None:
        if self.val_data is None:
            return None
        return evaluate(
            self.model,
            iter_samples(self.val_data),
            tta=self.config.val_tta,
            threshold=self.config.threshold,
        ).report

    def run(self) -> TrainResult:
        log_path = self._path(TRAIN_LOG)
        if log_path is not None and not log_path.exists():
            log_path.parent.mkdir(parents=True, exist_ok=True)
            with log_path.open("w", newline="", encoding="utf-8") as f:
                csv.writer(f).writerow(LOG_HEADER)

        while self.state.epoch < self.config.epochs and not self._finished():
            lr = lr_at(self.state.epoch, self.config)
            if not self.train_epoch():
                logger.info(
                    "Stopped at iteration %d, %d of %d batches into epoch %d",
                    self.state.iteration,
                    self.state.batches_done,
                    self._batches_per_epoch,
                    self.state.epoch,
                )
                break
            if self.config.schedule_unit == "iteration":
                lr = self._current_lr()
            val = self.validate()
            self._after_epoch(lr, self._epoch_loss(), val)

        self.state.fallback_count = self._counter.count
        last = self.save(self._path(LAST_CHECKPOINT)) if self.out_dir is not None else None
        best = self._path(BEST_CHECKPOINT)
        return TrainResult(
            state=self.state,
            last_checkpoint=last,
            best_checkpoint=best if best is not None and best.exists() else last,
        )

    def _after_epoch(self, lr: float, train_loss: float, val: MetricReport | None) -> None:
        epoch = self.state.epoch
        self.state.epoch += 1
        self.state.batches_done = 0
        self.state.fallback_count = self._counter.count
        logger.info(
            "epoch %d: lr=%.6g train_loss=%.5f val_mf1=%s iterations=%d",
            epoch,
            lr,
            train_loss,
            f"{val.mf1:.4f}" if val else "-",
            self.state.iteration,
        )

        improved = val is not None and (self.state.best_mf1 is None or val.mf1 > self.state.best_mf1)
        if improved:
            assert val is not None
            self.state.best_mf1 = val.mf1
            self.state.best_epoch = epoch

        if self.out_dir is None:
            return
        log_path = self._path(TRAIN_LOG)
        assert log_path is not None
        with log_path.open("a", newline="", encoding="utf-8") as f:
            csv.writer(f).writerow(
                [
                    epoch,
                    f"{lr:.8g}",
                    f"{train_loss:.6f}",
                    f"{val.mf1:.6f}" if val else "",
                    f"{val.miou:.6f}" if val else "",
                ]
            )
        self.save(self._path(LAST_CHECKPOINT))
        if improved:
            self.save(self._path(BEST_CHECKPOINT))

    def save(self, path: Path | None) -> Path:
        assert path is not None
        return save_checkpoint(
            path,
            kind=MODEL_KIND,
            state={
                "model": self.model.state_dict(),
                "optimizer": self.optimizer.state_dict(),
                "loss_rng": self._loss_generator.get_state(),
                "torch_rng": torch.get_rng_state(),
            },
            metadata={"config": to_flat(self.config), "train_state": dataclasses.asdict(self.state)},
        )

    def restore(self, path: str | Path) -> None:
        """Load model, optimizer, generator, counter and epoch position from a training checkpoint."""
        checkpoint = load_checkpoint(path, kind=MODEL_KIND)
        self.model.load_state_dict(checkpoint.state["model"])
        self.optimizer.load_state_dict(checkpoint.state["optimizer"])
        self._loss_generator.set_state(checkpoint.state["loss_rng"])
        torch.set_rng_state(checkpoint.state["torch_rng"])
        self.state = TrainState(**checkpoint.metadata["train_state"])
        self._counter.count = self.state.fallback_count
        logger.info("Resumed from %s at epoch %d, iteration %d", path, self.state.epoch, self.state.iteration)


def train(
    model: nn.Module,
    train_data: SampleSource,
    config: TrainConfig,
    val_data: SampleSource | None = None,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
) -> TrainResult:
    trainer = Trainer(model, train_data, config, val_data=val_data, out_dir=out_dir)
    if resume is not None:
        trainer.restore(resume)
    result = trainer.run()
    if val_data is not None and result.best_checkpoint is not None and result.best_checkpoint != result.last_checkpoint:
        # Leave the model holding its best validated weights
        model.load_state_dict(load_checkpoint(result.best_checkpoint, kind=MODEL_KIND).state["model"])
    return result


def load_model(path: str | Path) -> tuple[ChangeDetector, TrainConfig]:
    """Rebuild a trained model from its checkpoint; the returned model is in eval mode."""
    checkpoint = load_checkpoint(path, kind=MODEL_KIND)
    config = build_config(checkpoint.metadata["config"])
    # Encoder weights live in the model state, not in the external file
    encoder = dataclasses.replace(config.model.encoder, backend=EncoderBackend.TOY, weights=None)
    model = ChangeDetector(dataclasses.replace(config.model, encoder=encoder))
    model.load_state_dict(checkpoint.state["model"])
    model.eval()
    return model, config


def run_seeds(
    config: TrainConfig,
    n: int,
    train_data: SampleSource,
    eval_data: SampleSource,
    out_dir: str | Path,
    val_data: SampleSource | None = None,
    tta: bool = False,
) -> SeedSummary:
    """
    Train and evaluate ``n`` runs with seeds ``config.seed .. config.seed + n - 1``.

    Each run writes ``seed_<seed>/report.json``; the aggregated mean and range go to
    ``seeds.json``.
    """
    if n < 1:
        raise ConfigError(f"Number of seeds must be >= 1, got {n}")
    out_dir = Path(out_dir)
    reports = []
    for k in range(n):
        seed = config.seed + k
        run_config = dataclasses.replace(config, seed=seed)
        run_dir = out_dir / f"seed_{seed}"
        seed_everything(seed)
        model = build_model(run_config.model)
        train(model, train_data, run_config, val_data=val_data, out_dir=run_dir)
        result = evaluate(model, iter_samples(eval_data), tta=tta, threshold=run_config.threshold)
        write_report(result.report, run_dir / "report.json", result.counts)
        reports.append(result.report)
        logger.info("seed %d: mF1=%.4f mIoU=%.4f", seed, result.report.mf1, result.report.miou)

    summary = aggregate(reports)
    write_summary(summary, out_dir / "seeds.json")
    return summary


def write_summary(summary: SeedSummary, path: Path) -> None:
    payload = {
        "mean": mr.dump(summary.mean),
        "min": mr.dump(summary.minimum),
        "max": mr.dump(summary.maximum),
        "runs": [mr.dump(r) for r in summary.runs],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    path.with_suffix(".txt").write_text(format_report(summary.mean) + "\n", encoding="utf-8")


def load_seed_reports(out_dir: str | Path) -> SeedSummary:
    """Re-aggregate the per-seed reports persisted by :func:`run_seeds`."""
    paths = sorted(Path(out_dir).glob("seed_*/report.json"))
    return aggregate([read_report(p) for p in paths])
