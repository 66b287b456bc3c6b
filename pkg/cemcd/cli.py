"""
Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 data error, 4 training divergence.
"""

import argparse
import csv
import dataclasses
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from . import __version__
from .config import KEY_ALIASES, TrainConfig, build_synthesis_config, format_config, load_config
from .constants import DEFAULT_TILE_SIZE, default_out_root
from .dataset import load_dataset, write_dataset
from .exceptions import (
    CheckpointError,
    ConfigError,
    DatasetLayoutError,
    DivergenceError,
    EmptyEvaluationError,
    ImageIOError,
    ShapeError,
    SynthesisError,
)
from .infer import evaluate, write_predictions
from .metrics import format_report, write_report
from .network import build_model
from .synthesis import split_ids, synthesize_dataset
from .train import iter_samples, load_model, run_seeds, seed_everything, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4

ABLATION_COLUMNS = ("precision", "recall", "f1", "iou", "mf1", "miou")

# Training flags and the config keys they set
TRAIN_FLAGS = {
    "epochs": "epochs",
    "lr": "base_lr",
    "decay": "decay_exponent",
    "batch_size": "batch_size",
    "crop": "crop_size",
    "max_iterations": "max_iterations",
    "schedule_unit": "schedule_unit",
    "loss": "loss.kind",
    "delta": "loss.delta",
    "preset": "preset",
    "fusion": "model.fusion",
    "msdf": "model.msdf",
    "workers": "num_workers",
    "seed": "seed",
}


def _int_pair(value: str) -> tuple[int, int]:
    try:
        low, high = (int(v) for v in value.split(","))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected MIN,MAX, got {value!r}") from e
    return low, high


def _fractions(value: str) -> dict[str, float]:
    result = {}
    for item in value.split(","):
        name, sep, fraction = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected split=fraction pairs, got {value!r}")
        try:
            result[name.strip()] = float(fraction)
        except ValueError as e:
            raise argparse.ArgumentTypeError(f"invalid fraction in {item!r}") from e
    return result


def _assignment(value: str) -> tuple[str, str]:
    key, sep, item = value.partition("=")
    if not sep or not key.strip():
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {value!r}")
    return key.strip(), item.strip()


def _sweep(value: str) -> tuple[str, list[str]]:
    key, values = _assignment(value)
    items = [v.strip() for v in values.split(",") if v.strip()]
    if not items:
        raise argparse.ArgumentTypeError(f"sweep {key!r} has no values")
    return key, items


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on or off, got {value!r}")
    return value == "on"


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", type=Path, default=None, help="output root (default: $CEMCD_OUT or ./runs)")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--verbose", "-v", action="store_true", help="log at DEBUG level")


def _add_data(parser: argparse.ArgumentParser, split: str) -> None:
    parser.add_argument("--data", type=Path, required=True, help="dataset root with A/, B/ and label/")
    parser.add_argument("--split", default=split, choices=("train", "val", "test"))
    parser.add_argument("--tile", type=int, default=DEFAULT_TILE_SIZE, help="expected tile size")


def _add_training(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="flat key=value config file")
    parser.add_argument("--set", dest="overrides", type=_assignment, action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--val-split", default=None, choices=("train", "val", "test"))
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--decay", type=float)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--crop", type=int)
    parser.add_argument("--max-iterations", type=int)
    parser.add_argument("--schedule-unit", choices=("epoch", "iteration"))
    parser.add_argument("--loss", choices=("cem", "bce", "focal", "wbce", "bce_dice"))
    parser.add_argument("--delta", type=float)
    parser.add_argument("--preset", choices=("levir", "clcd", "whu", "s2looking"))
    parser.add_argument("--fusion", choices=("stfe", "diff"))
    parser.add_argument("--msdf", choices=("true", "false"))
    parser.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cemcd", description="Change detection with cross-entropy masking")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="generate a synthetic bitemporal dataset")
    _add_common(synth)
    synth.add_argument("--n", type=int, required=True, help="number of samples")
    synth.add_argument("--tile", type=int, default=DEFAULT_TILE_SIZE)
    synth.add_argument("--change-frac", type=float, default=None)
    synth.add_argument("--noise", type=float, default=None)
    synth.add_argument("--objects", type=_int_pair, default=None, metavar="MIN,MAX")
    synth.add_argument("--changed", type=_int_pair, default=None, metavar="MIN,MAX")
    synth.add_argument("--object-size", type=_int_pair, default=None, metavar="MIN,MAX")
    synth.add_argument("--splits", type=_fractions, default=None, metavar="train=F,val=F,test=F")
    synth.set_defaults(handler=cmd_synth)

    train_cmd = commands.add_parser("train", help="train a change detector")
    _add_common(train_cmd)
    _add_data(train_cmd, "train")
    _add_training(train_cmd)
    train_cmd.add_argument("--resume", type=Path, default=None, help="training checkpoint to continue from")
    train_cmd.set_defaults(handler=cmd_train)

    eval_cmd = commands.add_parser("eval", help="evaluate a checkpoint")
    _add_common(eval_cmd)
    _add_data(eval_cmd, "test")
    eval_cmd.add_argument("--checkpoint", type=Path, required=True)
    eval_cmd.add_argument("--tta", type=_on_off, default=True, metavar="{on,off}")
    eval_cmd.add_argument("--threshold", type=float, default=None)
    eval_cmd.set_defaults(handler=cmd_eval)

    predict = commands.add_parser("predict", help="write probability maps, masks and overlays")
    _add_common(predict)
    _add_data(predict, "test")
    predict.add_argument("--checkpoint", type=Path, required=True)
    predict.add_argument("--tta", type=_on_off, default=True, metavar="{on,off}")
    predict.add_argument("--threshold", type=float, default=None)
    predict.add_argument("--delta", type=float, default=None, help="masking ratio shown in the dropped-pixel overlay")
    predict.set_defaults(handler=cmd_predict)

    ablate = commands.add_parser("ablate", help="train and evaluate one run per swept value")
    _add_common(ablate)
    _add_data(ablate, "train")
    _add_training(ablate)
    ablate.add_argument("--sweep", type=_sweep, required=True, metavar="KEY=V1,V2,...")
    ablate.add_argument("--eval-split", default=None, choices=("train", "val", "test"))
    ablate.add_argument("--seeds", type=int, default=1)
    ablate.add_argument("--tta", type=_on_off, default=False, metavar="{on,off}")
    ablate.set_defaults(handler=cmd_ablate)
    return parser


def _out_root(args: argparse.Namespace) -> Path:
    return Path(args.out) if args.out is not None else Path(default_out_root())


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    values: dict[str, Any] = {key: getattr(args, flag) for flag, key in TRAIN_FLAGS.items()}
    values.update(dict(args.overrides))
    return {k: v for k, v in values.items() if v is not None}


def _training_config(args: argparse.Namespace, extra: dict[str, Any] | None = None) -> TrainConfig:
    return load_config(args.config, {**_overrides(args), **(extra or {})})


def cmd_synth(args: argparse.Namespace) -> int:
    out = _out_root(args)
    cfg = build_synthesis_config(
        {
            "num_samples": args.n,
            "tile_size": args.tile,
            "change_fraction_target": args.change_frac,
            "noise_level": args.noise,
            "object_count_range": args.objects,
            "changed_count_range": args.changed,
            "object_size_range": args.object_size,
            "seed": args.seed,
            "split_fractions": args.splits,
        }
    )
    samples = synthesize_dataset(cfg)
    splits = split_ids([s.id for s in samples], cfg.split_fractions) if args.splits else None
    write_dataset(samples, out, splits)
    print(f"Wrote {len(samples)} samples to {out}")  # noqa: T201
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    out = _out_root(args)
    config = _training_config(args)
    train_data = load_dataset(args.data, args.split, args.tile)
    val_data = load_dataset(args.data, args.val_split, args.tile) if args.val_split else None

    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(format_config(config), encoding="utf-8")
    seed_everything(config.seed)
    model = build_model(config.model)
    result = train(model, train_data, config, val_data=val_data, out_dir=out, resume=args.resume)
    state = result.state
    summary = f"Trained {state.epoch} epochs ({state.iteration} iterations)"
    print(f"{summary}; checkpoint: {result.best_checkpoint}")  # noqa: T201
    return EXIT_OK


def _threshold(args: argparse.Namespace, config: TrainConfig) -> float:
    return args.threshold if args.threshold is not None else config.threshold


def cmd_eval(args: argparse.Namespace) -> int:
    out = _out_root(args)
    model, config = load_model(args.checkpoint)
    manifest = load_dataset(args.data, args.split, args.tile)
    result = evaluate(model, iter_samples(manifest), tta=args.tta, threshold=_threshold(args, config))
    write_report(result.report, out / "report.json", result.counts)
    print(format_report(result.report))  # noqa: T201
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    out = _out_root(args)
    model, config = load_model(args.checkpoint)
    manifest = load_dataset(args.data, args.split, args.tile)
    write_predictions(
        model,
        iter_samples(manifest),
        out,
        tta=args.tta,
        threshold=_threshold(args, config),
        delta=args.delta if args.delta is not None else config.loss.delta,
        seed=args.seed if args.seed is not None else config.seed,
    )
    return EXIT_OK


def _format_table(key: str, rows: Sequence[dict[str, str]]) -> str:
    header = (key, *ABLATION_COLUMNS)
    widths = [max(len(h), *(len(row[h]) for row in rows)) for h in header]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths, strict=True))]
    lines.extend("  ".join(row[h].ljust(w) for h, w in zip(header, widths, strict=True)) for row in rows)
    return "\n".join(lines)


def cmd_ablate(args: argparse.Namespace) -> int:
    out = _out_root(args)
    key, values = args.sweep
    train_data = load_dataset(args.data, args.split, args.tile)
    val_data = load_dataset(args.data, args.val_split, args.tile) if args.val_split else None
    eval_data = load_dataset(args.data, args.eval_split, args.tile) if args.eval_split else val_data or train_data

    # Validate every swept configuration before spending time on training
    configs = [_training_config(args, {key: value}) for value in values]

    rows = []
    for value, config in zip(values, configs, strict=True):
        run_dir = out / f"{KEY_ALIASES.get(key, key)}={value}"
        logger.info("Ablation run %s=%s", key, value)
        summary = run_seeds(config, args.seeds, train_data, eval_data, run_dir, val_data=val_data, tta=args.tta)
        metrics = dataclasses.asdict(summary.mean)
        rows.append({key: value, **{name: f"{100 * metrics[name]:.2f}" for name in ABLATION_COLUMNS}})

    out.mkdir(parents=True, exist_ok=True)
    with (out / "ablation.csv").open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=[key, *ABLATION_COLUMNS])
        writer.writeheader()
        writer.writerows(rows)
    print(_format_table(key, rows))  # noqa: T201
    return EXIT_OK


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s - %(levelname)s - %(message)s",
        handlers=[logging.StreamHandler()],
    )


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose)
    try:
        code: int = args.handler(args)
    except ConfigError as e:
        logger.error("Configuration error: %s", e)
        return EXIT_USAGE
    except (DatasetLayoutError, ImageIOError, CheckpointError, SynthesisError, ShapeError, EmptyEvaluationError) as e:
        logger.error("%s: %s", type(e).__name__, e)
        return EXIT_DATA
    except DivergenceError as e:
        logger.error("Training diverged: %s (last good checkpoint: %s)", e, e.last_good_checkpoint)
        return EXIT_DIVERGENCE
    return code


if __name__ == "__main__":
    sys.exit(main())
