# mypy: disable-error-code="attr-defined"
from importlib import metadata

from .config import TrainConfig, build_config, load_config
from .data import BitemporalSample, DatasetManifest, SynthesisConfig
from .dataset import BitemporalDataset, load_dataset, read_sample, write_dataset
from .encoder import EncoderBackend, EncoderSpec, FeaturePyramid, SiameseEncoder, build_encoder
from .exceptions import (
    CemcdError,
    CheckpointError,
    ConfigError,
    DatasetLayoutError,
    DivergenceError,
    EmptyEvaluationError,
    ImageIOError,
    ShapeError,
    SynthesisError,
)
from .infer import evaluate, predict_tta, render_dropped_overlay, render_error_overlay
from .losses import LossConfig, cem_loss, cem_mask
from .metrics import ConfusionCounts, MetricReport, confusion, report
from .network import ChangeDetector, ModelConfig, build_model
from .synthesis import synthesize_dataset
from .train import load_model, lr_at, run_seeds, train

__all__ = [
    "BitemporalDataset",
    "BitemporalSample",
    "CemcdError",
    "ChangeDetector",
    "CheckpointError",
    "ConfigError",
    "ConfusionCounts",
    "DatasetLayoutError",
    "DatasetManifest",
    "DivergenceError",
    "EmptyEvaluationError",
    "EncoderBackend",
    "EncoderSpec",
    "FeaturePyramid",
    "ImageIOError",
    "LossConfig",
    "MetricReport",
    "ModelConfig",
    "ShapeError",
    "SiameseEncoder",
    "SynthesisConfig",
    "SynthesisError",
    "TrainConfig",
    "__version__",
    "build_config",
    "build_encoder",
    "build_model",
    "cem_loss",
    "cem_mask",
    "confusion",
    "evaluate",
    "load_config",
    "load_dataset",
    "load_model",
    "lr_at",
    "predict_tta",
    "read_sample",
    "render_dropped_overlay",
    "render_error_overlay",
    "report",
    "run_seeds",
    "synthesize_dataset",
    "train",
    "write_dataset",
]

__version__ = metadata.version(__package__)
