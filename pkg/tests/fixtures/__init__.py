from .models import (
    TINY_MODEL,
    ConstantModel,
    DivergingModel,
    FlipEquivariantModel,
    tiny_config,
    tiny_model,
)
from .samples import (
    dataset_dir,
    make_sample,
    quantized,
    sample,
    samples,
)

__all__ = [
    "TINY_MODEL",
    "ConstantModel",
    "DivergingModel",
    "FlipEquivariantModel",
    "dataset_dir",
    "make_sample",
    "quantized",
    "sample",
    "samples",
    "tiny_config",
    "tiny_model",
]
