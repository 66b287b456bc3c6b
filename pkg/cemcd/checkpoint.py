"""
Versioned checkpoint container.

A checkpoint is a ``torch.save`` archive of a plain dictionary::

    {"magic": "CEMCD1", "version": 1, "kind": "model", "metadata": {...}, "state": {...}}

Only tensors and builtin containers are stored, so any checkpoint loads with
``torch.load(path, weights_only=True)`` without importing cemcd.
"""

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import torch

from .constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from .exceptions import CheckpointError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True, kw_only=True)
class Checkpoint:
    kind: str
    metadata: dict[str, Any]
    state: dict[str, Any]


def save_checkpoint(path: str | Path, kind: str, state: dict[str, Any], metadata: dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "metadata": metadata,
        "state": state,
    }
    # Write-then-rename keeps the previous checkpoint intact if we crash mid-write
    tmp_path = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp_path)
    os.replace(tmp_path, path)
    logger.debug("Saved %s checkpoint to %s", kind, path)
    return path


def load_checkpoint(path: str | Path, kind: str | None = None) -> Checkpoint:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError as e:
        raise CheckpointError(f"Checkpoint {path} does not exist") from e
    except Exception as e:
        raise CheckpointError(f"Checkpoint {path} is not a readable container: {e}") from e

    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"Checkpoint {path} lacks the {CHECKPOINT_MAGIC} magic string")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"Checkpoint {path} has unsupported version {payload.get('version')!r}")
    if kind is not None and payload.get("kind") != kind:
        raise CheckpointError(f"Checkpoint {path} holds a {payload.get('kind')!r}, expected {kind!r}")

    return Checkpoint(kind=payload["kind"], metadata=payload["metadata"], state=payload["state"])


def check_state_shapes(expected: dict[str, torch.Tensor], found: dict[str, Any], path: str | Path) -> None:
    """Raise :class:`CheckpointError` listing every tensor whose shape differs."""
    problems = []
    for name, tensor in expected.items():
        if name not in found:
            problems.append(f"{name}: expected {list(tensor.shape)}, found missing")
        elif tuple(found[name].shape) != tuple(tensor.shape):
            problems.append(f"{name}: expected {list(tensor.shape)}, found {list(found[name].shape)}")
    problems.extend(f"{name}: unexpected tensor" for name in found if name not in expected)
    if problems:
        raise CheckpointError(f"Checkpoint {path} does not match the model:\n  " + "\n  ".join(problems))
