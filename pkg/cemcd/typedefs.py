"""Type definitions for cemcd."""

from collections.abc import Callable
from typing import Literal, Protocol

from torch import Tensor

Split = Literal["train", "val", "test"]
SPLITS: tuple[Split, ...] = ("train", "val", "test")

LossKind = Literal["cem", "bce", "focal", "wbce", "bce_dice"]
LOSS_KINDS: tuple[LossKind, ...] = ("cem", "bce", "focal", "wbce", "bce_dice")

FusionKind = Literal["stfe", "diff"]
ScheduleUnit = Literal["epoch", "iteration"]

# (logits [B,1,H,W], gt [B,1,H,W]) -> scalar loss
Criterion = Callable[[Tensor, Tensor], Tensor]


class ChangeModel(Protocol):
    """Anything that maps a batched bitemporal pair to change logits ``[B,1,H,W]``."""

    def __call__(self, pre: Tensor, post: Tensor) -> Tensor: ...
