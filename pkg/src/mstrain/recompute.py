"""Layer-granularity activation recomputation.

A checkpointed layer keeps only its input after forward.  Backward runs the
layer forward again to rebuild the internals and then differentiates it, so
the extra cost is exactly one layer forward.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

from .blocks import StaleSavedError, _check_saved, _Saved
from .tensor import Tensor

PER_LAYER = "per-layer"

# layer_fn(x) -> (out, saved) where saved.release() frees every internal
LayerFn = Callable[[Tensor], "tuple[Tensor, Any]"]
LayerBwd = Callable[[Tensor, Any], Tensor]


@dataclass(frozen=True)
class CheckpointPolicy:
    enabled: bool = False
    granularity: str = PER_LAYER

    def __post_init__(self):
        if self.granularity != PER_LAYER:
            raise ValueError(f"only {PER_LAYER!r} checkpointing is supported, got {self.granularity!r}")


@dataclass
class CheckpointSaved(_Saved):
    x: Tensor  # borrowed layer input
    fn: LayerFn

    def release(self) -> None:
        pass


def checkpointed_forward(layer_fn: LayerFn, x: Tensor) -> tuple[Tensor, CheckpointSaved]:
    out, inner = layer_fn(x)
    inner.release()
    return out, CheckpointSaved(x, layer_fn)


def checkpointed_backward(layer_fn: LayerFn, layer_bwd: LayerBwd, saved: CheckpointSaved, d_out: Tensor) -> Tensor:
    """Re-run ``layer_fn`` on the stored input and back-propagate through it.

    Parameter gradients go wherever ``layer_bwd`` accumulates them; the return
    value is the gradient with respect to the layer input.
    """
    _check_saved(saved, CheckpointSaved)
    if saved.fn is not layer_fn:
        raise StaleSavedError("saved state was produced by a different layer function")
    out, inner = layer_fn(saved.x)
    out.free()
    return layer_bwd(d_out, inner)
