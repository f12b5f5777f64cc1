"""Standard (unchunked) MLP, LM-Head, RMSNorm and embedding blocks.

Forward functions return ``(output, saved)``; backward functions consume the
saved state (its intermediates are freed) and accumulate parameter gradients
into caller-provided buffers, so the same code path serves a whole sequence
or one mini-sequence of it.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .memtrack import ACT, GRAD, INTER, TMP
from .tensor import (
    ShapeError,
    Tensor,
    free_all,
    matmul,
    mul,
    silu,
    silu_backward,
)

IGNORE_INDEX = -100
RMS_EPS = 1e-5


class DegenerateInputError(ValueError):
    pass


class StaleSavedError(RuntimeError):
    """Backward called twice on, or with a mismatched, saved state."""


class _Saved:
    consumed = False

    def _claim(self) -> None:
        if self.consumed:
            raise StaleSavedError(f"{type(self).__name__} already consumed by a backward pass")
        self.consumed = True


def _check_saved(saved, cls) -> None:
    if not isinstance(saved, cls):
        raise StaleSavedError(f"expected {cls.__name__}, got {type(saved).__name__}")
    saved._claim()


# -- parameter containers ------------------------------------------------


class _Params:
    def tensors(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def zeros_like(cls, other: "_Params", prefix: str):
        return cls(
            **{
                name: Tensor.zeros(t.shape, t.dtype, f"{GRAD}/{prefix}.{name}")
                for name, t in other.tensors().items()
            }
        )

    def free(self) -> None:
        free_all(*self.tensors().values())


@dataclass
class MlpWeights(_Params):
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor

    def __post_init__(self):
        d, i = self.w_gate.shape
        if self.w_up.shape != (d, i) or self.w_down.shape != (i, d):
            raise ShapeError(
                f"inconsistent MLP weights {self.w_gate.shape}, {self.w_up.shape}, {self.w_down.shape}"
            )


@dataclass
class LmHeadWeights(_Params):
    w_out: Tensor


# -- labels --------------------------------------------------------------


def check_labels(labels: np.ndarray, vocab: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    bad = (labels != IGNORE_INDEX) & ((labels < 0) | (labels >= vocab))
    if bad.any():
        raise ValueError(f"label ids outside [0,{vocab}) and not {IGNORE_INDEX}")
    return labels


def valid_count(labels: np.ndarray) -> int:
    return int(np.count_nonzero(np.asarray(labels) != IGNORE_INDEX))


# -- MLP -----------------------------------------------------------------


@dataclass
class MlpSaved(_Saved):
    x: Tensor  # borrowed; owned by the caller
    gate: Tensor  # x @ w_gate, pre-activation
    up: Tensor  # x @ w_up

    def release(self) -> None:
        free_all(self.gate, self.up)


def mlp_forward(x: Tensor, w: MlpWeights, out_label: str = f"{ACT}/mlp.out") -> tuple[Tensor, MlpSaved]:
    """``O = (SiLU(X Wg) * (X Wu)) Wd``.

    The live intermediate footprint peaks at three ``[N, I]`` buffers: the two
    projections (kept for backward) and the activation product.
    """
    if x.shape[1] != w.w_gate.shape[0]:
        raise ShapeError(f"MLP input width {x.shape[1]} != d={w.w_gate.shape[0]}")
    gate = matmul(x, w.w_gate, label=f"{INTER}/mlp.gate")
    up = matmul(x, w.w_up, label=f"{INTER}/mlp.up")
    h = silu(gate, label=f"{INTER}/mlp.act")
    mul(h, up, inplace=True)
    out = matmul(h, w.w_down, label=out_label)
    h.free()
    return out, MlpSaved(x, gate, up)


def mlp_backward(
    d_out: Tensor, saved: MlpSaved, w: MlpWeights, grads: MlpWeights, dx_label: str = f"{TMP}/mlp.dx"
) -> Tensor:
    """Accumulate weight gradients into ``grads`` and return ``dX``."""
    _check_saved(saved, MlpSaved)
    x, gate, up = saved.x, saved.gate, saved.up
    if d_out.shape != x.shape:
        raise StaleSavedError(f"upstream {d_out.shape} does not match saved input {x.shape}")

    s = silu(gate, label=f"{INTER}/mlp.act")
    h = mul(s, up, label=f"{INTER}/mlp.act")
    matmul(h, d_out, trans_a=True, out=grads.w_down)
    h.free()

    d_h = matmul(d_out, w.w_down, trans_b=True, label=f"{INTER}/mlp.dact")
    d_up = mul(s, d_h, inplace=True)  # s now holds dL/d(up)
    mul(d_h, up, inplace=True)
    up.free()
    d_gate = silu_backward(gate, d_h, label=f"{INTER}/mlp.dgate")
    free_all(d_h, gate)

    matmul(x, d_up, trans_a=True, out=grads.w_up)
    matmul(x, d_gate, trans_a=True, out=grads.w_gate)
    dx = matmul(d_up, w.w_up, trans_b=True, label=dx_label)
    d_up.free()
    matmul(d_gate, w.w_gate, trans_b=True, out=dx)
    d_gate.free()
    return dx


# -- LM-Head -------------------------------------------------------------


def _ce_forward(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-row ``logsumexp(z) - z[label]``; zero on ignored rows."""
    m = logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - m).sum(axis=1)) + m[:, 0]
    valid = labels != IGNORE_INDEX
    rows = np.zeros(logits.shape[0], dtype=logits.dtype)
    idx = np.nonzero(valid)[0]
    rows[idx] = lse[idx] - logits[idx, labels[idx]]
    return rows


def _ce_backward_inplace(logits: np.ndarray, labels: np.ndarray, scale: float) -> None:
    """Overwrite logits with ``scale * (softmax(z) - onehot)``; ignored rows zero."""
    logits -= logits.max(axis=1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=1, keepdims=True)
    valid = labels != IGNORE_INDEX
    idx = np.nonzero(valid)[0]
    logits[idx, labels[idx]] -= 1.0
    logits[~valid] = 0.0
    logits *= scale


def cross_entropy_sum(logits: Tensor, labels: np.ndarray) -> tuple[float, int]:
    """Sum of per-token cross-entropy over non-ignored rows, and their count."""
    n, v = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    tr = logits._tracker
    tr.count_loss(n, v)
    # log-softmax workspace of the same extent as the logits
    with tr.scratch(logits.nbytes, f"{INTER}/head.softmax"):
        rows = _ce_forward(logits.data, labels)
    return float(rows.sum()), valid_count(labels)


@dataclass
class LmHeadSaved(_Saved):
    x: Tensor  # borrowed
    labels: np.ndarray
    logits: Tensor | None
    denom: float
    loss_sum: float

    def release(self) -> None:
        free_all(self.logits)


def lmhead_forward(
    x: Tensor, labels: np.ndarray, w: LmHeadWeights, denom: float | None = None
) -> tuple[float, LmHeadSaved]:
    """Mean cross-entropy of ``X W_out`` against already-shifted labels.

    ``denom`` overrides the normaliser (defaults to the number of non-ignored
    labels); sharded callers pass the global count.
    """
    labels = check_labels(labels, w.w_out.shape[1])
    if labels.shape != (x.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} != ({x.shape[0]},)")
    count = valid_count(labels)
    if denom is None:
        if count == 0:
            raise DegenerateInputError("all labels are ignore-index")
        denom = count
    logits = matmul(x, w.w_out, label=f"{INTER}/head.logits")
    loss_sum, _ = cross_entropy_sum(logits, labels)
    return loss_sum / denom, LmHeadSaved(x, labels, logits, float(denom), loss_sum)


def lmhead_chunk_backward(
    x: Tensor,
    labels: np.ndarray,
    logits: Tensor,
    w: LmHeadWeights,
    grads: LmHeadWeights,
    scale: float,
    dx_label: str,
) -> Tensor:
    """Backward of one row block given its logits; the logits buffer is reused
    for the logits gradient and freed."""
    n, v = logits.shape
    logits._tracker.count_loss(n, v)
    _ce_backward_inplace(logits.data, labels, scale)
    dx = matmul(logits, w.w_out, trans_b=True, label=dx_label)
    matmul(x, logits, trans_a=True, out=grads.w_out)
    logits.free()
    return dx


def lmhead_backward(
    saved: LmHeadSaved,
    w: LmHeadWeights,
    grads: LmHeadWeights,
    upstream: float = 1.0,
    dx_label: str = f"{TMP}/head.dx",
) -> Tensor:
    _check_saved(saved, LmHeadSaved)
    logits, saved.logits = saved.logits, None
    return lmhead_chunk_backward(saved.x, saved.labels, logits, w, grads, upstream / saved.denom, dx_label)


# -- RMSNorm -------------------------------------------------------------


@dataclass
class RmsSaved(_Saved):
    x: Tensor  # borrowed
    rstd: Tensor  # [N, 1]

    def release(self) -> None:
        free_all(self.rstd)


def rmsnorm_forward(
    x: Tensor, gain: Tensor, label: str = f"{ACT}/norm", eps: float = RMS_EPS
) -> tuple[Tensor, RmsSaved]:
    if gain.shape != (x.shape[-1],):
        raise ShapeError(f"gain {gain.shape} does not match last extent of {x.shape}")
    xd = x.data
    ms = np.mean(xd * xd, axis=1, keepdims=True)
    r = 1.0 / np.sqrt(ms + eps)
    rstd = Tensor(r.astype(xd.dtype), f"{ACT}/norm.rstd")
    y = Tensor(xd * r * gain.data, label)
    x._tracker.count_elementwise(4 * x.numel, 2 * x.numel, x.numel)
    return y, RmsSaved(x, rstd)


def rmsnorm_backward(
    d_y: Tensor, saved: RmsSaved, gain: Tensor, d_gain: Tensor, dx_label: str = f"{TMP}/norm.dx"
) -> Tensor:
    _check_saved(saved, RmsSaved)
    x, r = saved.x.data, saved.rstd.data
    if d_y.shape != saved.x.shape:
        raise StaleSavedError(f"upstream {d_y.shape} does not match saved input {saved.x.shape}")
    xhat = x * r
    dy = d_y.data
    d_gain.data[...] += (dy * xhat).sum(axis=0)
    dxhat = dy * gain.data
    proj = np.mean(dxhat * xhat, axis=1, keepdims=True)
    dx = Tensor(r * (dxhat - xhat * proj), dx_label)
    saved.rstd.free()
    saved.x._tracker.count_elementwise(8 * saved.x.numel, 3 * saved.x.numel, saved.x.numel)
    return dx


# -- embedding -----------------------------------------------------------


def embedding_forward(tokens: np.ndarray, table: Tensor, label: str = f"{ACT}/embed") -> Tensor:
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    v = table.shape[0]
    if tokens.size and (tokens.min() < 0 or tokens.max() >= v):
        raise ValueError(f"token ids outside [0,{v})")
    return Tensor(table.data[tokens], label)


def embedding_backward(tokens: np.ndarray, d_x: Tensor, d_table: Tensor) -> None:
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    # np.add.at is unbuffered and walks rows in order
    np.add.at(d_table.data, tokens, d_x.data)


