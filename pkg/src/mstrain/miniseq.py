"""Mini-sequence MLP and LM-Head.

The token dimension is cut into ``M`` contiguous row blocks which go through
the block one after another.  Forward keeps nothing per chunk except the
block input (which the caller owns anyway); backward recomputes each chunk's
projections or logits before differentiating it, and weight gradients
accumulate chunk by chunk into a single buffer.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .blocks import (
    DegenerateInputError,
    LmHeadWeights,
    MlpSaved,
    MlpWeights,
    StaleSavedError,
    _check_saved,
    _Saved,
    check_labels,
    cross_entropy_sum,
    lmhead_chunk_backward,
    mlp_backward,
    mlp_forward,
    valid_count,
)
from .memtrack import ACT, INTER, TMP
from .tensor import ShapeError, Tensor, free_all, matmul, slice_rows, write_rows

TOKEN_WEIGHTED = "token-weighted"
PAPER_MEAN = "paper-mean"
LOSS_MODES = (TOKEN_WEIGHTED, PAPER_MEAN)


class DegenerateChunkWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class ChunkPlan:
    M: int
    N: int
    ranges: tuple[tuple[int, int], ...]

    @property
    def max_rows(self) -> int:
        return max(e - s for s, e in self.ranges)

    def __len__(self) -> int:
        return len(self.ranges)


def make_chunk_plan(N: int, M: int) -> ChunkPlan:
    """Split ``[0, N)`` into ``min(M, N)`` ordered contiguous ranges.

    Sizes differ by at most one row and the larger ones come first, so every
    chunk has at most ``ceil(N / M)`` rows.
    """
    if N < 1:
        raise DegenerateInputError(f"cannot partition {N} rows")
    if M < 1:
        raise ValueError(f"number of mini-sequences must be >= 1, got {M}")
    m = min(M, N)
    base, extra = divmod(N, m)
    ranges = []
    start = 0
    for i in range(m):
        size = base + (1 if i < extra else 0)
        ranges.append((start, start + size))
        start += size
    return ChunkPlan(M=M, N=N, ranges=tuple(ranges))


@dataclass(frozen=True)
class MiniSeqConfig:
    M_mlp: int = 1
    M_head: int = 1
    loss_mode: str = TOKEN_WEIGHTED

    def __post_init__(self):
        if self.M_mlp < 1 or self.M_head < 1:
            raise ValueError(f"mini-sequence counts must be >= 1, got {self.M_mlp}, {self.M_head}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")


def _check_plan(plan: ChunkPlan, n: int) -> None:
    if plan.N != n:
        raise ShapeError(f"chunk plan covers {plan.N} rows, input has {n}")


def mask_labels_for_chunk(labels: np.ndarray, rng: tuple[int, int]) -> np.ndarray:
    s, e = rng
    if not (0 <= s < e <= len(labels)):
        raise IndexError(f"chunk [{s},{e}) outside [0,{len(labels)})")
    return np.array(labels[s:e], dtype=np.int64)


# -- MLP -----------------------------------------------------------------


@dataclass
class MiniMlpSaved(_Saved):
    x: Tensor  # borrowed; chunks are re-sliced from it in backward
    plan: ChunkPlan

    def release(self) -> None:
        pass


def _mlp_chunk_project(xi: Tensor, w: MlpWeights) -> MlpSaved:
    gate = matmul(xi, w.w_gate, label=f"{INTER}/mlp.gate")
    up = matmul(xi, w.w_up, label=f"{INTER}/mlp.up")
    return MlpSaved(xi, gate, up)


def miniseq_mlp_forward(
    x: Tensor, w: MlpWeights, plan: ChunkPlan, out_label: str = f"{ACT}/mlp.out"
) -> tuple[Tensor, MiniMlpSaved]:
    """Chunked MLP forward; each chunk's intermediates are freed before the next."""
    n, d = x.shape
    _check_plan(plan, n)
    out = Tensor.zeros((n, d), x.dtype, out_label)
    for s, e in plan.ranges:
        xi = slice_rows(x, s, e, label=f"{TMP}/mlp.x_chunk")
        oi, sv = mlp_forward(xi, w, out_label=f"{TMP}/mlp.out_chunk")
        sv.release()
        write_rows(out, s, oi)
        free_all(oi, xi)
    return out, MiniMlpSaved(x, plan)


def miniseq_mlp_backward(
    d_out: Tensor, saved: MiniMlpSaved, w: MlpWeights, grads: MlpWeights, dx_label: str = f"{TMP}/mlp.dx"
) -> Tensor:
    """Per chunk: recompute the two projections, run the block backward on the
    chunk, accumulate weight gradients in chunk order, place ``dX_i``."""
    _check_saved(saved, MiniMlpSaved)
    x, plan = saved.x, saved.plan
    if d_out.shape != x.shape:
        raise StaleSavedError(f"upstream {d_out.shape} does not match saved input {x.shape}")
    dx = Tensor.zeros(x.shape, x.dtype, dx_label)
    for s, e in plan.ranges:
        xi = slice_rows(x, s, e, label=f"{TMP}/mlp.x_chunk")
        doi = slice_rows(d_out, s, e, label=f"{TMP}/mlp.dout_chunk")
        dxi = mlp_backward(doi, _mlp_chunk_project(xi, w), w, grads, dx_label=f"{TMP}/mlp.dx_chunk")
        write_rows(dx, s, dxi)
        free_all(dxi, doi, xi)
    return dx


# -- LM-Head -------------------------------------------------------------


@dataclass
class MiniHeadSaved(_Saved):
    x: Tensor  # borrowed
    labels: np.ndarray
    plan: ChunkPlan
    mode: str
    denom: float
    counts: list[int] = field(default_factory=list)
    loss_sums: list[float] = field(default_factory=list)

    def release(self) -> None:
        pass

    def chunk_scale(self, i: int, upstream: float) -> float:
        if self.mode == TOKEN_WEIGHTED:
            return upstream / self.denom
        c = self.counts[i]
        return 0.0 if c == 0 else upstream / (c * len(self.plan))


def miniseq_lmhead_forward(
    x: Tensor,
    labels: np.ndarray,
    w: LmHeadWeights,
    plan: ChunkPlan,
    mode: str = TOKEN_WEIGHTED,
    denom: float | None = None,
) -> tuple[float, MiniHeadSaved]:
    """Chunked cross-entropy; each chunk's logits are discarded after its loss.

    ``token-weighted`` divides the summed chunk losses by the total number of
    valid labels (identical to the unchunked mean).  ``paper-mean`` averages the
    per-chunk means over the number of chunks.
    """
    if mode not in LOSS_MODES:
        raise ValueError(f"unknown loss mode {mode!r}")
    labels = check_labels(labels, w.w_out.shape[1])
    n = x.shape[0]
    _check_plan(plan, n)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    total = valid_count(labels)
    if denom is None:
        if total == 0:
            raise DegenerateInputError("all labels are ignore-index")
        denom = total
    saved = MiniHeadSaved(x, labels, plan, mode, float(denom))
    for s, e in plan.ranges:
        xi = slice_rows(x, s, e, label=f"{TMP}/head.x_chunk")
        li = mask_labels_for_chunk(labels, (s, e))
        logits = matmul(xi, w.w_out, label=f"{INTER}/head.logits")
        loss_sum, count = cross_entropy_sum(logits, li)
        free_all(logits, xi)
        saved.loss_sums.append(loss_sum)
        saved.counts.append(count)
    if mode == TOKEN_WEIGHTED:
        acc = 0.0
        for ls in saved.loss_sums:
            acc += ls
        return acc / saved.denom, saved
    means = []
    for ls, c in zip(saved.loss_sums, saved.counts):
        if c == 0:
            warnings.warn("mini-sequence with no valid labels contributes 0 to the paper-mean loss",
                          DegenerateChunkWarning, stacklevel=2)
            means.append(0.0)
        else:
            means.append(ls / c)
    acc = 0.0
    for m in means:
        acc += m
    return acc / len(plan), saved


def miniseq_lmhead_backward(
    saved: MiniHeadSaved,
    w: LmHeadWeights,
    grads: LmHeadWeights,
    upstream: float = 1.0,
    dx_label: str = f"{TMP}/head.dx",
) -> Tensor:
    """Recompute each chunk's logits, turn them into logits gradients in place
    (scaled by the upstream loss gradient), and accumulate ``dW_out``."""
    _check_saved(saved, MiniHeadSaved)
    x, plan = saved.x, saved.plan
    dx = Tensor.zeros(x.shape, x.dtype, dx_label)
    for i, (s, e) in enumerate(plan.ranges):
        xi = slice_rows(x, s, e, label=f"{TMP}/head.x_chunk")
        li = mask_labels_for_chunk(saved.labels, (s, e))
        logits = matmul(xi, w.w_out, label=f"{INTER}/head.logits")
        dxi = lmhead_chunk_backward(xi, li, logits, w, grads, saved.chunk_scale(i, upstream), f"{TMP}/head.dx_chunk")
        write_rows(dx, s, dxi)
        free_all(dxi, xi)
    return dx


def chunk_count(n: int, m: int) -> int:
    return min(m, n)


def chunk_rows(n: int, m: int) -> int:
    return math.ceil(n / min(m, n))
