"""Causal grouped-query attention.

Two cores share one interface:

* ``naive`` materialises the full ``[S, S]`` probability matrix per head and
  keeps it for backward.  It is the reference.
* ``tiled`` walks ``TILE x TILE`` score tiles with an online softmax, keeps only
  the per-row log-sum-exp, and recomputes probabilities tile by tile in
  backward.  Memory stays linear in sequence length, which the sequence-length
  experiments depend on.

Score and value products inside the core go straight to BLAS.

Rows of every ``[N, *]`` activation are laid out batch-major (``b * S + s``).
Query head ``h`` reads key/value head ``h // G`` where ``G`` is the number of
query heads per key/value head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .blocks import StaleSavedError, _check_saved, _Params, _Saved
from .memtrack import ACT, ATTN, TMP, Tracker
from .tensor import ShapeError, Tensor, free_all, matmul

TILE = 64
ROPE_BASE = 10000.0


def mm_kernel(a: np.ndarray, b: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    # Attention products are never split along the mini-sequence axis, so the
    # order-preserving kernel buys nothing here; use BLAS.
    if out is None:
        return a @ b
    out += a @ b
    return out


@dataclass
class AttnWeights(_Params):
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor


@dataclass(frozen=True)
class AttnShape:
    batch: int
    seq: int
    heads: int  # query heads held by this caller
    kv_heads: int
    head_dim: int

    @property
    def group(self) -> int:
        return self.heads // self.kv_heads

    def check(self, q: Tensor, k: Tensor, v: Tensor) -> None:
        n = self.batch * self.seq
        if self.heads % self.kv_heads:
            raise ShapeError(f"{self.heads} query heads not divisible by {self.kv_heads} kv heads")
        if q.shape != (n, self.heads * self.head_dim):
            raise ShapeError(f"q shape {q.shape} != {(n, self.heads * self.head_dim)}")
        if k.shape != (n, self.kv_heads * self.head_dim) or v.shape != k.shape:
            raise ShapeError(f"k/v shapes {k.shape}, {v.shape} inconsistent with {self}")


def _heads(x: np.ndarray, shp: AttnShape, nh: int) -> np.ndarray:
    """[N, nh*hd] -> [B, nh, S, hd] (a copy)."""
    return np.ascontiguousarray(x.reshape(shp.batch, shp.seq, nh, shp.head_dim).transpose(0, 2, 1, 3))


def _unheads(x: np.ndarray, shp: AttnShape) -> np.ndarray:
    b, nh, s, hd = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3).reshape(b * s, nh * hd))


def _count_core(tr: Tracker, shp: AttnShape, backward: bool) -> None:
    # causal tiles only; each tile is two (fwd) or four (bwd) small matmuls
    s, hd = shp.seq, shp.head_dim
    nt = math.ceil(s / TILE)
    for qi in range(nt):
        rq = min(TILE, s - qi * TILE)
        for ki in range(qi + 1):
            rk = min(TILE, s - ki * TILE)
            reps = shp.batch * shp.heads
            for _ in range(4 if backward else 2):
                tr.counters.flops += reps * 2 * rq * rk * hd
                tr.counters.hbm_elements += reps * (rq * hd + rk * hd + rq * rk)


@dataclass
class CoreSaved(_Saved):
    q: Tensor
    k: Tensor
    v: Tensor
    o: Tensor
    lse: Tensor | None  # tiled: [B*heads, S]
    probs: Tensor | None  # naive: [B*heads, S, S]
    shape: AttnShape
    impl: str

    def release(self) -> None:
        free_all(self.q, self.k, self.v, self.o, self.lse, self.probs)


def attention_core(q: Tensor, k: Tensor, v: Tensor, shp: AttnShape, impl: str = "tiled") -> tuple[Tensor, CoreSaved]:
    """Softmax(Q K^T / sqrt(hd) + causal mask) V per head.

    Takes ownership of ``q``, ``k`` and ``v`` (they are kept in the saved state).
    """
    shp.check(q, k, v)
    tr = q._tracker
    qh = _heads(q.data, shp, shp.heads)
    kh = _heads(k.data, shp, shp.kv_heads)
    vh = _heads(v.data, shp, shp.kv_heads)
    scale = 1.0 / math.sqrt(shp.head_dim)
    b, h, s, hd = qh.shape
    g = shp.group
    oh = np.empty_like(qh)
    if impl == "naive":
        probs = np.empty((b, h, s, s), dtype=qh.dtype)
        mask = np.triu(np.ones((s, s), dtype=bool), 1)
        for bi in range(b):
            for hi in range(h):
                sc = mm_kernel(qh[bi, hi], kh[bi, hi // g].T) * scale
                sc[mask] = -np.inf
                sc -= sc.max(axis=1, keepdims=True)
                np.exp(sc, out=sc)
                sc /= sc.sum(axis=1, keepdims=True)
                probs[bi, hi] = sc
                oh[bi, hi] = mm_kernel(sc, vh[bi, hi // g])
        tr.counters.flops += 4 * b * h * s * s * hd
        tr.counters.hbm_elements += 2 * b * h * (2 * s * hd + s * s)
        p_t = Tensor(probs.reshape(b * h, s, s), f"{ATTN}/attn.probs")
        o = Tensor(_unheads(oh, shp), f"{ACT}/attn.o")
        return o, CoreSaved(q, k, v, o, None, p_t, shp, impl)
    if impl != "tiled":
        raise ValueError(f"unknown attention impl {impl!r}")

    lse = np.empty((b, h, s), dtype=qh.dtype)
    ws = 2 * TILE * TILE + TILE * (hd + 3)
    with tr.scratch(ws * qh.itemsize, f"{ATTN}/attn.tile"):
        for bi in range(b):
            for hi in range(h):
                qm, km, vm = qh[bi, hi], kh[bi, hi // g], vh[bi, hi // g]
                for q0 in range(0, s, TILE):
                    q1 = min(s, q0 + TILE)
                    rq = q1 - q0
                    m = np.full(rq, -np.inf, dtype=qh.dtype)
                    lsum = np.zeros(rq, dtype=qh.dtype)
                    acc = np.zeros((rq, hd), dtype=qh.dtype)
                    for k0 in range(0, q1, TILE):
                        k1 = min(s, k0 + TILE)
                        sc = mm_kernel(qm[q0:q1], km[k0:k1].T) * scale
                        if k1 > q0:
                            qpos = np.arange(q0, q1)[:, None]
                            kpos = np.arange(k0, k1)[None, :]
                            sc[kpos > qpos] = -np.inf
                        m_new = np.maximum(m, sc.max(axis=1))
                        p = np.exp(sc - m_new[:, None])
                        corr = np.exp(m - m_new)
                        lsum = lsum * corr + p.sum(axis=1)
                        acc *= corr[:, None]
                        mm_kernel(p, vm[k0:k1], out=acc)
                        m = m_new
                    oh[bi, hi, q0:q1] = acc / lsum[:, None]
                    lse[bi, hi, q0:q1] = m + np.log(lsum)
    _count_core(tr, shp, backward=False)
    lse_t = Tensor(lse.reshape(b * h, s), f"{ACT}/attn.lse")
    o = Tensor(_unheads(oh, shp), f"{ACT}/attn.o")
    return o, CoreSaved(q, k, v, o, lse_t, None, shp, impl)


def attention_core_backward(d_o: Tensor, saved: CoreSaved) -> tuple[Tensor, Tensor, Tensor]:
    """Gradients w.r.t. q, k, v.  Frees the saved state except ``o``, which is
    returned to the caller's ownership through ``saved.o`` (still needed for
    the output projection gradient)."""
    _check_saved(saved, CoreSaved)
    shp = saved.shape
    if d_o.shape != saved.o.shape:
        raise StaleSavedError(f"upstream {d_o.shape} does not match saved output {saved.o.shape}")
    tr = d_o._tracker
    qh = _heads(saved.q.data, shp, shp.heads)
    kh = _heads(saved.k.data, shp, shp.kv_heads)
    vh = _heads(saved.v.data, shp, shp.kv_heads)
    doh = _heads(d_o.data, shp, shp.heads)
    oh = _heads(saved.o.data, shp, shp.heads)
    scale = 1.0 / math.sqrt(shp.head_dim)
    b, h, s, hd = qh.shape
    g = shp.group
    dq = np.zeros_like(qh)
    dk = np.zeros_like(kh)
    dv = np.zeros_like(vh)
    delta = (doh * oh).sum(axis=3)  # [B, H, S]

    if saved.impl == "naive":
        probs = saved.probs.data.reshape(b, h, s, s)
        for bi in range(b):
            for hi in range(h):
                p = probs[bi, hi]
                kv = hi // g
                mm_kernel(p.T, doh[bi, hi], out=dv[bi, kv])
                dp = mm_kernel(doh[bi, hi], vh[bi, kv].T)
                ds = p * (dp - delta[bi, hi][:, None])
                dq[bi, hi] = mm_kernel(ds, kh[bi, kv]) * scale
                dk[bi, kv] += mm_kernel(ds.T, qh[bi, hi]) * scale
        tr.counters.flops += 8 * b * h * s * s * hd
    else:
        lse = saved.lse.data.reshape(b, h, s)
        ws = 4 * TILE * TILE
        with tr.scratch(ws * qh.itemsize, f"{ATTN}/attn.tile"):
            for bi in range(b):
                for hi in range(h):
                    kv = hi // g
                    qm, km, vm, dom = qh[bi, hi], kh[bi, kv], vh[bi, kv], doh[bi, hi]
                    for k0 in range(0, s, TILE):
                        k1 = min(s, k0 + TILE)
                        for q0 in range(k0 - k0 % TILE, s, TILE):
                            q1 = min(s, q0 + TILE)
                            sc = mm_kernel(qm[q0:q1], km[k0:k1].T) * scale
                            if k1 > q0:
                                qpos = np.arange(q0, q1)[:, None]
                                kpos = np.arange(k0, k1)[None, :]
                                sc[kpos > qpos] = -np.inf
                            p = np.exp(sc - lse[bi, hi, q0:q1, None])
                            mm_kernel(p.T, dom[q0:q1], out=dv[bi, kv, k0:k1])
                            dp = mm_kernel(dom[q0:q1], vm[k0:k1].T)
                            ds = p * (dp - delta[bi, hi, q0:q1, None]) * scale
                            mm_kernel(ds, km[k0:k1], out=dq[bi, hi, q0:q1])
                            mm_kernel(ds.T, qm[q0:q1], out=dk[bi, kv, k0:k1])
        _count_core(tr, shp, backward=True)
    free_all(saved.q, saved.k, saved.v, saved.lse, saved.probs)
    return (
        Tensor(_unheads(dq, shp), f"{TMP}/attn.dq"),
        Tensor(_unheads(dk, shp), f"{TMP}/attn.dk"),
        Tensor(_unheads(dv, shp), f"{TMP}/attn.dv"),
    )


# -- full attention block ------------------------------------------------


def qkv_project(x: Tensor, w: AttnWeights) -> tuple[Tensor, Tensor, Tensor]:
    q = matmul(x, w.w_q, label=f"{ACT}/attn.q")
    k = matmul(x, w.w_k, label=f"{ACT}/attn.k")
    v = matmul(x, w.w_v, label=f"{ACT}/attn.v")
    return q, k, v


def qkv_backward(x: Tensor, dq: Tensor, dk: Tensor, dv: Tensor, w: AttnWeights, grads: AttnWeights, dx_label: str) -> Tensor:
    matmul(x, dq, trans_a=True, out=grads.w_q)
    matmul(x, dk, trans_a=True, out=grads.w_k)
    matmul(x, dv, trans_a=True, out=grads.w_v)
    dx = matmul(dq, w.w_q, trans_b=True, label=dx_label)
    matmul(dk, w.w_k, trans_b=True, out=dx)
    matmul(dv, w.w_v, trans_b=True, out=dx)
    free_all(dq, dk, dv)
    return dx


def out_project(o: Tensor, w: AttnWeights, label: str = f"{ACT}/attn.out") -> Tensor:
    return matmul(o, w.w_o, label=label)


def out_project_backward(d_out: Tensor, o: Tensor, w: AttnWeights, grads: AttnWeights) -> Tensor:
    matmul(o, d_out, trans_a=True, out=grads.w_o)
    return matmul(d_out, w.w_o, trans_b=True, label=f"{TMP}/attn.do")


@dataclass
class AttnSaved(_Saved):
    x: Tensor  # borrowed
    core: CoreSaved
    rope: bool = False

    def release(self) -> None:
        self.core.release()


def rope_rotate(x: np.ndarray, shp: AttnShape, nh: int, inverse: bool = False, base: float = ROPE_BASE) -> None:
    """Rotate channel pairs ``(2i, 2i+1)`` of every head in place by
    ``pos * base**(-2i/hd)``; ``inverse`` applies the transpose rotation."""
    hd = shp.head_dim
    if hd % 2:
        raise ShapeError(f"rotary embedding needs an even head dim, got {hd}")
    pos = np.arange(shp.seq, dtype=x.dtype)
    theta = base ** (-np.arange(0, hd, 2, dtype=x.dtype) / hd)
    ang = pos[:, None] * theta[None, :]  # [S, hd/2]
    cos, sin = np.cos(ang), np.sin(ang)
    if inverse:
        sin = -sin
    v = x.reshape(shp.batch, shp.seq, nh, hd // 2, 2)
    a = v[..., 0].copy()
    b = v[..., 1].copy()
    c, s = cos[None, :, None, :], sin[None, :, None, :]
    v[..., 0] = a * c - b * s
    v[..., 1] = a * s + b * c


def attn_shape(batch: int, seq: int, d: int, heads: int, group: int) -> AttnShape:
    if heads % group or d % heads:
        raise ShapeError(f"need heads % G == 0 and d % heads == 0 (d={d}, heads={heads}, G={group})")
    return AttnShape(batch, seq, heads, heads // group, d // heads)


def attn_forward(
    x: Tensor,
    w: AttnWeights,
    shp: AttnShape,
    impl: str = "tiled",
    out_label: str = f"{ACT}/attn.out",
    rope: bool = False,
) -> tuple[Tensor, AttnSaved]:
    q, k, v = qkv_project(x, w)
    if rope:
        rope_rotate(q.data, shp, shp.heads)
        rope_rotate(k.data, shp, shp.kv_heads)
    o, core = attention_core(q, k, v, shp, impl)
    return out_project(o, w, out_label), AttnSaved(x, core, rope)


def attn_backward(
    d_out: Tensor, saved: AttnSaved, w: AttnWeights, grads: AttnWeights, dx_label: str = f"{TMP}/attn.dx"
) -> Tensor:
    _check_saved(saved, AttnSaved)
    d_o = out_project_backward(d_out, saved.core.o, w, grads)
    shp = saved.core.shape
    dq, dk, dv = attention_core_backward(d_o, saved.core)
    free_all(d_o, saved.core.o)
    if saved.rope:
        rope_rotate(dq.data, shp, shp.heads, inverse=True)
        rope_rotate(dk.data, shp, shp.kv_heads, inverse=True)
    return qkv_backward(saved.x, dq, dk, dv, w, grads, dx_label)

