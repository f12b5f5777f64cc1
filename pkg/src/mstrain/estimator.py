"""Closed-form memory, FLOP and HBM-access predictions.

The peak estimate walks the training step op by op, adding and removing the
byte counts each op allocates, and reports the breakdown at the moment of the
maximum.  The schedule is the one :mod:`mstrain.model` and
:mod:`mstrain.optim` execute, so at desk scale the prediction can be compared
with a tracked run directly; for large models only the byte widths change.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

from .attention import TILE
from .memtrack import CE_FLOPS_PER_ELEMENT
from .model import ModelConfig, layer_names, param_shapes

GIB = 2**30
BREAKDOWN_ROWS = ("weights", "gradients", "optimizer", "activation", "peak-intermediate", "total")

_CATS = ("weights", "gradients", "optimizer", "activation", "intermediate")


@dataclass(frozen=True)
class ByteModel:
    """Bytes per element of each tensor class.

    ``logits_upcast`` is the width the loss is computed in when it differs
    from the compute width (mixed-precision training casts the logits up
    before the softmax); ``None`` means no cast.
    """

    weight: int
    grad: int
    optim: int
    act: int
    logits_upcast: int | None = None

    @classmethod
    def uniform(cls, nbytes: int) -> "ByteModel":
        return cls(nbytes, nbytes, nbytes, nbytes)

    def scaled(self, k: int) -> "ByteModel":
        up = None if self.logits_upcast is None else self.logits_upcast * k
        return ByteModel(self.weight * k, self.grad * k, self.optim * k, self.act * k, up)


BF16_MIXED = ByteModel(weight=2, grad=2, optim=2, act=2, logits_upcast=4)


@dataclass
class MemBreakdown:
    weights: int
    gradients: int
    optimizer: int
    activation: int
    peak_intermediate: int  # intermediate bytes live at the peak
    phase: str = ""
    max_intermediate: int = 0  # largest intermediate footprint at any time
    formulas: dict[str, str] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.weights + self.gradients + self.optimizer + self.activation + self.peak_intermediate

    def rows(self) -> dict[str, int]:
        return {
            "weights": self.weights,
            "gradients": self.gradients,
            "optimizer": self.optimizer,
            "activation": self.activation,
            "peak-intermediate": self.peak_intermediate,
            "total": self.total,
        }


# -- ratios, FLOPs, HBM --------------------------------------------------


def intermediate_ratios(cfg: ModelConfig) -> dict[str, Fraction]:
    """Size of each block's largest intermediate relative to its input."""
    return {
        "attn": 1 + Fraction(2, cfg.G),
        "mlp": Fraction(2 * cfg.I, cfg.d),
        "head": Fraction(cfg.V, cfg.d),
    }


def predict_flops(cfg: ModelConfig, S: int, M: int = 1) -> dict[str, int]:
    """Forward FLOPs of the MLP and LM-Head over ``S`` rows; ``M`` does not enter."""
    del M
    d, i, v = cfg.d, cfg.I, cfg.V
    return {"mlp": 6 * S * d * i, "head": 2 * S * d * v + CE_FLOPS_PER_ELEMENT * S * v}


def predict_hbm(cfg: ModelConfig, S: int, M: int = 1) -> dict[str, int]:
    """Forward element accesses of the MLP and LM-Head over ``S`` rows split
    into ``M`` mini-sequences.

    MLP: each chunk reads its input and weights once per projection, and the
    activation and product stages read/write the ``[rows, I]`` buffers.
    LM-Head: logits written and read back by the loss, two per-row scalars.
    """
    d, i, v = cfg.d, cfg.I, cfg.V
    m = min(M, S)
    return {
        "mlp": 3 * S * d + 8 * S * i + 3 * d * i * m,
        "head": S * d + 2 * S * v + 2 * S + d * v * m,
    }


def predict_weight_reads(cfg: ModelConfig, M: int) -> dict[str, int]:
    return {"mlp": 3 * cfg.d * cfg.I * M, "head": cfg.d * cfg.V * M}


# -- peak memory ---------------------------------------------------------


class _Sim:
    def __init__(self):
        self.live = dict.fromkeys(_CATS, 0)
        self.best = -1
        self.snap: dict[str, int] = {}
        self.phase = ""
        self.where = ""
        self.max_inter = 0

    def alloc(self, cat: str, nbytes: int) -> None:
        self.live[cat] += nbytes
        tot = sum(self.live.values())
        if tot > self.best:
            self.best = tot
            self.snap = dict(self.live)
            self.where = self.phase
        self.max_inter = max(self.max_inter, self.live["intermediate"])

    def free(self, cat: str, nbytes: int) -> None:
        self.live[cat] -= nbytes
        assert self.live[cat] >= 0, (cat, self.live[cat])

    def transient(self, cat: str, nbytes: int) -> None:
        self.alloc(cat, nbytes)
        self.free(cat, nbytes)


@dataclass(frozen=True)
class _Dims:
    n: int
    d: int
    i: int
    v: int
    h: int
    kvd: int
    hd: int
    b: int  # batch
    s: int  # sequence
    bm: ByteModel
    naive: bool

    def act(self, elems: int) -> int:
        return elems * self.bm.act


def _chunk(n: int, m: int) -> int:
    return math.ceil(n / min(m, n))


def _layer_forward(sim: _Sim, z: _Dims, m_mlp: int) -> None:
    """One decoder layer forward; leaves the saved internals and the output live."""
    n, d, a = z.n, z.d, z.act
    sim.alloc("activation", a(n))  # rstd 1
    sim.alloc("activation", a(n * d))  # h1
    sim.alloc("activation", a(n * d))  # q
    sim.alloc("activation", a(2 * n * z.kvd))  # k, v
    if z.naive:
        sim.alloc("activation", a(z.b * z.h * z.s * z.s))  # probs
    else:
        sim.transient("activation", a(2 * TILE * TILE + TILE * (z.hd + 3)))
        sim.alloc("activation", a(n * z.h))  # lse
    sim.alloc("activation", a(n * d))  # o
    sim.alloc("activation", a(n * d))  # attention output
    sim.alloc("activation", a(n * d))  # x2
    sim.free("activation", a(n * d))
    sim.alloc("activation", a(n))  # rstd 2
    sim.alloc("activation", a(n * d))  # h2
    if m_mlp == 1:
        sim.alloc("intermediate", a(3 * n * z.i))  # gate, up, act
        sim.alloc("activation", a(n * d))  # mlp out
        sim.free("intermediate", a(n * z.i))
    else:
        c = _chunk(n, m_mlp)
        sim.alloc("activation", a(n * d))  # mlp out
        sim.alloc("activation", a(c * d))
        sim.alloc("intermediate", a(3 * c * z.i))
        sim.alloc("activation", a(c * d))
        sim.free("intermediate", a(3 * c * z.i))
        sim.free("activation", a(2 * c * d))
    sim.alloc("activation", a(n * d))  # layer out
    sim.free("activation", a(n * d))  # mlp out


def _layer_saved(z: _Dims, m_mlp: int) -> tuple[int, int]:
    """(activation, intermediate) bytes a layer keeps after forward, excluding
    its input and output."""
    n, d = z.n, z.d
    core = z.b * z.h * z.s * z.s if z.naive else n * z.h
    act = z.act(2 * n + 5 * n * d + 2 * n * z.kvd + core)
    inter = z.act(2 * n * z.i) if m_mlp == 1 else 0
    return act, inter


def _layer_backward(sim: _Sim, z: _Dims, m_mlp: int) -> None:
    """Consumes the incoming gradient and the layer internals, leaves ``dX``."""
    n, d, a, i = z.n, z.d, z.act, z.i

    def mlp_bwd(rows: int) -> None:
        # gate, up live; s, h; then d_h; d_gate
        sim.alloc("intermediate", a(2 * rows * i))  # s, h
        sim.free("intermediate", a(rows * i))  # h
        sim.alloc("intermediate", a(rows * i))  # d_h
        sim.free("intermediate", a(rows * i))  # up
        sim.alloc("intermediate", a(rows * i))  # d_gate
        sim.free("intermediate", a(2 * rows * i))  # d_h, gate
        sim.alloc("activation", a(rows * d))  # dx
        sim.free("intermediate", a(2 * rows * i))  # d_up, d_gate

    if m_mlp == 1:
        mlp_bwd(n)
    else:
        c = _chunk(n, m_mlp)
        sim.alloc("activation", a(n * d))
        sim.alloc("activation", a(2 * c * d))  # x chunk, d_out chunk
        sim.alloc("intermediate", a(2 * c * i))  # recomputed gate, up
        mlp_bwd(c)
        sim.free("activation", a(3 * c * d))
    # norm2 backward, residual
    sim.alloc("activation", a(n * d))
    sim.free("activation", a(n))  # rstd 2
    sim.free("activation", a(3 * n * d))  # d_h2, h2, x2
    sim.free("activation", a(n * d))  # d_out
    # attention backward
    sim.alloc("activation", a(n * d))  # d_o
    if not z.naive:
        sim.transient("activation", a(4 * TILE * TILE))
    sim.alloc("activation", a(n * d + 2 * n * z.kvd))  # dq dk dv
    core = z.b * z.h * z.s * z.s if z.naive else n * z.h
    sim.free("activation", a(n * d + 2 * n * z.kvd + core))  # q k v lse/probs
    sim.free("activation", a(2 * n * d))  # d_o, o
    sim.alloc("activation", a(n * d))  # dx of qkv
    sim.free("activation", a(n * d + 2 * n * z.kvd))
    # norm1 backward, residual
    sim.alloc("activation", a(n * d))
    sim.free("activation", a(n))
    sim.free("activation", a(2 * n * d))  # d_h1, h1
    sim.free("activation", a(n * d))  # d_x2


def _head_forward(sim: _Sim, z: _Dims, m_head: int) -> int:
    """Returns the logits bytes kept for backward."""
    n, v, bm = z.n, z.v, z.bm
    rows = n if m_head == 1 else _chunk(n, m_head)
    width = bm.logits_upcast or bm.act
    if m_head > 1:
        sim.alloc("activation", z.act(rows * z.d))
    sim.alloc("intermediate", rows * v * bm.act)
    if bm.logits_upcast:
        sim.alloc("intermediate", rows * v * width)
        sim.free("intermediate", rows * v * bm.act)
    sim.transient("intermediate", rows * v * width)  # softmax workspace
    if m_head == 1:
        return n * v * width
    sim.free("intermediate", rows * v * width)
    sim.free("activation", z.act(rows * z.d))
    return 0


def _head_backward(sim: _Sim, z: _Dims, m_head: int, kept: int) -> None:
    n, v, d, bm = z.n, z.v, z.d, z.bm
    width = bm.logits_upcast or bm.act
    if m_head == 1:
        sim.alloc("activation", z.act(n * d))
        sim.free("intermediate", kept)
        return
    c = _chunk(n, m_head)
    sim.alloc("activation", z.act(n * d))
    sim.alloc("activation", z.act(c * d))
    sim.alloc("intermediate", c * v * bm.act)
    if bm.logits_upcast:
        sim.alloc("intermediate", c * v * width)
        sim.free("intermediate", c * v * bm.act)
    sim.alloc("activation", z.act(c * d))
    sim.free("intermediate", c * v * width)
    sim.free("activation", z.act(2 * c * d))


def predict_peak(
    cfg: ModelConfig,
    S: int | None = None,
    B: int | None = None,
    M_mlp: int | None = None,
    M_head: int | None = None,
    recompute: bool | None = None,
    in_backward: bool = False,
    accum: int = 1,
    bytes_model: ByteModel | None = None,
    optimizer_step: bool = True,
) -> MemBreakdown:
    """Peak bytes of one training step and their split at the peak.

    Arguments left as ``None`` come from ``cfg``.  ``optimizer_step=False``
    stops after backward (the dry-run used by the max-sequence search).
    """
    S = cfg.S if S is None else S
    B = cfg.B if B is None else B
    m_mlp = cfg.miniseq.M_mlp if M_mlp is None else M_mlp
    m_head = cfg.miniseq.M_head if M_head is None else M_head
    rc = cfg.recompute.enabled if recompute is None else recompute
    bm = bytes_model or ByteModel.uniform(cfg.itemsize)
    shapes = param_shapes(cfg)
    nparam = sum(math.prod(s) for s in shapes.values())
    z = _Dims(B * S, cfg.d, cfg.I, cfg.V, cfg.heads, cfg.kv_heads * cfg.head_dim, cfg.head_dim, B, S, bm, cfg.attn_impl == "naive")
    n, d = z.n, z.d

    def group_elems(names: list[str]) -> int:
        return sum(math.prod(shapes[k]) for k in names)

    sim = _Sim()
    sim.phase = "setup"
    sim.alloc("weights", nparam * bm.weight)
    sim.alloc("optimizer", 2 * nparam * bm.optim)
    if accum > 1:
        sim.alloc("gradients", nparam * bm.grad)

    def hook(names: list[str]) -> None:
        if not in_backward:
            return
        if optimizer_step:
            for k in names:
                sim.transient("optimizer", math.prod(shapes[k]) * bm.optim)
        sim.free("gradients", group_elems(names) * bm.grad)

    layer_act, layer_inter = _layer_saved(z, m_mlp)
    for _ in range(accum):
        sim.phase = "forward"
        sim.alloc("activation", z.act(n * d))  # embedding out
        for _ in range(cfg.layers):
            _layer_forward(sim, z, m_mlp)
            if rc:
                sim.free("activation", layer_act)
                sim.free("intermediate", layer_inter)
        sim.alloc("activation", z.act(n + n * d))  # final norm rstd, output
        kept = _head_forward(sim, z, m_head)

        sim.phase = "backward"
        sim.alloc("gradients", group_elems(["head.w_out", "final_norm"]) * bm.grad)
        _head_backward(sim, z, m_head, kept)
        sim.alloc("activation", z.act(n * d))  # d_x
        sim.free("activation", z.act(n + 3 * n * d))  # rstd, d_hf, hf, last output
        hook(["head.w_out", "final_norm"])
        for li in reversed(range(cfg.layers)):
            sim.alloc("gradients", group_elems(layer_names(li)) * bm.grad)
            if rc:
                _layer_forward(sim, z, m_mlp)
                sim.free("activation", z.act(n * d))  # recomputed output
            _layer_backward(sim, z, m_mlp)
            sim.free("activation", z.act(n * d))  # layer input
            hook(layer_names(li))
        sim.alloc("gradients", group_elems(["embed"]) * bm.grad)
        sim.free("activation", z.act(n * d))
        hook(["embed"])
        if accum > 1:
            sim.free("gradients", nparam * bm.grad)

    if optimizer_step and not in_backward:
        sim.phase = "optimizer"
        sim.transient("optimizer", nparam * bm.weight)
    snap = sim.snap
    return MemBreakdown(
        weights=snap["weights"],
        gradients=snap["gradients"],
        optimizer=snap["optimizer"],
        activation=snap["activation"],
        peak_intermediate=snap["intermediate"],
        phase=sim.where,
        max_intermediate=sim.max_inter,
        formulas=_formulas(rc, in_backward, m_mlp, m_head, accum),
    )


def _formulas(rc: bool, in_bwd: bool, m_mlp: int, m_head: int, accum: int) -> dict[str, str]:
    f = {
        "weights": "P * bytes(weight)",
        "gradients": "0 at the optimizer-in-backward peak; otherwise P * bytes(grad)" if in_bwd else "P * bytes(grad)",
        "optimizer": "2 * P * bytes(optim) states" + ("" if in_bwd else " + P * bytes(weight) step workspace"),
        "activation": "(L+1) * N * d layer boundaries" + ("" if rc else " + L * N * (5d + 2 kv_dim + 2 + heads) saved internals"),
        "peak-intermediate": "3 * ceil(N/M_mlp) * I or ceil(N/M_head) * V * (bytes(logits) + bytes(loss)) per live block",
    }
    if accum > 1:
        f["gradients"] += " + P * bytes(grad) accumulator"
    f["note"] = f"M_mlp={m_mlp}, M_head={m_head}, recompute={rc}, in_backward={in_bwd}, accum={accum}"
    return f


# -- reference configuration ---------------------------------------------


def llama3_8b(S: int = 4096, B: int = 1) -> ModelConfig:
    return ModelConfig(d=4096, I=14336, V=128256, G=4, heads=32, layers=32, S=S, B=B, dtype="f32")


def gib(nbytes: int) -> float:
    return nbytes / GIB
