"""Single-process simulation of sequence parallelism with all-to-all head
exchange around attention.

``P`` logical workers each hold a replica of the weights and a contiguous
``S/P`` slice of every sequence.  Everything outside attention (norms, MLP,
LM-Head) runs on the local slice.  Around the attention core an all-to-all
swaps the layout so that each worker sees the full sequence for ``heads/P``
heads, and swaps it back afterwards.  Gradients are averaged across workers
with one all-reduce at the end of the step.

Execution proceeds in phases.  Within a phase every worker runs the same
function on its own state, either one after another or on a thread pool;
collectives run between phases on the calling thread in a fixed
``(round, src, dst)`` order, so both schedules give identical results.
Each worker owns a tracker, so memory is accounted per worker.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import memtrack
from .attention import AttnShape, attention_core, attention_core_backward, out_project, out_project_backward, qkv_backward, qkv_project, rope_rotate
from .blocks import (
    lmhead_backward,
    lmhead_forward,
    mlp_backward,
    mlp_forward,
    rmsnorm_backward,
    rmsnorm_forward,
    embedding_backward,
    embedding_forward,
    valid_count,
)
from .memtrack import ACT, GRAD, OPTIM, TMP, WEIGHT, MemReport, Tracker
from .miniseq import (
    TOKEN_WEIGHTED,
    MiniMlpSaved,
    make_chunk_plan,
    miniseq_lmhead_backward,
    miniseq_lmhead_forward,
    miniseq_mlp_backward,
    miniseq_mlp_forward,
)
from .model import EMBED_GROUP, HEAD_GROUP, GradSet, ModelConfig, ModelWeights, layer_names, param_shapes
from .optim import OptimState
from .tensor import ShapeError, Tensor, add, free_all

SEQ2HEAD = "seq2head"
HEAD2SEQ = "head2seq"


class DivisibilityError(ShapeError):
    pass


class ReplicaMismatchError(RuntimeError):
    pass


@dataclass(frozen=True)
class Collective:
    kind: str  # "all-to-all" | "all-reduce"
    round_no: int
    payload: tuple[tuple[int, int, int], ...]  # (src, dst, elements)

    @property
    def elements(self) -> int:
        return sum(p[2] for p in self.payload)


# -- all-to-all on raw arrays --------------------------------------------


def all_to_all(parts: list[np.ndarray], batch: int, seq: int, nh: int, hd: int, direction: str) -> tuple[list[np.ndarray], list[tuple[int, int, int]]]:
    """Swap between sequence sharding and head sharding.

    ``seq2head``: rank ``r`` holds ``[batch * seq/P, nh*hd]`` rows
    (batch-major over its slice of positions) and receives
    ``[batch * seq, (nh/P)*hd]`` for heads ``[r*nh/P, (r+1)*nh/P)``.
    ``head2seq`` is the inverse.  Returns the new parts and the
    ``(src, dst, elements)`` transfer list.
    """
    p = len(parts)
    if seq % p or nh % p:
        raise DivisibilityError(f"P={p} must divide seq={seq} and heads={nh}")
    sl, hl = seq // p, nh // p
    moves = []
    out = []
    if direction == SEQ2HEAD:
        src_v = [x.reshape(batch, sl, nh, hd) for x in parts]
        for dst in range(p):
            buf = np.empty((batch, seq, hl, hd), dtype=parts[0].dtype)
            for src in range(p):
                blk = src_v[src][:, :, dst * hl : (dst + 1) * hl, :]
                buf[:, src * sl : (src + 1) * sl] = blk
                moves.append((src, dst, blk.size))
            out.append(buf.reshape(batch * seq, hl * hd))
    elif direction == HEAD2SEQ:
        src_v = [x.reshape(batch, seq, hl, hd) for x in parts]
        for dst in range(p):
            buf = np.empty((batch, sl, nh, hd), dtype=parts[0].dtype)
            for src in range(p):
                blk = src_v[src][:, dst * sl : (dst + 1) * sl]
                buf[:, :, src * hl : (src + 1) * hl, :] = blk
                moves.append((src, dst, blk.size))
            out.append(buf.reshape(batch * sl, nh * hd))
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return out, moves


# -- workers -------------------------------------------------------------


@dataclass
class WorkerState:
    rank: int
    tracker: Tracker
    weights: ModelWeights
    cols: tuple[int, int]  # sequence positions [start, end)
    grads: GradSet | None = None
    optim: OptimState | None = None
    st: dict[str, Any] = field(default_factory=dict)


@dataclass
class SPResult:
    loss: float
    grads: dict[str, np.ndarray]
    reports: list[MemReport]
    collectives: list[Collective]

    def peak_bytes(self) -> list[int]:
        return [r.abs_peak_bytes for r in self.reports]

    def activation_peaks(self) -> list[int]:
        """Per-worker peak of everything but weights, gradients and optimizer state."""
        fixed = (f"{WEIGHT}/", f"{GRAD}/", f"{OPTIM}/")
        return [r.class_peak(lambda lab: not lab.startswith(fixed), absolute=True) for r in self.reports]


class SeqParSim:
    def __init__(
        self,
        cfg: ModelConfig,
        P: int,
        weights: dict[str, np.ndarray],
        threads: bool = False,
        optimizer_state: bool = False,
        record_events: bool = True,
    ):
        if P < 1:
            raise ValueError(f"P must be >= 1, got {P}")
        if cfg.S % P or cfg.heads % P or cfg.kv_heads % P:
            raise DivisibilityError(f"P={P} must divide S={cfg.S}, heads={cfg.heads} and kv heads={cfg.kv_heads}")
        if cfg.miniseq.loss_mode != TOKEN_WEIGHTED:
            raise ValueError("sharded loss needs the token-weighted reduction")
        self.cfg = cfg
        self.P = P
        self.threads = threads
        self.round = 0
        self.log: list[Collective] = []
        sl = cfg.S // P
        self.workers: list[WorkerState] = []
        for r in range(P):
            tr = Tracker(record_events=record_events)
            with memtrack.use_tracker(tr):
                w = ModelWeights(cfg, {n: Tensor(np.array(weights[n], dtype=cfg.np_dtype), f"{WEIGHT}/{n}") for n in param_shapes(cfg)})
                opt = OptimState.zeros(cfg) if optimizer_state else None
            self.workers.append(WorkerState(r, tr, w, (r * sl, (r + 1) * sl), optim=opt))
        self.check_replicas()

    # -- execution -----------------------------------------------------------

    def check_replicas(self) -> None:
        ref = self.workers[0].weights
        for w in self.workers[1:]:
            for n, t in w.weights.items():
                if t.data.tobytes() != ref[n].data.tobytes():
                    raise ReplicaMismatchError(f"rank {w.rank} holds a different {n}")

    def phase(self, fn: Callable[[WorkerState], Any]) -> list[Any]:
        def call(w: WorkerState):
            with memtrack.use_tracker(w.tracker):
                return fn(w)

        if self.threads and self.P > 1:
            with ThreadPoolExecutor(max_workers=self.P) as ex:
                return list(ex.map(call, self.workers))
        return [call(w) for w in self.workers]

    def _a2a(self, key: str, nh: int, direction: str, label: str) -> None:
        cfg = self.cfg
        srcs = [w.st.pop(key) for w in self.workers]
        outs, moves = all_to_all([t.data for t in srcs], cfg.B, cfg.S, nh, cfg.head_dim, direction)
        # destination buffers exist before the sources are released
        for w, arr in zip(self.workers, outs):
            with memtrack.use_tracker(w.tracker):
                w.st[key] = Tensor(arr, label)
        for t in srcs:
            t.free()
        self.log.append(Collective("all-to-all", self.round, tuple(moves)))
        self.round += 1

    def _allreduce_sum(self, values: list[float]) -> float:
        acc = 0.0
        for v in values:
            acc += v
        self.log.append(Collective("all-reduce", self.round, tuple((r, -1, 1) for r in range(self.P))))
        self.round += 1
        return acc

    def _allreduce_grads_mean(self) -> None:
        moves = []
        for n in param_shapes(self.cfg):
            bufs = [w.grads[n].data for w in self.workers]
            acc = bufs[0].copy()
            for b in bufs[1:]:
                acc += b
            acc /= self.P
            for r, b in enumerate(bufs):
                b[...] = acc
                moves.append((r, -1, b.size))
        self.log.append(Collective("all-reduce", self.round, tuple(moves)))
        self.round += 1

    def _local_shape(self) -> AttnShape:
        c = self.cfg
        return AttnShape(c.B, c.S, c.heads // self.P, c.kv_heads // self.P, c.head_dim)

    # -- layer ---------------------------------------------------------------

    def _layer_forward(self, li: int) -> None:
        cfg = self.cfg
        p = f"l{li}."

        def pre(w: WorkerState):
            lw = w.weights.layer(li)
            x = w.st[f"x{li}"]
            h1, n1 = rmsnorm_forward(x, lw.norm1, label=f"{ACT}/l{li}.norm1")
            q, k, v = qkv_project(h1, lw.attn)
            w.st.update({p + "h1": h1, p + "n1": n1, "q": q, "k": k, "v": v})

        self.phase(pre)
        self._a2a("q", cfg.heads, SEQ2HEAD, f"{ACT}/attn.q")
        self._a2a("k", cfg.kv_heads, SEQ2HEAD, f"{ACT}/attn.k")
        self._a2a("v", cfg.kv_heads, SEQ2HEAD, f"{ACT}/attn.v")
        shp = self._local_shape()

        def core(w: WorkerState):
            q, k, v = w.st.pop("q"), w.st.pop("k"), w.st.pop("v")
            if cfg.rope:
                rope_rotate(q.data, shp, shp.heads)
                rope_rotate(k.data, shp, shp.kv_heads)
            o, csv = attention_core(q, k, v, shp, cfg.attn_impl)
            w.st[p + "core"] = csv
            w.st["o"] = Tensor(o.data.copy(), f"{TMP}/attn.o_send")

        self.phase(core)
        self._a2a("o", cfg.heads, HEAD2SEQ, f"{ACT}/attn.o_seq")

        def post(w: WorkerState):
            lw = w.weights.layer(li)
            x = w.st[f"x{li}"]
            o = w.st.pop("o")
            a = out_project(o, lw.attn, label=f"{TMP}/attn.out")
            x2 = add(x, a, label=f"{ACT}/l{li}.resid")
            a.free()
            h2, n2 = rmsnorm_forward(x2, lw.norm2, label=f"{ACT}/l{li}.norm2")
            n_loc = x.shape[0]
            if cfg.miniseq.M_mlp > 1:
                m, msv = miniseq_mlp_forward(h2, lw.mlp, make_chunk_plan(n_loc, cfg.miniseq.M_mlp), out_label=f"{TMP}/mlp.out")
            else:
                m, msv = mlp_forward(h2, lw.mlp, out_label=f"{TMP}/mlp.out")
            out = add(x2, m, label=f"{ACT}/l{li}.out")
            m.free()
            w.st.update({p + "o": o, p + "x2": x2, p + "h2": h2, p + "n2": n2, p + "mlp": msv, f"x{li + 1}": out})

        self.phase(post)

    def _layer_release(self, li: int) -> None:
        p = f"l{li}."

        def rel(w: WorkerState):
            st = w.st
            st.pop(p + "n1").release()
            st.pop(p + "core").release()
            st.pop(p + "n2").release()
            st.pop(p + "mlp").release()
            free_all(st.pop(p + "h1"), st.pop(p + "o"), st.pop(p + "x2"), st.pop(p + "h2"))

        self.phase(rel)

    def _layer_backward(self, li: int) -> None:
        cfg = self.cfg
        p = f"l{li}."

        def post_b(w: WorkerState):
            st = w.st
            lw, lg = w.weights.layer(li), w.grads.layer(li)
            d_out = st.pop("dx")
            msv = st.pop(p + "mlp")
            if isinstance(msv, MiniMlpSaved):
                d_h2 = miniseq_mlp_backward(d_out, msv, lw.mlp, lg.mlp)
            else:
                d_h2 = mlp_backward(d_out, msv, lw.mlp, lg.mlp)
            d_x2 = rmsnorm_backward(d_h2, st.pop(p + "n2"), lw.norm2, lg.norm2)
            free_all(d_h2, st.pop(p + "h2"), st.pop(p + "x2"))
            add(d_x2, d_out, inplace=True)
            d_out.free()
            o = st.pop(p + "o")
            d_o = out_project_backward(d_x2, o, lw.attn, lg.attn)
            o.free()
            st["d_x2"] = d_x2
            st["d_o"] = d_o

        self.phase(post_b)
        self._a2a("d_o", cfg.heads, SEQ2HEAD, f"{TMP}/attn.do")
        shp = self._local_shape()

        def core_b(w: WorkerState):
            st = w.st
            d_o = st.pop("d_o")
            csv = st.pop(p + "core")
            dq, dk, dv = attention_core_backward(d_o, csv)
            free_all(d_o, csv.o)
            if cfg.rope:
                rope_rotate(dq.data, shp, shp.heads, inverse=True)
                rope_rotate(dk.data, shp, shp.kv_heads, inverse=True)
            st.update({"dq": dq, "dk": dk, "dv": dv})

        self.phase(core_b)
        self._a2a("dq", cfg.heads, HEAD2SEQ, f"{TMP}/attn.dq")
        self._a2a("dk", cfg.kv_heads, HEAD2SEQ, f"{TMP}/attn.dk")
        self._a2a("dv", cfg.kv_heads, HEAD2SEQ, f"{TMP}/attn.dv")

        def pre_b(w: WorkerState):
            st = w.st
            lw, lg = w.weights.layer(li), w.grads.layer(li)
            h1 = st.pop(p + "h1")
            d_h1 = qkv_backward(h1, st.pop("dq"), st.pop("dk"), st.pop("dv"), lw.attn, lg.attn, dx_label=f"{TMP}/attn.dx")
            d_x = rmsnorm_backward(d_h1, st.pop(p + "n1"), lw.norm1, lg.norm1)
            free_all(d_h1, h1)
            d_x2 = st.pop("d_x2")
            add(d_x, d_x2, inplace=True)
            d_x2.free()
            st.pop(f"x{li}").free()
            st["dx"] = d_x

        self.phase(pre_b)

    # -- step ----------------------------------------------------------------

    def train_step(self, tokens: np.ndarray, labels: np.ndarray) -> SPResult:
        """Forward and backward over the sharded batch, then the gradient
        all-reduce.  Returns the global loss and the averaged gradients."""
        cfg = self.cfg
        tokens = np.asarray(tokens, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        if tokens.shape != (cfg.B, cfg.S) or labels.shape != tokens.shape:
            raise ShapeError(f"tokens/labels must be {(cfg.B, cfg.S)}, got {tokens.shape}, {labels.shape}")
        self.check_replicas()
        for w in self.workers:
            w.tracker.region_begin("sp-step")
        count = self._allreduce_sum([float(valid_count(labels[:, w.cols[0] : w.cols[1]])) for w in self.workers])
        if count == 0:
            raise ValueError("all labels are ignore-index")

        def embed(w: WorkerState):
            s0, s1 = w.cols
            w.st["tok"] = tokens[:, s0:s1].reshape(-1)
            w.st["lab"] = labels[:, s0:s1].reshape(-1)
            w.st["x0"] = embedding_forward(w.st["tok"], w.weights["embed"], label=f"{ACT}/embed")

        self.phase(embed)
        for li in range(cfg.layers):
            self._layer_forward(li)
            if cfg.recompute.enabled:
                self._layer_release(li)

        def head(w: WorkerState):
            st = w.st
            x = st[f"x{cfg.layers}"]
            hf, nf = rmsnorm_forward(x, w.weights["final_norm"], label=f"{ACT}/final_norm")
            if cfg.miniseq.M_head > 1:
                plan = make_chunk_plan(x.shape[0], cfg.miniseq.M_head)
                loss, hsv = miniseq_lmhead_forward(hf, st["lab"], w.weights.head(), plan, TOKEN_WEIGHTED, denom=count)
            else:
                loss, hsv = lmhead_forward(hf, st["lab"], w.weights.head(), denom=count)
            st.update({"hf": hf, "nf": nf, "head": hsv})
            return loss

        loss = self._allreduce_sum(self.phase(head))

        def head_b(w: WorkerState):
            st = w.st
            w.grads = GradSet(cfg)
            w.grads.allocate(HEAD_GROUP)
            hsv = st.pop("head")
            # local seed scaled by P so that the mean all-reduce yields the global gradient
            if cfg.miniseq.M_head > 1:
                d_hf = miniseq_lmhead_backward(hsv, w.weights.head(), w.grads.head(), upstream=float(self.P))
            else:
                d_hf = lmhead_backward(hsv, w.weights.head(), w.grads.head(), upstream=float(self.P))
            d_x = rmsnorm_backward(d_hf, st.pop("nf"), w.weights["final_norm"], w.grads["final_norm"])
            free_all(d_hf, st.pop("hf"), st.pop(f"x{cfg.layers}"))
            st["dx"] = d_x

        self.phase(head_b)
        for li in reversed(range(cfg.layers)):
            self.phase(lambda w, li=li: w.grads.allocate(layer_names(li)))
            if cfg.recompute.enabled:
                self._layer_forward(li)
                self.phase(lambda w, li=li: w.st.pop(f"x{li + 1}").free())
            self._layer_backward(li)

        def embed_b(w: WorkerState):
            w.grads.allocate(EMBED_GROUP)
            embedding_backward(w.st.pop("tok"), w.st["dx"], w.grads["embed"])
            w.st.pop("dx").free()
            w.st.pop("lab")

        self.phase(embed_b)
        self._allreduce_grads_mean()
        grads = self.workers[0].grads.numpy()
        reports = []
        for w in self.workers:
            rep, _ = w.tracker.region_end("sp-step")
            reports.append(rep)
            with memtrack.use_tracker(w.tracker):
                w.grads.free()
            w.grads = None
        return SPResult(loss, grads, reports, list(self.log))

    def free(self) -> None:
        for w in self.workers:
            w.weights.free()
            if w.optim is not None:
                w.optim.free()


def sp_train_step(
    cfg: ModelConfig,
    P: int,
    weights: dict[str, np.ndarray],
    tokens: np.ndarray,
    labels: np.ndarray,
    threads: bool = False,
) -> SPResult:
    sim = SeqParSim(cfg, P, weights, threads=threads)
    try:
        return sim.train_step(tokens, labels)
    finally:
        sim.free()


def sp_dry_run_peak(cfg: ModelConfig, P: int, weights: dict[str, np.ndarray], tokens: np.ndarray, labels: np.ndarray) -> int:
    """Largest per-worker peak of one forward + backward, with replicated
    weights and optimizer moments resident."""
    sim = SeqParSim(cfg, P, weights, optimizer_state=True, record_events=False)
    try:
        res = sim.train_step(tokens, labels)
        return max(res.peak_bytes())
    finally:
        sim.free()


def sp_max_seq(cfg: ModelConfig, P: int, budget: int, quantum: int = 64, limit: int = 1 << 16, seed: int = 0):
    """Largest sequence length whose per-worker peak fits ``budget`` with
    ``P`` workers.  ``quantum`` is rounded up to a multiple of ``P``."""
    import math

    from .model import init_weights
    from .train import bisect_max_seq, random_batch

    q = quantum * P // math.gcd(quantum, P)
    with memtrack.use_tracker(Tracker(record_events=False)):
        weights = init_weights(cfg).numpy()

    def probe(s: int) -> int:
        c = cfg.replace(S=s)
        return sp_dry_run_peak(c, P, weights, *random_batch(c, seed))

    return bisect_max_seq(probe, budget, q, limit)
