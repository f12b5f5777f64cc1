"""Llama-style decoder with swappable standard / mini-sequence blocks.

``embedding -> L x [RMSNorm, attention, residual, RMSNorm, MLP, residual]
-> RMSNorm -> LM-Head``.  Parameters live in flat, canonically ordered name
-> tensor maps; block-level views (:class:`AttnWeights`, :class:`MlpWeights`,
...) are built on demand so that weights and gradients share one layout.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping

import numpy as np

from .attention import AttnSaved, AttnWeights, attn_backward, attn_forward, attn_shape
from .blocks import (
    LmHeadSaved,
    LmHeadWeights,
    MlpSaved,
    MlpWeights,
    RmsSaved,
    StaleSavedError,
    _check_saved,
    _Saved,
    embedding_backward,
    embedding_forward,
    lmhead_backward,
    lmhead_forward,
    mlp_backward,
    mlp_forward,
    rmsnorm_backward,
    rmsnorm_forward,
)
from .memtrack import ACT, GRAD, TMP, WEIGHT
from .miniseq import (
    MiniHeadSaved,
    MiniMlpSaved,
    MiniSeqConfig,
    make_chunk_plan,
    miniseq_lmhead_backward,
    miniseq_lmhead_forward,
    miniseq_mlp_backward,
    miniseq_mlp_forward,
)
from .recompute import CheckpointPolicy, CheckpointSaved, checkpointed_backward, checkpointed_forward
from .tensor import Dtype, Tensor, add, free_all

INIT_STD = 0.02
CKPT_MAGIC = b"MSTW"
CKPT_VERSION = 1

_ATTN_NAMES = ("w_q", "w_k", "w_v", "w_o")
_MLP_NAMES = ("w_gate", "w_up", "w_down")


class ConfigError(ValueError):
    pass


# -- configuration -------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    I: int = 224  # noqa: E741
    V: int = 2048
    G: int = 2  # query heads per key/value head
    heads: int = 4
    layers: int = 2
    S: int = 256
    B: int = 1
    dtype: str = "f64"
    miniseq: MiniSeqConfig = field(default_factory=MiniSeqConfig)
    recompute: CheckpointPolicy = field(default_factory=CheckpointPolicy)
    seed: int = 0
    rope: bool = False
    attn_impl: str = "tiled"

    def __post_init__(self):
        for name in ("d", "I", "V", "G", "heads", "S", "B"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.layers < 0:
            raise ConfigError(f"layers must be >= 0, got {self.layers}")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.heads % self.G:
            raise ConfigError(f"heads={self.heads} not divisible by G={self.G}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.attn_impl not in ("tiled", "naive"):
            raise ConfigError(f"attn_impl must be 'tiled' or 'naive', got {self.attn_impl!r}")
        object.__setattr__(self, "dtype", Dtype.parse(self.dtype).value)

    @property
    def np_dtype(self) -> np.dtype:
        return Dtype.parse(self.dtype).np

    @property
    def itemsize(self) -> int:
        return Dtype.parse(self.dtype).itemsize

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @property
    def kv_heads(self) -> int:
        return self.heads // self.G

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kw = dict(raw)
        ms = kw.get("miniseq")
        if isinstance(ms, Mapping):
            kw["miniseq"] = MiniSeqConfig(**ms)
        rc = kw.get("recompute")
        if isinstance(rc, bool):
            kw["recompute"] = CheckpointPolicy(enabled=rc)
        elif isinstance(rc, Mapping):
            kw["recompute"] = CheckpointPolicy(**rc)
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter order and shapes."""
    d, i, v = cfg.d, cfg.I, cfg.V
    kvd = cfg.kv_heads * cfg.head_dim
    out: dict[str, tuple[int, ...]] = {"embed": (v, d)}
    for li in range(cfg.layers):
        p = f"layers.{li}"
        out[f"{p}.attn.w_q"] = (d, d)
        out[f"{p}.attn.w_k"] = (d, kvd)
        out[f"{p}.attn.w_v"] = (d, kvd)
        out[f"{p}.attn.w_o"] = (d, d)
        out[f"{p}.mlp.w_gate"] = (d, i)
        out[f"{p}.mlp.w_up"] = (d, i)
        out[f"{p}.mlp.w_down"] = (i, d)
        out[f"{p}.norm1"] = (d,)
        out[f"{p}.norm2"] = (d,)
    out["final_norm"] = (d,)
    out["head.w_out"] = (d, v)
    return out


def layer_names(li: int) -> list[str]:
    p = f"layers.{li}"
    return [f"{p}.attn.{n}" for n in _ATTN_NAMES] + [f"{p}.mlp.{n}" for n in _MLP_NAMES] + [f"{p}.norm1", f"{p}.norm2"]


HEAD_GROUP = ["head.w_out", "final_norm"]
EMBED_GROUP = ["embed"]


def backward_groups(cfg: ModelConfig) -> list[list[str]]:
    """Parameter groups in the order backward finalises their gradients."""
    return [HEAD_GROUP] + [layer_names(li) for li in reversed(range(cfg.layers))] + [EMBED_GROUP]


def num_params(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


# -- parameter sets ------------------------------------------------------


@dataclass
class LayerWeights:
    attn: AttnWeights
    mlp: MlpWeights
    norm1: Tensor
    norm2: Tensor


class ParamSet:
    """Name -> tensor map in canonical order with block-level views."""

    def __init__(self, cfg: ModelConfig, tensors: Mapping[str, Tensor] | None = None):
        self.cfg = cfg
        self._t: dict[str, Tensor] = dict(tensors or {})

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __len__(self) -> int:
        return len(self._t)

    def names(self) -> list[str]:
        return [n for n in param_shapes(self.cfg) if n in self._t]

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for n in self.names():
            yield n, self._t[n]

    def layer(self, li: int) -> LayerWeights:
        p = f"layers.{li}"
        t = self._t
        return LayerWeights(
            attn=AttnWeights(*(t[f"{p}.attn.{n}"] for n in _ATTN_NAMES)),
            mlp=MlpWeights(*(t[f"{p}.mlp.{n}"] for n in _MLP_NAMES)),
            norm1=t[f"{p}.norm1"],
            norm2=t[f"{p}.norm2"],
        )

    def head(self) -> LmHeadWeights:
        return LmHeadWeights(self._t["head.w_out"])

    @property
    def nbytes(self) -> int:
        return sum(t.nbytes for t in self._t.values())

    def numpy(self) -> dict[str, np.ndarray]:
        return {n: t.numpy() for n, t in self.items()}

    def free(self) -> None:
        free_all(*self._t.values())
        self._t.clear()


class ModelWeights(ParamSet):
    pass


class GradSet(ParamSet):
    """Per-parameter gradient buffers; entries may be allocated lazily."""

    def allocate(self, names: list[str], label_prefix: str = GRAD) -> None:
        shapes = param_shapes(self.cfg)
        for n in names:
            if n not in self._t:
                self._t[n] = Tensor.zeros(shapes[n], self.cfg.dtype, f"{label_prefix}/{n}")

    def release(self, names: list[str]) -> None:
        for n in names:
            t = self._t.pop(n, None)
            free_all(t)

    @classmethod
    def zeros(cls, cfg: ModelConfig, label_prefix: str = GRAD) -> "GradSet":
        g = cls(cfg)
        g.allocate(list(param_shapes(cfg)), label_prefix)
        return g

    def global_norm(self) -> float:
        acc = 0.0
        for _, t in self.items():
            x = t.data.astype(np.float64, copy=False).ravel()
            acc += float(np.dot(x, x))
        return float(np.sqrt(acc))


def init_weights(cfg: ModelConfig) -> ModelWeights:
    """Normal(0, 0.02) matrices and unit norm gains.

    Each parameter draws from its own generator keyed on (seed, position in
    the model), so adding layers leaves the existing parameters untouched.
    """
    tensors: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            arr = np.ones(shape, dtype=cfg.np_dtype)
        else:
            rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=_spawn_key(name)))
            arr = (rng.standard_normal(shape) * INIT_STD).astype(cfg.np_dtype)
        tensors[name] = Tensor(arr, f"{WEIGHT}/{name}")
    return ModelWeights(cfg, tensors)


def _spawn_key(name: str) -> tuple[int, ...]:
    parts = name.split(".")
    if parts[0] == "layers":
        local = ".".join(parts[2:])
        order = [f"attn.{n}" for n in _ATTN_NAMES] + [f"mlp.{n}" for n in _MLP_NAMES] + ["norm1", "norm2"]
        return (1, int(parts[1]), order.index(local))
    return {"embed": (0, 0, 0), "final_norm": (2, 0, 0), "head.w_out": (2, 0, 1)}[name]


# -- decoder layer -------------------------------------------------------


@dataclass
class LayerSaved(_Saved):
    x: Tensor  # borrowed
    norm1: RmsSaved
    h1: Tensor
    attn: AttnSaved
    x2: Tensor
    norm2: RmsSaved
    h2: Tensor
    mlp: MlpSaved | MiniMlpSaved

    def release(self) -> None:
        self.norm1.release()
        self.attn.release()
        self.norm2.release()
        self.mlp.release()
        free_all(self.h1, self.x2, self.h2)


def layer_forward(cfg: ModelConfig, w: LayerWeights, li: int, x: Tensor) -> tuple[Tensor, LayerSaved]:
    shp = attn_shape(cfg.B, cfg.S, cfg.d, cfg.heads, cfg.G)
    h1, n1 = rmsnorm_forward(x, w.norm1, label=f"{ACT}/l{li}.norm1")
    a, asv = attn_forward(h1, w.attn, shp, cfg.attn_impl, out_label=f"{TMP}/attn.out", rope=cfg.rope)
    x2 = add(x, a, label=f"{ACT}/l{li}.resid")
    a.free()
    h2, n2 = rmsnorm_forward(x2, w.norm2, label=f"{ACT}/l{li}.norm2")
    m_mlp = cfg.miniseq.M_mlp
    if m_mlp > 1:
        m, msv = miniseq_mlp_forward(h2, w.mlp, make_chunk_plan(x.shape[0], m_mlp), out_label=f"{TMP}/mlp.out")
    else:
        m, msv = mlp_forward(h2, w.mlp, out_label=f"{TMP}/mlp.out")
    out = add(x2, m, label=f"{ACT}/l{li}.out")
    m.free()
    return out, LayerSaved(x, n1, h1, asv, x2, n2, h2, msv)


def layer_backward(w: LayerWeights, g: LayerWeights, d_out: Tensor, saved: LayerSaved) -> Tensor:
    """Consumes ``d_out`` and the layer internals; returns ``dX``."""
    _check_saved(saved, LayerSaved)
    if isinstance(saved.mlp, MiniMlpSaved):
        d_h2 = miniseq_mlp_backward(d_out, saved.mlp, w.mlp, g.mlp)
    else:
        d_h2 = mlp_backward(d_out, saved.mlp, w.mlp, g.mlp)
    d_x2 = rmsnorm_backward(d_h2, saved.norm2, w.norm2, g.norm2)
    free_all(d_h2, saved.h2, saved.x2)
    add(d_x2, d_out, inplace=True)
    d_out.free()
    d_h1 = attn_backward(d_x2, saved.attn, w.attn, g.attn)
    d_x = rmsnorm_backward(d_h1, saved.norm1, w.norm1, g.norm1)
    free_all(d_h1, saved.h1)
    add(d_x, d_x2, inplace=True)
    d_x2.free()
    return d_x


# -- full model ----------------------------------------------------------


@dataclass
class ModelSaved(_Saved):
    cfg: ModelConfig
    tokens: np.ndarray
    xs: list[Tensor]  # layer inputs, plus the last layer's output
    layers: list[LayerSaved | CheckpointSaved]
    final_norm: RmsSaved
    hf: Tensor
    head: LmHeadSaved | MiniHeadSaved
    loss: float

    def release(self) -> None:
        for sv in self.layers:
            sv.release()
        self.final_norm.release()
        if isinstance(self.head, LmHeadSaved):
            self.head.release()
        free_all(self.hf, *self.xs)


def _flat(tokens: np.ndarray, cfg: ModelConfig, what: str) -> np.ndarray:
    arr = np.asarray(tokens)
    if arr.shape != (cfg.B, cfg.S):
        raise ValueError(f"{what} shape {arr.shape} != (B, S) = {(cfg.B, cfg.S)}")
    return arr.astype(np.int64).reshape(-1)


def forward(
    cfg: ModelConfig,
    weights: ModelWeights,
    tokens: np.ndarray,
    labels: np.ndarray,
    denom: float | None = None,
) -> tuple[float, ModelSaved]:
    """Mean next-token loss and the saved stack for :func:`backward`.

    ``denom`` overrides the token count the loss is normalised by.
    """
    if weights.cfg != cfg:
        raise ConfigError("weights were built for a different config")
    tok = _flat(tokens, cfg, "tokens")
    lab = _flat(labels, cfg, "labels")
    x = embedding_forward(tok, weights["embed"], label=f"{ACT}/embed")
    xs = [x]
    saves: list[LayerSaved | CheckpointSaved] = []
    for li in range(cfg.layers):
        fn = functools.partial(layer_forward, cfg, weights.layer(li), li)
        if cfg.recompute.enabled:
            x, sv = checkpointed_forward(fn, x)
        else:
            x, sv = fn(x)
        xs.append(x)
        saves.append(sv)
    hf, nf = rmsnorm_forward(x, weights["final_norm"], label=f"{ACT}/final_norm")
    m_head = cfg.miniseq.M_head
    if m_head > 1 or cfg.miniseq.loss_mode != "token-weighted":
        plan = make_chunk_plan(tok.size, m_head)
        loss, hsv = miniseq_lmhead_forward(hf, lab, weights.head(), plan, cfg.miniseq.loss_mode, denom)
    else:
        loss, hsv = lmhead_forward(hf, lab, weights.head(), denom)
    return loss, ModelSaved(cfg, tok, xs, saves, nf, hf, hsv, loss)


GroupHook = Callable[[list[str], GradSet], None]


def backward(
    cfg: ModelConfig,
    weights: ModelWeights,
    saved: ModelSaved,
    grads: GradSet | None = None,
    hook: GroupHook | None = None,
    upstream: float = 1.0,
) -> GradSet:
    """Back-propagate the loss through the saved stack.

    Gradients accumulate into ``grads`` (allocated group by group if absent).
    ``hook(names, grads)`` runs as soon as a parameter group's gradients are
    final; the optimizer-in-backward mode uses it to step and free them.
    """
    _check_saved(saved, ModelSaved)
    if saved.cfg != cfg or weights.cfg != cfg:
        raise StaleSavedError("saved stack was produced under a different config")
    if grads is None:
        grads = GradSet(cfg)

    grads.allocate(HEAD_GROUP)
    if isinstance(saved.head, MiniHeadSaved):
        d_hf = miniseq_lmhead_backward(saved.head, weights.head(), grads.head(), upstream)
    else:
        d_hf = lmhead_backward(saved.head, weights.head(), grads.head(), upstream)
    d_x = rmsnorm_backward(d_hf, saved.final_norm, weights["final_norm"], grads["final_norm"])
    free_all(d_hf, saved.hf, saved.xs[-1])
    if hook:
        hook(HEAD_GROUP, grads)

    for li in reversed(range(cfg.layers)):
        names = layer_names(li)
        grads.allocate(names)
        lw, lg = weights.layer(li), grads.layer(li)
        bwd = functools.partial(layer_backward, lw, lg)
        sv = saved.layers[li]
        if isinstance(sv, CheckpointSaved):
            d_x = checkpointed_backward(sv.fn, bwd, sv, d_x)
        else:
            d_x = bwd(d_x, sv)
        saved.xs[li].free()
        if hook:
            hook(names, grads)

    grads.allocate(EMBED_GROUP)
    embedding_backward(saved.tokens, d_x, grads["embed"])
    d_x.free()
    if hook:
        hook(EMBED_GROUP, grads)
    return grads


def loss_and_grads(
    cfg: ModelConfig, weights: ModelWeights, tokens: np.ndarray, labels: np.ndarray
) -> tuple[float, GradSet]:
    loss, saved = forward(cfg, weights, tokens, labels)
    return loss, backward(cfg, weights, saved)


# -- checkpoint files ----------------------------------------------------


def save_checkpoint(path: str | Path, cfg: ModelConfig, weights: ModelWeights) -> Path:
    """``MSTW`` | u32 version | u32 config length | config JSON | raw LE buffers."""
    path = Path(path)
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    le = cfg.np_dtype.newbyteorder("<")
    with path.open("wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for name in param_shapes(cfg):
            fh.write(np.ascontiguousarray(weights[name].data, dtype=le).tobytes())
    return path


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, ModelWeights]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a weight checkpoint (bad magic)")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    cfg = ModelConfig.from_dict(json.loads(raw[off : off + n]))
    off += n
    le = cfg.np_dtype.newbyteorder("<")
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype=le, count=count, offset=off).reshape(shape)
        off += count * cfg.itemsize
        tensors[name] = Tensor(arr.astype(cfg.np_dtype), f"{WEIGHT}/{name}")
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return cfg, ModelWeights(cfg, tensors)
