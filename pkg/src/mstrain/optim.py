"""AdamW with global-norm clipping, gradient accumulation and an
optimizer-in-backward mode."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .memtrack import GRAD, OPTIM
from .model import GradSet, ModelConfig, ModelWeights, param_shapes
from .tensor import NonFiniteError, ShapeError, Tensor


class OptimError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-4
    weight_decay: float = 0.001
    clip_norm: float | None = 1.0  # None disables clipping
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    accum_steps: int = 1
    in_backward: bool = False

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive or None, got {self.clip_norm}")
        if len(self.betas) != 2 or not all(0 < b < 1 for b in self.betas):
            raise ValueError(f"betas must lie in (0, 1), got {self.betas}")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("eps must be positive and weight_decay non-negative")
        if self.accum_steps < 1:
            raise ValueError(f"accum_steps must be >= 1, got {self.accum_steps}")
        if self.in_backward and self.accum_steps > 1:
            raise ValueError("optimizer-in-backward cannot be combined with gradient accumulation")

    @property
    def effective_clip(self) -> float | None:
        # the global norm is unknown while backward is still running
        return None if self.in_backward else self.clip_norm


@dataclass
class OptimState:
    m: dict[str, Tensor]
    v: dict[str, Tensor]
    t: int = 0
    stepped: set[str] = field(default_factory=set)

    @classmethod
    def zeros(cls, cfg: ModelConfig) -> "OptimState":
        m, v = {}, {}
        for name, shape in param_shapes(cfg).items():
            m[name] = Tensor.zeros(shape, cfg.dtype, f"{OPTIM}/m.{name}")
            v[name] = Tensor.zeros(shape, cfg.dtype, f"{OPTIM}/v.{name}")
        return cls(m, v)

    def begin_step(self) -> None:
        self.t += 1
        self.stepped = set()

    def free(self) -> None:
        for t in list(self.m.values()) + list(self.v.values()):
            if not t.freed:
                t.free()


def clip_global_norm(grads: GradSet, max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = grads.global_norm()
    if not np.isfinite(norm):
        raise NonFiniteError("non-finite gradient norm")
    if norm > max_norm:
        s = max_norm / norm
        for _, g in grads.items():
            g.data[...] *= s
    return norm


def _adamw_update(w: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, cfg: OptimConfig, tmp: np.ndarray) -> None:
    b1, b2 = cfg.betas
    w -= cfg.lr * cfg.weight_decay * w
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    np.multiply(g, g, out=tmp)
    v += (1.0 - b2) * tmp
    # tmp <- m_hat / (sqrt(v_hat) + eps)
    np.divide(v, 1.0 - b2**t, out=tmp)
    np.sqrt(tmp, out=tmp)
    tmp += cfg.eps
    np.divide(m / (1.0 - b1**t), tmp, out=tmp)
    w -= cfg.lr * tmp


def step_param(name: str, param: Tensor, grad: Tensor, state: OptimState, cfg: OptimConfig) -> None:
    if name in state.stepped:
        raise OptimError(f"parameter {name!r} stepped twice in one optimizer step")
    if grad.shape != param.shape or state.m[name].shape != param.shape:
        raise ShapeError(f"shape mismatch for {name}: param {param.shape}, grad {grad.shape}")
    with param._tracker.scratch(param.nbytes, f"{OPTIM}/step.tmp"):
        tmp = np.empty_like(param.data)
        _adamw_update(param.data, grad.data, state.m[name].data, state.v[name].data, state.t, cfg, tmp)
    state.stepped.add(name)


def adamw_step(weights: ModelWeights, grads: GradSet, state: OptimState, cfg: OptimConfig) -> None:
    """Deferred update of every parameter.

    The whole-model step holds one weight-sized workspace for its
    intermediates, as a fused multi-tensor kernel would.
    """
    state.begin_step()
    tr = next(iter(weights.items()))[1]._tracker
    with tr.scratch(weights.nbytes, f"{OPTIM}/step.foreach"):
        for name, p in weights.items():
            if name not in grads:
                raise OptimError(f"missing gradient for {name}")
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(f"shape mismatch for {name}: param {p.shape}, grad {g.shape}")
            tmp = np.empty_like(p.data)
            _adamw_update(p.data, g.data, state.m[name].data, state.v[name].data, state.t, cfg, tmp)
            state.stepped.add(name)


class InBackwardStepper:
    """Backward hook that steps each parameter group as soon as its gradients
    are final, then frees them.

    Also accumulates the squared gradient norm so the caller can still report
    it after the buffers are gone.
    """

    def __init__(self, weights: ModelWeights, state: OptimState, cfg: OptimConfig, apply: bool = True):
        self.weights = weights
        self.state = state
        self.cfg = cfg
        self.apply = apply
        self._sq = 0.0
        if apply:
            state.begin_step()

    def __call__(self, names: list[str], grads: GradSet) -> None:
        for n in names:
            g = grads[n].data.astype(np.float64, copy=False).ravel()
            self._sq += float(np.dot(g, g))
            if self.apply:
                step_param(n, self.weights[n], grads[n], self.state, self.cfg)
        grads.release(names)

    @property
    def grad_norm(self) -> float:
        return float(np.sqrt(self._sq))

    def finish(self) -> None:
        if self.apply and len(self.state.stepped) != len(param_shapes(self.weights.cfg)):
            missing = set(param_shapes(self.weights.cfg)) - self.state.stepped
            raise OptimError(f"parameters never stepped: {sorted(missing)}")


class GradAccumulator:
    """Sum of micro-batch gradients, averaged over ``steps`` on flush."""

    def __init__(self, cfg: ModelConfig, steps: int):
        if steps < 1:
            raise ValueError(f"accumulation steps must be >= 1, got {steps}")
        self.steps = steps
        self.count = 0
        self.buf = GradSet.zeros(cfg, label_prefix=f"{GRAD}/accum")

    def add(self, grads: GradSet) -> None:
        for name, acc in self.buf.items():
            g = grads[name]
            if g.shape != acc.shape:
                raise ShapeError(f"shape mismatch for {name}: {g.shape} vs {acc.shape}")
            acc.data[...] += g.data
        self.count += 1

    def flush(self) -> GradSet:
        if self.count == 0:
            raise OptimError("flush before any gradients were accumulated")
        for _, acc in self.buf.items():
            acc.data[...] /= self.steps
        self.count = 0
        return self.buf

    def zero(self) -> None:
        for _, acc in self.buf.items():
            acc.data[...] = 0.0

    def free(self) -> None:
        self.buf.free()


def accumulate(into: GradAccumulator, grads: GradSet) -> None:
    into.add(grads)
