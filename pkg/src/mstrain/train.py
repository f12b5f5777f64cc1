"""One-step training driver shared by the CLI, the experiments and the tests."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import memtrack
from .memtrack import Tracker
from .model import GradSet, ModelConfig, ModelWeights, backward, forward, init_weights
from .optim import GradAccumulator, InBackwardStepper, OptimConfig, OptimState, adamw_step, clip_global_norm

Batch = tuple[np.ndarray, np.ndarray]  # (tokens [B,S], labels [B,S])


@dataclass(frozen=True)
class StepMetrics:
    step: int
    loss: float
    grad_norm: float
    peak_bytes: int
    flops: int


class Trainer:
    """Weights, optimizer state and a private tracker for one run."""

    def __init__(
        self,
        cfg: ModelConfig,
        ocfg: OptimConfig,
        weights: ModelWeights | None = None,
        tracker: Tracker | None = None,
    ):
        self.cfg = cfg
        self.ocfg = ocfg
        self.tracker = tracker or Tracker(record_events=False)
        self.steps_done = 0
        with memtrack.use_tracker(self.tracker):
            self.weights = weights if weights is not None else init_weights(cfg)
            self.state = OptimState.zeros(cfg)
            self.accum = GradAccumulator(cfg, ocfg.accum_steps) if ocfg.accum_steps > 1 else None

    def _check(self, batches: Sequence[Batch]) -> None:
        if len(batches) != self.ocfg.accum_steps:
            raise ValueError(f"expected {self.ocfg.accum_steps} micro-batches, got {len(batches)}")

    def step(self, batches: Sequence[Batch]) -> StepMetrics:
        """Forward, backward and one optimizer update over ``accum_steps``
        micro-batches."""
        self._check(batches)
        cfg, ocfg = self.cfg, self.ocfg
        tr = self.tracker
        with memtrack.use_tracker(tr):
            tr.reset_peak()
            c0 = tr.counters.copy()
            if ocfg.in_backward:
                (tokens, labels), = batches
                loss, saved = forward(cfg, self.weights, tokens, labels)
                stepper = InBackwardStepper(self.weights, self.state, ocfg)
                backward(cfg, self.weights, saved, hook=stepper)
                stepper.finish()
                norm = stepper.grad_norm
            elif self.accum is None:
                (tokens, labels), = batches
                loss, saved = forward(cfg, self.weights, tokens, labels)
                grads = backward(cfg, self.weights, saved)
                norm = self._clip(grads)
                adamw_step(self.weights, grads, self.state, ocfg)
                grads.free()
            else:
                losses = []
                for tokens, labels in batches:
                    li, saved = forward(cfg, self.weights, tokens, labels)
                    g = backward(cfg, self.weights, saved)
                    self.accum.add(g)
                    g.free()
                    losses.append(li)
                loss = float(np.mean(losses))
                grads = self.accum.flush()
                norm = self._clip(grads)
                adamw_step(self.weights, grads, self.state, ocfg)
                self.accum.zero()
            flops = (tr.counters - c0).flops
            peak = tr.peak
        self.steps_done += 1
        return StepMetrics(self.steps_done, float(loss), norm, peak, flops)

    def _clip(self, grads: GradSet) -> float:
        if self.ocfg.effective_clip is None:
            return grads.global_norm()
        return clip_global_norm(grads, self.ocfg.effective_clip)

    def dry_run(self, batches: Sequence[Batch]) -> int:
        """Peak tracked bytes of forward + backward without an update."""
        self._check(batches)
        cfg, tr = self.cfg, self.tracker
        with memtrack.use_tracker(tr):
            tr.reset_peak()
            for tokens, labels in batches:
                _, saved = forward(cfg, self.weights, tokens, labels)
                if self.ocfg.in_backward:
                    backward(cfg, self.weights, saved, hook=InBackwardStepper(self.weights, self.state, self.ocfg, apply=False))
                else:
                    g = backward(cfg, self.weights, saved)
                    if self.accum is not None:
                        self.accum.add(g)
                    g.free()
            if self.accum is not None:
                self.accum.count = 0
                self.accum.zero()
            return tr.peak

    def free(self) -> None:
        with memtrack.use_tracker(self.tracker):
            self.weights.free()
            self.state.free()
            if self.accum is not None:
                self.accum.free()


# -- maximum trainable sequence length -----------------------------------


class BudgetTooSmall(ValueError):
    pass


@dataclass
class MaxSeqResult:
    S: int
    peak: int
    probes: dict[int, int]  # S -> tracked peak


def random_batch(cfg: ModelConfig, seed: int = 0) -> Batch:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7, cfg.S, cfg.B)))
    tokens = rng.integers(0, cfg.V, size=(cfg.B, cfg.S))
    labels = np.full_like(tokens, -100)
    labels[:, :-1] = tokens[:, 1:]
    return tokens, labels


def dry_run_peak(cfg: ModelConfig, ocfg: OptimConfig, seed: int = 0) -> int:
    """Tracked peak of one forward + backward with weights, optimizer moments
    (and the accumulator, if any) resident."""
    tr = Trainer(cfg, ocfg)
    try:
        return tr.dry_run([random_batch(cfg, seed + k) for k in range(ocfg.accum_steps)])
    finally:
        tr.free()


def bisect_max_seq(probe, budget: int, quantum: int, limit: int) -> MaxSeqResult:
    """Largest multiple ``S`` of ``quantum`` (up to ``limit``) with
    ``probe(S) <= budget``.

    Doubles until the budget is exceeded, then bisects; assumes the peak grows
    with ``S``.
    """
    probes: dict[int, int] = {}

    def fits(k: int) -> bool:
        s = k * quantum
        if s not in probes:
            probes[s] = probe(s)
        return probes[s] <= budget

    if not fits(1):
        raise BudgetTooSmall(f"budget {budget} B is below the peak {probes[quantum]} B at S={quantum}")
    kmax = max(1, limit // quantum)
    lo = 1
    hi = 2
    while hi <= kmax and fits(hi):
        lo, hi = hi, hi * 2
    hi = min(hi, kmax + 1)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if fits(mid):
            lo = mid
        else:
            hi = mid
    s = lo * quantum
    return MaxSeqResult(s, probes[s], dict(sorted(probes.items())))


def max_seq(cfg: ModelConfig, ocfg: OptimConfig, budget: int, quantum: int = 64, limit: int = 1 << 16, seed: int = 0) -> MaxSeqResult:
    return bisect_max_seq(lambda s: dry_run_peak(cfg.replace(S=s), ocfg, seed), budget, quantum, limit)
