"""Byte-exact allocation tracking plus FLOP / HBM-access counters.

Every :class:`~mstrain.tensor.Tensor` registers its buffer with the tracker
that is active when it is created and reports back to the same tracker when it
is freed.  Labels have the form ``"<kind>/<name>"``; the kind prefix groups
tensors into classes (weights, gradients, optimizer state, saved activations,
block intermediates, attention workspace, temporaries).

Counting conventions
--------------------
* matmul ``[N,K] @ [K,P]``: ``2*N*K*P`` FLOPs, ``N*K + K*P + N*P`` element
  accesses.  Reads of an operand whose kind is ``weight`` are additionally
  accumulated in ``weight_reads``.
* cross-entropy: 5 FLOPs per logit (counted in ``flops``).
* SiLU is 4 FLOPs per element, Hadamard / add / scale 1 FLOP per element;
  these go to ``aux_flops`` so that ``flops`` holds exactly the matmul and loss
  terms of the block cost model.
* Row slicing and concatenation are layout operations (views in a fused
  kernel) and are not counted as HBM traffic; they are still tracked as
  allocations.
"""

from __future__ import annotations

import contextlib
import contextvars
import csv
import dataclasses
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

WEIGHT = "weight"
GRAD = "grad"
OPTIM = "optim"
ACT = "act"
INTER = "inter"
ATTN = "attn"
TMP = "tmp"

KINDS = (WEIGHT, GRAD, OPTIM, ACT, INTER, ATTN, TMP)

CE_FLOPS_PER_ELEMENT = 5
SILU_FLOPS_PER_ELEMENT = 4

TIMELINE_HEADER = ("seq_no", "kind", "bytes", "label", "live_after")


class TrackerError(RuntimeError):
    """Unbalanced regions, double frees and other accounting violations."""


def kind_of(label: str) -> str:
    return label.split("/", 1)[0]


@dataclass(frozen=True, slots=True)
class MemEvent:
    seq_no: int
    kind: str  # "alloc" | "free"
    bytes: int
    label: str
    live_after: int


@dataclass
class OpCounters:
    flops: int = 0
    aux_flops: int = 0
    hbm_elements: int = 0
    weight_reads: int = 0

    def copy(self) -> "OpCounters":
        return dataclasses.replace(self)

    def __sub__(self, other: "OpCounters") -> "OpCounters":
        return OpCounters(
            self.flops - other.flops,
            self.aux_flops - other.aux_flops,
            self.hbm_elements - other.hbm_elements,
            self.weight_reads - other.weight_reads,
        )

    def __add__(self, other: "OpCounters") -> "OpCounters":
        return OpCounters(
            self.flops + other.flops,
            self.aux_flops + other.aux_flops,
            self.hbm_elements + other.hbm_elements,
            self.weight_reads + other.weight_reads,
        )


@dataclass
class MemReport:
    """Allocation history of a region.

    ``peak_bytes`` is measured relative to ``base_bytes`` (the live total when
    the region opened), so a region that allocates one 800-byte tensor has a
    peak of 800 regardless of what was already resident.
    """

    events: list[MemEvent] = field(default_factory=list)
    peak_bytes: int = 0
    peak_by_label: dict[str, int] = field(default_factory=dict)
    base_bytes: int = 0
    base_by_label: dict[str, int] = field(default_factory=dict)

    @property
    def abs_peak_bytes(self) -> int:
        return self.base_bytes + self.peak_bytes

    def replay_peak(self) -> int:
        """Recompute the relative peak from the event list alone."""
        best = 0
        for ev in self.events:
            best = max(best, ev.live_after - self.base_bytes)
        return best

    def class_peak(self, match: str | Callable[[str], bool], absolute: bool = False) -> int:
        """Peak over time of the bytes whose label matches.

        ``match`` is a label prefix (``"inter/"``, ``"grad/"``,
        ``"inter/head."``) or a predicate on the label.
        """
        pred = match if callable(match) else (lambda lab: lab.startswith(match))
        cur = sum(b for lab, b in self.base_by_label.items() if pred(lab)) if absolute else 0
        best = cur
        for ev in self.events:
            if pred(ev.label):
                cur += ev.bytes if ev.kind == "alloc" else -ev.bytes
                best = max(best, cur)
        return best

    def at_peak(self, match: str, absolute: bool = True) -> int:
        """Bytes of a label class live at the moment of the global peak."""
        src = {}
        if absolute:
            src = dict(self.base_by_label)
            for lab, b in self.peak_by_label.items():
                src[lab] = src.get(lab, 0) + b
        else:
            src = self.peak_by_label
        return sum(b for lab, b in src.items() if lab.startswith(match))


@dataclass
class _Region:
    name: str
    start_event: int
    base_bytes: int
    base_by_label: dict[str, int]
    counters: OpCounters
    peak: int = 0
    peak_by_label: dict[str, int] = field(default_factory=dict)
    delta_by_label: Counter = field(default_factory=Counter)


class Tracker:
    """Live / peak byte accounting and op counters for one execution context."""

    def __init__(self, record_events: bool = True):
        self.record_events = record_events
        self.live = 0
        self.peak = 0
        self.live_by_label: Counter = Counter()
        self.events: list[MemEvent] = []
        self.counters = OpCounters()
        self._seq = 0
        self._regions: list[_Region] = []

    # -- allocation accounting -------------------------------------------

    def _record(self, kind: str, nbytes: int, label: str) -> None:
        ev = MemEvent(self._seq, kind, nbytes, label, self.live)
        self._seq += 1
        if self.record_events or self._regions:
            self.events.append(ev)
        sign = 1 if kind == "alloc" else -1
        for reg in self._regions:
            reg.delta_by_label[label] += sign * nbytes
            rel = self.live - reg.base_bytes
            if rel > reg.peak:
                reg.peak = rel
                reg.peak_by_label = {k: v for k, v in reg.delta_by_label.items() if v}

    def alloc(self, nbytes: int, label: str) -> None:
        if nbytes < 0:
            raise TrackerError("negative allocation")
        self.live += nbytes
        self.live_by_label[label] += nbytes
        self.peak = max(self.peak, self.live)
        self._record("alloc", nbytes, label)

    def free(self, nbytes: int, label: str) -> None:
        if self.live_by_label[label] < nbytes:
            raise TrackerError(f"free of {nbytes} bytes exceeds live bytes for {label!r}")
        self.live -= nbytes
        self.live_by_label[label] -= nbytes
        if not self.live_by_label[label]:
            del self.live_by_label[label]
        self._record("free", nbytes, label)

    @contextlib.contextmanager
    def scratch(self, nbytes: int, label: str) -> Iterator[None]:
        """Account a kernel workspace buffer for the duration of the block."""
        self.alloc(nbytes, label)
        try:
            yield
        finally:
            self.free(nbytes, label)

    def live_of(self, prefix: str) -> int:
        return sum(b for lab, b in self.live_by_label.items() if lab.startswith(prefix))

    def reset_peak(self) -> None:
        self.peak = self.live

    # -- counters ----------------------------------------------------------

    def count_matmul(self, n: int, k: int, p: int, weight_a: bool = False, weight_b: bool = False) -> None:
        if min(n, k, p) <= 0:
            raise TrackerError(f"non-positive matmul extents {(n, k, p)}")
        c = self.counters
        c.flops += 2 * n * k * p
        c.hbm_elements += n * k + k * p + n * p
        if weight_a:
            c.weight_reads += n * k
        if weight_b:
            c.weight_reads += k * p

    def count_elementwise(self, flops: int, reads: int, writes: int) -> None:
        self.counters.aux_flops += flops
        self.counters.hbm_elements += reads + writes

    def count_loss(self, rows: int, vocab: int) -> None:
        # logits read, labels read, per-row loss written
        self.counters.flops += CE_FLOPS_PER_ELEMENT * rows * vocab
        self.counters.hbm_elements += rows * vocab + 2 * rows

    # -- regions -----------------------------------------------------------

    def region_begin(self, name: str) -> None:
        self._regions.append(
            _Region(
                name=name,
                start_event=len(self.events),
                base_bytes=self.live,
                base_by_label=dict(self.live_by_label),
                counters=self.counters.copy(),
            )
        )

    def region_end(self, name: str) -> tuple[MemReport, OpCounters]:
        if not self._regions or self._regions[-1].name != name:
            open_name = self._regions[-1].name if self._regions else None
            raise TrackerError(f"region_end({name!r}) does not match open region {open_name!r}")
        reg = self._regions.pop()
        events = self.events[reg.start_event :]
        if not self.record_events and not self._regions:
            del self.events[reg.start_event :]
        report = MemReport(
            events=list(events),
            peak_bytes=reg.peak,
            peak_by_label=reg.peak_by_label,
            base_bytes=reg.base_bytes,
            base_by_label=reg.base_by_label,
        )
        return report, self.counters - reg.counters

    @contextlib.contextmanager
    def region(self, name: str) -> Iterator["RegionResult"]:
        res = RegionResult()
        self.region_begin(name)
        try:
            yield res
        finally:
            res.report, res.counters = self.region_end(name)

    def report(self) -> MemReport:
        """Whole-lifetime report of this tracker."""
        return MemReport(events=list(self.events), peak_bytes=self.peak)


@dataclass
class RegionResult:
    report: MemReport | None = None
    counters: OpCounters | None = None


_DEFAULT = Tracker(record_events=False)
_ACTIVE: contextvars.ContextVar[Tracker] = contextvars.ContextVar("mstrain_tracker", default=_DEFAULT)


def current() -> Tracker:
    return _ACTIVE.get()


@contextlib.contextmanager
def use_tracker(tracker: Tracker) -> Iterator[Tracker]:
    token = _ACTIVE.set(tracker)
    try:
        yield tracker
    finally:
        _ACTIVE.reset(token)


def region_begin(name: str) -> None:
    current().region_begin(name)


def region_end(name: str) -> tuple[MemReport, OpCounters]:
    return current().region_end(name)


def count_matmul(n: int, k: int, p: int) -> None:
    current().count_matmul(n, k, p)


def export_timeline(report: MemReport, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMELINE_HEADER)
        for ev in report.events:
            w.writerow((ev.seq_no, ev.kind, ev.bytes, ev.label, ev.live_after))
    return path


def read_timeline(path: str | Path) -> list[MemEvent]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != TIMELINE_HEADER:
        raise ValueError(f"unexpected timeline header {rows[0]}")
    return [MemEvent(int(r[0]), r[1], int(r[2]), r[3], int(r[4])) for r in rows[1:]]
