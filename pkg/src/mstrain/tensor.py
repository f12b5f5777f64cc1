"""Dense tracked tensors and the handful of kernels the blocks need.

Tensors are thin wrappers around contiguous numpy buffers.  Every buffer is
registered with the active :mod:`mstrain.memtrack` tracker at creation and
unregistered on :meth:`Tensor.free` (or, as a fallback, when the object is
garbage collected).  Slices copy; there are no views.

Matmul has two kernels.  ``sequential`` accumulates over the inner index one
rank-1 update at a time, so every output element is the same left-to-right sum
no matter how the rows were partitioned; this is the verification kernel and
the default for f64.  ``blas`` defers to ``numpy.matmul`` and is the default
for f32.
"""

from __future__ import annotations

import contextlib
import contextvars
import enum
from typing import Iterator, Sequence

import numpy as np

from . import memtrack
from .memtrack import TMP, Tracker


class TensorError(Exception):
    pass


class ShapeError(TensorError, ValueError):
    pass


class DtypeError(TensorError, TypeError):
    pass


class BoundsError(TensorError, IndexError):
    pass


class NonFiniteError(TensorError, FloatingPointError):
    pass


class FreedTensorError(TensorError):
    pass


class Dtype(enum.Enum):
    f64 = "f64"
    f32 = "f32"

    @property
    def itemsize(self) -> int:
        return 8 if self is Dtype.f64 else 4

    @property
    def np(self) -> np.dtype:
        return np.dtype(np.float64 if self is Dtype.f64 else np.float32)

    @classmethod
    def parse(cls, value: "str | Dtype | np.dtype") -> "Dtype":
        if isinstance(value, Dtype):
            return value
        if isinstance(value, str) and value in ("f64", "f32"):
            return cls(value)
        dt = np.dtype(value)
        if dt == np.float64:
            return cls.f64
        if dt == np.float32:
            return cls.f32
        raise DtypeError(f"unsupported dtype {value!r}")


class Tensor:
    __slots__ = ("_data", "label", "_tracker", "_nbytes", "__weakref__")

    def __init__(self, data: np.ndarray, label: str = TMP, tracker: Tracker | None = None):
        if data.dtype not in (np.float64, np.float32):
            raise DtypeError(f"unsupported dtype {data.dtype}")
        if "/" not in label:
            label = f"{TMP}/{label}"
        self._data = np.ascontiguousarray(data)
        self.label = label
        self._tracker = tracker if tracker is not None else memtrack.current()
        self._nbytes = int(self._data.nbytes)
        self._tracker.alloc(self._nbytes, label)

    # -- construction ------------------------------------------------------

    @classmethod
    def zeros(cls, shape: Sequence[int], dtype: "Dtype | str" = Dtype.f64, label: str = TMP) -> "Tensor":
        return cls(np.zeros(tuple(shape), dtype=Dtype.parse(dtype).np), label)

    @classmethod
    def from_numpy(cls, arr, dtype: "Dtype | str | None" = None, label: str = TMP) -> "Tensor":
        arr = np.asarray(arr)
        dt = Dtype.parse(dtype) if dtype is not None else (Dtype.f32 if arr.dtype == np.float32 else Dtype.f64)
        return cls(np.array(arr, dtype=dt.np, copy=True), label)

    # -- accessors ---------------------------------------------------------

    @property
    def data(self) -> np.ndarray:
        if self._data is None:
            raise FreedTensorError(f"tensor {self.label!r} used after free")
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> Dtype:
        return Dtype.parse(self.data.dtype)

    @property
    def nbytes(self) -> int:
        return self._nbytes

    @property
    def numel(self) -> int:
        return self.data.size

    @property
    def kind(self) -> str:
        return memtrack.kind_of(self.label)

    @property
    def freed(self) -> bool:
        return self._data is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def free(self) -> None:
        if self._data is None:
            raise FreedTensorError(f"double free of {self.label!r}")
        self._tracker.free(self._nbytes, self.label)
        self._data = None

    def relabel(self, label: str) -> "Tensor":
        """Move the buffer to another label class without copying."""
        self._tracker.free(self._nbytes, self.label)
        self.label = label
        self._tracker.alloc(self._nbytes, label)
        return self

    def __del__(self):
        if getattr(self, "_data", None) is not None:
            try:
                self.free()
            except Exception:
                pass

    def __repr__(self) -> str:
        state = "freed" if self.freed else f"shape={self.shape}, dtype={self.dtype.value}"
        return f"Tensor({state}, label={self.label!r})"


def free_all(*tensors: "Tensor | None") -> None:
    for t in tensors:
        if t is not None and not t.freed:
            t.free()


# -- checks --------------------------------------------------------------


def _finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {what}")
    return arr


def _same_dtype(a: Tensor, b: Tensor) -> None:
    if a.data.dtype != b.data.dtype:
        raise DtypeError(f"dtype mismatch: {a.dtype.value} vs {b.dtype.value}")


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# -- matmul --------------------------------------------------------------

_MATMUL_MODE: contextvars.ContextVar[str] = contextvars.ContextVar("mstrain_matmul_mode", default="auto")


@contextlib.contextmanager
def matmul_mode(mode: str) -> Iterator[None]:
    if mode not in ("auto", "sequential", "blas"):
        raise ValueError(f"unknown matmul mode {mode!r}")
    token = _MATMUL_MODE.set(mode)
    try:
        yield
    finally:
        _MATMUL_MODE.reset(token)


def _resolve_mode(dtype: np.dtype) -> str:
    mode = _MATMUL_MODE.get()
    if mode == "auto":
        return "sequential" if dtype == np.float64 else "blas"
    return mode


def mm_kernel(a: np.ndarray, b: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """Raw ``a @ b`` on numpy arrays using the active kernel.

    With ``out`` given the product is accumulated into it (``out += a @ b``).
    Under the sequential kernel, accumulating a row-partitioned ``a.T @ b`` chunk
    by chunk continues one and the same left-to-right sum.
    """
    n, k = a.shape
    p = b.shape[1]
    if _resolve_mode(a.dtype) == "blas":
        if out is None:
            return a @ b
        out += a @ b
        return out
    if out is None:
        out = np.zeros((n, p), dtype=a.dtype)
    tmp = np.empty((n, p), dtype=a.dtype)
    for j in range(k):
        np.multiply(a[:, j : j + 1], b[j : j + 1, :], out=tmp)
        out += tmp
    return out


def matmul(
    a: Tensor,
    b: Tensor,
    *,
    trans_a: bool = False,
    trans_b: bool = False,
    label: str = TMP,
    out: Tensor | None = None,
) -> Tensor:
    """``op(a) @ op(b)`` for 2-D tensors, with optional transposes.

    ``out`` turns the call into an in-place accumulation ``out += op(a) @ op(b)``
    and returns ``out``.
    """
    _same_dtype(a, b)
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    x = a.data.T if trans_a else a.data
    y = b.data.T if trans_b else b.data
    if x.shape[1] != y.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {x.shape} @ {y.shape}")
    n, k = x.shape
    p = y.shape[1]
    a._tracker.count_matmul(n, k, p, weight_a=a.kind == memtrack.WEIGHT, weight_b=b.kind == memtrack.WEIGHT)
    if out is not None:
        _same_dtype(a, out)
        if out.shape != (n, p):
            raise ShapeError(f"accumulator shape {out.shape} != {(n, p)}")
        mm_kernel(x, y, out=out.data)
        _finite(out.data, "matmul")
        return out
    return Tensor(_finite(mm_kernel(x, y), "matmul"), label)


# -- elementwise ---------------------------------------------------------


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    """Logistic function without overflow for large negative inputs."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu_np(x: np.ndarray) -> np.ndarray:
    return x * sigmoid_np(x)


def silu_grad_np(x: np.ndarray) -> np.ndarray:
    s = sigmoid_np(x)
    return s + x * s * (1.0 - s)


def silu(x: Tensor, label: str = TMP) -> Tensor:
    out = silu_np(x.data)
    x._tracker.count_elementwise(memtrack.SILU_FLOPS_PER_ELEMENT * x.numel, x.numel, x.numel)
    return Tensor(_finite(out, "silu"), label)


def silu_backward(x: Tensor, upstream: Tensor, label: str = TMP) -> Tensor:
    _same_shape(x, upstream, "silu_backward")
    out = upstream.data * silu_grad_np(x.data)
    x._tracker.count_elementwise(6 * x.numel, 2 * x.numel, x.numel)
    return Tensor(_finite(out, "silu_backward"), label)


def _binary(a: Tensor, b: "Tensor | float", op, name: str, label: str, inplace: bool) -> Tensor:
    if isinstance(b, Tensor):
        _same_shape(a, b, name)
        _same_dtype(a, b)
        rhs = b.data
        reads = 2 * a.numel
    else:
        rhs = a.data.dtype.type(b)
        reads = a.numel
    a._tracker.count_elementwise(a.numel, reads, a.numel)
    # overflow surfaces as NonFiniteError below rather than a numpy warning
    with np.errstate(over="ignore", invalid="ignore"):
        if inplace:
            op(a.data, rhs, out=a.data)
            _finite(a.data, name)
            return a
        res = op(a.data, rhs)
    return Tensor(_finite(res, name), label)


def add(a: Tensor, b: "Tensor | float", label: str = TMP, inplace: bool = False) -> Tensor:
    return _binary(a, b, np.add, "add", label, inplace)


def sub(a: Tensor, b: "Tensor | float", label: str = TMP, inplace: bool = False) -> Tensor:
    return _binary(a, b, np.subtract, "sub", label, inplace)


def mul(a: Tensor, b: "Tensor | float", label: str = TMP, inplace: bool = False) -> Tensor:
    return _binary(a, b, np.multiply, "mul", label, inplace)


def scale(a: Tensor, s: float, label: str = TMP, inplace: bool = False) -> Tensor:
    return _binary(a, float(s), np.multiply, "scale", label, inplace)


def elementwise(op: str, a: Tensor, b: "Tensor | float", label: str = TMP) -> Tensor:
    fn = {"add": add, "mul": mul, "scale": scale, "sub": sub}.get(op)
    if fn is None:
        raise ValueError(f"unknown elementwise op {op!r}")
    return fn(a, b, label=label)


# -- row layout ----------------------------------------------------------


def slice_rows(x: Tensor, start: int, end: int, label: str | None = None) -> Tensor:
    n = x.shape[0]
    if not (0 <= start < end <= n):
        raise BoundsError(f"row range [{start},{end}) outside [0,{n})")
    return Tensor(x.data[start:end].copy(), label or x.label)


def concat_rows(parts: Sequence[Tensor], label: str | None = None) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows needs at least one part")
    tail = parts[0].shape[1:]
    for p in parts:
        if p.shape[1:] != tail:
            raise ShapeError(f"trailing extents differ: {p.shape[1:]} vs {tail}")
        _same_dtype(parts[0], p)
    return Tensor(np.concatenate([p.data for p in parts], axis=0), label or parts[0].label)


def write_rows(dst: Tensor, start: int, src: Tensor) -> None:
    """Copy ``src`` into rows ``[start, start+len(src))`` of ``dst``."""
    end = start + src.shape[0]
    if not (0 <= start and end <= dst.shape[0]) or src.shape[1:] != dst.shape[1:]:
        raise BoundsError(f"cannot write {src.shape} at row {start} of {dst.shape}")
    dst.data[start:end] = src.data
