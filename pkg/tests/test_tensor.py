import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from mstrain.tensor import (
    BoundsError,
    Dtype,
    DtypeError,
    FreedTensorError,
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    concat_rows,
    elementwise,
    matmul,
    matmul_mode,
    mul,
    scale,
    silu,
    silu_backward,
    slice_rows,
)

# values from an independent 40-digit evaluation
SILU_1 = 0.73105857863000487925
SILU_M20 = -4.1223072363804071629e-8
DSILU_1 = 0.92767051187148673179


def T(x, dtype="f64"):
    return Tensor.from_numpy(np.asarray(x, dtype=float), dtype)


def test_dtype_itemsize():
    assert Dtype.f64.itemsize == 8 and Dtype.f32.itemsize == 4
    assert T([1.0, 2.0]).nbytes == 16
    assert T([1.0, 2.0], "f32").nbytes == 8


def test_matmul_examples():
    a = T([[1, 2], [3, 4]])
    assert np.array_equal(matmul(a, T(np.eye(2))).data, a.data)
    assert np.array_equal(matmul(a, T([[5], [6]])).data, [[17], [39]])
    x = T(np.arange(6).reshape(2, 3))
    assert np.array_equal(matmul(x, T(np.eye(3))).data, x.data)


def test_matmul_errors():
    with pytest.raises(ShapeError):
        matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))
    with pytest.raises(DtypeError):
        matmul(T(np.ones((2, 2))), T(np.ones((2, 2)), "f32"))


def test_matmul_transposes_and_accumulate(rng):
    a, b = rng.standard_normal((5, 3)), rng.standard_normal((5, 4))
    out = matmul(T(a), T(b), trans_a=True)
    np.testing.assert_allclose(out.data, a.T @ b, rtol=1e-14)
    matmul(T(a), T(b), trans_a=True, out=out)
    np.testing.assert_allclose(out.data, 2 * a.T @ b, rtol=1e-14)


def test_sequential_kernel_is_chunk_invariant(rng):
    # accumulating row blocks of a.T @ b continues the same ordered sum
    a, b = rng.standard_normal((13, 4)), rng.standard_normal((13, 6))
    full = matmul(T(a), T(b), trans_a=True)
    acc = Tensor.zeros((4, 6))
    for s, e in ((0, 5), (5, 9), (9, 13)):
        matmul(T(a[s:e]), T(b[s:e]), trans_a=True, out=acc)
    assert np.array_equal(full.data, acc.data)


def test_matmul_modes_agree(rng):
    a, b = rng.standard_normal((7, 9)), rng.standard_normal((9, 3))
    with matmul_mode("sequential"):
        s = matmul(T(a), T(b)).numpy()
    with matmul_mode("blas"):
        p = matmul(T(a), T(b)).numpy()
    np.testing.assert_allclose(s, p, rtol=1e-13, atol=1e-13)


@given(
    st.integers(1, 32).flatmap(
        lambda n: st.tuples(
            hnp.arrays(np.float64, (n, 5), elements=st.floats(-1, 1)),
            hnp.arrays(np.float64, (5, 7), elements=st.floats(-1, 1)),
            hnp.arrays(np.float64, (7, 4), elements=st.floats(-1, 1)),
        )
    )
)
def test_matmul_associative(abc):
    a, b, c = (T(x) for x in abc)
    left = matmul(matmul(a, b), c).data
    right = matmul(a, matmul(b, c)).data
    assert np.abs(left - right).max() <= 1e-10


def test_silu_values():
    assert silu(T([0.0])).data[0] == 0.0
    assert silu(T([1.0])).data[0] == pytest.approx(SILU_1, rel=1e-15)
    assert silu(T([-20.0])).data[0] == pytest.approx(SILU_M20, rel=1e-12)
    assert np.isfinite(silu(T([-800.0, 800.0])).data).all()


def test_silu_backward_values():
    assert silu_backward(T([0.0]), T([1.0])).data[0] == 0.5
    assert silu_backward(T([1.0]), T([1.0])).data[0] == pytest.approx(DSILU_1, rel=1e-14)
    assert not silu_backward(T([-3.0, 0.2, 5.0]), T([0.0, 0.0, 0.0])).data.any()
    with pytest.raises(ShapeError):
        silu_backward(T([1.0, 2.0]), T([1.0]))


def test_silu_backward_matches_central_difference():
    h = 1e-6
    fd = (silu(T([1 + h])).data[0] - silu(T([1 - h])).data[0]) / (2 * h)
    assert fd == pytest.approx(DSILU_1, rel=1e-8)


def test_elementwise():
    a = T([[1.0, -2.0], [3.0, 0.5]])
    assert np.array_equal(add(a, T(np.zeros((2, 2)))).data, a.data)
    assert np.array_equal(mul(a, T(np.ones((2, 2)))).data, a.data)
    assert np.array_equal(scale(T([1, 2, 3]), 2).data, [2, 4, 6])
    assert np.array_equal(elementwise("add", a, 1.0).data, a.data + 1)
    with pytest.raises(ShapeError):
        add(a, T([1.0]))
    with pytest.raises(ValueError):
        elementwise("pow", a, 2.0)


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        scale(T([1e308]), 10.0)


def test_slice_rows(rng):
    x = T(rng.standard_normal((8, 4)))
    assert np.array_equal(slice_rows(x, 0, 8).data, x.data)
    assert np.array_equal(slice_rows(x, 2, 5).data, x.data[2:5])
    for bad in ((3, 3), (-1, 2), (4, 9)):
        with pytest.raises(BoundsError):
            slice_rows(x, *bad)


def test_slice_is_a_tracked_copy(tracker):
    x = T(np.zeros((8, 4)))
    before = tracker.live
    s = slice_rows(x, 2, 5)
    assert tracker.live == before + 3 * 4 * 8
    s.data[:] = 1.0
    assert not x.data.any()


def test_concat_rows():
    a, b = T(np.ones((2, 3))), T(np.zeros((1, 3)))
    c = concat_rows([a, b])
    assert c.shape == (3, 3) and c.data[:2].all() and not c.data[2].any()
    assert np.array_equal(concat_rows([a]).data, a.data)
    with pytest.raises(ShapeError):
        concat_rows([a, T(np.ones((1, 2)))])


@given(
    hnp.arrays(np.float64, st.tuples(st.integers(1, 40), st.integers(1, 6)), elements=st.floats(-1e6, 1e6)),
    st.data(),
)
def test_slice_concat_round_trip(arr, data):
    n = arr.shape[0]
    cuts = sorted(data.draw(st.sets(st.integers(1, n - 1), max_size=n - 1)) if n > 1 else set())
    bounds = [0, *cuts, n]
    x = T(arr)
    parts = [slice_rows(x, s, e) for s, e in zip(bounds, bounds[1:])]
    assert concat_rows(parts).data.tobytes() == x.data.tobytes()


def test_free_semantics(tracker):
    t = T(np.ones((10, 10)))
    assert tracker.live == 800
    t.free()
    assert tracker.live == 0
    with pytest.raises(FreedTensorError):
        t.data
    with pytest.raises(FreedTensorError):
        t.free()


def test_ops_are_deterministic(rng):
    a, b = rng.standard_normal((16, 12)), rng.standard_normal((12, 9))
    runs = {matmul(silu(T(a)), T(b)).data.tobytes() for _ in range(3)}
    assert len(runs) == 1
