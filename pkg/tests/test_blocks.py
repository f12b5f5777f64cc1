import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import attn_weights, fd_check, head_weights, mlp_weights, random_labels, random_mlp, tensor
from mstrain.attention import AttnWeights, attn_backward, attn_forward, attn_shape
from mstrain.blocks import (
    DegenerateInputError,
    IGNORE_INDEX,
    LmHeadWeights,
    MlpWeights,
    StaleSavedError,
    _ce_backward_inplace,
    lmhead_backward,
    lmhead_forward,
    mlp_backward,
    mlp_forward,
    rmsnorm_backward,
    rmsnorm_forward,
)
from mstrain.tensor import ShapeError, Tensor, silu_np

LN8 = 2.0794415416798359283  # independent 40-digit evaluation of ln 8
SEEDS = range(5)


# -- MLP -----------------------------------------------------------------


def test_mlp_zero_input(rng):
    w = mlp_weights(random_mlp(rng, 4, 8))
    out, _ = mlp_forward(tensor(np.zeros((3, 4))), w)
    assert not out.data.any()


def test_mlp_hand_computed():
    # N=1, d=2, I=2 evaluated by hand
    x = np.array([[1.0, -0.5]])
    wg = np.array([[0.5, -1.0], [2.0, 0.25]])
    wu = np.array([[1.0, 0.0], [0.0, 2.0]])
    wd = np.array([[1.0, 2.0], [-1.0, 0.5]])
    g = [1 * 0.5 + -0.5 * 2.0, 1 * -1.0 + -0.5 * 0.25]  # [-0.5, -1.125]
    u = [1.0, -1.0]
    h = [g[0] / (1 + math.exp(-g[0])) * u[0], g[1] / (1 + math.exp(-g[1])) * u[1]]
    expect = [h[0] * 1.0 + h[1] * -1.0, h[0] * 2.0 + h[1] * 0.5]
    out, _ = mlp_forward(tensor(x), mlp_weights([wg, wu, wd]))
    np.testing.assert_allclose(out.data[0], expect, rtol=1e-15)


def test_mlp_output_norm_bound(rng):
    x = rng.standard_normal((6, 5))
    wg, wu, wd = random_mlp(rng, 5, 12, s=1.0)
    out, _ = mlp_forward(tensor(x), mlp_weights([wg, wu, wd]))
    # |silu(a)| <= |a| elementwise, then submultiplicativity of the Frobenius norm
    bound = np.linalg.norm(x) ** 2 * np.linalg.norm(wg) * np.linalg.norm(wu) * np.linalg.norm(wd)
    assert np.isfinite(out.data).all()
    assert np.linalg.norm(out.data) <= bound


def test_mlp_shape_error(rng):
    with pytest.raises(ShapeError):
        mlp_forward(tensor(np.ones((2, 3))), mlp_weights(random_mlp(rng, 4, 8)))
    with pytest.raises(ShapeError):
        MlpWeights(tensor(np.ones((4, 8))), tensor(np.ones((4, 7))), tensor(np.ones((8, 4))))


def test_mlp_zero_upstream(rng):
    w = mlp_weights(random_mlp(rng, 4, 8))
    out, sv = mlp_forward(tensor(rng.standard_normal((5, 4))), w)
    g = MlpWeights.zeros_like(w, "mlp")
    dx = mlp_backward(tensor(np.zeros((5, 4))), sv, w, g)
    assert not dx.data.any()
    assert not any(t.data.any() for t in g.tensors().values())


def test_mlp_backward_identity_hand(rng):
    # N=1, d=I=1: O = silu(x a) (x b) c, dO/dx = c (silu'(xa) a xb + silu(xa) b)
    x, a, b, c = 0.7, 1.3, -0.4, 2.0
    w = mlp_weights([[[a]], [[b]], [[c]]])
    _, sv = mlp_forward(tensor([[x]]), w)
    dx = mlp_backward(tensor([[1.0]]), sv, w, MlpWeights.zeros_like(w, "mlp"))
    s = 1 / (1 + math.exp(-x * a))
    expect = c * ((s + x * a * s * (1 - s)) * a * x * b + x * a * s * b)
    assert dx.data[0, 0] == pytest.approx(expect, rel=1e-14)


@pytest.mark.parametrize("seed", SEEDS)
def test_mlp_finite_difference(seed):
    rng = np.random.default_rng(seed)
    n, d, i = int(rng.integers(1, 17)), int(rng.integers(1, 17)), int(rng.integers(1, 33))
    x = rng.standard_normal((n, d))
    ws = random_mlp(rng, d, i)
    r = rng.standard_normal((n, d))

    def f():
        out, _ = mlp_forward(tensor(x), mlp_weights(ws))
        return float((out.data * r).sum())

    w = mlp_weights(ws)
    _, sv = mlp_forward(tensor(x), w)
    g = MlpWeights.zeros_like(w, "mlp")
    dx = mlp_backward(tensor(r), sv, w, g)
    grads = [dx.numpy()] + [t.numpy() for t in g.tensors().values()]
    assert fd_check(f, [x, *ws], grads, rng, n_samples=40) < 1e-6


def test_mlp_saved_is_single_use(rng):
    w = mlp_weights(random_mlp(rng, 4, 8))
    _, sv = mlp_forward(tensor(rng.standard_normal((3, 4))), w)
    g = MlpWeights.zeros_like(w, "mlp")
    mlp_backward(tensor(np.ones((3, 4))), sv, w, g)
    with pytest.raises(StaleSavedError):
        mlp_backward(tensor(np.ones((3, 4))), sv, w, g)


def test_mlp_peak_intermediate(tracker, rng):
    n, d, i = 12, 4, 16
    w = mlp_weights(random_mlp(rng, d, i))
    x = tensor(rng.standard_normal((n, d)))
    tracker.region_begin("f")
    mlp_forward(x, w)
    rep, _ = tracker.region_end("f")
    # two kept projections plus the activation product
    assert rep.class_peak("inter/") == 3 * n * i * 8


# -- LM-Head -------------------------------------------------------------


def test_head_uniform_logits():
    loss, _ = lmhead_forward(tensor(np.ones((5, 3))), np.array([0, 7, 3, 2, -100]), head_weights(np.zeros((3, 8))))
    assert loss == pytest.approx(LN8, rel=1e-15)
    assert loss == pytest.approx(math.log(8))


def test_head_large_margin():
    w = np.zeros((2, 4))
    w[0, 2] = 1e3
    loss, _ = lmhead_forward(tensor([[1.0, 0.0]]), np.array([2]), head_weights(w))
    assert loss < 1e-12


def test_head_all_ignored():
    with pytest.raises(DegenerateInputError):
        lmhead_forward(tensor(np.ones((2, 3))), np.array([-100, -100]), head_weights(np.zeros((3, 4))))


def test_head_bad_labels():
    with pytest.raises(ValueError):
        lmhead_forward(tensor(np.ones((2, 3))), np.array([0, 4]), head_weights(np.zeros((3, 4))))


def test_head_locality(rng):
    x = rng.standard_normal((6, 4))
    labels = np.full(6, IGNORE_INDEX)
    labels[3] = 1
    w = head_weights(rng.standard_normal((4, 5)))
    _, sv = lmhead_forward(tensor(x), labels, w)
    dx = lmhead_backward(sv, w, LmHeadWeights.zeros_like(w, "head"))
    nz = np.nonzero(np.abs(dx.data).sum(axis=1))[0]
    assert nz.tolist() == [3]


def test_logit_grad_rows_sum_to_zero(rng):
    z = rng.standard_normal((7, 9))
    labels = rng.integers(0, 9, 7)
    _ce_backward_inplace(z, labels, 1.0)
    assert np.abs(z.sum(axis=1)).max() < 1e-15


@pytest.mark.parametrize("seed", SEEDS)
def test_head_finite_difference(seed):
    rng = np.random.default_rng(100 + seed)
    n, d, v = int(rng.integers(1, 17)), int(rng.integers(1, 17)), int(rng.integers(2, 33))
    x = rng.standard_normal((n, d))
    wo = 0.3 * rng.standard_normal((d, v))
    labels = random_labels(rng, n, v)

    def f():
        return lmhead_forward(tensor(x), labels, head_weights(wo))[0]

    w = head_weights(wo)
    _, sv = lmhead_forward(tensor(x), labels, w)
    g = LmHeadWeights.zeros_like(w, "head")
    dx = lmhead_backward(sv, w, g)
    assert fd_check(f, [x, wo], [dx.numpy(), g.w_out.numpy()], rng, n_samples=40) < 1e-6


@given(st.integers(0, 2**32 - 1))
def test_head_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    n, d, v = 9, 5, 11
    x = rng.standard_normal((n, d))
    labels = random_labels(rng, n, v)
    w = head_weights(rng.standard_normal((d, v)))
    perm = rng.permutation(n)
    a, _ = lmhead_forward(tensor(x), labels, w)
    b, _ = lmhead_forward(tensor(x[perm]), labels[perm], w)
    assert abs(a - b) <= 1e-12


# -- attention -----------------------------------------------------------


def _attn_arrays(rng, d, heads, g, s=0.4):
    kv = d // g
    return [s * rng.standard_normal((d, d)), s * rng.standard_normal((d, kv)), s * rng.standard_normal((d, kv)), s * rng.standard_normal((d, d))]


@pytest.mark.parametrize("impl", ["naive", "tiled"])
def test_attention_single_position(rng, impl):
    d, heads, g = 8, 4, 2
    ws = _attn_arrays(rng, d, heads, g)
    x = rng.standard_normal((1, d))
    out, _ = attn_forward(tensor(x), attn_weights(ws), attn_shape(1, 1, d, heads, g), impl=impl)
    hd = d // heads
    v = (x @ ws[2]).reshape(heads // g, hd)
    o = np.repeat(v, g, axis=0).reshape(1, d)
    np.testing.assert_allclose(out.data, o @ ws[3], rtol=1e-13, atol=1e-15)


@pytest.mark.parametrize("impl", ["naive", "tiled"])
def test_gqa_equals_mha_with_duplicated_kv(rng, impl):
    b, s, d, heads, g = 2, 5, 8, 4, 2
    wq, wk, wv, wo = _attn_arrays(rng, d, heads, g)
    hd = d // heads
    dup = lambda w: np.repeat(w.reshape(d, heads // g, hd), g, axis=1).reshape(d, d)  # noqa: E731
    x = rng.standard_normal((b * s, d))
    gqa, _ = attn_forward(tensor(x), attn_weights([wq, wk, wv, wo]), attn_shape(b, s, d, heads, g), impl=impl)
    mha, _ = attn_forward(tensor(x), attn_weights([wq, dup(wk), dup(wv), wo]), attn_shape(b, s, d, heads, 1), impl=impl)
    np.testing.assert_allclose(gqa.data, mha.data, rtol=1e-12, atol=1e-14)


def test_naive_and_tiled_agree(rng):
    b, s, d, heads, g = 1, 150, 8, 2, 2
    ws = _attn_arrays(rng, d, heads, g)
    x = rng.standard_normal((b * s, d))
    shp = attn_shape(b, s, d, heads, g)
    r = rng.standard_normal((b * s, d))
    outs = {}
    for impl in ("naive", "tiled"):
        w = attn_weights(ws)
        out, sv = attn_forward(tensor(x), w, shp, impl=impl)
        gr = AttnWeights.zeros_like(w, "attn")
        dx = attn_backward(tensor(r), sv, w, gr)
        outs[impl] = [out.numpy(), dx.numpy(), *(t.numpy() for t in gr.tensors().values())]
    for a, c in zip(outs["naive"], outs["tiled"]):
        np.testing.assert_allclose(a, c, rtol=1e-10, atol=1e-12)


def test_attention_is_causal(rng):
    b, s, d, heads, g = 1, 6, 8, 2, 1
    ws = _attn_arrays(rng, d, heads, g)
    x = rng.standard_normal((s, d))
    shp = attn_shape(b, s, d, heads, g)
    a, _ = attn_forward(tensor(x), attn_weights(ws), shp)
    x2 = x.copy()
    x2[4:] += 1.0
    c, _ = attn_forward(tensor(x2), attn_weights(ws), shp)
    np.testing.assert_array_equal(a.data[:4], c.data[:4])


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("rope", [False, True])
def test_attention_finite_difference(seed, rope):
    rng = np.random.default_rng(200 + seed)
    b, s, d, heads, g = 1, 4, 8, 4, 2
    ws = _attn_arrays(rng, d, heads, g)
    x = rng.standard_normal((b * s, d))
    r = rng.standard_normal((b * s, d))
    shp = attn_shape(b, s, d, heads, g)

    def f():
        out, _ = attn_forward(tensor(x), attn_weights(ws), shp, rope=rope)
        return float((out.data * r).sum())

    w = attn_weights(ws)
    _, sv = attn_forward(tensor(x), w, shp, rope=rope)
    gr = AttnWeights.zeros_like(w, "attn")
    dx = attn_backward(tensor(r), sv, w, gr)
    grads = [dx.numpy()] + [t.numpy() for t in gr.tensors().values()]
    assert fd_check(f, [x, *ws], grads, rng, n_samples=24) < 1e-6


def test_attention_config_errors():
    with pytest.raises(ShapeError):
        attn_shape(1, 4, 8, 3, 1)
    with pytest.raises(ShapeError):
        attn_shape(1, 4, 8, 4, 3)


# -- RMSNorm -------------------------------------------------------------


def test_rmsnorm_constant_row():
    gain = tensor(np.full(4, 1.5), "weight/g")
    for c in (3.0, -2.0):
        y, _ = rmsnorm_forward(tensor(np.full((1, 4), c)), gain)
        np.testing.assert_allclose(y.data, 1.5 * c / math.sqrt(c * c + 1e-5), rtol=1e-15)
        np.testing.assert_allclose(y.data, 1.5 * np.sign(c), rtol=1e-5)


def test_rmsnorm_scale_invariance(rng):
    x = rng.standard_normal((10, 6))
    gain = tensor(rng.standard_normal(6), "weight/g")
    # eps is negligible once the mean square dwarfs it
    big = 1e3 * x
    a, _ = rmsnorm_forward(tensor(big), gain)
    b, _ = rmsnorm_forward(tensor(2 * big), gain)
    assert np.abs(a.data - b.data).max() <= 1e-9
    y1, _ = rmsnorm_forward(tensor(x), gain, eps=0.0)
    y2, _ = rmsnorm_forward(tensor(2 * x), gain, eps=0.0)
    assert np.abs(y1.data - y2.data).max() <= 1e-9


def test_rmsnorm_shape_error():
    with pytest.raises(ShapeError):
        rmsnorm_forward(tensor(np.ones((2, 3))), tensor(np.ones(4), "weight/g"))


@pytest.mark.parametrize("seed", SEEDS)
def test_rmsnorm_finite_difference(seed):
    rng = np.random.default_rng(300 + seed)
    n, d = int(rng.integers(1, 17)), int(rng.integers(2, 17))
    x = rng.standard_normal((n, d))
    gain = 1 + 0.3 * rng.standard_normal(d)
    r = rng.standard_normal((n, d))

    def f():
        y, _ = rmsnorm_forward(tensor(x), tensor(gain, "weight/g"))
        return float((y.data * r).sum())

    gt = tensor(gain, "weight/g")
    _, sv = rmsnorm_forward(tensor(x), gt)
    dg = Tensor.zeros((d,), label="grad/g")
    dx = rmsnorm_backward(tensor(r), sv, gt, dg)
    assert fd_check(f, [x, gain], [dx.numpy(), dg.numpy()], rng, n_samples=40) < 1e-6


def test_silu_helper_matches_definition(rng):
    x = rng.standard_normal(50) * 5
    np.testing.assert_allclose(silu_np(x), x / (1 + np.exp(-x)), rtol=1e-14)
