import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import head_weights, mlp_weights, random_labels, random_mlp, tensor
from mstrain import memtrack
from mstrain.blocks import DegenerateInputError, LmHeadWeights, MlpWeights, lmhead_backward, lmhead_forward, mlp_backward, mlp_forward
from mstrain.miniseq import (
    PAPER_MEAN,
    TOKEN_WEIGHTED,
    DegenerateChunkWarning,
    MiniSeqConfig,
    make_chunk_plan,
    mask_labels_for_chunk,
    miniseq_lmhead_backward,
    miniseq_lmhead_forward,
    miniseq_mlp_backward,
    miniseq_mlp_forward,
)
from mstrain.tensor import ShapeError

# -- chunk plans ---------------------------------------------------------


def test_plan_examples():
    assert make_chunk_plan(8, 2).ranges == ((0, 4), (4, 8))
    assert make_chunk_plan(8, 1).ranges == ((0, 8),)
    assert make_chunk_plan(7, 2).ranges == ((0, 4), (4, 7))
    assert make_chunk_plan(3, 5).ranges == ((0, 1), (1, 2), (2, 3))


def test_plan_errors():
    with pytest.raises(DegenerateInputError):
        make_chunk_plan(0, 2)
    with pytest.raises(ValueError):
        make_chunk_plan(4, 0)
    with pytest.raises(ValueError):
        MiniSeqConfig(M_mlp=0)
    with pytest.raises(ValueError):
        MiniSeqConfig(loss_mode="sum")


@given(st.integers(1, 500), st.integers(1, 64))
def test_plan_invariants(n, m):
    plan = make_chunk_plan(n, m)
    r = plan.ranges
    assert len(r) == min(m, n)
    assert r[0][0] == 0 and r[-1][1] == n
    assert all(s < e for s, e in r)
    assert all(a[1] == b[0] for a, b in zip(r, r[1:]))
    assert plan.max_rows == -(-n // min(m, n))


def test_mask_labels():
    lab = np.array([3, -100, 5, -100, -100, 1])
    assert (mask_labels_for_chunk(lab, (3, 5)) == -100).all()
    assert np.array_equal(mask_labels_for_chunk(lab, (0, 6)), lab)
    plan = make_chunk_plan(6, 4)
    assert np.array_equal(np.concatenate([mask_labels_for_chunk(lab, r) for r in plan.ranges]), lab)


# -- MLP -----------------------------------------------------------------


def _mlp_pair(rng, n, d, i, m, upstream=None):
    ws = random_mlp(rng, d, i)
    x = rng.standard_normal((n, d))
    r = upstream if upstream is not None else rng.standard_normal((n, d))
    w = mlp_weights(ws)
    out_s, sv = mlp_forward(tensor(x), w)
    g_s = MlpWeights.zeros_like(w, "mlp")
    dx_s = mlp_backward(tensor(r), sv, w, g_s)
    out_m, svm = miniseq_mlp_forward(tensor(x), w, make_chunk_plan(n, m))
    g_m = MlpWeights.zeros_like(w, "mlp")
    dx_m = miniseq_mlp_backward(tensor(r), svm, w, g_m)
    std = [out_s.numpy(), dx_s.numpy(), *(t.numpy() for t in g_s.tensors().values())]
    mini = [out_m.numpy(), dx_m.numpy(), *(t.numpy() for t in g_m.tensors().values())]
    return std, mini


def test_mlp_m1_bitwise(rng):
    std, mini = _mlp_pair(rng, 10, 4, 8, 1)
    for a, b in zip(std, mini):
        assert a.tobytes() == b.tobytes()


def test_mlp_m4_example(rng):
    std, mini = _mlp_pair(rng, 16, 8, 32, 4)
    assert np.abs(std[0] - mini[0]).max() <= 1e-12
    for a, b in zip(std[1:], mini[1:]):
        assert np.abs(a - b).max() <= 1e-10


def test_mlp_zero_upstream(rng):
    _, mini = _mlp_pair(rng, 9, 4, 8, 4, upstream=np.zeros((9, 4)))
    assert not any(a.any() for a in mini[1:])


@given(st.integers(4, 64), st.sampled_from([1, 2, 3, 4, 7, 8, 16]), st.integers(0, 2**31))
def test_mlp_equivalence(n, m, seed):
    rng = np.random.default_rng(seed)
    std, mini = _mlp_pair(rng, n, 6, 12, m)
    assert np.abs(std[0] - mini[0]).max() <= 1e-12
    for a, b in zip(std[1:], mini[1:]):
        assert np.abs(a - b).max() <= 1e-10


def test_mlp_plan_mismatch(rng):
    with pytest.raises(ShapeError):
        miniseq_mlp_forward(tensor(np.ones((6, 4))), mlp_weights(random_mlp(rng, 4, 8)), make_chunk_plan(5, 2))


def _mlp_inter_peak(rng, n, d, i, m):
    tr = memtrack.Tracker()
    with memtrack.use_tracker(tr):
        w = mlp_weights(random_mlp(np.random.default_rng(0), d, i))
        x = tensor(np.random.default_rng(1).standard_normal((n, d)))
        tr.region_begin("r")
        if m == 1:
            out, sv = mlp_forward(x, w)
            sv.release()
        else:
            out, _ = miniseq_mlp_forward(x, w, make_chunk_plan(n, m))
        rep, c = tr.region_end("r")
    return rep, c


def test_mlp_peak_intermediate_m4(rng):
    n, d, i = 16, 8, 32
    std, _ = _mlp_inter_peak(rng, n, d, i, 1)
    mini, _ = _mlp_inter_peak(rng, n, d, i, 4)
    assert mini.class_peak("inter/") <= (-(-n // 4) / n) * std.class_peak("inter/") + n * d * 8
    assert mini.class_peak("inter/") == std.class_peak("inter/") // 4


def test_mlp_memory_non_increasing(rng):
    peaks = [_mlp_inter_peak(rng, 48, 4, 16, m)[0].class_peak("inter/") for m in (1, 2, 3, 4, 6, 8, 16)]
    assert all(a >= b for a, b in zip(peaks, peaks[1:]))


@pytest.mark.parametrize("m", [1, 2, 4, 8])
def test_mlp_flops_and_weight_reads(rng, m):
    n, d, i = 32, 4, 16
    _, c1 = _mlp_inter_peak(rng, n, d, i, 1)
    _, cm = _mlp_inter_peak(rng, n, d, i, m)
    assert cm.flops == c1.flops
    assert cm.weight_reads == m * c1.weight_reads == m * 3 * d * i


# -- LM-Head -------------------------------------------------------------


def _head_pair(rng, n, d, v, m, labels=None, mode=TOKEN_WEIGHTED, upstream=1.0):
    x = rng.standard_normal((n, d))
    wo = 0.5 * rng.standard_normal((d, v))
    labels = random_labels(rng, n, v) if labels is None else labels
    w = head_weights(wo)
    ls, sv = lmhead_forward(tensor(x), labels, w)
    gs = LmHeadWeights.zeros_like(w, "head")
    dxs = lmhead_backward(sv, w, gs, upstream)
    lm, svm = miniseq_lmhead_forward(tensor(x), labels, w, make_chunk_plan(n, m), mode)
    gm = LmHeadWeights.zeros_like(w, "head")
    dxm = miniseq_lmhead_backward(svm, w, gm, upstream)
    return (ls, dxs.numpy(), gs.w_out.numpy()), (lm, dxm.numpy(), gm.w_out.numpy())


def test_head_m1_bitwise(rng):
    s, m = _head_pair(rng, 12, 4, 10, 1)
    assert s[0] == m[0]
    assert s[1].tobytes() == m[1].tobytes() and s[2].tobytes() == m[2].tobytes()


def test_head_m16_example(rng):
    s, m = _head_pair(rng, 64, 8, 32, 16)
    assert abs(s[0] - m[0]) <= 1e-12
    assert np.abs(s[1] - m[1]).max() <= 1e-10 and np.abs(s[2] - m[2]).max() <= 1e-10


@given(st.integers(4, 64), st.sampled_from([1, 2, 3, 4, 7, 8, 16]), st.integers(0, 2**31), st.floats(0.25, 4.0))
def test_head_equivalence(n, m, seed, upstream):
    rng = np.random.default_rng(seed)
    s, mm = _head_pair(rng, n, 5, 13, m, upstream=upstream)
    assert abs(s[0] - mm[0]) <= 1e-12
    assert np.abs(s[1] - mm[1]).max() <= 1e-10 and np.abs(s[2] - mm[2]).max() <= 1e-10


def test_paper_mean_equals_token_weighted_on_equal_counts(rng):
    n, d, v = 16, 4, 9
    x = tensor(rng.standard_normal((n, d)))
    labels = rng.integers(0, v, n)
    labels[[1, 5, 9, 13]] = -100  # one ignored per chunk of four
    w = head_weights(rng.standard_normal((d, v)))
    plan = make_chunk_plan(n, 4)
    a, _ = miniseq_lmhead_forward(x, labels, w, plan, TOKEN_WEIGHTED)
    b, _ = miniseq_lmhead_forward(x, labels, w, plan, PAPER_MEAN)
    assert abs(a - b) <= 1e-12


def test_unequal_counts_only_token_weighted_matches(rng):
    n, d, v = 16, 4, 9
    x = rng.standard_normal((n, d))
    labels = rng.integers(0, v, n)
    labels[12:] = -100  # last chunk fully ignored
    labels[0] = -100
    w = head_weights(rng.standard_normal((d, v)))
    std, _ = lmhead_forward(tensor(x), labels, w)
    plan = make_chunk_plan(n, 4)
    tw, _ = miniseq_lmhead_forward(tensor(x), labels, w, plan, TOKEN_WEIGHTED)
    with pytest.warns(DegenerateChunkWarning):
        pm, _ = miniseq_lmhead_forward(tensor(x), labels, w, plan, PAPER_MEAN)
    assert abs(tw - std) <= 1e-12
    assert abs(pm - std) > 1e-6


def test_paper_mean_backward_matches_its_loss(rng):
    # the paper-mean gradient is the gradient of the paper-mean loss
    n, d, v = 10, 3, 6
    x = rng.standard_normal((n, d))
    labels = random_labels(rng, n, v, ignore_frac=0.3)
    wo = rng.standard_normal((d, v))
    plan = make_chunk_plan(n, 3)
    w = head_weights(wo)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateChunkWarning)
        _, sv = miniseq_lmhead_forward(tensor(x), labels, w, plan, PAPER_MEAN)
        g = LmHeadWeights.zeros_like(w, "head")
        miniseq_lmhead_backward(sv, w, g)
        h, i, j = 1e-5, 1, 2
        wp, wm = wo.copy(), wo.copy()
        wp[i, j] += h
        wm[i, j] -= h
        fp = miniseq_lmhead_forward(tensor(x), labels, head_weights(wp), plan, PAPER_MEAN)[0]
        fm = miniseq_lmhead_forward(tensor(x), labels, head_weights(wm), plan, PAPER_MEAN)[0]
    assert g.w_out.data[i, j] == pytest.approx((fp - fm) / (2 * h), rel=1e-6)


def test_head_all_ignored(rng):
    w = head_weights(np.zeros((3, 4)))
    with pytest.raises(DegenerateInputError):
        miniseq_lmhead_forward(tensor(np.ones((4, 3))), np.full(4, -100), w, make_chunk_plan(4, 2))


def test_head_logits_memory(rng):
    n, d, v = 64, 8, 32

    def logits_peak(m):
        tr = memtrack.Tracker()
        with memtrack.use_tracker(tr):
            x = tensor(np.random.default_rng(0).standard_normal((n, d)))
            w = head_weights(np.random.default_rng(1).standard_normal((d, v)))
            labels = np.random.default_rng(2).integers(0, v, n)
            g = LmHeadWeights.zeros_like(w, "head")
            tr.region_begin("r")
            if m == 1:
                _, sv = lmhead_forward(x, labels, w)
                lmhead_backward(sv, w, g)
            else:
                _, sv = miniseq_lmhead_forward(x, labels, w, make_chunk_plan(n, m))
                miniseq_lmhead_backward(sv, w, g)
            rep, c = tr.region_end("r")
        return rep.class_peak("inter/head.logits"), c

    std, c1 = logits_peak(1)
    m16, c16 = logits_peak(16)
    assert m16 == std // 16
    # backward recomputes every chunk's logits: one extra forward matmul
    assert c16.flops - c1.flops == 2 * n * d * v


@pytest.mark.parametrize("m", [2, 4, 8])
def test_head_weight_reads(rng, m):
    n, d, v = 32, 4, 12

    def reads(mm):
        tr = memtrack.Tracker()
        with memtrack.use_tracker(tr):
            x = tensor(rng.standard_normal((n, d)))
            w = head_weights(rng.standard_normal((d, v)))
            tr.region_begin("f")
            plan = make_chunk_plan(n, mm)
            miniseq_lmhead_forward(x, rng.integers(0, v, n), w, plan)
            _, c = tr.region_end("f")
        return c

    assert reads(m).weight_reads == m * reads(1).weight_reads == m * d * v
    assert reads(m).flops == reads(1).flops
