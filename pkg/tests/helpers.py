"""Builders and the finite-difference oracle shared by the test modules."""

import numpy as np

from mstrain.attention import AttnWeights
from mstrain.blocks import LmHeadWeights, MlpWeights
from mstrain.tensor import Tensor


def tensor(arr, label="act/x"):
    return Tensor.from_numpy(np.asarray(arr, dtype=np.float64), label=label)


def mlp_weights(arrs):
    return MlpWeights(*(tensor(a, f"weight/mlp.{n}") for n, a in zip(("w_gate", "w_up", "w_down"), arrs)))


def head_weights(w_out):
    return LmHeadWeights(tensor(w_out, "weight/head.w_out"))


def attn_weights(arrs):
    return AttnWeights(*(tensor(a, f"weight/attn.{n}") for n, a in zip(("w_q", "w_k", "w_v", "w_o"), arrs)))


def random_mlp(rng, d, i, s=0.3):
    return [s * rng.standard_normal((d, i)), s * rng.standard_normal((d, i)), s * rng.standard_normal((i, d))]


def random_labels(rng, n, v, ignore_frac=0.2):
    lab = rng.integers(0, v, size=n)
    lab[rng.random(n) < ignore_frac] = -100
    if (lab == -100).all():
        lab[0] = 0
    return lab


def central_diff(f, arr, idx, h=1e-5):
    """Central difference of scalar ``f()`` with respect to ``arr[idx]``,
    perturbing ``arr`` in place."""
    old = arr[idx]
    arr[idx] = old + h
    fp = f()
    arr[idx] = old - h
    fm = f()
    arr[idx] = old
    return (fp - fm) / (2 * h)


def rel_err(a, b, floor=1e-6):
    """Relative error with an absolute floor in the denominator; entries far
    below the floor are compared against the difference noise instead."""
    return abs(a - b) / max(abs(a), abs(b), floor)


def fd_check(f, arrays, grads, rng, n_samples=None, h=1e-5):
    """Largest relative error between ``grads`` and central differences of
    ``f`` over sampled (or all) entries of ``arrays``."""
    worst = 0.0
    for arr, g in zip(arrays, grads):
        idxs = list(np.ndindex(arr.shape))
        if n_samples is not None and len(idxs) > n_samples:
            idxs = [idxs[i] for i in rng.choice(len(idxs), n_samples, replace=False)]
        for idx in idxs:
            worst = max(worst, rel_err(g[idx], central_diff(f, arr, idx, h)))
    return worst


def central_diff4(f, arr, idx, h=1e-3):
    """Fourth-order central difference; truncation O(h^4), rounding noise
    about ``eps * |f| / h``."""
    old = arr[idx]
    vals = []
    for k in (2, 1, -1, -2):
        arr[idx] = old + k * h
        vals.append(f())
    arr[idx] = old
    return (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
