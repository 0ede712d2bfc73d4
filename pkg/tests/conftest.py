import numpy as np
import pytest

from geoguide import tensorkit as tk
from geoguide.distill import InstanceMaskSet
from geoguide.superpoint import SuperpointPartition

FD_STEP = 1e-5


def random_params(rng, c1=9, c=16, hidden=None, scale=0.5):
    params = tk.ParamStore.init(c1, c, hidden, seed=int(rng.integers(1 << 31)))
    for name in params.names():
        params[name] = rng.normal(scale=scale, size=params[name].shape)
    return params


def random_partition(rng, n, n_q):
    lab = np.concatenate([np.arange(n_q), rng.integers(0, n_q, size=n - n_q)])
    rng.shuffle(lab)
    return SuperpointPartition(lab, n_q)


def random_masks(rng, n, n_m, min_size=4):
    """Disjoint masks, each with at least ``min_size`` points; leftovers unmasked."""
    perm = rng.permutation(n)
    cuts = [perm[i * min_size : (i + 1) * min_size] for i in range(n_m)]
    rest = perm[n_m * min_size :]
    owner = rng.integers(-1, n_m, size=rest.size)
    masks = [np.concatenate([cuts[i], rest[owner == i]]) for i in range(n_m)]
    return InstanceMaskSet(masks, n)


def random_instance(rng, n=None, n_q=None, n_m=None, c1=9, c=16):
    n = int(rng.integers(16, 33)) if n is None else n
    n_q = int(rng.integers(2, 9)) if n_q is None else n_q
    n_m = int(rng.integers(2, 5)) if n_m is None else n_m
    geo = np.abs(rng.normal(size=(n, c1)))
    f2d = rng.normal(size=(n, c))
    return dict(
        geo=geo,
        f2d=f2d,
        part=random_partition(rng, n, n_q),
        masks=random_masks(rng, n, n_m),
        params=random_params(rng, c1, c),
    )


def taped_grads(loss_fn, params):
    tape = tk.Tape()
    leaves = tape.watch(params)
    return tape.backward(loss_fn(leaves))


def numeric_grads(loss_fn, params, h=FD_STEP):
    out = {}
    for name in params.names():
        base = params[name]
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus, minus = params.copy(), params.copy()
            p, m = base.copy(), base.copy()
            p[idx] += h
            m[idx] -= h
            plus[name], minus[name] = p, m
            g[idx] = (float(tk.value(loss_fn(plus))) - float(tk.value(loss_fn(minus)))) / (2 * h)
        out[name] = g
    return out


def max_rel_error(analytic, numeric, floor=1e-7):
    worst = 0.0
    for name in analytic:
        a, n = analytic[name], numeric[name]
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(rel.max()))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
