"""Brute-force loop re-implementations used as test oracles.

Written from the definitions with plain Python loops; nothing here calls the
vectorized library code it checks.
"""

import math

import numpy as np


def projection_valid(positions, rotation, translation, intrinsics, depth_map, tau):
    h, w = depth_map.shape
    out = []
    for p in positions:
        cam = [sum(rotation[r][c] * p[c] for c in range(3)) + translation[r] for r in range(3)]
        hom = [sum(intrinsics[r][c] * cam[c] for c in range(3)) for r in range(3)]
        d = hom[2]
        if d <= 0:
            out.append(False)
            continue
        u, v = hom[0] / d, hom[1] / d
        if not (0 <= u < w and 0 <= v < h):
            out.append(False)
            continue
        out.append(abs(d - depth_map[int(math.floor(v))][int(math.floor(u))]) < tau)
    return np.array(out, dtype=bool)


def pool_mean(f, assignment, n_q):
    out = np.zeros((n_q, len(f[0])))
    for q in range(n_q):
        rows = [j for j in range(len(f)) if assignment[j] == q]
        for c in range(out.shape[1]):
            out[q, c] = sum(f[j][c] for j in rows) / len(rows)
    return out


def pool_weighted(f, w, assignment, n_q, eps=1e-8):
    out = np.zeros((n_q, len(f[0])))
    for q in range(n_q):
        rows = [j for j in range(len(f)) if assignment[j] == q]
        wsum = sum(float(w[j]) for j in rows)
        for c in range(out.shape[1]):
            out[q, c] = sum(float(w[j]) * f[j][c] for j in rows) / max(wsum, eps)
    return out


def _cos(a, b, eps=1e-12):
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    if na <= eps or nb <= eps:
        return 0.0
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))


def imr_reconstruct(f_sem, kept, w, b):
    c = len(f_sem[0])
    mean = [sum(f_sem[j][k] for j in kept) / len(kept) for k in range(c)]
    feat = [sum(mean[a] * w[a][k] for a in range(c)) + b[0][k] for k in range(c)]
    return np.array([_sigmoid(_cos(feat, row)) for row in f_sem])


def _gram_of_groups(x, groups):
    pooled = []
    for g in groups:
        pooled.append([sum(x[j][k] for j in g) / len(g) for k in range(len(x[0]))])
    n = len(pooled)
    return [[_cos(pooled[a], pooled[b]) for b in range(n)] for a in range(n)]


def _mse(a, b):
    n = len(a)
    return sum((a[i][j] - b[i][j]) ** 2 for i in range(n) for j in range(n)) / (n * n)


def loss_sim(geo, f_sem, assignment, n_q, masks):
    """Mask-level plus superpoint-level Gram MSE (all superpoints, cosine Grams)."""
    total = 0.0
    if len(masks) >= 2:
        total += _mse(_gram_of_groups(f_sem, masks), _gram_of_groups(geo, masks))
    if n_q >= 2:
        groups = [[j for j in range(len(geo)) if assignment[j] == q] for q in range(n_q)]
        total += _mse(_gram_of_groups(f_sem, groups), _gram_of_groups(geo, groups))
    return total


def metrics(pred, gt, n_classes):
    ious, accs = [], []
    for c in range(n_classes):
        tp = sum(1 for p, g in zip(pred, gt) if p == c and g == c)
        fp = sum(1 for p, g in zip(pred, gt) if p == c and g != c)
        fn = sum(1 for p, g in zip(pred, gt) if p != c and g == c)
        if tp + fn == 0:
            continue
        ious.append(tp / (tp + fp + fn))
        accs.append(tp / (tp + fn))
    return sum(ious) / len(ious), sum(accs) / len(accs)
