"""Geometry-guided distillation losses.

* superpoint distillation with predicted per-point reliability weights,
* instance mask reconstruction from randomly truncated masks,
* relation consistency between geometric and semantic similarity matrices.

Every loss accepts plain arrays or taped :class:`~geoguide.tensorkit.Var`
values; parameters are looked up by name in a mapping (a ``ParamStore`` or
the leaves returned by ``Tape.watch``).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensorkit as tk
from .errors import DimensionError
from .superpoint import SuperpointPartition, broadcast, pool_mean, pool_weighted

MIN_MASK_POINTS = 4
DEFAULT_GRAM_CAP = 512


@dataclass
class InstanceMaskSet:
    """Instance masks stored as sorted point-index arrays."""

    masks: list
    n_points: int

    def __post_init__(self):
        self.masks = [np.unique(np.asarray(m, dtype=np.int64)) for m in self.masks]
        for i, m in enumerate(self.masks):
            if m.size == 0:
                raise DimensionError(f"mask {i} is empty")
            if m[0] < 0 or m[-1] >= self.n_points:
                raise DimensionError(f"mask {i} indexes outside [0, {self.n_points})")

    @classmethod
    def from_labels(cls, instance_labels) -> "InstanceMaskSet":
        lab = np.asarray(instance_labels, dtype=np.int64)
        return cls([np.flatnonzero(lab == i) for i in np.unique(lab)], lab.size)

    @classmethod
    def from_boolean(cls, rows) -> "InstanceMaskSet":
        rows = np.asarray(rows, dtype=bool)
        return cls([np.flatnonzero(r) for r in rows], rows.shape[1])

    def __len__(self):
        return len(self.masks)

    def pooling(self):
        """Cached (M x N) mask-averaging matrix."""
        if getattr(self, "_pool", None) is None:
            self._pool = tk.pooling_matrix(self.masks, self.n_points)
        return self._pool

    def boolean(self, i: int) -> np.ndarray:
        out = np.zeros(self.n_points, dtype=bool)
        out[self.masks[i]] = True
        return out

    def to_json(self) -> str:
        return json.dumps({"n_points": self.n_points, "masks": [m.tolist() for m in self.masks]})

    @classmethod
    def from_json(cls, text: str) -> "InstanceMaskSet":
        d = json.loads(text)
        return cls(d["masks"], d["n_points"])


@dataclass
class LossReport:
    l_sp: float = 0.0
    l_mask: float = 0.0
    l_sim: float = 0.0
    l_final: float = 0.0
    lambdas: tuple = (1.0, 1.0, 1.0)
    diagnostics: dict = field(default_factory=dict)

    def to_json(self, **extra) -> str:
        d = asdict(self)
        d["lambdas"] = list(self.lambdas)
        d.update(extra)
        return json.dumps(d, sort_keys=True)


def _scalar(x) -> float:
    return float(tk.value(x))


# --------------------------------------------------------------------------
# uncertainty-based superpoint distillation

def usd_inputs(geo, f2d, part: SuperpointPartition):
    """Head input concat[(S_G - F_G); (S_2d - F_2d)] with superpoint means broadcast to points."""
    res_geo = tk.sub(broadcast(pool_mean(geo, part), part), geo)
    res_2d = tk.sub(broadcast(pool_mean(f2d, part), part), f2d)
    return tk.concat_cols(res_geo, res_2d)


def usd_weights(geo, f2d, part: SuperpointPartition, params, inputs=None):
    """Per-point reliability weights in (0, 1), shape (N, 1).

    The head sees how far each point's geometric and 2D features sit from
    their superpoint means. ``inputs`` may carry a cached ``usd_inputs`` result.
    """
    gv, fv = tk.value(geo), tk.value(f2d)
    if gv.shape[0] != fv.shape[0] or gv.shape[0] != part.n_points:
        raise DimensionError(f"geo {gv.shape} and f2d {fv.shape} must both have {part.n_points} rows")
    w = params["uncertainty.w"]
    if tk.value(w).shape[0] != gv.shape[1] + fv.shape[1]:
        raise DimensionError(
            f"uncertainty head expects {tk.value(w).shape[0]} inputs, got {gv.shape[1]} + {fv.shape[1]}"
        )
    if inputs is None:
        inputs = usd_inputs(geo, f2d, part)
    logits = tk.add_bias(tk.matmul(inputs, w), params["uncertainty.b"])
    return tk.sigmoid(logits)


def _target_superpoints(f2d, part):
    # superpoints whose 2D target carries any signal
    norms = np.linalg.norm(pool_mean(tk.value(f2d), part), axis=1)
    return norms > tk.NORM_EPS


def loss_sp(f3d_sem, f2d, part: SuperpointPartition, weights=None, hit=None, diagnostics=None):
    """Superpoint + point level cosine distillation against pooled 2D targets.

    ``weights`` of None means plain mean pooling. Zero-hit points (``hit``
    false) and superpoints without any 2D signal are left out of the means.
    """
    fv = tk.value(f2d)
    if weights is None:
        s2d = pool_mean(f2d, part)
    else:
        s2d = pool_weighted(f2d, weights, part)
    s_sem = pool_mean(f3d_sem, part)
    live_sp = _target_superpoints(fv, part)
    sp_term = tk.masked_mean(tk.sub(1.0, tk.cosine_rows(s_sem, s2d)), live_sp)
    if hit is None:
        hit = np.linalg.norm(fv, axis=1) > tk.NORM_EPS
    hit = np.asarray(hit, dtype=bool) & live_sp[part.assignment]
    f2d_bar = broadcast(s2d, part)
    pt_term = tk.masked_mean(tk.sub(1.0, tk.cosine_rows(f3d_sem, f2d_bar)), hit)
    if diagnostics is not None:
        diagnostics["sp_term"] = _scalar(sp_term)
        diagnostics["pt_term"] = _scalar(pt_term)
    return tk.add(sp_term, pt_term)


def loss_pointwise(f3d_sem, f2d, hit=None):
    """Plain per-point cosine distillation, mean of 1 - cos over hit points."""
    fv = tk.value(f2d)
    if hit is None:
        hit = np.linalg.norm(fv, axis=1) > tk.NORM_EPS
    return tk.masked_mean(tk.sub(1.0, tk.cosine_rows(f3d_sem, f2d)), hit)


# --------------------------------------------------------------------------
# instance mask reconstruction

def mask_out(mask, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Drop floor(ratio * |M|) members uniformly at random, keeping at least one.

    ``mask`` may be a boolean N-vector or an index array; the result has the
    same form.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask-out ratio must lie in (0, 1), got {ratio}")
    mask = np.asarray(mask)
    as_bool = mask.dtype == bool
    idx = np.flatnonzero(mask) if as_bool else np.asarray(mask, dtype=np.int64)
    n_drop = min(int(np.floor(ratio * idx.size)), idx.size - 1)
    keep = np.sort(rng.choice(idx, size=idx.size - n_drop, replace=False)) if n_drop > 0 else idx.copy()
    if as_bool:
        out = np.zeros_like(mask)
        out[keep] = True
        return out
    return keep


def imr_reconstruct_many(f3d_sem, kept_sets, params):
    """Reconstructions (K x N probabilities) for several truncated masks at once."""
    n = tk.value(f3d_sem).shape[0]
    for kept in kept_sets:
        if len(kept) == 0:
            raise DimensionError("cannot reconstruct from an empty mask")
    pooled = tk.pool(f3d_sem, tk.pooling_matrix(kept_sets, n))
    feat = tk.add_bias(tk.matmul(pooled, params["mask.w"]), params["mask.b"])
    return tk.sigmoid(tk.cosine_matrix(feat, f3d_sem))


def imr_reconstruct(f3d_sem, kept, params):
    """Reconstruct a full instance mask (N probabilities) from the kept members.

    The kept rows are averaged, passed through the mask head's linear map,
    and each point scores sigmoid(cosine) against the result.
    """
    kept = np.asarray(kept)
    if kept.dtype == bool:
        kept = np.flatnonzero(kept)
    return tk.reshape(imr_reconstruct_many(f3d_sem, [kept], params), (-1,))


def loss_mask(f3d_sem, masks: InstanceMaskSet, params, rng: np.random.Generator, ratio_range=(0.3, 0.7), diagnostics=None):
    """Mean BCE between each instance mask and its reconstruction from a
    randomly truncated copy. Masks with fewer than 4 points are skipped; if none
    remain the loss is 0 and ``diagnostics['mask_warning']`` is set."""
    lo, hi = ratio_range
    used, kept_sets = [], []
    for m in masks.masks:
        if m.size < MIN_MASK_POINTS:
            continue
        ratio = rng.uniform(lo, hi) if hi > lo else lo
        kept_sets.append(mask_out(m, ratio, rng))
        used.append(m)
    if diagnostics is not None:
        diagnostics["n_masks_used"] = len(used)
        diagnostics["mask_warning"] = not used
    if not used:
        warnings.warn("loss_mask: no mask has enough points; returning 0", RuntimeWarning, stacklevel=2)
        return 0.0
    prob = imr_reconstruct_many(f3d_sem, kept_sets, params)
    target = np.zeros((len(used), masks.n_points))
    for k, m in enumerate(used):
        target[k, m] = 1.0
    # bce() averages over all K*N entries, i.e. the mean over masks of per-mask means
    return tk.bce(target, prob)


# --------------------------------------------------------------------------
# inter-instance relation consistency

def similarity_matrix(x, normalize: bool = True):
    return tk.gram(tk.row_normalize(x) if normalize else x)


def standardize_columns(x: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance columns; constant columns become zero."""
    x = np.asarray(x, dtype=np.float64)
    sd = x.std(axis=0)
    return (x - x.mean(axis=0)) / np.where(sd > tk.NORM_EPS, sd, 1.0)


def loss_sim(
    geo,
    f3d_sem,
    part: SuperpointPartition,
    masks: InstanceMaskSet,
    cap: int = DEFAULT_GRAM_CAP,
    rng: np.random.Generator | None = None,
    normalize: bool = True,
    diagnostics=None,
    standardize_geo: bool = False,
):
    """MSE between geometric and semantic similarity matrices at mask level plus
    the same at superpoint level (at most ``cap`` superpoints, sampled without
    replacement). The geometric side is treated as a constant.

    ``standardize_geo`` z-scores the descriptor channels over the scene before
    pooling, so geometric cosines are not all close to 1.
    """
    geo_v = np.asarray(tk.value(geo))
    if standardize_geo:
        geo_v = standardize_columns(geo_v)
    n = geo_v.shape[0]
    terms = []
    mask_term = 0.0
    if len(masks) >= 2:
        mat = masks.pooling()
        g_geo = similarity_matrix(np.asarray(mat @ geo_v), normalize)
        g_sem = similarity_matrix(tk.pool(f3d_sem, mat), normalize)
        mask_term = tk.mse(g_sem, g_geo)
        terms.append(mask_term)
    sp_term = 0.0
    if part.n_superpoints >= 2:
        chosen = np.arange(part.n_superpoints)
        if part.n_superpoints > cap:
            rng = rng if rng is not None else np.random.default_rng(0)
            chosen = np.sort(rng.choice(part.n_superpoints, size=cap, replace=False))
        groups = [part.members(q) for q in chosen] if chosen.size < part.n_superpoints else None
        if groups is None:
            s_geo = pool_mean(geo_v, part)
            s_sem = pool_mean(f3d_sem, part)
        else:
            mat = tk.pooling_matrix(groups, n)
            s_geo = np.asarray(mat @ geo_v)
            s_sem = tk.pool(f3d_sem, mat)
        sp_term = tk.mse(similarity_matrix(s_sem, normalize), similarity_matrix(s_geo, normalize))
        terms.append(sp_term)
    if diagnostics is not None:
        diagnostics["sim_mask_term"] = _scalar(mask_term)
        diagnostics["sim_sp_term"] = _scalar(sp_term)
    if not terms:
        return 0.0
    return tk.weighted_sum([1.0] * len(terms), terms)


# --------------------------------------------------------------------------

def loss_final(l_sp, l_mask, l_sim, lambdas=(1.0, 1.0, 1.0), diagnostics=None):
    """Weighted total. Returns (total, LossReport); the total stays taped."""
    if any(lam < 0 for lam in lambdas):
        raise ValueError(f"loss weights must be nonnegative, got {lambdas}")
    total = tk.weighted_sum(lambdas, [l_sp, l_mask, l_sim])
    report = LossReport(
        l_sp=_scalar(l_sp),
        l_mask=_scalar(l_mask),
        l_sim=_scalar(l_sim),
        l_final=_scalar(total),
        lambdas=tuple(float(x) for x in lambdas),
        diagnostics=dict(diagnostics or {}),
    )
    return total, report
