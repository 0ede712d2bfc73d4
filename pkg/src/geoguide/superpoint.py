"""Normal-based region growing into superpoints, plus pooling over partitions."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from . import tensorkit as tk
from .errors import ConfigError, DimensionError
from .geometry import PointCloud, local_shape


@dataclass
class SuperpointPartition:
    assignment: np.ndarray
    n_superpoints: int

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64).reshape(-1)
        sizes = np.bincount(self.assignment, minlength=self.n_superpoints)
        if sizes.size != self.n_superpoints or np.any(sizes == 0):
            raise ConfigError("superpoint ids must be contiguous from 0 and nonempty")

    @cached_property
    def mean_matrix(self):
        """Sparse (N_Q x N) averaging matrix and its transpose."""
        counts = np.bincount(self.assignment, minlength=self.n_superpoints).astype(np.float64)
        mat = tk.segment_matrix(self.assignment, self.n_superpoints, weights=1.0 / counts[self.assignment])
        return mat.tocsr(), mat.T.tocsr()

    @property
    def n_points(self) -> int:
        return self.assignment.size

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_superpoints)

    def members(self, q: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == q)

    @classmethod
    def from_labels(cls, labels) -> "SuperpointPartition":
        """Relabel arbitrary ids to 0..K-1 in order of first appearance."""
        labels = np.asarray(labels).reshape(-1)
        _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
        rank = np.empty(first.size, dtype=np.int64)
        rank[np.argsort(first, kind="stable")] = np.arange(first.size)
        return cls(rank[inverse.reshape(-1)], first.size)

    def to_json(self) -> str:
        return json.dumps(
            {
                "n_points": int(self.n_points),
                "n_superpoints": int(self.n_superpoints),
                "assignment": self.assignment.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "SuperpointPartition":
        d = json.loads(text)
        part = cls(np.asarray(d["assignment"], dtype=np.int64), int(d["n_superpoints"]))
        if part.n_points != d["n_points"]:
            raise ConfigError("n_points does not match assignment length")
        return part


def knn_graph(positions: np.ndarray, k: int) -> np.ndarray:
    """(N, k) nearest-neighbor indices excluding the point itself."""
    k_eff = min(k + 1, positions.shape[0])
    _, nbr = cKDTree(positions).query(positions, k=k_eff)
    nbr = np.asarray(nbr).reshape(positions.shape[0], k_eff)
    return nbr[:, 1:]


def oversegment(
    cloud: PointCloud,
    normals: np.ndarray | None = None,
    theta_max: float = 15.0,
    min_size: int = 10,
    k: int = 16,
    curvature: np.ndarray | None = None,
    seed_curvature_max: float = 0.05,
) -> SuperpointPartition:
    """Region growing over the k-NN graph.

    Seeds are visited in ascending curvature; a neighbor joins the growing
    region when its (unoriented) normal is within ``theta_max`` degrees of the
    region's mean normal. Points above ``seed_curvature_max`` may join regions
    but never start one. Regions smaller than ``min_size`` (including points
    never reached) are merged into the adjacent region sharing the most k-NN
    edges.
    """
    if not 0.0 < theta_max < 90.0:
        raise ConfigError(f"theta_max must lie in (0, 90) degrees, got {theta_max}")
    if min_size < 1:
        raise ConfigError("min_size must be >= 1")
    pos = cloud.positions
    n = pos.shape[0]
    if n < min_size or n <= 4:
        return SuperpointPartition(np.zeros(n, dtype=np.int64), 1)
    if normals is None or curvature is None:
        shape = local_shape(pos, min(k, n - 1))
        normals = shape.normals if normals is None else normals
        curvature = shape.curvature if curvature is None else curvature
    normals = np.asarray(normals, dtype=np.float64)
    normals = normals / np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-12)
    nbr = knn_graph(pos, k)
    cos_min = np.cos(np.deg2rad(theta_max))

    labels = np.full(n, -1, dtype=np.int64)
    region = 0
    for s in np.argsort(curvature, kind="stable"):
        if labels[s] >= 0 or curvature[s] > seed_curvature_max:
            continue
        labels[s] = region
        nsum = normals[s].copy()
        queue = deque([s])
        while queue:
            p = queue.popleft()
            cand = nbr[p][labels[nbr[p]] < 0]
            if cand.size == 0:
                continue
            mean_n = nsum / np.linalg.norm(nsum)
            dots = normals[cand] @ mean_n
            for q, dq in zip(cand, dots):
                if labels[q] < 0 and abs(dq) >= cos_min:
                    labels[q] = region
                    nsum += normals[q] if dq >= 0 else -normals[q]
                    queue.append(q)
        region += 1
    # leftover points become singleton fragments
    loose = np.flatnonzero(labels < 0)
    labels[loose] = region + np.arange(loose.size)
    labels = _merge_fragments(labels, nbr, min_size)
    return SuperpointPartition.from_labels(labels)


def _merge_fragments(labels: np.ndarray, nbr: np.ndarray, min_size: int) -> np.ndarray:
    n, k = nbr.shape
    src = np.repeat(np.arange(n), k)
    dst = nbr.reshape(-1)
    # symmetric edge list
    src, dst = np.concatenate([src, dst]), np.concatenate([dst, src])
    stuck: set[int] = set()
    while True:
        sizes = np.bincount(labels)
        small = [r for r in np.flatnonzero((sizes > 0) & (sizes < min_size)) if r not in stuck]
        if not small:
            return labels
        small.sort(key=lambda r: (sizes[r], r))
        merged_any = False
        for r in small:
            members = labels[src] == r
            other = labels[dst[members]]
            other = other[other != r]
            if other.size == 0:
                stuck.add(int(r))
                continue
            counts = np.bincount(other)
            target = int(np.argmax(counts))
            labels[labels == r] = target
            merged_any = True
            break
        if not merged_any:
            return labels


# --------------------------------------------------------------------------
# pooling over a partition (arrays or taped values)

def pool_mean(features, part: SuperpointPartition):
    if tk.value(features).shape[0] != part.n_points:
        raise DimensionError(f"features have {tk.value(features).shape[0]} rows for {part.n_points} points")
    mat, mat_t = part.mean_matrix
    return tk.pool(features, mat, mat_t)


def broadcast(sp_features, part: SuperpointPartition):
    if tk.value(sp_features).shape[0] != part.n_superpoints:
        raise DimensionError(
            f"superpoint features have {tk.value(sp_features).shape[0]} rows for {part.n_superpoints} superpoints"
        )
    return tk.gather_rows(sp_features, part.assignment)


def pool_weighted(features, weights, part: SuperpointPartition, eps: float = tk.POOL_EPS):
    """Per superpoint, sum of w_j f_j / sum of w_j (denominator guarded by eps)."""
    if tk.value(features).shape[0] != part.n_points:
        raise DimensionError(f"features have {tk.value(features).shape[0]} rows for {part.n_points} points")
    return tk.segment_weighted_mean(features, weights, part.assignment, part.n_superpoints, eps)
