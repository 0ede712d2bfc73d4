"""Pinhole cameras, depth-tested projection, multi-view fusion and the frozen
geometric point descriptor."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, GeometryError

DEFAULT_TAU_DEPTH = 0.05
DESCRIPTOR_DIM = 9
DESCRIPTOR_CHANNELS = (
    "normal_x",
    "normal_y",
    "normal_z",
    "linearity",
    "planarity",
    "scattering",
    "curvature",
    "height",
    "density",
)


@dataclass
class PointCloud:
    positions: np.ndarray
    gt_class: np.ndarray | None = None
    gt_instance: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if self.positions.shape[0] < 1:
            raise GeometryError("point cloud needs at least one point")
        if not np.all(np.isfinite(self.positions)):
            raise GeometryError("point positions must be finite")
        n = self.positions.shape[0]
        for name in ("gt_class", "gt_instance"):
            labels = getattr(self, name)
            if labels is None:
                continue
            labels = np.asarray(labels, dtype=np.int64).reshape(-1)
            if labels.size != n:
                raise GeometryError(f"{name} has {labels.size} entries for {n} points")
            if labels.size and labels.min() < 0:
                raise GeometryError(f"{name} must be nonnegative")
            setattr(self, name, labels)
        if self.gt_instance is not None:
            counts = np.bincount(self.gt_instance)
            if np.any(counts == 0):
                missing = np.flatnonzero(counts == 0).tolist()
                raise GeometryError(f"instance ids {missing} have no points")

    def __len__(self):
        return self.positions.shape[0]

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx)
        inst = self.gt_instance[idx] if self.gt_instance is not None else None
        if inst is not None:
            _, inst = np.unique(inst, return_inverse=True)
        return PointCloud(
            self.positions[idx],
            None if self.gt_class is None else self.gt_class[idx],
            inst,
        )


def _check_rotation(rotation: np.ndarray, tol: float = 1e-9) -> None:
    r = np.asarray(rotation, dtype=np.float64)
    if r.shape != (3, 3):
        raise GeometryError(f"rotation must be 3x3, got {r.shape}")
    if abs(np.linalg.det(r) - 1.0) > tol or np.max(np.abs(r @ r.T - np.eye(3))) > tol:
        raise GeometryError("rotation is not orthonormal with det +1")


@dataclass
class CameraView:
    """World-to-camera extrinsics ``x_cam = R x + t``, intrinsics Gamma, and the
    per-pixel depth and feature rasters (``depth[v, u]``, ``features[v, u, :]``)."""

    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    height: int
    width: int
    depth: np.ndarray | None = None
    features: np.ndarray | None = None

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(self.rotation)
        if self.depth is not None:
            self.depth = np.asarray(self.depth, dtype=np.float64)
            if self.depth.shape != (self.height, self.width):
                raise GeometryError(f"depth map shape {self.depth.shape} != ({self.height}, {self.width})")
            if np.any(self.depth < 0):
                raise GeometryError("depth entries must be >= 0")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def with_maps(self, depth=None, features=None) -> "CameraView":
        return replace(
            self,
            depth=self.depth if depth is None else depth,
            features=self.features if features is None else features,
        )


def pinhole_intrinsics(focal: float, width: int, height: int) -> np.ndarray:
    return np.array([[focal, 0.0, width / 2.0], [0.0, focal, height / 2.0], [0.0, 0.0, 1.0]])


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """Extrinsics (R, t) of a camera at ``eye`` looking at ``target``.

    Camera frame: +z forward, +x right, +y down (image rows grow downward).
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(fwd, up)) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    # re-orthonormalize so the det/orthonormality checks hold at 1e-9
    u, _, vt = np.linalg.svd(rot)
    rot = u @ vt
    return rot, -rot @ eye


@dataclass
class Projection:
    uv: np.ndarray  # (N, 2) continuous pixel coordinates
    depth: np.ndarray  # (N,) projected depth d
    valid: np.ndarray  # (N,) bool

    @property
    def pixels(self) -> np.ndarray:
        """Integer (col, row) = (floor u, floor v); meaningful where in bounds."""
        return np.floor(self.uv).astype(np.int64)


def project_points(positions: np.ndarray, view: CameraView) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole projection: returns (uv, d) with d [u v 1]^T = Gamma [R|t] [x y z 1]^T."""
    _check_rotation(view.rotation)
    cam = positions @ view.rotation.T + view.translation
    hom = cam @ view.intrinsics.T
    d = hom[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = hom[:, :2] / d[:, None]
    uv = np.where(np.isfinite(uv), uv, -1.0)
    return uv, d


def in_bounds(uv: np.ndarray, d: np.ndarray, height: int, width: int) -> np.ndarray:
    return (d > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < width) & (uv[:, 1] >= 0) & (uv[:, 1] < height)


def project(cloud: PointCloud, view: CameraView, tau_depth: float = DEFAULT_TAU_DEPTH) -> Projection:
    """Project points into ``view`` and keep pairs that are in bounds, in front of
    the camera, and agree with the view's depth map within ``tau_depth``."""
    if tau_depth <= 0:
        raise ConfigError(f"tau_depth must be positive, got {tau_depth}")
    if view.depth is None:
        raise GeometryError("project() needs a view with a depth map")
    uv, d = project_points(cloud.positions, view)
    valid = in_bounds(uv, d, view.height, view.width)
    px = np.floor(uv[valid]).astype(np.int64)
    sensed = view.depth[px[:, 1], px[:, 0]]
    ok = np.abs(d[valid] - sensed) < tau_depth
    valid[np.flatnonzero(valid)[~ok]] = False
    return Projection(uv, d, valid)


def unproject(uv: np.ndarray, d: np.ndarray, intrinsics: np.ndarray) -> np.ndarray:
    """Camera-frame points from pixel coordinates and projected depth."""
    hom = np.column_stack([uv * d[:, None], d])
    return np.linalg.solve(intrinsics, hom.T).T


def _splat_offsets(radius: int) -> np.ndarray:
    r = int(radius)
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    keep = dx * dx + dy * dy <= r * r
    return np.column_stack([dx[keep], dy[keep]])


def zbuffer(positions: np.ndarray, view: CameraView, splat_radius_px: int = 1):
    """Render (depth, point index) rasters; index -1 and depth 0 where empty."""
    if splat_radius_px < 0:
        raise ConfigError("splat_radius_px must be >= 0")
    h, w = view.height, view.width
    uv, d = project_points(positions, view)
    front = d > 0
    idx_pts = np.flatnonzero(front)
    base = np.floor(uv[front]).astype(np.int64)
    cols, rows, pids = [], [], []
    for dx, dy in _splat_offsets(splat_radius_px):
        cols.append(base[:, 0] + dx)
        rows.append(base[:, 1] + dy)
        pids.append(idx_pts)
    cols = np.concatenate(cols)
    rows = np.concatenate(rows)
    pids = np.concatenate(pids)
    keep = (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
    cols, rows, pids = cols[keep], rows[keep], pids[keep]
    flat = rows * w + cols
    # nearest point per pixel; ties go to the lower point index
    order = np.lexsort((pids, d[pids], flat))
    flat, pids = flat[order], pids[order]
    first = np.ones(flat.size, dtype=bool)
    first[1:] = flat[1:] != flat[:-1]
    depth = np.zeros(h * w)
    index = np.full(h * w, -1, dtype=np.int64)
    depth[flat[first]] = d[pids[first]]
    index[flat[first]] = pids[first]
    return depth.reshape(h, w), index.reshape(h, w)


def render_depth(cloud: PointCloud, view: CameraView, splat_radius_px: int = 1) -> np.ndarray:
    """Z-buffer depth map: per pixel the minimum projected depth of the points
    splatting onto it (disc of ``splat_radius_px``), 0 where nothing lands."""
    return zbuffer(cloud.positions, view, splat_radius_px)[0]


def sample_features(view: CameraView, proj: Projection) -> np.ndarray:
    """Nearest-pixel (floor) feature lookup; rows of invalid points are zero."""
    c = view.features.shape[2]
    out = np.zeros((proj.valid.size, c))
    px = proj.pixels[proj.valid]
    out[proj.valid] = view.features[px[:, 1], px[:, 0]]
    return out


def fuse_views(cloud: PointCloud, views, projections) -> tuple[np.ndarray, np.ndarray]:
    """Average the features sampled over each point's valid views.

    Returns (F_2d, hit_count); points without valid views keep a zero row.
    """
    if len(views) != len(projections):
        raise GeometryError("need exactly one projection per view")
    n = len(cloud)
    chans = {v.features.shape[2] for v in views}
    if len(chans) > 1:
        raise GeometryError(f"views disagree on feature width: {sorted(chans)}")
    c = chans.pop() if chans else 0
    acc = np.zeros((n, c))
    hits = np.zeros(n, dtype=np.int64)
    for view, proj in zip(views, projections):
        acc += sample_features(view, proj)
        hits += proj.valid
    fused = np.divide(acc, hits[:, None], out=np.zeros_like(acc), where=hits[:, None] > 0)
    return fused, hits


# --------------------------------------------------------------------------
# descriptor

@dataclass
class LocalShape:
    """Per-point eigen-analysis of the k-nearest-neighbor covariance."""

    normals: np.ndarray
    eigenvalues: np.ndarray  # (N, 3), descending
    neighbors: np.ndarray  # (N, k) indices, self first
    radius: np.ndarray  # distance to the k-th neighbor
    extra: dict = field(default_factory=dict)

    @property
    def curvature(self) -> np.ndarray:
        lam = self.eigenvalues
        s = lam.sum(axis=1)
        return np.divide(lam[:, 2], s, out=np.zeros_like(s), where=s > 0)


def local_shape(positions: np.ndarray, k: int) -> LocalShape:
    n = positions.shape[0]
    if k < 4:
        raise ConfigError(f"k must be >= 4, got {k}")
    if n <= k:
        raise ConfigError(f"need more than k={k} points, got {n}")
    tree = cKDTree(positions)
    dist, nbr = tree.query(positions, k=k)
    local = positions[nbr]
    centered = local - local.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals[:, ::-1], 0.0, None)
    normals = evecs[:, :, 0]
    return LocalShape(normals, evals, nbr, dist[:, -1])


def orient_normals(normals: np.ndarray, positions: np.ndarray, viewpoint=None) -> np.ndarray:
    """Flip normals toward ``viewpoint`` if given, else into the +z hemisphere."""
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    if viewpoint is not None:
        flip = np.sum(normals * (np.asarray(viewpoint) - positions), axis=1) < 0
    else:
        flip = normals[:, 2] < 0
    normals = normals.copy()
    normals[flip] *= -1.0
    return normals


def geometric_descriptor(cloud: PointCloud, k: int = 16, viewpoint=None) -> np.ndarray:
    """Frozen 9-channel per-point descriptor, see ``DESCRIPTOR_CHANNELS``.

    Normal (3), linearity/planarity/scattering (3), surface variation (1),
    height above the cloud's lowest point (1) and standardized log density
    log(k / r_k^3) (1).
    """
    pos = cloud.positions
    shape = local_shape(pos, k)
    lam = shape.eigenvalues
    l1 = np.where(lam[:, 0] > 0, lam[:, 0], 1.0)
    linearity = (lam[:, 0] - lam[:, 1]) / l1
    planarity = (lam[:, 1] - lam[:, 2]) / l1
    scattering = lam[:, 2] / l1
    degenerate = lam[:, 0] <= 0
    linearity[degenerate] = planarity[degenerate] = scattering[degenerate] = 0.0
    normals = orient_normals(shape.normals, pos, viewpoint)
    height = pos[:, 2] - pos[:, 2].min()
    r = np.maximum(shape.radius, 1e-9)
    density = np.log(k / r**3)
    sd = density.std()
    density = (density - density.mean()) / sd if sd > 0 else np.zeros_like(density)
    return np.column_stack([normals, linearity, planarity, scattering, shape.curvature, height, density])


def voxel_downsample(cloud: PointCloud, voxel: float = 0.02) -> tuple[PointCloud, np.ndarray]:
    """Keep the first point (by index) of every occupied voxel.

    Returns the reduced cloud and the kept indices into the input.
    """
    if voxel <= 0:
        raise ConfigError("voxel size must be positive")
    keys = np.floor(cloud.positions / voxel).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    kept = np.sort(first)
    return cloud.subset(kept), kept
