"""Procedural scenes with controlled 2D feature corruption.

Scenes are built from planes, boxes, spheres and cylinders. Each class owns a
unit prototype vector that plays the part of the vision-language embedding;
per-view feature maps paint every pixel with the prototype of the instance
it sees and are then corrupted by boundary bleed, per-instance dropout and
per-(view, class) drift.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import SpecError
from .geometry import CameraView, PointCloud, look_at, voxel_downsample, zbuffer
from .distill import InstanceMaskSet

SHAPES = ("plane", "box", "sphere", "cylinder")

# class catalog used by random_spec: (name, shape, size, base height range)
# size: plane (sx, sy); box (sx, sy, sz); sphere (r,); cylinder (r, h)
CATALOG = (
    ("floor", "plane", (2.4, 2.4), (0.0, 0.0)),
    ("crate", "box", (0.45, 0.45, 0.35), (0.0, 0.0)),
    ("table", "box", (0.8, 0.5, 0.05), (0.7, 0.7)),
    ("shelf", "box", (0.6, 0.3, 0.2), (1.0, 1.0)),
    ("lamp", "sphere", (0.12,), (1.45, 1.6)),
)

@dataclass
class Primitive:
    shape: str
    center: tuple  # world position of the primitive's local origin
    scale: tuple
    class_id: int
    yaw: float = 0.0
    closed: bool = True  # sample the bottom face / cap

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise SpecError(f"unknown primitive shape {self.shape!r}")
        if any(s <= 0 for s in self.scale):
            raise SpecError(f"degenerate primitive scale {self.scale}")


@dataclass
class Corruption:
    bleed_radius: float = 0.0  # meters
    dropout_frac: float = 0.0
    drift_sigma: float = 0.0
    bleed_prob: float = 0.5


@dataclass
class SceneSpec:
    primitives: list
    n_classes: int
    points_per_m2: float = 2500.0
    points_per_instance: int | None = None
    camera_count: int = 20
    image_size: tuple = (128, 128)
    c: int = 16
    c1: int = 9
    corruption: Corruption = field(default_factory=Corruption)
    voxel: float | None = 0.02
    splat_radius_px: int = 1
    class_names: list | None = None
    camera_elevation: tuple = (25.0, 65.0)
    prototype_seed: int = 0

    def __post_init__(self):
        self.primitives = [p if isinstance(p, Primitive) else Primitive(**p) for p in self.primitives]
        if isinstance(self.corruption, dict):
            self.corruption = Corruption(**self.corruption)
        self.image_size = tuple(self.image_size)
        if not self.primitives:
            raise SpecError("a scene needs at least one primitive")
        if self.n_classes > self.c:
            raise SpecError(f"cannot fit {self.n_classes} orthogonal prototypes in {self.c} dims")
        for p in self.primitives:
            if not 0 <= p.class_id < self.n_classes:
                raise SpecError(f"class id {p.class_id} outside [0, {self.n_classes})")
        if self.camera_count < 1:
            raise SpecError("camera_count must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)


@dataclass
class Scene:
    cloud: PointCloud
    masks: InstanceMaskSet
    prototypes: np.ndarray
    instance_class: np.ndarray  # class of each instance id
    face: np.ndarray  # per-point primitive face id (box faces 0..5, else 0)
    spec: SceneSpec


# --------------------------------------------------------------------------
# surface sampling

def _rotz(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _count(area, spec, rng, share=1.0):
    if spec.points_per_instance is not None:
        return max(1, int(round(spec.points_per_instance * share)))
    lam = area * spec.points_per_m2
    return max(1, int(rng.poisson(lam)))


def _sample_box(sx, sy, sz, n, rng, closed):
    # faces: 0 +x, 1 -x, 2 +y, 3 -y, 4 +z (top), 5 -z (bottom); origin at bottom center
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy if closed else 0.0])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    a, b = rng.random(n), rng.random(n)
    pts = np.empty((n, 3))
    hx, hy = sx / 2, sy / 2
    for f in range(6):
        m = face == f
        aa, bb = a[m], b[m]
        if f in (0, 1):
            pts[m] = np.column_stack([np.full(m.sum(), hx if f == 0 else -hx), (aa - 0.5) * sy, bb * sz])
        elif f in (2, 3):
            pts[m] = np.column_stack([(aa - 0.5) * sx, np.full(m.sum(), hy if f == 2 else -hy), bb * sz])
        else:
            pts[m] = np.column_stack([(aa - 0.5) * sx, (bb - 0.5) * sy, np.full(m.sum(), sz if f == 4 else 0.0)])
    return pts, face


def _sample_sphere(r, n, rng):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * r + np.array([0.0, 0.0, r]), np.zeros(n, dtype=np.int64)


def _sample_cylinder(r, h, n, rng, closed):
    side, cap = 2 * np.pi * r * h, np.pi * r * r
    areas = np.array([side, cap, cap if closed else 0.0])
    part = rng.choice(3, size=n, p=areas / areas.sum())
    pts = np.empty((n, 3))
    m = part == 0
    th = rng.uniform(0, 2 * np.pi, m.sum())
    pts[m] = np.column_stack([r * np.cos(th), r * np.sin(th), rng.uniform(0, h, m.sum())])
    for k, z in ((1, h), (2, 0.0)):
        m = part == k
        rad = r * np.sqrt(rng.random(m.sum()))
        th = rng.uniform(0, 2 * np.pi, m.sum())
        pts[m] = np.column_stack([rad * np.cos(th), rad * np.sin(th), np.full(m.sum(), z)])
    return pts, part


def sample_primitive(prim: Primitive, spec: SceneSpec, rng: np.random.Generator):
    """Surface points (world frame) and face ids of one primitive."""
    s = prim.scale
    if prim.shape == "plane":
        n = _count(s[0] * s[1], spec, rng)
        pts = np.column_stack([(rng.random(n) - 0.5) * s[0], (rng.random(n) - 0.5) * s[1], np.zeros(n)])
        face = np.zeros(n, dtype=np.int64)
    elif prim.shape == "box":
        sx, sy, sz = s
        area = 2 * (sx * sz + sy * sz) + sx * sy * (2 if prim.closed else 1)
        pts, face = _sample_box(sx, sy, sz, _count(area, spec, rng), rng, prim.closed)
    elif prim.shape == "sphere":
        pts, face = _sample_sphere(s[0], _count(4 * np.pi * s[0] ** 2, spec, rng), rng)
    else:
        r, h = s
        area = 2 * np.pi * r * h + np.pi * r * r * (2 if prim.closed else 1)
        pts, face = _sample_cylinder(r, h, _count(area, spec, rng), rng, prim.closed)
    pts = pts @ _rotz(prim.yaw).T + np.asarray(prim.center, dtype=np.float64)
    return pts, face


def inside(prim: Primitive, pts: np.ndarray, margin: float = 0.0) -> np.ndarray:
    """Points strictly inside the primitive's solid (planes have no interior)."""
    local = (pts - np.asarray(prim.center, dtype=np.float64)) @ _rotz(prim.yaw)
    s = prim.scale
    if prim.shape == "plane":
        return np.zeros(len(pts), dtype=bool)
    if prim.shape == "box":
        return (
            (np.abs(local[:, 0]) < s[0] / 2 - margin)
            & (np.abs(local[:, 1]) < s[1] / 2 - margin)
            & (local[:, 2] > margin)
            & (local[:, 2] < s[2] - margin)
        )
    if prim.shape == "sphere":
        return np.linalg.norm(local - np.array([0.0, 0.0, s[0]]), axis=1) < s[0] - margin
    r, h = s
    return (np.hypot(local[:, 0], local[:, 1]) < r - margin) & (local[:, 2] > margin) & (local[:, 2] < h - margin)


def make_prototypes(n_classes: int, c: int, rng: np.random.Generator) -> np.ndarray:
    """Orthonormal class prototypes (rows), via QR of a Gaussian matrix."""
    if n_classes > c:
        raise SpecError(f"cannot fit {n_classes} orthogonal prototypes in {c} dims")
    q, r = np.linalg.qr(rng.normal(size=(c, n_classes)))
    q = q * np.sign(np.diag(r))
    return np.ascontiguousarray(q.T)


def generate(spec: SceneSpec, seed: int) -> Scene:
    """Sample a scene: labelled point cloud, instance masks, class prototypes."""
    rng = np.random.default_rng(seed)
    protos = make_prototypes(spec.n_classes, spec.c, np.random.default_rng([spec.prototype_seed, 7]))
    pts, cls, inst, faces = [], [], [], []
    for i, prim in enumerate(spec.primitives):
        p, f = sample_primitive(prim, spec, rng)
        # surfaces buried inside other solids would never be seen
        hidden = np.zeros(len(p), dtype=bool)
        for j, other in enumerate(spec.primitives):
            if j != i:
                hidden |= inside(other, p, margin=-1e-6)
        if hidden.all():
            hidden[:] = False
        p, f = p[~hidden], f[~hidden]
        pts.append(p)
        faces.append(f)
        cls.append(np.full(len(p), prim.class_id))
        inst.append(np.full(len(p), i))
    cloud = PointCloud(np.concatenate(pts), np.concatenate(cls), np.concatenate(inst))
    face = np.concatenate(faces)
    instance_class = np.array([p.class_id for p in spec.primitives], dtype=np.int64)
    if spec.voxel:
        kept_inst = cloud.gt_instance
        cloud, kept = voxel_downsample(cloud, spec.voxel)
        face = face[kept]
        # voxelization never empties an instance in practice, but keep ids honest
        instance_class = instance_class[np.unique(kept_inst[kept])]
    masks = InstanceMaskSet.from_labels(cloud.gt_instance)
    return Scene(cloud, masks, protos, instance_class, face, spec)


# --------------------------------------------------------------------------
# views

@dataclass
class RenderedView:
    view: CameraView
    instance_map: np.ndarray  # instance id per pixel, -1 empty
    bleed: np.ndarray  # bool per pixel
    dropout: np.ndarray  # bool per pixel
    dropped_instances: np.ndarray
    drift: np.ndarray  # (n_classes, C) additive offsets before renormalization


def camera_rig(cloud: PointCloud, spec: SceneSpec, rng: np.random.Generator):
    """Cameras on a sphere around the cloud's bounding sphere, looking at its centroid."""
    pos = cloud.positions
    centroid = pos.mean(axis=0)
    radius = float(np.max(np.linalg.norm(pos - centroid, axis=1)))
    h, w = spec.image_size
    dist = 2.2 * radius
    half_fov = np.arcsin(min(radius / dist, 0.999)) * 1.05
    focal = (min(h, w) / 2.0) / np.tan(half_fov)
    intr = np.array([[focal, 0.0, w / 2.0], [0.0, focal, h / 2.0], [0.0, 0.0, 1.0]])
    lo, hi = np.deg2rad(spec.camera_elevation)
    cams = []
    base = rng.uniform(0, 2 * np.pi)
    for i in range(spec.camera_count):
        az = base + 2 * np.pi * i / spec.camera_count + rng.uniform(-0.2, 0.2)
        el = rng.uniform(lo, hi)
        eye = centroid + dist * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        rot, t = look_at(eye, centroid)
        cams.append(CameraView(intr, rot, t, h, w))
    return cams


def _boundary_pixels(inst_map: np.ndarray) -> np.ndarray:
    b = np.zeros(inst_map.shape, dtype=bool)
    for axis in (0, 1):
        a = np.take(inst_map, np.arange(inst_map.shape[axis] - 1), axis=axis)
        c = np.take(inst_map, np.arange(1, inst_map.shape[axis]), axis=axis)
        diff = (a != c) & (a >= 0) & (c >= 0)
        if axis == 0:
            b[:-1] |= diff
            b[1:] |= diff
        else:
            b[:, :-1] |= diff
            b[:, 1:] |= diff
    return b


def _other_instance(inst_map, rows, cols, own):
    """For boundary pixels (rows, cols), an adjacent instance different from ``own``."""
    h, w = inst_map.shape
    out = np.full(rows.size, -1, dtype=np.int64)
    for dr, dc in ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)):
        rr = np.clip(rows + dr, 0, h - 1)
        cc = np.clip(cols + dc, 0, w - 1)
        cand = inst_map[rr, cc]
        take = (out < 0) & (cand >= 0) & (cand != own)
        out[take] = cand[take]
    return out


def render_view(scene: Scene, cam: CameraView, rng: np.random.Generator) -> RenderedView:
    spec = scene.spec
    cor = spec.corruption
    depth, index = zbuffer(scene.cloud.positions, cam, spec.splat_radius_px)
    inst_map = np.where(index >= 0, scene.cloud.gt_instance[np.maximum(index, 0)], -1)
    n_inst = len(scene.instance_class)
    n_cls, c = scene.prototypes.shape
    drift = rng.normal(scale=cor.drift_sigma, size=(n_cls, c)) if cor.drift_sigma > 0 else np.zeros((n_cls, c))
    feats_by_class = scene.prototypes + drift
    feats_by_class /= np.linalg.norm(feats_by_class, axis=1, keepdims=True)
    inst_feat = feats_by_class[scene.instance_class]

    source = inst_map.copy()
    bleed = np.zeros(inst_map.shape, dtype=bool)
    if cor.bleed_radius > 0:
        boundary = _boundary_pixels(inst_map)
        if boundary.any():
            dist, (br, bc) = ndimage.distance_transform_edt(~boundary, return_indices=True)
            focal = cam.intrinsics[0, 0]
            with np.errstate(divide="ignore"):
                radius_px = np.where(depth > 0, cor.bleed_radius * focal / np.maximum(depth, 1e-9), 0.0)
            cand = (inst_map >= 0) & (dist <= radius_px)
            rows, cols = np.nonzero(cand)
            own = inst_map[rows, cols]
            other = _other_instance(inst_map, br[rows, cols], bc[rows, cols], own)
            flip = (other >= 0) & (rng.random(rows.size) < cor.bleed_prob)
            source[rows[flip], cols[flip]] = other[flip]
            bleed[rows[flip], cols[flip]] = True

    features = np.zeros(inst_map.shape + (c,))
    covered = source >= 0
    features[covered] = inst_feat[source[covered]]
    dropped = np.flatnonzero(rng.random(n_inst) < cor.dropout_frac) if cor.dropout_frac > 0 else np.array([], dtype=np.int64)
    dropout = np.isin(inst_map, dropped) & (inst_map >= 0)
    features[dropout] = 0.0
    view = cam.with_maps(depth=depth, features=features)
    return RenderedView(view, inst_map, bleed, dropout, dropped, drift)


def render_views(scene: Scene, seed: int) -> list:
    """Render the scene's camera rig with corrupted feature maps."""
    rng = np.random.default_rng([seed, 1])
    cams = camera_rig(scene.cloud, scene.spec, rng)
    return [render_view(scene, cam, np.random.default_rng([seed, 2, i])) for i, cam in enumerate(cams)]


# --------------------------------------------------------------------------
# random layouts

def _footprint(name, shape, size, yaw):
    # radius of a circle enclosing the footprint at any yaw
    if shape == "box":
        return 0.5 * np.hypot(size[0], size[1])
    if shape in ("sphere", "cylinder"):
        return size[0]
    return 0.5 * np.hypot(*size)


def _height(shape, size):
    return {"plane": 0.0, "box": size[-1], "sphere": 2 * size[0], "cylinder": size[-1]}[shape]


def random_spec(
    seed: int,
    n_instances: tuple = (6, 12),
    n_classes: int = len(CATALOG),
    corruption: Corruption | None = None,
    **kwargs,
) -> SceneSpec:
    """Random room: one floor plus objects drawn from ``CATALOG`` on a
    non-overlapping layout. Every class appears when the instance count
    allows, and at least two objects share a class."""
    rng = np.random.default_rng([seed, 3])
    catalog = CATALOG[:n_classes]
    if len(catalog) < 2:
        raise SpecError("need at least two classes")
    floor_size = catalog[0][2]
    n_obj = int(rng.integers(n_instances[0], n_instances[1] + 1)) - 1
    prims = [Primitive("plane", (0.0, 0.0, 0.0), floor_size, 0)]
    placed = []
    object_classes = list(range(1, len(catalog)))
    # every object class once (when there is room), the rest at random
    if n_obj >= len(object_classes):
        picks = list(rng.permutation(object_classes))
        picks += list(rng.choice(object_classes, size=n_obj - len(picks), replace=True))
    else:
        picks = list(rng.choice(object_classes, size=n_obj, replace=True))
    if n_obj >= 2 and len(set(picks)) == len(picks):
        picks[-1] = picks[0]
    lim_x, lim_y = floor_size[0] / 2, floor_size[1] / 2
    for cid in picks:
        name, shape, size, (zlo, zhi) = catalog[cid]
        for _ in range(200):
            yaw = float(rng.uniform(0, np.pi))
            rad = _footprint(name, shape, size, yaw)
            x = float(rng.uniform(-lim_x + rad, lim_x - rad))
            y = float(rng.uniform(-lim_y + rad, lim_y - rad))
            z = float(rng.uniform(zlo, zhi))
            top = z + _height(shape, size)
            if all(
                np.hypot(x - px, y - py) > rad + pr + 0.05 or z > ptop + 0.05 or top < pz - 0.05
                for px, py, pz, ptop, pr in placed
            ):
                placed.append((x, y, z, top, rad))
                closed = z > 0.0
                prims.append(Primitive(shape, (x, y, z), tuple(size), int(cid), yaw, closed))
                break
    names = [c[0] for c in catalog]
    return SceneSpec(prims, len(catalog), corruption=corruption or Corruption(), class_names=names, **kwargs)
