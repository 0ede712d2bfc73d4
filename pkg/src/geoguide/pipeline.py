"""Scene preprocessing: everything frozen that training consumes."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import geometry as geom
from .distill import InstanceMaskSet, usd_inputs
from .superpoint import SuperpointPartition, oversegment

BENCH_TAU_DEPTH = 0.02


@dataclass
class PreparedScene:
    geo: np.ndarray  # (N, C1) frozen geometric descriptor
    f2d: np.ndarray  # (N, C) fused 2D features
    hits: np.ndarray  # (N,) valid projection count
    part: SuperpointPartition
    masks: InstanceMaskSet
    gt_class: np.ndarray | None = None
    corrupted: np.ndarray | None = None  # (N,) fraction of valid views whose pixel was flagged or dropped
    positions: np.ndarray | None = None
    name: str = ""

    @property
    def n_points(self) -> int:
        return self.geo.shape[0]

    @cached_property
    def feature_hit(self) -> np.ndarray:
        """Points that received a nonzero fused 2D feature."""
        return (self.hits > 0) & (np.linalg.norm(self.f2d, axis=1) > 0)

    @cached_property
    def usd_inputs(self) -> np.ndarray:
        return usd_inputs(self.geo, self.f2d, self.part)


def prepare_scene(
    scene,
    rendered,
    tau_depth: float = BENCH_TAU_DEPTH,
    k: int = 16,
    theta_max: float = 15.0,
    min_size: int = 10,
    name: str = "",
    descriptor_k: int | None = None,
) -> PreparedScene:
    """Fuse rendered views onto the cloud, compute the descriptor, superpoints
    and per-point corruption bookkeeping for a synthetic scene.

    ``k`` drives normals and the superpoint graph; ``descriptor_k`` (default
    ``k``) sets the neighborhood of the geometric descriptor.
    """
    cloud = scene.cloud
    views = [r.view for r in rendered]
    projections = [geom.project(cloud, v, tau_depth) for v in views]
    f2d, hits = geom.fuse_views(cloud, views, projections)
    flagged = np.zeros(len(cloud))
    for r, proj in zip(rendered, projections):
        px = proj.pixels[proj.valid]
        flagged[proj.valid] += r.bleed[px[:, 1], px[:, 0]] | r.dropout[px[:, 1], px[:, 0]]
    corrupted = np.divide(flagged, hits, out=np.zeros_like(flagged), where=hits > 0)
    viewpoint = np.mean([v.center for v in views], axis=0) if views else None
    geo = geom.geometric_descriptor(cloud, k=descriptor_k or k, viewpoint=viewpoint)
    shape = geom.local_shape(cloud.positions, k)
    part = oversegment(cloud, shape.normals, theta_max, min_size, k, curvature=shape.curvature)
    return PreparedScene(
        geo=geo,
        f2d=f2d,
        hits=hits,
        part=part,
        masks=scene.masks,
        gt_class=cloud.gt_class,
        corrupted=corrupted,
        positions=cloud.positions,
        name=name,
    )


def build_split(
    seed: int,
    n_train: int,
    n_test: int,
    corruption=None,
    tau_depth: float = BENCH_TAU_DEPTH,
    descriptor_k: int | None = None,
    **spec_kwargs,
):
    """Train and held-out test scenes for one benchmark seed.

    Returns (train, test, table); scene i of the split uses scene seed
    ``1000 * seed + i``.
    """
    from . import synthbench as sb
    from .inference import TextEmbeddingTable

    out = []
    protos = None
    for i in range(n_train + n_test):
        scene_seed = 1000 * int(seed) + i
        spec = sb.random_spec(scene_seed, corruption=corruption, **spec_kwargs)
        scene = sb.generate(spec, scene_seed)
        rendered = sb.render_views(scene, scene_seed)
        out.append(prepare_scene(scene, rendered, tau_depth=tau_depth, name=f"scene_{scene_seed}", descriptor_k=descriptor_k))
        protos = scene.prototypes
    table = TextEmbeddingTable.from_prototypes(protos, list(spec.class_names))
    return out[:n_train], out[n_train:], table


# --------------------------------------------------------------------------
# the corrupted benchmark

BENCH_CORRUPTION = {"bleed_radius": 0.05, "dropout_frac": 0.3, "drift_sigma": 0.3}
BENCH_SPEC = {"points_per_m2": 1000.0}
BENCH_TRAIN = {"lr": 1e-2, "steps": 600, "standardize_geo_gram": True, "lambda_sim": 0.1}
BENCH_N_TRAIN, BENCH_N_TEST = 4, 2


def bench_config(**overrides):
    """TrainConfig used by the ablation benchmark, with optional overrides."""
    from .trainer import TrainConfig

    return TrainConfig.from_dict({**BENCH_TRAIN, **overrides})


def bench_split(seed: int, corruption=None, n_train: int = BENCH_N_TRAIN, n_test: int = BENCH_N_TEST):
    """(train, test, table) of the corrupted benchmark for one seed."""
    from .synthbench import Corruption

    cor = Corruption(**BENCH_CORRUPTION) if corruption is None else corruption
    return build_split(seed, n_train, n_test, cor, **BENCH_SPEC)
