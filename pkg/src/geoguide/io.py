"""File formats: ASCII PLY clouds, raw f32 matrices with JSON sidecars, scene
bundles and prepared-scene caches."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .distill import InstanceMaskSet
from .errors import ConfigError, StateError
from .geometry import CameraView, PointCloud
from .inference import TextEmbeddingTable
from .superpoint import SuperpointPartition

_PLY_TYPES = {"float": np.float64, "double": np.float64, "uint": np.int64, "int": np.int64, "uchar": np.int64}


# --------------------------------------------------------------------------
# PLY


def write_ply(path, positions, props: dict | None = None) -> None:
    """ASCII PLY with double x, y, z followed by integer per-point properties
    (written in ``props`` order; ``red``/``green``/``blue`` as uchar)."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = positions.shape[0]
    props = {k: np.asarray(v, dtype=np.int64).reshape(-1) for k, v in (props or {}).items()}
    for k, v in props.items():
        if v.size != n:
            raise ConfigError(f"PLY property {k!r} has {v.size} values for {n} points")
    lines = ["ply", "format ascii 1.0", f"element vertex {n}"]
    lines += [f"property double {a}" for a in "xyz"]
    lines += [f"property {'uchar' if k in ('red', 'green', 'blue') else 'uint'} {k}" for k in props]
    lines.append("end_header")
    cols = [positions[:, i] for i in range(3)] + list(props.values())
    body = []
    for j in range(n):
        body.append(" ".join([repr(float(c[j])) for c in cols[:3]] + [str(int(c[j])) for c in cols[3:]]))
    Path(path).write_text("\n".join(lines + body) + "\n")


def read_ply(path) -> tuple[np.ndarray, dict]:
    """Positions (N, 3) and a dict of the remaining vertex properties."""
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise StateError(f"{path}: not a PLY file")
    names, types, n, i = [], [], None, 1
    while i < len(text) and text[i].strip() != "end_header":
        tok = text[i].split()
        if tok[:1] == ["format"] and tok[1] != "ascii":
            raise StateError(f"{path}: only ASCII PLY is supported")
        if tok[:2] == ["element", "vertex"]:
            n = int(tok[2])
        elif tok[:1] == ["property"]:
            if tok[1] not in _PLY_TYPES:
                raise StateError(f"{path}: unsupported property type {tok[1]!r}")
            types.append(_PLY_TYPES[tok[1]])
            names.append(tok[2])
        i += 1
    if n is None or i == len(text):
        raise StateError(f"{path}: malformed PLY header")
    rows = text[i + 1 : i + 1 + n]
    if len(rows) != n:
        raise StateError(f"{path}: expected {n} vertices, found {len(rows)}")
    data = np.array([r.split() for r in rows], dtype=np.float64).reshape(n, len(names))
    cols = {name: data[:, k].astype(t) for k, (name, t) in enumerate(zip(names, types))}
    try:
        pos = np.column_stack([cols.pop("x"), cols.pop("y"), cols.pop("z")])
    except KeyError as exc:
        raise StateError(f"{path}: PLY lacks coordinate {exc}") from exc
    return pos, cols


def save_cloud(path, cloud: PointCloud, extra: dict | None = None) -> None:
    props = {}
    if cloud.gt_class is not None:
        props["class"] = cloud.gt_class
    if cloud.gt_instance is not None:
        props["instance"] = cloud.gt_instance
    props.update(extra or {})
    write_ply(path, cloud.positions, props)


def load_cloud(path) -> PointCloud:
    pos, props = read_ply(path)
    return PointCloud(pos, props.get("class"), props.get("instance"))


# --------------------------------------------------------------------------
# raw matrices


def write_matrix(path, array, role: str) -> None:
    """``path`` gets little-endian f32 rows; ``path + '.json'`` the sidecar."""
    a = np.asarray(array, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ConfigError(f"write_matrix needs a 1-D or 2-D array, got shape {a.shape}")
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(a, dtype="<f4").tobytes())
    Path(str(path) + ".json").write_text(json.dumps({"rows": a.shape[0], "cols": a.shape[1], "role": role}))


def read_matrix(path) -> tuple[np.ndarray, str]:
    path = Path(path)
    side = Path(str(path) + ".json")
    if not side.exists():
        raise StateError(f"missing sidecar {side}")
    meta = json.loads(side.read_text())
    raw = path.read_bytes()
    rows, cols = int(meta["rows"]), int(meta["cols"])
    if len(raw) != 4 * rows * cols:
        raise StateError(f"{path}: {len(raw)} bytes, sidecar expects {rows}x{cols} f32")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(rows, cols), meta.get("role", "")


# --------------------------------------------------------------------------
# scene bundles


def save_bundle(out_dir, scene, rendered) -> None:
    """cloud.ply, masks.json, prototypes.json, corruption.json, spec.json and
    per-view feature / depth / instance / corruption-flag matrices plus camera JSON."""
    from dataclasses import asdict

    out = Path(out_dir)
    (out / "views").mkdir(parents=True, exist_ok=True)
    save_cloud(out / "cloud.ply", scene.cloud)
    (out / "masks.json").write_text(scene.masks.to_json())
    names = scene.spec.class_names or [f"class_{i}" for i in range(scene.prototypes.shape[0])]
    (out / "prototypes.json").write_text(TextEmbeddingTable.from_prototypes(scene.prototypes, list(names)).to_json())
    (out / "corruption.json").write_text(json.dumps(asdict(scene.spec.corruption), sort_keys=True))
    (out / "spec.json").write_text(json.dumps(scene.spec.to_dict(), sort_keys=True))
    for i, r in enumerate(rendered):
        v = r.view
        stem = out / "views" / f"view_{i:03d}"
        h, w = v.height, v.width
        write_matrix(f"{stem}_features.bin", v.features.reshape(h * w, -1), "features")
        write_matrix(f"{stem}_depth.bin", v.depth, "depth")
        write_matrix(f"{stem}_instance.bin", r.instance_map, "instance")
        write_matrix(f"{stem}_flags.bin", r.bleed.astype(np.int64) + 2 * r.dropout.astype(np.int64), "corruption")
        Path(f"{stem}_camera.json").write_text(
            json.dumps(
                {
                    "intrinsics": v.intrinsics.tolist(),
                    "rotation": v.rotation.tolist(),
                    "translation": v.translation.tolist(),
                    "height": h,
                    "width": w,
                }
            )
        )


def load_bundle(bundle_dir):
    """Inverse of :func:`save_bundle`: returns (scene, rendered views).

    Feature and depth maps come back at f32 precision.
    """
    from .synthbench import RenderedView, Scene, SceneSpec

    d = Path(bundle_dir)
    if not (d / "cloud.ply").exists():
        raise StateError(f"{d} is not a scene bundle (no cloud.ply)")
    cloud = load_cloud(d / "cloud.ply")
    masks = InstanceMaskSet.from_json((d / "masks.json").read_text())
    table = TextEmbeddingTable.from_json((d / "prototypes.json").read_text())
    spec = SceneSpec.from_dict(json.loads((d / "spec.json").read_text()))
    n_inst = len(masks)
    instance_class = np.zeros(n_inst, dtype=np.int64)
    for i, m in enumerate(masks.masks):
        instance_class[i] = cloud.gt_class[m[0]] if cloud.gt_class is not None else 0
    scene = Scene(cloud, masks, table.embeddings, instance_class, np.zeros(len(cloud), dtype=np.int64), spec)
    rendered = []
    for cam_path in sorted((d / "views").glob("view_*_camera.json")):
        stem = str(cam_path)[: -len("_camera.json")]
        cam = json.loads(cam_path.read_text())
        h, w = cam["height"], cam["width"]
        feats = read_matrix(f"{stem}_features.bin")[0].reshape(h, w, -1)
        depth = read_matrix(f"{stem}_depth.bin")[0]
        inst = read_matrix(f"{stem}_instance.bin")[0].astype(np.int64)
        flags = read_matrix(f"{stem}_flags.bin")[0].astype(np.int64)
        view = CameraView(
            np.array(cam["intrinsics"]), np.array(cam["rotation"]), np.array(cam["translation"]), h, w, depth, feats
        )
        dropped = np.unique(inst[(flags & 2) > 0])
        rendered.append(RenderedView(view, inst, (flags & 1) > 0, (flags & 2) > 0, dropped, np.zeros((0, feats.shape[2]))))
    return scene, rendered


# --------------------------------------------------------------------------
# prepared scenes


def save_prepared(out_dir, scene) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix(out / "geo.bin", scene.geo, "geometric_descriptor")
    write_matrix(out / "f2d.bin", scene.f2d, "fused_2d_features")
    write_matrix(out / "hits.bin", scene.hits, "view_hits")
    (out / "partition.json").write_text(scene.part.to_json())
    (out / "masks.json").write_text(scene.masks.to_json())
    if scene.corrupted is not None:
        write_matrix(out / "corrupted.bin", scene.corrupted, "corrupted_fraction")
    positions = scene.positions if scene.positions is not None else np.zeros((scene.n_points, 3))
    save_cloud(out / "cloud.ply", PointCloud(positions, scene.gt_class))
    (out / "prepared.json").write_text(json.dumps({"name": scene.name, "n_points": scene.n_points}))


def is_prepared(path) -> bool:
    return (Path(path) / "prepared.json").exists()


def load_prepared(path):
    from .pipeline import PreparedScene

    d = Path(path)
    if not is_prepared(d):
        raise StateError(f"{d} is not a prepared scene (no prepared.json)")
    meta = json.loads((d / "prepared.json").read_text())
    pos, props = read_ply(d / "cloud.ply")
    corrupted = read_matrix(d / "corrupted.bin")[0][:, 0] if (d / "corrupted.bin").exists() else None
    return PreparedScene(
        geo=read_matrix(d / "geo.bin")[0],
        f2d=read_matrix(d / "f2d.bin")[0],
        hits=read_matrix(d / "hits.bin")[0][:, 0],
        part=SuperpointPartition.from_json((d / "partition.json").read_text()),
        masks=InstanceMaskSet.from_json((d / "masks.json").read_text()),
        gt_class=props.get("class"),
        corrupted=corrupted,
        positions=pos,
        name=meta.get("name", d.name),
    )
