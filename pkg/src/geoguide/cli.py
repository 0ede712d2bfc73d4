"""Command-line entry point: ``geoguide {gen,prep,train,eval,ablate,export-ply}``.

Every command reads one TOML or JSON config (``--config``), writes into
``--out`` and leaves a ``manifest.json`` there. Relative paths inside the
config resolve against the config file's directory.

Config sections (all optional unless a command needs them)::

    seed = 0
    [scene]       # gen: n_scenes plus SceneSpec fields for random_spec
    [corruption]  # gen: bleed_radius, dropout_frac, drift_sigma, bleed_prob
    [prep]        # prep: bundles (dir), tau_depth, k, theta_max, min_size
    [train]       # train/eval/ablate: TrainConfig fields
    [data]        # train, test, checkpoint, table paths
    [ablate]      # seeds, n_train, n_test, groups

Exit status: 0 on success, 2 on configuration errors, 3 on runtime errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import io as gio
from . import pipeline
from . import synthbench as sb
from . import tensorkit as tk
from . import trainer as tr
from .errors import ConfigError, GeoGuideError
from .inference import TextEmbeddingTable, classify, metrics

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("geoguide")

COMMANDS = ("gen", "prep", "train", "eval", "ablate", "export-ply")

# per-class colors for export-ply
_PALETTE = np.array(
    [[160, 160, 160], [214, 39, 40], [31, 119, 180], [44, 160, 44], [255, 127, 14],
     [148, 103, 189], [140, 86, 75], [227, 119, 194], [188, 189, 34], [23, 190, 207]]
)


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="geoguide", description="Geometry-guided 2D-to-3D feature distillation.")
    p.add_argument("--version", action="version", version=f"geoguide {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="TOML or JSON config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument(
        "--toggle", action="append", default=[], metavar="MODULE=on|off",
        help="switch a training module (SD, USD, IMR, IIRC); repeatable",
    )
    p.add_argument("-v", "--verbose", action="store_true")
    return p


# --------------------------------------------------------------------------
# config


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        if path.suffix.lower() == ".json":
            cfg = json.loads(text)
        else:
            cfg = tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a table")
    cfg["_base"] = str(path.parent.resolve())
    return cfg


def _parse_toggles(items) -> dict:
    out = {}
    for item in items:
        name, sep, state = item.partition("=")
        if not sep or state.lower() not in ("on", "off"):
            raise ConfigError(f"--toggle expects MODULE=on|off, got {item!r}")
        if name not in tr.MODULES:
            raise ConfigError(f"unknown module {name!r}; choose from {', '.join(tr.MODULES)}")
        out[name] = state.lower() == "on"
    return out


def apply_overrides(cfg: dict, seed=None, toggles=()) -> dict:
    cfg = json.loads(json.dumps(cfg))
    if seed is not None:
        if seed < 0:
            raise ConfigError("--seed must be nonnegative")
        cfg["seed"] = int(seed)
    cfg.setdefault("seed", 0)
    t = _parse_toggles(toggles)
    if t:
        train = cfg.setdefault("train", {})
        train["toggles"] = {**train.get("toggles", {}), **t}
    return cfg


def config_hash(cfg: dict) -> str:
    clean = {k: v for k, v in cfg.items() if not k.startswith("_")}
    return hashlib.sha256(json.dumps(clean, sort_keys=True).encode()).hexdigest()


def _path(cfg, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() else Path(cfg["_base"]) / p


def _need(cfg, section, key):
    try:
        return cfg[section][key]
    except (KeyError, TypeError):
        raise ConfigError(f"config needs [{section}] {key}") from None


def train_config(cfg: dict) -> tr.TrainConfig:
    section = dict(cfg.get("train", {}))
    section.setdefault("seed", cfg["seed"])
    if "toggles" in section:
        base = tr.TrainConfig().toggles
        section["toggles"] = {**base, **section["toggles"]}
    return tr.TrainConfig.from_dict(section)


def _prepared_dirs(cfg, value) -> list:
    values = value if isinstance(value, list) else [value]
    out = []
    for v in values:
        p = _path(cfg, v)
        if gio.is_prepared(p):
            out.append(p)
        elif p.is_dir():
            out += sorted(d for d in p.iterdir() if gio.is_prepared(d))
        else:
            raise ConfigError(f"no prepared scene at {p}")
    if not out:
        raise ConfigError(f"no prepared scenes found under {values}")
    return out


def _bundle_dirs(cfg, value) -> list:
    p = _path(cfg, value)
    if (p / "cloud.ply").exists():
        return [p]
    if not p.is_dir():
        raise ConfigError(f"no scene bundles at {p}")
    out = sorted(d for d in p.iterdir() if (d / "cloud.ply").exists() and (d / "views").is_dir())
    if not out:
        raise ConfigError(f"no scene bundles found under {p}")
    return out


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def write_manifest(out: Path, command: str, cfg: dict, **extra) -> None:
    manifest = {
        "command": command,
        "config_hash": config_hash(cfg),
        "config": {k: v for k, v in cfg.items() if not k.startswith("_")},
        "seed": cfg["seed"],
        "versions": {
            "geoguide": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        **extra,
    }
    write_json(out / "manifest.json", manifest)


def _corruption(d: dict) -> sb.Corruption:
    try:
        cor = sb.Corruption(**d)
    except TypeError as exc:
        raise ConfigError(f"bad [corruption] entry: {exc}") from exc
    if min(cor.bleed_radius, cor.dropout_frac, cor.drift_sigma) < 0 or not 0 <= cor.dropout_frac <= 1:
        raise ConfigError(f"corruption levels out of range: {d}")
    return cor


# --------------------------------------------------------------------------
# commands


def cmd_gen(cfg, out: Path):
    scene_cfg = dict(cfg.get("scene", {}))
    n_scenes = int(scene_cfg.pop("n_scenes", 1))
    n_instances = tuple(scene_cfg.pop("n_instances", (6, 12)))
    if n_scenes < 1:
        raise ConfigError("[scene] n_scenes must be >= 1")
    corruption = _corruption(cfg.get("corruption", {}))
    names = []
    for i in range(n_scenes):
        scene_seed = 1000 * cfg["seed"] + i
        try:
            spec = sb.random_spec(scene_seed, n_instances, corruption=corruption, **scene_cfg)
        except TypeError as exc:
            raise ConfigError(f"bad [scene] entry: {exc}") from exc
        scene = sb.generate(spec, scene_seed)
        rendered = sb.render_views(scene, scene_seed)
        name = f"scene_{scene_seed:06d}"
        gio.save_bundle(out / name, scene, rendered)
        names.append(name)
        log.info("wrote %s (%d points, %d views)", name, len(scene.cloud), len(rendered))
    # the shared prototype table, for eval/export
    (out / "prototypes.json").write_text((out / names[0] / "prototypes.json").read_text())
    return {"scenes": names}


def cmd_prep(cfg, out: Path):
    prep = dict(cfg.get("prep", {}))
    source = prep.pop("bundles", None) or cfg.get("data", {}).get("bundles")
    if source is None:
        raise ConfigError("config needs [prep] bundles (directory written by 'gen')")
    bundles = _bundle_dirs(cfg, source)
    opts = {k: prep[k] for k in ("tau_depth", "k", "theta_max", "min_size", "descriptor_k") if k in prep}
    unknown = set(prep) - set(opts)
    if unknown:
        raise ConfigError(f"unknown [prep] keys: {sorted(unknown)}")
    names = []
    for b in bundles:
        scene, rendered = gio.load_bundle(b)
        prepared = pipeline.prepare_scene(scene, rendered, name=b.name, **opts)
        gio.save_prepared(out / b.name, prepared)
        names.append(b.name)
        log.info("prepared %s: %d points, %d superpoints", b.name, prepared.n_points, prepared.part.n_superpoints)
    return {"scenes": names}


def cmd_train(cfg, out: Path):
    config = train_config(cfg)
    scenes = [gio.load_prepared(d) for d in _prepared_dirs(cfg, _need(cfg, "data", "train"))]
    resume = cfg.get("data", {}).get("resume")
    result = tr.train(scenes, config, out_dir=out, resume=_path(cfg, resume) if resume else None)
    write_json(out / "config.json", config.to_dict())
    return {"steps": config.steps, "best_step": result.best_step}


def _table(cfg) -> TextEmbeddingTable:
    p = _path(cfg, _need(cfg, "data", "table"))
    if not p.is_file():
        raise ConfigError(f"embedding table not found: {p}")
    return TextEmbeddingTable.from_json(p.read_text())


def _checkpoint(cfg) -> tk.ParamStore:
    p = _path(cfg, _need(cfg, "data", "checkpoint"))
    if not p.is_file():
        raise ConfigError(f"checkpoint not found: {p}")
    tensors = tk.load_tensors(p.read_bytes())
    return tk.ParamStore({k: v for k, v in tensors.items() if not k.startswith("state.")})


def cmd_eval(cfg, out: Path):
    config = train_config(cfg)
    table = _table(cfg)
    scenes = [gio.load_prepared(d) for d in _prepared_dirs(cfg, _need(cfg, "data", "test"))]
    source = cfg.get("data", {}).get("features", "adapter")
    if source == "fused":
        # classify the fused 2D features directly (clean-limit check)
        preds = [classify(s.f2d[s.feature_hit], table) for s in scenes]
        gts = [s.gt_class[s.feature_hit] for s in scenes]
        m = metrics(np.concatenate(preds), np.concatenate(gts), len(table.labels))
    elif source == "adapter":
        m = tr.evaluate(_checkpoint(cfg), scenes, table, config)
    else:
        raise ConfigError(f"[data] features must be 'adapter' or 'fused', got {source!r}")
    m["labels"] = table.labels
    write_json(out / "metrics.json", m)
    return {"mIoU": m["mIoU"]}


def cmd_ablate(cfg, out: Path):
    ab = dict(cfg.get("ablate", {}))
    seeds = [int(s) for s in ab.get("seeds", [cfg["seed"]])]
    groups = tuple(ab.get("groups", tr.GROUPS))
    bad = set(groups) - set(tr.GROUPS)
    if bad:
        raise ConfigError(f"unknown ablation groups {sorted(bad)}")
    n_train = int(ab.get("n_train", pipeline.BENCH_N_TRAIN))
    n_test = int(ab.get("n_test", pipeline.BENCH_N_TEST))
    cor = _corruption({**pipeline.BENCH_CORRUPTION, **cfg.get("corruption", {})})
    base = pipeline.bench_config(**cfg.get("train", {}))
    splits, table = [], None
    for s in seeds:
        train_scenes, test_scenes, table = pipeline.bench_split(s, cor, n_train, n_test)
        splits.append((s, train_scenes, test_scenes))
    result = tr.ablate(splits, base, table, groups, progress=lambda r: log.info("%s", r))
    (out / "ablation.csv").write_text(result.csv())
    (out / "ablation.txt").write_text(result.table() + "\n")
    write_json(out / "summary.json", result.summary)
    return {"groups": list(groups), "seeds": seeds}


def cmd_export_ply(cfg, out: Path):
    config = train_config(cfg)
    table = _table(cfg)
    params = _checkpoint(cfg)
    written = []
    for d in _prepared_dirs(cfg, _need(cfg, "data", "test")):
        scene = gio.load_prepared(d)
        pred = classify(tr.predict(params, scene, config), table)
        rgb = _PALETTE[pred % len(_PALETTE)]
        props = {"class": pred, "red": rgb[:, 0], "green": rgb[:, 1], "blue": rgb[:, 2]}
        gio.write_ply(out / f"{d.name}_pred.ply", scene.positions, props)
        if scene.gt_class is not None:
            write_json(out / f"{d.name}_metrics.json", metrics(pred, scene.gt_class, len(table.labels)))
        written.append(d.name)
    return {"scenes": written}


HANDLERS = {
    "gen": cmd_gen,
    "prep": cmd_prep,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "export-ply": cmd_export_ply,
}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"geoguide: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args.seed, args.toggle)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        info = HANDLERS[args.command](cfg, out)
        write_manifest(out, args.command, cfg, outputs=info)
    except ConfigError as exc:
        print(f"geoguide: config error: {exc}", file=sys.stderr)
        return 2
    except (GeoGuideError, OSError, ValueError) as exc:
        print(f"geoguide: error: {exc}", file=sys.stderr)
        return 3
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
