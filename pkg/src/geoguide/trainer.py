"""AdamW training of the adapter and the two auxiliary heads, evaluation and
the module ablation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import distill
from . import tensorkit as tk
from .errors import ConfigError, TrainingDiverged
from .inference import TextEmbeddingTable, classify, metrics

log = logging.getLogger(__name__)

MODULES = ("SD", "USD", "IMR", "IIRC")

# ablation groups: which modules are on
GROUPS = {
    "A": (),
    "D": ("SD",),
    "E": ("USD",),
    "F": ("IMR",),
    "G": ("USD", "IMR"),
    "H": ("IIRC",),
    "I": ("USD", "IMR", "IIRC"),
}


def toggles_for(group: str) -> dict:
    on = GROUPS[group]
    return {m: m in on for m in MODULES}


@dataclass
class TrainConfig:
    lambda_sp: float = 1.0
    lambda_mask: float = 1.0
    lambda_sim: float = 1.0
    lr: float = 1e-3
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 2000
    batch_size: int = 4
    seed: int = 0
    toggles: dict = field(default_factory=lambda: {"SD": False, "USD": True, "IMR": True, "IIRC": True})
    tau_depth: float = 0.05
    theta_max: float = 15.0
    mask_ratio_range: tuple = (0.3, 0.7)
    gram_cap: int = distill.DEFAULT_GRAM_CAP
    hidden: int | None = None
    activation: str = "relu"
    normalize_output: bool = False
    raw_gram: bool = False
    standardize_geo_gram: bool = False
    frozen_params: tuple = ()

    def __post_init__(self):
        self.mask_ratio_range = tuple(float(x) for x in self.mask_ratio_range)
        self.frozen_params = tuple(str(x) for x in self.frozen_params)
        unknown = set(self.toggles) - set(MODULES)
        if unknown:
            raise ConfigError(f"unknown module toggles: {sorted(unknown)}")
        self.toggles = {m: bool(self.toggles.get(m, False)) for m in MODULES}
        self.validate()

    def validate(self):
        if self.toggles["SD"] and self.toggles["USD"]:
            raise ConfigError("SD and USD are mutually exclusive")
        if min(self.lambda_sp, self.lambda_mask, self.lambda_sim) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        lo, hi = self.mask_ratio_range
        if not 0 < lo <= hi < 1:
            raise ConfigError(f"mask_ratio_range must satisfy 0 < lo <= hi < 1, got {self.mask_ratio_range}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.gram_cap < 2:
            raise ConfigError("gram_cap must be >= 2")

    @property
    def lambdas(self):
        return (self.lambda_sp, self.lambda_mask, self.lambda_sim)

    def with_toggles(self, **on) -> "TrainConfig":
        t = dict(self.toggles)
        t.update(on)
        return replace(self, toggles=t)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mask_ratio_range"] = list(self.mask_ratio_range)
        d["frozen_params"] = list(self.frozen_params)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


# --------------------------------------------------------------------------
# losses

def scene_loss(params, scene, config: TrainConfig, rng: np.random.Generator):
    """Taped total loss of one prepared scene and its LossReport."""
    t = config.toggles
    diag = {}
    f_sem = tk.forward_adapter(scene.geo, params, config.activation, config.normalize_output)
    hit = scene.feature_hit
    if t["USD"]:
        w = distill.usd_weights(scene.geo, scene.f2d, scene.part, params, scene.usd_inputs)
        l_sp = distill.loss_sp(f_sem, scene.f2d, scene.part, w, hit, diag)
        diag["mean_weight"] = float(np.mean(tk.value(w)))
    elif t["SD"]:
        l_sp = distill.loss_sp(f_sem, scene.f2d, scene.part, None, hit, diag)
    else:
        l_sp = distill.loss_pointwise(f_sem, scene.f2d, hit)
    l_mask = 0.0
    if t["IMR"]:
        l_mask = distill.loss_mask(f_sem, scene.masks, params, rng, config.mask_ratio_range, diag)
    l_sim = 0.0
    if t["IIRC"]:
        l_sim = distill.loss_sim(
            scene.geo, f_sem, scene.part, scene.masks, config.gram_cap, rng, not config.raw_gram, diag,
            config.standardize_geo_gram,
        )
    return distill.loss_final(l_sp, l_mask, l_sim, config.lambdas, diag)


def batch_loss(params, scenes, config: TrainConfig, step: int):
    rng = np.random.default_rng([config.seed, step])
    n = len(scenes)
    pick = rng.choice(n, size=config.batch_size, replace=n < config.batch_size)
    totals, reports = [], []
    for slot, i in enumerate(pick):
        total, report = scene_loss(params, scenes[i], config, np.random.default_rng([config.seed, step, slot]))
        totals.append(total)
        reports.append(report)
    b = len(totals)
    loss = tk.weighted_sum([1.0 / b] * b, totals)
    report = distill.LossReport(
        l_sp=float(np.mean([r.l_sp for r in reports])),
        l_mask=float(np.mean([r.l_mask for r in reports])),
        l_sim=float(np.mean([r.l_sim for r in reports])),
        l_final=float(tk.value(loss)),
        lambdas=config.lambdas,
        diagnostics=_mean_diag([r.diagnostics for r in reports]),
    )
    return loss, report


def _mean_diag(diags):
    out = {}
    for key in sorted(set().union(*diags)):
        vals = [d[key] for d in diags if key in d]
        if all(isinstance(v, bool) for v in vals):
            out[key] = any(vals)
        else:
            out[key] = float(np.mean(vals))
    return out


# --------------------------------------------------------------------------
# optimizer

class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params: tk.ParamStore, lr, beta1, beta2, eps, weight_decay, frozen=()):
        self.lr, self.beta1, self.beta2, self.eps, self.wd = lr, beta1, beta2, eps, weight_decay
        self.frozen = frozenset(frozen)
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: tk.ParamStore, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name in params.names():
            if name in self.frozen:
                continue
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            p = params[name]
            params[name] = p - self.lr * (update + self.wd * p)

    def state_tensors(self) -> dict:
        out = {"state.step": np.array([[float(self.t)]])}
        for k in self.m:
            out[f"state.m.{k}"] = self.m[k]
            out[f"state.v.{k}"] = self.v[k]
        return out

    def load_state(self, tensors: dict) -> None:
        self.t = int(tensors["state.step"][0, 0])
        for k in self.m:
            self.m[k] = np.array(tensors[f"state.m.{k}"])
            self.v[k] = np.array(tensors[f"state.v.{k}"])


# --------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: tk.ParamStore
    log: list
    best_params: tk.ParamStore
    best_step: int


def init_params(scenes, config: TrainConfig) -> tk.ParamStore:
    c1 = scenes[0].geo.shape[1]
    c = scenes[0].f2d.shape[1]
    return tk.ParamStore.init(c1, c, config.hidden, seed=config.seed)


def _report_line(step, report):
    return {"step": step, **json.loads(report.to_json())}


def train(scenes, config: TrainConfig, out_dir=None, params: tk.ParamStore | None = None, resume=None) -> TrainResult:
    """Run ``config.steps`` AdamW steps over randomly drawn scene batches.

    ``resume`` is a checkpoint written by a previous run (``state.ggpk``);
    training continues from its step with identical subsequent batches.
    """
    if not scenes:
        raise ConfigError("train() needs at least one scene")
    config.validate()
    params = (params.copy() if params is not None else init_params(scenes, config))
    unknown = set(config.frozen_params) - set(params.names())
    if unknown:
        raise ConfigError(f"frozen_params names unknown tensors: {sorted(unknown)}")
    opt = AdamW(params, config.lr, config.beta1, config.beta2, config.adam_eps, config.weight_decay, config.frozen_params)
    start = 0
    if resume is not None:
        tensors = tk.load_tensors(Path(resume).read_bytes())
        params = tk.ParamStore({k: v for k, v in tensors.items() if not k.startswith("state.")})
        opt.load_state(tensors)
        start = opt.t
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "a" if resume is not None else "w")
    history = []
    best, best_step, best_loss = params.copy(), start, math.inf
    last = None
    try:
        for step in range(start, config.steps):
            tape = tk.Tape()
            leaves = tape.watch(params)
            loss, report = batch_loss(leaves, scenes, config, step)
            if not np.isfinite(report.l_final):
                raise TrainingDiverged(step, last)
            grads = tape.backward(loss) if isinstance(loss, tk.Var) else {k: np.zeros_like(v) for k, v in params.items()}
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(step, last)
            if report.l_final < best_loss:
                best, best_step, best_loss = params.copy(), step, report.l_final
            opt.step(params, grads)
            last = report
            line = _report_line(step, report)
            history.append(line)
            if log_fh is not None:
                log_fh.write(json.dumps(line, sort_keys=True) + "\n")
    finally:
        if log_fh is not None:
            log_fh.close()
    if out is not None:
        params.save(out / "final.ggpk")
        best.save(out / "best.ggpk")
        params.save(out / "state.ggpk", extra=opt.state_tensors())
    return TrainResult(params, history, best, best_step)


# --------------------------------------------------------------------------
# evaluation

def predict(params, scene, config: TrainConfig | None = None):
    config = config or TrainConfig()
    return tk.forward_adapter(scene.geo, params, config.activation, config.normalize_output)


def evaluate(params, scenes, table: TextEmbeddingTable, config: TrainConfig | None = None) -> dict:
    """Metrics of the adapter's predictions pooled over all points of all scenes."""
    preds, gts = [], []
    for s in scenes:
        preds.append(classify(predict(params, s, config), table))
        gts.append(s.gt_class)
    return metrics(np.concatenate(preds), np.concatenate(gts), table.embeddings.shape[0])


@dataclass
class AblationResult:
    rows: list  # {group, seed, mIoU, mAcc}
    summary: dict  # group -> {mIoU_mean, mIoU_std, mAcc_mean, mAcc_std}

    def csv(self) -> str:
        lines = ["group,seed,mIoU,mAcc"]
        for r in self.rows:
            lines.append(f"{r['group']},{r['seed']},{r['mIoU']:.6f},{r['mAcc']:.6f}")
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        lines = [f"{'group':<6}{'modules':<16}{'mIoU':>18}{'mAcc':>18}"]
        for g, s in self.summary.items():
            mods = "+".join(GROUPS[g]) or "pointwise"
            lines.append(
                f"{g:<6}{mods:<16}{s['mIoU_mean']:>10.4f}±{s['mIoU_std']:.4f}{s['mAcc_mean']:>11.4f}±{s['mAcc_std']:.4f}"
            )
        return "\n".join(lines)


def ablate(benchmarks, base_config: TrainConfig, table: TextEmbeddingTable, groups=tuple(GROUPS), progress=None) -> AblationResult:
    """Train every group on every (train, test) benchmark split.

    ``benchmarks`` is a list of ``(seed, train_scenes, test_scenes)``; a group
    run uses ``base_config`` with the group's toggles and ``seed``.
    """
    rows = []
    for seed, train_scenes, test_scenes in benchmarks:
        for g in groups:
            cfg = replace(base_config, toggles=toggles_for(g), seed=int(seed))
            result = train(train_scenes, cfg)
            m = evaluate(result.params, test_scenes, table, cfg)
            rows.append({"group": g, "seed": int(seed), "mIoU": m["mIoU"], "mAcc": m["mAcc"]})
            if progress is not None:
                progress(rows[-1])
    summary = {}
    for g in groups:
        r = [x for x in rows if x["group"] == g]
        miou = np.array([x["mIoU"] for x in r])
        macc = np.array([x["mAcc"] for x in r])
        summary[g] = {
            "mIoU_mean": float(miou.mean()),
            "mIoU_std": float(miou.std()),
            "mAcc_mean": float(macc.mean()),
            "mAcc_std": float(macc.std()),
        }
    return AblationResult(rows, summary)
