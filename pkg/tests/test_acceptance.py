"""End-to-end acceptance checks, one test per criterion.

Criteria 4-8 train real models on the synthetic benchmark and take tens of
minutes in total on one CPU core.
"""

import json
import time

import numpy as np
import pytest

from geoguide import cli, distill, pipeline
from geoguide import synthbench as sb
from geoguide import tensorkit as tk
from geoguide import trainer as tr
from geoguide.geometry import CameraView, PointCloud, look_at, pinhole_intrinsics, project, zbuffer
from geoguide.inference import classify, metrics
from geoguide.superpoint import broadcast, pool_mean, pool_weighted

import oracles
from conftest import random_instance, random_masks, random_params, random_partition

pytestmark = pytest.mark.slow

N_SEEDS = 5
LAMBDAS = (1.0, 0.7, 0.3)


# --------------------------------------------------------------------------
# 1. gradient correctness


def _four_losses(inst, p, seed):
    geo, f2d, part, masks = inst["geo"], inst["f2d"], inst["part"], inst["masks"]
    f_sem = tk.forward_adapter(geo, p)
    l_sp = distill.loss_sp(f_sem, f2d, part, distill.usd_weights(geo, f2d, part, p))
    l_mask = distill.loss_mask(f_sem, masks, p, np.random.default_rng(seed))
    l_sim = distill.loss_sim(geo, f_sem, part, masks)
    total, _ = distill.loss_final(l_sp, l_mask, l_sim, LAMBDAS)
    return [l_sp, l_mask, l_sim, total]


def _kink_free_instance(rng, h):
    """Random instance whose hidden pre-activations all sit well clear of the
    ReLU kink, so a central difference of step ``h`` never straddles it."""
    while True:
        inst = random_instance(rng, c1=9, c=8)
        p = inst["params"]
        pre = inst["geo"] @ p["adapter.w1"] + p["adapter.b1"]
        # one FD step moves a pre-activation by at most h * max(1, |geo|)
        if np.abs(pre).min() > 10 * h * max(1.0, np.abs(inst["geo"]).max()):
            return inst


def test_criterion_1_gradients_match_finite_differences():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    h = 1e-5
    worst = np.zeros(4)
    for trial in range(100):
        inst = _kink_free_instance(rng, h)
        params = inst["params"]
        tape = tk.Tape()
        leaves = tape.watch(params)
        outs = _four_losses(inst, leaves, trial)
        analytic = [tape.backward(o) for o in outs]
        numeric = [{k: np.zeros_like(v) for k, v in params.items()} for _ in outs]
        for name in params.names():
            arr = params[name]
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + h
                plus = [float(tk.value(x)) for x in _four_losses(inst, params, trial)]
                arr[idx] = orig - h
                minus = [float(tk.value(x)) for x in _four_losses(inst, params, trial)]
                arr[idx] = orig
                for i in range(4):
                    numeric[i][name][idx] = (plus[i] - minus[i]) / (2 * h)
        for i in range(4):
            # central-difference round-off is ~ eps * |L| / h ~ 2e-11 |L|; the
            # denominator floor keeps that noise well under the tolerance
            floor = 1e-6 * max(1.0, abs(float(tk.value(outs[i]))))
            for name in params.names():
                a, n = analytic[i][name], numeric[i][name]
                rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
                worst[i] = max(worst[i], rel.max())
    elapsed = time.perf_counter() - start
    print(f"max rel error sp/mask/sim/final: {worst}, {elapsed:.1f}s")
    assert np.all(worst <= 1e-4)
    assert elapsed < 120


# --------------------------------------------------------------------------
# 2. oracle equivalence


def _random_view(rng, h=24, w=32):
    eye = rng.uniform(-3, 3, 3) + np.array([0, 0, 4.0])
    rot, t = look_at(eye, rng.uniform(-0.3, 0.3, 3))
    return CameraView(pinhole_intrinsics(rng.uniform(15, 40), w, h), rot, t, h, w)


def test_criterion_2_oracle_equivalence():
    rng = np.random.default_rng(77)
    n_inst = 50
    for _ in range(n_inst):
        # projection validity against a depth map that is right, wrong or empty
        pts = rng.uniform(-1.5, 1.5, size=(40, 3))
        view = _random_view(rng)
        depth, _ = zbuffer(pts, view, 0)
        depth = depth + rng.choice([0.0, 0.0, 0.3, -0.004], size=depth.shape)
        depth = np.maximum(depth, 0.0)
        view = view.with_maps(depth=depth)
        tau = rng.uniform(0.01, 0.1)
        got = project(PointCloud(pts), view, tau).valid
        ref = oracles.projection_valid(pts, view.rotation, view.translation, view.intrinsics, depth, tau)
        np.testing.assert_array_equal(got, ref)

        n, n_q = int(rng.integers(5, 33)), int(rng.integers(1, 9))
        n_q = min(n_q, n)
        part = random_partition(rng, n, n_q)
        f = rng.normal(size=(n, 6))
        w = rng.random(n)
        assert np.max(np.abs(pool_mean(f, part) - oracles.pool_mean(f, part.assignment, n_q))) <= 1e-12
        assert np.max(np.abs(pool_weighted(f, w, part) - oracles.pool_weighted(f, w, part.assignment, n_q))) <= 1e-12

        params = random_params(rng, c1=5, c=6)
        kept = np.sort(rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False))
        got = distill.imr_reconstruct(f, kept, params)
        ref = oracles.imr_reconstruct(f, kept, params["mask.w"], params["mask.b"])
        assert np.max(np.abs(got - ref)) <= 1e-12

        n_m = int(rng.integers(2, 5))
        if n >= 4 * n_m:
            masks = random_masks(rng, n, n_m)
            geo = np.abs(rng.normal(size=(n, 5)))
            got = distill.loss_sim(geo, f, part, masks)
            ref = oracles.loss_sim(geo, f, part.assignment, n_q, [list(m) for m in masks.masks])
            assert abs(float(got) - ref) <= 1e-12

        k = int(rng.integers(2, 6))
        gt, pred = rng.integers(0, k, 100), rng.integers(0, k, 100)
        m = metrics(pred, gt, k)
        miou, macc = oracles.metrics(pred.tolist(), gt.tolist(), k)
        assert abs(m["mIoU"] - miou) <= 1e-12 and abs(m["mAcc"] - macc) <= 1e-12


# --------------------------------------------------------------------------
# 3. zero cases


def test_criterion_3_zero_cases():
    rng = np.random.default_rng(5)
    for _ in range(50):
        inst = random_instance(rng)
        f2d, part, geo = inst["f2d"], inst["part"], inst["geo"]
        w = tk.value(distill.usd_weights(geo, f2d, part, inst["params"]))
        target = broadcast(pool_weighted(f2d, w, part), part)
        f_sem = target * rng.uniform(0.05, 20.0, size=(len(f2d), 1))
        assert abs(float(distill.loss_sp(f_sem, f2d, part, w))) <= 1e-12

        sem_same = np.hstack([geo * rng.uniform(0.1, 10), np.zeros((len(geo), 7))])
        diag = {}
        distill.loss_sim(geo, sem_same, part, inst["masks"], diagnostics=diag)
        assert diag["sim_mask_term"] <= 1e-12

        c = rng.uniform(1e-3, 1.0)
        f = rng.normal(size=(len(f2d), 5))
        np.testing.assert_allclose(pool_weighted(f, np.full(len(f), c), part), pool_mean(f, part), rtol=0, atol=1e-15)


# --------------------------------------------------------------------------
# 4. clean-limit ceiling


def test_criterion_4_clean_limit():
    start = time.perf_counter()
    train, test, table = pipeline.build_split(100, pipeline.BENCH_N_TRAIN, pipeline.BENCH_N_TEST, None, **pipeline.BENCH_SPEC)
    preds, gts = [], []
    for s in train + test:
        hit = s.feature_hit
        preds.append(classify(s.f2d[hit], table))
        gts.append(s.gt_class[hit])
    fused = metrics(np.concatenate(preds), np.concatenate(gts), len(table.labels))["mIoU"]
    cfg = pipeline.bench_config(steps=2000, lambda_mask=0.0, lambda_sim=0.0, toggles=tr.toggles_for("E"))
    result = tr.train(train, cfg)
    trained = tr.evaluate(result.params, test, table, cfg)["mIoU"]
    elapsed = time.perf_counter() - start
    print(f"fused mIoU {fused:.4f}, trained mIoU {trained:.4f}, {elapsed:.0f}s")
    assert fused >= 0.99
    assert trained >= 0.95
    assert elapsed < 600


# --------------------------------------------------------------------------
# 5 and 6. ablation on the corrupted benchmark, USD diagnostic


def _usd_gap(params, scenes):
    gaps = []
    for s in scenes:
        w = tk.value(distill.usd_weights(s.geo, s.f2d, s.part, params, s.usd_inputs))[:, 0]
        flagged = s.corrupted > 0.5
        ok = s.feature_hit
        if (ok & flagged).any() and (ok & ~flagged).any():
            gaps.append(w[ok & ~flagged].mean() - w[ok & flagged].mean())
    return float(np.mean(gaps))


@pytest.fixture(scope="module")
def ablation():
    start = time.perf_counter()
    base = pipeline.bench_config()
    rows, gaps = [], []
    for seed in range(N_SEEDS):
        train, test, table = pipeline.bench_split(seed)
        for g in tr.GROUPS:
            cfg = pipeline.bench_config(toggles=tr.toggles_for(g), seed=seed)
            res = tr.train(train, cfg)
            rows.append({"group": g, "seed": seed, "mIoU": tr.evaluate(res.params, test, table, cfg)["mIoU"]})
            if g == "E":
                gaps.append(_usd_gap(res.params, train + test))
    means = {g: float(np.mean([r["mIoU"] for r in rows if r["group"] == g])) for g in tr.GROUPS}
    elapsed = time.perf_counter() - start
    print(json.dumps({"means": means, "gaps": gaps, "steps": base.steps, "seconds": round(elapsed)}))
    return means, gaps, elapsed


def test_criterion_5_directional_ablation(ablation):
    means, _, elapsed = ablation
    print({g: round(v, 4) for g, v in means.items()})
    assert means["I"] > means["G"] > means["D"] > means["A"]
    for g in "EFH":
        assert means[g] > means["A"], g
    assert elapsed < 3600


def test_criterion_6_usd_weights_lower_on_corrupted_points(ablation):
    _, gaps, _ = ablation
    print(f"per-seed clean - corrupted mean weight: {np.round(gaps, 4)}, mean {np.mean(gaps):.4f}")
    assert np.mean(gaps) >= 0.05


# --------------------------------------------------------------------------
# 7. determinism


def test_criterion_7_determinism(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text(
        "seed = 1\n"
        "[scene]\nn_scenes = 3\npoints_per_m2 = 1000.0\n"
        "[corruption]\nbleed_radius = 0.05\ndropout_frac = 0.3\ndrift_sigma = 0.3\n"
        "[prep]\nbundles = \"gen\"\n"
        "[train]\nsteps = 150\nlr = 0.01\nstandardize_geo_gram = true\nlambda_sim = 0.1\n"
    )
    assert cli.run(["gen", "--config", str(cfg), "--out", str(tmp_path / "gen")]) == 0
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        cfg_run = tmp_path / f"{run}.json"
        conf = cli.load_config(cfg)
        conf.pop("_base")
        conf["prep"]["bundles"] = "gen"
        conf["data"] = {
            "train": f"{run}/prep",
            "test": f"{run}/prep",
            "table": "gen/prototypes.json",
            "checkpoint": f"{run}/train/final.ggpk",
        }
        cfg_run.write_text(json.dumps(conf))
        for cmd, sub in (("prep", "prep"), ("train", "train"), ("eval", "eval")):
            assert cli.run([cmd, "--config", str(cfg_run), "--out", str(d / sub)]) == 0
        outputs.append({
            name: (d / name).read_bytes()
            for name in ("eval/metrics.json", "train/final.ggpk", "train/best.ggpk", "train/state.ggpk", "train/train_log.jsonl")
        })
    for name in outputs[0]:
        assert outputs[0][name] == outputs[1][name], name


# --------------------------------------------------------------------------
# 8. IMR learning signal


def _mask_iou(params, scenes, seed=0):
    rng = np.random.default_rng(seed)
    ious = []
    for s in scenes:
        f_sem = tr.predict(params, s)
        for i, m in enumerate(s.masks.masks):
            if m.size < distill.MIN_MASK_POINTS:
                continue
            kept = distill.mask_out(m, rng.uniform(0.3, 0.7), rng)
            prob = np.asarray(distill.imr_reconstruct(f_sem, kept, params))
            thr = prob.min() + 0.5 * (prob.max() - prob.min())
            pred = prob >= thr
            truth = s.masks.boolean(i)
            ious.append((pred & truth).sum() / max((pred | truth).sum(), 1))
    return float(np.mean(ious))


def test_criterion_8_imr_learning_signal():
    train, test, _ = pipeline.bench_split(0)
    cfg = pipeline.bench_config(steps=500, toggles=tr.toggles_for("F"))
    init = tr.init_params(train, cfg)
    res = tr.train(train, cfg)
    l_mask = np.array([r["l_mask"] for r in res.log])
    ma = np.convolve(l_mask, np.ones(100) / 100, mode="valid")
    iou0, iou1 = _mask_iou(init, test), _mask_iou(res.params, test)
    print(f"L_mask MA {ma[0]:.4f} -> {ma[-1]:.4f}, max rise {np.max(np.diff(ma)):.2e}; IoU {iou0:.3f} -> {iou1:.3f}")
    assert np.all(np.diff(ma) <= 0)
    assert iou1 - iou0 >= 0.1
