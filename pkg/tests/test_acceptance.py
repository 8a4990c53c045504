"""Acceptance criteria 1-8, each at its stated tolerance.

Every test prints one ``criterion N: PASS|FAIL`` line (repeated in the
terminal summary). Criteria 5-8 share one set of toy training runs.
"""

import itertools
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import record_criterion
from enspatch.core import BBox, Detection, DetectionSet, Patch, init_patch
from enspatch.datasets import SyntheticSpec, generate_synthetic
from enspatch.detectors import TOY_ARCHS, ToyGridDetector
from enspatch.evaluation import ABLATIONS, compute_map, evaluate_attack, iou
from enspatch.losses import AttackSpec, total_loss, tv_loss
from enspatch.trainer import train, update_weights

SEEDS = (0, 1, 2)
SURROGATES = ("toy_a", "toy_b")
HELD_OUT = "toy_c"


# ---------------------------------------------------------------------------
# 1. total variation against pair enumeration


def _tv_pairs(px):
    h, w, c = px.shape
    total = 0.0
    for i, j, k in itertools.product(range(h), range(w), range(c)):
        if j + 1 < w:
            total += abs(px[i, j + 1, k] - px[i, j, k])
        if i + 1 < h:
            total += abs(px[i + 1, j, k] - px[i, j, k])
    return total


def test_criterion_1_tv_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 9))
        px = rng.uniform(0, 1, size=(n, n, 3))
        worst = max(worst, abs(tv_loss(px, floor=0.0, normalize=False) - _tv_pairs(px)))
    floors = [tv_loss(np.full((n, n, 3), v)) for n in (2, 5, 8) for v in (0.0, 0.3, 1.0)]
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and all(f == 0.1 for f in floors) and elapsed < 5
    record_criterion(1, ok, f"max abs err {worst:.2e}, constant floors {set(floors)}, {elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. gradient of the total loss


def test_criterion_2_gradient_finite_differences():
    t0 = time.perf_counter()
    det = ToyGridDetector("grad", TOY_ARCHS["toy_b"], seed=3).to(torch.float64)
    images = generate_synthetic(SyntheticSpec(num_images=4, seed=5)).images()
    assert images[0].pixels.shape == (64, 64, 3)
    spec = AttackSpec()
    p = init_patch(16, "random", 7)
    _, grad = total_loss(p, images, [det], [1.0], spec, seed=11)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        i, j, c = (int(v) for v in (rng.integers(16), rng.integers(16), rng.integers(3)))

        def f(delta):
            q = p.pixels.copy()
            q[i, j, c] += delta
            return total_loss(Patch(q), images, [det], [1.0], spec, seed=11)[0].l_total

        fd = (f(1e-3) - f(-1e-3)) / 2e-3
        rel = abs(fd - grad[i, j, c]) / max(abs(fd), abs(grad[i, j, c]), 1e-12)
        worst = max(worst, rel)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-3 and elapsed < 120
    record_criterion(2, ok, f"max relative error {worst:.2e} over 20 pixels, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 3. mixture weights stay on the simplex


def test_criterion_3_weight_simplex_fuzz():
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    sum_err, range_ok, order_ok = 0.0, True, True
    for _ in range(10_000):
        m = int(rng.integers(1, 6))
        a = rng.dirichlet(np.ones(m))
        losses = rng.exponential(2.0, size=m) * (rng.uniform() < 0.9)
        eta = float(rng.choice([0.0, 1e-3, 0.01, 0.1, 1.0, 10.0]))
        out = update_weights(a, losses, eta)
        sum_err = max(sum_err, abs(out.sum() - 1.0))
        range_ok &= bool(np.all((out >= 0) & (out <= 1)))
        eq = update_weights(np.full(m, 1.0 / m), losses, eta)
        for x, y in itertools.permutations(range(m), 2):
            if losses[x] > losses[y] and eq[x] > eq[y]:
                order_ok = False
    elapsed = time.perf_counter() - t0
    ok = sum_err <= 1e-9 and range_ok and order_ok and elapsed < 5
    record_criterion(3, ok, f"max |sum-1| {sum_err:.1e}, range ok {range_ok}, ordering ok {order_ok}, {elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------------------------
# 4. mAP against a threshold sweep


def _sweep_ap(preds, gts, iou_thresh=0.45):
    """AP from scratch: re-match at every score threshold, then integrate the PR envelope."""
    n_gt = sum(len(v) for v in gts.values())
    points = [(0.0, 1.0)]
    for t in sorted({s for s, _, _ in preds}, reverse=True):
        kept = sorted((p for p in preds if p[0] >= t), key=lambda p: (-p[0], p[1], p[2].as_tuple()))
        used = {k: set() for k in gts}
        tp = 0
        for _, img, box in kept:
            cands = [(iou(box, g), -gi) for gi, g in enumerate(gts.get(img, [])) if gi not in used[img]]
            cands = [c for c in cands if c[0] >= iou_thresh]
            if cands:
                used[img].add(-max(cands)[1])
                tp += 1
        points.append((tp / n_gt, tp / len(kept)))
    recalls = sorted({r for r, _ in points if r > 0})
    ap, prev = 0.0, 0.0
    for r in recalls:
        ap += (r - prev) * max(p for rr, p in points if rr >= r)
        prev = r
    return ap


def _random_instance(rng):
    n_img = int(rng.integers(1, 11))
    n_cls = int(rng.integers(1, 4))
    grid = np.arange(0, 40, 4)

    def box():
        x, y = rng.choice(grid, 2)
        w, h = rng.choice([4, 8, 12], 2)
        return BBox(float(x), float(y), float(x + w), float(y + h))

    gt = [[(box(), int(rng.integers(n_cls))) for _ in range(int(rng.integers(0, 4)))] for _ in range(n_img)]
    preds = [[] for _ in range(n_img)]
    for _ in range(int(rng.integers(0, 21))):
        img, c = int(rng.integers(n_img)), int(rng.integers(n_cls))
        if gt[img] and rng.uniform() < 0.6:
            g, _ = gt[img][int(rng.integers(len(gt[img])))]
            b = BBox(g.x1 + rng.choice([0, 1, 3]), g.y1, g.x2 + rng.choice([0, 2]), g.y2)
        else:
            b = box()
        scores = np.full(n_cls, -1.0)
        scores[c] = 1.0
        preds[img].append(Detection(b, c, float(rng.choice([0.3, 0.5, 0.7, 0.9, 0.95])), tuple(scores)))
    return [DetectionSet(p) for p in preds], gt


def test_criterion_4_map_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    mismatches, checked = 0, 0
    for _ in range(200):
        preds, gt = _random_instance(rng)
        res = compute_map(preds, gt)
        classes = sorted({c for anns in gt for _, c in anns})
        if not classes:
            mismatches += res.map is not None
            continue
        aps = []
        for c in classes:
            pc = [(d.objectness, i, d.box) for i, ds in enumerate(preds) for d in ds if d.class_id == c]
            gc = {i: [b for b, k in anns if k == c] for i, anns in enumerate(gt)}
            aps.append(_sweep_ap(pc, gc))
        checked += 1
        if abs(res.map - float(np.mean(aps))) > 1e-12:
            mismatches += 1
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 30
    record_criterion(4, ok, f"{mismatches} mismatches over 200 instances ({checked} with ground truth), {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 5-8. toy training runs


@pytest.fixture(scope="module")
def runs(toy_world):
    """Ensemble patches for three seeds, trained once and shared by criteria 5-8."""
    rc, dets = toy_world["rc"], toy_world["detectors"]
    t0 = time.perf_counter()
    out = {}
    for seed in SEEDS:
        cfg = replace(rc.train, seed=seed)
        patch, log = train(cfg, toy_world["train"], [dets[m] for m in SURROGATES])
        report = evaluate_attack(patch, toy_world["eval"], None, list(dets.values()), rc.eval_placement, seed)
        out[seed] = {"config": cfg, "patch": patch, "log": log, "report": report}
    out["elapsed"] = time.perf_counter() - t0
    return out


def _held_out_map(toy_world, cfg, surrogates, seed):
    dets = toy_world["detectors"]
    patch, _ = train(cfg, toy_world["train"], [dets[m] for m in surrogates])
    rep = evaluate_attack(patch, toy_world["eval"], None, [dets[HELD_OUT]], toy_world["rc"].eval_placement, seed, controls=())
    return rep.detectors[HELD_OUT].patched


@pytest.mark.slow
def test_criterion_5_end_to_end_attack(toy_world, runs):
    rc = toy_world["rc"]
    reports = [runs[s]["report"] for s in SEEDS]
    iters = max(len(runs[s]["log"]) for s in SEEDS)

    def mean(model, key):
        vals = []
        for r in reports:
            d = r.detectors[model]
            vals.append({"clean": d.clean, "patch": d.patched}.get(key, d.controls.get(key)))
        return float(np.mean(vals))

    clean_ok = all(mean(m, "clean") >= 70 for m in SURROGATES)
    details, ok = [], clean_ok and iters <= 2000 and runs["elapsed"] < 15 * 60
    for group in (SURROGATES, (HELD_OUT,)):
        clean = np.mean([mean(m, "clean") for m in group])
        adv = np.mean([mean(m, "patch") for m in group])
        ctl = {k: np.mean([mean(m, k) for m in group]) for k in ("gray", "noise", "white")}
        ok &= clean - adv >= 30 and all(adv < v for v in ctl.values())
        details.append(
            f"{'+'.join(group)}: clean {clean:.1f} patch {adv:.1f} "
            + " ".join(f"{k} {v:.1f}" for k, v in ctl.items())
        )
    record_criterion(
        5, ok, "; ".join(details) + f"; {iters} iterations, {runs['elapsed'] / 60:.1f} min (surrogates {rc.surrogates})"
    )
    assert ok


@pytest.mark.slow
def test_criterion_6_transfer_trend(toy_world, runs):
    t0 = time.perf_counter()
    wins, rows = 0, []
    for seed in SEEDS:
        single = _held_out_map(toy_world, runs[seed]["config"], SURROGATES[:1], seed)
        pair = runs[seed]["report"].detectors[HELD_OUT].patched
        wins += pair < single
        rows.append(f"seed {seed}: A {single:.2f} vs A+B {pair:.2f}")
    elapsed = time.perf_counter() - t0
    ok = wins >= 2 and elapsed < 30 * 60
    record_criterion(6, ok, f"{wins}/3 seeds lower on {HELD_OUT} ({'; '.join(rows)}), {elapsed / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_7_ablation_direction(toy_world, runs):
    t0 = time.perf_counter()
    full = float(np.mean([runs[s]["report"].detectors[HELD_OUT].patched for s in SEEDS]))
    worst, rows = -np.inf, [f"full {full:.2f}"]
    for name, change in ABLATIONS[1:]:
        vals = [_held_out_map(toy_world, replace(runs[s]["config"], **change), SURROGATES, s) for s in SEEDS]
        gain = full - float(np.mean(vals))
        worst = max(worst, gain)
        rows.append(f"{name} {np.mean(vals):.2f}")
    elapsed = time.perf_counter() - t0
    ok = worst <= 1.0 and elapsed < 45 * 60
    record_criterion(7, ok, f"largest gain over full {worst:.2f} pts ({', '.join(rows)}), {elapsed / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_8_determinism_and_ranges(toy_world, runs):
    dets = toy_world["detectors"]
    again, _ = train(runs[0]["config"], toy_world["train"], [dets[m] for m in SURROGATES])
    diff = float(np.abs(again.pixels - runs[0]["patch"].pixels).max())
    range_ok = simplex_ok = True
    for s in SEEDS:
        for rec in runs[s]["log"].records:
            range_ok &= 0.0 <= rec["patch_min"] and rec["patch_max"] <= 1.0
            for a in (rec["alphas"], rec["alphas_next"]):
                a = np.asarray(a)
                simplex_ok &= bool(abs(a.sum() - 1) <= 1e-9 and np.all((a >= 0) & (a <= 1)))
    ok = diff <= 1e-6 and range_ok and simplex_ok
    record_criterion(8, ok, f"rerun max pixel diff {diff:.1e}, pixels in range {range_ok}, alphas on simplex {simplex_ok}")
    assert ok
