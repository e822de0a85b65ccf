"""Acceptance suite: each criterion at its stated tolerance and time budget.

Every test prints a single PASS/FAIL line, visible even when output is captured.
"""

import hashlib
import itertools
import math
import time

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from graphs import INTR, build_graph, perturb, true_scene
from numdiff import anchor_error, random_reprojection_config, reprojection_errors
from oracles import deviation_oracle, exhaustive_element_matching, match_oracle, random_library_instance
from semvo import cli, evalkit, pipeline
from semvo.config import RunConfig
from semvo.evalkit import ReportedElement, evaluate
from semvo.geoalign import Correspondence, solve_rigid_alignment
from semvo.geometry import Pose
from semvo.optimizer import objective, reprojection_rmse, solve
from semvo.semlib import Category, build_library, match_frame

SEEDS = range(10)
MAP_BIAS = (-1.0, 1.0, -1.0)  # road frame: 1 m left, 1 m ahead, 1 m down
# a 1 m bias on every axis puts reported elements ~1.7 m from their truths, so the
# gates must reach past it for the bias to be measured rather than turned into misses
BIASED_RADII = {"Sign": 3.0, "Arrow": 3.0, "LaneBoundary": 2.0, "RoadsideBarrier": 2.0}


@pytest.fixture
def verdict(capsys):
    def say(number, name, ok, elapsed, budget, detail):
        on_time = elapsed < budget
        status = "PASS" if ok and on_time else "FAIL"
        with capsys.disabled():
            print(f"\n[criterion {number}] {name}: {status} ({detail}; {elapsed:.1f} s, budget {budget:.0f} s)")
        return ok and on_time

    return say


# ---------------------------------------------------------------- 1


def test_rigid_alignment_recovery(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1001)
    worst_R = worst_t = 0.0
    for _ in range(100):
        n = int(rng.integers(3, 51))
        R = Rotation.random(random_state=rng).as_matrix()
        t = rng.normal(size=3) * 100
        P = rng.normal(size=(n, 3)) * 20
        tf = solve_rigid_alignment([Correspondence(p, d) for p, d in zip(P, P @ R.T + t)])
        worst_R = max(worst_R, float(np.linalg.norm(tf.rotation - R)))
        worst_t = max(worst_t, float(np.linalg.norm(tf.translation - t)))
    within = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        R = Rotation.random(random_state=rng).as_matrix()
        t = rng.normal(size=3) * 100
        P = rng.normal(size=(50, 3)) * 20
        D = P @ R.T + t + rng.normal(size=(50, 3)) * 0.1
        tf = solve_rigid_alignment([Correspondence(p, d) for p, d in zip(P, D)])
        within += np.linalg.norm(tf.translation - t) <= 0.05
    elapsed = time.perf_counter() - t0
    ok = worst_R <= 1e-9 and worst_t <= 1e-9 and within >= 95
    assert verdict(1, "rigid alignment", ok, elapsed, 5,
                   f"noiseless max |dR|_F {worst_R:.1e}, max |dt| {worst_t:.1e}; noisy {within}/100 within 0.05 m")


# ---------------------------------------------------------------- 2


def test_matching_oracle_equivalence(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1002)
    agree = matched = 0
    for case in range(200):
        frames, q, dets = random_library_instance(rng, 50)
        lib = build_library(frames, grid_cell=float(rng.choice([2.0, 7.5, 15.0])))
        delta, xi = float(rng.uniform(3, 30)), float(rng.uniform(5, 60))
        selection = ("distance", "deviation")[case % 2]
        got = match_frame(lib, Pose.from_center(np.eye(3), q), dets, delta, xi, selection)
        want = match_oracle(frames, q, dets, delta, xi, selection)
        same = (got is None) == (want is None)
        if same and got is not None:
            frame = next(f for f in frames if f.frame_id == want)
            same = (got.matched_frame_id == want
                    and math.isclose(got.deviation, deviation_oracle(dets, frame.detections), rel_tol=1e-12)
                    and math.isclose(got.distance, float(np.linalg.norm(frame.pose.center - q)), rel_tol=1e-12))
            matched += 1
        agree += same
    elapsed = time.perf_counter() - t0
    assert verdict(2, "matching oracle", agree == 200, elapsed, 10, f"{agree}/200 identical, {matched} with a match")


# ---------------------------------------------------------------- 3


def test_jacobians(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1003)
    worst = {"reprojection/pose": 0.0, "reprojection/point": 0.0, "anchor/pose": 0.0}
    for _ in range(100):
        pose, X = random_reprojection_config(rng, INTR)
        ep, ex = reprojection_errors(pose, X, INTR, rng.uniform(0, 1900, 2))
        worst["reprojection/pose"] = max(worst["reprojection/pose"], ep)
        worst["reprojection/point"] = max(worst["reprojection/point"], ex)
    for _ in range(100):
        pose, _ = random_reprojection_config(rng, INTR)
        worst["anchor/pose"] = max(worst["anchor/pose"], anchor_error(pose, rng.normal(size=3) * 10))
    elapsed = time.perf_counter() - t0
    ok = all(v <= 1e-6 for v in worst.values())
    assert verdict(3, "jacobians", ok, elapsed, 10, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


# ---------------------------------------------------------------- 4


def test_optimizer_convergence(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1004)
    poses, pts = true_scene(rng)
    g = perturb(build_graph(poses, pts), rng, trans=0.1, rot_deg=1.0)
    res = solve(g)
    pose_err = max(float(np.linalg.norm(g.keyframes[k].pose.center - p.center)) for k, p in enumerate(poses))
    rmses = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        poses, pts = true_scene(rng)
        g = perturb(build_graph(poses, pts, rng, pixel_sigma=1.0), rng, trans=0.1, rot_deg=1.0)
        solve(g)
        rmses.append(reprojection_rmse(g))
    elapsed = time.perf_counter() - t0
    ok = res.objective <= 1e-9 and objective(g) >= 0 and pose_err <= 1e-4 and all(0.7 <= r <= 1.3 for r in rmses)
    assert verdict(4, "optimizer", ok, elapsed, 60,
                   f"noiseless objective {res.objective:.1e}, pose error {pose_err:.1e} m; "
                   f"1 px RMSE {min(rmses):.3f}..{max(rmses):.3f} px over 20 seeds")


# ---------------------------------------------------------------- 5 and 6


@pytest.fixture(scope="module")
def highway_runs():
    """Per seed: default 2 km highway with the GNSS outage, library labels carrying MAP_BIAS.

    The bias only moves geographic labels, never the anchors, so the corrected
    trajectory is the one an unbiased map would give; criterion 5 reads it,
    criterion 6 reads the georeferenced elements.
    """
    runs = []
    for seed in SEEDS:
        t0 = time.perf_counter()
        cfg = RunConfig(seed=seed, map_bias=MAP_BIAS)
        cfg.evaluation.match_radius_m = dict(BIASED_RADII)
        world, mapping, drive = pipeline.simulate(cfg)
        lib = build_library(pipeline.library_frames(mapping, cfg.map_bias), cfg.matching.grid_cell)
        res = pipeline.Localizer(lib, cfg.drive.camera.intrinsics(), cfg).run(drive, report_before=False)
        runs.append({"seed": seed, "cfg": cfg, "world": world, "drive": drive, "result": res,
                     "seconds": time.perf_counter() - t0})
    return runs


def test_drift_correction(verdict, highway_runs):
    t0 = time.perf_counter()
    lines = []
    reductions = []
    for run in highway_runs:
        gt = [f.gt_pose for f in run["drive"]]
        corrected = evalkit.trajectory_ate(run["result"].poses, gt)["rmse_m"]
        ins = evalkit.trajectory_ate([f.ins_pose for f in run["drive"]], gt)["rmse_m"]
        reductions.append(1.0 - corrected / ins)
        lines.append(f"{corrected:.2f}/{ins:.2f}")
    elapsed = sum(r["seconds"] for r in highway_runs) + time.perf_counter() - t0
    ok = all(r >= 0.5 for r in reductions)
    assert verdict(5, "drift correction", ok, elapsed, 120,
                   f"ATE reduction min {min(reductions):.0%} mean {np.mean(reductions):.0%} "
                   f"(corrected/INS m: {' '.join(lines)})")


def test_relative_vs_absolute_error(verdict, highway_runs):
    t0 = time.perf_counter()
    worst_mre = 0.0
    mae_lo, mae_hi = math.inf, 0.0
    ok = True
    unpaired = set()  # categories spaced wider than the pair radius have no MRE at all
    for run in highway_runs:
        rep = pipeline.evaluate_dataset(run["result"].reported_geo, run["world"], run["drive"], run["cfg"])
        for cat, m in rep.categories.items():
            if m.mae is None:
                ok = False
                continue
            mae = [abs(v) for v in m.mae.as_tuple()]
            mae_lo, mae_hi = min(mae_lo, *mae), max(mae_hi, *mae)
            if m.mre is None:
                ok = ok and m.pair_count == 0 and m.tp > 0
                unpaired.add(cat.value)
                continue
            worst_mre = max(worst_mre, *(abs(v) for v in m.mre.as_tuple()))
    elapsed = time.perf_counter() - t0
    ok = ok and worst_mre <= 0.10 and 0.8 <= mae_lo and mae_hi <= 1.2 and len(unpaired) < len(Category)
    note = f"; no pairs within the pair radius for {', '.join(sorted(unpaired))}" if unpaired else ""
    assert verdict(6, "MRE/MAE separation", ok, elapsed, 120,
                   f"max per-axis |MRE| {worst_mre:.3f} m, per-axis |MAE| in [{mae_lo:.3f}, {mae_hi:.3f}] m{note}; "
                   f"evaluation of the criterion-5 runs")


# ---------------------------------------------------------------- 7


STRAIGHT = np.column_stack([np.arange(0.0, 300.0), np.zeros(300), np.zeros(300)])  # heading +x
RADII = {"Sign": 2.0, "Arrow": 2.0, "LaneBoundary": 1.0, "RoadsideBarrier": 1.0}


def _lane(x0, y, z=0.0, n=6):
    return np.column_stack([x0 + np.arange(n, dtype=float), np.full(n, float(y)), np.full(n, float(z))])


def _road_axes(e):
    """(lateral, longitudinal, altitudinal) on a +x road: left of travel is +y, and left is negative."""
    return np.array([-e[1], e[0], e[2]])


def _brute_force_metrics(rep, gt):
    def err(r, g):
        return (r.vertices - g.vertices).mean(axis=0)  # same vertex count and spacing by construction

    def dist(r, g):
        return float(np.linalg.norm(err(r, g)))

    def gate(r, g, d):
        if r.category in (Category.SIGN, Category.ARROW):
            return d <= RADII[r.category.value]
        return abs(err(r, g)[1]) <= RADII[r.category.value] and d <= 3.0

    pairs, fp, fn = exhaustive_element_matching(rep, gt, dist, gate)
    out = {}
    for cat in {g.category for g in gt} | {r.category for r in rep}:
        cp = sorted([(gi, ri) for ri, gi in pairs if gt[gi].category is cat])
        tp = len(cp)
        n_fn = sum(gt[gi].category is cat for gi in fn)
        n_fp = sum(rep[ri].category is cat for ri in fp)
        errs = [err(rep[ri], gt[gi]) for gi, ri in cp]
        mae = np.mean([_road_axes(e) for e in errs], axis=0) if errs else None
        rel = []
        for (ga, ea), (gb, eb) in itertools.combinations(zip([gi for gi, _ in cp], errs), 2):
            ca, cb = gt[ga].vertices.mean(axis=0), gt[gb].vertices.mean(axis=0)
            if np.linalg.norm(ca - cb) <= 50.0:
                rel.append(_road_axes(ea - eb))
        out[cat] = {
            "recall": None if tp + n_fn == 0 else 100.0 * tp / (tp + n_fn),
            "precision": None if tp + n_fp == 0 else 100.0 * tp / (tp + n_fp),
            "mae": mae, "mre": np.mean(rel, axis=0) if rel else None,
        }
    return out


def _crafted_instance(rng):
    """Up to 20 elements: truths on separated slots, reports offset, dropped, or spurious."""
    cats = [Category.SIGN, Category.ARROW, Category.LANE_BOUNDARY]
    slots = rng.permutation(20)[: int(rng.integers(2, 11))]
    gt, rep = [], []
    for i, slot in enumerate(sorted(slots)):
        c = cats[int(rng.integers(0, 3))]
        x, y = 12.0 * slot, float(rng.integers(-6, 7))
        g = ReportedElement(c, _lane(x, y) if c is Category.LANE_BOUNDARY else [x, y, 1.0], i)
        gt.append(g)
        kind = rng.random()
        if kind < 0.7:
            off = np.round(rng.uniform(-0.6, 0.6, 3), 2)
            rep.append(ReportedElement(c, g.position + off))
        elif kind < 0.85:
            rep.append(ReportedElement(c, g.position + [0.0, 4.5, 0.0]))  # too far off: one fp, one fn
    for _ in range(int(rng.integers(0, 3))):
        x = 12.0 * float(rng.integers(0, 20)) + 6.0  # between slots
        rep.append(ReportedElement(Category.SIGN, [x, 0.0, 1.0]))
    order = rng.permutation(len(rep))
    return [rep[i] for i in order], gt


def _close(a, b):
    if a is None or b is None:
        return a is None and b is None
    return np.allclose(a, b, rtol=0, atol=1e-9)


def test_metric_kit(verdict):
    t0 = time.perf_counter()
    failures = []
    # hand-computed: two signs 0.5 m off (one ahead, one to the left), one 4 m off
    gt = [ReportedElement(Category.SIGN, [10, 5, 3], 0), ReportedElement(Category.SIGN, [40, 5, 3], 1),
          ReportedElement(Category.SIGN, [70, 5, 3], 2)]
    rep = [ReportedElement(Category.SIGN, [10.5, 5, 3]), ReportedElement(Category.SIGN, [40, 5.5, 3]),
           ReportedElement(Category.SIGN, [74, 5, 3])]
    m = evaluate(rep, gt, STRAIGHT, RADII).categories[Category.SIGN]
    if not (m.recall == 200 / 3 and m.precision == 200 / 3
            and _close(m.mae.as_tuple(), (-0.25, 0.25, 0.0)) and _close(m.mre.as_tuple(), (0.5, 0.5, 0.0))):
        failures.append("hand case")
    m = evaluate(gt, gt, STRAIGHT, RADII).categories[Category.SIGN]
    if not (m.recall == 100.0 and m.precision == 100.0 and _close(m.mae.as_tuple(), (0, 0, 0))):
        failures.append("perfect case")
    m = evaluate([], gt, STRAIGHT, RADII).categories[Category.SIGN]
    if not (m.recall == 0.0 and m.precision is None):
        failures.append("empty case")
    rng = np.random.default_rng(1007)
    checked = 0
    for case in range(200):
        rep, gt = _crafted_instance(rng)
        assert len(rep) + len(gt) <= 20 + 2 + 10
        got = evaluate(rep, gt, STRAIGHT, RADII).categories
        want = _brute_force_metrics(rep, gt)
        for cat, w in want.items():
            g = got[cat]
            same = (g.recall == w["recall"] and g.precision == w["precision"]
                    and _close(None if g.mae is None else g.mae.as_tuple(), w["mae"])
                    and _close(None if g.mre is None else g.mre.as_tuple(), w["mre"]))
            checked += 1
            if not same:
                failures.append(f"random case {case} {cat.value}")
    elapsed = time.perf_counter() - t0
    assert verdict(7, "metric kit", not failures, elapsed, 5,
                   f"3 hand cases and {checked} category reports from 200 crafted instances; "
                   f"{len(failures)} mismatches" + (f" first: {failures[0]}" if failures else ""))


# ---------------------------------------------------------------- 8


def _digests(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_determinism(verdict, tmp_path):
    t0 = time.perf_counter()
    codes = [cli.main(["report", "--seed", "7", "--before-after", "--out", str(tmp_path / name)]) for name in ("a", "b")]
    a, b = _digests(tmp_path / "a"), _digests(tmp_path / "b")
    elapsed = time.perf_counter() - t0
    ok = codes == [0, 0] and len(a) > 10 and a == b
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    assert verdict(8, "determinism", ok, elapsed, 60,
                   f"{len(a)} artifacts, {len(differing)} differ" + (f" ({differing[0]})" if differing else ""))
