import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graphs import INTR, build_graph, perturb, true_scene
from numdiff import anchor_error, random_reprojection_config, reprojection_errors
from semvo.errors import GaugeUnconstrained, NonPositiveDepth, UnknownKeyframe
from semvo.geometry import Intrinsics, Pose, project, so3_exp, transform_point
from semvo.optimizer import (
    FactorGraph, Keyframe, MapPoint, NoiseModel, Observation, RobustKernel, SemanticAnchor, SolverConfig, Termination,
    apply_reinitialization, dump_solver_config, load_graph, load_solver_config, objective, objective_details,
    pose_update, reprojection_residual, robust_cost, save_graph, semantic_residual, solve,
)

UNIT = Intrinsics(1.0, 1.0, 0.0, 0.0, 10, 10)
NO_KERNEL = RobustKernel()


def test_residual_of_consistent_observation_is_zero():
    pose = Pose(so3_exp([0.1, -0.2, 0.05]), [0.3, -0.1, 2.0])
    X = np.array([1.0, 0.5, 10.0])
    z = project(INTR, transform_point(pose, X))
    assert np.allclose(reprojection_residual(pose, X, z, INTR), 0, atol=1e-12)


def test_residual_is_observation_minus_prediction():
    assert np.array_equal(reprojection_residual(Pose.identity(), [0, 0, 1], [0.5, 0], UNIT), [0.5, 0.0])
    with pytest.raises(NonPositiveDepth):
        reprojection_residual(Pose.identity(), [0, 0, -1], [0, 0], UNIT)


def test_residual_matches_hand_composition():
    rng = np.random.default_rng(21)
    for _ in range(20):
        pose, X = random_reprojection_config(rng, INTR)
        obs = rng.uniform(0, 1900, 2)
        pc = pose.rotation @ X + pose.translation
        pred = np.array([INTR.fx * pc[0] / pc[2] + INTR.cx, INTR.fy * pc[1] / pc[2] + INTR.cy])
        assert np.allclose(reprojection_residual(pose, X, obs, INTR), obs - pred, atol=1e-9)


def test_semantic_residual_examples():
    assert np.array_equal(semantic_residual([1, 2, 3], [1, 2, 3]), [0, 0, 0])
    assert np.array_equal(semantic_residual([1, 2, 0], [1, 2, 3]), [0, 0, 3])
    rng = np.random.default_rng(22)
    a, b = rng.normal(size=3), rng.normal(size=3)
    assert np.array_equal(semantic_residual(a, b), b - a)


def test_robust_cost_examples():
    assert robust_cost(NO_KERNEL, 4.0) == (4.0, 1.0)
    assert robust_cost(RobustKernel.huber(1.0), 0.25) == (0.25, 1.0)
    assert robust_cost(RobustKernel.huber(1.0), 4.0) == (3.0, 0.5)
    with pytest.raises(ValueError):
        RobustKernel.huber(0.0)


@settings(max_examples=80, deadline=None)
@given(st.floats(0.1, 10), st.floats(0, 1e4))
def test_huber_is_continuous_and_never_above_square(k, s):
    cost, w = robust_cost(RobustKernel.huber(k), s)
    assert cost <= s + 1e-9 and 0 < w <= 1
    edge, _ = robust_cost(RobustKernel.huber(k), k * k)
    assert edge == pytest.approx(k * k)


def test_pose_update_examples():
    pose = Pose(so3_exp([0.3, 0.1, -0.2]), [1.0, 2.0, 3.0])
    same = pose_update(pose, np.zeros(6))
    assert np.allclose(same.rotation, pose.rotation, atol=1e-12) and np.allclose(same.translation, pose.translation)
    moved = pose_update(Pose.identity(), [0, 0, 0, 1, 0, 0])
    assert np.allclose(moved.translation, [1, 0, 0]) and np.allclose(moved.rotation, np.eye(3))


def test_jacobians_match_central_differences():
    rng = np.random.default_rng(23)
    for _ in range(30):
        pose, X = random_reprojection_config(rng, INTR)
        ep, ex = reprojection_errors(pose, X, INTR, rng.uniform(0, 1900, 2))
        assert ep < 1e-6 and ex < 1e-6
        assert anchor_error(pose, rng.normal(size=3) * 10) < 1e-6


def single_factor_graph(residual=(3.0, 4.0)):
    g = FactorGraph(UNIT, pixel_noise=NoiseModel(np.eye(2)), pixel_kernel=NO_KERNEL)
    g.add_map_point(MapPoint(0, [0.0, 0.0, 1.0], fixed=True))
    g.add_keyframe(Keyframe(0, Pose.identity(), [Observation(0, residual)], fixed=True))
    return g


def test_objective_examples():
    rng = np.random.default_rng(24)
    poses, pts = true_scene(rng)
    assert objective(build_graph(poses, pts)) == pytest.approx(0.0, abs=1e-9)
    assert objective(single_factor_graph()) == pytest.approx(25.0)
    g = single_factor_graph()
    g.keyframes[0].fixed = False
    with pytest.raises(GaugeUnconstrained):
        objective(g)


def naive_objective(g):
    total = 0.0
    for kf in g.keyframes.values():
        for ob in kf.observations:
            X = g.map_points[ob.point_id].position
            if ob.shift is not None:
                X = X - ob.shift
            pc = kf.pose.rotation @ X + kf.pose.translation
            if pc[2] <= 1e-6:
                continue
            r = ob.pixel - np.array([g.intrinsics.fx * pc[0] / pc[2] + g.intrinsics.cx,
                                     g.intrinsics.fy * pc[1] / pc[2] + g.intrinsics.cy])
            total += robust_cost(g.pixel_kernel, float(r @ np.linalg.solve(g.pixel_noise.covariance, r)))[0]
        a = kf.semantic_anchor
        if a is not None:
            r = a.translation - kf.pose.center
            cov = (a.noise or g.anchor_noise).covariance
            total += robust_cost(g.anchor_kernel, float(r @ np.linalg.solve(cov, r)))[0]
    return total


def test_objective_matches_term_by_term_sum():
    rng = np.random.default_rng(25)
    for _ in range(5):
        poses, pts = true_scene(rng, 5, 40)
        g = perturb(build_graph(poses, pts, rng, pixel_sigma=2.0), rng, 0.5, 3.0, 0.5)
        g.pixel_noise = NoiseModel([[2.0, 0.3], [0.3, 1.5]])
        g.keyframes[2].semantic_anchor = SemanticAnchor(poses[2].center + 0.4, NoiseModel.diagonal([0.1, 0.2, 0.3]))
        for ob in g.keyframes[1].observations[::5]:
            ob.shift = rng.normal(size=3) * 0.05
        # one point behind a camera is skipped and counted
        g.map_points[0].position = poses[0].center - 5 * poses[0].rotation[2]
        f, skipped = objective_details(g)
        assert f == pytest.approx(naive_objective(g), rel=1e-12)
        assert skipped >= 1


def test_solve_at_stationary_point():
    rng = np.random.default_rng(26)
    poses, pts = true_scene(rng, 4, 30)
    r = solve(build_graph(poses, pts))
    assert r.iterations <= 1 and r.objective == pytest.approx(0.0, abs=1e-12)
    assert r.termination is Termination.CONVERGED


def test_solve_triangulates_a_free_point():
    X = np.array([0.5, -0.3, 12.0])
    g = FactorGraph(INTR, pixel_kernel=NO_KERNEL)
    g.add_map_point(MapPoint(0, X + [0.3, -0.3, 0.3]))
    for k, c in enumerate(([0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 1.0, 0.0])):
        pose = Pose.from_center(np.eye(3), c)
        g.add_keyframe(Keyframe(k, pose, [Observation(0, project(INTR, transform_point(pose, X)))], fixed=True))
    solve(g)
    assert np.linalg.norm(g.map_points[0].position - X) < 1e-6


def test_accepted_objectives_never_increase():
    rng = np.random.default_rng(27)
    for _ in range(5):
        poses, pts = true_scene(rng, 6, 60)
        g = perturb(build_graph(poses, pts, rng, pixel_sigma=1.0), rng, 0.3, 2.0, 0.3)
        hist = solve(g).history
        assert all(b <= a for a, b in zip(hist, hist[1:]))


def test_single_anchor_pins_a_free_keyframe():
    g = FactorGraph(INTR, anchor_kernel=NO_KERNEL)
    g.add_keyframe(Keyframe(0, Pose.from_center(np.eye(3), [1.0, 2.0, 3.0]), [], SemanticAnchor([4.0, -1.0, 0.5])))
    solve(g)
    assert np.linalg.norm(g.keyframes[0].pose.center - [4.0, -1.0, 0.5]) < 1e-9


def test_scaling_covariance_scales_unkernelled_cost():
    rng = np.random.default_rng(28)
    poses, pts = true_scene(rng, 3, 20)
    g = perturb(build_graph(poses, pts, anchor_every=0, kernel=NO_KERNEL), rng)
    base = objective(g)
    for c in (0.5, 3.0):
        g.pixel_noise = NoiseModel(np.eye(2) * c)
        assert objective(g) == pytest.approx(base / c, rel=1e-12)


def _point_graph(kernel):
    X = np.array([1.0, -0.5, 15.0])
    g = FactorGraph(INTR, pixel_kernel=kernel)
    g.add_map_point(MapPoint(0, X))
    for k in range(6):
        pose = Pose.from_center(np.eye(3), [0.5 * k, 0.2 * (k % 2), 0.0])
        g.add_keyframe(Keyframe(k, pose, [Observation(0, project(INTR, transform_point(pose, X)))], fixed=True))
    return g, X


def test_huber_limits_an_outlier():
    g, X = _point_graph(NO_KERNEL)
    g.keyframes[3].observations[0].pixel = g.keyframes[3].observations[0].pixel + [1.0, 0.0]
    solve(g)
    small = np.linalg.norm(g.map_points[0].position - X)
    g, X = _point_graph(RobustKernel.huber(2.0))
    g.keyframes[3].observations.append(Observation(0, g.keyframes[3].observations[0].pixel + [500.0, 0.0]))
    solve(g)
    big = np.linalg.norm(g.map_points[0].position - X)
    assert 0 < small and big < 10 * small


def test_reinitialization():
    rng = np.random.default_rng(29)
    poses, pts = true_scene(rng, 6, 40)
    g = build_graph(poses, pts)
    target = Pose.from_center(np.eye(3), [1.0, 2.0, 3.0])
    one = FactorGraph(INTR)
    one.add_keyframe(Keyframe(0, Pose.identity()))
    out = apply_reinitialization(one, 0, target)
    assert out.keyframes[0].fixed and np.allclose(out.keyframes[0].pose.center, [1.0, 2.0, 3.0])

    mid = apply_reinitialization(g, 3, target)
    suffix = [kf for k, kf in g.keyframes.items() if k >= 3]
    assert mid.n_reprojection_factors == sum(len(kf.observations) for kf in suffix)
    assert mid.n_anchor_factors == sum(kf.semantic_anchor is not None for kf in suffix)
    assert sorted(mid.keyframes) == [3, 4, 5]

    same = apply_reinitialization(g, 4, g.keyframes[4].pose)
    assert same.keyframes[4].fixed and not g.keyframes[4].fixed
    assert np.array_equal(same.keyframes[4].pose.translation, g.keyframes[4].pose.translation)
    with pytest.raises(UnknownKeyframe):
        apply_reinitialization(g, 99, target)


def test_graph_dump_round_trip(tmp_path):
    rng = np.random.default_rng(30)
    poses, pts = true_scene(rng, 4, 20)
    g = perturb(build_graph(poses, pts, rng, pixel_sigma=1.0), rng)
    g.keyframes[1].semantic_anchor = SemanticAnchor([1, 2, 3], NoiseModel.diagonal([0.1, 0.1, 0.4]))
    g.keyframes[2].observations[0].shift = np.array([0.01, 0.0, -0.02])
    save_graph(g, tmp_path / "g.jsonl")
    back = load_graph(tmp_path / "g.jsonl")
    assert objective(back) == objective(g)
    assert back.n_reprojection_factors == g.n_reprojection_factors and back.n_anchor_factors == g.n_anchor_factors


def test_solver_config_round_trip(tmp_path):
    cfg = SolverConfig(max_iterations=7, initial_damping=1e-3)
    dump_solver_config(cfg, tmp_path / "solver.cfg")
    assert load_solver_config(tmp_path / "solver.cfg") == cfg
