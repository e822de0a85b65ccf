import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from oracles import kabsch_oracle
from semvo.errors import DegenerateConfiguration, InsufficientPoints
from semvo.geoalign import (
    Correspondence, GeoTransform, alignment_cost, select_nearest_frames, solve_rigid_alignment, to_geographic,
)
from semvo.geometry import Pose, se3_exp
from semvo.semlib import Category, ElementFrame, SemanticDetection, build_library


def pairs_of(P, D):
    return [Correspondence(p, d) for p, d in zip(P, D)]


def test_identity_and_pure_translation():
    P = np.array([[0, 0, 0], [1, 0, 0], [0, 2, 0], [0, 0, 3.0]])
    tf = solve_rigid_alignment(pairs_of(P, P))
    assert np.allclose(tf.rotation, np.eye(3), atol=1e-12) and np.allclose(tf.translation, 0, atol=1e-12)
    assert tf.rms_residual == pytest.approx(0.0, abs=1e-12)
    tf = solve_rigid_alignment(pairs_of(P, P + [5, -2, 1]))
    assert np.allclose(tf.rotation, np.eye(3), atol=1e-12) and np.allclose(tf.translation, [5, -2, 1], atol=1e-12)


def test_generate_then_recover():
    rng = np.random.default_rng(31)
    for _ in range(20):
        R0 = Rotation.random(random_state=rng).as_matrix()
        t0 = rng.normal(size=3) * 100
        P = rng.normal(size=(10, 3)) * 20
        tf = solve_rigid_alignment(pairs_of(P, P @ R0.T + t0))
        assert np.linalg.norm(tf.rotation - R0) <= 1e-9 and np.linalg.norm(tf.translation - t0) <= 1e-9
        assert np.linalg.det(tf.rotation) == pytest.approx(1.0, abs=1e-9)


def test_agrees_with_quaternion_closed_form_under_noise():
    rng = np.random.default_rng(32)
    for _ in range(10):
        R0 = Rotation.random(random_state=rng).as_matrix()
        P = rng.normal(size=(15, 3)) * 10
        D = P @ R0.T + rng.normal(size=3) + rng.normal(size=(15, 3)) * 0.5
        tf = solve_rigid_alignment(pairs_of(P, D))
        R, t = kabsch_oracle(P, D)
        assert np.allclose(tf.rotation, R, atol=1e-9) and np.allclose(tf.translation, t, atol=1e-9)


def test_rejects_too_few_and_degenerate_points():
    with pytest.raises(InsufficientPoints):
        solve_rigid_alignment(pairs_of(np.eye(3)[:2], np.eye(3)[:2]))
    line = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(DegenerateConfiguration):
        solve_rigid_alignment(pairs_of(line, line))
    same = np.ones((4, 3))
    with pytest.raises(DegenerateConfiguration):
        solve_rigid_alignment(pairs_of(same, same))


def test_planar_points_with_a_reflection_in_the_data_still_give_a_rotation():
    rng = np.random.default_rng(33)
    P = np.column_stack([rng.normal(size=(8, 2)), np.zeros(8)])
    D = P * [1, 1, -1]  # mirror of a plane is reachable by a proper rotation
    tf = solve_rigid_alignment(pairs_of(P, D))
    assert np.linalg.det(tf.rotation) == pytest.approx(1.0, abs=1e-9)
    assert tf.rms_residual < 1e-9


def test_to_geographic():
    I = GeoTransform(np.eye(3), np.zeros(3), 0.0)
    assert np.array_equal(to_geographic(I, [1, 2, 3]), [1, 2, 3])
    T = GeoTransform(np.eye(3), np.array([5.0, -2.0, 1.0]), 0.0)
    assert np.array_equal(to_geographic(T, [0, 0, 0]), [5, -2, 1])
    rng = np.random.default_rng(34)
    R, t, o = Rotation.random(random_state=rng).as_matrix(), rng.normal(size=3), rng.normal(size=3)
    assert np.allclose(to_geographic(GeoTransform(R, t, 0.0), o), [R[i] @ o + t[i] for i in range(3)], atol=1e-12)


def _lib(centers):
    det = (SemanticDetection(Category.SIGN, 1.0, 1.0, 5.0, 5.0),)
    return build_library([ElementFrame(fid, 0.0, Pose.from_center(np.eye(3), c), np.asarray(c, float) + 1000.0, det)
                          for fid, c in centers])


def test_select_nearest_frames():
    lib = _lib([(i, [float(i), 0.0, 0.0]) for i in range(3)])
    assert len(select_nearest_frames(lib, [0, 0, 0], 3)) == 3
    dists = [7.0, 2.0, 9.0, 1.0, 5.0, 3.0, 8.0, 6.0, 4.0, 10.0]
    lib = _lib([(i, [d, 0.0, 0.0]) for i, d in enumerate(dists)])
    got = [c.p[0] for c in select_nearest_frames(lib, [0, 0, 0], 3)]
    assert got == [1.0, 2.0, 3.0]
    lib = _lib([(5, [0.0, 2.0, 0.0]), (3, [2.0, 0.0, 0.0]), (9, [0.0, 0.0, 1.0]), (1, [0.0, 0.0, 9.0])])
    got = select_nearest_frames(lib, [0, 0, 0], 3)
    assert [c.p.tolist() for c in got] == [[0, 0, 1], [2, 0, 0], [0, 2, 0]]  # 3 before 5 at equal distance
    assert np.allclose(got[0].d, [1000, 1000, 1001])
    with pytest.raises(InsufficientPoints):
        select_nearest_frames(lib, [0, 0, 0], 5)


def test_left_invariance():
    rng = np.random.default_rng(35)
    for _ in range(10):
        P = rng.normal(size=(12, 3)) * 15
        D = P @ Rotation.random(random_state=rng).as_matrix().T + rng.normal(size=(12, 3)) * 0.2
        G = Pose(Rotation.random(random_state=rng).as_matrix(), rng.normal(size=3) * 50)
        a = solve_rigid_alignment(pairs_of(P, D))
        b = solve_rigid_alignment(pairs_of(P @ G.rotation.T + G.translation, D))
        assert np.allclose(b.rotation @ G.rotation, a.rotation, atol=1e-9)
        assert np.allclose(b.rotation @ G.translation + b.translation, a.translation, atol=1e-9)


def test_solution_is_a_local_minimum():
    rng = np.random.default_rng(36)
    P = rng.normal(size=(20, 3)) * 10
    D = P @ Rotation.random(random_state=rng).as_matrix().T + rng.normal(size=(20, 3))
    tf = solve_rigid_alignment(pairs_of(P, D))
    best = alignment_cost(tf.rotation, tf.translation, pairs_of(P, D))
    for _ in range(100):
        d = rng.normal(size=6)
        d *= 1e-3 / np.linalg.norm(d)
        step = se3_exp(d)
        R = tf.rotation @ step.rotation
        t = tf.rotation @ step.translation + tf.translation
        assert alignment_cost(R, t, pairs_of(P, D)) >= best


def test_residual_matches_noise_level():
    sigma = 0.1
    for seed in range(20):
        rng = np.random.default_rng(seed)
        P = rng.normal(size=(50, 3)) * 30
        D = P @ Rotation.random(random_state=rng).as_matrix().T + rng.normal(size=3) + rng.normal(size=(50, 3)) * sigma
        rms = solve_rigid_alignment(pairs_of(P, D)).rms_residual
        assert 0.5 * sigma <= rms <= 1.5 * sigma


def test_suspicious_flag():
    assert GeoTransform(np.eye(3), np.zeros(3), 0.31).is_suspicious(0.1)
    assert not GeoTransform(np.eye(3), np.zeros(3), 0.29).is_suspicious(0.1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(3, 30))
def test_noiseless_recovery_property(seed, n):
    rng = np.random.default_rng(seed)
    R0 = Rotation.random(random_state=rng).as_matrix()
    P = rng.normal(size=(n, 3)) * 10
    tf = solve_rigid_alignment(pairs_of(P, P @ R0.T + 3.0))
    assert np.allclose(tf.rotation, R0, atol=1e-8)
