import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from handvla import geom
from handvla.geom import (
    BehindCameraError,
    CameraIntrinsics,
    FieldOfView,
    Pose,
    Rotation,
    euler_from_rotation,
    integrate_deltas,
    project,
    relative_delta,
    rotation_from_euler,
    unproject,
)


def _hand_composed(a, b, c):
    ca, sa = math.cos(a), math.sin(a)
    cb, sb = math.cos(b), math.sin(b)
    cc, sc = math.cos(c), math.sin(c)
    rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rz = np.array([[cc, -sc, 0], [sc, cc, 0], [0, 0, 1]])
    return rx @ ry @ rz


def _random_pose(rng, scale=1.0):
    return Pose.from_euler(rng.uniform(-math.pi, math.pi, 3) * [1, 0.45, 1], rng.normal(size=3) * scale)


def test_euler_zero_is_identity():
    assert np.array_equal(rotation_from_euler([0, 0, 0]).matrix, np.eye(3))
    assert np.allclose(euler_from_rotation(Rotation.identity()), 0)


def test_x_quarter_turn_maps_y_to_z():
    r = rotation_from_euler([math.pi / 2, 0, 0])
    assert np.allclose(r.apply([0, 1, 0]), [0, 0, 1], atol=1e-15)


def test_euler_matches_hand_composed_product_and_round_trips():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = np.array([rng.uniform(-math.pi, math.pi), rng.uniform(-1.4, 1.4), rng.uniform(-math.pi, math.pi)])
        r = rotation_from_euler(a)
        assert np.allclose(r.matrix, _hand_composed(*a), atol=1e-14)
        assert np.max(np.abs(euler_from_rotation(r) - a)) < 1e-9
        assert abs(np.linalg.det(r.matrix) - 1) < 1e-9
        assert np.allclose(r.matrix @ r.matrix.T, np.eye(3), atol=1e-9)


def test_gimbal_lock_pins_third_angle():
    for b in (math.pi / 2, -math.pi / 2):
        m = _hand_composed(0.3, b, 0.7)
        e = euler_from_rotation(Rotation(m))
        assert e[2] == 0.0
        assert abs(e[1] - b) < 1e-7
        assert np.allclose(rotation_from_euler(e).matrix, m, atol=1e-9)


def test_non_finite_euler_rejected():
    with pytest.raises(ValueError):
        rotation_from_euler([0, np.nan, 0])


def test_batch_conversions_agree_with_scalar():
    rng = np.random.default_rng(1)
    a = rng.uniform(-1.4, 1.4, size=(50, 3))
    mats = geom.euler_to_matrix_batch(a)
    for i in range(50):
        assert np.allclose(mats[i], geom.euler_to_matrix(a[i]), atol=1e-15)
    assert np.allclose(geom.matrix_to_euler_batch(mats), a, atol=1e-12)


def test_project_examples():
    k = CameraIntrinsics(500, 500, 320, 240, 640, 480)
    assert np.allclose(project(k, [0, 0, 1]), [320, 240])
    assert project(k, [0.1, 0, 1])[0] == pytest.approx(370)
    with pytest.raises(BehindCameraError):
        project(k, [0, 0, 0])
    with pytest.raises(BehindCameraError):
        project(k, [0, 0, -1])


def test_project_unproject_round_trip():
    rng = np.random.default_rng(2)
    k = CameraIntrinsics(612.5, 598.0, 311.2, 250.9, 640, 480)
    for _ in range(50):
        p = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.2, 5)])
        px = project(k, p)
        assert np.allclose(unproject(k, px, p[2]), p, atol=1e-12)


@given(
    st.floats(-2, 2), st.floats(-2, 2), st.floats(0.05, 10), st.floats(0.01, 100)
)
def test_project_scale_invariant(x, y, z, lam):
    k = CameraIntrinsics(500, 480, 320, 240, 640, 480)
    p = np.array([x, y, z])
    assert np.allclose(project(k, p), project(k, lam * p), rtol=1e-12, atol=1e-9)


def test_relative_delta_examples():
    p = _random_pose(np.random.default_rng(3))
    dt, dr = relative_delta(p, p)
    assert np.allclose(dt, 0) and np.allclose(dr, 0, atol=1e-15)
    q = Pose(p.rotation, p.translation + [0, 0, 0.05])
    dt, dr = relative_delta(p, q)
    assert np.allclose(dt, [0, 0, 0.05]) and np.allclose(dr, 0, atol=1e-15)


def test_integrate_deltas_trivial():
    p = _random_pose(np.random.default_rng(4))
    assert integrate_deltas(p, []) == [p]
    out = integrate_deltas(p, [(np.zeros(3), np.zeros(3))])
    assert len(out) == 2
    assert np.allclose(out[1].as_matrix(), p.as_matrix(), atol=1e-15)


def test_random_walk_round_trip_vs_direct_composition():
    rng = np.random.default_rng(5)
    for seed in range(5):
        poses = [_random_pose(rng)]
        for _ in range(200):
            step = Pose.from_euler(rng.normal(scale=0.05, size=3), rng.normal(scale=0.02, size=3))
            # direct composition oracle: left rotation step, additive translation
            prev = poses[-1]
            poses.append(Pose(step.rotation @ prev.rotation, prev.translation + step.translation))
        deltas = [relative_delta(a, b) for a, b in zip(poses[:-1], poses[1:])]
        rebuilt = integrate_deltas(poses[0], deltas)
        assert np.max(np.abs(rebuilt[-1].as_matrix() - poses[-1].as_matrix())) < 1e-7


def test_orthonormality_under_many_compositions():
    rng = np.random.default_rng(6)
    r = Rotation.identity()
    steps = [rotation_from_euler(rng.normal(scale=0.3, size=3)) for _ in range(100)]
    for i in range(10_000):
        r = r @ steps[i % 100]
        if i % 1000 == 999:
            r = r.orthonormalized()
    assert np.max(np.abs(r.matrix @ r.matrix.T - np.eye(3))) < 1e-8
    assert abs(np.linalg.det(r.matrix) - 1) < 1e-8


def test_pose_inverse_and_associativity():
    rng = np.random.default_rng(7)
    a, b, c = (_random_pose(rng) for _ in range(3))
    assert np.allclose((a @ a.inv()).as_matrix(), np.eye(4), atol=1e-9)
    assert np.allclose(((a @ b) @ c).as_matrix(), (a @ (b @ c)).as_matrix(), atol=1e-12)
    pts = rng.normal(size=(5, 3))
    assert np.allclose((a @ b).apply(pts), a.apply(b.apply(pts)))


def test_fov_intrinsics_round_trip():
    rng = np.random.default_rng(8)
    for _ in range(20):
        w, h = int(rng.integers(100, 2000)), int(rng.integers(100, 2000))
        fov = FieldOfView(rng.uniform(0.2, 2.8), rng.uniform(0.2, 2.8))
        fx, fy = fov.focal_lengths(w, h)
        back = CameraIntrinsics(fx, fy, w / 2, h / 2, w, h).fov()
        assert abs(back.horizontal_rad - fov.horizontal_rad) < 1e-12
        assert abs(back.vertical_rad - fov.vertical_rad) < 1e-12
    with pytest.raises(ValueError):
        FieldOfView(math.pi, 1.0)


def test_quaternion_round_trip():
    rng = np.random.default_rng(9)
    for _ in range(50):
        m = rotation_from_euler(rng.uniform(-3, 3, 3)).matrix
        assert np.allclose(geom.quat_to_matrix(geom.matrix_to_quat(m)), m, atol=1e-12)


def test_values_are_immutable():
    r = Rotation.identity()
    with pytest.raises(ValueError):
        r.matrix[0, 0] = 2.0
