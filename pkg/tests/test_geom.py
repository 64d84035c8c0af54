import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation as SciRot

from skyloop import geom
from skyloop.geom import (
    CameraIntrinsics,
    LogNearPi,
    NonPositiveDepth,
    RigidTransform,
    Rotation,
    SimilarityTransform,
    huber_weight,
    se3_exp,
    se3_log,
    to_tait_bryan,
    wrap_angle,
)


def random_rotation(rng):
    q = rng.normal(size=4)
    return Rotation(q[0], q[1], q[2], q[3])


def random_transform(rng, t_scale=2.0):
    return RigidTransform(random_rotation(rng), rng.normal(size=3) * t_scale)


# ---------------------------------------------------------------- rotations


def test_quaternion_normalized_and_canonical():
    rng = np.random.default_rng(11)
    for _ in range(200):
        r = random_rotation(rng)
        n = math.sqrt(r.w**2 + r.x**2 + r.y**2 + r.z**2)
        assert abs(n - 1.0) <= 1e-9
        assert r.w >= 0.0


def test_zero_quaternion_rejected():
    with pytest.raises(ValueError):
        Rotation(0.0, 0.0, 0.0, 0.0)


def test_rotation_matrix_matches_scipy():
    rng = np.random.default_rng(12)
    for _ in range(100):
        r = random_rotation(rng)
        # scipy stores (x, y, z, w)
        m_ref = SciRot.from_quat([r.x, r.y, r.z, r.w]).as_matrix()
        assert np.allclose(r.matrix(), m_ref, atol=1e-12)


def test_matrix_round_trip():
    rng = np.random.default_rng(13)
    for _ in range(200):
        r = random_rotation(rng)
        r2 = Rotation.from_matrix(r.matrix())
        assert np.allclose(r.quat(), r2.quat(), atol=1e-9)


def test_compose_matches_matrix_product():
    rng = np.random.default_rng(14)
    for _ in range(50):
        a, b = random_rotation(rng), random_rotation(rng)
        assert np.allclose(a.compose(b).matrix(), a.matrix() @ b.matrix(),
                           atol=1e-12)


def test_rotation_preserves_norm():
    rng = np.random.default_rng(15)
    for _ in range(100):
        r = random_rotation(rng)
        v = rng.normal(size=3) * 10.0
        assert abs(np.linalg.norm(r.rotate(v)) - np.linalg.norm(v)) < 1e-9


def test_slerp_endpoints_and_midpoint():
    a = Rotation.from_yaw(0.0)
    b = Rotation.from_yaw(1.0)
    assert geom.slerp(a, b, 0.0).angle_to(a) < 1e-12
    assert geom.slerp(a, b, 1.0).angle_to(b) < 1e-12
    mid = geom.slerp(a, b, 0.5)
    assert abs(to_tait_bryan(mid).yaw - 0.5) < 1e-12


# --------------------------------------------------------------- transforms


def test_compose_invert_identity():
    rng = np.random.default_rng(16)
    for _ in range(100):
        t = random_transform(rng)
        ident = geom.compose(t, geom.invert(t))
        assert np.linalg.norm(ident.translation) <= 1e-9
        assert ident.rotation.angle_to(Rotation.identity()) <= 1e-9


def test_apply_matches_homogeneous_matrix():
    rng = np.random.default_rng(17)
    for _ in range(50):
        t = random_transform(rng)
        p = rng.normal(size=3)
        expected = (t.matrix() @ np.array([p[0], p[1], p[2], 1.0]))[:3]
        assert np.allclose(geom.apply(t, p), expected, atol=1e-12)


def test_compose_is_application_order():
    rng = np.random.default_rng(18)
    a, b = random_transform(rng), random_transform(rng)
    p = rng.normal(size=3)
    assert np.allclose(geom.apply(geom.compose(a, b), p),
                       geom.apply(a, geom.apply(b, p)), atol=1e-12)


def test_similarity_scale_positive_and_inverse():
    rng = np.random.default_rng(19)
    with pytest.raises(ValueError):
        SimilarityTransform(0.0, Rotation.identity(), np.zeros(3))
    s = SimilarityTransform(2.5, random_rotation(rng), rng.normal(size=3))
    p = rng.normal(size=3)
    assert np.allclose(s.inverse().apply(s.apply(p)), p, atol=1e-12)


# ------------------------------------------------------------------- camera


def _project_oracle(fx, fy, cx, cy, p):
    # independent arithmetic for the pinhole model
    return np.array([fx * (p[0] / p[2]) + cx, fy * (p[1] / p[2]) + cy])


def test_project_example_center_point():
    k = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)
    uv = geom.project(k, np.array([0.0, 0.0, 2.0]))
    assert np.allclose(uv, [320.0, 240.0], atol=1e-12)


def test_project_against_oracle():
    rng = np.random.default_rng(20)
    k = CameraIntrinsics(430.0, 415.0, 310.5, 250.25, 640, 480)
    for _ in range(200):
        p = np.array([rng.normal(), rng.normal(), rng.uniform(0.1, 20.0)])
        assert np.allclose(geom.project(k, p),
                           _project_oracle(430.0, 415.0, 310.5, 250.25, p),
                           atol=1e-9)


def test_project_rejects_non_positive_depth():
    k = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)
    for z in (0.0, -1.0, 1e-12):
        with pytest.raises(NonPositiveDepth):
            geom.project(k, np.array([0.1, 0.1, z]))


def test_project_many_matches_scalar_bitwise():
    rng = np.random.default_rng(21)
    k = CameraIntrinsics(500.0, 490.0, 320.0, 240.0, 640, 480)
    pts = np.column_stack([rng.normal(size=64), rng.normal(size=64),
                           rng.uniform(0.5, 10.0, size=64)])
    batch = geom.project_many(k, pts)
    for i in range(64):
        single = geom.project(k, pts[i])
        assert batch[i, 0] == single[0] and batch[i, 1] == single[1]


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0.0, 500.0, 320.0, 240.0, 640, 480)
    with pytest.raises(ValueError):
        CameraIntrinsics(500.0, 500.0, 700.0, 240.0, 640, 480)


# -------------------------------------------------------------- tait-bryan


def test_tait_bryan_quarter_yaw_example():
    q = Rotation(math.cos(math.pi / 4), 0.0, 0.0, math.sin(math.pi / 4))
    tb = to_tait_bryan(q)
    assert abs(tb.yaw - math.pi / 2) < 1e-12
    assert abs(tb.pitch) < 1e-12
    assert abs(tb.roll) < 1e-12


def test_tait_bryan_round_trip():
    rng = np.random.default_rng(22)
    count = 0
    while count < 300:
        r = random_rotation(rng)
        tb = to_tait_bryan(r)
        if abs(abs(tb.pitch) - math.pi / 2) < 1e-3:
            continue
        count += 1
        back = tb.to_rotation()
        assert r.angle_to(back) <= 1e-9


def test_tait_bryan_matches_scipy():
    rng = np.random.default_rng(23)
    for _ in range(100):
        r = random_rotation(rng)
        tb = to_tait_bryan(r)
        ref = SciRot.from_quat([r.x, r.y, r.z, r.w]).as_euler("ZYX")
        assert np.allclose([tb.yaw, tb.pitch, tb.roll], ref, atol=1e-9)


def test_tait_bryan_gimbal_lock_roll_zero():
    r = Rotation.from_axis_angle((0, 1, 0), math.pi / 2)
    tb = to_tait_bryan(r)
    assert tb.roll == 0.0
    assert abs(tb.pitch - math.pi / 2) < 1e-9
    assert tb.to_rotation().angle_to(r) < 1e-9


def test_wrap_angle_range():
    for a in np.linspace(-12.0, 12.0, 1001):
        w = wrap_angle(float(a))
        assert -math.pi < w <= math.pi
        # same angle modulo 2 pi
        assert abs(math.sin(w) - math.sin(a)) < 1e-12
        assert abs(math.cos(w) - math.cos(a)) < 1e-12


# ------------------------------------------------------------------ se(3)


def test_se3_exp_pure_translation_example():
    t = se3_exp((0.0, 0.0, 0.0, 1.0, 0.0, 0.0))
    assert np.allclose(t.translation, [1.0, 0.0, 0.0], atol=1e-15)
    assert t.rotation.angle_to(Rotation.identity()) < 1e-15


def test_se3_round_trip_over_magnitudes():
    rng = np.random.default_rng(24)
    for _ in range(400):
        w = rng.normal(size=3)
        nw = np.linalg.norm(w)
        target = rng.uniform(0.0, 3.0)
        if nw > 0:
            w = w * (target / nw)
        xi = np.concatenate([w, rng.normal(size=3) * 2.0])
        t = se3_exp(xi)
        xi2 = se3_log(t)
        assert np.allclose(xi, xi2, atol=1e-9), (xi, xi2)


def test_se3_exp_matches_matrix_exponential():
    from scipy.linalg import expm

    rng = np.random.default_rng(25)
    for _ in range(50):
        xi = rng.normal(size=6)
        m = np.zeros((4, 4))
        m[:3, :3] = geom._skew(xi[:3])
        m[:3, 3] = xi[3:]
        assert np.allclose(se3_exp(xi).matrix(), expm(m), atol=1e-9)


def test_se3_log_near_pi_raises():
    t = RigidTransform(Rotation.from_axis_angle((1, 0, 0), math.pi - 1e-8),
                       np.zeros(3))
    with pytest.raises(LogNearPi):
        se3_log(t)


def test_se3_small_angle_branch():
    xi = np.array([1e-10, -2e-10, 5e-11, 0.3, -0.2, 0.1])
    t = se3_exp(xi)
    assert np.allclose(se3_log(t), xi, atol=1e-15)


# ------------------------------------------------------------------- huber


def test_huber_weight_values():
    assert huber_weight(0.0, 2.0) == 1.0
    assert huber_weight(1.5, 2.0) == 1.0
    assert huber_weight(2.0, 2.0) == 1.0
    assert huber_weight(4.0, 2.0) == 0.5
    assert huber_weight(200.0, 2.0) == 0.01


def test_huber_weight_continuous_and_monotone():
    delta = 1.7
    rs = np.linspace(0.0, 20.0, 4001)
    ws = np.array([huber_weight(float(r), delta) for r in rs])
    assert np.all(ws[1:] <= ws[:-1] + 1e-15)
    # continuity at the boundary
    assert abs(huber_weight(delta - 1e-12, delta)
               - huber_weight(delta + 1e-12, delta)) < 1e-9
