"""Rigid-body geometry: quaternion rotations, SE(3)/Sim(3) transforms,
a pinhole camera model and se(3) exp/log maps.

Conventions used across the package:

* Quaternions are stored (w, x, y, z), unit norm, canonicalized to w >= 0.
* RigidTransform maps points from its source frame into its target frame:
  ``p_target = R @ p_source + t``. ``compose(a, b)`` applies ``b`` first.
* Tait-Bryan angles are intrinsic Z-Y-X (yaw, pitch, roll), each in (-pi, pi].
* se(3) twists are ordered (wx, wy, wz, vx, vy, vz): rotation part first.
* The camera model is a pure pinhole (no distortion): u = fx*x/z + cx.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import SkyloopError

_QUAT_NORM_TOL = 1e-9


class NonPositiveDepth(SkyloopError):
    """Point at or behind the camera plane cannot be projected."""


class LogNearPi(SkyloopError):
    """Rotation angle within 1e-6 of pi; the log map is not unique there."""


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a > math.pi:
        a -= 2.0 * math.pi
    elif a <= -math.pi:
        a += 2.0 * math.pi
    return a


@dataclass(frozen=True)
class Rotation:
    """Unit quaternion, stored (w, x, y, z) with w >= 0."""

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        n = math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)
        if n < _QUAT_NORM_TOL:
            raise ValueError("zero-norm quaternion")
        w, x, y, z = self.w / n, self.x / n, self.y / n, self.z / n
        if w < 0.0:
            w, x, y, z = -w, -x, -y, -z
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", z)

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(1.0, 0.0, 0.0, 0.0)

    @staticmethod
    def from_axis_angle(axis, angle: float) -> "Rotation":
        axis = np.asarray(axis, dtype=float)
        n = float(np.linalg.norm(axis))
        if n == 0.0:
            raise ValueError("zero rotation axis")
        axis = axis / n
        h = 0.5 * angle
        s = math.sin(h)
        return Rotation(math.cos(h), axis[0] * s, axis[1] * s, axis[2] * s)

    @staticmethod
    def from_rotvec(v) -> "Rotation":
        v = np.asarray(v, dtype=float)
        angle = float(np.linalg.norm(v))
        if angle < 1e-12:
            # first-order quaternion, renormalized by the constructor
            return Rotation(1.0, 0.5 * v[0], 0.5 * v[1], 0.5 * v[2])
        return Rotation.from_axis_angle(v / angle, angle)

    @staticmethod
    def from_yaw(psi: float) -> "Rotation":
        return Rotation(math.cos(0.5 * psi), 0.0, 0.0, math.sin(0.5 * psi))

    @staticmethod
    def from_matrix(m) -> "Rotation":
        """Shepperd's method: pick the largest diagonal combination."""
        m = np.asarray(m, dtype=float)
        t = m[0, 0] + m[1, 1] + m[2, 2]
        if t > 0.0:
            s = math.sqrt(t + 1.0) * 2.0
            return Rotation(0.25 * s, (m[2, 1] - m[1, 2]) / s,
                            (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s)
        if m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            return Rotation((m[2, 1] - m[1, 2]) / s, 0.25 * s,
                            (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s)
        if m[1, 1] >= m[2, 2]:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            return Rotation((m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
                            0.25 * s, (m[1, 2] + m[2, 1]) / s)
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        return Rotation((m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                        (m[1, 2] + m[2, 1]) / s, 0.25 * s)

    def matrix(self) -> np.ndarray:
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])

    def quat(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def compose(self, other: "Rotation") -> "Rotation":
        w1, x1, y1, z1 = self.w, self.x, self.y, self.z
        w2, x2, y2, z2 = other.w, other.x, other.y, other.z
        return Rotation(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )

    def inverse(self) -> "Rotation":
        return Rotation(self.w, -self.x, -self.y, -self.z)

    def rotate(self, v) -> np.ndarray:
        return self.matrix() @ np.asarray(v, dtype=float)

    def angle_to(self, other: "Rotation") -> float:
        """Geodesic angle between two rotations, in [0, pi].

        Uses atan2 on the relative quaternion, which keeps full precision
        near zero where acos(dot) does not.
        """
        rel = self.inverse().compose(other)
        sin_half = math.sqrt(rel.x**2 + rel.y**2 + rel.z**2)
        return 2.0 * math.atan2(sin_half, abs(rel.w))


def slerp(a: Rotation, b: Rotation, u: float) -> Rotation:
    """Spherical interpolation from a (u=0) to b (u=1) along the short arc."""
    qa, qb = a.quat(), b.quat()
    d = float(np.dot(qa, qb))
    if d < 0.0:
        qb, d = -qb, -d
    if d > 1.0 - 1e-12:
        q = (1.0 - u) * qa + u * qb
    else:
        th = math.acos(min(1.0, d))
        q = (math.sin((1.0 - u) * th) * qa + math.sin(u * th) * qb) / math.sin(th)
    return Rotation(q[0], q[1], q[2], q[3])


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) element: p_out = rotation @ p_in + translation."""

    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=float).reshape(3).copy()
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(Rotation.identity(), np.zeros(3))

    @staticmethod
    def from_matrix(m) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        return RigidTransform(Rotation.from_matrix(m[:3, :3]), m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.matrix()
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class SimilarityTransform:
    """Sim(3) element: p_out = scale * rotation @ p_in + translation."""

    scale: float
    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        if not self.scale > 0.0:
            raise ValueError("similarity scale must be positive")
        t = np.asarray(self.translation, dtype=float).reshape(3).copy()
        object.__setattr__(self, "translation", t)

    def apply(self, p) -> np.ndarray:
        return self.scale * self.rotation.rotate(p) + self.translation

    def apply_many(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return self.scale * pts @ self.rotation.matrix().T + self.translation

    def inverse(self) -> "SimilarityTransform":
        rinv = self.rotation.inverse()
        return SimilarityTransform(
            1.0 / self.scale, rinv, -rinv.rotate(self.translation) / self.scale)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0.0 and self.fy > 0.0):
            raise ValueError("focal lengths must be positive")
        if not (0.0 <= self.cx < self.width and 0.0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


class TaitBryanAngles:
    """Intrinsic Z-Y-X angle triple (yaw, pitch, roll), each in (-pi, pi]."""

    __slots__ = ("yaw", "pitch", "roll")

    def __init__(self, yaw: float, pitch: float, roll: float):
        self.yaw = yaw
        self.pitch = pitch
        self.roll = roll

    def __iter__(self):
        return iter((self.yaw, self.pitch, self.roll))

    def __repr__(self):
        return f"TaitBryanAngles(yaw={self.yaw}, pitch={self.pitch}, roll={self.roll})"

    def to_rotation(self) -> Rotation:
        return (Rotation.from_yaw(self.yaw)
                .compose(Rotation.from_axis_angle((0, 1, 0), self.pitch))
                .compose(Rotation.from_axis_angle((1, 0, 0), self.roll)))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """a after b: (a o b)(p) = a(b(p))."""
    return RigidTransform(a.rotation.compose(b.rotation),
                          a.rotation.rotate(b.translation) + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rinv = t.rotation.inverse()
    return RigidTransform(rinv, -rinv.rotate(t.translation))


def apply(t: RigidTransform, p) -> np.ndarray:
    return t.rotation.rotate(p) + t.translation


def apply_many(t: RigidTransform, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    return pts @ t.rotation.matrix().T + t.translation


MIN_PROJECT_DEPTH = 1e-9
_MIN_DEPTH = MIN_PROJECT_DEPTH


def project(k: CameraIntrinsics, p_cam) -> np.ndarray:
    """Pinhole projection of a camera-frame point to pixel coordinates."""
    p = np.asarray(p_cam, dtype=float)
    z = p[2]
    if z <= _MIN_DEPTH:
        raise NonPositiveDepth(f"depth {z} not projectable")
    return np.array([k.fx * p[0] / z + k.cx, k.fy * p[1] / z + k.cy])


def project_many(k: CameraIntrinsics, pts_cam: np.ndarray) -> np.ndarray:
    """Vectorized pinhole projection; caller guarantees positive depths.

    Uses the same arithmetic expression as project() so scalar and batched
    paths agree bit for bit.
    """
    pts = np.asarray(pts_cam, dtype=float)
    z = pts[..., 2]
    return np.stack([k.fx * pts[..., 0] / z + k.cx,
                     k.fy * pts[..., 1] / z + k.cy], axis=-1)


def to_tait_bryan(r: Rotation) -> TaitBryanAngles:
    """Intrinsic Z-Y-X decomposition; at |pitch| = pi/2 roll is set to 0."""
    m = r.matrix()
    s = -m[2, 0]
    if s > 1.0:
        s = 1.0
    elif s < -1.0:
        s = -1.0
    pitch = math.asin(s)
    if abs(s) > 1.0 - 1e-12:
        # gimbal lock: only yaw +- roll observable, report roll = 0
        yaw = math.atan2(-m[0, 1], m[1, 1])
        roll = 0.0
    else:
        yaw = math.atan2(m[1, 0], m[0, 0])
        roll = math.atan2(m[2, 1], m[2, 2])
    return TaitBryanAngles(wrap_angle(yaw), wrap_angle(pitch), wrap_angle(roll))


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


_SMALL_ANGLE = 1e-8


def se3_exp(twist) -> RigidTransform:
    """Exponential map from a twist (wx, wy, wz, vx, vy, vz) to SE(3)."""
    xi = np.asarray(twist, dtype=float).reshape(6)
    w, v = xi[:3], xi[3:]
    th = float(np.linalg.norm(w))
    wx = _skew(w)
    if th < _SMALL_ANGLE:
        # second-order Taylor expansions of exp and of the V integral
        rot = np.eye(3) + wx + 0.5 * (wx @ wx)
        vmat = np.eye(3) + 0.5 * wx + (wx @ wx) / 6.0
    else:
        a = math.sin(th) / th
        b = (1.0 - math.cos(th)) / (th * th)
        c = (1.0 - a) / (th * th)
        rot = np.eye(3) + a * wx + b * (wx @ wx)
        vmat = np.eye(3) + b * wx + c * (wx @ wx)
    return RigidTransform(Rotation.from_matrix(rot), vmat @ v)


def se3_log(t: RigidTransform) -> np.ndarray:
    """Logarithm map; raises LogNearPi within 1e-6 of the pi singularity."""
    q = t.rotation
    # rotation angle from the quaternion: stable near identity
    sin_half = math.sqrt(q.x**2 + q.y**2 + q.z**2)
    th = 2.0 * math.atan2(sin_half, q.w)
    if abs(th - math.pi) < 1e-6:
        raise LogNearPi(f"rotation angle {th} too close to pi")
    if th < _SMALL_ANGLE:
        w = 2.0 * np.array([q.x, q.y, q.z])
    else:
        w = (th / sin_half) * np.array([q.x, q.y, q.z])
    wx = _skew(w)
    if th < _SMALL_ANGLE:
        vinv = np.eye(3) - 0.5 * wx + (wx @ wx) / 12.0
    else:
        b = (1.0 - math.cos(th)) / (th * th)
        a = math.sin(th) / th
        coef = (1.0 - a / (2.0 * b)) / (th * th)
        vinv = np.eye(3) - 0.5 * wx + coef * (wx @ wx)
    v = vinv @ t.translation
    return np.concatenate([w, v])


def huber_weight(residual: float, delta: float) -> float:
    """IRLS weight of the Huber loss: 1 inside delta, delta/|r| outside."""
    r = abs(residual)
    if r <= delta:
        return 1.0
    return delta / r


def huber_cost(residual_norms: np.ndarray, delta: float) -> float:
    """Total Huber objective over residual magnitudes (quadratic core,
    linear tails)."""
    r = np.abs(np.asarray(residual_norms, dtype=float))
    quad = r <= delta
    return float(np.sum(r[quad] ** 2) + np.sum(2.0 * delta * r[~quad] - delta**2))
