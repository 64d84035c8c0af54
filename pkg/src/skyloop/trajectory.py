"""Timed 6-DoF trajectories: containers, text-format interchange,
closed-form similarity alignment, waypoint extraction and the velocity
controller used to fly waypoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, SkyloopError
from .geom import (
    RigidTransform,
    Rotation,
    SimilarityTransform,
    to_tait_bryan,
    wrap_angle,
)


class TooFewAssociations(SkyloopError):
    """Not enough time-associated samples to align."""


class DegenerateGeometry(SkyloopError):
    """Associated positions are collinear; alignment is ill-posed."""


@dataclass(frozen=True)
class TrajectorySample:
    """One pose sample: timestamp [s] and the body/camera pose in the
    trajectory's reference frame (pose maps local points into that frame)."""

    timestamp: float
    pose: RigidTransform

    @property
    def position(self) -> np.ndarray:
        return self.pose.translation

    @property
    def rotation(self) -> Rotation:
        return self.pose.rotation


class Trajectory:
    """Ordered pose samples with strictly increasing timestamps."""

    def __init__(self, samples: list[TrajectorySample], frame: str = "world"):
        for a, b in zip(samples, samples[1:]):
            if not b.timestamp > a.timestamp:
                raise ValueError("timestamps must be strictly increasing")
        self.samples = list(samples)
        self.frame = frame

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i) -> TrajectorySample:
        return self.samples[i]

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([s.timestamp for s in self.samples])

    @property
    def positions(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, 3))
        return np.stack([s.position for s in self.samples])

    def arc_length(self) -> float:
        p = self.positions
        if len(p) < 2:
            return 0.0
        return float(np.sum(np.linalg.norm(np.diff(p, axis=0), axis=1)))

    def transformed(self, s: SimilarityTransform) -> "Trajectory":
        """Apply a similarity to every pose (rotations compose, translations
        map through the full similarity)."""
        out = []
        for smp in self.samples:
            out.append(TrajectorySample(
                smp.timestamp,
                RigidTransform(s.rotation.compose(smp.rotation),
                               s.apply(smp.position))))
        return Trajectory(out, frame=self.frame)


# ------------------------------------------------------------- text format
#
# One sample per line: "timestamp tx ty tz qx qy qz qw", 9 significant
# digits, '#' comment lines ignored. Quaternion is scalar-last on disk.


def format_trajectory(traj: Trajectory) -> str:
    lines = [f"# frame: {traj.frame}"]
    for s in traj.samples:
        q = s.rotation
        vals = (s.timestamp, s.position[0], s.position[1], s.position[2],
                q.x, q.y, q.z, q.w)
        lines.append(" ".join(f"{v:.9g}" for v in vals))
    return "\n".join(lines) + "\n"


def parse_trajectory(text: str, frame: str = "world") -> Trajectory:
    samples = []
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise InputError(f"line {ln}: expected 8 fields, got {len(parts)}")
        try:
            t, tx, ty, tz, qx, qy, qz, qw = (float(p) for p in parts)
        except ValueError as e:
            raise InputError(f"line {ln}: {e}") from e
        try:
            rot = Rotation(qw, qx, qy, qz)
        except ValueError as e:
            raise InputError(f"line {ln}: {e}") from e
        samples.append(TrajectorySample(
            t, RigidTransform(rot, np.array([tx, ty, tz]))))
    try:
        return Trajectory(samples, frame=frame)
    except ValueError as e:
        raise InputError(str(e)) from e


def save_trajectory(traj: Trajectory, path) -> None:
    with open(path, "w") as f:
        f.write(format_trajectory(traj))


def load_trajectory(path) -> Trajectory:
    try:
        with open(path) as f:
            return parse_trajectory(f.read())
    except OSError as e:
        raise InputError(f"cannot read trajectory {path}: {e}") from e


# -------------------------------------------------------------- alignment


def _associate_by_time(est: Trajectory, ref: Trajectory, max_dt: float):
    """Nearest-timestamp greedy association, one-to-one, |dt| <= max_dt.
    Returns (est_indices, ref_indices)."""
    te = est.timestamps
    tr = ref.timestamps
    if len(te) == 0 or len(tr) == 0:
        return np.array([], dtype=int), np.array([], dtype=int)
    pairs = []
    for i, t in enumerate(te):
        j = int(np.argmin(np.abs(tr - t)))
        dt = abs(tr[j] - t)
        if dt <= max_dt:
            pairs.append((dt, i, j))
    pairs.sort()
    used_e, used_r = set(), set()
    ei, ri = [], []
    for _, i, j in pairs:
        if i in used_e or j in used_r:
            continue
        used_e.add(i)
        used_r.add(j)
        ei.append(i)
        ri.append(j)
    order = np.argsort(ei)
    return np.array(ei, dtype=int)[order], np.array(ri, dtype=int)[order]


def _median_period(traj: Trajectory) -> float:
    t = traj.timestamps
    if len(t) < 2:
        return math.inf
    return float(np.median(np.diff(t)))


def align_umeyama(estimated: Trajectory, reference: Trajectory,
                  with_scale: bool = True) -> tuple[SimilarityTransform, float]:
    """Closed-form similarity (or rigid, with_scale=False) alignment of the
    estimated positions onto the reference, least-squares optimal.

    Samples are associated by nearest timestamp within half the median frame
    period. Returns (transform, rmse_after_alignment).

    Raises TooFewAssociations (< 3 pairs) and DegenerateGeometry (collinear
    points, where the rotation is not unique).
    """
    max_dt = 0.5 * min(_median_period(estimated), _median_period(reference))
    if not math.isfinite(max_dt):
        max_dt = 0.0
    ei, ri = _associate_by_time(estimated, reference, max_dt)
    if len(ei) < 3:
        raise TooFewAssociations(f"only {len(ei)} associated samples")
    src = estimated.positions[ei]
    dst = reference.positions[ri]
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / len(src)
    u, d, vt = np.linalg.svd(cov)
    # collinearity check on the source spread
    spread = np.linalg.svd(xs, compute_uv=False)
    if spread[1] <= 1e-9 * max(1.0, spread[0]):
        raise DegenerateGeometry("associated positions are collinear")
    s_mat = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_mat[2, 2] = -1.0
    rot = u @ s_mat @ vt
    if with_scale:
        var_s = np.mean(np.sum(xs * xs, axis=1))
        scale = float(np.trace(np.diag(d) @ s_mat) / var_s)
    else:
        scale = 1.0
    if scale <= 0:
        raise DegenerateGeometry(f"non-positive alignment scale {scale}")
    t = mu_d - scale * rot @ mu_s
    xform = SimilarityTransform(scale, Rotation.from_matrix(rot), t)
    resid = xform.apply_many(src) - dst
    rmse = float(np.sqrt(np.mean(np.sum(resid * resid, axis=1))))
    return xform, rmse


def rescale(traj: Trajectory, scale: float) -> Trajectory:
    """Scale all positions about the origin, leaving rotations untouched."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    return traj.transformed(
        SimilarityTransform(scale, Rotation.identity(), np.zeros(3)))


# -------------------------------------------------------------- waypoints


@dataclass(frozen=True)
class Waypoint:
    position: np.ndarray
    yaw: float
    position_tolerance: float = 0.10
    yaw_tolerance: float = 0.15

    def __post_init__(self):
        object.__setattr__(self, "position",
                           np.asarray(self.position, dtype=float).reshape(3))


def to_waypoints(traj: Trajectory, spacing: float = 0.5,
                 position_tolerance: float = 0.10,
                 yaw_tolerance: float = 0.15) -> list[Waypoint]:
    """Subsample a trajectory by arc length.

    The first and last samples always become waypoints; intermediate samples
    are kept whenever the accumulated arc length since the previous kept
    sample reaches `spacing`. Yaw comes from each kept pose.
    """
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    if spacing <= 0:
        raise ValueError("spacing must be positive")

    def wp(sample: TrajectorySample) -> Waypoint:
        yaw = to_tait_bryan(sample.rotation).yaw
        return Waypoint(sample.position.copy(), yaw,
                        position_tolerance, yaw_tolerance)

    out = [wp(traj[0])]
    acc = 0.0
    for idx in range(1, len(traj) - 1):
        acc += float(np.linalg.norm(traj[idx].position - traj[idx - 1].position))
        if acc >= spacing:
            out.append(wp(traj[idx]))
            acc = 0.0
    if len(traj) > 1:
        out.append(wp(traj[-1]))
    return out


# ------------------------------------------------------------- controller


@dataclass(frozen=True)
class VelocityCommand:
    """World-frame linear velocity [m/s] plus yaw rate [rad/s]."""

    linear: np.ndarray
    yaw_rate: float

    def __post_init__(self):
        object.__setattr__(self, "linear",
                           np.asarray(self.linear, dtype=float).reshape(3))


@dataclass(frozen=True)
class ControllerGains:
    kp_lin: float = 1.2
    kp_yaw: float = 1.5
    v_max: float = 1.0
    omega_max: float = 1.5


def velocity_command(position: np.ndarray, yaw: float, wp: Waypoint,
                     gains: ControllerGains) -> VelocityCommand:
    """Proportional waypoint controller with hard magnitude clamps.

    linear = clamp_norm(kp_lin * (p_des - p), v_max)
    yaw_rate = clamp(kp_yaw * wrap(yaw_des - yaw), omega_max)
    """
    err = wp.position - np.asarray(position, dtype=float)
    v = gains.kp_lin * err
    n = float(np.linalg.norm(v))
    if n > gains.v_max:
        v = v * (gains.v_max / n)
    w = gains.kp_yaw * wrap_angle(wp.yaw - yaw)
    if w > gains.omega_max:
        w = gains.omega_max
    elif w < -gains.omega_max:
        w = -gains.omega_max
    return VelocityCommand(v, w)


def waypoint_reached(position: np.ndarray, yaw: float, wp: Waypoint) -> bool:
    """Position AND yaw must both be inside their tolerances."""
    pos_ok = float(np.linalg.norm(wp.position - np.asarray(position, dtype=float))) \
        <= wp.position_tolerance
    yaw_ok = abs(wrap_angle(wp.yaw - yaw)) <= wp.yaw_tolerance
    return pos_ok and yaw_ok
