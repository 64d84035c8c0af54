"""Synthetic world: point-landmark scenes rendered through a pinhole camera,
plus a first-order velocity-response drone that flies in them.

Rendering model: landmarks are splatted as anti-aliased Gaussian sprites over
a mid-gray background (checkerboard planes, when present, are ray-sampled per
pixel first and replace the background). Occlusion between landmarks is
ignored; sprites add. Landmark centers go through geom.project, so projected
coordinates and rendered sprite centroids share one arithmetic path.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geom
from .errors import InputError
from .features import GrayImage
from .frames import FrameSequence
from .geom import CameraIntrinsics, RigidTransform, Rotation, slerp
from .trajectory import Trajectory, TrajectorySample, VelocityCommand

MID_GRAY = 128
MIN_LANDMARKS = 100

# Camera mounted looking along body +x: camera right = body -y,
# camera down = body -z, camera forward (+z) = body +x.
MOUNT_ROTATION = Rotation.from_matrix(np.array([
    [0.0, 0.0, 1.0],
    [-1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
]))
DEFAULT_MOUNTING = RigidTransform(MOUNT_ROTATION, np.zeros(3))


@dataclass(frozen=True)
class CheckerPlane:
    """Finite checkerboard: origin, unit normal, square cell size [m] and
    half-extents [m] along the two in-plane axes."""

    origin: np.ndarray
    normal: np.ndarray
    cell: float
    extent: tuple[float, float]
    tone_a: int = 80
    tone_b: int = 176

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=float).reshape(3)
        n = np.asarray(self.normal, dtype=float).reshape(3)
        nn = np.linalg.norm(n)
        if nn == 0:
            raise ValueError("plane normal must be nonzero")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "normal", n / nn)
        if self.cell <= 0:
            raise ValueError("cell size must be positive")

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        up = np.array([0.0, 0.0, 1.0])
        if abs(float(np.dot(self.normal, up))) > 0.99:
            up = np.array([1.0, 0.0, 0.0])
        u = np.cross(self.normal, up)
        u = u / np.linalg.norm(u)
        v = np.cross(self.normal, u)
        return u, v


@dataclass
class Scene:
    """Landmark field with optional checkerboard planes.

    positions: (N, 3) world coordinates, N >= 100, all inside bounds.
    radius_px: (N,) Gaussian sprite sigma in pixels.
    brightness: (N,) sprite peak intensity, 0..255.
    bounds: (lo, hi) corners of the world box.
    """

    positions: np.ndarray
    radius_px: np.ndarray
    brightness: np.ndarray
    bounds: tuple[np.ndarray, np.ndarray]
    planes: list[CheckerPlane] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.radius_px = np.asarray(self.radius_px, dtype=float).reshape(-1)
        self.brightness = np.asarray(self.brightness, dtype=float).reshape(-1)
        lo = np.asarray(self.bounds[0], dtype=float).reshape(3)
        hi = np.asarray(self.bounds[1], dtype=float).reshape(3)
        self.bounds = (lo, hi)
        n = len(self.positions)
        if n < MIN_LANDMARKS:
            raise ValueError(f"a scene needs >= {MIN_LANDMARKS} landmarks, got {n}")
        if len(self.radius_px) != n or len(self.brightness) != n:
            raise ValueError("per-landmark arrays must align with positions")
        if np.any(self.positions < lo - 1e-9) or np.any(self.positions > hi + 1e-9):
            raise ValueError("landmarks must lie inside the scene bounds")
        if np.any(self.radius_px <= 0):
            raise ValueError("sprite radii must be positive")


def scene_to_json(scene: Scene) -> str:
    data = {
        "seed": scene.seed,
        "bounds": {"lo": scene.bounds[0].tolist(),
                   "hi": scene.bounds[1].tolist()},
        "landmarks": [
            {"position": scene.positions[i].tolist(),
             "radius_px": float(scene.radius_px[i]),
             "brightness": float(scene.brightness[i])}
            for i in range(len(scene.positions))
        ],
        "planes": [
            {"origin": p.origin.tolist(), "normal": p.normal.tolist(),
             "cell": p.cell, "extent": list(p.extent),
             "tone_a": p.tone_a, "tone_b": p.tone_b}
            for p in scene.planes
        ],
    }
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def scene_from_json(text: str) -> Scene:
    try:
        data = json.loads(text)
        lms = data["landmarks"]
        positions = np.array([l["position"] for l in lms], dtype=float)
        radius = np.array([l["radius_px"] for l in lms], dtype=float)
        bright = np.array([l["brightness"] for l in lms], dtype=float)
        planes = [CheckerPlane(np.array(p["origin"]), np.array(p["normal"]),
                               float(p["cell"]), tuple(p["extent"]),
                               int(p.get("tone_a", 80)), int(p.get("tone_b", 176)))
                  for p in data.get("planes", [])]
        bounds = (np.array(data["bounds"]["lo"], dtype=float),
                  np.array(data["bounds"]["hi"], dtype=float))
        return Scene(positions, radius, bright, bounds, planes,
                     int(data.get("seed", 0)))
    except (KeyError, TypeError, ValueError) as e:
        raise InputError(f"bad scene JSON: {e}") from e


def load_scene(path) -> Scene:
    try:
        return scene_from_json(Path(path).read_text())
    except OSError as e:
        raise InputError(f"cannot read scene {path}: {e}") from e


def _brightness_bands(rng, n):
    """Sprite intensities well away from the mid-gray background."""
    dark = rng.uniform(28.0, 100.0, size=n)
    bright = rng.uniform(156.0, 236.0, size=n)
    pick = rng.uniform(size=n) < 0.5
    return np.where(pick, dark, bright)


def shell_scene(seed: int, n_landmarks: int = 1200,
                half_size: float = 7.0, height: float = 3.2,
                planes: bool = False) -> Scene:
    """Landmarks scattered over the interior faces of a box room.

    Cameras flying inside see textured walls, floor and ceiling in every
    direction, which keeps feature parallax healthy for any heading.
    """
    rng = np.random.default_rng(seed)
    s = half_size
    per = n_landmarks // 6
    rest = n_landmarks - 5 * per
    pts = []
    u = rng.uniform(-s, s, size=(per, 2))
    pts.append(np.column_stack([np.full(per, -s), u[:, 0],
                                rng.uniform(0.0, height, per)]))
    u = rng.uniform(-s, s, size=(per, 2))
    pts.append(np.column_stack([np.full(per, s), u[:, 0],
                                rng.uniform(0.0, height, per)]))
    u = rng.uniform(-s, s, size=(per, 2))
    pts.append(np.column_stack([u[:, 0], np.full(per, -s),
                                rng.uniform(0.0, height, per)]))
    u = rng.uniform(-s, s, size=(per, 2))
    pts.append(np.column_stack([u[:, 0], np.full(per, s),
                                rng.uniform(0.0, height, per)]))
    u = rng.uniform(-s, s, size=(per, 2))
    pts.append(np.column_stack([u[:, 0], u[:, 1], np.zeros(per)]))
    u = rng.uniform(-s, s, size=(rest, 2))
    pts.append(np.column_stack([u[:, 0], u[:, 1], np.full(rest, height)]))
    positions = np.vstack(pts)
    radius = rng.uniform(1.3, 2.3, size=len(positions))
    bright = _brightness_bands(rng, len(positions))
    plane_list = []
    if planes:
        plane_list.append(CheckerPlane(
            origin=np.array([0.0, s - 0.01, height / 2]),
            normal=np.array([0.0, -1.0, 0.0]),
            cell=0.5, extent=(2.0, 1.2)))
    lo = np.array([-s, -s, 0.0])
    hi = np.array([s, s, height])
    return Scene(positions, radius, bright, (lo, hi), plane_list, seed)


def random_scene(seed: int, n_landmarks: int = 300,
                 lo=(-5.0, -5.0, 0.0), hi=(5.0, 5.0, 3.0)) -> Scene:
    """Landmarks uniformly inside a box volume."""
    rng = np.random.default_rng(seed)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    positions = rng.uniform(lo, hi, size=(n_landmarks, 3))
    radius = rng.uniform(1.3, 2.3, size=n_landmarks)
    bright = _brightness_bands(rng, n_landmarks)
    return Scene(positions, radius, bright, (lo, hi), [], seed)


# --------------------------------------------------------------- rendering


def _render_planes(canvas: np.ndarray, planes, t_world_cam: RigidTransform,
                   k: CameraIntrinsics) -> None:
    h, w = canvas.shape
    xs = (np.arange(w) - k.cx) / k.fx
    ys = (np.arange(h) - k.cy) / k.fy
    dirs_cam = np.empty((h, w, 3))
    dirs_cam[..., 0] = xs[None, :]
    dirs_cam[..., 1] = ys[:, None]
    dirs_cam[..., 2] = 1.0
    r = t_world_cam.rotation.matrix()
    c = t_world_cam.translation
    dirs = dirs_cam @ r.T
    best_t = np.full((h, w), np.inf)
    for plane in planes:
        u, v = plane.axes()
        denom = dirs @ plane.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.dot(plane.origin - c, plane.normal) / denom
        hit = (t > 1e-6) & np.isfinite(t)
        if not hit.any():
            continue
        pts = c + dirs * t[..., None]
        rel = pts - plane.origin
        pu = rel @ u
        pv = rel @ v
        hw, hh = plane.extent
        hit &= (np.abs(pu) <= hw) & (np.abs(pv) <= hh) & (t < best_t)
        if not hit.any():
            continue
        parity = (np.floor(pu / plane.cell) + np.floor(pv / plane.cell)) % 2
        tone = np.where(parity == 0, plane.tone_a, plane.tone_b)
        canvas[hit] = tone[hit]
        best_t[hit] = t[hit]


def render(scene: Scene, camera_pose: RigidTransform,
           k: CameraIntrinsics) -> GrayImage:
    """Render the scene from a camera-in-world pose.

    Landmarks behind the camera are culled; visible ones are splatted as
    Gaussian sprites of per-landmark radius and brightness. Deterministic:
    no sampling is involved.
    """
    canvas = np.full((k.height, k.width), float(MID_GRAY))
    if scene.planes:
        _render_planes(canvas, scene.planes, camera_pose, k)
    t_cam_world = geom.invert(camera_pose)
    p_cam = geom.apply_many(t_cam_world, scene.positions)
    vis = p_cam[:, 2] > geom.MIN_PROJECT_DEPTH
    if vis.any():
        uv = geom.project_many(k, p_cam[vis])
        sig = scene.radius_px[vis]
        amp = scene.brightness[vis] - float(MID_GRAY)
        margin = np.ceil(3.0 * sig)
        inside = ((uv[:, 0] >= -margin) & (uv[:, 0] < k.width + margin)
                  & (uv[:, 1] >= -margin) & (uv[:, 1] < k.height + margin))
        for u, v, s, a in zip(uv[inside, 0], uv[inside, 1],
                              sig[inside], amp[inside]):
            r = int(math.ceil(3.0 * s))
            x0 = max(0, int(math.floor(u)) - r)
            x1 = min(k.width, int(math.floor(u)) + r + 2)
            y0 = max(0, int(math.floor(v)) - r)
            y1 = min(k.height, int(math.floor(v)) + r + 2)
            if x0 >= x1 or y0 >= y1:
                continue
            gx = np.arange(x0, x1, dtype=float) - u
            gy = np.arange(y0, y1, dtype=float) - v
            g = np.exp(-(gy[:, None] ** 2 + gx[None, :] ** 2) / (2.0 * s * s))
            canvas[y0:y1, x0:x1] += a * g
    return GrayImage(np.clip(np.rint(canvas), 0, 255).astype(np.uint8))


# ------------------------------------------------------------------ drone


@dataclass(frozen=True)
class DroneState:
    """Kinematic drone: world position, body orientation, world velocity,
    battery in [0, 1]."""

    position: np.ndarray
    rotation: Rotation
    velocity: np.ndarray
    battery: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "position",
                           np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "velocity",
                           np.asarray(self.velocity, dtype=float).reshape(3))

    @property
    def yaw(self) -> float:
        return geom.to_tait_bryan(self.rotation).yaw

    @staticmethod
    def at(position, yaw: float = 0.0, battery: float = 1.0) -> "DroneState":
        return DroneState(np.asarray(position, dtype=float),
                          Rotation.from_yaw(yaw), np.zeros(3), battery)


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.02
    tau: float = 0.15
    v_max: float = 1.0
    omega_max: float = 1.5
    battery_drain: float = 0.001  # fraction per second
    mounting: RigidTransform = DEFAULT_MOUNTING

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.tau < 0:
            raise ValueError("tau must be non-negative")


def _clamp_command(cmd: VelocityCommand, cfg: SimConfig):
    v = cmd.linear
    n = float(np.linalg.norm(v))
    if n > cfg.v_max:
        v = v * (cfg.v_max / n)
    w = min(max(cmd.yaw_rate, -cfg.omega_max), cfg.omega_max)
    return v, w


def step(state: DroneState, cmd: VelocityCommand, cfg: SimConfig) -> DroneState:
    """Advance one control period.

    Velocity relaxes toward the clamped command with first-order lag tau
    (tau = 0 responds instantly; the blend factor is capped at 1 so dt > tau
    cannot overshoot). Yaw integrates the commanded yaw rate about world z.
    Battery drains at battery_drain per second, floored at 0.
    """
    v_cmd, w_cmd = _clamp_command(cmd, cfg)
    if cfg.tau <= 0.0:
        v_new = v_cmd
    else:
        alpha = min(1.0, cfg.dt / cfg.tau)
        v_new = state.velocity + alpha * (v_cmd - state.velocity)
    p_new = state.position + v_new * cfg.dt
    rot_new = Rotation.from_yaw(w_cmd * cfg.dt).compose(state.rotation)
    batt = max(0.0, state.battery - cfg.battery_drain * cfg.dt)
    return DroneState(p_new, rot_new, v_new, batt)


def camera_pose(state: DroneState, cfg: SimConfig) -> RigidTransform:
    """Camera-in-world pose of the mounted camera."""
    body = RigidTransform(state.rotation, state.position)
    return geom.compose(body, cfg.mounting)


def observe(state: DroneState, scene: Scene, k: CameraIntrinsics,
            cfg: SimConfig) -> GrayImage:
    """Render what the drone's forward camera sees right now."""
    return render(scene, camera_pose(state, cfg), k)


# ------------------------------------------------------------------ video


def generate_video(scene: Scene, gt_traj: Trajectory, k: CameraIntrinsics,
                   fps: float) -> tuple[FrameSequence, Trajectory]:
    """Render a clip along a camera trajectory.

    Frames are sampled at 1/fps from the first timestamp; pose between
    trajectory samples is interpolated (linear position, slerp rotation).
    Frame count is floor(duration * fps) + 1 and frame 0 sits exactly on the
    first pose. Returns the clip plus the exact per-frame camera trajectory
    (timestamps rebased to start at 0).
    """
    if len(gt_traj) == 0:
        raise ValueError("empty trajectory")
    if fps <= 0:
        raise ValueError("fps must be positive")
    t0 = gt_traj[0].timestamp
    duration = gt_traj[-1].timestamp - t0
    n = int(math.floor(duration * fps)) + 1
    ts = gt_traj.timestamps
    frames = []
    samples = []
    for j in range(n):
        t = t0 + j / fps
        idx = int(np.searchsorted(ts, t, side="right")) - 1
        idx = min(max(idx, 0), len(gt_traj) - 1)
        if idx >= len(gt_traj) - 1:
            pose = gt_traj[-1].pose
        else:
            a = gt_traj[idx]
            b = gt_traj[idx + 1]
            u = (t - a.timestamp) / (b.timestamp - a.timestamp)
            pose = RigidTransform(
                slerp(a.rotation, b.rotation, u),
                (1.0 - u) * a.position + u * b.position)
        frames.append(render(scene, pose, k))
        samples.append(TrajectorySample(j / fps, pose))
    return FrameSequence(frames, fps, k), Trajectory(samples)
