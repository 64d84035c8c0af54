"""Closed-loop mission execution on the simulated quadrotor.

A mission is a list of subtasks. For each one the drone snapshots its camera
view, asks a video provider to imagine the maneuver, recovers the camera
trajectory from that video by visual odometry, rescales it against the
subtask's scripted path (monocular scale is arbitrary), converts it to
body-frame waypoints and flies them with the proportional controller.

Safety ladder while executing: generation that outruns its wall-clock budget
leaves the drone hovering (HOVER, terminal); battery at the floor triggers an
immediate landing (LANDED, terminal); odometry failure or a waypoint timeout
fails the subtask (FAILED). A mission stops at the first subtask that does
not come back OK.
"""

from __future__ import annotations

import base64
import concurrent.futures
import dataclasses
import io
import json
import math
import tempfile
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geom, odometry, simworld
from .config import MissionSettings, ProviderSettings
from .errors import SkyloopError
from .frames import (
    FrameSequence,
    load_groundtruth_text,
    load_sequence,
    unpack_archive,
)
from .geom import CameraIntrinsics, RigidTransform, Rotation
from .odometry import InitializationFailed, OdometryConfig
from .simworld import DroneState, Scene, SimConfig
from .trajectory import (
    ControllerGains,
    Trajectory,
    TrajectorySample,
    VelocityCommand,
    parse_trajectory,
    rescale,
    to_waypoints,
    velocity_command,
    waypoint_reached,
)

STATUS_OK = "OK"
STATUS_FAILED = "FAILED"
STATUS_HOVER = "HOVER"
STATUS_LANDED = "LANDED"


class EmptyPlan(SkyloopError):
    """The planner produced no subtasks."""


class ProviderError(SkyloopError):
    """Video generation failed or returned an unusable payload."""


# --------------------------------------------------------------- subtasks


@dataclass(frozen=True)
class PathKnot:
    t: float
    position: np.ndarray        # body frame at subtask start, FLU
    yaw: float


class RelativePath:
    """Piecewise-linear scripted motion in the start body frame."""

    def __init__(self, knots):
        if len(knots) < 2:
            raise ValueError("a path needs at least two knots")
        for a, b in zip(knots, knots[1:]):
            if not b.t > a.t:
                raise ValueError("knot times must be strictly increasing")
        self.knots = [PathKnot(k.t, np.asarray(k.position, dtype=float),
                               float(k.yaw)) for k in knots]

    @property
    def duration(self) -> float:
        return self.knots[-1].t - self.knots[0].t

    def pose_at(self, t: float) -> RigidTransform:
        ks = self.knots
        t = min(max(t, ks[0].t), ks[-1].t)
        for a, b in zip(ks, ks[1:]):
            if t <= b.t:
                u = (t - a.t) / (b.t - a.t)
                pos = a.position + u * (b.position - a.position)
                yaw = a.yaw + u * geom.wrap_angle(b.yaw - a.yaw)
                return RigidTransform(Rotation.from_yaw(yaw), pos)
        last = ks[-1]
        return RigidTransform(Rotation.from_yaw(last.yaw), last.position)

    def scaled(self, factor: float) -> "RelativePath":
        return RelativePath([PathKnot(k.t, k.position * factor, k.yaw)
                             for k in self.knots])


@dataclass(frozen=True)
class Subtask:
    label: str
    prompt: str
    path: RelativePath
    fps: float = 10.0


@dataclass
class SubtaskRecord:
    subtask: Subtask
    status: str
    reason: str
    sim_time: float
    battery: float
    waypoints: list = field(default_factory=list)
    vo_trajectory: Trajectory = None
    planned: Trajectory = None
    flown: Trajectory = None
    terminal_error: float = float("nan")


@dataclass
class MissionLog:
    mission: str
    status: str
    records: list
    final_state: DroneState

    @property
    def completed_subtasks(self) -> int:
        return sum(1 for r in self.records if r.status == STATUS_OK)


# --------------------------------------------------------------- planners


class PlannerInterface:
    """Turns a mission sentence into an ordered list of subtasks."""

    def reason(self, mission: str) -> list:
        raise NotImplementedError

    def refine(self, subtask: Subtask, feedback: str) -> Subtask:
        raise NotImplementedError


def _default_script():
    fwd = RelativePath([
        PathKnot(0.0, np.array([0.0, 0.0, 0.0]), 0.0),
        PathKnot(2.0, np.array([1.2, 0.15, 0.1]), 0.05),
        PathKnot(4.0, np.array([2.4, 0.0, 0.2]), 0.0),
    ])
    weave = RelativePath([
        PathKnot(0.0, np.array([0.0, 0.0, 0.0]), 0.0),
        PathKnot(1.5, np.array([0.8, 0.35, 0.0]), 0.1),
        PathKnot(3.0, np.array([1.6, -0.35, 0.0]), -0.1),
        PathKnot(4.5, np.array([2.4, 0.0, 0.0]), 0.0),
    ])
    turn_knots = []
    radius = 0.9
    for i in range(9):
        theta = (math.pi / 2) * i / 8
        turn_knots.append(PathKnot(
            0.5 * i,
            np.array([radius * math.sin(theta),
                      -radius * (1.0 - math.cos(theta)), 0.0]),
            -theta))
    turn = RelativePath(turn_knots)
    climb = RelativePath([
        PathKnot(0.0, np.array([0.0, 0.0, 0.0]), 0.0),
        PathKnot(1.5, np.array([0.5, 0.1, 0.4]), 0.0),
        PathKnot(3.0, np.array([0.9, 0.0, 0.8]), 0.0),
    ])
    return [
        Subtask("Navigate to Arch Gate 1",
                "fly forward through the stone arch ahead", fwd),
        Subtask("Avoid Yellow Obstacles",
                "weave between the yellow pylons while moving forward",
                weave),
        Subtask("Turn Right",
                "turn ninety degrees right along a smooth arc", turn),
        Subtask("Climb to Scan Height",
                "gain altitude while drifting forward", climb),
    ]


class ScriptedPlanner(PlannerInterface):
    """Deterministic stand-in for a reasoning model.

    Hands back a fixed four-step plan for any non-empty mission sentence;
    subtask labels can be overridden at construction.
    """

    def __init__(self, subtasks=None):
        self._subtasks = list(subtasks) if subtasks is not None else None

    def reason(self, mission: str) -> list:
        if not mission or not mission.strip():
            raise EmptyPlan("mission text is empty")
        plan = self._subtasks if self._subtasks is not None \
            else _default_script()
        if not plan:
            raise EmptyPlan("planner script holds no subtasks")
        return list(plan)

    def refine(self, subtask: Subtask, feedback: str) -> Subtask:
        # shrink the maneuver and note why; a retried subtask should be
        # more conservative than the one that failed
        return Subtask(subtask.label,
                       f"{subtask.prompt} (retry, {feedback})",
                       subtask.path.scaled(0.6), subtask.fps)


# --------------------------------------------------------------- providers


@dataclass
class GenerationRequest:
    request_id: str
    prompt: str
    image: "simworld.GrayImage"
    intrinsics: CameraIntrinsics
    camera_pose: RigidTransform      # world camera pose at request time
    path: RelativePath
    fps: float


@dataclass
class GenerationResult:
    video: FrameSequence
    groundtruth: Trajectory = None


class VideoProviderInterface:
    # synchronous providers finish fast enough that the drone does not
    # hover-wait on them; remote ones run in a worker thread instead
    synchronous = False

    def generate(self, request: GenerationRequest) -> GenerationResult:
        raise NotImplementedError


def _camera_relative_path(path: RelativePath,
                          mounting: RigidTransform) -> list:
    """Scripted body motion re-expressed as camera-frame-at-start poses."""
    minv = geom.invert(mounting)
    out = []
    for k in path.knots:
        body = RigidTransform(Rotation.from_yaw(k.yaw), k.position)
        out.append((k.t, geom.compose(geom.compose(minv, body), mounting)))
    return out


def commanded_camera_trajectory(path: RelativePath,
                                mounting: RigidTransform,
                                fps: float) -> Trajectory:
    """The scripted path sampled on the frame grid, as camera poses relative
    to the camera frame at subtask start."""
    rel = _camera_relative_path(path, mounting)
    t0 = rel[0][0]
    n = int(math.floor(path.duration * fps)) + 1
    samples = []
    for j in range(n):
        t = t0 + j / fps
        pose = _interp_pose(rel, t)
        samples.append(TrajectorySample(j / fps, pose))
    return Trajectory(samples, frame="cam0")


def _interp_pose(rel, t):
    ts = [r[0] for r in rel]
    t = min(max(t, ts[0]), ts[-1])
    for (ta, pa), (tb, pb) in zip(rel, rel[1:]):
        if t <= tb:
            u = (t - ta) / (tb - ta)
            pos = pa.translation + u * (pb.translation - pa.translation)
            rot = geom.slerp(pa.rotation, pb.rotation, u)
            return RigidTransform(rot, pos)
    return rel[-1][1]


class SimulatorVideoProvider(VideoProviderInterface):
    """Renders the scripted maneuver inside the simulation scene.

    Stands in for a learned video generator: the returned clip is exactly
    what the drone camera would see flying the subtask path from its current
    pose. Ground truth comes back alongside for evaluation.
    """

    synchronous = True

    def __init__(self, scene: Scene, sim_cfg: SimConfig = None):
        self.scene = scene
        self.sim_cfg = sim_cfg if sim_cfg is not None else SimConfig()

    def generate(self, request: GenerationRequest) -> GenerationResult:
        rel = _camera_relative_path(request.path, self.sim_cfg.mounting)
        samples = []
        for t, pose in rel:
            world = geom.compose(request.camera_pose, pose)
            samples.append(TrajectorySample(t, world))
        cam_traj = Trajectory(samples)
        video, gt = simworld.generate_video(self.scene, cam_traj,
                                            request.intrinsics, request.fps)
        return GenerationResult(video, gt)


def _slugify(text: str) -> str:
    out = []
    for ch in text.lower():
        out.append(ch if ch.isalnum() else "-")
    slug = "".join(out)
    while "--" in slug:
        slug = slug.replace("--", "-")
    return slug.strip("-")


class DirectoryVideoProvider(VideoProviderInterface):
    """Serves pre-rendered clips from disk, one directory per subtask label."""

    synchronous = True

    def __init__(self, root):
        self.root = Path(root)

    def generate(self, request: GenerationRequest) -> GenerationResult:
        directory = self.root / _slugify(request.prompt)
        if not directory.is_dir():
            raise ProviderError(f"no clip directory {directory}")
        video = load_sequence(directory)
        gt_text = load_groundtruth_text(directory)
        gt = parse_trajectory(gt_text) if gt_text else None
        return GenerationResult(video, gt)


class HttpVideoProvider(VideoProviderInterface):
    """Talks to a remote generator over two endpoints.

    POST {url}/generate with {"request_id", "prompt", "image_png_base64"}
    answers {"id": ...}; GET {url}/result/{id} answers 202/404-style JSON
    while pending and a flat zip archive of the sequence when done.
    """

    def __init__(self, settings: ProviderSettings):
        if not settings.url:
            raise ProviderError("provider.url is not configured")
        self.settings = settings

    def _post_generate(self, request: GenerationRequest) -> str:
        from PIL import Image
        buf = io.BytesIO()
        Image.fromarray(request.image.pixels, mode="L").save(buf,
                                                             format="PNG")
        payload = json.dumps({
            "request_id": request.request_id,
            "prompt": request.prompt,
            "image_png_base64": base64.b64encode(buf.getvalue()).decode(),
        }).encode()
        req = urllib.request.Request(
            self.settings.url.rstrip("/") + "/generate", data=payload,
            headers={"Content-Type": "application/json"}, method="POST")
        try:
            with urllib.request.urlopen(
                    req, timeout=self.settings.request_timeout_s) as resp:
                body = json.loads(resp.read().decode())
        except (urllib.error.URLError, json.JSONDecodeError, OSError) as e:
            raise ProviderError(f"generate call failed: {e}") from e
        if "id" not in body:
            raise ProviderError("generate response carries no id")
        return str(body["id"])

    def _poll_result(self, job_id: str):
        url = self.settings.url.rstrip("/") + f"/result/{job_id}"
        try:
            with urllib.request.urlopen(
                    url, timeout=self.settings.request_timeout_s) as resp:
                blob = resp.read()
                ctype = resp.headers.get("Content-Type", "")
        except urllib.error.HTTPError as e:
            if e.code in (202, 404):
                return None
            raise ProviderError(f"result call failed: {e}") from e
        except (urllib.error.URLError, OSError) as e:
            raise ProviderError(f"result call failed: {e}") from e
        if "zip" not in ctype and not blob.startswith(b"PK"):
            return None  # pending marker body
        return blob

    def generate(self, request: GenerationRequest) -> GenerationResult:
        job_id = self._post_generate(request)
        while True:
            blob = self._poll_result(job_id)
            if blob is not None:
                break
            time.sleep(self.settings.poll_interval_s)
        with tempfile.TemporaryDirectory() as tmp:
            unpack_archive(blob, tmp)
            video = load_sequence(tmp)
            gt_text = load_groundtruth_text(tmp)
            gt = parse_trajectory(gt_text) if gt_text else None
        return GenerationResult(video, gt)


# -------------------------------------------------------------- execution


_ZERO_CMD = VelocityCommand(np.zeros(3), 0.0)


def _landed(state: DroneState) -> bool:
    return state.position[2] <= 1e-9


def _land(state: DroneState, sim_cfg: SimConfig,
          settings: MissionSettings, flown):
    """Descend straight down until touching the ground plane."""
    cmd = VelocityCommand(np.array([0.0, 0.0, -settings.land_speed]), 0.0)
    guard = 0.0
    while not _landed(state) and guard < 300.0:
        state = simworld.step(state, cmd, sim_cfg)
        guard += sim_cfg.dt
        flown.append(state)
    pos = state.position.copy()
    pos[2] = max(pos[2], 0.0)
    return dataclasses.replace(state, position=pos,
                               velocity=np.zeros(3))


def _arc_over_pairs(positions_a, positions_b):
    a = np.asarray(positions_a)
    b = np.asarray(positions_b)
    arc_a = float(np.sum(np.linalg.norm(np.diff(a, axis=0), axis=1)))
    arc_b = float(np.sum(np.linalg.norm(np.diff(b, axis=0), axis=1)))
    return arc_a, arc_b


def plan_world_waypoints(vo_traj: Trajectory, subtask: Subtask,
                         start_state: DroneState, sim_cfg: SimConfig,
                         settings: MissionSettings):
    """Anchor, rescale and convert a visual-odometry trajectory into world
    body-frame waypoints.

    The commanded scripted path supplies the metric scale (arc-length ratio
    over the time-associated overlap) and the anchor pose (where the camera
    was commanded to be at the first tracked timestamp).
    """
    from .evaluation import associate

    commanded = commanded_camera_trajectory(subtask.path,
                                            sim_cfg.mounting, subtask.fps)
    ei, ri = associate(vo_traj, commanded)
    if len(ei) < 2:
        raise ProviderError("odometry overlaps the script too little")
    order = np.argsort([vo_traj.samples[i].timestamp for i in ei])
    ei = [ei[i] for i in order]
    ri = [ri[i] for i in order]
    vo_pos = np.stack([vo_traj.samples[i].pose.translation for i in ei])
    cmd_pos = np.stack([commanded.samples[j].pose.translation for j in ri])
    arc_vo, arc_cmd = _arc_over_pairs(vo_pos, cmd_pos)
    if arc_vo <= 1e-9:
        raise ProviderError("odometry trajectory has no extent")
    scale = arc_cmd / arc_vo

    start_cam = simworld.camera_pose(start_state, sim_cfg)
    anchor_rel = commanded.samples[ri[0]].pose
    anchor = geom.compose(start_cam, anchor_rel)

    scaled = rescale(vo_traj, scale)
    minv = geom.invert(sim_cfg.mounting)
    body_samples = []
    for smp in scaled.samples:
        cam_world = geom.compose(anchor, smp.pose)
        body = geom.compose(cam_world, minv)
        body_samples.append(TrajectorySample(smp.timestamp, body))
    body_traj = Trajectory(body_samples)
    waypoints = to_waypoints(body_traj, settings.waypoint_spacing)
    return waypoints, body_traj, scale


def execute_subtask(state: DroneState, subtask: Subtask,
                    provider: VideoProviderInterface, scene: Scene,
                    k: CameraIntrinsics, sim_cfg: SimConfig = None,
                    gains: ControllerGains = None,
                    settings: MissionSettings = None,
                    odo_cfg: OdometryConfig = None,
                    request_id: str = "req-0"):
    """Run one subtask end to end. Returns (SubtaskRecord, new_state)."""
    sim_cfg = sim_cfg if sim_cfg is not None else SimConfig()
    gains = gains if gains is not None else ControllerGains()
    settings = settings if settings is not None else MissionSettings()
    odo_cfg = odo_cfg if odo_cfg is not None else OdometryConfig()
    flown_states = [state]
    sim_time = 0.0

    def record(status, reason, **kw):
        flown = Trajectory([
            TrajectorySample(i * sim_cfg.dt,
                             RigidTransform(s.rotation, s.position))
            for i, s in enumerate(flown_states)])
        return SubtaskRecord(subtask=subtask, status=status, reason=reason,
                             sim_time=sim_time, battery=state.battery,
                             flown=flown, **kw)

    # 1. snapshot the current view and ask for the dreamed maneuver
    image = simworld.observe(state, scene, k, sim_cfg)
    request = GenerationRequest(
        request_id=request_id, prompt=subtask.prompt, image=image,
        intrinsics=k, camera_pose=simworld.camera_pose(state, sim_cfg),
        path=subtask.path, fps=subtask.fps)
    if provider.synchronous:
        def fetch():
            return provider.generate(request)
    else:
        pool = concurrent.futures.ThreadPoolExecutor(max_workers=1)
        future = pool.submit(provider.generate, request)
        pool.shutdown(wait=False)
        deadline = time.monotonic() + settings.generation_timeout_s
        while not future.done():
            if time.monotonic() >= deadline:
                future.cancel()
                return record(STATUS_HOVER,
                              "video generation exceeded its wall-clock "
                              "budget"), state
            state = simworld.step(state, _ZERO_CMD, sim_cfg)
            sim_time += sim_cfg.dt
            flown_states.append(state)
            if state.battery <= settings.battery_floor:
                state = _land(state, sim_cfg, settings, flown_states)
                return record(STATUS_LANDED,
                              "battery floor during generation"), state
            time.sleep(min(0.005, settings.generation_timeout_s / 50.0))
        fetch = future.result
    try:
        result = fetch()
    except SkyloopError as e:
        return record(STATUS_FAILED, f"provider: {e}"), state
    except Exception as e:
        return record(STATUS_FAILED, f"provider crashed: {e}"), state

    # 2. video -> trajectory
    try:
        vo = odometry.run(result.video, result.video.intrinsics, odo_cfg)
    except InitializationFailed as e:
        return record(STATUS_FAILED, f"tracking: {e}"), state
    if vo.partial:
        return record(STATUS_FAILED, "tracking: lost before the video ended",
                      vo_trajectory=vo.trajectory), state

    # 3. trajectory -> world waypoints
    try:
        waypoints, planned, scale = plan_world_waypoints(
            vo.trajectory, subtask, state, sim_cfg, settings)
    except SkyloopError as e:
        return record(STATUS_FAILED, f"planning: {e}",
                      vo_trajectory=vo.trajectory), state

    # 4. fly them
    for wp in waypoints:
        wp_time = 0.0
        while not waypoint_reached(state.position, state.yaw, wp):
            if state.battery <= settings.battery_floor:
                state = _land(state, sim_cfg, settings, flown_states)
                return record(STATUS_LANDED, "battery floor in flight",
                              waypoints=waypoints, vo_trajectory=vo.trajectory,
                              planned=planned), state
            cmd = velocity_command(state.position, state.yaw, wp, gains)
            state = simworld.step(state, cmd, sim_cfg)
            wp_time += sim_cfg.dt
            sim_time += sim_cfg.dt
            flown_states.append(state)
            if wp_time > settings.waypoint_timeout_s:
                return record(STATUS_FAILED, "waypoint timeout",
                              waypoints=waypoints, vo_trajectory=vo.trajectory,
                              planned=planned), state
            if sim_time > settings.max_subtask_time_s:
                return record(STATUS_FAILED, "subtask time budget exhausted",
                              waypoints=waypoints, vo_trajectory=vo.trajectory,
                              planned=planned), state

    terminal = float(np.linalg.norm(state.position - waypoints[-1].position))
    status = STATUS_OK if terminal <= settings.arrival_tolerance_m \
        else STATUS_FAILED
    reason = "" if status == STATUS_OK else \
        f"terminus {terminal:.3f} m from goal"
    rec = record(status, reason, waypoints=waypoints,
                 vo_trajectory=vo.trajectory, planned=planned)
    rec.terminal_error = terminal
    return rec, state


def execute_mission(mission: str, planner: PlannerInterface,
                    provider: VideoProviderInterface, scene: Scene,
                    state: DroneState, k: CameraIntrinsics,
                    sim_cfg: SimConfig = None,
                    gains: ControllerGains = None,
                    settings: MissionSettings = None,
                    odo_cfg: OdometryConfig = None) -> MissionLog:
    """Plan and execute a mission, stopping at the first non-OK subtask."""
    subtasks = planner.reason(mission)
    records = []
    for i, subtask in enumerate(subtasks):
        rec, state = execute_subtask(
            state, subtask, provider, scene, k, sim_cfg=sim_cfg,
            gains=gains, settings=settings, odo_cfg=odo_cfg,
            request_id=f"req-{i}")
        records.append(rec)
        if rec.status != STATUS_OK:
            break
    return MissionLog(mission=mission, status=records[-1].status,
                      records=records, final_state=state)
