import http.server
import json
import math
import threading
import time

import numpy as np
import pytest

from skyloop import geom, mission, simworld
from skyloop.config import MissionSettings, ProviderSettings
from skyloop.frames import pack_archive, save_sequence
from skyloop.geom import CameraIntrinsics, RigidTransform, Rotation
from skyloop.mission import (
    DirectoryVideoProvider,
    EmptyPlan,
    GenerationRequest,
    GenerationResult,
    HttpVideoProvider,
    PathKnot,
    ProviderError,
    RelativePath,
    ScriptedPlanner,
    SimulatorVideoProvider,
    STATUS_FAILED,
    STATUS_HOVER,
    STATUS_LANDED,
    STATUS_OK,
    execute_mission,
    execute_subtask,
    plan_world_waypoints,
)
from skyloop.simworld import DroneState, SimConfig
from skyloop.trajectory import (
    Trajectory,
    TrajectorySample,
    format_trajectory,
    rescale,
)

K = CameraIntrinsics(320.0, 320.0, 320.0, 240.0, 640, 480)


@pytest.fixture(scope="module")
def scene():
    return simworld.shell_scene(5)


def start_state(battery=1.0):
    return DroneState.at([0.0, 0.0, 1.5], yaw=0.0, battery=battery)


# ----------------------------------------------------------- RelativePath


def test_path_needs_two_increasing_knots():
    with pytest.raises(ValueError):
        RelativePath([PathKnot(0.0, np.zeros(3), 0.0)])
    with pytest.raises(ValueError):
        RelativePath([PathKnot(0.0, np.zeros(3), 0.0),
                      PathKnot(0.0, np.ones(3), 0.0)])


def test_path_interpolates_linearly():
    path = RelativePath([
        PathKnot(0.0, np.array([0.0, 0.0, 0.0]), 0.0),
        PathKnot(2.0, np.array([4.0, -2.0, 1.0]), 0.4),
    ])
    mid = path.pose_at(0.5)
    np.testing.assert_allclose(mid.translation, [1.0, -0.5, 0.25])
    assert geom.to_tait_bryan(mid.rotation).yaw == pytest.approx(0.1)
    # clamped outside the knot range
    np.testing.assert_allclose(path.pose_at(-1.0).translation, [0, 0, 0])
    np.testing.assert_allclose(path.pose_at(9.0).translation, [4, -2, 1])


def test_path_yaw_interpolation_takes_short_way_around():
    # 3.0 to -3.0 rad is 0.2832 rad through the pi seam, not 6.0 back
    path = RelativePath([
        PathKnot(0.0, np.zeros(3), 3.0),
        PathKnot(1.0, np.zeros(3), -3.0),
    ])
    half = geom.to_tait_bryan(path.pose_at(0.5).rotation).yaw
    seam = 3.0 + 0.5 * (2.0 * math.pi - 6.0)
    assert half == pytest.approx(geom.wrap_angle(seam), abs=1e-12)


def test_path_scaled_shrinks_positions_not_yaw():
    path = RelativePath([
        PathKnot(0.0, np.array([0.0, 0.0, 0.0]), 0.1),
        PathKnot(1.0, np.array([2.0, 0.0, 0.0]), 0.3),
    ])
    small = path.scaled(0.25)
    np.testing.assert_allclose(small.knots[1].position, [0.5, 0.0, 0.0])
    assert small.knots[1].yaw == 0.3
    assert small.duration == path.duration


# --------------------------------------------------------------- planner


def test_scripted_planner_four_steps():
    plan = ScriptedPlanner().reason("fly the practice course")
    assert [s.label for s in plan] == [
        "Navigate to Arch Gate 1",
        "Avoid Yellow Obstacles",
        "Turn Right",
        "Climb to Scan Height",
    ]
    for sub in plan:
        assert sub.path.duration > 0
        assert sub.prompt


def test_scripted_planner_rejects_blank_mission():
    with pytest.raises(EmptyPlan):
        ScriptedPlanner().reason("")
    with pytest.raises(EmptyPlan):
        ScriptedPlanner().reason("   \n\t ")


def test_refine_shrinks_the_maneuver():
    sub = ScriptedPlanner().reason("go")[0]
    again = ScriptedPlanner().refine(sub, "overshot the gate")
    assert again.label == sub.label
    assert "overshot the gate" in again.prompt
    end_before = sub.path.knots[-1].position
    end_after = again.path.knots[-1].position
    np.testing.assert_allclose(end_after, end_before * 0.6)


def test_turn_right_subtask_sweeps_a_quarter_circle():
    turn = ScriptedPlanner().reason("go")[2]
    yaws = [k.yaw for k in turn.path.knots]
    assert yaws[0] == 0.0
    assert yaws[-1] == pytest.approx(-math.pi / 2)
    # the arc keeps moving, so odometry has parallax to work with
    steps = np.diff(np.stack([k.position for k in turn.path.knots]), axis=0)
    assert np.all(np.linalg.norm(steps, axis=1) > 0.05)


# ------------------------------------------------------ frame conversions


def test_camera_relative_path_is_mounting_conjugation():
    cfg = SimConfig()
    path = RelativePath([
        PathKnot(0.0, np.zeros(3), 0.0),
        PathKnot(1.0, np.array([1.0, 0.5, -0.2]), 0.3),
    ])
    rel = mission._camera_relative_path(path, cfg.mounting)
    np.testing.assert_allclose(rel[0][1].translation, np.zeros(3),
                               atol=1e-12)
    # oracle: M^-1 B M computed with plain 4x4 matrices
    def homog(tf):
        h = np.eye(4)
        h[:3, :3] = tf.rotation.matrix()
        h[:3, 3] = tf.translation
        return h
    m = homog(cfg.mounting)
    body = homog(RigidTransform(Rotation.from_yaw(0.3),
                                np.array([1.0, 0.5, -0.2])))
    want = np.linalg.inv(m) @ body @ m
    got = homog(rel[1][1])
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_commanded_camera_trajectory_grid():
    cfg = SimConfig()
    path = ScriptedPlanner().reason("go")[0].path
    traj = mission.commanded_camera_trajectory(path, cfg.mounting, 10.0)
    assert len(traj.samples) == int(path.duration * 10.0) + 1
    assert traj.frame == "cam0"
    np.testing.assert_allclose(traj.timestamps,
                               np.arange(len(traj.samples)) / 10.0,
                               atol=1e-12)
    np.testing.assert_allclose(traj.samples[0].pose.translation,
                               np.zeros(3), atol=1e-12)


def test_plan_world_waypoints_undoes_monocular_scale(scene):
    """Feed the planner a trajectory that is the commanded path shrunk by an
    arbitrary factor; it must recover metric scale from the script."""
    cfg = SimConfig()
    settings = MissionSettings()
    sub = ScriptedPlanner().reason("go")[0]
    commanded = mission.commanded_camera_trajectory(sub.path, cfg.mounting,
                                                    sub.fps)
    vo = rescale(commanded, 0.37)
    state = start_state()
    waypoints, body_traj, scale = plan_world_waypoints(
        vo, sub, state, cfg, settings)
    assert scale == pytest.approx(1.0 / 0.37, rel=1e-9)
    # terminal body pose = start body pose composed with the scripted end
    end_knot = sub.path.knots[-1]
    start_body = RigidTransform(state.rotation, state.position)
    want_end = geom.compose(start_body,
                            RigidTransform(Rotation.from_yaw(end_knot.yaw),
                                           end_knot.position))
    np.testing.assert_allclose(waypoints[-1].position,
                               want_end.translation, atol=1e-9)
    assert waypoints[-1].yaw == pytest.approx(
        geom.to_tait_bryan(want_end.rotation).yaw, abs=1e-9)
    # spacing: consecutive waypoints no farther apart than allowed by the
    # sampling grid (spacing plus one inter-sample hop)
    gaps = np.linalg.norm(np.diff(np.stack([w.position for w in waypoints]),
                                  axis=0), axis=1)
    assert gaps.max() < settings.waypoint_spacing + 0.2


def test_plan_world_waypoints_rejects_zero_extent(scene):
    cfg = SimConfig()
    sub = ScriptedPlanner().reason("go")[0]
    pose = RigidTransform(Rotation.identity(), np.zeros(3))
    frozen = Trajectory([TrajectorySample(0.1 * i, pose) for i in range(5)],
                        frame="cam0")
    with pytest.raises(ProviderError):
        plan_world_waypoints(frozen, sub, start_state(), cfg,
                             MissionSettings())


# -------------------------------------------------------------- providers


def test_simulator_provider_renders_the_request(scene):
    cfg = SimConfig()
    sub = ScriptedPlanner().reason("go")[0]
    state = start_state()
    cam = simworld.camera_pose(state, cfg)
    req = GenerationRequest("r1", sub.prompt,
                            simworld.observe(state, scene, K, cfg),
                            K, cam, sub.path, sub.fps)
    out = SimulatorVideoProvider(scene, cfg).generate(req)
    assert len(out.video.frames) == int(sub.path.duration * sub.fps) + 1
    assert out.groundtruth is not None
    np.testing.assert_allclose(out.groundtruth.samples[0].pose.translation,
                               cam.translation, atol=1e-9)


def test_slugify():
    assert mission._slugify("Fly, forward! NOW") == "fly-forward-now"
    assert mission._slugify("  plain  ") == "plain"


def test_directory_provider_roundtrip(tmp_path, scene):
    cfg = SimConfig()
    sub = ScriptedPlanner().reason("go")[0]
    state = start_state()
    cam = simworld.camera_pose(state, cfg)
    req = GenerationRequest("r1", sub.prompt,
                            simworld.observe(state, scene, K, cfg),
                            K, cam, sub.path, sub.fps)
    rendered = SimulatorVideoProvider(scene, cfg).generate(req)
    clip_dir = tmp_path / mission._slugify(sub.prompt)
    save_sequence(rendered.video, clip_dir,
                  format_trajectory(rendered.groundtruth))

    out = DirectoryVideoProvider(tmp_path).generate(req)
    assert len(out.video.frames) == len(rendered.video.frames)
    assert out.groundtruth is not None
    np.testing.assert_allclose(out.groundtruth.positions,
                               rendered.groundtruth.positions, atol=1e-6)


def test_directory_provider_missing_clip(tmp_path, scene):
    sub = ScriptedPlanner().reason("go")[0]
    cfg = SimConfig()
    state = start_state()
    req = GenerationRequest("r1", sub.prompt,
                            simworld.observe(state, scene, K, cfg),
                            K, simworld.camera_pose(state, cfg),
                            sub.path, sub.fps)
    with pytest.raises(ProviderError):
        DirectoryVideoProvider(tmp_path).generate(req)


class _CannedServer:
    """Tiny in-process generation service for HttpVideoProvider tests.

    Answers POST /generate with a job id, then serves 202 "pending" JSON for
    `pending_polls` GETs before handing over the archive.
    """

    def __init__(self, blob, pending_polls=2):
        outer = self

        class Handler(http.server.BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _reply(self, code, body, ctype):
                self.send_response(code)
                self.send_header("Content-Type", ctype)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_POST(self):
                n = int(self.headers["Content-Length"])
                outer.posted.append(json.loads(self.rfile.read(n)))
                self._reply(200, json.dumps({"id": "job-42"}).encode(),
                            "application/json")

            def do_GET(self):
                outer.polls += 1
                if outer.polls <= outer.pending_polls:
                    self._reply(202, b'{"status": "pending"}',
                                "application/json")
                else:
                    self._reply(200, outer.blob, "application/zip")

        self.blob = blob
        self.pending_polls = pending_polls
        self.polls = 0
        self.posted = []
        self.server = http.server.ThreadingHTTPServer(("127.0.0.1", 0),
                                                      Handler)
        threading.Thread(target=self.server.serve_forever,
                         daemon=True).start()

    @property
    def url(self):
        return f"http://127.0.0.1:{self.server.server_port}"

    def close(self):
        self.server.shutdown()


@pytest.fixture()
def canned_clip(scene):
    cfg = SimConfig()
    sub = ScriptedPlanner().reason("go")[0]
    state = start_state()
    cam = simworld.camera_pose(state, cfg)
    req = GenerationRequest("r1", sub.prompt,
                            simworld.observe(state, scene, K, cfg),
                            K, cam, sub.path, sub.fps)
    rendered = SimulatorVideoProvider(scene, cfg).generate(req)
    blob = pack_archive(rendered.video,
                        format_trajectory(rendered.groundtruth))
    return req, rendered, blob


def test_http_provider_polls_until_ready(canned_clip):
    req, rendered, blob = canned_clip
    server = _CannedServer(blob, pending_polls=2)
    try:
        provider = HttpVideoProvider(
            ProviderSettings(url=server.url, poll_interval_s=0.01))
        out = provider.generate(req)
    finally:
        server.close()
    assert server.polls == 3
    assert len(out.video.frames) == len(rendered.video.frames)
    assert out.groundtruth is not None
    body = server.posted[0]
    assert sorted(body) == ["image_png_base64", "prompt", "request_id"]
    assert body["prompt"] == req.prompt
    assert body["request_id"] == req.request_id
    import base64
    assert base64.b64decode(body["image_png_base64"])[:4] == b"\x89PNG"


def test_http_provider_requires_url():
    with pytest.raises(ProviderError):
        HttpVideoProvider(ProviderSettings(url=""))


def test_http_provider_rejects_idless_response(canned_clip):
    req, _, _ = canned_clip

    class Handler(http.server.BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def do_POST(self):
            body = b'{"accepted": true}'
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

    server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    try:
        provider = HttpVideoProvider(ProviderSettings(
            url=f"http://127.0.0.1:{server.server_port}"))
        with pytest.raises(ProviderError):
            provider.generate(req)
    finally:
        server.shutdown()


# -------------------------------------------------------------- execution


class _SleepyProvider(mission.VideoProviderInterface):
    def __init__(self, delay=1.0):
        self.delay = delay

    def generate(self, request):
        time.sleep(self.delay)
        raise ProviderError("result should never be consumed")


class _BrokenProvider(mission.VideoProviderInterface):
    def generate(self, request):
        raise ProviderError("upstream said no")


class _FrozenProvider(mission.VideoProviderInterface):
    """Returns a clip with no camera motion at all."""

    def __init__(self, scene):
        self.scene = scene

    def generate(self, request):
        cam = request.camera_pose
        traj = Trajectory([TrajectorySample(0.0, cam),
                           TrajectorySample(3.0, cam)])
        video, gt = simworld.generate_video(self.scene, traj,
                                            request.intrinsics, 10.0)
        return GenerationResult(video, gt)


def test_subtask_ok_end_to_end(scene):
    sub = ScriptedPlanner().reason("go")[0]
    rec, state = execute_subtask(start_state(), sub,
                                 SimulatorVideoProvider(scene), scene, K)
    assert rec.status == STATUS_OK
    assert rec.terminal_error <= MissionSettings().arrival_tolerance_m
    assert rec.reason == ""
    assert len(rec.waypoints) >= 2
    assert rec.vo_trajectory is not None and len(rec.vo_trajectory) > 20
    # flown log ends where the drone ended
    np.testing.assert_allclose(rec.flown.samples[-1].pose.translation,
                               state.position, atol=1e-12)
    assert state.battery < 1.0


def test_subtask_hover_on_generation_timeout(scene):
    sub = ScriptedPlanner().reason("go")[0]
    st = start_state()
    rec, state = execute_subtask(
        st, sub, _SleepyProvider(delay=1.0), scene, K,
        settings=MissionSettings(generation_timeout_s=0.1))
    assert rec.status == STATUS_HOVER
    assert "wall-clock" in rec.reason
    # never moved anywhere: zero commands all the way through
    assert np.linalg.norm(state.position - st.position) < 0.05
    assert rec.sim_time > 0.0


def test_subtask_lands_when_battery_hits_floor_during_generation(scene):
    sub = ScriptedPlanner().reason("go")[0]
    settings = MissionSettings(generation_timeout_s=30.0)
    rec, state = execute_subtask(
        start_state(battery=settings.battery_floor + 1e-5), sub,
        _SleepyProvider(delay=5.0), scene, K, settings=settings)
    assert rec.status == STATUS_LANDED
    assert state.position[2] == 0.0
    assert np.all(state.velocity == 0.0)


def test_subtask_lands_when_battery_hits_floor_in_flight(scene):
    # enough battery to finish generation, not enough to finish the flight
    sim_cfg = SimConfig(battery_drain=0.01)
    settings = MissionSettings()
    sub = ScriptedPlanner().reason("go")[0]
    rec, state = execute_subtask(
        start_state(battery=settings.battery_floor + 0.02), sub,
        SimulatorVideoProvider(scene, sim_cfg), scene, K, sim_cfg=sim_cfg,
        settings=settings)
    assert rec.status == STATUS_LANDED
    assert "flight" in rec.reason
    assert state.position[2] == 0.0


def test_subtask_fails_on_provider_error(scene):
    sub = ScriptedPlanner().reason("go")[0]
    rec, state = execute_subtask(start_state(), sub, _BrokenProvider(),
                                 scene, K)
    assert rec.status == STATUS_FAILED
    assert "provider" in rec.reason


def test_subtask_fails_on_static_clip(scene):
    sub = ScriptedPlanner().reason("go")[0]
    rec, state = execute_subtask(start_state(), sub, _FrozenProvider(scene),
                                 scene, K)
    assert rec.status == STATUS_FAILED
    assert rec.reason.startswith("tracking")
    # the drone must not fly on a failed plan
    np.testing.assert_allclose(state.position, start_state().position)


def test_subtask_waypoint_timeout(scene):
    sub = ScriptedPlanner().reason("go")[0]
    rec, state = execute_subtask(
        start_state(), sub, SimulatorVideoProvider(scene), scene, K,
        settings=MissionSettings(waypoint_timeout_s=0.04))
    assert rec.status == STATUS_FAILED
    assert rec.reason == "waypoint timeout"


@pytest.fixture(scope="module")
def mission_log(scene):
    log = execute_mission("fly the gate course and scan the clearing",
                          ScriptedPlanner(), SimulatorVideoProvider(scene),
                          scene, start_state(), K)
    return log


def test_mission_completes_all_subtasks(mission_log):
    assert mission_log.status == STATUS_OK
    assert mission_log.completed_subtasks == 4
    for rec in mission_log.records:
        assert rec.status == STATUS_OK
        assert rec.terminal_error <= MissionSettings().arrival_tolerance_m


def test_mission_state_threads_through(mission_log):
    # battery strictly decreases across subtasks, yaw ends a quarter right
    batteries = [r.battery for r in mission_log.records]
    assert all(b1 > b2 for b1, b2 in zip(batteries, batteries[1:]))
    assert mission_log.final_state.yaw == pytest.approx(-math.pi / 2,
                                                        abs=0.12)
    assert mission_log.final_state.position[2] > 2.0  # climbed at the end


def test_mission_stops_at_first_failure(scene):
    calls = []

    class FailsSecond(mission.VideoProviderInterface):
        def __init__(self, scene):
            self.inner = SimulatorVideoProvider(scene)

        def generate(self, request):
            calls.append(request.request_id)
            if len(calls) == 2:
                raise ProviderError("generator fell over")
            return self.inner.generate(request)

    log = execute_mission("go", ScriptedPlanner(), FailsSecond(scene),
                          scene, start_state(), K)
    assert log.status == STATUS_FAILED
    assert len(log.records) == 2
    assert log.records[0].status == STATUS_OK
    assert log.completed_subtasks == 1
    assert calls == ["req-0", "req-1"]


def test_subtask_fails_on_provider_crash(scene):
    class Explodes(mission.VideoProviderInterface):
        def generate(self, request):
            raise RuntimeError("segfault adjacent")

    sub = ScriptedPlanner().reason("go")[0]
    rec, _ = execute_subtask(start_state(), sub, Explodes(), scene, K)
    assert rec.status == STATUS_FAILED
    assert "crashed" in rec.reason
