"""Command line front end.

Subcommands cover the pipeline stages: `extract` turns a recorded frame
sequence into a trajectory plus state-action pairs, `mission` flies a
scripted mission file inside a synthetic scene, `eval` compares two
trajectory files, and `dataset` renders seeded clip variations and extracts
each one.

Logs go to standard error; every data product goes to a file whose path is
printed on standard output. Exit codes: 0 success, 1 domain failure,
2 usage or input error, 3 partial result.
"""

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation, mission as mission_mod, odometry, simworld
from .config import Config
from .errors import InputError, SkyloopError
from .frames import load_sequence, save_sequence
from .geom import CameraIntrinsics
from .mission import (
    DirectoryVideoProvider,
    HttpVideoProvider,
    PathKnot,
    RelativePath,
    ScriptedPlanner,
    SimulatorVideoProvider,
    Subtask,
)
from .simworld import DroneState
from .trajectory import (
    Trajectory,
    TrajectorySample,
    format_trajectory,
    load_trajectory,
    save_trajectory,
)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_PARTIAL = 3

DEFAULT_CAMERA = dict(fx=320.0, fy=320.0, cx=320.0, cy=240.0,
                      width=640, height=480)

log = logging.getLogger("skyloop")


# ------------------------------------------------------------ file loaders


def _load_json(path) -> dict:
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as e:
        raise InputError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise InputError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise InputError(f"{path} must hold a JSON object")
    return data


def _camera_from(data: dict) -> CameraIntrinsics:
    cam = dict(DEFAULT_CAMERA)
    cam.update(data.get("camera", {}))
    try:
        return CameraIntrinsics(float(cam["fx"]), float(cam["fy"]),
                                float(cam["cx"]), float(cam["cy"]),
                                int(cam["width"]), int(cam["height"]))
    except (KeyError, TypeError, ValueError) as e:
        raise InputError(f"bad camera block: {e}") from e


def _load_scene(path):
    """Scene file: {"kind": "shell"|"random", "seed": int, ...params,
    "camera": {...}}. Returns (Scene, CameraIntrinsics)."""
    data = _load_json(path)
    kind = data.get("kind", "shell")
    seed = int(data.get("seed", 0))
    try:
        if kind == "shell":
            scene = simworld.shell_scene(
                seed,
                n_landmarks=int(data.get("n_landmarks", 1200)),
                half_size=float(data.get("half_size", 7.0)),
                height=float(data.get("height", 3.2)),
                planes=bool(data.get("planes", False)))
        elif kind == "random":
            scene = simworld.random_scene(
                seed,
                n_landmarks=int(data.get("n_landmarks", 300)),
                lo=data.get("lo", (-5.0, -5.0, 0.0)),
                hi=data.get("hi", (5.0, 5.0, 3.0)))
        else:
            raise InputError(f"unknown scene kind {kind!r}")
    except (TypeError, ValueError) as e:
        raise InputError(f"bad scene file {path}: {e}") from e
    return scene, _camera_from(data)


def _parse_knots(raw) -> RelativePath:
    try:
        knots = [PathKnot(float(k["t"]),
                          np.asarray(k["position"], dtype=float).reshape(3),
                          float(k["yaw"]))
                 for k in raw]
        return RelativePath(knots)
    except (KeyError, TypeError, ValueError) as e:
        raise InputError(f"bad path knots: {e}") from e


def _parse_start(data: dict) -> DroneState:
    start = data.get("start", {})
    try:
        return DroneState.at(
            np.asarray(start.get("position", (0.0, 0.0, 1.5)),
                       dtype=float).reshape(3),
            yaw=float(start.get("yaw", 0.0)),
            battery=float(start.get("battery", 1.0)))
    except (TypeError, ValueError) as e:
        raise InputError(f"bad start block: {e}") from e


def _load_mission(path):
    """Mission file: {"mission": str, "start": {...}, "subtasks":
    [{label, prompt, fps, path: [{t, position, yaw}]}]}."""
    data = _load_json(path)
    text = data.get("mission", "")
    if not isinstance(text, str) or not text.strip():
        raise InputError("mission file carries no mission text")
    raw_subs = data.get("subtasks")
    if not isinstance(raw_subs, list) or not raw_subs:
        raise InputError("mission file carries no subtasks")
    subtasks = []
    for i, raw in enumerate(raw_subs):
        try:
            label = str(raw["label"])
            prompt = str(raw["prompt"])
        except (KeyError, TypeError) as e:
            raise InputError(f"subtask {i}: {e}") from e
        path_ = _parse_knots(raw.get("path", ()))
        subtasks.append(Subtask(label, prompt, path_,
                                fps=float(raw.get("fps", 10.0))))
    return text, _parse_start(data), subtasks


# ------------------------------------------------------------ data writers


def _write_states_csv(states, path) -> None:
    lines = ["t,px,py,pz,qw,qx,qy,qz,vx,vy,vz,yaw_rate"]
    for s in states:
        q = s.rotation
        vals = (s.timestamp, *s.position, q.w, q.x, q.y, q.z,
                *s.velocity, s.yaw_rate)
        lines.append(",".join(f"{v:.9g}" for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def _concat_flown(records) -> Trajectory:
    samples = []
    offset = 0.0
    for rec in records:
        if rec.flown is None:
            continue
        for j, s in enumerate(rec.flown.samples):
            if samples and j == 0:
                continue    # same state the previous record ended on
            samples.append(TrajectorySample(offset + s.timestamp, s.pose))
        if samples:
            offset = samples[-1].timestamp
    return Trajectory(samples)


def _odometry_config(cfg: Config, seed):
    odo = cfg.odometry()
    if seed is not None:
        odo = dataclasses.replace(odo, seed=int(seed))
    return odo


# ------------------------------------------------------------- subcommands


def cmd_extract(args) -> int:
    seq = load_sequence(args.video_dir)
    cfg = Config.load(args.config)
    vo = odometry.run(seq, seq.intrinsics, _odometry_config(cfg, args.seed))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_trajectory(vo.trajectory, out)
    states_path = Path(args.states) if args.states \
        else out.with_suffix(".states.csv")
    _write_states_csv(vo.states, states_path)
    print(out)
    print(states_path)
    if vo.partial:
        log.warning("tracking lost partway; wrote %d poses",
                    len(vo.trajectory))
        return EXIT_PARTIAL
    log.info("tracked %d frames into %d poses", vo.frames_tracked,
             len(vo.trajectory))
    return EXIT_OK


def cmd_mission(args) -> int:
    text, state, subtasks = _load_mission(args.mission_file)
    scene, k = _load_scene(args.scene_file)
    cfg = Config.load(args.config)
    sim_cfg = cfg.sim()
    if args.clips:
        provider = DirectoryVideoProvider(args.clips)
    elif cfg.provider().url:
        provider = HttpVideoProvider(cfg.provider())
    else:
        provider = SimulatorVideoProvider(scene, sim_cfg)
    mission_log = mission_mod.execute_mission(
        text, ScriptedPlanner(subtasks), provider, scene, state, k,
        sim_cfg=sim_cfg, gains=cfg.gains(), settings=cfg.mission(),
        odo_cfg=_odometry_config(cfg, args.seed))

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "mission": mission_log.mission,
        "status": mission_log.status,
        "completed_subtasks": mission_log.completed_subtasks,
        "records": [{
            "label": r.subtask.label,
            "status": r.status,
            "reason": r.reason,
            "sim_time": r.sim_time,
            "battery": r.battery,
            "waypoints": len(r.waypoints),
            "terminal_error": None if np.isnan(r.terminal_error)
            else r.terminal_error,
        } for r in mission_log.records],
        "final_position": list(mission_log.final_state.position),
        "final_yaw": mission_log.final_state.yaw,
    }
    log_path = out_dir / "mission_log.json"
    log_path.write_text(json.dumps(payload, indent=2) + "\n")
    flown_path = out_dir / "flown.txt"
    save_trajectory(_concat_flown(mission_log.records), flown_path)
    print(log_path)
    print(flown_path)
    for r in mission_log.records:
        log.info("%s: %s %s", r.subtask.label, r.status, r.reason)
    return EXIT_OK if mission_log.status == mission_mod.STATUS_OK \
        else EXIT_FAILURE


def cmd_eval(args) -> int:
    est = load_trajectory(args.estimate)
    ref = load_trajectory(args.reference)
    comparison = evaluation.compare_trajectories(est, ref,
                                                 alignment=args.align)
    report = evaluation.emit_report(comparison, kind=args.report)
    out = Path(args.out) if args.out else Path(
        "report.json" if args.report == "json" else "report.txt")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report if report.endswith("\n") else report + "\n")
    print(out)
    if args.plot:
        aligned = est.transformed(comparison["transform"])
        svg = evaluation.emit_trajectory_plot(
            [("reference", ref), ("estimate", aligned)])
        plot_path = Path(args.plot)
        plot_path.parent.mkdir(parents=True, exist_ok=True)
        plot_path.write_text(svg)
        print(plot_path)
    return EXIT_OK


def _perturbed(path: RelativePath, rng, scale: float) -> RelativePath:
    """Jitter every knot after the first; the clip still starts where the
    camera is."""
    knots = [path.knots[0]]
    for k in path.knots[1:]:
        knots.append(PathKnot(k.t,
                              k.position + rng.normal(0.0, scale, 3),
                              k.yaw + float(rng.normal(0.0, 0.3 * scale))))
    return RelativePath(knots)


def cmd_dataset(args) -> int:
    if args.count < 1:
        raise InputError("count must be at least 1")
    scene, k = _load_scene(args.scene_file)
    spec = _load_json(args.paths_spec)
    base_path = _parse_knots(spec.get("path", ()))
    fps = float(spec.get("fps", 10.0))
    scale = args.perturbation if args.perturbation is not None \
        else float(spec.get("perturbation", 0.1))
    state = _parse_start(spec)
    cfg = Config.load(args.config)
    sim_cfg = cfg.sim()
    base_seed = int(args.seed) if args.seed is not None else 0
    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)

    start_cam = simworld.camera_pose(state, sim_cfg)
    for i in range(args.count):
        clip_seed = base_seed + i
        rng = np.random.default_rng(clip_seed)
        path = _perturbed(base_path, rng, scale)
        rel = mission_mod._camera_relative_path(path, sim_cfg.mounting)
        cam_traj = Trajectory([
            TrajectorySample(t, simworld.geom.compose(start_cam, pose))
            for t, pose in rel])
        video, gt = simworld.generate_video(scene, cam_traj, k, fps)
        clip_dir = out_root / f"clip_{i:03d}"
        save_sequence(video, clip_dir, format_trajectory(gt))
        vo = odometry.run(video, k, _odometry_config(cfg, clip_seed))
        save_trajectory(vo.trajectory, clip_dir / "extracted.txt")
        _write_states_csv(vo.states, clip_dir / "states.csv")
        log.info("clip %d: %d frames, %d poses%s", i, len(video.frames),
                 len(vo.trajectory), " (partial)" if vo.partial else "")
        print(clip_dir)
    return EXIT_OK


# ------------------------------------------------------------------ wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skyloop",
        description="video to trajectory extraction, simulated missions "
                    "and trajectory evaluation")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None,
                        help="JSON config path (default: $SKYLOOP_CONFIG)")
    common.add_argument("--seed", type=int, default=None,
                        help="override the random seed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", parents=[common],
                       help="run odometry on a recorded frame sequence")
    p.add_argument("video_dir", help="directory with meta.json and frames")
    p.add_argument("--out", required=True, help="trajectory text output")
    p.add_argument("--states", default=None,
                   help="state-action CSV output "
                        "(default: alongside --out)")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("mission", parents=[common],
                       help="fly a scripted mission in a synthetic scene")
    p.add_argument("mission_file", help="mission JSON")
    p.add_argument("scene_file", help="scene JSON")
    p.add_argument("--out-dir", default="mission_out",
                   help="where the log and flown trajectory go")
    p.add_argument("--clips", default=None,
                   help="serve clips from this directory instead of "
                        "rendering")
    p.set_defaults(func=cmd_mission)

    p = sub.add_parser("eval", parents=[common],
                       help="compare an estimated trajectory to a reference")
    p.add_argument("estimate")
    p.add_argument("reference")
    p.add_argument("--align", choices=("sim3", "se3", "none"),
                   default="sim3")
    p.add_argument("--report", choices=("text", "json"), default="text")
    p.add_argument("--out", default=None, help="report output path")
    p.add_argument("--plot", default=None, help="write an SVG overlay here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dataset", parents=[common],
                       help="render seeded clip variations and extract each")
    p.add_argument("scene_file", help="scene JSON")
    p.add_argument("paths_spec", help="path spec JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--perturbation", type=float, default=None,
                   help="knot jitter in meters (default: from the spec)")
    p.set_defaults(func=cmd_dataset)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as e:
        log.error("%s", e)
        return EXIT_USAGE
    except SkyloopError as e:
        log.error("%s", e)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
