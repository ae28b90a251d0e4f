"""Command-line entry point: synthetic data, session runs and evaluation."""

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml

from .camera import rig_to_config
from .config import Association, RunConfig, SensorMode, load_config
from .evaluation import EvalReport, alignment_for, eval_ate, init_benchmark, summarize_trials, write_status_csv
from .exceptions import AtlasException, ConfigurationException, DataException, EstimationException
from .fusion import EventLog, merge_maps
from .imu import ImuSample
from .io import EurocSequence, TrackFrame, ingest_euroc, load_atlas, read_tum, save_atlas, write_bundle, write_tum
from .manifold import Pose, SimTransform, exp_so3
from .pipeline import ConcurrentSystem, System, SystemBase

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

SESSION_GAP = 1.0
"""Seconds between the end of a session and the start of the next on the shared time axis."""


def make_system(config: RunConfig, atlas=None) -> SystemBase:
    """The sequential system, or the concurrent one when the config asks for it."""
    if config.tracking.concurrent:
        return ConcurrentSystem(config, atlas=atlas)
    return System(config, atlas=atlas)


def _close(system: SystemBase):
    if isinstance(system, ConcurrentSystem):
        system.close()


def shift_sequence(sequence: EurocSequence, offset: float) -> EurocSequence:
    """The same recording with every timestamp moved by ``offset`` seconds."""
    if not offset:
        return sequence
    frames = [TrackFrame(f.timestamp + offset, f.keypoints) for f in sequence.frames]
    imu = [ImuSample(s.timestamp + offset, s.gyro, s.accel) for s in sequence.imu]
    truth = None
    if sequence.groundtruth is not None:
        truth = [(t + offset, pose) for t, pose in sequence.groundtruth]
    return EurocSequence(sequence.root, imu, frames, truth)


def _end_time(sequence: EurocSequence) -> float:
    stamps = [f.timestamp for f in sequence.frames[-1:]] + [s.timestamp for s in sequence.imu[-1:]]
    return max(stamps, default=0.0)


def build_report(
    system: SystemBase,
    trajectory: List[Tuple[float, Pose]],
    truth: Optional[List[Tuple[float, Pose]]],
    extra: Dict[str, Any] = None,
) -> EvalReport:
    """Accuracy of a run with its fusion events and initialization curve.

    Raises:
        InsufficientOverlapException: If the trajectory barely overlaps the ground truth.
    """
    mode = system.config.mode
    if truth:
        report = eval_ate(trajectory, truth, mode)
    else:
        logger.warning("No ground truth, the report carries no accuracy")
        report = EvalReport(float("nan"), alignment_for(mode).value, 1.0, 0)
    report.events = [
        {
            "timestamp": round(float(e.timestamp), 9),
            "type": e.kind,
            "active_keyframe": int(e.active_keyframe_id),
            "matched_keyframe": int(e.matched_keyframe_id),
            "keyframes": int(e.keyframes),
            "chi2_before": float(e.chi2_before),
            "chi2_after": float(e.chi2_after),
            "global_ba": e.global_ba,
        }
        for e in system.events
    ]
    report.init_curve = [
        {"timestamp": round(float(e.timestamp), 9), "stage": e.stage.value, "scale": float(e.scale), "chi2": float(e.chi2)}
        for e in system.initializer.history
    ]
    report.extra = {
        "mode": mode.value,
        "maps": len(system.atlas),
        "keyframes": sum(len(m.keyframes) for m in system.atlas.maps.values()),
        "frames": len(system.status_rows),
        "tracked_frames": len(trajectory),
        **(extra or {}),
    }
    return report


def _write_outputs(system: SystemBase, trajectory, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    write_tum(out / "trajectory.tum", trajectory)
    write_status_csv(out / "status.csv", system.status_rows)
    system.events.write_csv(out / "events.csv")
    save_atlas(system.atlas, out / "atlas.bin")


def run_session(
    config: RunConfig, data: Union[str, Path], out: Union[str, Path], tracks: Union[str, Path] = None
) -> EvalReport:
    """Process one recording and write its trajectory, status, events, atlas and report.

    Raises:
        DataException: For unreadable or inconsistent input files.
        ConfigurationException: For a recording that does not fit the sensor mode.
    """
    out = Path(out)
    sequence = ingest_euroc(data, config.mode.inertial, tracks)
    system = make_system(config)
    try:
        trajectory = system.run(sequence.frames, sequence.imu)
    finally:
        _close(system)
    _write_outputs(system, trajectory, out)
    report = build_report(system, trajectory, sequence.groundtruth, {"sessions": 1})
    report.write_yaml(out / "report.yaml")
    logger.info("Session done: %r", report)
    return report


def run_multisession(config: RunConfig, data: Sequence[Union[str, Path]], out: Union[str, Path]) -> EvalReport:
    """Process recordings one after the other, carrying the atlas through its file.

    Each session starts in a new active map. Sessions are laid end to end on
    one time axis so the trajectories of every session are evaluated with a
    single alignment.
    """
    out = Path(out)
    system = make_system(config)
    truth: List[Tuple[float, Pose]] = []
    offset = 0.0
    try:
        for index, path in enumerate(data):
            sequence = shift_sequence(ingest_euroc(path, config.mode.inertial), offset)
            if index:
                system.new_session(load_atlas(out / f"session_{index - 1}" / "atlas.bin"))
            trajectory = system.run(sequence.frames, sequence.imu)
            _write_outputs(system, trajectory, out / f"session_{index}")
            if sequence.groundtruth:
                truth.extend(sequence.groundtruth)
            offset = _end_time(sequence) + SESSION_GAP
            logger.info("Session %d done, %d maps in the atlas", index, len(system.atlas))
    finally:
        _close(system)
    trajectory = system.trajectory()
    write_tum(out / "trajectory.tum", trajectory)
    system.events.write_csv(out / "events.csv")
    report = build_report(system, trajectory, sorted(truth, key=lambda row: row[0]), {"sessions": len(data)})
    report.write_yaml(out / "report.yaml")
    logger.info("Multi-session run done: %r", report)
    return report


def simulate(args: argparse.Namespace, config: RunConfig) -> Path:
    """Write one fixture bundle per session and a matching config file."""
    from .sim import TrajectoryKind, WorldSpec, generate

    spec = WorldSpec(
        trajectory=TrajectoryKind(args.trajectory),
        duration=args.duration,
        frame_rate=args.frame_rate,
        imu_rate=args.imu_rate,
        landmarks=args.landmarks,
        stereo=config.mode.stereo,
        camera_model=args.camera_model,
        pixel_noise=args.pixel_noise,
        occlusions=[tuple(o) for o in args.occlusion or []],
        seed=config.seed,
    )
    if args.imu_noise:
        spec.gyro_noise, spec.accel_noise = config.imu.gyro_noise, config.imu.accel_noise
        spec.gyro_walk, spec.accel_walk = config.imu.gyro_walk, config.imu.accel_walk
    world = generate(spec)
    out = Path(args.out)
    for session in world.sessions:
        write_bundle(out / f"session_{session.index}", session.frames, session.imu, session.truth())
    config.cameras = rig_to_config(world.session.rig)
    if args.oracle:
        config.tracking.association = Association.ORACLE
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.yaml", "w") as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=False)
    logger.info("Wrote %r to %s", world, out)
    return out


def merge_demo(config: RunConfig, out: Union[str, Path], drift_scale: float = 1.2, drift_yaw_deg: float = 25.0) -> EvalReport:
    """Merge two maps of the same place built in different frames.

    Both maps come from the ground truth of a two-session world; the second
    is expressed in a frame rotated, shifted and scaled with respect to the
    first. The active map is fed keyframe by keyframe to place recognition
    until a merge is accepted.

    Raises:
        EstimationException: If no merge is detected.
    """
    from .models import Atlas
    from .placerec import PlaceRecognizer
    from .sim import TrajectoryKind, WorldSpec, build_reference_map, generate

    world = generate(WorldSpec(trajectory=TrajectoryKind.TWO_SESSION, duration=8.0, seed=config.seed))
    atlas = Atlas(config.map, config.placerec, config.seed)
    warp = SimTransform(drift_scale, exp_so3(np.radians([0.0, 0.0, drift_yaw_deg])), np.array([2.0, -1.0, 0.5]))
    build_reference_map(world, atlas, 0, seed=config.seed)
    truth = {kf.id: kf.pose for kf in atlas.active.keyframes.values()}
    active = build_reference_map(world, atlas, 1, transform=warp, seed=config.seed)
    for keyframe in active.keyframes.values():
        truth[keyframe.id] = warp.inverse().transform_pose(keyframe.pose, keyframe.rig.extrinsics[0])

    recognizer = PlaceRecognizer(atlas, config.placerec, config.solver, config.seed)
    log = EventLog()
    merged = None
    for keyframe in active.ordered_keyframes():
        hypothesis = recognizer.process(keyframe, estimate_scale=True)
        if hypothesis is not None and hypothesis.is_merge:
            merged = merge_maps(atlas, hypothesis, config.fusion, config.placerec, config.solver, log)
            break
    if merged is None:
        raise EstimationException("No merge detected between the two maps.", {"keyframes": len(active.keyframes)})

    slam_map = atlas.maps[merged]
    errors = [np.linalg.norm(kf.pose.translation - truth[kf.id].translation) for kf in slam_map.keyframes.values()]
    rmse = float(np.sqrt(np.mean(np.square(errors))))
    event = log.events[0]
    report = EvalReport(
        rmse,
        "none",
        1.0,
        len(errors),
        [{"type": event.kind, "chi2_before": float(event.chi2_before), "chi2_after": float(event.chi2_after)}],
        extra={"maps": len(atlas), "keyframes": len(slam_map.keyframes)},
    )
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    log.write_csv(out / "events.csv")
    report.write_yaml(out / "report.yaml")
    logger.info("Merged map %d: keyframe position RMS %.4f m", merged, rmse)
    return report


def write_init_csv(path: Union[str, Path], trials):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["seed", "scale_error", "gravity_error_deg", "scale_std", "failure"])
        for trial in trials:
            row = trial.to_dict()
            writer.writerow([row[k] if row[k] is not None else "" for k in ("seed", "scale_error", "gravity_error_deg", "scale_std", "failure")])


### COMMANDS ###
def _config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config)
    if getattr(args, "mode", None):
        config.mode = SensorMode(args.mode)
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "concurrent", False):
        config.tracking.concurrent = True
    if getattr(args, "oracle", False):
        config.tracking.association = Association.ORACLE
    return config.validate()


def _cmd_simulate(args) -> int:
    simulate(args, _config(args))
    return EXIT_OK


def _cmd_run(args) -> int:
    config = _config(args)
    report = run_session(config, args.data, args.out or config.output_dir, args.tracks)
    print(yaml.safe_dump(report.to_dict(), sort_keys=False), end="")
    return EXIT_OK


def _cmd_run_multi(args) -> int:
    config = _config(args)
    report = run_multisession(config, args.data, args.out or config.output_dir)
    print(yaml.safe_dump(report.to_dict(), sort_keys=False), end="")
    return EXIT_OK


def _cmd_init_bench(args) -> int:
    config = _config(args)
    trials = init_benchmark(config, [config.seed + k for k in range(args.trials)])
    if args.out:
        write_init_csv(args.out, trials)
    summary = summarize_trials(trials)
    summary.pop("runs")
    print(yaml.safe_dump(summary, sort_keys=False), end="")
    return EXIT_OK


def _cmd_eval_ate(args) -> int:
    report = eval_ate(read_tum(args.estimate), read_tum(args.truth), SensorMode(args.mode))
    if args.out:
        report.write_yaml(args.out)
    print(yaml.safe_dump(report.to_dict(), sort_keys=False), end="")
    return EXIT_OK


def _cmd_merge_demo(args) -> int:
    config = _config(args)
    report = merge_demo(config, args.out or config.output_dir)
    print(yaml.safe_dump(report.to_dict(), sort_keys=False), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atlas-slam", description="Multi-map visual-inertial SLAM on feature tracks.")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    commands = parser.add_subparsers(dest="command", required=True)

    def command(name: str, handler, help: str, config: bool = True) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help)
        sub.set_defaults(handler=handler)
        if config:
            sub.add_argument("-c", "--config", help="YAML config file (default: $ATLASSLAM_CONFIG)")
            sub.add_argument("--mode", choices=[m.value for m in SensorMode], help="override the sensor mode")
            sub.add_argument("--seed", type=int, help="override the seed")
        return sub

    sim = command("simulate", _cmd_simulate, "write synthetic fixture bundles")
    sim.add_argument("out", help="output directory")
    sim.add_argument("--trajectory", default="circle", choices=["circle", "lissajous", "corridor", "two-session"])
    sim.add_argument("--duration", type=float, default=10.0)
    sim.add_argument("--frame-rate", type=float, default=20.0)
    sim.add_argument("--imu-rate", type=float, default=200.0)
    sim.add_argument("--landmarks", type=int, default=1200)
    sim.add_argument("--camera-model", default="pinhole", choices=["pinhole", "kannala-brandt"])
    sim.add_argument("--pixel-noise", type=float, default=0.0)
    sim.add_argument("--imu-noise", action="store_true", help="add the configured IMU noise")
    sim.add_argument("--occlusion", type=float, nargs=2, action="append", metavar=("START", "END"))
    sim.add_argument("--oracle", action="store_true", help="write a config with oracle association")

    run = command("run", _cmd_run, "process one recording")
    run.add_argument("data", help="EuRoC-style directory or fixture bundle")
    run.add_argument("-o", "--out", help="output directory (default: output_dir of the config)")
    run.add_argument("--tracks", help="feature-track file (default: tracks.csv in the data directory)")
    run.add_argument("--concurrent", action="store_true", help="map on a worker thread")
    run.add_argument("--oracle", action="store_true", help="associate by ground-truth landmark")

    multi = command("run-multi", _cmd_run_multi, "process recordings as successive sessions")
    multi.add_argument("data", nargs="+", help="recordings in session order")
    multi.add_argument("-o", "--out", help="output directory (default: output_dir of the config)")
    multi.add_argument("--concurrent", action="store_true", help="map on a worker thread")
    multi.add_argument("--oracle", action="store_true", help="associate by ground-truth landmark")

    bench = command("init-bench", _cmd_init_bench, "benchmark the inertial initialization")
    bench.add_argument("--trials", type=int, default=10)
    bench.add_argument("-o", "--out", help="CSV file of the trials")

    ate = command("eval-ate", _cmd_eval_ate, "RMS ATE of a TUM trajectory", config=False)
    ate.add_argument("estimate", help="estimated TUM trajectory")
    ate.add_argument("truth", help="ground-truth TUM trajectory")
    ate.add_argument("--mode", default=SensorMode.STEREO_INERTIAL.value, choices=[m.value for m in SensorMode])
    ate.add_argument("-o", "--out", help="report YAML file")

    demo = command("merge-demo", _cmd_merge_demo, "merge two synthetic maps of one place")
    demo.add_argument("-o", "--out", help="output directory (default: output_dir of the config)")
    return parser


def main(argv: Sequence[str] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except ConfigurationException as e:
        logger.error("Configuration error: %s", e)
        return EXIT_CONFIG
    except DataException as e:
        logger.error("Data error: %s", e)
        return EXIT_DATA
    except OSError as e:
        logger.error("Data error: %s", e)
        return EXIT_DATA
    except AtlasException as e:
        logger.error("%s", e)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
