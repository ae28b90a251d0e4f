"""Trajectory accuracy, run reports and the initialization benchmark."""

import csv
import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml

from .config import RunConfig, SensorMode
from .exceptions import AtlasException, DegenerateConfigurationException, InsufficientOverlapException
from .manifold import Pose, SimTransform, umeyama_alignment

logger = logging.getLogger(__name__)

ASSOCIATION_TOLERANCE = 0.01
"""Largest time difference (s) between associated estimate and ground-truth poses."""


class AlignmentKind(str, Enum):
    SIM3 = "sim3"
    SE3 = "se3"


def alignment_for(mode: SensorMode) -> AlignmentKind:
    """Monocular trajectories are aligned with a similarity, all others rigidly."""
    return AlignmentKind.SIM3 if SensorMode(mode) is SensorMode.MONOCULAR else AlignmentKind.SE3


def associate(
    estimate: Sequence[Tuple[float, Pose]],
    truth: Sequence[Tuple[float, Pose]],
    tolerance: float = ASSOCIATION_TOLERANCE,
) -> List[Tuple[int, int]]:
    """Pair each estimate with the nearest ground-truth pose in time.

    Returns:
        ``(estimate index, truth index)`` pairs, one per truth pose at most.
    """
    if not estimate or not truth:
        return []
    truth_times = np.array([t for t, _ in truth])
    pairs, used = [], set()
    for i, (timestamp, _) in enumerate(estimate):
        j = int(np.searchsorted(truth_times, timestamp))
        nearest = min(
            (k for k in (j - 1, j) if 0 <= k < len(truth_times)), key=lambda k: abs(truth_times[k] - timestamp)
        )
        if abs(truth_times[nearest] - timestamp) <= tolerance and nearest not in used:
            pairs.append((i, nearest))
            used.add(nearest)
    return pairs


class EvalReport:
    """Accuracy of one run, with the fusion events and the initialization curve."""

    ate_rmse: float
    """RMS of the translational residuals after alignment, in meters."""

    alignment: str
    """``sim3`` or ``se3``."""

    scale: float
    """Scale of the Sim(3) alignment."""

    scale_error: float
    """``|1 - s|`` of the Sim(3) alignment."""

    pairs: int
    """Number of associated poses."""

    events: List[Dict[str, Any]]
    """Merges and loop closures."""

    init_curve: List[Dict[str, Any]]
    """Initialization stages with the scale correction they applied."""

    extra: Dict[str, Any]
    """Run information: maps, keyframes, sessions."""

    def __init__(
        self,
        ate_rmse: float,
        alignment: str,
        scale: float,
        pairs: int,
        events: List[Dict[str, Any]] = None,
        init_curve: List[Dict[str, Any]] = None,
        extra: Dict[str, Any] = None,
    ):
        self.ate_rmse = float(ate_rmse)
        self.alignment = alignment
        self.scale = float(scale)
        self.scale_error = abs(1.0 - self.scale)
        self.pairs = pairs
        self.events = events or []
        self.init_curve = init_curve or []
        self.extra = extra or {}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "ate_rmse": round(self.ate_rmse, 9),
            "alignment": self.alignment,
            "scale": round(self.scale, 9),
            "scale_error": round(self.scale_error, 9),
            "pairs": self.pairs,
            "events": self.events,
            "init_curve": self.init_curve,
            **self.extra,
        }

    def write_yaml(self, path: Union[str, Path]):
        with open(path, "w") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=False)

    @classmethod
    def from_yaml(cls, path: Union[str, Path]) -> "EvalReport":
        with open(path) as f:
            data = yaml.safe_load(f)
        known = {"ate_rmse", "alignment", "scale", "scale_error", "pairs", "events", "init_curve"}
        return cls(
            data["ate_rmse"],
            data["alignment"],
            data["scale"],
            data["pairs"],
            data.get("events"),
            data.get("init_curve"),
            {k: v for k, v in data.items() if k not in known},
        )

    def __repr__(self) -> str:
        return f"<EvalReport ate={self.ate_rmse:.4f}m {self.alignment} scale_error={self.scale_error:.4f}>"


def align_trajectories(
    estimate: Sequence[Tuple[float, Pose]],
    truth: Sequence[Tuple[float, Pose]],
    with_scale: bool,
    tolerance: float = ASSOCIATION_TOLERANCE,
) -> Tuple[SimTransform, np.ndarray, np.ndarray]:
    """Alignment taking the estimate onto the ground truth.

    Returns:
        The transform and the associated estimate and truth positions.

    Raises:
        InsufficientOverlapException: For fewer than three associated poses,
            or positions that are coincident or collinear.
    """
    pairs = associate(estimate, truth, tolerance)
    if len(pairs) < 3:
        raise InsufficientOverlapException(
            "Too few poses associated with the ground truth.", {"pairs": len(pairs), "tolerance": tolerance}
        )
    source = np.array([estimate[i][1].translation for i, _ in pairs])
    target = np.array([truth[j][1].translation for _, j in pairs])
    try:
        transform, _ = umeyama_alignment(source, target, with_scale=with_scale)
    except DegenerateConfigurationException as e:
        raise InsufficientOverlapException(
            "Associated positions do not constrain an alignment.", {"pairs": len(pairs), "reason": e.detail}
        ) from None
    return transform, source, target


def eval_ate(
    estimate: Sequence[Tuple[float, Pose]],
    truth: Sequence[Tuple[float, Pose]],
    mode: SensorMode = SensorMode.STEREO_INERTIAL,
    tolerance: float = ASSOCIATION_TOLERANCE,
) -> EvalReport:
    """RMS absolute trajectory error after alignment.

    Monocular runs are aligned with Sim(3), other modes with SE(3). The scale
    error always comes from a Sim(3) alignment.

    Raises:
        InsufficientOverlapException: For fewer than three associated poses.
    """
    alignment = alignment_for(mode)
    similarity, source, target = align_trajectories(estimate, truth, True, tolerance)
    transform = similarity
    if alignment is AlignmentKind.SE3:
        transform, _, _ = align_trajectories(estimate, truth, False, tolerance)
    residuals = transform.act(source) - target
    rmse = float(np.sqrt(np.mean(np.sum(residuals**2, axis=1))))
    report = EvalReport(rmse, alignment.value, similarity.scale, len(source))
    logger.info("ATE %.6f m over %d poses (%s), scale error %.5f", rmse, len(source), alignment.value, report.scale_error)
    return report


def write_status_csv(path: Union[str, Path], rows: Sequence[Tuple[float, str, float, int, Optional[int]]]):
    """Per-frame tracking status: timestamp, state, time in state, tracked points, map."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["timestamp", "state", "time_in_state", "tracked", "map"])
        for timestamp, state, elapsed, tracked, map_id in rows:
            writer.writerow([f"{timestamp:.9f}", state, f"{elapsed:.6f}", tracked, "" if map_id is None else map_id])


class InitTrial:
    """Outcome of one initialization run of the benchmark."""

    def __init__(
        self,
        seed: int,
        scale_error: float = np.nan,
        gravity_error_deg: float = np.nan,
        scale_std: Optional[float] = None,
        failure: Optional[str] = None,
    ):
        self.seed = seed
        self.scale_error = scale_error
        self.gravity_error_deg = gravity_error_deg
        self.scale_std = scale_std
        self.failure = failure

    @property
    def succeeded(self) -> bool:
        return self.failure is None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "scale_error": None if np.isnan(self.scale_error) else round(float(self.scale_error), 9),
            "gravity_error_deg": None if np.isnan(self.gravity_error_deg) else round(float(self.gravity_error_deg), 9),
            "scale_std": self.scale_std,
            "failure": self.failure,
        }

    def __repr__(self) -> str:
        if self.failure:
            return f"<InitTrial seed={self.seed} failed: {self.failure}>"
        return f"<InitTrial seed={self.seed} scale_error={self.scale_error:.4f} gravity={self.gravity_error_deg:.3f}°>"


def map_errors(slam_map, truth: Sequence[Tuple[float, Pose]]) -> Tuple[float, float]:
    """Scale error and gravity direction error (degrees) of a gravity-aligned map.

    The scale comes from a Sim(3) alignment of the keyframe positions; the
    gravity error is the tilt of the rigid alignment rotation.
    """
    estimate = [(kf.timestamp, kf.pose) for kf in slam_map.ordered_keyframes()]
    similarity, source, target = align_trajectories(estimate, list(truth), True)
    rigid, _ = umeyama_alignment(source * similarity.scale, target, with_scale=False)
    up = rigid.rotation @ np.array([0.0, 0.0, 1.0])
    tilt = float(np.degrees(np.arccos(np.clip(up[2], -1.0, 1.0))))
    return abs(1.0 - similarity.scale), tilt


def init_benchmark(config: RunConfig, seeds: Sequence[int], spec=None) -> List[InitTrial]:
    """Run the monocular-inertial initialization on independent synthetic worlds.

    Each trial builds the vision-only map from the keyframes of the first
    initialization window, then estimates scale, gravity and biases.
    """
    from .initializer import InertialInitializer, build_tracks, vision_only_init
    from .models import Atlas
    from .sim import TrajectoryKind, WorldSpec, generate

    trials = []
    for seed in seeds:
        world_spec = spec or WorldSpec(
            trajectory=TrajectoryKind.LISSAJOUS,
            duration=config.init.window_seconds + 0.5,
            pixel_noise=0.5,
            gyro_noise=config.imu.gyro_noise,
            accel_noise=config.imu.accel_noise,
            gyro_walk=config.imu.gyro_walk,
            accel_walk=config.imu.accel_walk,
            gyro_bias=[0.002, -0.003, 0.001],
            accel_bias=[0.02, 0.01, -0.03],
        )
        world_spec.seed = seed
        world = generate(world_spec)
        session = world.session
        step = max(1, int(round(world_spec.frame_rate / config.init.keyframe_rate_hz)))
        views = [f for f in session.frames[::step] if f.timestamp <= config.init.window_seconds + 1e-9]
        preintegrations = [None] + [
            session.preintegrate(a.timestamp, b.timestamp) for a, b in zip(views[:-1], views[1:])
        ]
        atlas = Atlas(config.map, config.placerec, seed)
        atlas.new_active_map(inertial=True)
        try:
            tracks = build_tracks(views, config.tracking.association, config.placerec.hamming_threshold, config.placerec.ratio)
            vision_only_init(atlas, views, tracks, session.rig, config.init, config.solver, preintegrations, seed)
            state = InertialInitializer(config.init, config.solver).initialize(atlas.active)
            scale_error, gravity_error = map_errors(atlas.active, session.truth())
            trials.append(InitTrial(seed, scale_error, gravity_error, state.scale_std))
        except AtlasException as e:
            trials.append(InitTrial(seed, failure=str(e)))
        logger.info("%r", trials[-1])
    return trials


def summarize_trials(trials: Sequence[InitTrial]) -> Dict[str, Any]:
    done = [t for t in trials if t.succeeded]
    return {
        "trials": len(trials),
        "succeeded": len(done),
        "median_scale_error": float(np.median([t.scale_error for t in done])) if done else None,
        "median_gravity_error_deg": float(np.median([t.gravity_error_deg for t in done])) if done else None,
        "runs": [t.to_dict() for t in trials],
    }
