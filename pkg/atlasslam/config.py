"""Run configuration: one dataclass per module, loaded from YAML files."""

import dataclasses
import logging
from dataclasses import dataclass, field
from enum import Enum
from os import getenv
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml

from .const import GRAVITY_MAGNITUDE, HUBER_DELTA_2DOF, HUBER_DELTA_3DOF
from .exceptions import ConfigurationException

logger = logging.getLogger(__name__)

CONFIG_ENV = "ATLASSLAM_CONFIG"
DEFAULT_CONFIG_PATH = Path(__file__).with_name("default_config.yaml")


class SensorMode(str, Enum):
    MONOCULAR = "mono"
    STEREO = "stereo"
    MONO_INERTIAL = "mono-inertial"
    STEREO_INERTIAL = "stereo-inertial"

    @property
    def inertial(self) -> bool:
        return self in (SensorMode.MONO_INERTIAL, SensorMode.STEREO_INERTIAL)

    @property
    def stereo(self) -> bool:
        return self in (SensorMode.STEREO, SensorMode.STEREO_INERTIAL)


class Association(str, Enum):
    ORACLE = "oracle"
    DESCRIPTOR = "descriptor"


@dataclass
class CameraConfig:
    model: str = "pinhole"
    intrinsics: List[float] = field(default_factory=lambda: [458.654, 457.296, 367.215, 248.375])
    resolution: List[int] = field(default_factory=lambda: [752, 480])
    distortion: List[float] = field(default_factory=lambda: [0.0, 0.0, 0.0, 0.0])
    max_angle_deg: float = 95.0
    T_cb: List[List[float]] = field(default_factory=lambda: [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]])


@dataclass
class ImuConfig:
    gyro_noise: float = 1.7e-4
    accel_noise: float = 2.0e-3
    gyro_walk: float = 1.9e-5
    accel_walk: float = 3.0e-3
    gravity: float = GRAVITY_MAGNITUDE
    rate_hz: float = 200.0
    bias_correction_gate: float = 0.05


@dataclass
class SolverConfig:
    max_iterations: int = 20
    lambda_initial: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.5
    lambda_max: float = 1e16
    term_tol: float = 1e-6
    step_tol: float = 1e-12
    chi2_floor: float = 1e-24
    singularity_tol: float = 1e-11
    use_schur: bool = True
    huber_delta_2dof: float = HUBER_DELTA_2DOF
    huber_delta_3dof: float = HUBER_DELTA_3DOF
    sigma_px: float = 1.0


@dataclass
class MapConfig:
    strong_covisibility: int = 100
    best_covisibles: int = 5
    culling_redundancy: float = 0.9
    culling_observers: int = 3
    min_tracked_points: int = 15
    culling_max_gap: float = 3.0
    local_ba_max_fixed: int = 20


@dataclass
class InitConfig:
    window_seconds: float = 2.0
    keyframe_rate_hz: float = 4.0
    min_parallax_deg: float = 1.0
    min_point_parallax_deg: float = 0.25
    min_matches: int = 30
    epipolar_threshold_deg: float = 0.25
    pnp_threshold_deg: float = 1.0
    ransac_iterations: int = 200
    bias_prior_accel: float = 1e-2
    bias_prior_gyro: float = 1e-4
    vi_ba_times: List[float] = field(default_factory=lambda: [5.0, 15.0])
    scale_refine_period: float = 10.0
    scale_refine_max_keyframes: int = 100
    scale_refine_max_seconds: float = 75.0
    scale_refine_gate: float = 1e-3
    max_scale_std: float = 0.2
    inertial_iterations: int = 100
    vision_iterations: int = 30


@dataclass
class PlaceRecConfig:
    candidates: int = 3
    hamming_threshold: int = 50
    ratio: float = 0.75
    vote_threshold: int = 12
    inlier_threshold: int = 20
    ransac_iterations: int = 300
    reprojection_threshold_px: float = 5.0
    search_radius_wide_px: float = 10.0
    search_radius_narrow_px: float = 4.0
    gravity_threshold_deg: float = 3.0
    required_verifications: int = 3
    max_consecutive_failures: int = 2
    vocabulary_threshold: int = 500
    vocabulary_branching: int = 10
    vocabulary_depth: int = 3
    pnp_threshold_deg: float = 1.0
    pnp_iterations: int = 100
    min_relocalization_inliers: int = 15


@dataclass
class FusionConfig:
    global_ba_max_keyframes: int = 300
    temporal_keyframes: int = 5
    pose_graph_iterations: int = 20
    welding_iterations: int = 10
    global_ba_iterations: int = 10
    point_fusion_px: float = 4.0


@dataclass
class TrackingConfig:
    association: Association = Association.DESCRIPTOR
    search_radius_px: float = 8.0
    lost_search_radius_px: float = 15.0
    keyframe_tracked_ratio: float = 0.9
    keyframe_max_interval: float = 0.5
    local_window: int = 10
    short_term_lost_seconds: float = 5.0
    young_map_seconds: float = 15.0
    concurrent: bool = False
    max_stereo_depth: float = 40.0


def default_cameras() -> List[CameraConfig]:
    """Rectified EuRoC-like pair, the right camera 11 cm along the left camera's x axis."""
    right = CameraConfig(intrinsics=[457.587, 456.134, 379.999, 255.238])
    right.T_cb[0][3] = -0.11
    return [CameraConfig(), right]


@dataclass
class RunConfig:
    mode: SensorMode = SensorMode.STEREO_INERTIAL
    cameras: List[CameraConfig] = field(default_factory=default_cameras)
    imu: Optional[ImuConfig] = field(default_factory=ImuConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    map: MapConfig = field(default_factory=MapConfig)
    init: InitConfig = field(default_factory=InitConfig)
    placerec: PlaceRecConfig = field(default_factory=PlaceRecConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    seed: int = 0
    output_dir: str = "output"

    def validate(self):
        """Check that the configuration is consistent with its sensor mode.

        Raises:
            ConfigurationException: For mode-inconsistent settings.
        """
        if self.mode.inertial and self.imu is None:
            raise ConfigurationException(
                "Inertial modes require an imu section.", {"mode": self.mode.value}
            )
        expected = 2 if self.mode.stereo else 1
        if len(self.cameras) < expected:
            raise ConfigurationException(
                "Not enough cameras for the sensor mode.",
                {"mode": self.mode.value, "cameras": len(self.cameras)},
            )
        times = self.init.vi_ba_times
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ConfigurationException("init.vi_ba_times must be strictly increasing.")
        if self.solver.lambda_initial <= 0 or self.solver.max_iterations < 0:
            raise ConfigurationException("Invalid solver schedule.")
        return self

    def to_dict(self) -> Dict[str, Any]:
        def convert(value):
            if isinstance(value, Enum):
                return value.value
            if isinstance(value, list):
                return [convert(v) for v in value]
            if isinstance(value, dict):
                return {k: convert(v) for k, v in value.items()}
            return value

        return convert(dataclasses.asdict(self))


def _build(cls, data: Any, path: str):
    if not dataclasses.is_dataclass(cls):
        return data
    if not isinstance(data, dict):
        raise ConfigurationException("Expected a mapping.", {"section": path})
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigurationException(
            "Unknown configuration keys.", {"section": path or "root", "keys": unknown}
        )
    kwargs = {}
    for name, value in data.items():
        target = _SECTION_TYPES.get((cls, name))
        if target is None:
            kwargs[name] = value
        elif isinstance(target, list):
            kwargs[name] = [_build(target[0], item, f"{path}{name}[{i}].") for i, item in enumerate(value)]
        elif value is None:
            kwargs[name] = None
        else:
            kwargs[name] = _build(target, value, f"{path}{name}.")
    try:
        instance = cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigurationException(str(e), {"section": path or "root"}) from None
    return instance


_SECTION_TYPES = {
    (RunConfig, "cameras"): [CameraConfig],
    (RunConfig, "imu"): ImuConfig,
    (RunConfig, "solver"): SolverConfig,
    (RunConfig, "map"): MapConfig,
    (RunConfig, "init"): InitConfig,
    (RunConfig, "placerec"): PlaceRecConfig,
    (RunConfig, "fusion"): FusionConfig,
    (RunConfig, "tracking"): TrackingConfig,
}


def _merge(base: Dict, override: Dict) -> Dict:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def config_from_dict(data: Dict[str, Any]) -> RunConfig:
    """Build and validate a :class:`RunConfig` from nested mappings.

    Raises:
        ConfigurationException: For unknown keys, invalid values or
            mode-inconsistent settings.
    """
    config = _build(RunConfig, data or {}, "")
    try:
        config.mode = SensorMode(config.mode)
        config.tracking.association = Association(config.tracking.association)
    except ValueError as e:
        raise ConfigurationException(str(e)) from None
    return config.validate()


def load_config(path: Union[str, Path, None] = None) -> RunConfig:
    """Load a configuration file over the packaged defaults.

    Arguments:
        path: YAML file to load. Falls back to the ``ATLASSLAM_CONFIG``
              environment variable, then to the defaults alone.

    Returns:
        The validated run configuration.

    Raises:
        ConfigurationException: If the file is missing, unreadable or invalid.
    """
    with open(DEFAULT_CONFIG_PATH) as f:
        data = yaml.safe_load(f)

    path = path if path else getenv(CONFIG_ENV)
    if path:
        try:
            with open(path) as f:
                user = yaml.safe_load(f) or {}
        except OSError as e:
            raise ConfigurationException(f"Cannot read config file: {e.strerror}", {"path": str(path)}) from None
        except yaml.YAMLError as e:
            raise ConfigurationException(f"Invalid YAML: {e}", {"path": str(path)}) from None
        if not isinstance(user, dict):
            raise ConfigurationException("Config file must hold a mapping.", {"path": str(path)})
        data = _merge(data, user)
        logger.debug("Loaded configuration from %s", path)
    return config_from_dict(data)
