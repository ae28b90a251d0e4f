"""Synthetic worlds with exact ground truth for trajectories, IMU and observations."""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .camera import CameraRig, create_camera
from .const import DESCRIPTOR_BYTES, GRAVITY_MAGNITUDE
from .exceptions import InvalidArgumentException, InvalidSpecException
from .imu import ImuNoise, ImuSample, NavState, preintegrate, samples_between
from .manifold import Pose, SimTransform, exp_so3

logger = logging.getLogger(__name__)


class TrajectoryKind(str, Enum):
    CIRCLE = "circle"
    LISSAJOUS = "lissajous"
    CORRIDOR = "corridor"
    TWO_SESSION = "two-session"


def _euler_rotation(yaw: float, pitch: float, roll: float) -> np.ndarray:
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    return rz @ ry @ rx


class Trajectory(ABC):
    """Smooth body motion with analytic derivatives.

    Orientation is ``Rz(yaw)·Ry(pitch)·Rx(roll)`` of the body (IMU) frame
    in a z-up gravity-aligned world.
    """

    @abstractmethod
    def kinematics(self, t: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Position, velocity and acceleration in the world frame."""

    @abstractmethod
    def angles(self, t: float) -> Tuple[np.ndarray, np.ndarray]:
        """``(yaw, pitch, roll)`` and their time derivatives."""

    def rotation(self, t: float) -> np.ndarray:
        return _euler_rotation(*self.angles(t)[0])

    def angular_velocity(self, t: float) -> np.ndarray:
        """Body-frame angular velocity."""
        (_, pitch, roll), (d_yaw, d_pitch, d_roll) = self.angles(t)
        return np.array(
            [
                d_roll - d_yaw * np.sin(pitch),
                d_pitch * np.cos(roll) + d_yaw * np.cos(pitch) * np.sin(roll),
                -d_pitch * np.sin(roll) + d_yaw * np.cos(pitch) * np.cos(roll),
            ]
        )

    def pose(self, t: float) -> Pose:
        return Pose(self.rotation(t), self.kinematics(t)[0])

    def state(self, t: float) -> NavState:
        position, velocity, _ = self.kinematics(t)
        return NavState(Pose(self.rotation(t), position), velocity)

    def specific_force(self, t: float, gravity: np.ndarray) -> np.ndarray:
        """Accelerometer reading without bias or noise, ``Rᵀ(a - g)``."""
        return self.rotation(t).T @ (self.kinematics(t)[2] - gravity)


def _sine(amplitude: float, omega: float, phase: float, t: float):
    """Value, first and second derivative of ``A·sin(ωt + φ)``."""
    s, c = np.sin(omega * t + phase), np.cos(omega * t + phase)
    return amplitude * s, amplitude * omega * c, -amplitude * omega * omega * s


class CircleTrajectory(Trajectory):
    """Circle around a center with the body looking outwards."""

    def __init__(
        self,
        radius: float = 5.0,
        period: float = 20.0,
        phase: float = 0.0,
        height: float = 1.5,
        tilt: float = 0.0,
    ):
        self.radius = radius
        self.omega = 2.0 * np.pi / period
        self.phase = phase
        self.height = height
        self.tilt = tilt

    def kinematics(self, t):
        r, w, a = self.radius, self.omega, self.omega * t + self.phase
        z, dz, ddz = _sine(0.3, 3.0 * w, 0.0, t)
        position = np.array([r * np.cos(a), r * np.sin(a), self.height + z])
        velocity = np.array([-r * w * np.sin(a), r * w * np.cos(a), dz])
        acceleration = np.array([-r * w * w * np.cos(a), -r * w * w * np.sin(a), ddz])
        return position, velocity, acceleration

    def angles(self, t):
        w = self.omega
        pitch, d_pitch, _ = _sine(0.12, 2.0 * w + 0.9, 0.4, t)
        roll, d_roll, _ = _sine(0.12, 1.7 * w + 1.1, 1.3, t)
        return (
            np.array([w * t + self.phase, pitch, roll + self.tilt]),
            np.array([w, d_pitch, d_roll]),
        )


class LissajousTrajectory(Trajectory):
    """Motion excited on all axes, facing the +x direction."""

    def __init__(self, amplitude=(1.0, 1.5, 0.5), frequency=(0.2, 0.3, 0.25), tilt: float = 0.0):
        self.amplitude = amplitude
        self.omega = [2.0 * np.pi * f for f in frequency]
        self.tilt = tilt

    def kinematics(self, t):
        parts = [_sine(a, w, p, t) for a, w, p in zip(self.amplitude, self.omega, (0.0, 0.7, 1.9))]
        position = np.array([p[0] for p in parts]) + np.array([0.0, 0.0, 1.5])
        return position, np.array([p[1] for p in parts]), np.array([p[2] for p in parts])

    def angles(self, t):
        yaw, d_yaw, _ = _sine(0.4, 2.0 * np.pi * 0.15, 0.0, t)
        pitch, d_pitch, _ = _sine(0.15, 2.0 * np.pi * 0.35, 0.5, t)
        roll, d_roll, _ = _sine(0.15, 2.0 * np.pi * 0.25, 1.0, t)
        return np.array([yaw, pitch, roll + self.tilt]), np.array([d_yaw, d_pitch, d_roll])


class CorridorTrajectory(Trajectory):
    """Forward walk along +x with a gentle lateral sway."""

    def __init__(self, speed: float = 1.0, tilt: float = 0.0):
        self.speed = speed
        self.tilt = tilt

    def kinematics(self, t):
        y, dy, ddy = _sine(0.3, 0.5, 0.0, t)
        z, dz, ddz = _sine(0.1, 0.7, 0.0, t)
        return (
            np.array([self.speed * t, y, 1.5 + z]),
            np.array([self.speed, dy, dz]),
            np.array([0.0, ddy, ddz]),
        )

    def angles(self, t):
        yaw, d_yaw, _ = _sine(0.1, 0.3, 0.0, t)
        pitch, d_pitch, _ = _sine(0.05, 1.1, 0.3, t)
        roll, d_roll, _ = _sine(0.05, 0.9, 0.8, t)
        return np.array([yaw, pitch, roll + self.tilt]), np.array([d_yaw, d_pitch, d_roll])


@dataclass
class WorldSpec:
    """Parameters of a synthetic world and of the sessions recorded in it."""

    trajectory: TrajectoryKind = TrajectoryKind.CIRCLE
    duration: float = 10.0
    imu_rate: float = 200.0
    frame_rate: float = 20.0
    landmarks: int = 1200
    stereo: bool = False
    camera_model: str = "pinhole"
    pixel_noise: float = 0.0
    gyro_noise: float = 0.0
    accel_noise: float = 0.0
    gyro_walk: float = 0.0
    accel_walk: float = 0.0
    gyro_bias: List[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    accel_bias: List[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    flip_rate: float = 0.0
    gravity: float = GRAVITY_MAGNITUDE
    tilt_deg: float = 0.0
    radius: float = 5.0
    period: float = 20.0
    session_offset_rad: float = np.pi / 2.0
    occlusions: List[Tuple[float, float]] = field(default_factory=list)
    seed: int = 0

    def validate(self) -> "WorldSpec":
        """Check the world description for physical consistency.

        Raises:
            InvalidSpecException: For non-physical or inconsistent values.
        """
        try:
            self.trajectory = TrajectoryKind(self.trajectory)
        except ValueError:
            raise InvalidSpecException("Unknown trajectory kind.", {"trajectory": self.trajectory}) from None
        positive = ("duration", "imu_rate", "frame_rate", "landmarks", "gravity", "radius", "period")
        for name in positive:
            if getattr(self, name) <= 0:
                raise InvalidSpecException(f"{name} must be positive.", {name: getattr(self, name)})
        non_negative = ("pixel_noise", "gyro_noise", "accel_noise", "gyro_walk", "accel_walk")
        for name in non_negative:
            if getattr(self, name) < 0:
                raise InvalidSpecException(f"{name} cannot be negative.", {name: getattr(self, name)})
        if not 0.0 <= self.flip_rate < 0.5:
            raise InvalidSpecException("flip_rate must lie in [0, 0.5).", {"flip_rate": self.flip_rate})
        if self.imu_rate < self.frame_rate:
            raise InvalidSpecException("The IMU must be sampled faster than the cameras.")
        if len(self.gyro_bias) != 3 or len(self.accel_bias) != 3:
            raise InvalidSpecException("Biases are 3-vectors.")
        return self

    def imu_noise(self) -> ImuNoise:
        """Noise model for the preintegration covariance; zero densities fall back to defaults."""
        default = ImuNoise()
        return ImuNoise(
            self.gyro_noise or default.gyro_noise,
            self.accel_noise or default.accel_noise,
            self.gyro_walk or default.gyro_walk,
            self.accel_walk or default.accel_walk,
            self.gravity,
        )


def _default_camera(camera_model: str):
    if camera_model == "pinhole":
        return create_camera("pinhole", (458.654, 457.296, 367.215, 248.375), (752, 480))
    return create_camera("kannala-brandt", (380.0, 380.0, 376.0, 240.0), (752, 480), (0.01, -0.005, 0.001, 0.0))


def default_rig(stereo: bool = False, camera_model: str = "pinhole") -> CameraRig:
    """A forward-looking EuRoC-like rig; the right camera is slightly rotated (no rectification)."""
    # camera z forward (body x), camera x right (body -y), camera y down (body -z)
    r_bc = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    left = Pose(r_bc, np.array([0.05, 0.055, 0.02])).inverse()
    if not stereo:
        return CameraRig([_default_camera(camera_model)], [left])
    right = Pose(r_bc @ exp_so3(np.radians([0.3, -1.0, 0.2])), np.array([0.05, -0.055, 0.02])).inverse()
    return CameraRig([_default_camera(camera_model), _default_camera(camera_model)], [left, right])


class SimFrame:
    """An image instant with its observations and ground truth."""

    def __init__(self, index: int, timestamp: float, truth: NavState, keypoints: list):
        self.index = index
        self.timestamp = timestamp
        self.truth = truth
        self.keypoints = keypoints

    def __repr__(self) -> str:
        return f"<SimFrame {self.index} t={self.timestamp:.3f} keypoints={len(self.keypoints)}>"


class SimulatedSession:
    """One recording: frames with observations, IMU samples and ground truth."""

    def __init__(
        self,
        index: int,
        trajectory: Trajectory,
        rig: CameraRig,
        frames: List[SimFrame],
        imu: List[ImuSample],
        biases: Dict[float, np.ndarray],
        noise: ImuNoise,
        gravity: np.ndarray,
    ):
        self.index = index
        self.trajectory = trajectory
        self.rig = rig
        self.frames = frames
        self.imu = imu
        self.biases = biases
        self.noise = noise
        self.gravity = gravity

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([frame.timestamp for frame in self.frames])

    def truth(self) -> List[Tuple[float, Pose]]:
        """Ground-truth body poses at the frame times."""
        return [(frame.timestamp, frame.truth.pose) for frame in self.frames]

    def preintegrate(self, start: float, end: float, bias: np.ndarray = None):
        """Preintegrate the IMU stream between two instants."""
        return preintegrate(samples_between(self.imu, start, end), bias, self.noise)

    def __repr__(self) -> str:
        return f"<SimulatedSession {self.index} frames={len(self.frames)} imu={len(self.imu)}>"


class SimulatedWorld:
    """Landmarks shared by all sessions of a synthetic world."""

    def __init__(self, spec: WorldSpec, landmarks: np.ndarray, descriptors: np.ndarray, sessions: List[SimulatedSession]):
        self.spec = spec
        self.landmarks = landmarks
        self.descriptors = descriptors
        self.sessions = sessions

    @property
    def session(self) -> SimulatedSession:
        return self.sessions[0]

    def __repr__(self) -> str:
        return f"<SimulatedWorld {self.spec.trajectory.value} landmarks={len(self.landmarks)} sessions={len(self.sessions)}>"


def _trajectories(spec: WorldSpec) -> List[Trajectory]:
    tilt = np.radians(spec.tilt_deg)
    kind = spec.trajectory
    if kind is TrajectoryKind.CIRCLE:
        return [CircleTrajectory(spec.radius, spec.period, tilt=tilt)]
    if kind is TrajectoryKind.TWO_SESSION:
        return [
            CircleTrajectory(spec.radius, spec.period, 0.0, tilt=tilt),
            CircleTrajectory(spec.radius, spec.period, spec.session_offset_rad, tilt=tilt),
        ]
    if kind is TrajectoryKind.LISSAJOUS:
        return [LissajousTrajectory(tilt=tilt)]
    return [CorridorTrajectory(tilt=tilt)]


def _landmarks(spec: WorldSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.landmarks
    kind = spec.trajectory
    if kind in (TrajectoryKind.CIRCLE, TrajectoryKind.TWO_SESSION):
        angle = rng.uniform(0.0, 2.0 * np.pi, n)
        radius = spec.radius + rng.uniform(3.0, 5.0, n)
        return np.column_stack((radius * np.cos(angle), radius * np.sin(angle), rng.uniform(-0.5, 3.5, n)))
    if kind is TrajectoryKind.LISSAJOUS:
        return np.column_stack((rng.uniform(4.5, 8.0, n), rng.uniform(-6.0, 6.0, n), rng.uniform(-1.5, 4.5, n)))
    length = spec.duration * 1.0 + 12.0
    side = rng.choice([-1.0, 1.0], n)
    return np.column_stack(
        (rng.uniform(-2.0, length, n), side * rng.uniform(2.5, 3.5, n), rng.uniform(-0.5, 3.5, n))
    )


def flip_bits(descriptors: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Flip each bit independently with the given probability."""
    if rate <= 0:
        return descriptors.copy()
    mask = np.packbits(rng.random((len(descriptors), DESCRIPTOR_BYTES * 8)) < rate, axis=1)
    return descriptors ^ mask


def _observe(
    spec: WorldSpec,
    rig: CameraRig,
    pose: Pose,
    landmarks: np.ndarray,
    descriptors: np.ndarray,
    rng: np.random.Generator,
) -> list:
    from .models import Keypoint

    keypoints = []
    for index, camera in enumerate(rig.cameras):
        x_cam = rig.world_to_camera(pose, landmarks, index)
        uv, valid = camera.project_many(x_cam)
        valid &= np.linalg.norm(x_cam, axis=1) > 0.3
        visible = np.nonzero(valid)[0]
        if len(visible) == 0:
            continue
        noisy = uv[visible] + rng.normal(0.0, spec.pixel_noise, (len(visible), 2)) if spec.pixel_noise > 0 else uv[visible]
        inside = camera.in_image(noisy, border=1.0)
        visible, noisy = visible[inside], noisy[inside]
        flipped = flip_bits(descriptors[visible], spec.flip_rate, rng)
        sigma = max(spec.pixel_noise, 1.0)
        keypoints.extend(
            Keypoint(noisy[k], flipped[k], index, sigma, int(visible[k])) for k in range(len(visible))
        )
    return keypoints


def _occluded(spec: WorldSpec, t: float) -> bool:
    return any(start <= t < end for start, end in spec.occlusions)


def _session(
    spec: WorldSpec,
    index: int,
    trajectory: Trajectory,
    rig: CameraRig,
    landmarks: np.ndarray,
    descriptors: np.ndarray,
    rng: np.random.Generator,
) -> SimulatedSession:
    gravity = np.array([0.0, 0.0, -spec.gravity])
    dt = 1.0 / spec.imu_rate
    count = int(round(spec.duration * spec.imu_rate))
    bias = np.concatenate((spec.gyro_bias, spec.accel_bias)).astype(float)
    walk = np.array([spec.gyro_walk] * 3 + [spec.accel_walk] * 3)
    white = np.array([spec.gyro_noise] * 3 + [spec.accel_noise] * 3) / np.sqrt(dt)

    imu, biases = [], {}
    for k in range(count + 1):
        t = k * dt
        biases[round(t, 9)] = bias.copy()
        gyro = trajectory.angular_velocity(t) + bias[:3]
        accel = trajectory.specific_force(t, gravity) + bias[3:]
        if np.any(white > 0):
            noise = rng.normal(0.0, 1.0, 6) * white
            gyro, accel = gyro + noise[:3], accel + noise[3:]
        imu.append(ImuSample(t, gyro, accel))
        if np.any(walk > 0):
            bias = bias + rng.normal(0.0, 1.0, 6) * walk * np.sqrt(dt)

    frames = []
    frame_count = int(np.floor(spec.duration * spec.frame_rate + 1e-9))
    for k in range(frame_count + 1):
        t = k / spec.frame_rate
        truth = trajectory.state(t)
        truth.bias = biases.get(round(t, 9), bias)
        keypoints = [] if _occluded(spec, t) else _observe(spec, rig, truth.pose, landmarks, descriptors, rng)
        frames.append(SimFrame(k, t, truth, keypoints))
    return SimulatedSession(index, trajectory, rig, frames, imu, biases, spec.imu_noise(), gravity)


def generate(spec: WorldSpec) -> SimulatedWorld:
    """Generate landmarks, sessions, IMU streams and observations.

    IMU samples are analytic derivatives of the trajectory plus bias and
    seeded noise. Observations are exact projections plus pixel noise, with
    one descriptor per landmark whose bits are flipped per observation.

    Raises:
        InvalidSpecException: If the world description is invalid.
    """
    spec.validate()
    streams = np.random.SeedSequence(spec.seed).spawn(4)
    world_rng = np.random.default_rng(streams[0])
    landmarks = _landmarks(spec, world_rng)
    descriptors = world_rng.integers(0, 256, (spec.landmarks, DESCRIPTOR_BYTES), dtype=np.uint8)
    rig = default_rig(spec.stereo, spec.camera_model)
    sessions = [
        _session(spec, i, trajectory, rig, landmarks, descriptors, np.random.default_rng(streams[i + 1]))
        for i, trajectory in enumerate(_trajectories(spec))
    ]
    logger.info("Generated %s world with %d sessions", spec.trajectory.value, len(sessions))
    return SimulatedWorld(spec, landmarks, descriptors, sessions)


def path_length(poses: Sequence[Pose]) -> float:
    positions = np.array([p.translation for p in poses])
    return float(np.sum(np.linalg.norm(np.diff(positions, axis=0), axis=1)))


def inject_drift(
    poses: Sequence[Pose],
    rate: float,
    direction: Sequence[float] = (1.0, 0.0, 0.0),
    rotation_rate: float = 0.0,
) -> List[Pose]:
    """Accumulate a smooth drift along a trajectory.

    The translation error grows linearly with the travelled distance, so the
    final gap equals ``rate`` times the path length. The orientation drifts
    about the world z axis by ``rotation_rate`` radians per meter.

    Raises:
        InvalidArgumentException: For a negative rate.
    """
    if rate < 0 or rotation_rate < 0:
        raise InvalidArgumentException("Drift rates cannot be negative.")
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    travelled = 0.0
    drifted = []
    for k, pose in enumerate(poses):
        if k:
            travelled += float(np.linalg.norm(pose.translation - poses[k - 1].translation))
        yaw = exp_so3(np.array([0.0, 0.0, rotation_rate * travelled]))
        drifted.append(Pose(yaw @ pose.rotation, pose.translation + rate * travelled * direction))
    return drifted


def build_reference_map(
    world: SimulatedWorld,
    atlas,
    session_index: int = 0,
    stride: int = 5,
    transform: SimTransform = None,
    inertial: bool = False,
    start: float = 0.0,
    end: float = None,
    point_noise: float = 0.0,
    seed: int = 0,
):
    """Build a map from ground truth, optionally expressed in another frame.

    Keyframes are taken every ``stride`` frames between ``start`` and ``end``;
    map points are the landmarks they observe, with their descriptors. The
    new map becomes the active map of the atlas.

    Returns:
        The new :class:`~atlasslam.models.SlamMap`.
    """
    from .models import Keyframe, MapPoint

    session = world.sessions[session_index]
    transform = transform or SimTransform.identity()
    rng = np.random.default_rng(seed)
    atlas.new_active_map(inertial)
    slam_map = atlas.active
    landmark_points: Dict[int, int] = {}
    previous_time = None
    frames = [f for f in session.frames[::stride] if f.timestamp >= start and (end is None or f.timestamp <= end)]
    for frame in frames:
        state = frame.truth.copy()
        state.pose = transform.transform_pose(state.pose, session.rig.extrinsics[0])
        state.velocity = transform.scale * (transform.rotation @ state.velocity)
        keyframe = Keyframe(atlas.new_keyframe_id(), frame.timestamp, state, session.rig, frame.keypoints)
        if inertial and previous_time is not None:
            keyframe.preintegrated = session.preintegrate(previous_time, frame.timestamp, frame.truth.bias)
        for index, keypoint in enumerate(frame.keypoints):
            landmark = keypoint.landmark
            if landmark not in landmark_points:
                position = transform.act(world.landmarks[landmark])
                if point_noise > 0:
                    position = position + rng.normal(0.0, point_noise, 3)
                point = MapPoint(atlas.new_point_id(), position, world.descriptors[landmark], keyframe.id, landmark)
                slam_map.add_point(point)
                landmark_points[landmark] = point.id
            keyframe.points[index] = landmark_points[landmark]
        atlas.insert_keyframe(keyframe)
        previous_time = frame.timestamp
    for point in slam_map.points.values():
        point.update_descriptor(slam_map.keyframes)
    if inertial:
        slam_map.imu_initialized = True
    return slam_map
