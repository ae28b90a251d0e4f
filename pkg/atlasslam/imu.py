"""IMU preintegration on SO(3) and the inertial residual between two states.

Bias vectors are 6-vectors ordered ``(b_g, b_a)``: gyroscope bias (rad/s)
first, accelerometer bias (m/s²) second.
"""

import logging
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .const import GRAVITY_MAGNITUDE
from .exceptions import EmptyStreamException, InvalidArgumentException, NonMonotoneTimeException
from .manifold import (
    Pose,
    exp_so3,
    log_so3,
    right_jacobian_inv_so3,
    right_jacobian_so3,
    skew,
)

logger = logging.getLogger(__name__)

BIAS_CORRECTION_GATE = 0.05
"""Bias change beyond which the first-order correction is not trusted."""


class ImuSample:
    """A single IMU reading."""

    timestamp: float
    """Time of the reading in seconds."""

    gyro: np.ndarray
    """Angular velocity in rad/s, body frame."""

    accel: np.ndarray
    """Specific force in m/s², body frame."""

    __slots__ = ("timestamp", "gyro", "accel")

    def __init__(self, timestamp: float, gyro: Sequence[float], accel: Sequence[float]):
        self.timestamp = float(timestamp)
        self.gyro = np.asarray(gyro, dtype=float)
        self.accel = np.asarray(accel, dtype=float)

    def __repr__(self) -> str:
        return f"<ImuSample t={self.timestamp:.6f}>"


class ImuNoise:
    """Continuous-time noise parameters of an IMU."""

    gyro_noise: float
    """Gyroscope noise density (rad/s/√Hz)."""

    accel_noise: float
    """Accelerometer noise density (m/s²/√Hz)."""

    gyro_walk: float
    """Gyroscope bias random walk (rad/s²/√Hz)."""

    accel_walk: float
    """Accelerometer bias random walk (m/s³/√Hz)."""

    gravity: float
    """Gravity magnitude G (m/s²)."""

    def __init__(
        self,
        gyro_noise: float = 1.7e-4,
        accel_noise: float = 2.0e-3,
        gyro_walk: float = 1.9e-5,
        accel_walk: float = 3.0e-3,
        gravity: float = GRAVITY_MAGNITUDE,
    ):
        for name, value in (
            ("gyro_noise", gyro_noise),
            ("accel_noise", accel_noise),
            ("gyro_walk", gyro_walk),
            ("accel_walk", accel_walk),
            ("gravity", gravity),
        ):
            if not value > 0:
                raise InvalidArgumentException(f"IMU noise parameter {name} must be positive.")
        self.gyro_noise = float(gyro_noise)
        self.accel_noise = float(accel_noise)
        self.gyro_walk = float(gyro_walk)
        self.accel_walk = float(accel_walk)
        self.gravity = float(gravity)

    @classmethod
    def from_config(cls, config) -> "ImuNoise":
        """Noise of the ``imu`` section of a run configuration."""
        return cls(config.gyro_noise, config.accel_noise, config.gyro_walk, config.accel_walk, config.gravity)

    @property
    def gravity_vector(self) -> np.ndarray:
        """Gravity in the z-up gravity-aligned frame, ``(0, 0, -G)``."""
        return np.array([0.0, 0.0, -self.gravity])

    def __repr__(self) -> str:
        return (
            f"<ImuNoise gyro={self.gyro_noise:g} accel={self.accel_noise:g} "
            f"gyro_walk={self.gyro_walk:g} accel_walk={self.accel_walk:g}>"
        )


class NavState:
    """Body pose, world velocity and IMU biases of one keyframe or frame."""

    pose: Pose
    """World-from-body pose."""

    velocity: np.ndarray
    """Velocity in the world frame (m/s)."""

    gyro_bias: np.ndarray
    """Gyroscope bias (rad/s)."""

    accel_bias: np.ndarray
    """Accelerometer bias (m/s²)."""

    def __init__(
        self,
        pose: Pose = None,
        velocity: Sequence[float] = None,
        gyro_bias: Sequence[float] = None,
        accel_bias: Sequence[float] = None,
    ):
        self.pose = Pose() if pose is None else pose
        self.velocity = np.zeros(3) if velocity is None else np.array(velocity, dtype=float)
        self.gyro_bias = np.zeros(3) if gyro_bias is None else np.array(gyro_bias, dtype=float)
        self.accel_bias = (
            np.zeros(3) if accel_bias is None else np.array(accel_bias, dtype=float)
        )

    @property
    def bias(self) -> np.ndarray:
        return np.concatenate((self.gyro_bias, self.accel_bias))

    @bias.setter
    def bias(self, value: np.ndarray):
        self.gyro_bias = np.array(value[:3], dtype=float)
        self.accel_bias = np.array(value[3:6], dtype=float)

    def copy(self) -> "NavState":
        return NavState(
            Pose(self.pose.rotation, self.pose.translation),
            self.velocity,
            self.gyro_bias,
            self.accel_bias,
        )

    def __repr__(self) -> str:
        return f"<NavState p={np.round(self.pose.translation, 4).tolist()} v={np.round(self.velocity, 4).tolist()}>"


class Preintegrated:
    """Preintegrated IMU measurements between two frames.

    The covariance is expressed for the residual ordering
    ``[r_ΔR, r_Δv, r_Δp]``; the bias Jacobians allow a first-order update of
    the deltas when the bias estimate moves away from :attr:`bias`.
    """

    delta_rotation: np.ndarray
    """ΔR, the relative rotation."""

    delta_velocity: np.ndarray
    """Δv in the frame of the first body pose (m/s)."""

    delta_position: np.ndarray
    """Δp in the frame of the first body pose (m)."""

    delta_time: float
    """Δt, sum of the integrated sample intervals (s)."""

    covariance: np.ndarray
    """9×9 covariance Σ_I of the preintegrated measurement."""

    bias: np.ndarray
    """Bias linearization point ``(b_g, b_a)``."""

    noise: ImuNoise
    """Noise parameters used for the covariance."""

    samples: List[ImuSample]
    """The integrated samples, kept for re-integration."""

    def __init__(self, bias: Sequence[float] = None, noise: ImuNoise = None):
        self.bias = np.zeros(6) if bias is None else np.array(bias, dtype=float)
        self.noise = ImuNoise() if noise is None else noise
        self.delta_rotation = np.eye(3)
        self.delta_velocity = np.zeros(3)
        self.delta_position = np.zeros(3)
        self.delta_time = 0.0
        self.covariance = np.zeros((9, 9))
        self.jac_rotation_gyro = np.zeros((3, 3))
        self.jac_velocity_gyro = np.zeros((3, 3))
        self.jac_velocity_accel = np.zeros((3, 3))
        self.jac_position_gyro = np.zeros((3, 3))
        self.jac_position_accel = np.zeros((3, 3))
        self.samples = []

    def integrate_measurement(self, gyro: np.ndarray, accel: np.ndarray, dt: float):
        """Integrate one interval of constant (bias-uncorrected) readings."""
        w = gyro - self.bias[:3]
        a = accel - self.bias[3:]
        half_rotation = exp_so3(0.5 * dt * w)
        step_rotation = exp_so3(dt * w)
        r_mid = self.delta_rotation @ half_rotation
        acc_world = r_mid @ a
        a_hat = skew(a)

        # error-state transition and noise input for [δφ, δv, δp]
        transition = np.eye(9)
        transition[0:3, 0:3] = step_rotation.T
        transition[3:6, 0:3] = -r_mid @ a_hat @ half_rotation.T * dt
        transition[6:9, 0:3] = -0.5 * r_mid @ a_hat @ half_rotation.T * dt * dt
        transition[6:9, 3:6] = np.eye(3) * dt
        noise_input = np.zeros((9, 6))
        noise_input[0:3, 0:3] = right_jacobian_so3(dt * w) * dt
        noise_input[3:6, 3:6] = r_mid * dt
        noise_input[6:9, 3:6] = 0.5 * r_mid * dt * dt
        measurement_cov = np.diag(
            [self.noise.gyro_noise**2 / dt] * 3 + [self.noise.accel_noise**2 / dt] * 3
        )
        self.covariance = (
            transition @ self.covariance @ transition.T
            + noise_input @ measurement_cov @ noise_input.T
        )

        # bias Jacobians, position first since it reads the velocity terms
        jac_mid = half_rotation.T @ self.jac_rotation_gyro - right_jacobian_so3(0.5 * dt * w) * (
            0.5 * dt
        )
        self.jac_position_accel += self.jac_velocity_accel * dt - 0.5 * r_mid * dt * dt
        self.jac_position_gyro += (
            self.jac_velocity_gyro * dt - 0.5 * r_mid @ a_hat @ jac_mid * dt * dt
        )
        self.jac_velocity_accel -= r_mid * dt
        self.jac_velocity_gyro -= r_mid @ a_hat @ jac_mid * dt
        self.jac_rotation_gyro = (
            step_rotation.T @ self.jac_rotation_gyro - right_jacobian_so3(dt * w) * dt
        )

        self.delta_position = (
            self.delta_position + self.delta_velocity * dt + 0.5 * acc_world * dt * dt
        )
        self.delta_velocity = self.delta_velocity + acc_world * dt
        self.delta_rotation = self.delta_rotation @ step_rotation
        self.delta_time += dt

    def bias_difference(self, bias: np.ndarray) -> np.ndarray:
        return np.asarray(bias, dtype=float) - self.bias

    def corrected_deltas(self, bias: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """First-order bias-corrected ``(ΔR, Δv, Δp)``."""
        db = self.bias_difference(bias)
        dbg, dba = db[:3], db[3:]
        rotation = self.delta_rotation @ exp_so3(self.jac_rotation_gyro @ dbg)
        velocity = (
            self.delta_velocity + self.jac_velocity_gyro @ dbg + self.jac_velocity_accel @ dba
        )
        position = (
            self.delta_position + self.jac_position_gyro @ dbg + self.jac_position_accel @ dba
        )
        return rotation, velocity, position

    def correct_bias(
        self, new_bias: np.ndarray, gate: float = BIAS_CORRECTION_GATE
    ) -> "Preintegrated":
        """Return a copy whose deltas are first-order corrected to ``new_bias``.

        Arguments:
            new_bias: The new bias estimate ``(b_g, b_a)``.
            gate: Bias change norm beyond which a warning is logged, since
                :meth:`reintegrate` should be used instead.
        """
        db = self.bias_difference(new_bias)
        if np.linalg.norm(db) > gate:
            logger.warning(
                "Bias change %.4f beyond the linearization gate %.4f, re-integrate instead",
                np.linalg.norm(db),
                gate,
            )
        corrected = self.copy()
        (
            corrected.delta_rotation,
            corrected.delta_velocity,
            corrected.delta_position,
        ) = self.corrected_deltas(new_bias)
        corrected.bias = np.array(new_bias, dtype=float)
        return corrected

    def reintegrate(self, bias: np.ndarray) -> "Preintegrated":
        """Integrate the stored samples again around a new bias."""
        return preintegrate(self.samples, bias, self.noise)

    def merge(self, other: "Preintegrated") -> "Preintegrated":
        """Concatenate with the preintegration of the following interval.

        Both parts must share the same bias linearization point.
        """
        if not np.allclose(self.bias, other.bias, atol=1e-12):
            raise InvalidArgumentException("Cannot merge preintegrations with different biases.")
        r1, v1, p1 = self.delta_rotation, self.delta_velocity, self.delta_position
        r2, v2, p2 = other.delta_rotation, other.delta_velocity, other.delta_position
        dt2 = other.delta_time

        merged = Preintegrated(self.bias, self.noise)
        merged.delta_rotation = r1 @ r2
        merged.delta_velocity = v1 + r1 @ v2
        merged.delta_position = p1 + v1 * dt2 + r1 @ p2
        merged.delta_time = self.delta_time + dt2

        merged.jac_rotation_gyro = r2.T @ self.jac_rotation_gyro + other.jac_rotation_gyro
        merged.jac_velocity_gyro = (
            self.jac_velocity_gyro
            + r1 @ other.jac_velocity_gyro
            - r1 @ skew(v2) @ self.jac_rotation_gyro
        )
        merged.jac_velocity_accel = self.jac_velocity_accel + r1 @ other.jac_velocity_accel
        merged.jac_position_gyro = (
            self.jac_position_gyro
            + self.jac_velocity_gyro * dt2
            + r1 @ other.jac_position_gyro
            - r1 @ skew(p2) @ self.jac_rotation_gyro
        )
        merged.jac_position_accel = (
            self.jac_position_accel + self.jac_velocity_accel * dt2 + r1 @ other.jac_position_accel
        )

        first = np.eye(9)
        first[0:3, 0:3] = r2.T
        first[3:6, 0:3] = -r1 @ skew(v2)
        first[6:9, 0:3] = -r1 @ skew(p2)
        first[6:9, 3:6] = np.eye(3) * dt2
        second = np.zeros((9, 9))
        second[0:3, 0:3] = np.eye(3)
        second[3:6, 3:6] = r1
        second[6:9, 6:9] = r1
        merged.covariance = (
            first @ self.covariance @ first.T + second @ other.covariance @ second.T
        )

        shared = (
            self.samples
            and other.samples
            and abs(self.samples[-1].timestamp - other.samples[0].timestamp) < 1e-12
        )
        merged.samples = self.samples + (other.samples[1:] if shared else other.samples)
        return merged

    def bias_walk_information(self) -> np.ndarray:
        """6×6 information of the bias random walk over :attr:`delta_time`."""
        dt = max(self.delta_time, 1e-6)
        variance = [self.noise.gyro_walk**2 * dt] * 3 + [self.noise.accel_walk**2 * dt] * 3
        return np.diag(1.0 / np.array(variance))

    def information(self) -> np.ndarray:
        """Inverse of :attr:`covariance`, symmetrized."""
        cov = 0.5 * (self.covariance + self.covariance.T)
        # tiny regularization keeps very short intervals invertible
        cov += np.eye(9) * 1e-15
        info = np.linalg.inv(cov)
        return 0.5 * (info + info.T)

    def copy(self) -> "Preintegrated":
        clone = Preintegrated(self.bias, self.noise)
        for name in (
            "delta_rotation",
            "delta_velocity",
            "delta_position",
            "covariance",
            "jac_rotation_gyro",
            "jac_velocity_gyro",
            "jac_velocity_accel",
            "jac_position_gyro",
            "jac_position_accel",
        ):
            setattr(clone, name, getattr(self, name).copy())
        clone.delta_time = self.delta_time
        clone.samples = list(self.samples)
        return clone

    def __repr__(self) -> str:
        return f"<Preintegrated dt={self.delta_time:.4f} samples={len(self.samples)}>"


def check_monotone(samples: Sequence[ImuSample]):
    """Raise if timestamps are not strictly increasing."""
    for index in range(1, len(samples)):
        if samples[index].timestamp <= samples[index - 1].timestamp:
            raise NonMonotoneTimeException(
                "IMU timestamps must be strictly increasing.",
                {"index": index, "timestamp": samples[index].timestamp},
            )


def preintegrate(
    samples: Sequence[ImuSample], bias: Sequence[float] = None, noise: ImuNoise = None
) -> Preintegrated:
    """Preintegrate a run of IMU samples with the midpoint rule.

    Each interval between consecutive samples uses the average of its two
    readings, rotated by the attitude at the middle of the interval.

    Arguments:
        samples: At least one sample, strictly increasing timestamps.
        bias: Bias linearization point ``(b_g, b_a)``.
        noise: IMU noise parameters.

    Returns:
        The preintegrated measurement, covering ``[t_first, t_last]``.

    Raises:
        EmptyStreamException: If no samples are given.
        NonMonotoneTimeException: If timestamps are not strictly increasing.
    """
    if not samples:
        raise EmptyStreamException("Cannot preintegrate an empty IMU stream.")
    check_monotone(samples)

    pre = Preintegrated(bias, noise)
    for previous, current in zip(samples[:-1], samples[1:]):
        pre.integrate_measurement(
            0.5 * (previous.gyro + current.gyro),
            0.5 * (previous.accel + current.accel),
            current.timestamp - previous.timestamp,
        )
    pre.samples = list(samples)
    return pre


def correct_bias(
    pre: Preintegrated, new_bias: np.ndarray, gate: float = BIAS_CORRECTION_GATE
) -> Preintegrated:
    """First-order bias correction, see :meth:`Preintegrated.correct_bias`."""
    return pre.correct_bias(new_bias, gate)


def interpolate_sample(before: ImuSample, after: ImuSample, timestamp: float) -> ImuSample:
    """Linearly interpolated reading at ``timestamp``."""
    span = after.timestamp - before.timestamp
    alpha = 0.0 if span <= 0 else (timestamp - before.timestamp) / span
    return ImuSample(
        timestamp,
        (1.0 - alpha) * before.gyro + alpha * after.gyro,
        (1.0 - alpha) * before.accel + alpha * after.accel,
    )


def samples_between(
    stream: Sequence[ImuSample], start: float, end: float, timestamps: np.ndarray = None
) -> List[ImuSample]:
    """Samples covering ``[start, end]``, interpolated at both ends.

    Arguments:
        stream: The full, time-sorted IMU stream.
        start: Interval start (s).
        end: Interval end (s).
        timestamps: Optional precomputed array of the stream timestamps.
    """
    if not stream:
        return []
    if timestamps is None:
        timestamps = np.array([s.timestamp for s in stream])
    first = int(np.searchsorted(timestamps, start, side="right"))
    last = int(np.searchsorted(timestamps, end, side="left"))

    def at(t: float) -> ImuSample:
        index = int(np.searchsorted(timestamps, t))
        if index < len(stream) and abs(timestamps[index] - t) < 1e-12:
            return stream[index]
        if index == 0:
            return ImuSample(t, stream[0].gyro, stream[0].accel)
        if index >= len(stream):
            return ImuSample(t, stream[-1].gyro, stream[-1].accel)
        return interpolate_sample(stream[index - 1], stream[index], t)

    inner = [s for s in stream[first:last] if start < s.timestamp < end]
    return [at(start)] + inner + [at(end)]


def rotation_bias_jacobian(
    pre: Preintegrated, bias: np.ndarray, rotation_residual: np.ndarray
) -> np.ndarray:
    """Jacobian of ``r_ΔR`` with respect to the gyroscope bias."""
    dbg = pre.bias_difference(bias)[:3]
    error_rotation = exp_so3(rotation_residual)
    return (
        -right_jacobian_inv_so3(rotation_residual)
        @ error_rotation.T
        @ right_jacobian_so3(pre.jac_rotation_gyro @ dbg)
        @ pre.jac_rotation_gyro
    )


def inertial_residual(
    state_i: NavState,
    state_j: NavState,
    pre: Preintegrated,
    gravity: np.ndarray,
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """Residual of a preintegrated measurement between two navigation states.

    The bias of ``state_i`` is the one the measurement is corrected with.

    Arguments:
        state_i: State at the start of the interval.
        state_j: State at the end of the interval.
        pre: Preintegration covering the interval.
        gravity: Gravity vector in the world frame.

    Returns:
        The 9-vector ``[r_ΔR, r_Δv, r_Δp]`` and its Jacobians, keyed by
        ``pose_i`` (9×6), ``velocity_i`` (9×3), ``bias`` (9×6), ``pose_j``
        (9×6) and ``velocity_j`` (9×3), all for right perturbations.
    """
    r_i, p_i = state_i.pose.rotation, state_i.pose.translation
    r_j, p_j = state_j.pose.rotation, state_j.pose.translation
    v_i, v_j = state_i.velocity, state_j.velocity
    bias = state_i.bias
    dt = pre.delta_time
    d_rot, d_vel, d_pos = pre.corrected_deltas(bias)

    r_rot = log_so3(d_rot.T @ r_i.T @ r_j)
    vel_term = r_i.T @ (v_j - v_i - gravity * dt)
    pos_term = r_i.T @ (p_j - p_i - v_i * dt - 0.5 * gravity * dt * dt)
    residual = np.concatenate((r_rot, vel_term - d_vel, pos_term - d_pos))

    jr_inv = right_jacobian_inv_so3(r_rot)
    jac_pose_i = np.zeros((9, 6))
    jac_pose_i[0:3, 0:3] = -jr_inv @ r_j.T @ r_i
    jac_pose_i[3:6, 0:3] = skew(vel_term)
    jac_pose_i[6:9, 0:3] = skew(pos_term)
    jac_pose_i[6:9, 3:6] = -np.eye(3)

    jac_pose_j = np.zeros((9, 6))
    jac_pose_j[0:3, 0:3] = jr_inv
    jac_pose_j[6:9, 3:6] = r_i.T @ r_j

    jac_vel_i = np.zeros((9, 3))
    jac_vel_i[3:6] = -r_i.T
    jac_vel_i[6:9] = -r_i.T * dt

    jac_vel_j = np.zeros((9, 3))
    jac_vel_j[3:6] = r_i.T

    jac_bias = np.zeros((9, 6))
    jac_bias[0:3, 0:3] = rotation_bias_jacobian(pre, bias, r_rot)
    jac_bias[3:6, 0:3] = -pre.jac_velocity_gyro
    jac_bias[3:6, 3:6] = -pre.jac_velocity_accel
    jac_bias[6:9, 0:3] = -pre.jac_position_gyro
    jac_bias[6:9, 3:6] = -pre.jac_position_accel

    return residual, {
        "pose_i": jac_pose_i,
        "velocity_i": jac_vel_i,
        "bias": jac_bias,
        "pose_j": jac_pose_j,
        "velocity_j": jac_vel_j,
    }
