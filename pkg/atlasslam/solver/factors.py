"""Residual blocks used by tracking, mapping, initialization and fusion."""

from typing import Any, Hashable, List, Optional, Tuple

import numpy as np

from .base import Factor, FactorKind, RobustKernel
from ..camera.models import CameraModel
from ..const import HUBER_DELTA_2DOF
from ..exceptions import InvalidArgumentException
from ..imu import NavState, Preintegrated, inertial_residual, rotation_bias_jacobian
from ..manifold import (
    Pose,
    SimTransform,
    exp_so3,
    gravity_jacobian,
    log_so3,
    right_jacobian_inv_so3,
    skew,
)


def _isotropic(sigma: float, dim: int) -> np.ndarray:
    return np.eye(dim) / (sigma * sigma)


class ReprojectionFactor(Factor):
    """Pixel error of a world point observed by a camera of a body pose.

    Keys are ``(pose, point)``; the residual is ``Π(x_c) - u``.
    """

    kind = FactorKind.REPROJECTION

    def __init__(
        self,
        pose_key: Hashable,
        point_key: Hashable,
        camera: CameraModel,
        camera_from_body: Pose,
        measurement: np.ndarray,
        sigma_px: float = 1.0,
        kernel: Optional[RobustKernel] = None,
    ):
        # isotropic, so the square root is known; built per observation in large problems
        if not sigma_px > 0:
            raise InvalidArgumentException("Pixel sigma must be positive.")
        self.keys = (pose_key, point_key)
        self.information = _isotropic(sigma_px, 2)
        self.sqrt_information = np.eye(2) / sigma_px
        self.kernel = RobustKernel.huber(HUBER_DELTA_2DOF) if kernel is None else kernel
        self.camera = camera
        self.camera_from_body = camera_from_body
        self.measurement = np.asarray(measurement, dtype=float)

    def _camera_point(self, pose: Pose, point: np.ndarray):
        body = pose.rotation.T @ (point - pose.translation)
        return body, self.camera_from_body.act(body)

    def residual(self, values: List[Any]) -> np.ndarray:
        _, x_cam = self._camera_point(values[0], values[1])
        return self.camera.project(x_cam) - self.measurement

    def linearize(self, values: List[Any]) -> Tuple[np.ndarray, List[np.ndarray]]:
        pose, point = values
        body, x_cam = self._camera_point(pose, point)
        residual = self.camera.project(x_cam) - self.measurement
        proj = self.camera.projection_jacobian(x_cam) @ self.camera_from_body.rotation
        jac_pose = np.hstack((proj @ skew(body), -proj))
        jac_point = proj @ pose.rotation.T
        return residual, [jac_pose, jac_point]


class InertialFactor(Factor):
    """Preintegrated IMU measurement between two keyframes.

    Keys are ``(pose_i, velocity_i, bias_i, pose_j, velocity_j)``. No robust
    kernel is ever applied to inertial residuals.
    """

    kind = FactorKind.INERTIAL

    def __init__(
        self,
        pose_i: Hashable,
        velocity_i: Hashable,
        bias_i: Hashable,
        pose_j: Hashable,
        velocity_j: Hashable,
        preintegrated: Preintegrated,
        gravity: np.ndarray,
    ):
        super().__init__(
            (pose_i, velocity_i, bias_i, pose_j, velocity_j),
            preintegrated.information(),
            RobustKernel.none(),
        )
        self.preintegrated = preintegrated
        self.gravity = np.asarray(gravity, dtype=float)

    def _evaluate(self, values: List[Any]):
        pose_i, velocity_i, bias, pose_j, velocity_j = values
        state_i = NavState(pose_i, velocity_i, bias[:3], bias[3:])
        state_j = NavState(pose_j, velocity_j)
        return inertial_residual(state_i, state_j, self.preintegrated, self.gravity)

    def residual(self, values: List[Any]) -> np.ndarray:
        return self._evaluate(values)[0]

    def linearize(self, values: List[Any]) -> Tuple[np.ndarray, List[np.ndarray]]:
        residual, jac = self._evaluate(values)
        return residual, [
            jac["pose_i"],
            jac["velocity_i"],
            jac["bias"],
            jac["pose_j"],
            jac["velocity_j"],
        ]


class ScaledInertialFactor(Factor):
    """Inertial residual over an up-to-scale trajectory held constant.

    Keys are ``(scale, gravity, bias, velocity_i, velocity_j)``. Body rotations
    are constants; body positions follow ``p(s) = s·p̄ + o`` where ``o`` is the
    metric lever-arm offset, and velocities are ``s·v̄``. Gravity is
    ``R_wg·g_I``.
    """

    kind = FactorKind.INERTIAL

    def __init__(
        self,
        scale: Hashable,
        gravity: Hashable,
        bias: Hashable,
        velocity_i: Hashable,
        velocity_j: Hashable,
        rotation_i: np.ndarray,
        rotation_j: np.ndarray,
        position_i: np.ndarray,
        position_j: np.ndarray,
        offset_i: np.ndarray,
        offset_j: np.ndarray,
        preintegrated: Preintegrated,
        gravity_inertial: np.ndarray,
    ):
        super().__init__(
            (scale, gravity, bias, velocity_i, velocity_j),
            preintegrated.information(),
            RobustKernel.none(),
        )
        self.rotation_i = rotation_i
        self.rotation_j = rotation_j
        self.position_i = np.asarray(position_i, dtype=float)
        self.position_j = np.asarray(position_j, dtype=float)
        self.offset_i = np.asarray(offset_i, dtype=float)
        self.offset_j = np.asarray(offset_j, dtype=float)
        self.preintegrated = preintegrated
        self.gravity_inertial = np.asarray(gravity_inertial, dtype=float)

    def _evaluate(self, values: List[Any], jacobians: bool):
        s, r_wg, bias, vel_i, vel_j = values
        pre = self.preintegrated
        dt = pre.delta_time
        r_i, r_j = self.rotation_i, self.rotation_j
        gravity = r_wg @ self.gravity_inertial
        d_rot, d_vel, d_pos = pre.corrected_deltas(bias)

        p_i = s * self.position_i + self.offset_i
        p_j = s * self.position_j + self.offset_j
        r_rot = log_so3(d_rot.T @ r_i.T @ r_j)
        r_vel = r_i.T @ (s * (vel_j - vel_i) - gravity * dt) - d_vel
        r_pos = r_i.T @ (p_j - p_i - s * vel_i * dt - 0.5 * gravity * dt * dt) - d_pos
        residual = np.concatenate((r_rot, r_vel, r_pos))
        if not jacobians:
            return residual, None

        jac_scale = np.zeros((9, 1))
        jac_scale[3:6, 0] = s * (r_i.T @ (vel_j - vel_i))
        jac_scale[6:9, 0] = s * (r_i.T @ (self.position_j - self.position_i - vel_i * dt))

        g_jac = gravity_jacobian(r_wg, self.gravity_inertial)
        jac_gravity = np.zeros((9, 2))
        jac_gravity[3:6] = -r_i.T @ g_jac * dt
        jac_gravity[6:9] = -0.5 * r_i.T @ g_jac * dt * dt

        jac_bias = np.zeros((9, 6))
        jac_bias[0:3, 0:3] = rotation_bias_jacobian(pre, bias, r_rot)
        jac_bias[3:6, 0:3] = -pre.jac_velocity_gyro
        jac_bias[3:6, 3:6] = -pre.jac_velocity_accel
        jac_bias[6:9, 0:3] = -pre.jac_position_gyro
        jac_bias[6:9, 3:6] = -pre.jac_position_accel

        jac_vel_i = np.zeros((9, 3))
        jac_vel_i[3:6] = -s * r_i.T
        jac_vel_i[6:9] = -s * r_i.T * dt
        jac_vel_j = np.zeros((9, 3))
        jac_vel_j[3:6] = s * r_i.T
        return residual, [jac_scale, jac_gravity, jac_bias, jac_vel_i, jac_vel_j]

    def residual(self, values: List[Any]) -> np.ndarray:
        return self._evaluate(values, False)[0]

    def linearize(self, values: List[Any]) -> Tuple[np.ndarray, List[np.ndarray]]:
        return self._evaluate(values, True)


class BiasWalkFactor(Factor):
    """Random walk between consecutive bias estimates, ``r = b_j - b_i``."""

    kind = FactorKind.BIAS_WALK

    def __init__(self, bias_i: Hashable, bias_j: Hashable, information: np.ndarray):
        super().__init__((bias_i, bias_j), information)

    def residual(self, values: List[Any]) -> np.ndarray:
        return values[1] - values[0]

    def linearize(self, values: List[Any]) -> Tuple[np.ndarray, List[np.ndarray]]:
        return values[1] - values[0], [-np.eye(6), np.eye(6)]


class PriorFactor(Factor):
    """Gaussian prior on a vector-valued variable, ``r = x - μ``."""

    kind = FactorKind.PRIOR

    def __init__(self, key: Hashable, mean: np.ndarray, information: np.ndarray):
        super().__init__((key,), information)
        self.mean = np.asarray(mean, dtype=float)

    def residual(self, values: List[Any]) -> np.ndarray:
        return np.atleast_1d(values[0] - self.mean)

    def linearize(self, values: List[Any]) -> Tuple[np.ndarray, List[np.ndarray]]:
        return self.residual(values), [np.eye(self.dim)]


class BiasPriorFactor(PriorFactor):
    """Prior on the range of values the IMU biases may take."""

    kind = FactorKind.BIAS_PRIOR


class PosePriorFactor(Factor):
    """Prior on a pose, ``r = (Log(R̄ᵀR), R̄ᵀ(p - p̄))``."""

    kind = FactorKind.PRIOR

    def __init__(self, key: Hashable, prior: Pose, information: np.ndarray = None):
        super().__init__((key,), np.eye(6) * 1e6 if information is None else information)
        self.prior = prior

    def residual(self, values: List[Any]) -> np.ndarray:
        pose = values[0]
        return np.concatenate(
            (
                log_so3(self.prior.rotation.T @ pose.rotation),
                self.prior.rotation.T @ (pose.translation - self.prior.translation),
            )
        )

    def linearize(self, values: List[Any]) -> Tuple[np.ndarray, List[np.ndarray]]:
        residual = self.residual(values)
        jac = np.zeros((6, 6))
        jac[0:3, 0:3] = right_jacobian_inv_so3(residual[:3])
        jac[3:6, 3:6] = self.prior.rotation.T @ values[0].rotation
        return residual, [jac]


class DistancePriorFactor(Factor):
    """Distance between two pose positions, fixing the monocular scale gauge."""

    kind = FactorKind.PRIOR

    def __init__(self, key_a: Hashable, key_b: Hashable, distance: float, sigma: float = 1e-3):
        super().__init__((key_a, key_b), _isotropic(sigma, 1))
        self.distance = float(distance)

    def residual(self, values: List[Any]) -> np.ndarray:
        return np.array([np.linalg.norm(values[1].translation - values[0].translation) - self.distance])

    def linearize(self, values: List[Any]) -> Tuple[np.ndarray, List[np.ndarray]]:
        pose_a, pose_b = values
        diff = pose_b.translation - pose_a.translation
        norm = np.linalg.norm(diff)
        direction = diff / norm if norm > 0 else np.zeros(3)
        jac_a = np.zeros((1, 6))
        jac_b = np.zeros((1, 6))
        jac_a[0, 3:6] = -direction @ pose_a.rotation
        jac_b[0, 3:6] = direction @ pose_b.rotation
        return np.array([norm - self.distance]), [jac_a, jac_b]


class PoseGraphFactor(Factor):
    """Relative SE(3) constraint ``Log(T_ij⁻¹·T_i⁻¹·T_j)`` between two poses."""

    kind = FactorKind.POSE_GRAPH

    def __init__(
        self,
        key_i: Hashable,
        key_j: Hashable,
        measurement: Pose,
        information: np.ndarray = None,
    ):
        super().__init__((key_i, key_j), np.eye(6) if information is None else information)
        self.measurement = measurement

    def _error(self, values: List[Any]) -> Pose:
        return self.measurement.inverse().compose(values[0].inverse().compose(values[1]))

    def residual(self, values: List[Any]) -> np.ndarray:
        error = self._error(values)
        return np.concatenate((log_so3(error.rotation), error.translation))

    def linearize(self, values: List[Any]) -> Tuple[np.ndarray, List[np.ndarray]]:
        error = self._error(values)
        r_rot = log_so3(error.rotation)
        jr_inv = right_jacobian_inv_so3(r_rot)
        r_m_t = self.measurement.rotation.T
        t_e = error.translation

        jac_i = np.zeros((6, 6))
        jac_i[0:3, 0:3] = -jr_inv @ error.rotation.T @ r_m_t
        jac_i[3:6, 0:3] = skew(t_e) @ r_m_t + r_m_t @ skew(self.measurement.translation)
        jac_i[3:6, 3:6] = -r_m_t
        jac_j = np.zeros((6, 6))
        jac_j[0:3, 0:3] = jr_inv
        jac_j[3:6, 3:6] = error.rotation
        return np.concatenate((r_rot, t_e)), [jac_i, jac_j]


class SimilarityGraphFactor(Factor):
    """Relative Sim(3) constraint between two similarity nodes.

    The residual is ``(Log R_e, t_e, log s_e)`` of ``S_ij⁻¹·S_i⁻¹·S_j``.
    """

    kind = FactorKind.POSE_GRAPH

    def __init__(
        self,
        key_i: Hashable,
        key_j: Hashable,
        measurement: SimTransform,
        information: np.ndarray = None,
    ):
        super().__init__((key_i, key_j), np.eye(7) if information is None else information)
        self.measurement = measurement

    def _error(self, values: List[Any]) -> SimTransform:
        return self.measurement.inverse().compose(values[0].inverse().compose(values[1]))

    def residual(self, values: List[Any]) -> np.ndarray:
        error = self._error(values)
        return np.concatenate(
            (log_so3(error.rotation), error.translation, [np.log(error.scale)])
        )

    def linearize(self, values: List[Any]) -> Tuple[np.ndarray, List[np.ndarray]]:
        error = self._error(values)
        r_rot = log_so3(error.rotation)
        jr_inv = right_jacobian_inv_so3(r_rot)
        s_m = self.measurement.scale
        r_m_t = self.measurement.rotation.T
        t_m = self.measurement.translation
        t_e = error.translation

        jac_i = np.zeros((7, 7))
        jac_i[0:3, 0:3] = -jr_inv @ error.rotation.T @ r_m_t
        jac_i[3:6, 0:3] = skew(t_e) @ r_m_t + r_m_t @ skew(t_m) / s_m
        jac_i[3:6, 3:6] = -r_m_t / s_m
        jac_i[3:6, 6] = -t_e - r_m_t @ t_m / s_m
        jac_i[6, 6] = -1.0
        jac_j = np.zeros((7, 7))
        jac_j[0:3, 0:3] = jr_inv
        jac_j[3:6, 3:6] = error.scale * error.rotation
        jac_j[6, 6] = 1.0
        residual = np.concatenate((r_rot, t_e, [np.log(error.scale)]))
        return residual, [jac_i, jac_j]


def _tangent_basis(ray: np.ndarray) -> np.ndarray:
    """3×2 orthonormal basis of the plane orthogonal to a unit ray."""
    helper = np.array([1.0, 0.0, 0.0]) if abs(ray[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    first = np.cross(ray, helper)
    first /= np.linalg.norm(first)
    second = np.cross(ray, first)
    return np.column_stack((first, second))


class RayAngularFactor(Factor):
    """Angular error between an observed ray and a known world point.

    The key is a world-from-camera pose. The residual is the predicted unit
    ray expressed in the tangent plane of the observed ray, which equals the
    angular error in radians to first order. Rays may come from any camera
    model.
    """

    kind = FactorKind.RAY_ANGULAR

    def __init__(
        self,
        pose_key: Hashable,
        ray: np.ndarray,
        point: np.ndarray,
        sigma_rad: float = 1e-3,
        kernel: Optional[RobustKernel] = None,
    ):
        super().__init__(
            (pose_key,),
            _isotropic(sigma_rad, 2),
            RobustKernel.huber(HUBER_DELTA_2DOF) if kernel is None else kernel,
        )
        ray = np.asarray(ray, dtype=float)
        self.ray = ray / np.linalg.norm(ray)
        self.point = np.asarray(point, dtype=float)
        self.basis = _tangent_basis(self.ray)

    def residual(self, values: List[Any]) -> np.ndarray:
        pose = values[0]
        x_cam = pose.rotation.T @ (self.point - pose.translation)
        return self.basis.T @ (x_cam / np.linalg.norm(x_cam))

    def linearize(self, values: List[Any]) -> Tuple[np.ndarray, List[np.ndarray]]:
        pose = values[0]
        x_cam = pose.rotation.T @ (self.point - pose.translation)
        norm = np.linalg.norm(x_cam)
        unit = x_cam / norm
        d_unit = (np.eye(3) - np.outer(unit, unit)) / norm
        jac = self.basis.T @ d_unit @ np.hstack((skew(x_cam), -np.eye(3)))
        return self.basis.T @ unit, [jac]


class SimilarityReprojectionFactor(Factor):
    """Reprojection of a matched point through a Sim(3) between two maps.

    The key is ``T_am``, mapping coordinates of the matched map into the
    active map. In the forward direction a matched-map point is transformed
    into the active map and projected into a keyframe of the active map; in
    the inverse direction an active-map point is taken back through ``T_am⁻¹``
    and projected into a keyframe of the matched map. Observing keyframe poses
    are constants.
    """

    kind = FactorKind.REPROJECTION

    def __init__(
        self,
        key: Hashable,
        camera: CameraModel,
        camera_from_world: Pose,
        point: np.ndarray,
        measurement: np.ndarray,
        inverse: bool = False,
        sigma_px: float = 1.0,
        kernel: Optional[RobustKernel] = None,
    ):
        super().__init__(
            (key,),
            _isotropic(sigma_px, 2),
            RobustKernel.huber(HUBER_DELTA_2DOF) if kernel is None else kernel,
        )
        self.camera = camera
        self.camera_from_world = camera_from_world
        self.point = np.asarray(point, dtype=float)
        self.measurement = np.asarray(measurement, dtype=float)
        self.inverse = inverse

    def _transformed(self, transform: SimTransform) -> np.ndarray:
        if self.inverse:
            return transform.rotation.T @ (self.point - transform.translation) / transform.scale
        return transform.act(self.point)

    def residual(self, values: List[Any]) -> np.ndarray:
        x_cam = self.camera_from_world.act(self._transformed(values[0]))
        return self.camera.project(x_cam) - self.measurement

    def linearize(self, values: List[Any]) -> Tuple[np.ndarray, List[np.ndarray]]:
        transform = values[0]
        moved = self._transformed(transform)
        x_cam = self.camera_from_world.act(moved)
        residual = self.camera.project(x_cam) - self.measurement
        proj = self.camera.projection_jacobian(x_cam) @ self.camera_from_world.rotation

        if self.inverse:
            d_moved = np.hstack((skew(moved), -np.eye(3), -moved[:, None]))
        else:
            sr = transform.scale * transform.rotation
            d_moved = np.hstack((-sr @ skew(self.point), sr, (sr @ self.point)[:, None]))
        return residual, [proj @ d_moved]
