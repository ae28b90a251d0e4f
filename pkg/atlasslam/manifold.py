"""Lie-group primitives for SO(3), SE(3) and Sim(3).

Rotations are plain 3×3 ``numpy`` arrays. Poses use a right perturbation,
``T ⊞ δ = (R·Exp(δφ), p + R·δp)``, which is the retraction used by every
factor in :mod:`atlasslam.solver`.
"""

from typing import Union

import numpy as np
from scipy.spatial.transform import Rotation as ScipyRotation

from .exceptions import (
    DegenerateConfigurationException,
    InvalidArgumentException,
)

_SMALL_ANGLE = 1e-8
_NEAR_PI = 1e-3


def skew(v: np.ndarray) -> np.ndarray:
    """Return the 3×3 skew-symmetric matrix ``[v]×``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    """Inverse of :func:`skew` for the antisymmetric part of ``m``."""
    return 0.5 * np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])


def exp_so3(omega: np.ndarray) -> np.ndarray:
    """Exponential map from a rotation vector (rad) to a rotation matrix.

    Arguments:
        omega: Rotation vector, axis times angle.

    Returns:
        The rotation matrix given by Rodrigues' formula, using the series
        expansion below an angle of 1e-8 rad.
    """
    omega = np.asarray(omega, dtype=float)
    theta2 = float(omega @ omega)
    theta = np.sqrt(theta2)
    w = skew(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + w + 0.5 * (w @ w)
    return (
        np.eye(3)
        + (np.sin(theta) / theta) * w
        + ((1.0 - np.cos(theta)) / theta2) * (w @ w)
    )


def _canonical_axis(axis: np.ndarray) -> np.ndarray:
    # angle-π sign convention: first nonzero component positive
    for value in axis:
        if abs(value) > 1e-12:
            return axis if value > 0 else -axis
    return axis


def log_so3(rotation: np.ndarray) -> np.ndarray:
    """Principal logarithm of a rotation matrix.

    The result has norm at most π. Exactly at an angle of π the axis sign is
    ambiguous; the axis whose first nonzero component is positive is returned.

    Arguments:
        rotation: A valid rotation matrix.

    Returns:
        The rotation vector.
    """
    r = np.asarray(rotation, dtype=float)
    v = vee(r)
    sin_theta = np.linalg.norm(v)
    cos_theta = 0.5 * (np.trace(r) - 1.0)
    theta = np.arctan2(sin_theta, cos_theta)

    if theta < _SMALL_ANGLE:
        return v
    if np.pi - theta > _NEAR_PI:
        return v * (theta / sin_theta)

    # near π the antisymmetric part vanishes; use the symmetric part a·aᵀ
    sym = 0.5 * (r + r.T)
    outer = (sym - cos_theta * np.eye(3)) / (1.0 - cos_theta)
    k = int(np.argmax(np.diag(outer)))
    axis = outer[:, k] / np.sqrt(max(outer[k, k], 1e-300))
    axis /= np.linalg.norm(axis)
    if sin_theta > 1e-12:
        if axis @ v < 0:
            axis = -axis
    else:
        axis = _canonical_axis(axis)
    return theta * axis


def right_jacobian_so3(omega: np.ndarray) -> np.ndarray:
    """Right Jacobian of SO(3), ``Exp(ω + δ) ≈ Exp(ω)·Exp(Jr(ω)·δ)``."""
    omega = np.asarray(omega, dtype=float)
    theta2 = float(omega @ omega)
    w = skew(omega)
    if theta2 < 1e-10:
        return np.eye(3) - 0.5 * w + (w @ w) / 6.0
    theta = np.sqrt(theta2)
    return (
        np.eye(3)
        - ((1.0 - np.cos(theta)) / theta2) * w
        + ((theta - np.sin(theta)) / (theta2 * theta)) * (w @ w)
    )


def right_jacobian_inv_so3(omega: np.ndarray) -> np.ndarray:
    """Inverse of :func:`right_jacobian_so3`."""
    omega = np.asarray(omega, dtype=float)
    theta2 = float(omega @ omega)
    w = skew(omega)
    if theta2 < 1e-10:
        return np.eye(3) + 0.5 * w + (w @ w) / 12.0
    theta = np.sqrt(theta2)
    coefficient = 1.0 / theta2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * w + coefficient * (w @ w)


def normalize_rotation(rotation: np.ndarray) -> np.ndarray:
    """Project a nearly orthonormal matrix back onto SO(3)."""
    u, _, vt = np.linalg.svd(rotation)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def rotation_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimal rotation taking direction ``a`` onto direction ``b``."""
    a = np.asarray(a, dtype=float) / np.linalg.norm(a)
    b = np.asarray(b, dtype=float) / np.linalg.norm(b)
    axis = np.cross(a, b)
    s = np.linalg.norm(axis)
    c = float(np.clip(a @ b, -1.0, 1.0))
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        # antiparallel: rotate π about any axis orthogonal to a
        ortho = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(ortho) < 1e-6:
            ortho = np.cross(a, [0.0, 1.0, 0.0])
        return exp_so3(np.pi * ortho / np.linalg.norm(ortho))
    return exp_so3(axis / s * np.arctan2(s, c))


def retract_gravity(r_wg: np.ndarray, delta_alpha: float, delta_beta: float) -> np.ndarray:
    """Two-angle update of the gravity direction rotation.

    Rotation about the third axis does not change the gravity vector, so the
    local coordinate along it is always exactly zero.

    Arguments:
        r_wg: Current rotation from the gravity frame to the world frame.
        delta_alpha: Increment about the first axis (rad).
        delta_beta: Increment about the second axis (rad).

    Returns:
        ``R_wg · Exp(δα, δβ, 0)``.
    """
    return r_wg @ exp_so3(np.array([delta_alpha, delta_beta, 0.0]))


def gravity_jacobian(r_wg: np.ndarray, gravity_inertial: np.ndarray) -> np.ndarray:
    """Jacobian (3×2) of ``R_wg·Exp(δα, δβ, 0)·g_I`` with respect to ``(δα, δβ)``."""
    return -(r_wg @ skew(gravity_inertial))[:, :2]


def quaternion_from_rotation(rotation: np.ndarray) -> np.ndarray:
    """Return the unit quaternion ``(qx, qy, qz, qw)`` of a rotation matrix."""
    q = ScipyRotation.from_matrix(rotation).as_quat()
    return q / np.linalg.norm(q)


def rotation_from_quaternion(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from a quaternion ``(qx, qy, qz, qw)``."""
    return ScipyRotation.from_quat(np.asarray(q, dtype=float)).as_matrix()


class Pose:
    """Representation of a rigid transformation in SE(3)."""

    rotation: np.ndarray
    """The 3×3 rotation matrix."""

    translation: np.ndarray
    """The translation in meters."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation: np.ndarray = None, translation: np.ndarray = None):
        self.rotation = np.eye(3) if rotation is None else np.array(rotation, dtype=float)
        self.translation = (
            np.zeros(3) if translation is None else np.array(translation, dtype=float)
        )

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "Pose":
        return cls(matrix[:3, :3], matrix[:3, 3])

    def matrix(self) -> np.ndarray:
        """Return the homogeneous 4×4 matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        """Return ``self ∘ other``."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def act(self, x: np.ndarray) -> np.ndarray:
        """Transform a point ``R·x + p``, or an ``(N, 3)`` array of points."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return self.rotation @ x + self.translation
        return x @ self.rotation.T + self.translation

    def retract(self, delta: np.ndarray) -> "Pose":
        """Apply a 6-vector increment ``(δφ, δp)`` as a right perturbation."""
        return Pose(
            self.rotation @ exp_so3(delta[:3]),
            self.translation + self.rotation @ delta[3:6],
        )

    def __mul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def __repr__(self) -> str:
        angle = np.degrees(np.linalg.norm(log_so3(self.rotation)))
        return f"<Pose t={np.round(self.translation, 4).tolist()} angle={angle:.3f}°>"


class SimTransform:
    """Representation of a similarity transformation in Sim(3), ``x ↦ s·R·x + t``."""

    scale: float
    """The positive scale factor."""

    rotation: np.ndarray
    """The 3×3 rotation matrix."""

    translation: np.ndarray
    """The translation in meters."""

    __slots__ = ("scale", "rotation", "translation")

    def __init__(
        self,
        scale: float = 1.0,
        rotation: np.ndarray = None,
        translation: np.ndarray = None,
    ):
        if scale <= 0:
            raise InvalidArgumentException("Sim(3) scale must be positive.")
        self.scale = float(scale)
        self.rotation = np.eye(3) if rotation is None else np.array(rotation, dtype=float)
        self.translation = (
            np.zeros(3) if translation is None else np.array(translation, dtype=float)
        )

    @classmethod
    def identity(cls) -> "SimTransform":
        return cls()

    @classmethod
    def from_pose(cls, pose: Pose, scale: float = 1.0) -> "SimTransform":
        return cls(scale, pose.rotation, pose.translation)

    def as_pose(self) -> Pose:
        """Drop the scale, keeping rotation and translation."""
        return Pose(self.rotation, self.translation)

    def compose(self, other: "SimTransform") -> "SimTransform":
        """Return ``self ∘ other``."""
        return SimTransform(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * (self.rotation @ other.translation) + self.translation,
        )

    def inverse(self) -> "SimTransform":
        rt = self.rotation.T
        inv_scale = 1.0 / self.scale
        return SimTransform(inv_scale, rt, -inv_scale * (rt @ self.translation))

    def act(self, x: np.ndarray) -> np.ndarray:
        """Transform a point ``s·R·x + t``, or an ``(N, 3)`` array of points."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return self.scale * (self.rotation @ x) + self.translation
        return self.scale * (x @ self.rotation.T) + self.translation

    def transform_pose(self, pose: Pose, camera_from_body: Pose = None) -> Pose:
        """Map a world-from-body pose into the target frame, keeping it rigid.

        With ``camera_from_body`` the camera centre follows the similarity and
        the body keeps its metric offset from the camera, so points seen by
        the camera stay where they project. Otherwise the body origin does.
        """
        if camera_from_body is None:
            return Pose(self.rotation @ pose.rotation, self.act(pose.translation))
        camera = pose.compose(camera_from_body.inverse())
        moved = Pose(self.rotation @ camera.rotation, self.act(camera.translation))
        return moved.compose(camera_from_body)

    def retract(self, delta: np.ndarray) -> "SimTransform":
        """Apply a 7-vector increment ``(δφ, δt, δσ)`` as a right perturbation."""
        return SimTransform(
            self.scale * np.exp(delta[6]),
            self.rotation @ exp_so3(delta[:3]),
            self.scale * (self.rotation @ delta[3:6]) + self.translation,
        )

    def __mul__(self, other: "SimTransform") -> "SimTransform":
        return self.compose(other)

    def __repr__(self) -> str:
        angle = np.degrees(np.linalg.norm(log_so3(self.rotation)))
        return (
            f"<SimTransform s={self.scale:.5f} "
            f"t={np.round(self.translation, 4).tolist()} angle={angle:.3f}°>"
        )


def pose_compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def pose_inverse(a: Pose) -> Pose:
    return a.inverse()


def pose_act(a: Pose, x: np.ndarray) -> np.ndarray:
    return a.act(x)


def sim3_act(s: SimTransform, x: np.ndarray) -> np.ndarray:
    return s.act(x)


Transform = Union[Pose, SimTransform]


def umeyama_alignment(source: np.ndarray, target: np.ndarray, with_scale: bool = True):
    """Closed-form least-squares similarity mapping ``source`` onto ``target``.

    Arguments:
        source: ``(N, 3)`` points.
        target: ``(N, 3)`` corresponding points.
        with_scale: Estimate the scale, otherwise it is fixed to one.

    Returns:
        A tuple ``(transform, singular_values)`` where ``transform`` maps
        ``source`` onto ``target`` and ``singular_values`` are those of the
        centered source cloud (used by callers to detect degeneracy).

    Raises:
        DegenerateConfigurationException: For fewer than three pairs, or
            source points that are coincident or collinear.
    """
    source = np.asarray(source, dtype=float)
    target = np.asarray(target, dtype=float)
    n = len(source)
    if n < 3 or source.shape != target.shape:
        raise DegenerateConfigurationException("Alignment needs three or more point pairs.", {"pairs": n})
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    src = source - mu_s
    tgt = target - mu_t

    singular = np.linalg.svd(src, compute_uv=False)
    if singular[0] < 1e-12 or singular[1] < 1e-9 * singular[0]:
        raise DegenerateConfigurationException("Source points are coincident or collinear.", {"pairs": n})

    cov = tgt.T @ src / n
    u, d, vt = np.linalg.svd(cov)
    sign = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2, 2] = -1.0
    rotation = u @ sign @ vt

    if with_scale:
        var_s = float(np.sum(src * src)) / n
        scale = float(np.trace(np.diag(d) @ sign)) / var_s
        if scale <= 0:
            raise DegenerateConfigurationException("Target points collapse to a single point.", {"pairs": n})
    else:
        scale = 1.0
    translation = mu_t - scale * rotation @ mu_s
    return SimTransform(scale, rotation, translation), singular
