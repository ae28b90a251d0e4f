"""Projection models consumed through rays and pixels only."""

import logging
from abc import ABC, abstractmethod
from enum import Enum
from typing import Sequence, Tuple

import numpy as np

from ..exceptions import (
    BehindCameraException,
    InvalidArgumentException,
    NoConvergenceException,
    OutOfFovException,
)

logger = logging.getLogger(__name__)

DEFAULT_MAX_ANGLE_DEG = 95.0
_NEWTON_MAX_ITERATIONS = 20
_NEWTON_TOLERANCE = 1e-12
_NEWTON_MAX_STEP = 0.5


class CameraKind(str, Enum):
    PINHOLE = "pinhole"
    KANNALA_BRANDT = "kannala-brandt"


class CameraModel(ABC):
    """Abstract camera model: projection, unprojection and their Jacobian."""

    kind: CameraKind
    """The projection model of this camera."""

    fx: float
    """Focal length along the image x-axis in pixels."""

    fy: float
    """Focal length along the image y-axis in pixels."""

    cx: float
    """Principal point x-coordinate in pixels."""

    cy: float
    """Principal point y-coordinate in pixels."""

    width: int
    """Image width in pixels."""

    height: int
    """Image height in pixels."""

    def __init__(
        self,
        fx: float,
        fy: float,
        cx: float,
        cy: float,
        width: int = 640,
        height: int = 480,
    ):
        if fx <= 0 or fy <= 0:
            raise InvalidArgumentException("Focal lengths must be positive.")
        if width <= 0 or height <= 0:
            raise InvalidArgumentException("Image size must be positive.")
        self.fx = float(fx)
        self.fy = float(fy)
        self.cx = float(cx)
        self.cy = float(cy)
        self.width = int(width)
        self.height = int(height)

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])

    def project(self, x_cam: np.ndarray) -> np.ndarray:
        """Project a point in camera coordinates to pixels.

        Arguments:
            x_cam: A 3-vector in meters in the camera frame.

        Returns:
            The pixel coordinates ``(u, v)``.

        Raises:
            BehindCameraException: For a pin-hole camera and ``z <= 0``.
            OutOfFovException: For a fisheye camera and a ray beyond its maximum angle.
        """
        uv, valid = self.project_many(np.asarray(x_cam, dtype=float)[None, :])
        if not valid[0]:
            self._raise_invalid(x_cam)
        return uv[0]

    @abstractmethod
    def project_many(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Vectorised projection of ``(N, 3)`` camera points.

        Returns:
            Pixels ``(N, 2)`` and a boolean validity mask; invalid rows hold
            unspecified values.
        """

    def unproject(self, uv: np.ndarray) -> np.ndarray:
        """Return the unit ray through a pixel.

        Raises:
            NoConvergenceException: If the inversion of the distortion does not converge.
        """
        return self.unproject_many(np.asarray(uv, dtype=float)[None, :])[0]

    @abstractmethod
    def unproject_many(self, uv: np.ndarray) -> np.ndarray:
        """Vectorised unprojection of ``(N, 2)`` pixels to unit rays ``(N, 3)``."""

    @abstractmethod
    def projection_jacobian(self, x_cam: np.ndarray) -> np.ndarray:
        """Analytic 2×3 Jacobian of :meth:`project` at ``x_cam``."""

    @abstractmethod
    def projection_jacobian_many(self, points: np.ndarray) -> np.ndarray:
        """Vectorised :meth:`projection_jacobian`, ``(N, 2, 3)``; rows of invalid points are unspecified."""

    @abstractmethod
    def _raise_invalid(self, x_cam: np.ndarray): ...

    def in_image(self, uv: np.ndarray, border: float = 0.0) -> np.ndarray:
        """Mask of pixels lying inside the image, optionally away from the border."""
        uv = np.atleast_2d(uv)
        return (
            (uv[:, 0] >= border)
            & (uv[:, 0] < self.width - border)
            & (uv[:, 1] >= border)
            & (uv[:, 1] < self.height - border)
        )

    def to_dict(self) -> dict:
        return {
            "model": self.kind.value,
            "intrinsics": self.intrinsics.tolist(),
            "resolution": [self.width, self.height],
        }

    def __repr__(self) -> str:
        return (
            f"<{type(self).__name__} f=({self.fx:.1f}, {self.fy:.1f}) "
            f"c=({self.cx:.1f}, {self.cy:.1f}) {self.width}x{self.height}>"
        )


class PinholeCamera(CameraModel):
    """Undistorted pin-hole camera."""

    kind = CameraKind.PINHOLE

    def project_many(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        points = np.atleast_2d(points)
        z = points[:, 2]
        valid = z > 0
        safe_z = np.where(valid, z, 1.0)
        uv = np.column_stack(
            (
                self.fx * points[:, 0] / safe_z + self.cx,
                self.fy * points[:, 1] / safe_z + self.cy,
            )
        )
        return uv, valid

    def unproject_many(self, uv: np.ndarray) -> np.ndarray:
        uv = np.atleast_2d(uv)
        rays = np.column_stack(
            (
                (uv[:, 0] - self.cx) / self.fx,
                (uv[:, 1] - self.cy) / self.fy,
                np.ones(len(uv)),
            )
        )
        return rays / np.linalg.norm(rays, axis=1, keepdims=True)

    def projection_jacobian(self, x_cam: np.ndarray) -> np.ndarray:
        x, y, z = x_cam
        if z <= 0:
            self._raise_invalid(x_cam)
        inv_z = 1.0 / z
        return np.array(
            [
                [self.fx * inv_z, 0.0, -self.fx * x * inv_z * inv_z],
                [0.0, self.fy * inv_z, -self.fy * y * inv_z * inv_z],
            ]
        )

    def projection_jacobian_many(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        z = points[:, 2]
        inv_z = 1.0 / np.where(z > 0, z, 1.0)
        jacobian = np.zeros((len(points), 2, 3))
        jacobian[:, 0, 0] = self.fx * inv_z
        jacobian[:, 0, 2] = -self.fx * points[:, 0] * inv_z * inv_z
        jacobian[:, 1, 1] = self.fy * inv_z
        jacobian[:, 1, 2] = -self.fy * points[:, 1] * inv_z * inv_z
        return jacobian

    def _raise_invalid(self, x_cam):
        raise BehindCameraException(
            "Point is not in front of the camera.", {"z": float(x_cam[2])}
        )


class KannalaBrandtCamera(CameraModel):
    """Kannala-Brandt fisheye camera, ``r(θ) = θ + k1·θ³ + k2·θ⁵ + k3·θ⁷ + k4·θ⁹``.

    The model is defined for rays up to :attr:`max_angle` off the optical axis,
    which may exceed 90° for wide lenses.
    """

    kind = CameraKind.KANNALA_BRANDT

    distortion: np.ndarray
    """The four polynomial coefficients ``k1..k4``."""

    max_angle: float
    """Largest projectable angle from the optical axis (rad)."""

    def __init__(
        self,
        fx: float,
        fy: float,
        cx: float,
        cy: float,
        distortion: Sequence[float] = (0.0, 0.0, 0.0, 0.0),
        width: int = 640,
        height: int = 480,
        max_angle_deg: float = DEFAULT_MAX_ANGLE_DEG,
    ):
        super().__init__(fx, fy, cx, cy, width, height)
        distortion = np.asarray(distortion, dtype=float)
        if distortion.shape != (4,):
            raise InvalidArgumentException("Kannala-Brandt cameras take exactly four coefficients.")
        if not 0 < max_angle_deg < 180:
            raise InvalidArgumentException("Maximum projection angle must be in (0, 180) degrees.")
        self.distortion = distortion
        self.max_angle = float(np.radians(max_angle_deg))

    def _radius(self, theta: np.ndarray) -> np.ndarray:
        k1, k2, k3, k4 = self.distortion
        t2 = theta * theta
        return theta * (1.0 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4))))

    def _radius_derivative(self, theta: np.ndarray) -> np.ndarray:
        k1, k2, k3, k4 = self.distortion
        t2 = theta * theta
        return 1.0 + t2 * (3.0 * k1 + t2 * (5.0 * k2 + t2 * (7.0 * k3 + t2 * 9.0 * k4)))

    def project_many(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        points = np.atleast_2d(points)
        x, y, z = points[:, 0], points[:, 1], points[:, 2]
        r = np.hypot(x, y)
        theta = np.arctan2(r, z)
        valid = (theta <= self.max_angle) & ((r > 0) | (z > 0))

        on_axis = r < 1e-12
        safe_r = np.where(on_axis, 1.0, r)
        safe_z = np.where(z > 0, z, 1.0)
        # d(θ)/r tends to 1/z on the optical axis
        scale = np.where(on_axis, 1.0 / safe_z, self._radius(theta) / safe_r)
        uv = np.column_stack(
            (self.fx * scale * x + self.cx, self.fy * scale * y + self.cy)
        )
        return uv, valid

    def _solve_theta(self, radius: np.ndarray) -> np.ndarray:
        theta = np.minimum(radius, np.pi)
        for _ in range(_NEWTON_MAX_ITERATIONS):
            error = self._radius(theta) - radius
            if np.all(np.abs(error) < _NEWTON_TOLERANCE * np.maximum(1.0, radius)):
                return theta
            step = error / self._radius_derivative(theta)
            step = np.clip(step, -_NEWTON_MAX_STEP, _NEWTON_MAX_STEP)
            theta = np.clip(theta - step, 0.0, np.pi)

        error = np.abs(self._radius(theta) - radius)
        if np.any(error > 1e-9 * np.maximum(1.0, radius)):
            raise NoConvergenceException(
                "Fisheye unprojection did not converge, check the distortion coefficients.",
                {"residual": float(error.max())},
            )
        return theta

    def unproject_many(self, uv: np.ndarray) -> np.ndarray:
        uv = np.atleast_2d(uv)
        mx = (uv[:, 0] - self.cx) / self.fx
        my = (uv[:, 1] - self.cy) / self.fy
        radius = np.hypot(mx, my)
        theta = self._solve_theta(radius)

        on_axis = radius < 1e-12
        safe_radius = np.where(on_axis, 1.0, radius)
        sin_theta = np.sin(theta)
        rays = np.column_stack(
            (
                np.where(on_axis, mx, sin_theta * mx / safe_radius),
                np.where(on_axis, my, sin_theta * my / safe_radius),
                np.where(on_axis, 1.0, np.cos(theta)),
            )
        )
        return rays / np.linalg.norm(rays, axis=1, keepdims=True)

    def projection_jacobian(self, x_cam: np.ndarray) -> np.ndarray:
        x, y, z = (float(c) for c in x_cam)
        r2 = x * x + y * y
        r = np.sqrt(r2)
        theta = np.arctan2(r, z)
        if theta > self.max_angle:
            self._raise_invalid(x_cam)

        if r < 1e-9:
            # the model is the pin-hole model to first order on the axis
            return np.array(
                [[self.fx / z, 0.0, -self.fx * x / (z * z)], [0.0, self.fy / z, -self.fy * y / (z * z)]]
            )

        rho2 = r2 + z * z
        d = float(self._radius(theta))
        d_prime = float(self._radius_derivative(theta))
        dtheta = np.array([z * x / (r * rho2), z * y / (r * rho2), -r / rho2])

        m = d / r
        dm = d_prime * dtheta / r
        dm[0] -= d * x / (r2 * r)
        dm[1] -= d * y / (r2 * r)

        return np.array(
            [
                [self.fx * (m + x * dm[0]), self.fx * x * dm[1], self.fx * x * dm[2]],
                [self.fy * y * dm[0], self.fy * (m + y * dm[1]), self.fy * y * dm[2]],
            ]
        )

    def projection_jacobian_many(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        x, y, z = points[:, 0], points[:, 1], points[:, 2]
        r2 = x * x + y * y
        r = np.sqrt(r2)
        theta = np.arctan2(r, z)
        on_axis = r < 1e-9
        safe_r = np.where(on_axis, 1.0, r)
        rho2 = np.maximum(r2 + z * z, 1e-300)
        d = self._radius(theta)
        d_prime = self._radius_derivative(theta)
        dtheta = np.column_stack((z * x / (safe_r * rho2), z * y / (safe_r * rho2), -r / rho2))

        m = d / safe_r
        dm = d_prime[:, None] * dtheta / safe_r[:, None]
        dm[:, 0] -= d * x / safe_r**3
        dm[:, 1] -= d * y / safe_r**3

        jacobian = np.empty((len(points), 2, 3))
        jacobian[:, 0, 0] = self.fx * (m + x * dm[:, 0])
        jacobian[:, 0, 1] = self.fx * x * dm[:, 1]
        jacobian[:, 0, 2] = self.fx * x * dm[:, 2]
        jacobian[:, 1, 0] = self.fy * y * dm[:, 0]
        jacobian[:, 1, 1] = self.fy * (m + y * dm[:, 1])
        jacobian[:, 1, 2] = self.fy * y * dm[:, 2]
        if np.any(on_axis):
            inv_z = 1.0 / np.where(z > 0, z, 1.0)
            axis = np.zeros((len(points), 2, 3))
            axis[:, 0, 0] = self.fx * inv_z
            axis[:, 0, 2] = -self.fx * x * inv_z * inv_z
            axis[:, 1, 1] = self.fy * inv_z
            axis[:, 1, 2] = -self.fy * y * inv_z * inv_z
            jacobian[on_axis] = axis[on_axis]
        return jacobian

    def _raise_invalid(self, x_cam):
        angle = float(np.degrees(np.arctan2(np.hypot(x_cam[0], x_cam[1]), x_cam[2])))
        raise OutOfFovException(
            "Ray is beyond the maximum projection angle.",
            {"angle_deg": round(angle, 3), "max_deg": round(np.degrees(self.max_angle), 3)},
        )

    def to_dict(self) -> dict:
        data = super().to_dict()
        data["distortion"] = self.distortion.tolist()
        data["max_angle_deg"] = float(np.degrees(self.max_angle))
        return data


def create_camera(
    model: str,
    intrinsics: Sequence[float],
    resolution: Sequence[int] = (640, 480),
    distortion: Sequence[float] = None,
    **kwargs,
) -> CameraModel:
    """Create a camera model from its configuration values.

    Arguments:
        model: A :class:`CameraKind` value.
        intrinsics: ``(fx, fy, cx, cy)`` in pixels.
        resolution: ``(width, height)`` in pixels.
        distortion: Fisheye coefficients ``k1..k4``.
        **kwargs: Extra model arguments, e.g. ``max_angle_deg``.

    Returns:
        The camera instance.
    """
    kind = CameraKind(model)
    fx, fy, cx, cy = intrinsics
    width, height = resolution
    if kind is CameraKind.PINHOLE:
        if distortion is not None and np.any(np.asarray(distortion) != 0):
            logger.warning("Ignoring distortion coefficients for a pin-hole camera.")
        return PinholeCamera(fx, fy, cx, cy, width, height)
    return KannalaBrandtCamera(
        fx,
        fy,
        cx,
        cy,
        distortion=(0.0, 0.0, 0.0, 0.0) if distortion is None else distortion,
        width=width,
        height=height,
        **kwargs,
    )
