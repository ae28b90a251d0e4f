import logging
from typing import List, Optional, Sequence

import numpy as np

from .models import CameraModel, create_camera
from ..config import CameraConfig
from ..exceptions import DegenerateParallaxException, InvalidArgumentException
from ..manifold import Pose

logger = logging.getLogger(__name__)

MIN_PARALLAX_DEG = 0.05


class CameraRig:
    """One or two cameras rigidly attached to the body (IMU) frame.

    For stereo rigs the relative transform between the two cameras is fixed
    for the whole session; no rectification is assumed.
    """

    cameras: List[CameraModel]
    """The camera models, left camera first."""

    extrinsics: List[Pose]
    """Per-camera ``T_CB``, the transformation from body to camera coordinates."""

    def __init__(self, cameras: Sequence[CameraModel], extrinsics: Sequence[Pose] = None):
        if not 1 <= len(cameras) <= 2:
            raise InvalidArgumentException("A rig holds one or two cameras.")
        if extrinsics is None:
            extrinsics = [Pose.identity() for _ in cameras]
        if len(extrinsics) != len(cameras):
            raise InvalidArgumentException("Every camera needs an extrinsic transform.")
        self.cameras = list(cameras)
        self.extrinsics = list(extrinsics)
        self._body_from_camera = [t.inverse() for t in self.extrinsics]

    @property
    def is_stereo(self) -> bool:
        return len(self.cameras) == 2

    @property
    def stereo_transform(self) -> Optional[Pose]:
        """``T_C1C0``, mapping left-camera coordinates into the right camera."""
        if not self.is_stereo:
            return None
        return self.extrinsics[1].compose(self._body_from_camera[0])

    @property
    def baseline(self) -> float:
        if not self.is_stereo:
            return 0.0
        return float(np.linalg.norm(self.stereo_transform.translation))

    def camera_to_body(self, index: int = 0) -> Pose:
        """``T_BC`` of a camera."""
        return self._body_from_camera[index]

    def camera_pose(self, pose_body: Pose, index: int = 0) -> Pose:
        """World-from-camera pose of a camera for a world-from-body pose."""
        return pose_body.compose(self._body_from_camera[index])

    def world_to_camera(self, pose_body: Pose, points: np.ndarray, index: int = 0) -> np.ndarray:
        """Express world points in a camera frame."""
        return self.camera_pose(pose_body, index).inverse().act(points)

    def project(self, pose_body: Pose, point: np.ndarray, index: int = 0) -> np.ndarray:
        """Project a world point into one of the cameras."""
        return self.cameras[index].project(self.world_to_camera(pose_body, point, index))

    def world_ray(self, pose_body: Pose, uv: np.ndarray, index: int = 0):
        """Return ``(origin, direction)`` of the world ray through a pixel."""
        camera_pose = self.camera_pose(pose_body, index)
        direction = camera_pose.rotation @ self.cameras[index].unproject(uv)
        return camera_pose.translation, direction

    def to_dict(self) -> dict:
        return {
            "cameras": [
                dict(camera.to_dict(), T_cb=extrinsic.matrix().tolist())
                for camera, extrinsic in zip(self.cameras, self.extrinsics)
            ]
        }

    def __repr__(self) -> str:
        if self.is_stereo:
            return f"<CameraRig stereo baseline={self.baseline:.3f}m>"
        return "<CameraRig monocular>"


def parallax_angle(direction_a: np.ndarray, direction_b: np.ndarray) -> float:
    """Angle in radians between two ray directions."""
    a = direction_a / np.linalg.norm(direction_a)
    b = direction_b / np.linalg.norm(direction_b)
    return float(np.arctan2(np.linalg.norm(np.cross(a, b)), a @ b))


def triangulate_rays(
    origin_a: np.ndarray,
    direction_a: np.ndarray,
    origin_b: np.ndarray,
    direction_b: np.ndarray,
    min_parallax_deg: float = MIN_PARALLAX_DEG,
) -> np.ndarray:
    """Midpoint of the common perpendicular of two rays.

    Arguments:
        origin_a: Optical center of the first ray.
        direction_a: Direction of the first ray.
        origin_b: Optical center of the second ray.
        direction_b: Direction of the second ray.
        min_parallax_deg: Smallest accepted angle between the rays.

    Returns:
        The triangulated point, in the frame of the inputs.

    Raises:
        DegenerateParallaxException: If the rays are nearly parallel or the
            point lies behind one of the centers.
    """
    da = direction_a / np.linalg.norm(direction_a)
    db = direction_b / np.linalg.norm(direction_b)
    angle = parallax_angle(da, db)
    if angle < np.radians(min_parallax_deg):
        raise DegenerateParallaxException(
            "Rays are too close to parallel.", {"parallax_deg": round(np.degrees(angle), 4)}
        )

    w0 = origin_a - origin_b
    b = da @ db
    d = da @ w0
    e = db @ w0
    denominator = 1.0 - b * b
    depth_a = (b * e - d) / denominator
    depth_b = (e - b * d) / denominator
    if depth_a <= 0 or depth_b <= 0:
        raise DegenerateParallaxException(
            "Rays meet behind a camera.",
            {"depth_a": round(float(depth_a), 4), "depth_b": round(float(depth_b), 4)},
        )
    return 0.5 * ((origin_a + depth_a * da) + (origin_b + depth_b * db))


def triangulate(
    rig: CameraRig,
    pose_body: Pose,
    obs_left: np.ndarray,
    obs_right: np.ndarray,
    max_reprojection_px: float = None,
    min_parallax_deg: float = MIN_PARALLAX_DEG,
) -> np.ndarray:
    """Triangulate a stereo observation of a non-rectified rig.

    Arguments:
        rig: A stereo camera rig.
        pose_body: World-from-body pose of the frame.
        obs_left: Pixel in the left camera.
        obs_right: Pixel in the right camera.
        max_reprojection_px: If given, reject points whose reprojection in
            either camera exceeds this error.
        min_parallax_deg: Smallest accepted angle between the rays.

    Returns:
        The point in world coordinates.

    Raises:
        DegenerateParallaxException: For parallel rays, points behind a
            camera or a failed reprojection gate.
    """
    if not rig.is_stereo:
        raise InvalidArgumentException("Stereo triangulation requires a two-camera rig.")
    origin_l, dir_l = rig.world_ray(pose_body, obs_left, 0)
    origin_r, dir_r = rig.world_ray(pose_body, obs_right, 1)
    point = triangulate_rays(origin_l, dir_l, origin_r, dir_r, min_parallax_deg)

    if max_reprojection_px is not None:
        for index, observed in enumerate((obs_left, obs_right)):
            camera = rig.cameras[index]
            uv, valid = camera.project_many(rig.world_to_camera(pose_body, point[None, :], index))
            if not valid[0] or np.linalg.norm(uv[0] - observed) > max_reprojection_px:
                raise DegenerateParallaxException(
                    "Triangulated point fails the reprojection gate.", {"camera": index}
                )
    return point


def rig_from_config(cameras: Sequence[CameraConfig], stereo: bool = None) -> CameraRig:
    """Build a rig from the ``cameras`` section of a run configuration.

    Arguments:
        cameras: Camera sections, left camera first.
        stereo: Use the first two cameras; by default only as many as given,
            capped at two.
    """
    count = min(len(cameras), 2) if stereo is None else (2 if stereo else 1)
    models, extrinsics = [], []
    for section in cameras[:count]:
        kwargs = {} if section.model == "pinhole" else {"max_angle_deg": section.max_angle_deg}
        models.append(create_camera(section.model, section.intrinsics, section.resolution, section.distortion, **kwargs))
        extrinsics.append(Pose.from_matrix(np.asarray(section.T_cb, dtype=float)))
    return CameraRig(models, extrinsics)


def rig_to_config(rig: CameraRig) -> List[CameraConfig]:
    """Camera sections reproducing a rig, the inverse of :func:`rig_from_config`."""
    sections = []
    for camera, extrinsic in zip(rig.cameras, rig.extrinsics):
        section = CameraConfig(
            model=camera.kind.value,
            intrinsics=[camera.fx, camera.fy, camera.cx, camera.cy],
            resolution=[camera.width, camera.height],
            T_cb=extrinsic.matrix().tolist(),
        )
        if hasattr(camera, "distortion"):
            section.distortion = [float(k) for k in camera.distortion]
            section.max_angle_deg = float(np.degrees(camera.max_angle))
        sections.append(section)
    return sections
