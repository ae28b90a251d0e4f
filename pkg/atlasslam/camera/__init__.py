"""Camera models, rigs, triangulation and ray-based absolute pose."""

from .models import (
    DEFAULT_MAX_ANGLE_DEG,
    CameraKind,
    CameraModel,
    KannalaBrandtCamera,
    PinholeCamera,
    create_camera,
)
from .rig import CameraRig, parallax_angle, rig_from_config, rig_to_config, triangulate, triangulate_rays
from .pnp import PnpSolution, angular_errors, p3p, pnp_ransac, refine_pose
