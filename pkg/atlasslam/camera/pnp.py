"""Absolute pose from projective rays, independent of the camera model."""

import logging
from typing import List, Optional

import numpy as np
from scipy.optimize import brentq

from ..config import SolverConfig
from ..exceptions import DegenerateConfigurationException, InsufficientInliersException
from ..manifold import Pose, umeyama_alignment

logger = logging.getLogger(__name__)

MIN_CORRESPONDENCES = 4
_SCAN_SAMPLES = 256


class PnpSolution:
    """Result of a robust PnP estimate."""

    pose: Pose
    """World-from-camera pose."""

    inliers: np.ndarray
    """Boolean mask over the input correspondences."""

    def __init__(self, pose: Pose, inliers: np.ndarray):
        self.pose = pose
        self.inliers = inliers

    @property
    def inlier_count(self) -> int:
        return int(np.count_nonzero(self.inliers))

    def __repr__(self) -> str:
        return f"<PnpSolution inliers={self.inlier_count} pose={self.pose!r}>"


def angular_errors(pose: Pose, rays: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Angles (rad) between observed rays and the directions to world points."""
    x_cam = (points - pose.translation) @ pose.rotation
    cross = np.linalg.norm(np.cross(x_cam, rays), axis=1)
    dot = np.einsum("ij,ij->i", x_cam, rays)
    return np.arctan2(cross, dot)


def _depth_branch(l1, sign2, sign3, d12, d13, d23, c12, c13, c23):
    s12 = 1.0 - c12 * c12
    s13 = 1.0 - c13 * c13
    l2 = l1 * c12 + sign2 * np.sqrt(np.maximum(d12 * d12 - l1 * l1 * s12, 0.0))
    l3 = l1 * c13 + sign3 * np.sqrt(np.maximum(d13 * d13 - l1 * l1 * s13, 0.0))
    return l2, l3, l2 * l2 + l3 * l3 - 2.0 * l2 * l3 * c23 - d23 * d23


def p3p(rays: np.ndarray, points: np.ndarray) -> List[Pose]:
    """All camera poses consistent with three ray / point correspondences.

    The depth along the first ray parameterises the other two depths through
    the law of cosines; the remaining constraint is solved by bracketing its
    sign changes and refining each root with Brent's method.

    Arguments:
        rays: ``(3, 3)`` unit rays in the camera frame.
        points: ``(3, 3)`` world points.

    Returns:
        World-from-camera candidate poses (up to four).
    """
    f1, f2, f3 = rays
    d12 = np.linalg.norm(points[0] - points[1])
    d13 = np.linalg.norm(points[0] - points[2])
    d23 = np.linalg.norm(points[1] - points[2])
    c12, c13, c23 = f1 @ f2, f1 @ f3, f2 @ f3
    s12, s13 = 1.0 - c12 * c12, 1.0 - c13 * c13
    if min(d12, d13, d23) < 1e-9 or min(s12, s13) < 1e-12:
        return []

    limit = min(d12 / np.sqrt(s12), d13 / np.sqrt(s13))
    grid = np.linspace(limit * 1e-6, limit, _SCAN_SAMPLES)
    constants = (d12, d13, d23, c12, c13, c23)
    solutions = []
    for sign2 in (1.0, -1.0):
        for sign3 in (1.0, -1.0):
            l2, l3, value = _depth_branch(grid, sign2, sign3, *constants)
            valid = (l2 > 0) & (l3 > 0)
            changes = np.nonzero(valid[:-1] & valid[1:] & (value[:-1] * value[1:] <= 0))[0]
            for k in changes:
                if value[k] == value[k + 1]:
                    continue
                l1 = brentq(
                    lambda x: _depth_branch(x, sign2, sign3, *constants)[2],
                    grid[k],
                    grid[k + 1],
                    xtol=1e-14,
                )
                l2_root, l3_root, _ = _depth_branch(l1, sign2, sign3, *constants)
                camera_points = np.array([l1 * f1, l2_root * f2, l3_root * f3])
                try:
                    camera_from_world, _ = umeyama_alignment(points, camera_points, with_scale=False)
                except DegenerateConfigurationException:
                    continue
                solutions.append(camera_from_world.as_pose().inverse())
    return solutions


def refine_pose(
    pose: Pose,
    rays: np.ndarray,
    points: np.ndarray,
    sigma_rad: float,
    config: Optional[SolverConfig] = None,
) -> Pose:
    """Minimise the robust angular ray error over the camera pose."""
    from ..solver import FactorGraph, RayAngularFactor, VariableKind, optimize

    graph = FactorGraph()
    graph.add_variable("camera", VariableKind.POSE, pose)
    for ray, point in zip(rays, points):
        graph.add_factor(RayAngularFactor("camera", ray, point, sigma_rad))
    optimize(graph, config, use_schur=False)
    return graph.value("camera")


def pnp_ransac(
    rays: np.ndarray,
    points: np.ndarray,
    min_inliers: int = MIN_CORRESPONDENCES,
    threshold_deg: float = 1.0,
    iterations: int = 100,
    rng: np.random.Generator = None,
    config: Optional[SolverConfig] = None,
) -> PnpSolution:
    """Robust camera pose from ray / world-point correspondences.

    Minimal three-point hypotheses, disambiguated by a fourth point, are
    scored by the number of rays within the angular threshold. The best
    hypothesis is refined on its inliers by minimising the angular ray error.

    Arguments:
        rays: ``(N, 3)`` unit rays in the camera frame.
        points: ``(N, 3)`` corresponding world points.
        min_inliers: Smallest accepted inlier count.
        threshold_deg: Angular inlier threshold.
        iterations: RANSAC iterations.
        rng: Random generator, a fixed default seed is used if omitted.
        config: Solver settings for the refinement.

    Returns:
        The world-from-camera pose and the inlier mask.

    Raises:
        InsufficientInliersException: For fewer than four correspondences or
            too few inliers.
    """
    rays = np.asarray(rays, dtype=float).reshape(-1, 3)
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    count = len(rays)
    required = max(min_inliers, MIN_CORRESPONDENCES)
    if count < MIN_CORRESPONDENCES or count < required:
        raise InsufficientInliersException(
            "Not enough correspondences for PnP.", {"count": count, "required": required}
        )
    rays = rays / np.linalg.norm(rays, axis=1, keepdims=True)
    rng = rng if rng is not None else np.random.default_rng(0)
    threshold = np.radians(threshold_deg)

    best_pose, best_inliers, best_score = None, None, -1
    for _ in range(iterations):
        sample = rng.choice(count, 4, replace=False)
        candidates = p3p(rays[sample[:3]], points[sample[:3]])
        if not candidates:
            continue
        check = sample[3:]
        pose = min(
            candidates, key=lambda c: float(angular_errors(c, rays[check], points[check])[0])
        )
        inliers = angular_errors(pose, rays, points) < threshold
        score = int(np.count_nonzero(inliers))
        if score > best_score:
            best_pose, best_inliers, best_score = pose, inliers, score
            if score == count:
                break

    if best_pose is None or best_score < required:
        raise InsufficientInliersException(
            "PnP hypothesis is not supported by enough rays.",
            {"inliers": max(best_score, 0), "required": required},
        )

    pose = refine_pose(best_pose, rays[best_inliers], points[best_inliers], threshold / 2.0, config)
    inliers = angular_errors(pose, rays, points) < threshold
    if np.count_nonzero(inliers) < required:
        raise InsufficientInliersException(
            "PnP refinement lost too many inliers.",
            {"inliers": int(np.count_nonzero(inliers)), "required": required},
        )
    # second pass on the final inlier set
    pose = refine_pose(pose, rays[inliers], points[inliers], threshold / 2.0, config)
    logger.debug("PnP: %d/%d inliers", np.count_nonzero(inliers), count)
    return PnpSolution(pose, inliers)
