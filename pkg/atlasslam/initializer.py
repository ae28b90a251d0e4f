"""Map initialization: vision-only structure, then MAP estimation of the inertial parameters.

The inertial part runs in three steps. An up-to-scale visual map is built
first; scale, gravity direction, a shared bias and the velocities are then
estimated with the trajectory held constant; a joint visual-inertial bundle
adjustment refines everything. Later, the schedule of :class:`InertialInitializer`
runs full visual-inertial BA and a cheap scale and gravity refinement.
"""

import logging
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .camera import CameraRig, pnp_ransac
from .config import Association, InitConfig, SolverConfig
from .const import GRAVITY_INERTIAL
from .exceptions import (
    EstimationException,
    InitializationFailedException,
    InsufficientParallaxException,
    NoConvergenceException,
    PreconditionException,
    SingularSystemException,
)
from .imu import NavState, Preintegrated
from .manifold import Pose, SimTransform, log_so3, rotation_between
from .models import Atlas, Keyframe, MapPoint, SlamMap
from .optimizer import BundleAdjustment, bias_prior_information, global_bundle_adjustment, remove_outliers
from .placerec.recognition import match_descriptors
from .solver import (
    BiasPriorFactor,
    FactorGraph,
    OptimizeResult,
    ScaledInertialFactor,
    VariableKind,
    marginal_covariance,
    optimize,
)

logger = logging.getLogger(__name__)

Tracks = Dict[int, Dict[int, int]]
"""Track id to ``{view index: keypoint index}``."""


class InitStage(str, Enum):
    VISION = "vision-only"
    INERTIAL_ONLY = "inertial-only"
    JOINT = "joint-vi"
    VI_BA = "vi-ba"
    SCALE_REFINE = "scale-refine"


class InertialInitState:
    """Inertial-only state: scale, gravity direction, shared bias and velocities."""

    scale: float
    """Metric scale of the visual trajectory, always positive."""

    gravity_rotation: np.ndarray
    """``R_wg``, rotating the gravity-aligned frame into the map frame."""

    bias: np.ndarray
    """Bias shared by all keyframes, ordered ``(b_g, b_a)``."""

    velocities: Dict[int, np.ndarray]
    """Up-to-scale velocities ``v̄`` by keyframe id; metric velocity is ``s·v̄``."""

    scale_std: Optional[float]
    """Standard deviation of ``log s``, about the relative scale uncertainty."""

    chi2: float
    """Final cost of the inertial-only problem."""

    iterations: int

    def __init__(
        self,
        scale: float,
        gravity_rotation: np.ndarray,
        bias: np.ndarray,
        velocities: Dict[int, np.ndarray],
        scale_std: Optional[float] = None,
        chi2: float = 0.0,
        iterations: int = 0,
    ):
        self.scale = float(scale)
        self.gravity_rotation = np.asarray(gravity_rotation, dtype=float)
        self.bias = np.asarray(bias, dtype=float)
        self.velocities = velocities
        self.scale_std = scale_std
        self.chi2 = chi2
        self.iterations = iterations

    @property
    def gravity(self) -> np.ndarray:
        """Gravity vector in the map frame before alignment."""
        return self.gravity_rotation @ GRAVITY_INERTIAL

    def __repr__(self) -> str:
        return f"<InertialInitState s={self.scale:.5f} bias={np.round(self.bias, 5).tolist()}>"


class VisionInitResult:
    """Summary of the vision-only stage."""

    map_id: int
    keyframe_ids: List[int]
    """Keyframes created, in view order."""

    parallax_deg: float
    """Median parallax of the tracks shared by the two reference views."""

    chi2: float
    reprojection_rms: float
    """RMS reprojection error in pixels after bundle adjustment."""

    def __init__(self, map_id: int, keyframe_ids: List[int], parallax_deg: float, chi2: float, reprojection_rms: float):
        self.map_id = map_id
        self.keyframe_ids = keyframe_ids
        self.parallax_deg = parallax_deg
        self.chi2 = chi2
        self.reprojection_rms = reprojection_rms

    def __repr__(self) -> str:
        return (
            f"<VisionInitResult map={self.map_id} keyframes={len(self.keyframe_ids)} "
            f"parallax={self.parallax_deg:.2f}° rms={self.reprojection_rms:.3f}px>"
        )


def build_tracks(
    views: Sequence,
    association: Association = Association.DESCRIPTOR,
    max_distance: int = 50,
    ratio: float = 0.75,
) -> Tracks:
    """Feature tracks of the first camera over a sequence of views.

    Views are any objects with ``keypoints``. Oracle association groups
    keypoints by their ground-truth landmark; descriptor association chains
    matches between consecutive views.

    Returns:
        Tracks seen in at least two views.
    """
    tracks: Tracks = {}
    if Association(association) is Association.ORACLE:
        for v, view in enumerate(views):
            for k, keypoint in enumerate(view.keypoints):
                if keypoint.camera == 0 and keypoint.landmark is not None:
                    tracks.setdefault(keypoint.landmark, {})[v] = k
        return {t: obs for t, obs in tracks.items() if len(obs) >= 2}

    open_tracks: Dict[int, int] = {}
    previous_indices, previous_descriptors = [], None
    next_id = 0
    for v, view in enumerate(views):
        indices = [k for k, kp in enumerate(view.keypoints) if kp.camera == 0]
        descriptors = (
            np.stack([view.keypoints[k].descriptor for k in indices])
            if indices
            else np.zeros((0, 32), dtype=np.uint8)
        )
        current = {}
        if previous_descriptors is not None:
            for q, t, _ in match_descriptors(descriptors, previous_descriptors, max_distance, ratio):
                before = previous_indices[t]
                track = open_tracks.get(before)
                if track is None:
                    track = next_id
                    next_id += 1
                    tracks[track] = {v - 1: before}
                tracks[track][v] = indices[q]
                current[indices[q]] = track
        open_tracks = current
        previous_indices, previous_descriptors = indices, descriptors
    return {t: obs for t, obs in tracks.items() if len(obs) >= 2}


def rotation_only_residuals(rays_a: np.ndarray, rays_b: np.ndarray) -> np.ndarray:
    """Angles (rad) left between matched rays after the best pure rotation."""
    u, _, vt = np.linalg.svd(rays_b.T @ rays_a)
    sign = np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt))])
    rotated = rays_a @ (u @ sign @ vt).T
    cross = np.linalg.norm(np.cross(rotated, rays_b), axis=1)
    return np.arctan2(cross, np.einsum("ij,ij->i", rotated, rays_b))


def essential_from_rays(rays_a: np.ndarray, rays_b: np.ndarray) -> np.ndarray:
    """Linear estimate of ``E`` with ``bᵀ·E·a = 0`` from eight or more ray pairs."""
    design = np.einsum("ni,nj->nij", rays_b, rays_a).reshape(-1, 9)
    _, _, vt = np.linalg.svd(design)
    u, _, vt = np.linalg.svd(vt[-1].reshape(3, 3))
    return u @ np.diag([1.0, 1.0, 0.0]) @ vt


def epipolar_errors(essential: np.ndarray, rays_a: np.ndarray, rays_b: np.ndarray) -> np.ndarray:
    """Sine of the angle between each ray and its epipolar plane, the worse of both views."""
    normal_b = rays_a @ essential.T
    normal_a = rays_b @ essential
    algebraic = np.abs(np.einsum("ij,ij->i", rays_b, normal_b))
    with np.errstate(divide="ignore", invalid="ignore"):
        error = np.maximum(
            algebraic / np.linalg.norm(normal_b, axis=1),
            algebraic / np.linalg.norm(normal_a, axis=1),
        )
    return np.nan_to_num(error, nan=np.inf)


def decompose_essential(essential: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    """The four ``(R, t)`` with ``x_b = R·x_a + t`` and ``|t| = 1``."""
    u, _, vt = np.linalg.svd(essential)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = u[:, 2]
    first, second = u @ w @ vt, u @ w.T @ vt
    return [(first, t), (first, -t), (second, t), (second, -t)]


def _midpoints(origin_a, dirs_a, origin_b, dirs_b):
    """Vectorised midpoint triangulation; returns points and both depths."""
    w0 = origin_a - origin_b
    cosine = np.einsum("ij,ij->i", dirs_a, dirs_b)
    d = dirs_a @ w0 if w0.ndim == 1 else np.einsum("ij,ij->i", dirs_a, w0)
    e = dirs_b @ w0 if w0.ndim == 1 else np.einsum("ij,ij->i", dirs_b, w0)
    with np.errstate(divide="ignore", invalid="ignore"):
        denominator = 1.0 - cosine * cosine
        depth_a = (cosine * e - d) / denominator
        depth_b = (e - cosine * d) / denominator
    points = 0.5 * ((origin_a + depth_a[:, None] * dirs_a) + (origin_b + depth_b[:, None] * dirs_b))
    return points, depth_a, depth_b


def _parallax(dirs_a: np.ndarray, dirs_b: np.ndarray) -> np.ndarray:
    cross = np.linalg.norm(np.cross(dirs_a, dirs_b), axis=1)
    return np.arctan2(cross, np.einsum("ij,ij->i", dirs_a, dirs_b))


def _two_view(
    rays_a: np.ndarray, rays_b: np.ndarray, config: InitConfig, rng: np.random.Generator
) -> Tuple[Pose, np.ndarray, np.ndarray, np.ndarray]:
    """Relative pose of two views, world frame at the first camera.

    Returns:
        World-from-camera pose of the second view, the triangulated points,
        a mask of well triangulated tracks and their parallax angles (rad).
    """
    count = len(rays_a)
    threshold = np.sin(np.radians(config.epipolar_threshold_deg))
    best, best_inliers = None, None
    for _ in range(config.ransac_iterations):
        sample = rng.choice(count, 8, replace=False)
        essential = essential_from_rays(rays_a[sample], rays_b[sample])
        inliers = epipolar_errors(essential, rays_a, rays_b) < threshold
        if best_inliers is None or inliers.sum() > best_inliers.sum():
            best, best_inliers = essential, inliers
    if best_inliers.sum() >= 8:
        best = essential_from_rays(rays_a[best_inliers], rays_b[best_inliers])
        best_inliers = epipolar_errors(best, rays_a, rays_b) < threshold

    min_parallax = np.radians(config.min_point_parallax_deg)
    chosen = None
    for rotation, translation in decompose_essential(best):
        center_b = -rotation.T @ translation
        dirs_b = rays_b @ rotation
        points, depth_a, depth_b = _midpoints(np.zeros(3), rays_a, center_b, dirs_b)
        parallax = _parallax(rays_a, dirs_b)
        good = best_inliers & (depth_a > 0) & (depth_b > 0) & (parallax > min_parallax)
        if chosen is None or good.sum() > chosen[2].sum():
            chosen = (Pose(rotation.T, center_b), points, good, parallax)
    pose_b, points, good, parallax = chosen
    # parallax over all epipolar inliers, including those too flat to triangulate
    return pose_b, points, good, np.where(best_inliers, parallax, np.nan)


def _unproject(view, indices: Sequence[int], rig: CameraRig) -> np.ndarray:
    uv = np.array([view.keypoints[k].uv for k in indices], dtype=float)
    return rig.cameras[0].unproject_many(uv)


def vision_only_init(
    atlas: Atlas,
    views: Sequence,
    tracks: Tracks,
    rig: CameraRig,
    config: InitConfig = None,
    solver: SolverConfig = None,
    preintegrations: Sequence[Optional[Preintegrated]] = None,
    seed: int = 0,
) -> VisionInitResult:
    """Build an up-to-scale map in the empty active map from monocular views.

    The first and last views give the relative pose and the initial points;
    the other views are localized with ray-based PnP; more tracks are
    triangulated and a bundle adjustment with the first pose and the
    first-to-last distance held fixed refines the result. Camera poses are
    converted to body poses with the rig extrinsics.

    Arguments:
        atlas: Atlas whose active map is empty.
        views: Objects with ``timestamp`` and ``keypoints``, in time order.
        tracks: Feature tracks, see :func:`build_tracks`.
        rig: The camera rig; only the first camera is used.
        config: Initialization settings.
        solver: Solver settings of the bundle adjustment.
        preintegrations: Optional IMU preintegration from the previous view,
            one per view, attached to the keyframes.
        seed: Seed of the RANSAC stages.

    Returns:
        Summary of the stage; the keyframes and points live in the active map.

    Raises:
        InsufficientParallaxException: If the views do not observe the scene
            from sufficiently different positions.
        InitializationFailedException: If too few tracks support the geometry.
        PreconditionException: If the active map is not empty.
    """
    config = config or InitConfig()
    solver = solver or SolverConfig()
    slam_map = atlas.active
    if slam_map.keyframes:
        raise PreconditionException("Vision-only initialization needs an empty active map.", {"map": slam_map.id})
    if len(views) < 2:
        raise InsufficientParallaxException("At least two views are needed.", {"views": len(views)})
    rng = np.random.default_rng(seed)
    last = len(views) - 1

    common = sorted(t for t, obs in tracks.items() if 0 in obs and last in obs)
    if len(common) < max(config.min_matches, 8):
        raise InitializationFailedException(
            "Not enough tracks shared by the reference views.", {"tracks": len(common)}
        )
    rays_a = _unproject(views[0], [tracks[t][0] for t in common], rig)
    rays_b = _unproject(views[last], [tracks[t][last] for t in common], rig)

    rotation_only = np.degrees(np.median(rotation_only_residuals(rays_a, rays_b)))
    if rotation_only < config.min_parallax_deg:
        raise InsufficientParallaxException(
            "Views are explained by a pure rotation.", {"parallax_deg": round(float(rotation_only), 4)}
        )

    pose_last, points, good, parallax = _two_view(rays_a, rays_b, config, rng)
    median_parallax = float(np.degrees(np.nanmedian(parallax))) if np.any(np.isfinite(parallax)) else 0.0
    if median_parallax < config.min_parallax_deg:
        raise InsufficientParallaxException(
            "Median parallax below the threshold.", {"parallax_deg": round(median_parallax, 4)}
        )
    if good.sum() < config.min_matches:
        raise InitializationFailedException(
            "Too few tracks triangulated from the reference views.", {"points": int(good.sum())}
        )

    positions: Dict[int, np.ndarray] = {t: points[i] for i, t in enumerate(common) if good[i]}
    camera_poses: Dict[int, Pose] = {0: Pose.identity(), last: pose_last}

    for v in range(1, last):
        observed = [t for t in positions if v in tracks[t]]
        if len(observed) < config.min_matches:
            continue
        rays = _unproject(views[v], [tracks[t][v] for t in observed], rig)
        try:
            solution = pnp_ransac(
                rays,
                np.array([positions[t] for t in observed]),
                min_inliers=config.min_matches // 2,
                threshold_deg=config.pnp_threshold_deg,
                iterations=config.ransac_iterations,
                rng=rng,
                config=solver,
            )
        except EstimationException as e:
            logger.debug("View %d not localized: %s", v, e)
            continue
        camera_poses[v] = solution.pose

    min_parallax = np.radians(config.min_point_parallax_deg)
    for t, obs in tracks.items():
        if t in positions:
            continue
        posed = sorted(v for v in obs if v in camera_poses)
        if len(posed) < 2:
            continue
        first, second = posed[0], posed[-1]
        pose_a, pose_b = camera_poses[first], camera_poses[second]
        dir_a = pose_a.rotation @ _unproject(views[first], [obs[first]], rig)[0]
        dir_b = pose_b.rotation @ _unproject(views[second], [obs[second]], rig)[0]
        point, depth_a, depth_b = _midpoints(
            pose_a.translation, dir_a[None, :], pose_b.translation, dir_b[None, :]
        )
        if depth_a[0] > 0 and depth_b[0] > 0 and _parallax(dir_a[None, :], dir_b[None, :])[0] > min_parallax:
            positions[t] = point[0]

    keyframe_ids = _populate(atlas, slam_map, views, tracks, rig, camera_poses, positions, preintegrations)

    root = keyframe_ids[0]
    problem = BundleAdjustment(slam_map, keyframe_ids, config=solver, inertial=False, gauge=root)
    problem.add_distance_prior(root, keyframe_ids[-1])
    result = problem.optimize(config.vision_iterations)
    problem.apply()
    remove_outliers(slam_map, problem, solver.huber_delta_2dof**2)
    rms = problem.reprojection_rms()
    logger.info(
        "Vision-only initialization: %d keyframes, %d points, parallax %.2f°, rms %.3f px",
        len(keyframe_ids),
        len(slam_map.points),
        median_parallax,
        rms,
    )
    return VisionInitResult(slam_map.id, keyframe_ids, median_parallax, result.chi2, rms)


def _populate(
    atlas: Atlas,
    slam_map: SlamMap,
    views: Sequence,
    tracks: Tracks,
    rig: CameraRig,
    camera_poses: Dict[int, Pose],
    positions: Dict[int, np.ndarray],
    preintegrations: Optional[Sequence[Optional[Preintegrated]]],
) -> List[int]:
    keyframe_of: Dict[int, int] = {}
    pending: Optional[Preintegrated] = None
    for v, view in enumerate(views):
        pre = preintegrations[v] if preintegrations is not None else None
        if pre is not None and pending is not None:
            pre = pending.merge(pre) if np.allclose(pending.bias, pre.bias) else pre
        if v not in camera_poses:
            # unlocalized views only carry their IMU interval forward
            pending = pre
            continue
        pending = None
        body = camera_poses[v].compose(rig.extrinsics[0])
        keyframe = Keyframe(atlas.new_keyframe_id(), view.timestamp, NavState(body), rig, view.keypoints, pre)
        if not keyframe_of:
            keyframe.preintegrated = None
        atlas.insert_keyframe(keyframe)
        keyframe_of[v] = keyframe.id

    for t, position in positions.items():
        observations = [(keyframe_of[v], k) for v, k in sorted(tracks[t].items()) if v in keyframe_of]
        if len(observations) < 2:
            continue
        first_kf, first_kp = observations[0]
        keypoint = slam_map.keyframes[first_kf].keypoints[first_kp]
        point = MapPoint(atlas.new_point_id(), position, keypoint.descriptor, first_kf, keypoint.landmark)
        slam_map.add_point(point)
        for keyframe_id, index in observations:
            slam_map.add_observation(point.id, keyframe_id, index, update=False)
    for keyframe_id in keyframe_of.values():
        slam_map.update_connections(keyframe_id)
    for point in slam_map.points.values():
        point.update_descriptor(slam_map.keyframes)
    return list(keyframe_of.values())


def _inertial_keyframes(slam_map: SlamMap) -> List[Keyframe]:
    ordered = slam_map.ordered_keyframes()
    if len(ordered) < 4:
        raise PreconditionException(
            "Inertial initialization needs at least three IMU intervals.", {"keyframes": len(ordered)}
        )
    for keyframe in ordered[1:]:
        if keyframe.preintegrated is None:
            raise PreconditionException(
                "Keyframe has no preintegrated IMU measurements.", {"keyframe": keyframe.id}
            )
    return ordered


def _whitened_velocity_position(pre: Preintegrated) -> np.ndarray:
    covariance = pre.covariance[3:9, 3:9] + np.eye(6) * 1e-15
    information = np.linalg.inv(0.5 * (covariance + covariance.T))
    return np.linalg.cholesky(0.5 * (information + information.T)).T


def _seed_gravity(keyframes: List[Keyframe]) -> np.ndarray:
    """Gravity direction seed from the accumulated accelerometer readings."""
    up = np.zeros(3)
    for keyframe in keyframes[1:]:
        previous = keyframes[keyframes.index(keyframe) - 1]
        _, delta_v, _ = keyframe.preintegrated.corrected_deltas(np.zeros(6))
        up += previous.pose.rotation @ delta_v
    if np.linalg.norm(up) < 1e-9:
        return np.eye(3)
    return rotation_between(np.array([0.0, 0.0, 1.0]), up)


def _seed_scale_velocities(
    keyframes: List[Keyframe],
    rotations: List[np.ndarray],
    positions: np.ndarray,
    offsets: np.ndarray,
    gravity: np.ndarray,
    fixed_scale: bool,
) -> Tuple[float, np.ndarray]:
    """Weighted least-squares seed of the scale and metric velocities at zero bias."""
    n = len(keyframes)
    columns = 3 * n + (0 if fixed_scale else 1)
    base = 0 if fixed_scale else 1
    rows, rhs = [], []
    for j in range(1, n):
        i = j - 1
        pre = keyframes[j].preintegrated
        dt = pre.delta_time
        _, delta_v, delta_p = pre.corrected_deltas(np.zeros(6))
        rt = rotations[i].T
        block = np.zeros((6, columns))
        target = np.zeros(6)
        block[0:3, base + 3 * i : base + 3 * i + 3] = -rt
        block[0:3, base + 3 * j : base + 3 * j + 3] = rt
        target[0:3] = delta_v + rt @ gravity * dt
        block[3:6, base + 3 * i : base + 3 * i + 3] = -rt * dt
        moved = rt @ (positions[j] - positions[i])
        target[3:6] = delta_p - rt @ (offsets[j] - offsets[i] - 0.5 * gravity * dt * dt)
        if fixed_scale:
            target[3:6] -= moved
        else:
            block[3:6, 0] = moved
        whiten = _whitened_velocity_position(pre)
        rows.append(whiten @ block)
        rhs.append(whiten @ target)
    solution, *_ = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)
    scale = 1.0 if fixed_scale else float(solution[0])
    velocities = solution[base:].reshape(n, 3)
    if not np.isfinite(scale) or scale <= 1e-6:
        # fall back to finite differences at unit scale
        scale = 1.0
        times = np.array([kf.timestamp for kf in keyframes])
        velocities = np.gradient(positions, times, axis=0)
    return scale, velocities


def inertial_only_map(
    slam_map: SlamMap,
    config: InitConfig = None,
    solver: SolverConfig = None,
    fixed_scale: bool = False,
    apply: bool = True,
) -> InertialInitState:
    """MAP estimate of scale, gravity direction, shared bias and velocities.

    The visual trajectory is held constant; body positions follow
    ``s·p̄ + o`` with ``p̄`` the camera centers and ``o`` the metric lever arm.
    Besides the inertial residuals, a prior keeps the bias within the range
    IMU biases may take.

    Arguments:
        slam_map: Map with at least four keyframes linked by preintegrations.
        config: Bias prior, iteration count and acceptance gate.
        solver: Damping schedule.
        fixed_scale: Keep the scale at one, for maps with metric points.
        apply: Scale and rotate the map to the solution, set the biases,
            velocities and repeat the preintegrations.

    Returns:
        The estimated state with the scale uncertainty.

    Raises:
        NoConvergenceException: If the solver does not converge.
        InitializationFailedException: If the problem is degenerate or the
            scale is too uncertain.
        PreconditionException: If the map lacks keyframes or preintegrations.
    """
    config = config or InitConfig()
    solver = solver or SolverConfig()
    keyframes = _inertial_keyframes(slam_map)

    rotations = [kf.pose.rotation for kf in keyframes]
    anchors = [_camera_anchor(kf) for kf in keyframes]
    positions = np.array([position for position, _ in anchors])
    offsets = np.array([offset for _, offset in anchors])

    r_wg = _seed_gravity(keyframes)
    scale, velocities = _seed_scale_velocities(
        keyframes, rotations, positions, offsets, r_wg @ GRAVITY_INERTIAL, fixed_scale
    )

    graph = FactorGraph()
    graph.add_variable("scale", VariableKind.SCALE, scale, fixed=fixed_scale)
    graph.add_variable("gravity", VariableKind.GRAVITY, r_wg)
    graph.add_variable("bias", VariableKind.BIAS, np.zeros(6))
    for index, keyframe in enumerate(keyframes):
        graph.add_variable(("velocity", keyframe.id), VariableKind.VELOCITY, velocities[index] / scale)
    for j in range(1, len(keyframes)):
        i = j - 1
        graph.add_factor(
            ScaledInertialFactor(
                "scale",
                "gravity",
                "bias",
                ("velocity", keyframes[i].id),
                ("velocity", keyframes[j].id),
                rotations[i],
                rotations[j],
                positions[i],
                positions[j],
                offsets[i],
                offsets[j],
                keyframes[j].preintegrated,
                GRAVITY_INERTIAL,
            )
        )
    graph.add_factor(
        BiasPriorFactor(
            "bias", np.zeros(6), bias_prior_information(config.bias_prior_gyro, config.bias_prior_accel)
        )
    )

    try:
        result = optimize(graph, solver, max_iterations=config.inertial_iterations, use_schur=False)
        scale_std = None if fixed_scale else float(np.sqrt(marginal_covariance(graph, ["scale"])[0, 0]))
    except SingularSystemException as e:
        raise InitializationFailedException(
            "Inertial-only problem is degenerate.", {"map": slam_map.id, **e.context}
        ) from None
    if not result.converged:
        raise NoConvergenceException(
            "Inertial-only optimization did not converge.", {"chi2": result.chi2, "iterations": result.iterations}
        )
    if scale_std is not None and scale_std > config.max_scale_std:
        raise InitializationFailedException(
            "Scale is not observable from the motion.", {"scale": graph.value("scale"), "std": scale_std}
        )

    state = InertialInitState(
        graph.value("scale"),
        graph.value("gravity"),
        graph.value("bias"),
        {kf.id: np.array(graph.value(("velocity", kf.id))) for kf in keyframes},
        scale_std,
        result.chi2,
        result.iterations,
    )
    logger.info(
        "Inertial-only initialization of map %d: s=%.4f (std %s), bias %s",
        slam_map.id,
        state.scale,
        "fixed" if scale_std is None else f"{scale_std:.4f}",
        np.round(state.bias, 5).tolist(),
    )
    if apply:
        apply_inertial_init(slam_map, state)
    return state


def _camera_anchor(keyframe: Keyframe) -> Tuple[np.ndarray, np.ndarray]:
    """Position of the first camera and the body offset from it, ``p_b = p_c + o``.

    Scaling a reconstruction moves camera centres; the offset is metric.
    """
    camera = keyframe.camera_pose(0)
    return camera.translation, camera.rotation @ keyframe.rig.extrinsics[0].translation


def reintegrate_map(slam_map: SlamMap):
    """Repeat every preintegration around the bias of the keyframe it starts at."""
    for keyframe in slam_map.keyframes.values():
        if keyframe.preintegrated is None or keyframe.previous_id not in slam_map.keyframes:
            continue
        bias = slam_map.keyframes[keyframe.previous_id].state.bias
        keyframe.preintegrated = keyframe.preintegrated.reintegrate(bias)


def apply_inertial_init(slam_map: SlamMap, state: InertialInitState):
    """Scale the map, rotate it so z opposes gravity and set velocities and biases."""
    r_gw = state.gravity_rotation.T
    s = state.scale
    for keyframe in slam_map.keyframes.values():
        camera = keyframe.camera_pose(0)
        body = Pose(camera.rotation, s * camera.translation).compose(keyframe.rig.extrinsics[0])
        keyframe.state.pose = Pose(r_gw @ body.rotation, r_gw @ body.translation)
        velocity = state.velocities.get(keyframe.id)
        if velocity is not None:
            keyframe.state.velocity = r_gw @ (s * velocity)
        keyframe.state.bias = state.bias
    for point in slam_map.points.values():
        point.position = r_gw @ (s * point.position)
    reintegrate_map(slam_map)
    slam_map.imu_initialized = True
    last = max(kf.timestamp for kf in slam_map.keyframes.values())
    slam_map.imu_init_time = last
    slam_map.last_scale_refine_time = last
    slam_map.vi_ba_stage = 0


def joint_vi_init(
    slam_map: SlamMap, config: InitConfig = None, solver: SolverConfig = None
) -> OptimizeResult:
    """Joint visual-inertial bundle adjustment with one bias shared by all keyframes.

    The bias prior of the inertial-only step is kept. Biases are written back
    and the preintegrations repeated around them.

    Raises:
        SingularSystemException: If the problem is not constrained.
        PreconditionException: If the inertial parameters are not initialized.
    """
    config = config or InitConfig()
    if not slam_map.imu_initialized:
        raise PreconditionException("Joint initialization needs the inertial-only estimate.", {"map": slam_map.id})
    ordered = [kf.id for kf in slam_map.ordered_keyframes()]
    problem = BundleAdjustment(
        slam_map,
        ordered,
        config=solver,
        inertial=True,
        shared_bias=True,
        bias_prior=bias_prior_information(config.bias_prior_gyro, config.bias_prior_accel),
        gauge=ordered[0],
    )
    result = problem.optimize()
    problem.apply()
    reintegrate_map(slam_map)
    logger.info("Joint visual-inertial initialization of map %d: chi2 %.6g -> %.6g", slam_map.id, result.initial_chi2, result.chi2)
    return result


def scale_gravity_refine(
    slam_map: SlamMap,
    solver: SolverConfig = None,
    gate: float = 1e-3,
    fixed_scale: bool = False,
) -> Tuple[float, np.ndarray]:
    """Re-estimate only scale and gravity direction over all keyframes.

    Biases and velocities keep the values estimated by mapping. The map is
    corrected when the scale change exceeds ``gate`` or gravity moved.

    Returns:
        ``(s, R_wg)``; ``(1, I)`` when the motion does not constrain them.
    """
    keyframes = [kf for kf in slam_map.ordered_keyframes()]
    graph = FactorGraph()
    graph.add_variable("scale", VariableKind.SCALE, 1.0, fixed=fixed_scale)
    graph.add_variable("gravity", VariableKind.GRAVITY, np.eye(3))
    for previous, keyframe in zip(keyframes[:-1], keyframes[1:]):
        if keyframe.preintegrated is None or keyframe.previous_id != previous.id:
            continue
        for kf in (previous, keyframe):
            if ("velocity", kf.id) not in graph:
                graph.add_variable(("velocity", kf.id), VariableKind.VELOCITY, kf.state.velocity, fixed=True)
                graph.add_variable(("bias", kf.id), VariableKind.BIAS, kf.state.bias, fixed=True)
        (position_i, offset_i), (position_j, offset_j) = _camera_anchor(previous), _camera_anchor(keyframe)
        graph.add_factor(
            ScaledInertialFactor(
                "scale",
                "gravity",
                ("bias", previous.id),
                ("velocity", previous.id),
                ("velocity", keyframe.id),
                previous.pose.rotation,
                keyframe.pose.rotation,
                position_i,
                position_j,
                offset_i,
                offset_j,
                keyframe.preintegrated,
                GRAVITY_INERTIAL,
            )
        )
    if not graph.factors:
        return 1.0, np.eye(3)
    try:
        optimize(graph, solver, use_schur=False)
    except SingularSystemException:
        logger.warning("Scale refinement of map %d is degenerate, keeping the map", slam_map.id)
        return 1.0, np.eye(3)

    scale, r_wg = graph.value("scale"), graph.value("gravity")
    angle = float(np.linalg.norm(log_so3(r_wg)))
    if abs(1.0 - scale) > gate or angle > 1e-6:
        slam_map.transform(SimTransform(scale, r_wg.T, np.zeros(3)))
        reintegrate_map(slam_map)
    logger.info("Scale refinement of map %d: s=%.5f, gravity correction %.4f°", slam_map.id, scale, np.degrees(angle))
    return scale, r_wg


def stereo_inertial_init(
    slam_map: SlamMap, config: InitConfig = None, solver: SolverConfig = None, apply: bool = True
) -> InertialInitState:
    """Inertial-only initialization of a stereo map, the scale fixed to one.

    Raises:
        PreconditionException: For maps built from a single camera.
    """
    if not slam_map.keyframes or not next(iter(slam_map.keyframes.values())).rig.is_stereo:
        raise PreconditionException("Stereo-inertial initialization needs a stereo map.", {"map": slam_map.id})
    return inertial_only_map(slam_map, config, solver, fixed_scale=True, apply=apply)


class InitEvent:
    """One completed stage of the initialization schedule."""

    def __init__(self, timestamp: float, stage: InitStage, scale: float = 1.0, chi2: float = 0.0):
        self.timestamp = timestamp
        self.stage = InitStage(stage)
        self.scale = scale
        """Scale correction applied by the stage."""
        self.chi2 = chi2

    def __repr__(self) -> str:
        return f"<InitEvent {self.stage.value} t={self.timestamp:.2f} s={self.scale:.5f}>"


class InertialInitializer:
    """Runs the initialization of an inertial map and its refinement schedule.

    Listeners are called with every :class:`InitEvent` and the map, after the
    stage has been applied.
    """

    history: List[InitEvent]
    listeners: List[Callable[[InitEvent, SlamMap], None]]

    def __init__(self, config: InitConfig = None, solver: SolverConfig = None, stereo: bool = False):
        self.config = config or InitConfig()
        self.solver = solver or SolverConfig()
        self.stereo = stereo
        self.history = []
        self.listeners = []

    def _record(self, slam_map: SlamMap, timestamp: float, stage: InitStage, scale: float = 1.0, chi2: float = 0.0):
        event = InitEvent(timestamp, stage, scale, chi2)
        self.history.append(event)
        for listener in self.listeners:
            listener(event, slam_map)

    def ready(self, slam_map: SlamMap) -> bool:
        """True once the map spans the initialization window."""
        if slam_map.imu_initialized or len(slam_map.keyframes) < 4:
            return False
        times = [kf.timestamp for kf in slam_map.keyframes.values()]
        return max(times) - min(times) >= self.config.window_seconds - 1e-9

    def initialize(self, slam_map: SlamMap) -> InertialInitState:
        """Inertial-only estimate followed by the joint refinement.

        Raises:
            InitializationFailedException: If the inertial-only problem is
                degenerate, unobservable or singular in the joint step.
            NoConvergenceException: If the inertial-only problem does not converge.
        """
        timestamp = max(kf.timestamp for kf in slam_map.keyframes.values())
        if self.stereo:
            state = stereo_inertial_init(slam_map, self.config, self.solver)
        else:
            state = inertial_only_map(slam_map, self.config, self.solver)
        self._record(slam_map, timestamp, InitStage.INERTIAL_ONLY, state.scale, state.chi2)
        try:
            result = joint_vi_init(slam_map, self.config, self.solver)
        except SingularSystemException as e:
            raise InitializationFailedException("Joint refinement is singular.", e.context) from None
        self._record(slam_map, timestamp, InitStage.JOINT, 1.0, result.chi2)
        return state

    def step(self, slam_map: SlamMap, timestamp: float) -> List[InitStage]:
        """Run the refinements that are due at ``timestamp``.

        Full visual-inertial BA runs at the configured times after
        initialization; a stage that raises or does not converge is retried at
        the next call, and the map is mature once the last one converged.
        Scale and gravity refinement runs periodically while the map is small
        and young.
        """
        if not slam_map.inertial or not slam_map.imu_initialized:
            return []
        done = []
        elapsed = timestamp - slam_map.imu_init_time
        times = self.config.vi_ba_times
        if slam_map.vi_ba_stage < len(times) and elapsed >= times[slam_map.vi_ba_stage]:
            prior = bias_prior_information(self.config.bias_prior_gyro, self.config.bias_prior_accel)
            try:
                result = global_bundle_adjustment(slam_map, self.solver, bias_prior=prior)
            except (SingularSystemException, PreconditionException) as e:
                logger.warning("Scheduled VI BA of map %d failed: %s", slam_map.id, e)
            else:
                reintegrate_map(slam_map)
                self._record(slam_map, timestamp, InitStage.VI_BA, 1.0, result.chi2)
                done.append(InitStage.VI_BA)
                if result.converged:
                    slam_map.vi_ba_stage += 1
                else:
                    logger.warning("Scheduled VI BA of map %d did not converge", slam_map.id)
            if slam_map.vi_ba_stage == len(times):
                slam_map.mature = True
                logger.info("Map %d is mature", slam_map.id)

        due = (
            slam_map.last_scale_refine_time is None
            or timestamp - slam_map.last_scale_refine_time >= self.config.scale_refine_period
        )
        small = len(slam_map.keyframes) <= self.config.scale_refine_max_keyframes
        young = elapsed <= self.config.scale_refine_max_seconds
        if due and small and young and InitStage.VI_BA not in done:
            scale, _ = scale_gravity_refine(
                slam_map, self.solver, self.config.scale_refine_gate, fixed_scale=self.stereo
            )
            slam_map.last_scale_refine_time = timestamp
            self._record(slam_map, timestamp, InitStage.SCALE_REFINE, scale)
            done.append(InitStage.SCALE_REFINE)
        return done

    def __repr__(self) -> str:
        return f"<InertialInitializer stereo={self.stereo} events={len(self.history)}>"
