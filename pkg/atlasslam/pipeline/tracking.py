"""Per-frame tracking against the active map and relocalization."""

import logging
from typing import Dict, List, Optional, Tuple

import numpy as np

from .frame import Frame, ImuBuffer
from ..camera import pnp_ransac
from ..config import Association, RunConfig
from ..const import GRAVITY_INERTIAL
from ..exceptions import EstimationException, GeometryException, SingularSystemException
from ..imu import NavState
from ..manifold import Pose, exp_so3, log_so3, normalize_rotation
from ..models import Atlas, Keyframe, SlamMap
from ..placerec import build_local_window, match_descriptors, search_by_projection
from ..solver import (
    BiasPriorFactor,
    BiasWalkFactor,
    FactorGraph,
    InertialFactor,
    PosePriorFactor,
    PriorFactor,
    ReprojectionFactor,
    RobustKernel,
    VariableKind,
    marginal_covariance,
    optimize,
    reprojection_chi2,
)

logger = logging.getLogger(__name__)

OUTLIER_CHI2 = 5.991
"""95% of a χ² with 2 degrees of freedom."""

OUTLIER_ROUNDS = 3

_PREVIOUS, _CURRENT = "previous", "current"


def _keys(name: str):
    return ("pose", name), ("velocity", name), ("bias", name)


def _one_per_point(found: List[Tuple[int, int, int]]) -> List[Tuple[int, int, int]]:
    """Keep the closest query of every matched point."""
    best: Dict[int, Tuple[int, int, int]] = {}
    for match in found:
        if match[1] not in best or match[2] < best[match[1]][2]:
            best[match[1]] = match
    return sorted(best.values())


class LocalPoints:
    """Map points around the reference keyframe, the candidates for association."""

    def __init__(self, slam_map: SlamMap, point_ids: List[int]):
        self.point_ids = np.array(point_ids, dtype=np.int64)
        points = [slam_map.points[pid] for pid in point_ids]
        self.positions = np.array([p.position for p in points]).reshape(-1, 3)
        self.descriptors = (
            np.stack([p.descriptor for p in points]) if points else np.zeros((0, 32), dtype=np.uint8)
        )
        self.landmarks = {p.landmark: p.id for p in points if p.landmark is not None}

    def __len__(self) -> int:
        return len(self.point_ids)


class Tracker:
    """Estimates the state of every frame from the active map.

    The pose is predicted with the IMU once the map has inertial parameters,
    with a constant-velocity model otherwise. Map points of the local map are
    associated by projection and the state is refined with map points held
    fixed: pose-only for visual tracking, the last two frames with their
    inertial link for visual-inertial tracking. When projection finds too few
    points the search is widened once, then the frame is registered from
    descriptor matches against the local map.
    """

    last_frame: Optional[Frame]
    reference_id: Optional[int]
    """Keyframe the current frame is tracked against, the last one created."""

    def __init__(self, atlas: Atlas, config: RunConfig, imu: ImuBuffer = None):
        self.atlas = atlas
        self.config = config
        self.imu = imu if imu is not None else ImuBuffer()
        self.rng = np.random.default_rng(config.seed)
        self.kernel = RobustKernel.huber(config.solver.huber_delta_2dof)
        self.reset()

    def reset(self):
        self.last_frame = None
        self.reference_id = None
        self._rates: Optional[Tuple[np.ndarray, np.ndarray]] = None
        self._last_tracked = False
        self._last_is_keyframe = False
        self._prior: Optional[np.ndarray] = None
        self._last_keyframe_time: Optional[float] = None

    ### PREDICTION ###
    def _use_imu(self, slam_map: SlamMap) -> bool:
        return self.config.mode.inertial and slam_map.inertial and slam_map.imu_initialized and len(self.imu) > 0

    def predict(self, frame: Frame, slam_map: SlamMap):
        """Set the predicted state of a frame from the last tracked one."""
        last = self.last_frame
        if last is None:
            return
        dt = frame.timestamp - last.timestamp
        if self._use_imu(slam_map):
            pre = self.imu.preintegrate(last.timestamp, frame.timestamp, last.state.bias)
            if pre is not None:
                frame.preintegrated = pre
                frame.state = self.integrate(last.state, pre)
                return
        pose = last.pose
        if dt > 0:
            rotation, translation = np.eye(3), np.zeros(3)
            if self._rates is not None:
                omega, velocity = self._rates
                rotation, translation = exp_so3(omega * dt), velocity * dt
            turn = self._gyro_rotation(last, frame)
            if turn is not None:
                rotation = turn
            pose = pose.compose(Pose(rotation, translation))
        frame.state = NavState(Pose(pose.rotation, pose.translation), last.state.velocity, last.state.gyro_bias, last.state.accel_bias)

    def _gyro_rotation(self, last: Frame, frame: Frame) -> Optional[np.ndarray]:
        """Body rotation between two frames from the gyroscope, before the IMU is initialized."""
        if not self.config.mode.inertial or len(self.imu) == 0:
            return None
        pre = self.imu.preintegrate(last.timestamp, frame.timestamp, last.state.bias)
        return None if pre is None else pre.delta_rotation

    @staticmethod
    def integrate(state: NavState, pre, gravity: np.ndarray = GRAVITY_INERTIAL) -> NavState:
        """Propagate a state through a preintegrated interval."""
        dt = pre.delta_time
        rotation_i = state.pose.rotation
        rotation = normalize_rotation(rotation_i @ pre.delta_rotation)
        velocity = state.velocity + gravity * dt + rotation_i @ pre.delta_velocity
        position = (
            state.pose.translation + state.velocity * dt + 0.5 * gravity * dt * dt + rotation_i @ pre.delta_position
        )
        return NavState(Pose(rotation, position), velocity, state.gyro_bias, state.accel_bias)

    def _update_rates(self, frame: Frame, tracked: bool):
        """Constant-velocity model from two consecutive tracked frames, cleared otherwise."""
        last = self.last_frame
        dt = frame.timestamp - last.timestamp if last is not None else 0.0
        if not (tracked and self._last_tracked) or dt <= 0:
            self._rates = None
            return
        relative = last.pose.inverse().compose(frame.pose)
        self._rates = (log_so3(relative.rotation) / dt, relative.translation / dt)

    ### ASSOCIATION ###
    def reference(self, slam_map: SlamMap) -> Optional[Keyframe]:
        keyframe = slam_map.keyframes.get(self.reference_id)
        if keyframe is None and slam_map.last_id is not None:
            self.reference_id = slam_map.last_id
            keyframe = slam_map.keyframes[slam_map.last_id]
        return keyframe

    def local_points(self, slam_map: SlamMap) -> LocalPoints:
        """Points of the reference keyframe, its covisibles and the most recent keyframes."""
        window = self.config.tracking.local_window
        keyframe_ids: Dict[int, None] = {}
        reference = self.reference(slam_map)
        if reference is not None:
            keyframe_ids[reference.id] = None
            keyframe_ids.update(dict.fromkeys(reference.best_covisibles(window)))
        keyframe_ids.update(dict.fromkeys(kf.id for kf in slam_map.ordered_keyframes()[-window:]))
        point_ids: Dict[int, None] = {}
        for keyframe_id in keyframe_ids:
            for point_id in sorted(slam_map.keyframes[keyframe_id].point_ids()):
                if point_id in slam_map.points:
                    point_ids[point_id] = None
        return LocalPoints(slam_map, list(point_ids))

    def associate(self, frame: Frame, local: LocalPoints, radius: float) -> Dict[int, int]:
        """Keypoint index to map point id for the predicted pose."""
        if self.config.tracking.association is Association.ORACLE:
            matches = {}
            for index, keypoint in enumerate(frame.keypoints):
                point_id = local.landmarks.get(keypoint.landmark)
                if keypoint.landmark is not None and point_id is not None and point_id not in matches.values():
                    matches[index] = point_id
            return matches
        found = search_by_projection(
            frame, local.positions, local.descriptors, radius, self.config.placerec.hamming_threshold
        )
        return {keypoint: int(local.point_ids[row]) for row, keypoint in found.items()}

    ### OPTIMIZATION ###
    def _add_observations(self, graph: FactorGraph, frame: Frame, slam_map: SlamMap, matches: Dict[int, int]):
        pose = ("pose", _CURRENT)
        factors = []
        for index, point_id in sorted(matches.items()):
            key = ("point", point_id)
            if key not in graph:
                graph.add_variable(key, VariableKind.POINT, slam_map.points[point_id].position, fixed=True)
            keypoint = frame.keypoints[index]
            factor = ReprojectionFactor(
                pose,
                key,
                frame.rig.cameras[keypoint.camera],
                frame.rig.extrinsics[keypoint.camera],
                keypoint.uv,
                self.config.solver.sigma_px * keypoint.sigma,
                self.kernel,
            )
            graph.add_factor(factor)
            factors.append((index, factor))
        return factors

    def _inliers(self, graph: FactorGraph, factors) -> Dict[int, bool]:
        chi2 = reprojection_chi2(graph, [factor for _, factor in factors])
        return {index: bool(error <= OUTLIER_CHI2) for (index, _), error in zip(factors, chi2)}

    def _visual_graph(self, frame: Frame, slam_map: SlamMap, matches: Dict[int, int]):
        graph = FactorGraph()
        graph.add_variable(("pose", _CURRENT), VariableKind.POSE, frame.pose)
        return graph, self._add_observations(graph, frame, slam_map, matches)

    def _inertial_graph(self, frame: Frame, slam_map: SlamMap, matches: Dict[int, int]):
        last = self.last_frame
        previous_fixed = self._last_is_keyframe or self._prior is None
        graph = FactorGraph()
        pose_p, velocity_p, bias_p = _keys(_PREVIOUS)
        pose_c, velocity_c, bias_c = _keys(_CURRENT)
        graph.add_variable(pose_p, VariableKind.POSE, last.pose, fixed=previous_fixed)
        graph.add_variable(velocity_p, VariableKind.VELOCITY, last.state.velocity, fixed=previous_fixed)
        graph.add_variable(bias_p, VariableKind.BIAS, last.state.bias, fixed=previous_fixed)
        graph.add_variable(pose_c, VariableKind.POSE, frame.pose)
        graph.add_variable(velocity_c, VariableKind.VELOCITY, frame.state.velocity)
        graph.add_variable(bias_c, VariableKind.BIAS, frame.state.bias)
        if not previous_fixed:
            info = self._prior
            graph.add_factor(PosePriorFactor(pose_p, last.pose, info[0:6, 0:6]))
            graph.add_factor(PriorFactor(velocity_p, last.state.velocity, info[6:9, 6:9]))
            graph.add_factor(BiasPriorFactor(bias_p, last.state.bias, info[9:15, 9:15]))
        pre = frame.preintegrated
        graph.add_factor(InertialFactor(pose_p, velocity_p, bias_p, pose_c, velocity_c, pre, GRAVITY_INERTIAL))
        graph.add_factor(BiasWalkFactor(bias_p, bias_c, pre.bias_walk_information()))
        return graph, self._add_observations(graph, frame, slam_map, matches)

    def optimize(self, frame: Frame, slam_map: SlamMap, matches: Dict[int, int]) -> Dict[int, int]:
        """Refine the frame state with map points held fixed, dropping outliers.

        Returns:
            The inlier matches.
        """
        inertial = self._use_imu(slam_map) and frame.preintegrated is not None and self.last_frame is not None
        build = self._inertial_graph if inertial else self._visual_graph
        matches = dict(matches)
        graph = None
        for _ in range(OUTLIER_ROUNDS):
            if not inertial and len(matches) < 4:
                return {}
            graph, factors = build(frame, slam_map, matches)
            try:
                optimize(graph, self.config.solver, max_iterations=10, use_schur=False)
            except (EstimationException, GeometryException) as e:
                logger.debug("Frame t=%.3f: pose optimization failed: %s", frame.timestamp, e)
                return {}
            inliers = self._inliers(graph, factors)
            self._write(frame, graph, inertial)
            if all(inliers.values()):
                break
            matches = {index: matches[index] for index, ok in inliers.items() if ok}
        if inertial and graph is not None:
            self._marginalize(graph)
        return matches

    def _write(self, frame: Frame, graph: FactorGraph, inertial: bool):
        pose_c, velocity_c, bias_c = _keys(_CURRENT)
        frame.state.pose = graph.value(pose_c)
        if inertial:
            frame.state.velocity = np.array(graph.value(velocity_c))
            frame.state.bias = np.array(graph.value(bias_c))

    def _marginalize(self, graph: FactorGraph):
        try:
            covariance = marginal_covariance(graph, list(_keys(_CURRENT)))
            information = np.linalg.inv(covariance)
        except (SingularSystemException, np.linalg.LinAlgError):
            self._prior = None
            return
        blocks = np.zeros_like(information)
        for a, b in ((0, 6), (6, 9), (9, 15)):
            blocks[a:b, a:b] = 0.5 * (information[a:b, a:b] + information[a:b, a:b].T)
        self._prior = blocks

    ### FRAME ###
    def track(self, frame: Frame, slam_map: SlamMap, wide: bool = False) -> int:
        """Predict, associate and optimize one frame.

        Arguments:
            frame: The new frame.
            slam_map: The active map.
            wide: Search map points in the wide window used while recently lost.

        Returns:
            The number of tracked map points.
        """
        self.predict(frame, slam_map)
        radius = self.config.tracking.lost_search_radius_px if wide else self.config.tracking.search_radius_px
        required = self.config.map.min_tracked_points
        by_descriptor = self.config.tracking.association is Association.DESCRIPTOR
        local = self.local_points(slam_map)
        matches = self.associate(frame, local, radius)
        if by_descriptor and len(matches) < required:
            matches = self.associate(frame, local, 2.0 * radius)
        if len(matches) >= required or not self._use_imu(slam_map):
            matches = self.optimize(frame, slam_map, matches)
        else:
            # dead reckoning, the prediction stands
            self._prior = None
        if by_descriptor and len(matches) < required:
            matches = self._match_local_map(frame, slam_map, local) or matches
        frame.matches = matches
        logger.debug("Frame t=%.3f: %d/%d local points tracked", frame.timestamp, len(matches), len(local))
        self.accept(frame, keyframe=False, tracked=len(matches) >= required)
        return frame.tracked

    def _match_local_map(self, frame: Frame, slam_map: SlamMap, local: LocalPoints) -> Dict[int, int]:
        """Matches of the local map found without a pose prior.

        Descriptors of the first camera are matched against the local points
        and the pose is registered from them. The frame state is left
        untouched when this does not track enough points.
        """
        indices = [k for k, kp in enumerate(frame.keypoints) if kp.camera == 0]
        if not indices or not len(local):
            return {}
        descriptors = np.stack([frame.keypoints[k].descriptor for k in indices])
        config = self.config.placerec
        found = _one_per_point(match_descriptors(descriptors, local.descriptors, config.hamming_threshold, config.ratio))
        if len(found) < config.min_relocalization_inliers:
            return {}
        before = frame.state.copy()
        try:
            matches = self._register(frame, slam_map, found, indices, local.positions, local.point_ids)
        except EstimationException as e:
            logger.debug("Frame t=%.3f: no pose from descriptor matches: %s", frame.timestamp, e.detail)
            matches = {}
        if len(matches) < self.config.map.min_tracked_points:
            frame.state = before
            return {}
        logger.debug("Frame t=%.3f: registered from %d descriptor matches", frame.timestamp, len(found))
        return matches

    def _register(
        self,
        frame: Frame,
        slam_map: SlamMap,
        found: List[Tuple[int, int, int]],
        indices: List[int],
        positions: np.ndarray,
        point_ids: np.ndarray,
    ) -> Dict[int, int]:
        """Pose of a frame from descriptor matches, then tracking of the local map from it.

        Arguments:
            found: ``(query, row, distance)`` matches, queries index ``indices``
                and rows index ``positions`` and ``point_ids``.

        Raises:
            InsufficientInliersException: If PnP finds no supported pose.
        """
        config = self.config.placerec
        uv = np.array([frame.keypoints[indices[q]].uv for q, _, _ in found])
        rays = frame.rig.cameras[0].unproject_many(uv)
        points = np.array([positions[t] for _, t, _ in found])
        solution = pnp_ransac(
            rays,
            points,
            min_inliers=config.min_relocalization_inliers,
            threshold_deg=config.pnp_threshold_deg,
            iterations=config.pnp_iterations,
            rng=self.rng,
            config=self.config.solver,
        )
        frame.state.pose = solution.pose.compose(frame.rig.extrinsics[0])
        matches = {indices[q]: int(point_ids[t]) for (q, t, _), ok in zip(found, solution.inliers) if ok}
        matches = self.optimize(frame, slam_map, matches)
        local = self.local_points(slam_map)
        merged = self.associate(frame, local, self.config.tracking.search_radius_px)
        merged.update(matches)
        return self.optimize(frame, slam_map, merged)

    def accept(self, frame: Frame, keyframe: bool, tracked: bool = True):
        """Make a frame the last one, the origin of the next prediction."""
        self._update_rates(frame, tracked)
        self.last_frame = frame
        self._last_tracked = tracked
        self._last_is_keyframe = keyframe

    def need_keyframe(self, frame: Frame, slam_map: SlamMap) -> bool:
        reference = self.reference(slam_map)
        if reference is None:
            return True
        config = self.config.tracking
        last_time = self._last_keyframe_time if self._last_keyframe_time is not None else reference.timestamp
        if frame.timestamp - last_time > config.keyframe_max_interval:
            return True
        return frame.tracked < config.keyframe_tracked_ratio * len(reference.points)

    def create_keyframe(self, frame: Frame, slam_map: SlamMap) -> Keyframe:
        """Insert the frame into the active map as a keyframe observing its matches."""
        previous = slam_map.keyframes.get(slam_map.last_id)
        preintegrated = None
        if slam_map.inertial and previous is not None:
            preintegrated = self.imu.preintegrate(previous.timestamp, frame.timestamp, previous.state.bias)
        keyframe = Keyframe(
            self.atlas.new_keyframe_id(), frame.timestamp, frame.state.copy(), frame.rig, frame.keypoints, preintegrated
        )
        keyframe.points = {index: pid for index, pid in frame.matches.items() if pid in slam_map.points}
        self.atlas.insert_keyframe(keyframe, slam_map.id)
        self.anchor(keyframe)
        logger.info("Inserted %r", keyframe)
        return keyframe

    def anchor(self, keyframe: Keyframe):
        """Continue tracking from a keyframe, e.g. the last one of a fresh map."""
        self.reference_id = keyframe.id
        self._last_keyframe_time = keyframe.timestamp
        if self.last_frame is None or self.last_frame.timestamp != keyframe.timestamp:
            frame = Frame(keyframe.timestamp, keyframe.keypoints, keyframe.rig, state=keyframe.state.copy())
            frame.matches = dict(keyframe.points)
            self.last_frame = frame
        self._last_is_keyframe = True
        self._last_tracked = True
        self._prior = None

    def correct(self, keyframe: Keyframe, before: NavState, initialized: bool = False):
        """Carry a map correction applied to a keyframe over to the last frame.

        Arguments:
            keyframe: The keyframe after mapping, fusion or initialization.
            before: Its state when it was created.
            initialized: The map received its inertial parameters meanwhile.
        """
        last = self.last_frame
        if last is None:
            return
        if last.timestamp == keyframe.timestamp:
            last.state = keyframe.state.copy()
        else:
            delta = keyframe.pose.compose(before.pose.inverse())
            last.state.pose = delta.compose(last.pose)
            last.state.velocity = delta.rotation @ last.state.velocity
            if initialized:
                last.state.velocity = keyframe.state.velocity.copy()
                last.state.bias = keyframe.state.bias
        if initialized:
            self._rates = None
        self._prior = None
        self._last_is_keyframe = True

    ### RELOCALIZATION ###
    def relocalize(self, frame: Frame) -> Optional[SlamMap]:
        """Localize a frame in any map of the atlas.

        Candidates come from the keyframe database; their local windows are
        matched by descriptor, a ray-based PnP gives the pose and projection
        tracking confirms it.

        Returns:
            The map the frame was localized in, or ``None``.
        """
        config = self.config.placerec
        indices = [k for k, kp in enumerate(frame.keypoints) if kp.camera == 0]
        if len(indices) < config.min_relocalization_inliers:
            return None
        descriptors = np.stack([frame.keypoints[k].descriptor for k in indices])
        for candidate in self.atlas.database.relocalization_candidates(frame.descriptors(), config.candidates):
            slam_map = self.atlas.map_of(candidate)
            if slam_map is None:
                continue
            window = build_local_window(slam_map, candidate, self.atlas.config.best_covisibles)
            found = match_descriptors(descriptors, window.descriptors, config.hamming_threshold, config.ratio)
            if len(found) < config.min_relocalization_inliers:
                continue
            reference_id = self.reference_id
            self.reference_id = candidate
            frame.state = NavState()
            try:
                matches = self._register(frame, slam_map, found, indices, window.positions, window.point_ids)
            except EstimationException as e:
                logger.debug("Relocalization against keyframe %d failed: %s", candidate, e.detail)
                self.reference_id = reference_id
                continue
            if len(matches) >= self.config.map.min_tracked_points:
                frame.matches = matches
                self._last_keyframe_time = None
                # the previous frame was lost, no velocity to carry over
                self._last_tracked = False
                self.accept(frame, keyframe=False)
                self._prior = None
                logger.info("Relocalized t=%.3f in map %d with %d points", frame.timestamp, slam_map.id, len(matches))
                return slam_map
            self.reference_id = reference_id
        return None

    def __repr__(self) -> str:
        return f"<Tracker reference={self.reference_id}>"
