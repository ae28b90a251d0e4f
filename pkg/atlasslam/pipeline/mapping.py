"""Local mapping: new map points, sliding-window bundle adjustment and keyframe culling."""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..camera import CameraRig, triangulate, triangulate_rays
from ..config import Association, RunConfig
from ..exceptions import DegenerateParallaxException, GeometryException, PreconditionException, SingularSystemException
from ..manifold import Pose
from ..models import Atlas, Keyframe, Keypoint, MapPoint, SlamMap
from ..optimizer import BundleAdjustment, inertial_chain, remove_outliers
from ..placerec import match_descriptors

logger = logging.getLogger(__name__)

NEIGHBOURS = 10
"""Keyframes searched for monocular triangulation."""


def _reprojection_ok(rig: CameraRig, pose: Pose, point: np.ndarray, keypoint: Keypoint, gate: float) -> bool:
    camera = rig.cameras[keypoint.camera]
    uv, valid = camera.project_many(rig.world_to_camera(pose, point[None, :], keypoint.camera))
    return bool(valid[0]) and np.linalg.norm(uv[0] - keypoint.uv) <= gate * keypoint.sigma


def pair_keypoints(
    first: Sequence[Tuple[int, Keypoint]],
    second: Sequence[Tuple[int, Keypoint]],
    association: Association,
    max_distance: int = 50,
    ratio: float = 0.75,
) -> List[Tuple[int, int]]:
    """Match two sets of ``(index, keypoint)`` by landmark or by descriptor."""
    if not first or not second:
        return []
    if Association(association) is Association.ORACLE:
        by_landmark = {kp.landmark: index for index, kp in second if kp.landmark is not None}
        return [(index, by_landmark[kp.landmark]) for index, kp in first if kp.landmark in by_landmark]
    query = np.stack([kp.descriptor for _, kp in first])
    train = np.stack([kp.descriptor for _, kp in second])
    return [(first[q][0], second[t][0]) for q, t, _ in match_descriptors(query, train, max_distance, ratio)]


def stereo_points(
    keypoints: Sequence[Keypoint],
    rig: CameraRig,
    pose: Pose,
    config: RunConfig,
    used: Sequence[int] = (),
) -> List[Tuple[int, int, np.ndarray]]:
    """Triangulate left/right keypoint pairs of one stereo frame.

    Returns:
        ``(left index, right index, world point)`` for the pairs passing the
        reprojection gate and the depth limit.
    """
    if not rig.is_stereo:
        return []
    blocked = set(used)
    left = [(i, kp) for i, kp in enumerate(keypoints) if kp.camera == 0 and i not in blocked]
    right = [(i, kp) for i, kp in enumerate(keypoints) if kp.camera == 1 and i not in blocked]
    pairs = pair_keypoints(
        left, right, config.tracking.association, config.placerec.hamming_threshold, config.placerec.ratio
    )
    gate = 2.0 * config.solver.huber_delta_2dof * config.solver.sigma_px
    result = []
    for l, r in pairs:
        sigma = max(keypoints[l].sigma, keypoints[r].sigma)
        try:
            point = triangulate(rig, pose, keypoints[l].uv, keypoints[r].uv, gate * sigma)
        except DegenerateParallaxException:
            continue
        if np.linalg.norm(rig.world_to_camera(pose, point[None, :], 0)[0]) > config.tracking.max_stereo_depth:
            continue
        result.append((l, r, point))
    return result


def _known_landmarks(slam_map: SlamMap) -> Dict[int, int]:
    return {p.landmark: p.id for p in slam_map.points.values() if p.landmark is not None}


def create_stereo_points(atlas: Atlas, slam_map: SlamMap, keyframe: Keyframe, config: RunConfig) -> List[int]:
    """New map points from the unmatched stereo pairs of a keyframe."""
    known = _known_landmarks(slam_map) if config.tracking.association is Association.ORACLE else {}
    created = []
    for l, r, position in stereo_points(keyframe.keypoints, keyframe.rig, keyframe.pose, config, keyframe.points):
        keypoint = keyframe.keypoints[l]
        if keypoint.landmark is not None and keypoint.landmark in known:
            continue
        point = slam_map.add_point(
            MapPoint(atlas.new_point_id(), position, keypoint.descriptor, keyframe.id, keypoint.landmark)
        )
        slam_map.add_observation(point.id, keyframe.id, l, update=False)
        slam_map.add_observation(point.id, keyframe.id, r, update=False)
        created.append(point.id)
    slam_map.update_connections(keyframe.id)
    return created


def create_monocular_points(
    atlas: Atlas, slam_map: SlamMap, keyframe: Keyframe, config: RunConfig, neighbours: Sequence[int]
) -> List[int]:
    """New map points triangulated between the first camera of a keyframe and its neighbours."""
    known = _known_landmarks(slam_map) if config.tracking.association is Association.ORACLE else {}
    gate = 2.0 * config.solver.huber_delta_2dof * config.solver.sigma_px
    used = set(keyframe.points)
    created = []
    for other_id in neighbours:
        other = slam_map.keyframes[other_id]
        baseline = np.linalg.norm(keyframe.camera_pose(0).translation - other.camera_pose(0).translation)
        if baseline < 1e-3:
            continue
        mine = [(i, kp) for i, kp in enumerate(keyframe.keypoints) if kp.camera == 0 and i not in used]
        theirs = [(i, kp) for i, kp in enumerate(other.keypoints) if kp.camera == 0 and i not in other.points]
        pairs = pair_keypoints(
            mine, theirs, config.tracking.association, config.placerec.hamming_threshold, config.placerec.ratio
        )
        for a, b in pairs:
            keypoint = keyframe.keypoints[a]
            if keypoint.landmark is not None and keypoint.landmark in known:
                continue
            origin_a, direction_a = keyframe.rig.world_ray(keyframe.pose, keypoint.uv, 0)
            origin_b, direction_b = other.rig.world_ray(other.pose, other.keypoints[b].uv, 0)
            try:
                position = triangulate_rays(origin_a, direction_a, origin_b, direction_b, config.init.min_parallax_deg)
            except DegenerateParallaxException:
                continue
            if not (
                _reprojection_ok(keyframe.rig, keyframe.pose, position, keypoint, gate)
                and _reprojection_ok(other.rig, other.pose, position, other.keypoints[b], gate)
            ):
                continue
            point = slam_map.add_point(
                MapPoint(atlas.new_point_id(), position, keypoint.descriptor, keyframe.id, keypoint.landmark)
            )
            slam_map.add_observation(point.id, keyframe.id, a, update=False)
            slam_map.add_observation(point.id, other_id, b, update=False)
            used.add(a)
            if keypoint.landmark is not None:
                known[keypoint.landmark] = point.id
            created.append(point.id)
        slam_map.update_connections(other_id)
    slam_map.update_connections(keyframe.id)
    return created


def redundant(slam_map: SlamMap, keyframe: Keyframe, observers: int, share: float) -> bool:
    """True if ``share`` of the keyframe's points are seen by ``observers`` other keyframes."""
    point_ids = [pid for pid in keyframe.point_ids() if pid in slam_map.points]
    if not point_ids:
        return False
    covered = sum(1 for pid in point_ids if len(slam_map.points[pid].observers() - {keyframe.id}) >= observers)
    return covered >= share * len(point_ids)


class LocalMapper:
    """Processes every new keyframe of the active map.

    Recently created points that are not re-observed are culled, new points
    are triangulated, a local bundle adjustment refines the window around
    the keyframe and redundant keyframes are removed.
    """

    culled: Dict[int, Tuple[int, Pose]]
    """Erased keyframe id to its parent id and its pose relative to that parent."""

    def __init__(self, atlas: Atlas, config: RunConfig):
        self.atlas = atlas
        self.config = config
        self.culled = {}
        self._recent: Dict[int, int] = {}
        self._count = 0

    def process(self, slam_map: SlamMap, keyframe: Keyframe):
        """Run one local mapping step for a keyframe inserted into ``slam_map``."""
        self._count += 1
        self.cull_points(slam_map)
        created = []
        if keyframe.rig.is_stereo:
            created += create_stereo_points(self.atlas, slam_map, keyframe, self.config)
        neighbours = keyframe.best_covisibles(NEIGHBOURS)
        if not neighbours:
            neighbours = [kf.id for kf in slam_map.ordered_keyframes()[-NEIGHBOURS - 1 : -1]]
        created += create_monocular_points(self.atlas, slam_map, keyframe, self.config, neighbours)
        for point_id in created:
            self._recent[point_id] = self._count
        logger.debug("Keyframe %d: %d new points", keyframe.id, len(created))
        if len(slam_map.keyframes) >= 2:
            self.local_bundle_adjustment(slam_map, keyframe)
        self.cull_keyframes(slam_map, keyframe)

    def cull_points(self, slam_map: SlamMap):
        """Erase recent points seen by too few keyframes two keyframes after their creation."""
        needed = 3 if self.config.mode.stereo else 2
        erased = 0
        for point_id, created in list(self._recent.items()):
            point = slam_map.points.get(point_id)
            if point is None:
                del self._recent[point_id]
            elif self._count - created >= 2 and point.num_observers < needed:
                slam_map.erase_point(point_id)
                del self._recent[point_id]
                erased += 1
            elif self._count - created >= 3:
                del self._recent[point_id]
        if erased:
            logger.debug("Map %d: culled %d recent points", slam_map.id, erased)

    def window(self, slam_map: SlamMap, keyframe: Keyframe) -> Tuple[List[int], List[int]]:
        """Free keyframes of the local bundle adjustment and explicitly fixed ones."""
        size = self.config.tracking.local_window
        if slam_map.inertial and slam_map.imu_initialized:
            free = inertial_chain(slam_map, keyframe.id, size)
            boundary = slam_map.keyframes[free[0]].previous_id
            return free, [boundary] if boundary is not None else []
        return [keyframe.id] + keyframe.best_covisibles(size - 1), []

    def local_bundle_adjustment(self, slam_map: SlamMap, keyframe: Keyframe):
        free, fixed = self.window(slam_map, keyframe)
        limit = self.config.map.local_ba_max_fixed
        try:
            problem = BundleAdjustment(slam_map, free, fixed, config=self.config.solver, max_observers=limit)
            if not problem.fixed_ids:
                ordered = sorted(problem.free_ids, key=lambda kf: (slam_map.keyframes[kf].timestamp, kf))
                problem = BundleAdjustment(
                    slam_map, free, fixed, config=self.config.solver, gauge=ordered[0], max_observers=limit
                )
                if not problem.inertial and not keyframe.rig.is_stereo and len(ordered) > 1:
                    problem.add_distance_prior(ordered[0], ordered[-1])
            problem.optimize()
        except (SingularSystemException, PreconditionException, GeometryException) as e:
            logger.warning("Local BA of map %d around keyframe %d skipped: %s", slam_map.id, keyframe.id, e)
            return
        problem.apply()
        remove_outliers(slam_map, problem, self.config.solver.huber_delta_2dof**2)

    def cull_keyframes(self, slam_map: SlamMap, keyframe: Keyframe) -> List[int]:
        """Erase covisible keyframes whose points are observed elsewhere.

        The root, the new keyframe and its predecessor are kept. Inertial maps
        are culled only once initialized, and only where the merged
        preintegration stays short.
        """
        if slam_map.inertial and not slam_map.imu_initialized:
            return []
        config = self.config.map
        ordered = slam_map.ordered_keyframes()
        protected = {slam_map.root_id, keyframe.id}
        if len(ordered) >= 2:
            protected.add(ordered[-2].id)
        if keyframe.previous_id is not None:
            protected.add(keyframe.previous_id)
        culled = []
        for candidate_id in keyframe.best_covisibles():
            candidate = slam_map.keyframes.get(candidate_id)
            if candidate is None or candidate_id in protected or candidate.parent_id is None:
                continue
            if slam_map.inertial:
                before = slam_map.keyframes.get(candidate.previous_id)
                after = slam_map.keyframes.get(candidate.next_id)
                if before is None or after is None or after.timestamp - before.timestamp > config.culling_max_gap:
                    continue
            if not redundant(slam_map, candidate, config.culling_observers, config.culling_redundancy):
                continue
            parent = slam_map.keyframes[candidate.parent_id]
            self.culled[candidate_id] = (parent.id, parent.pose.inverse().compose(candidate.pose))
            slam_map.erase_keyframe(candidate_id)
            culled.append(candidate_id)
        if culled:
            logger.info("Map %d: culled keyframes %s", slam_map.id, culled)
        return culled

    def resolve(self, keyframe_id: int) -> Tuple[Optional[int], Pose]:
        """Live keyframe a possibly culled keyframe is attached to, with the relative pose."""
        relative = Pose.identity()
        seen = set()
        while keyframe_id in self.culled and keyframe_id not in seen:
            seen.add(keyframe_id)
            parent, offset = self.culled[keyframe_id]
            relative = offset.compose(relative)
            keyframe_id = parent
        if self.atlas.map_of(keyframe_id) is None:
            return None, relative
        return keyframe_id, relative

    def reset(self):
        self._recent = {}

    def __repr__(self) -> str:
        return f"<LocalMapper keyframes={self._count} culled={len(self.culled)}>"
