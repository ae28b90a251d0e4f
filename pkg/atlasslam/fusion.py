"""Map merging, loop closing and the optimizations that weld places together.

Both operations share the same steps: move one side of the recognized place
into the frame of the other, fuse duplicated points, optimize a welding window
around the two keyframes and propagate the correction to the rest of the map
with a pose graph over the essential graph.
"""

import csv
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Set, Tuple, Union

import numpy as np

from .config import FusionConfig, PlaceRecConfig, SolverConfig
from .exceptions import DisconnectedGraphException, PreconditionException
from .manifold import Pose, SimTransform
from .models import Atlas, SlamMap
from .optimizer import BundleAdjustment, global_bundle_adjustment, inertial_chain, remove_outliers
from .placerec import PlaceHypothesis, search_by_projection
from .solver import (
    FactorGraph,
    OptimizeResult,
    PoseGraphFactor,
    SimilarityGraphFactor,
    VariableKind,
    optimize,
)

logger = logging.getLogger(__name__)

Edge = Tuple[int, int, Union[Pose, SimTransform]]


class FusionEvent:
    """A merge or loop closure, as written to the event log."""

    timestamp: float
    """Timestamp of the active keyframe ``K_a``."""

    kind: str
    """``merge`` or ``loop``."""

    active_keyframe_id: int
    matched_keyframe_id: int

    keyframes: int
    """Keyframes of the welding window."""

    chi2_before: float
    chi2_after: float

    global_ba: Optional[bool]
    """Whether a global BA followed; ``None`` for merges."""

    def __init__(
        self,
        timestamp: float,
        kind: str,
        active_keyframe_id: int,
        matched_keyframe_id: int,
        keyframes: int,
        chi2_before: float,
        chi2_after: float,
        global_ba: Optional[bool] = None,
    ):
        self.timestamp = timestamp
        self.kind = kind
        self.active_keyframe_id = active_keyframe_id
        self.matched_keyframe_id = matched_keyframe_id
        self.keyframes = keyframes
        self.chi2_before = chi2_before
        self.chi2_after = chi2_after
        self.global_ba = global_ba

    def row(self) -> List:
        global_ba = "" if self.global_ba is None else int(self.global_ba)
        return [
            f"{self.timestamp:.9f}",
            self.kind,
            self.active_keyframe_id,
            self.matched_keyframe_id,
            self.keyframes,
            f"{self.chi2_before:.6g}",
            f"{self.chi2_after:.6g}",
            global_ba,
        ]

    def __repr__(self) -> str:
        return (
            f"<FusionEvent {self.kind} t={self.timestamp:.3f} K_a={self.active_keyframe_id} "
            f"K_m={self.matched_keyframe_id}>"
        )


class EventLog:
    """Ordered record of the merges and loop closures of a run."""

    HEADER = ["timestamp", "type", "active_keyframe", "matched_keyframe", "keyframes", "chi2_before", "chi2_after", "global_ba"]

    def __init__(self):
        self.events: List[FusionEvent] = []

    def append(self, event: FusionEvent):
        self.events.append(event)

    def count(self, kind: str) -> int:
        return sum(1 for e in self.events if e.kind == kind)

    def write_csv(self, path: Union[str, Path]):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(self.HEADER)
            writer.writerows(event.row() for event in self.events)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def __repr__(self) -> str:
        return f"<EventLog merges={self.count('merge')} loops={self.count('loop')}>"


class WeldingWindow:
    """Keyframes around a matched pair that are optimized together.

    Keyframes outside the window observing its points join the optimization
    with their pose fixed; together with :attr:`fixed_ids` they fix the gauge.
    """

    map_id: int
    active_ids: List[int]
    """``K_a`` side, free."""

    matched_ids: List[int]
    """``K_m`` side, free unless listed in :attr:`fixed_ids`."""

    fixed_ids: Set[int]
    """Keyframes of the window held constant."""

    inertial: bool
    """Optimize velocities and biases along the temporal chains."""

    def __init__(
        self,
        slam_map: SlamMap,
        active_ids: Iterable[int],
        matched_ids: Iterable[int],
        fixed_ids: Iterable[int] = (),
        inertial: bool = False,
    ):
        self.map = slam_map
        self.map_id = slam_map.id
        self.active_ids = list(dict.fromkeys(active_ids))
        self.matched_ids = [kf for kf in dict.fromkeys(matched_ids) if kf not in self.active_ids]
        self.fixed_ids = set(fixed_ids)
        self.inertial = inertial

    @property
    def keyframe_ids(self) -> List[int]:
        return self.active_ids + self.matched_ids

    @property
    def free_ids(self) -> List[int]:
        return [kf for kf in self.keyframe_ids if kf not in self.fixed_ids]

    def point_ids(self) -> Set[int]:
        points = set()
        for keyframe_id in self.keyframe_ids:
            points |= self.map.keyframes[keyframe_id].point_ids()
        return points & set(self.map.points)

    def __repr__(self) -> str:
        return (
            f"<WeldingWindow map={self.map_id} active={len(self.active_ids)} "
            f"matched={len(self.matched_ids)} fixed={len(self.fixed_ids)}>"
        )


def build_welding_window(
    slam_map: SlamMap,
    active_keyframe_id: int,
    matched_keyframe_id: int,
    inertial: bool = False,
    chain_length: int = 5,
    covisibles: int = None,
) -> WeldingWindow:
    """Welding window around ``K_a`` and ``K_m``.

    Visual windows hold both keyframes and their best covisibles. Inertial
    windows hold the last temporal keyframes of both chains plus one earlier
    keyframe on each side; on the matched side that keyframe stays fixed.
    """
    if inertial:
        active = inertial_chain(slam_map, active_keyframe_id, chain_length + 1)
        matched = inertial_chain(slam_map, matched_keyframe_id, chain_length + 1)
        fixed = {matched[0]} if len(matched) > chain_length else set()
        return WeldingWindow(slam_map, active, matched, fixed, inertial=True)

    covisibles = slam_map.config.best_covisibles if covisibles is None else covisibles
    active = [active_keyframe_id] + slam_map.keyframes[active_keyframe_id].best_covisibles(covisibles)
    matched = [matched_keyframe_id] + slam_map.keyframes[matched_keyframe_id].best_covisibles(covisibles)
    return WeldingWindow(slam_map, active, [kf for kf in matched if kf not in active])


def welding_ba(
    window: WeldingWindow, solver: SolverConfig = None, max_iterations: int = None
) -> OptimizeResult:
    """Local bundle adjustment of a welding window.

    Observers outside the window enter with a fixed pose. When nothing is
    fixed, the matched side is held constant instead.

    Raises:
        SingularSystemException: If the window is not constrained.
    """
    slam_map = window.map
    problem = BundleAdjustment(
        slam_map,
        window.free_ids,
        fixed=window.fixed_ids,
        config=solver,
        inertial=window.inertial,
        inertial_ids=window.keyframe_ids,
    )
    if not problem.fixed_ids:
        window.fixed_ids |= set(window.matched_ids)
        problem = BundleAdjustment(
            slam_map,
            window.free_ids,
            fixed=window.fixed_ids,
            config=solver,
            inertial=window.inertial,
            inertial_ids=window.keyframe_ids,
        )
    result = problem.optimize(max_iterations)
    problem.apply()
    remove_outliers(slam_map, problem, problem.config.huber_delta_2dof**2)
    logger.info("Welding BA in map %d: chi2 %.6g -> %.6g", slam_map.id, result.initial_chi2, result.chi2)
    return result


class PoseGraphProblem:
    """Essential-graph pose graph with the welding keyframes held constant.

    Edge measurements are the relative poses of the ``reference`` snapshot,
    taken before the correction; edges listed in ``current`` are measured
    from the current poses instead. Node values start from the current poses.
    """

    nodes: List[int]
    edges: List[Edge]
    fixed: Set[int]
    similarity: bool
    """Sim(3) nodes, for maps whose scale drifts."""

    def __init__(
        self,
        slam_map: SlamMap,
        fixed: Iterable[int],
        reference: Dict[int, Pose] = None,
        similarity: bool = False,
        current: Iterable[Edge] = (),
    ):
        self.map = slam_map
        self.nodes = list(slam_map.keyframes)
        self.fixed = {kf for kf in fixed if kf in slam_map.keyframes}
        self.similarity = similarity
        reference = reference or {kf: slam_map.keyframes[kf].pose for kf in self.nodes}
        current = {tuple(sorted(edge)) for edge in current}

        self.edges = []
        for a, b in sorted(slam_map.essential_edges()):
            if (a, b) in current:
                relative = slam_map.keyframes[a].pose.inverse().compose(slam_map.keyframes[b].pose)
            else:
                relative = reference[a].inverse().compose(reference[b])
            if similarity:
                relative = SimTransform.from_pose(relative)
            self.edges.append((a, b, relative))

    def validate(self):
        """Raises:
        DisconnectedGraphException: If the essential graph has several components.
        PreconditionException: If no node is fixed.
        """
        if not self.map.is_connected([(a, b) for a, b, _ in self.edges]):
            raise DisconnectedGraphException("Essential graph is disconnected.", {"map": self.map.id})
        if not self.fixed:
            raise PreconditionException("Pose graph needs at least one fixed keyframe.", {"map": self.map.id})

    def graph(self) -> FactorGraph:
        graph = FactorGraph()
        for keyframe_id in self.nodes:
            pose = self.map.keyframes[keyframe_id].pose
            if self.similarity:
                graph.add_variable(keyframe_id, VariableKind.SIM3, SimTransform.from_pose(pose), keyframe_id in self.fixed)
            else:
                graph.add_variable(keyframe_id, VariableKind.POSE, pose, keyframe_id in self.fixed)
        for a, b, measurement in self.edges:
            factor = SimilarityGraphFactor(a, b, measurement) if self.similarity else PoseGraphFactor(a, b, measurement)
            graph.add_factor(factor)
        return graph

    def __repr__(self) -> str:
        kind = "Sim3" if self.similarity else "SE3"
        return f"<PoseGraphProblem {kind} nodes={len(self.nodes)} edges={len(self.edges)} fixed={len(self.fixed)}>"


def optimize_essential_graph(
    problem: PoseGraphProblem,
    solver: SolverConfig = None,
    max_iterations: int = 20,
    skip_points: Set[int] = frozenset(),
) -> Dict[int, Pose]:
    """Optimize the pose graph and correct the map.

    Each point moves rigidly with its reference keyframe; velocities rotate
    with their keyframe.

    Arguments:
        problem: The pose graph.
        solver: Damping schedule.
        max_iterations: Iteration limit.
        skip_points: Points already placed by the caller.

    Returns:
        The corrected world-from-body poses by keyframe id.

    Raises:
        DisconnectedGraphException: If the essential graph is disconnected.
    """
    problem.validate()
    graph = problem.graph()
    result = optimize(graph, solver, max_iterations=max_iterations, use_schur=False)
    slam_map = problem.map

    corrections: Dict[int, SimTransform] = {}
    corrected: Dict[int, Pose] = {}
    for keyframe_id in problem.nodes:
        keyframe = slam_map.keyframes[keyframe_id]
        value = graph.value(keyframe_id)
        new = value if problem.similarity else SimTransform.from_pose(value)
        corrections[keyframe_id] = new.compose(SimTransform.from_pose(keyframe.pose).inverse())
        corrected[keyframe_id] = new.as_pose()

    for point_id, point in slam_map.points.items():
        if point_id in skip_points:
            continue
        reference = point.reference_id if point.reference_id in corrections else min(point.observers(), default=None)
        if reference in corrections and reference not in problem.fixed:
            point.position = corrections[reference].act(point.position)
    for keyframe_id, pose in corrected.items():
        state = slam_map.keyframes[keyframe_id].state
        state.velocity = corrections[keyframe_id].rotation @ state.velocity
        state.pose = pose
    logger.info(
        "Pose graph of map %d (%d nodes, %d edges): chi2 %.6g -> %.6g",
        slam_map.id,
        len(problem.nodes),
        len(problem.edges),
        result.initial_chi2,
        result.chi2,
    )
    return corrected


def _fuse_window_points(
    slam_map: SlamMap,
    hypothesis: PlaceHypothesis,
    keyframe_ids: Iterable[int],
    config: PlaceRecConfig,
    radius: float,
) -> int:
    """Fuse window points with the points seen by keyframes of the active side.

    Window points are kept; their duplicates are replaced.
    """
    window = hypothesis.window
    fused = 0
    touched = set()

    def associate(point_id: int, keyframe_id: int, index: int):
        nonlocal fused
        if point_id not in slam_map.points:
            return
        keyframe = slam_map.keyframes[keyframe_id]
        existing = keyframe.points.get(index)
        if existing == point_id:
            return
        if existing is not None and existing in slam_map.points:
            slam_map.fuse_points(point_id, existing)
            fused += 1
        elif keyframe_id not in slam_map.points[point_id].observers():
            slam_map.add_observation(point_id, keyframe_id, index, update=False)
            touched.add(keyframe_id)

    for point_id, index in hypothesis.matches.items():
        associate(point_id, hypothesis.active_keyframe_id, index)

    alive = np.array([int(p) in slam_map.points for p in window.point_ids], dtype=bool)
    point_ids = window.point_ids[alive]
    if len(point_ids):
        positions = np.array([slam_map.points[int(p)].position for p in point_ids])
        descriptors = np.array([slam_map.points[int(p)].descriptor for p in point_ids], dtype=np.uint8)
        for keyframe_id in keyframe_ids:
            keyframe = slam_map.keyframes[keyframe_id]
            found = search_by_projection(keyframe, positions, descriptors, radius, config.hamming_threshold)
            for row, index in found.items():
                associate(int(point_ids[row]), keyframe_id, index)

    for keyframe_id in touched:
        slam_map.update_connections(keyframe_id)
    for point_id in set(int(p) for p in window.point_ids) & set(slam_map.points):
        slam_map.points[point_id].update_descriptor(slam_map.keyframes)
    logger.debug("Fused %d duplicated points in map %d", fused, slam_map.id)
    return fused


def _reroot(slam_map: SlamMap, keyframe_id: int):
    """Make a keyframe the root of its spanning tree by reversing the path to the root."""
    path = [keyframe_id]
    while slam_map.keyframes[path[-1]].parent_id is not None:
        path.append(slam_map.keyframes[path[-1]].parent_id)
    for child, parent in zip(path[:-1], path[1:]):
        slam_map.keyframes[parent].children.discard(child)
        slam_map.keyframes[parent].parent_id = child
        slam_map.keyframes[child].children.add(parent)
    slam_map.keyframes[keyframe_id].parent_id = None


def _absorb(atlas: Atlas, target: SlamMap, source: SlamMap, anchor: int, attach_to: int):
    """Move every keyframe and point of ``source`` into ``target``.

    The spanning tree of ``source`` is re-rooted at ``anchor`` and hung below
    ``attach_to``. The last keyframe of ``source`` becomes the last of ``target``.
    """
    _reroot(source, anchor)
    for keyframe in source.keyframes.values():
        keyframe.map_id = target.id
        target.keyframes[keyframe.id] = keyframe
    target.points.update(source.points)
    source.keyframes[anchor].parent_id = attach_to
    target.keyframes[attach_to].children.add(anchor)
    if source.last_id is not None:
        target.last_id = source.last_id
    atlas.database.set_map(source.keyframes, target.id)
    del atlas.maps[source.id]
    atlas.active_id = target.id


def merge_maps(
    atlas: Atlas,
    hypothesis: PlaceHypothesis,
    fusion: FusionConfig = None,
    placerec: PlaceRecConfig = None,
    solver: SolverConfig = None,
    log: EventLog = None,
) -> int:
    """Merge the active map into the matched map and make the result active.

    The active map ``M_a`` is brought into the frame of the matched map ``M_m``
    with ``T_ma``, a similarity unless the active map is mature. Poses of
    ``M_m`` keyframes outside the welding window only change through the
    pose graph.

    Arguments:
        atlas: The atlas holding both maps.
        hypothesis: Accepted place hypothesis across two maps.
        fusion: Iteration counts and the point fusion radius.
        placerec: Matching thresholds for point fusion.
        solver: Damping schedule.
        log: Optional event log to append to.

    Returns:
        Id of the merged map.

    Raises:
        PreconditionException: If the hypothesis relates a map to itself, or
            an inertial active map is not initialized.
        SingularSystemException: If the welding BA is singular.
    """
    fusion = fusion or FusionConfig()
    placerec = placerec or PlaceRecConfig()
    if not hypothesis.is_merge:
        raise PreconditionException("Same-map hypotheses are loop closures.", {"map": hypothesis.active_map_id})
    active = atlas.maps[hypothesis.active_map_id]
    matched = atlas.maps[hypothesis.matched_map_id]
    if active.inertial and not active.imu_initialized:
        raise PreconditionException("Inertial maps merge once initialized.", {"map": active.id})

    transform = hypothesis.transform.inverse()
    if active.mature:
        transform = SimTransform(1.0, transform.rotation, transform.translation)
    active.transform(transform)
    logger.info("Merging map %d into map %d with %r", active.id, matched.id, transform)

    active_keyframe = hypothesis.active_keyframe_id
    active_side = set(active.keyframes)
    _absorb(atlas, matched, active, active_keyframe, hypothesis.matched_keyframe_id)
    matched.add_loop_edge(active_keyframe, hypothesis.matched_keyframe_id)

    inertial = matched.inertial and matched.imu_initialized and active.imu_initialized
    window = build_welding_window(
        matched, active_keyframe, hypothesis.matched_keyframe_id, inertial, fusion.temporal_keyframes
    )
    _fuse_window_points(
        matched,
        hypothesis,
        [kf for kf in window.active_ids if kf in active_side],
        placerec,
        fusion.point_fusion_px,
    )
    for keyframe_id in window.keyframe_ids:
        matched.update_connections(keyframe_id)

    reference = {kf: matched.keyframes[kf].pose for kf in matched.keyframes}
    chi2_before = _window_chi2(window, solver)
    result = welding_ba(window, solver, fusion.welding_iterations)
    similarity = not matched.inertial and not matched.keyframes[active_keyframe].rig.is_stereo
    problem = PoseGraphProblem(matched, window.keyframe_ids, reference, similarity)
    optimize_essential_graph(problem, solver, fusion.pose_graph_iterations, window.point_ids())

    if active.mature and not matched.mature and matched.imu_initialized:
        matched.mature = True
    matched.validate()
    if log is not None:
        log.append(
            FusionEvent(
                matched.keyframes[active_keyframe].timestamp,
                "merge",
                active_keyframe,
                hypothesis.matched_keyframe_id,
                len(window.keyframe_ids),
                chi2_before,
                result.chi2,
            )
        )
    logger.info("Merged into map %d: %d keyframes, %d points", matched.id, len(matched.keyframes), len(matched.points))
    return matched.id


def _window_chi2(window: WeldingWindow, solver: SolverConfig = None) -> float:
    problem = BundleAdjustment(
        window.map,
        window.free_ids or window.keyframe_ids,
        config=solver,
        inertial=window.inertial,
        inertial_ids=window.keyframe_ids,
    )
    return problem.graph.chi2()


def close_loop(
    slam_map: SlamMap,
    hypothesis: PlaceHypothesis,
    fusion: FusionConfig = None,
    placerec: PlaceRecConfig = None,
    solver: SolverConfig = None,
    log: EventLog = None,
) -> FusionEvent:
    """Correct the drift of a map from a loop between two of its keyframes.

    The window of ``K_a`` is moved by ``T_ma``, duplicated points are fused,
    a welding BA and a pose graph propagate the correction, and a global BA
    follows unless the inertial map is too large.
    The new loop edge is measured between the welded poses.

    Returns:
        The logged event.

    Raises:
        PreconditionException: If the hypothesis relates two different maps.
        DisconnectedGraphException: If the essential graph is disconnected.
    """
    fusion = fusion or FusionConfig()
    placerec = placerec or PlaceRecConfig()
    if hypothesis.is_merge or hypothesis.active_map_id != slam_map.id:
        raise PreconditionException("Loop closing needs a same-map hypothesis.", {"map": slam_map.id})

    active_keyframe = hypothesis.active_keyframe_id
    matched_keyframe = hypothesis.matched_keyframe_id
    reference = {kf: slam_map.keyframes[kf].pose for kf in slam_map.keyframes}
    matched_side = set(hypothesis.window.keyframe_ids)
    inertial = slam_map.inertial and slam_map.imu_initialized
    neighbours = slam_map.keyframes[active_keyframe].best_covisibles(slam_map.config.best_covisibles)
    if inertial:
        neighbours += inertial_chain(slam_map, active_keyframe, fusion.temporal_keyframes + 1)
    correction_ids = list(dict.fromkeys([active_keyframe] + [kf for kf in neighbours if kf not in matched_side]))
    window_points = set(int(p) for p in hypothesis.window.point_ids)
    moved = set()
    for keyframe_id in correction_ids:
        moved |= slam_map.keyframes[keyframe_id].point_ids()
    moved = (moved & set(slam_map.points)) - window_points
    slam_map.transform(hypothesis.transform.inverse(), correction_ids, moved)

    _fuse_window_points(slam_map, hypothesis, correction_ids, placerec, fusion.point_fusion_px)
    slam_map.add_loop_edge(active_keyframe, matched_keyframe)
    for keyframe_id in correction_ids:
        slam_map.update_connections(keyframe_id)

    window = build_welding_window(slam_map, active_keyframe, matched_keyframe, inertial, fusion.temporal_keyframes)
    chi2_before = _window_chi2(window, solver)
    result = welding_ba(window, solver, fusion.welding_iterations)

    similarity = not slam_map.inertial and not slam_map.keyframes[active_keyframe].rig.is_stereo
    fixed = set(window.keyframe_ids) | set(correction_ids)
    loop = (active_keyframe, matched_keyframe)
    problem = PoseGraphProblem(slam_map, fixed, reference, similarity, current=[loop])
    optimize_essential_graph(problem, solver, fusion.pose_graph_iterations, moved | window.point_ids())

    run_global = not (inertial and len(slam_map.keyframes) > fusion.global_ba_max_keyframes)
    if run_global:
        global_bundle_adjustment(slam_map, solver, fusion.global_ba_iterations)
    else:
        logger.warning(
            "Global BA skipped for map %d: %d keyframes above %d",
            slam_map.id,
            len(slam_map.keyframes),
            fusion.global_ba_max_keyframes,
        )
    slam_map.validate()
    event = FusionEvent(
        slam_map.keyframes[active_keyframe].timestamp,
        "loop",
        active_keyframe,
        matched_keyframe,
        len(window.keyframe_ids),
        chi2_before,
        result.chi2,
        run_global,
    )
    if log is not None:
        log.append(event)
    logger.info("Closed loop %d-%d in map %d", active_keyframe, matched_keyframe, slam_map.id)
    return event
