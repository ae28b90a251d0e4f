"""Factor graphs assembled from maps: bundle adjustment with write-back."""

import logging
from typing import Dict, Iterable, List, Optional, Set, Tuple

import numpy as np

from .config import SolverConfig
from .const import GRAVITY_INERTIAL
from .exceptions import PreconditionException
from .models import SlamMap
from .solver import (
    BiasPriorFactor,
    BiasWalkFactor,
    DistancePriorFactor,
    FactorGraph,
    InertialFactor,
    OptimizeResult,
    ReprojectionFactor,
    RobustKernel,
    VariableKind,
    optimize,
    reprojection_chi2,
)

logger = logging.getLogger(__name__)

SHARED_BIAS = ("bias", "shared")


def pose_key(keyframe_id: int):
    return ("pose", keyframe_id)


def velocity_key(keyframe_id: int):
    return ("velocity", keyframe_id)


def bias_key(keyframe_id: int):
    return ("bias", keyframe_id)


def point_key(point_id: int):
    return ("point", point_id)


def bias_prior_information(gyro_variance: float, accel_variance: float) -> np.ndarray:
    """Diagonal information of the bias prior, ordered ``(b_g, b_a)``."""
    return np.diag([1.0 / gyro_variance] * 3 + [1.0 / accel_variance] * 3)


class BundleAdjustment:
    """Bundle adjustment over a set of keyframes of one map.

    Keyframes in ``free`` are optimized. Keyframes in ``fixed``, and the
    other keyframes observing a point of the window, enter with their pose
    held constant; ``max_observers`` keeps only the observers sharing the most
    points. Points seen fewer than twice inside the problem are held
    constant too. In inertial mode consecutive keyframes of the temporal chain
    are linked by their preintegrated measurements, and biases either follow
    a random walk or share one variable. ``inertial_ids`` restricts the
    temporal links to pairs inside that set.
    """

    graph: FactorGraph
    """The assembled problem."""

    free_ids: List[int]
    """Keyframes whose state is optimized."""

    fixed_ids: Set[int]
    """Keyframes entering the problem with a constant pose."""

    point_ids: Set[int]
    """Map points of the problem."""

    def __init__(
        self,
        slam_map: SlamMap,
        free: Iterable[int],
        fixed: Iterable[int] = (),
        config: SolverConfig = None,
        inertial: bool = None,
        shared_bias: bool = False,
        bias_prior: Optional[np.ndarray] = None,
        gravity: np.ndarray = None,
        fix_points: bool = False,
        include_observers: bool = True,
        gauge: Optional[int] = None,
        inertial_ids: Optional[Iterable[int]] = None,
        max_observers: Optional[int] = None,
    ):
        self.map = slam_map
        self.gauge = gauge
        self.inertial_ids = None if inertial_ids is None else set(inertial_ids)
        self.config = config or SolverConfig()
        self.inertial = slam_map.inertial and slam_map.imu_initialized if inertial is None else inertial
        self.shared_bias = shared_bias
        self.gravity = GRAVITY_INERTIAL if gravity is None else np.asarray(gravity, dtype=float)
        self.kernel = RobustKernel.huber(self.config.huber_delta_2dof)

        fixed = {kf for kf in fixed if kf in slam_map.keyframes}
        self.free_ids = [kf for kf in dict.fromkeys(free) if kf in slam_map.keyframes and kf not in fixed]
        if not self.free_ids:
            raise PreconditionException("Bundle adjustment needs at least one free keyframe.")

        self.point_ids = set()
        for keyframe_id in self.free_ids:
            self.point_ids |= slam_map.keyframes[keyframe_id].point_ids() & set(slam_map.points)
        if include_observers:
            fixed |= self._observers(max_observers)
        self.fixed_ids = {kf for kf in fixed if kf in slam_map.keyframes}

        self.graph = FactorGraph()
        self._observation_factors: List[Tuple[ReprojectionFactor, int, int, int]] = []
        self._add_poses()
        self._add_points(fix_points)
        if self.inertial:
            self._add_inertial(bias_prior)

    def _observers(self, limit: Optional[int]) -> Set[int]:
        """Other keyframes observing the points, those sharing the most points first."""
        shared: Dict[int, int] = {}
        free = set(self.free_ids)
        for point_id in self.point_ids:
            for keyframe_id in self.map.points[point_id].observers() - free:
                shared[keyframe_id] = shared.get(keyframe_id, 0) + 1
        ranked = sorted(shared, key=lambda kf: (-shared[kf], kf))
        return set(ranked if limit is None else ranked[:limit])

    @property
    def keyframe_ids(self) -> List[int]:
        return self.free_ids + sorted(self.fixed_ids)

    def _add_poses(self):
        for keyframe_id in self.keyframe_ids:
            keyframe = self.map.keyframes[keyframe_id]
            self.graph.add_variable(
                pose_key(keyframe_id),
                VariableKind.POSE,
                keyframe.pose,
                fixed=keyframe_id in self.fixed_ids or keyframe_id == self.gauge,
            )

    def _add_points(self, fix_points: bool):
        included = set(self.keyframe_ids)
        for point_id in sorted(self.point_ids):
            point = self.map.points[point_id]
            observations = [(kf, i) for kf, i in sorted(point.observations) if kf in included]
            self.graph.add_variable(
                point_key(point_id),
                VariableKind.POINT,
                point.position,
                fixed=fix_points or len(observations) < 2,
            )
            for keyframe_id, index in observations:
                keyframe = self.map.keyframes[keyframe_id]
                keypoint = keyframe.keypoints[index]
                factor = ReprojectionFactor(
                    pose_key(keyframe_id),
                    point_key(point_id),
                    keyframe.rig.cameras[keypoint.camera],
                    keyframe.rig.extrinsics[keypoint.camera],
                    keypoint.uv,
                    self.config.sigma_px * keypoint.sigma,
                    self.kernel,
                )
                self.graph.add_factor(factor)
                self._observation_factors.append((factor, point_id, keyframe_id, index))

    def _add_inertial(self, bias_prior: Optional[np.ndarray]):
        included = set(self.keyframe_ids)
        if self.inertial_ids is not None:
            included &= self.inertial_ids
        chained = set()
        for keyframe_id in self.keyframe_ids:
            keyframe = self.map.keyframes[keyframe_id]
            previous = keyframe.previous_id
            if previous in included and keyframe.preintegrated is not None:
                if previous in self.fixed_ids and keyframe_id in self.fixed_ids:
                    continue
                chained |= {previous, keyframe_id}

        if not chained:
            return
        if self.shared_bias:
            first = self.map.keyframes[min(chained, key=lambda kf: self.map.keyframes[kf].timestamp)]
            self.graph.add_variable(SHARED_BIAS, VariableKind.BIAS, first.state.bias)
        for keyframe_id in sorted(chained):
            state = self.map.keyframes[keyframe_id].state
            fixed = keyframe_id in self.fixed_ids
            self.graph.add_variable(velocity_key(keyframe_id), VariableKind.VELOCITY, state.velocity, fixed=fixed)
            if not self.shared_bias:
                self.graph.add_variable(bias_key(keyframe_id), VariableKind.BIAS, state.bias, fixed=fixed)

        for keyframe_id in sorted(chained):
            keyframe = self.map.keyframes[keyframe_id]
            previous = keyframe.previous_id
            if previous not in chained or keyframe.preintegrated is None:
                continue
            bias_i = SHARED_BIAS if self.shared_bias else bias_key(previous)
            self.graph.add_factor(
                InertialFactor(
                    pose_key(previous),
                    velocity_key(previous),
                    bias_i,
                    pose_key(keyframe_id),
                    velocity_key(keyframe_id),
                    keyframe.preintegrated,
                    self.gravity,
                )
            )
            if not self.shared_bias:
                self.graph.add_factor(
                    BiasWalkFactor(
                        bias_key(previous),
                        bias_key(keyframe_id),
                        keyframe.preintegrated.bias_walk_information(),
                    )
                )

        if bias_prior is not None:
            key = SHARED_BIAS if self.shared_bias else bias_key(min(chained, key=lambda kf: self.map.keyframes[kf].timestamp))
            if not self.graph.variables[key].fixed:
                self.graph.add_factor(BiasPriorFactor(key, np.zeros(6), bias_prior))

    def add_distance_prior(self, first: int, second: int, distance: float = None, sigma: float = 1e-3):
        """Pin the distance between two keyframe positions, the monocular scale gauge."""
        if distance is None:
            a = self.map.keyframes[first].pose.translation
            b = self.map.keyframes[second].pose.translation
            distance = float(np.linalg.norm(b - a))
        self.graph.add_factor(DistancePriorFactor(pose_key(first), pose_key(second), distance, sigma))

    def optimize(self, max_iterations: int = None) -> OptimizeResult:
        result = optimize(self.graph, self.config, max_iterations=max_iterations)
        logger.debug(
            "BA map %d: %d free, %d fixed keyframes, %d points, chi2 %.6g -> %.6g",
            self.map.id,
            len(self.free_ids),
            len(self.fixed_ids),
            len(self.point_ids),
            result.initial_chi2,
            result.chi2,
        )
        return result

    def outliers(self, chi2_threshold: float = 5.991) -> List[Tuple[int, int, int]]:
        """Observations whose squared whitened error exceeds a threshold.

        Returns:
            ``(point id, keyframe id, keypoint index)`` triples.
        """
        chi2 = self._observation_chi2()
        return [
            (point_id, keyframe_id, index)
            for (_, point_id, keyframe_id, index), error in zip(self._observation_factors, chi2)
            if error > chi2_threshold
        ]

    def apply(self):
        """Write the optimized values back into the map."""
        graph = self.graph
        for keyframe_id in self.free_ids:
            state = self.map.keyframes[keyframe_id].state
            state.pose = graph.value(pose_key(keyframe_id))
            if velocity_key(keyframe_id) in graph:
                state.velocity = np.array(graph.value(velocity_key(keyframe_id)))
            if self.shared_bias and SHARED_BIAS in graph:
                state.bias = graph.value(SHARED_BIAS)
            elif bias_key(keyframe_id) in graph:
                state.bias = graph.value(bias_key(keyframe_id))
        for point_id in self.point_ids:
            variable = graph.variables[point_key(point_id)]
            if not variable.fixed:
                self.map.points[point_id].position = np.array(variable.value)

    def reprojection_rms(self) -> float:
        """RMS pixel error over the observations of the problem."""
        chi2 = self._observation_chi2()
        sigma = np.array([1.0 / f.sqrt_information[0, 0] for f, _, _, _ in self._observation_factors])
        valid = np.isfinite(chi2)
        if not valid.any():
            return 0.0
        return float(np.sqrt(np.mean(chi2[valid] * sigma[valid] ** 2) / 2.0))

    def _observation_chi2(self) -> np.ndarray:
        return reprojection_chi2(self.graph, [f for f, _, _, _ in self._observation_factors])

    def __repr__(self) -> str:
        return (
            f"<BundleAdjustment map={self.map.id} free={len(self.free_ids)} "
            f"fixed={len(self.fixed_ids)} points={len(self.point_ids)}>"
        )


def inertial_chain(slam_map: SlamMap, end_id: int, count: int) -> List[int]:
    """The last ``count`` keyframes of the temporal chain ending at ``end_id``, oldest first."""
    chain = []
    current = end_id
    while current is not None and current in slam_map.keyframes and len(chain) < count:
        chain.append(current)
        current = slam_map.keyframes[current].previous_id
    return chain[::-1]


def remove_outliers(slam_map: SlamMap, problem: BundleAdjustment, chi2_threshold: float = 5.991) -> int:
    """Drop the observations flagged by :meth:`BundleAdjustment.outliers`.

    Points left without observers are erased.
    """
    touched: Dict[int, None] = {}
    count = 0
    for point_id, keyframe_id, index in problem.outliers(chi2_threshold):
        if point_id not in slam_map.points:
            continue
        slam_map.remove_observation(point_id, keyframe_id, index, update=False)
        touched[keyframe_id] = None
        count += 1
        if not slam_map.points[point_id].observations:
            slam_map.erase_point(point_id)
    for keyframe_id in touched:
        slam_map.update_connections(keyframe_id)
    if count:
        logger.debug("Map %d: removed %d outlier observations", slam_map.id, count)
    return count


def global_bundle_adjustment(
    slam_map: SlamMap,
    config: SolverConfig = None,
    max_iterations: int = None,
    bias_prior: Optional[np.ndarray] = None,
) -> OptimizeResult:
    """Optimize every keyframe and point of a map, the first keyframe held fixed.

    Monocular visual maps also keep the distance between the first two
    keyframes, which fixes the scale gauge.
    """
    ordered = [kf.id for kf in slam_map.ordered_keyframes()]
    if len(ordered) < 2:
        raise PreconditionException("Global bundle adjustment needs two keyframes.", {"map": slam_map.id})
    root = ordered[0]
    problem = BundleAdjustment(slam_map, ordered, config=config, bias_prior=bias_prior, gauge=root)
    rig = slam_map.keyframes[root].rig
    if not problem.inertial and not rig.is_stereo:
        problem.add_distance_prior(root, ordered[-1])
    result = problem.optimize(max_iterations)
    problem.apply()
    return result

