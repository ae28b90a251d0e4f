"""Place recognition between a new keyframe and the keyframes of any map."""

import logging
from enum import Enum
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from .vocabulary import hamming_distances
from ..config import PlaceRecConfig, SolverConfig
from ..exceptions import (
    BelowInlierThresholdException,
    DegenerateConfigurationException,
    EstimationException,
    NotEnoughVotesException,
    PreconditionException,
)
from ..manifold import SimTransform, umeyama_alignment
from ..solver import FactorGraph, SimilarityReprojectionFactor, VariableKind, optimize

if TYPE_CHECKING:
    from ..models import Atlas, Keyframe, SlamMap

logger = logging.getLogger(__name__)


class LocalWindow:
    """A matched keyframe, its best covisibles and the points they observe."""

    map_id: int
    """Map the window belongs to."""

    keyframe_id: int
    """The matched keyframe ``K_m``."""

    keyframe_ids: List[int]
    """``K_m`` first, then its best covisible keyframes."""

    point_ids: np.ndarray
    """Ids of the window points."""

    positions: np.ndarray
    """``(N, 3)`` point positions in the frame of the window's map."""

    descriptors: np.ndarray
    """``(N, 32)`` point descriptors."""

    observations: List[Tuple[int, int]]
    """For each point, one ``(keyframe id, keypoint index)`` observation inside the window."""

    def __init__(self, slam_map: "SlamMap", keyframe_id: int, keyframe_ids: List[int]):
        self.map_id = slam_map.id
        self.keyframe_id = keyframe_id
        self.keyframe_ids = keyframe_ids
        members = set(keyframe_ids)
        point_ids = sorted({pid for kf in keyframe_ids for pid in slam_map.keyframes[kf].point_ids()})
        self.point_ids = np.array(point_ids, dtype=np.int64)
        self.positions = np.array([slam_map.points[p].position for p in point_ids]).reshape(-1, 3)
        self.descriptors = np.array([slam_map.points[p].descriptor for p in point_ids], dtype=np.uint8).reshape(-1, 32)
        self.observations = []
        rank = {kf: i for i, kf in enumerate(keyframe_ids)}
        for p in point_ids:
            inside = [obs for obs in slam_map.points[p].observations if obs[0] in members]
            self.observations.append(min(inside, key=lambda obs: (rank[obs[0]], obs[1])))
        self._row = {p: i for i, p in enumerate(point_ids)}

    def row(self, point_id: int) -> int:
        return self._row[point_id]

    def __len__(self) -> int:
        return len(self.keyframe_ids)

    def __repr__(self) -> str:
        return f"<LocalWindow K_m={self.keyframe_id} keyframes={len(self.keyframe_ids)} points={len(self.point_ids)}>"


class PutativeMatch:
    """A keypoint of ``K_a`` matched to a window point, with its 3D-3D pair."""

    __slots__ = ("keypoint", "point_id", "active_point_id", "distance")

    def __init__(self, keypoint: int, point_id: int, active_point_id: Optional[int], distance: int):
        self.keypoint = keypoint
        self.point_id = point_id
        self.active_point_id = active_point_id
        self.distance = distance

    def __repr__(self) -> str:
        return f"<PutativeMatch kp={self.keypoint} point={self.point_id} d={self.distance}>"


class PlaceHypothesis:
    """A candidate relation between the active keyframe and a matched place."""

    active_keyframe_id: int
    """The query keyframe ``K_a``."""

    active_map_id: int
    matched_map_id: int

    window: LocalWindow
    """Local window around the matched keyframe ``K_m``."""

    transform: SimTransform
    """``T_am``, mapping matched-map coordinates into the active map."""

    estimate_scale: bool
    """Sim(3) hypothesis when true, SE(3) otherwise."""

    matches: Dict[int, int]
    """Window point id to ``K_a`` keypoint index for the inlier matches."""

    verifications: int
    """Number of keyframes that verified the hypothesis, ``K_a`` included."""

    def __init__(
        self,
        active_keyframe_id: int,
        active_map_id: int,
        window: LocalWindow,
        transform: SimTransform,
        estimate_scale: bool,
        matches: Dict[int, int] = None,
    ):
        self.active_keyframe_id = active_keyframe_id
        self.active_map_id = active_map_id
        self.matched_map_id = window.map_id
        self.window = window
        self.transform = transform
        self.estimate_scale = estimate_scale
        self.matches = dict(matches or {})
        self.verifications = 1

    @property
    def matched_keyframe_id(self) -> int:
        return self.window.keyframe_id

    @property
    def is_merge(self) -> bool:
        """True when the matched place lies in another map."""
        return self.active_map_id != self.matched_map_id

    def __repr__(self) -> str:
        kind = "merge" if self.is_merge else "loop"
        return (
            f"<PlaceHypothesis {kind} K_a={self.active_keyframe_id} K_m={self.matched_keyframe_id} "
            f"inliers={len(self.matches)} verified={self.verifications}>"
        )


def match_descriptors(
    query: np.ndarray,
    train: np.ndarray,
    max_distance: int = 50,
    ratio: float = 0.75,
) -> List[Tuple[int, int, int]]:
    """Nearest-neighbour matching with a distance gate and a ratio test.

    Returns:
        ``(query index, train index, distance)`` triples.
    """
    if len(query) == 0 or len(train) == 0:
        return []
    distances = hamming_distances(query, train)
    order = np.argsort(distances, axis=1, kind="stable")
    matches = []
    for i in range(len(query)):
        best = distances[i, order[i, 0]]
        if best > max_distance:
            continue
        if train.shape[0] > 1 and best >= ratio * distances[i, order[i, 1]]:
            continue
        matches.append((i, int(order[i, 0]), int(best)))
    return matches


def build_local_window(slam_map: "SlamMap", keyframe_id: int, best_covisibles: int = 5) -> LocalWindow:
    """``K_m``, its best covisible keyframes and the map points observed by all of them."""
    if keyframe_id not in slam_map.keyframes:
        raise PreconditionException("Keyframe is not part of the map.", {"keyframe": keyframe_id, "map": slam_map.id})
    keyframe = slam_map.keyframes[keyframe_id]
    return LocalWindow(slam_map, keyframe_id, [keyframe_id] + keyframe.best_covisibles(best_covisibles))


def putative_matches(
    window: LocalWindow,
    keyframe: "Keyframe",
    config: PlaceRecConfig = None,
) -> List[PutativeMatch]:
    """Match the keypoints of ``K_a`` that carry map points against the window points."""
    config = config or PlaceRecConfig()
    indices = sorted(keyframe.points)
    if not indices:
        return []
    query = np.stack([keyframe.keypoints[i].descriptor for i in indices])
    found = match_descriptors(query, window.descriptors, config.hamming_threshold, config.ratio)
    return [
        PutativeMatch(indices[q], int(window.point_ids[t]), keyframe.points[indices[q]], d)
        for q, t, d in found
    ]


def horn_align(source: np.ndarray, target: np.ndarray, estimate_scale: bool = True) -> SimTransform:
    """Closed-form transform ``T`` with ``target ≈ T·source``.

    Arguments:
        source: ``(N ≥ 3, 3)`` points.
        target: ``(N, 3)`` corresponding points.
        estimate_scale: Solve for Sim(3), otherwise SE(3) with unit scale.

    Raises:
        DegenerateConfigurationException: For fewer than three points or a
            collinear configuration.
    """
    source = np.asarray(source, dtype=float).reshape(-1, 3)
    target = np.asarray(target, dtype=float).reshape(-1, 3)
    if len(source) < 3 or len(source) != len(target):
        raise DegenerateConfigurationException("Alignment needs three or more point pairs.", {"pairs": len(source)})
    transform, singular = umeyama_alignment(source, target, with_scale=estimate_scale)
    target_singular = np.linalg.svd(target - target.mean(axis=0), compute_uv=False)
    for values in (singular, target_singular):
        if values[0] < 1e-12 or values[1] < 1e-9 * values[0]:
            raise DegenerateConfigurationException("Point pairs are collinear.")
    return transform


def search_by_projection(
    keyframe: "Keyframe",
    positions: np.ndarray,
    descriptors: np.ndarray,
    radius: float,
    max_distance: int = 50,
    used: Sequence[int] = (),
) -> Dict[int, int]:
    """Match points to the keypoints found near their projection.

    Arguments:
        keyframe: Keyframe whose keypoints are searched.
        positions: ``(N, 3)`` points in the frame of the keyframe's map.
        descriptors: ``(N, 32)`` point descriptors.
        radius: Search radius in pixels.
        max_distance: Largest accepted Hamming distance.
        used: Keypoint indices that may not be matched again.

    Returns:
        Point row to keypoint index, one-to-one.
    """
    if len(positions) == 0 or not keyframe.keypoints:
        return {}
    blocked = set(used)
    kp_uv = np.array([kp.uv for kp in keyframe.keypoints])
    kp_cam = np.array([kp.camera for kp in keyframe.keypoints])
    kp_desc = keyframe.descriptors()
    pairs = []
    for index, camera in enumerate(keyframe.rig.cameras):
        candidates = np.array([k for k in np.nonzero(kp_cam == index)[0] if k not in blocked], dtype=np.int64)
        if len(candidates) == 0:
            continue
        uv, valid = camera.project_many(keyframe.rig.world_to_camera(keyframe.pose, positions, index))
        valid &= camera.in_image(np.where(valid[:, None], uv, -1.0))
        rows = np.nonzero(valid)[0]
        if len(rows) == 0:
            continue
        pixel = np.linalg.norm(uv[rows, None, :] - kp_uv[None, candidates, :], axis=2)
        hamming = hamming_distances(descriptors[rows], kp_desc[candidates])
        ok = (pixel < radius) & (hamming <= max_distance)
        for r, c in zip(*np.nonzero(ok)):
            pairs.append((int(hamming[r, c]), float(pixel[r, c]), int(rows[r]), int(candidates[c])))

    result: Dict[int, int] = {}
    taken = set()
    for _, _, row, keypoint in sorted(pairs):
        if row in result or keypoint in taken:
            continue
        result[row] = keypoint
        taken.add(keypoint)
    return result


def _reprojection_errors(keyframe: "Keyframe", points: np.ndarray, keypoints: Sequence[int]) -> np.ndarray:
    """Pixel error of world points against keypoints, ``inf`` where not projectable."""
    errors = np.full(len(points), np.inf)
    cams = np.array([keyframe.keypoints[k].camera for k in keypoints])
    measured = np.array([keyframe.keypoints[k].uv for k in keypoints]).reshape(-1, 2)
    for index, camera in enumerate(keyframe.rig.cameras):
        rows = np.nonzero(cams == index)[0]
        if len(rows) == 0:
            continue
        uv, valid = camera.project_many(keyframe.rig.world_to_camera(keyframe.pose, points[rows], index))
        err = np.linalg.norm(uv - measured[rows], axis=1)
        errors[rows] = np.where(valid, err, np.inf)
    return errors


def ransac_align(
    window: LocalWindow,
    keyframe: "Keyframe",
    active_map: "SlamMap",
    matches: Sequence[PutativeMatch],
    estimate_scale: bool,
    config: PlaceRecConfig = None,
    rng: np.random.Generator = None,
) -> Tuple[SimTransform, np.ndarray]:
    """Hypothesize ``T_am`` from minimal 3D-3D sets and vote by reprojection in ``K_a``.

    Arguments:
        window: Local window of the matched keyframe.
        keyframe: The query keyframe ``K_a`` of the active map.
        active_map: Map of ``K_a``, holding the 3D points of its matches.
        matches: Putative matches from :func:`putative_matches`.
        estimate_scale: Solve for Sim(3) instead of SE(3).
        config: Place-recognition thresholds.
        rng: Random generator; a fixed seed gives deterministic results.

    Returns:
        ``(T_am, inlier mask over matches)``.

    Raises:
        PreconditionException: For fewer than three matches.
        NotEnoughVotesException: If the best hypothesis has too few votes.
    """
    config = config or PlaceRecConfig()
    if len(matches) < 3:
        raise PreconditionException("Alignment needs three or more matches.", {"matches": len(matches)})
    rng = rng if rng is not None else np.random.default_rng(0)
    source = np.array([window.positions[window.row(m.point_id)] for m in matches])
    target = np.array([active_map.points[m.active_point_id].position for m in matches])
    keypoints = [m.keypoint for m in matches]

    def votes(transform: SimTransform) -> np.ndarray:
        errors = _reprojection_errors(keyframe, transform.act(source), keypoints)
        return errors < config.reprojection_threshold_px

    best, best_inliers = None, np.zeros(len(matches), dtype=bool)
    for _ in range(config.ransac_iterations):
        sample = rng.choice(len(matches), 3, replace=False)
        try:
            transform = horn_align(source[sample], target[sample], estimate_scale)
        except DegenerateConfigurationException:
            continue
        inliers = votes(transform)
        if inliers.sum() > best_inliers.sum():
            best, best_inliers = transform, inliers

    if best is None or best_inliers.sum() < config.vote_threshold:
        raise NotEnoughVotesException(
            "Place hypothesis did not collect enough votes.",
            {"votes": int(best_inliers.sum()), "required": config.vote_threshold},
        )

    try:
        refit = horn_align(source[best_inliers], target[best_inliers], estimate_scale)
        refit_inliers = votes(refit)
        if refit_inliers.sum() >= best_inliers.sum():
            best, best_inliers = refit, refit_inliers
    except DegenerateConfigurationException:
        pass
    logger.debug("RANSAC alignment: %d/%d votes", best_inliers.sum(), len(matches))
    return best, best_inliers


def _optimize_alignment(
    hypothesis: PlaceHypothesis,
    keyframe: "Keyframe",
    active_map: "SlamMap",
    matched_map: "SlamMap",
    matches: Dict[int, int],
    solver: SolverConfig,
) -> SimTransform:
    graph = FactorGraph()
    graph.add_variable(
        "T_am", VariableKind.SIM3, hypothesis.transform, fixed_scale=not hypothesis.estimate_scale
    )
    window = hypothesis.window
    for point_id, index in matches.items():
        keypoint = keyframe.keypoints[index]
        graph.add_factor(
            SimilarityReprojectionFactor(
                "T_am",
                keyframe.rig.cameras[keypoint.camera],
                keyframe.camera_pose(keypoint.camera).inverse(),
                window.positions[window.row(point_id)],
                keypoint.uv,
                inverse=False,
                sigma_px=keypoint.sigma,
            )
        )
        active_point = keyframe.points.get(index)
        if active_point is None or active_point not in active_map.points:
            continue
        observer_id, observer_index = window.observations[window.row(point_id)]
        observer = matched_map.keyframes[observer_id]
        observed = observer.keypoints[observer_index]
        graph.add_factor(
            SimilarityReprojectionFactor(
                "T_am",
                observer.rig.cameras[observed.camera],
                observer.camera_pose(observed.camera).inverse(),
                active_map.points[active_point].position,
                observed.uv,
                inverse=True,
                sigma_px=observed.sigma,
            )
        )
    optimize(graph, solver, use_schur=False)
    return graph.value("T_am")


def guided_refine(
    hypothesis: PlaceHypothesis,
    keyframe: "Keyframe",
    active_map: "SlamMap",
    matched_map: "SlamMap",
    config: PlaceRecConfig = None,
    solver: SolverConfig = None,
) -> PlaceHypothesis:
    """Enlarge the matches by projection and refine ``T_am``, twice.

    The first pass searches a wide image window, the second a narrow one.
    Each pass minimises the bidirectional reprojection error with a Huber
    kernel and drops matches whose forward error exceeds the threshold.

    Raises:
        BelowInlierThresholdException: If too few matches survive.
    """
    config = config or PlaceRecConfig()
    window = hypothesis.window
    matches = dict(hypothesis.matches)
    for radius in (config.search_radius_wide_px, config.search_radius_narrow_px):
        unmatched = np.array([i for i, p in enumerate(window.point_ids) if int(p) not in matches], dtype=np.int64)
        found = search_by_projection(
            keyframe,
            hypothesis.transform.act(window.positions[unmatched]) if len(unmatched) else np.zeros((0, 3)),
            window.descriptors[unmatched],
            radius,
            config.hamming_threshold,
            used=matches.values(),
        )
        for row, index in found.items():
            matches[int(window.point_ids[unmatched[row]])] = index
        if len(matches) < 3:
            break

        hypothesis.transform = _optimize_alignment(
            hypothesis, keyframe, active_map, matched_map, matches, solver
        )
        point_ids = list(matches)
        rows = [window.row(p) for p in point_ids]
        errors = _reprojection_errors(
            keyframe, hypothesis.transform.act(window.positions[rows]), [matches[p] for p in point_ids]
        )
        matches = {p: matches[p] for p, e in zip(point_ids, errors) if e < config.reprojection_threshold_px}
        logger.debug("Guided matching (%.0fpx): %d inliers", radius, len(matches))

    if len(matches) < config.inlier_threshold:
        raise BelowInlierThresholdException(
            "Too few inliers after guided refinement.",
            {"inliers": len(matches), "required": config.inlier_threshold},
        )
    hypothesis.matches = matches
    return hypothesis


def count_verified_matches(
    hypothesis: PlaceHypothesis,
    keyframe: "Keyframe",
    config: PlaceRecConfig = None,
) -> int:
    """Number of window points matched in a keyframe of the active map through ``T_am``."""
    config = config or PlaceRecConfig()
    window = hypothesis.window
    found = search_by_projection(
        keyframe,
        hypothesis.transform.act(window.positions),
        window.descriptors,
        config.search_radius_narrow_px,
        config.hamming_threshold,
    )
    return len(found)


class VerificationState(str, Enum):
    PENDING = "pending"
    ACCEPTED = "accepted"
    REJECTED = "rejected"


class Verifier:
    """Accepts a hypothesis once three keyframes agree with it.

    ``K_a`` is the first verification. Covisible keyframes already in the
    active map are checked immediately; afterwards each new keyframe either
    verifies the hypothesis or counts as a failure, and two consecutive
    failures reject it.
    """

    def __init__(self, hypothesis: PlaceHypothesis, required: int = 3, max_failures: int = 2):
        self.hypothesis = hypothesis
        self.required = required
        self.max_failures = max_failures
        self.failures = 0
        self.incoming = 0
        self.state = VerificationState.PENDING
        hypothesis.verifications = 1
        self._update()

    def _update(self) -> VerificationState:
        if self.hypothesis.verifications >= self.required:
            self.hypothesis.verifications = self.required
            self.state = VerificationState.ACCEPTED
        elif self.failures >= self.max_failures:
            self.state = VerificationState.REJECTED
        return self.state

    def add_covisible(self, verified: bool) -> VerificationState:
        """Result of a covisible keyframe already in the map; failures are not counted."""
        if self.state is VerificationState.PENDING and verified:
            self.hypothesis.verifications += 1
        return self._update()

    def add_keyframe(self, verified: bool) -> VerificationState:
        """Result of a new keyframe inserted after ``K_a``."""
        if self.state is not VerificationState.PENDING:
            return self.state
        self.incoming += 1
        if verified:
            self.hypothesis.verifications += 1
            self.failures = 0
        else:
            self.failures += 1
        return self._update()


def verify(
    hypothesis: PlaceHypothesis,
    active_map: "SlamMap",
    incoming: Sequence["Keyframe"] = (),
    config: PlaceRecConfig = None,
) -> Tuple[VerificationState, int]:
    """Run the verification of a refined hypothesis.

    Two covisible keyframes of ``K_a`` in the active map are checked first,
    then the incoming keyframes in order until a decision is reached.

    Returns:
        ``(state, number of incoming keyframes consumed)``.
    """
    config = config or PlaceRecConfig()
    verifier = Verifier(hypothesis, config.required_verifications, config.max_consecutive_failures)
    active = active_map.keyframes[hypothesis.active_keyframe_id]
    for other in active.best_covisibles(2):
        verified = count_verified_matches(hypothesis, active_map.keyframes[other], config) >= config.vote_threshold
        if verifier.add_covisible(verified) is VerificationState.ACCEPTED:
            return verifier.state, 0
    for consumed, keyframe in enumerate(incoming, start=1):
        verified = count_verified_matches(hypothesis, keyframe, config) >= config.vote_threshold
        if verifier.add_keyframe(verified) is not VerificationState.PENDING:
            return verifier.state, consumed
    return verifier.state, len(incoming)


def gravity_check(transform: SimTransform, threshold_deg: float = 3.0) -> bool:
    """True if the pitch and roll of ``T_am`` are both below the threshold."""
    _, pitch, roll = Rotation.from_matrix(transform.rotation).as_euler("ZYX", degrees=True)
    return abs(pitch) < threshold_deg and abs(roll) < threshold_deg


class TemporalConsistencyBaseline:
    """Accepts a place after a number of consecutive new-keyframe detections."""

    def __init__(self, required: int = 3):
        self.required = required
        self.consecutive = 0

    def update(self, detected: bool) -> bool:
        self.consecutive = self.consecutive + 1 if detected else 0
        return self.consecutive >= self.required


class PlaceRecognizer:
    """Runs candidate retrieval, alignment, refinement and verification for new keyframes."""

    def __init__(
        self,
        atlas: "Atlas",
        config: PlaceRecConfig = None,
        solver: SolverConfig = None,
        seed: int = 0,
    ):
        self.atlas = atlas
        self.config = config or PlaceRecConfig()
        self.solver = solver
        self.rng = np.random.default_rng(seed)
        self.pending: List[Verifier] = []

    def hypothesize(self, keyframe: "Keyframe", candidate_id: int, estimate_scale: bool) -> PlaceHypothesis:
        """Steps up to guided refinement for one database candidate.

        Raises:
            EstimationException: If the candidate is rejected on the way.
        """
        active_map = self.atlas.maps[keyframe.map_id]
        matched_map = self.atlas.map_of(candidate_id)
        window = build_local_window(matched_map, candidate_id, self.atlas.config.best_covisibles)
        matches = putative_matches(window, keyframe, self.config)
        if len(matches) < 3:
            raise NotEnoughVotesException("Too few putative matches.", {"matches": len(matches)})
        transform, inliers = ransac_align(
            window, keyframe, active_map, matches, estimate_scale, self.config, self.rng
        )
        hypothesis = PlaceHypothesis(
            keyframe.id,
            active_map.id,
            window,
            transform,
            estimate_scale,
            {m.point_id: m.keypoint for m, ok in zip(matches, inliers) if ok},
        )
        return guided_refine(hypothesis, keyframe, active_map, matched_map, self.config, self.solver)

    def _accept(self, hypothesis: PlaceHypothesis, check_gravity: bool) -> Optional[PlaceHypothesis]:
        if check_gravity and not gravity_check(hypothesis.transform, self.config.gravity_threshold_deg):
            logger.info("Rejected %r on pitch/roll", hypothesis)
            return None
        logger.info("Accepted %r", hypothesis)
        return hypothesis

    def process(self, keyframe: "Keyframe", estimate_scale: bool, check_gravity: bool = False) -> Optional[PlaceHypothesis]:
        """Feed a new keyframe of the active map; returns an accepted hypothesis if any."""
        active_map = self.atlas.maps[keyframe.map_id]
        still_pending = []
        accepted = None
        for verifier in self.pending:
            if verifier.hypothesis.active_map_id != active_map.id or verifier.hypothesis.matched_map_id not in self.atlas.maps:
                continue
            verified = count_verified_matches(verifier.hypothesis, keyframe, self.config) >= self.config.vote_threshold
            state = verifier.add_keyframe(verified)
            if state is VerificationState.ACCEPTED and accepted is None:
                accepted = self._accept(verifier.hypothesis, check_gravity)
            elif state is VerificationState.PENDING:
                still_pending.append(verifier)
        self.pending = still_pending
        if accepted is not None:
            self.pending = []
            return accepted

        for candidate in self.atlas.database.query_candidates(keyframe, self.config.candidates):
            if self.atlas.map_of(candidate) is None:
                continue
            try:
                hypothesis = self.hypothesize(keyframe, candidate, estimate_scale)
            except EstimationException as e:
                logger.debug("Candidate %d rejected: %s", candidate, e.detail)
                continue
            verifier = Verifier(hypothesis, self.config.required_verifications, self.config.max_consecutive_failures)
            for other in keyframe.best_covisibles(2):
                verified = count_verified_matches(hypothesis, active_map.keyframes[other], self.config) >= self.config.vote_threshold
                verifier.add_covisible(verified)
            if verifier.state is VerificationState.ACCEPTED:
                self.pending = []
                return self._accept(hypothesis, check_gravity)
            self.pending.append(verifier)
        return None

    def reset(self):
        self.pending = []
