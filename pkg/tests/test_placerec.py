import numpy as np
import pytest

from atlasslam.exceptions import (
    BelowInlierThresholdException,
    DegenerateConfigurationException,
    InvalidArgumentException,
    PreconditionException,
)
from atlasslam.imu import NavState
from atlasslam.manifold import Pose, SimTransform, exp_so3
from atlasslam.models import Atlas, Keyframe, Keypoint, MapPoint
from atlasslam.placerec import (
    DatabaseMode,
    KeyframeDatabase,
    PlaceHypothesis,
    PlaceRecognizer,
    TemporalConsistencyBaseline,
    VerificationState,
    Verifier,
    Vocabulary,
    build_local_window,
    gravity_check,
    guided_refine,
    hamming_distances,
    horn_align,
    match_descriptors,
    putative_matches,
    ransac_align,
    search_by_projection,
    verify,
)
from atlasslam.sim import WorldSpec, generate

from .conftest import overlapping_maps

T_AM = SimTransform(1.5, exp_so3(np.array([0.0, 0.0, 0.3])), np.array([0.5, -0.2, 0.1]))


def flip_bits(descriptors, rng, count=5):
    noisy = descriptors.copy()
    for row in noisy:
        for bit in rng.choice(256, count, replace=False):
            row[bit // 8] ^= np.uint8(1 << (bit % 8))
    return noisy


def observing_keyframe(atlas, rig, pose, point_ids, positions, descriptors, timestamp):
    keypoints = [
        Keypoint(rig.project(pose, p), d) for p, d in zip(positions, descriptors)
    ]
    keyframe = Keyframe(atlas.new_keyframe_id(), timestamp, NavState(pose), rig, keypoints)
    keyframe.points = dict(enumerate(point_ids))
    return atlas.insert_keyframe(keyframe)


@pytest.fixture
def two_maps(rig, rng):
    """A matched map and an active map seeing the same place through ``T_AM``."""
    atlas = Atlas()
    count = 30
    body = np.column_stack(
        (rng.uniform(4.0, 8.0, count), rng.uniform(-1.5, 1.5, count), rng.uniform(-1.0, 1.0, count))
    )
    descriptors = rng.integers(0, 256, (count, 32), dtype=np.uint8)

    atlas.new_active_map()
    matched_ids = []
    for position, descriptor in zip(body, descriptors):
        point = atlas.active.add_point(MapPoint(atlas.new_point_id(), position, descriptor))
        matched_ids.append(point.id)
    matched = observing_keyframe(atlas, rig, Pose(), matched_ids, body, descriptors, 0.0)

    atlas.new_active_map()
    active_positions = T_AM.act(body)
    active_ids = []
    for position, descriptor in zip(active_positions, descriptors):
        point = atlas.active.add_point(MapPoint(atlas.new_point_id(), position, descriptor))
        active_ids.append(point.id)
    pose = T_AM.transform_pose(Pose())
    active = observing_keyframe(atlas, rig, pose, active_ids, active_positions, descriptors, 10.0)
    return atlas, matched, active


class TestDescriptors:
    def test_hamming(self):
        a = np.zeros((2, 32), dtype=np.uint8)
        b = np.full((3, 32), 255, dtype=np.uint8)
        assert hamming_distances(a, b).tolist() == [[256] * 3] * 2
        assert hamming_distances(a, a[:0]).shape == (2, 0)

    def test_match(self, rng):
        train = rng.integers(0, 256, (20, 32), dtype=np.uint8)
        query = flip_bits(train[[3, 7, 11]], rng)
        matches = match_descriptors(query, train)
        assert [(q, t) for q, t, _ in matches] == [(0, 3), (1, 7), (2, 11)]
        assert all(d == 5 for _, _, d in matches)

    def test_ratio_rejects_ambiguous(self, rng):
        train = rng.integers(0, 256, (5, 32), dtype=np.uint8)
        train[1] = train[0]
        assert match_descriptors(train[:1], train) == []

    def test_distance_gate(self, rng):
        train = rng.integers(0, 256, (5, 32), dtype=np.uint8)
        assert match_descriptors(flip_bits(train[:1], rng, 60), train) == []


class TestVocabulary:
    def documents(self, rng, count=8):
        return [rng.integers(0, 256, (40, 32), dtype=np.uint8) for _ in range(count)]

    def test_training(self, rng):
        documents = self.documents(rng)
        vocabulary = Vocabulary(branching=4, depth=3).train(documents, seed=1)
        assert vocabulary.size > 4
        words = vocabulary.words(documents[0])
        assert np.array_equal(words, vocabulary.words(documents[0]))
        vector = vocabulary.transform(documents[0])
        assert np.isclose(sum(abs(v) for v in vector.values()), 1.0)
        assert np.isclose(Vocabulary.score(vector, vector), 1.0)
        assert Vocabulary.score(vector, vocabulary.transform(documents[1])) < 1.0

    def test_invalid(self):
        with pytest.raises(InvalidArgumentException):
            Vocabulary(branching=1)


class TestKeyframeDatabase:
    def keyframes(self, rig, rng, count):
        result = []
        for index in range(count):
            keypoints = [Keypoint((0.0, 0.0), d) for d in rng.integers(0, 256, (40, 32), dtype=np.uint8)]
            keyframe = Keyframe(index, float(index), NavState(), rig, keypoints)
            keyframe.map_id = index % 2
            result.append(keyframe)
        return result

    def test_brute_force(self, rig, rng):
        database = KeyframeDatabase()
        keyframes = self.keyframes(rig, rng, 6)
        for keyframe in keyframes:
            database.add(keyframe)
        assert database.mode is DatabaseMode.BRUTE_FORCE
        query = flip_bits(keyframes[4].descriptors(), rng)
        assert database.query(query, count=1)[0][0] == 4
        assert database.query(query, count=1, exclude=[4])[0][0] != 4
        assert all(kf % 2 == 1 for kf, _ in database.query(query, map_ids=[1]))

    def test_switches_to_vocabulary(self, rig, rng):
        database = KeyframeDatabase(vocabulary_threshold=5, branching=4, depth=3)
        keyframes = self.keyframes(rig, rng, 8)
        for keyframe in keyframes:
            database.add(keyframe)
        assert database.mode is DatabaseMode.VOCABULARY
        best, score = database.query(keyframes[6].descriptors(), count=1)[0]
        assert best == 6 and np.isclose(score, 1.0)

    def test_remove(self, rig, rng):
        database = KeyframeDatabase()
        for keyframe in self.keyframes(rig, rng, 3):
            database.add(keyframe)
        database.remove(1)
        assert 1 not in database
        assert database.ids() == {0, 2}


class TestAlignment:
    def test_horn(self, rng):
        source = rng.normal(size=(10, 3))
        transform = horn_align(source, T_AM.act(source))
        assert np.isclose(transform.scale, T_AM.scale)
        assert np.allclose(transform.rotation, T_AM.rotation)
        assert np.allclose(transform.translation, T_AM.translation)

    def test_rigid(self, rng):
        source = rng.normal(size=(10, 3))
        rigid = SimTransform(1.0, T_AM.rotation, T_AM.translation)
        transform = horn_align(source, rigid.act(source), estimate_scale=False)
        assert transform.scale == 1.0
        assert np.allclose(transform.translation, rigid.translation)

    def test_degenerate(self):
        line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
        with pytest.raises(DegenerateConfigurationException):
            horn_align(line, line)
        with pytest.raises(DegenerateConfigurationException):
            horn_align(np.eye(3)[:2], np.eye(3)[:2])

    def test_gravity_check(self):
        yaw = SimTransform(1.0, exp_so3(np.array([0.0, 0.0, 1.2])))
        roll = SimTransform(1.0, exp_so3(np.radians([10.0, 0.0, 0.0])))
        assert gravity_check(yaw)
        assert not gravity_check(roll)


class TestPlaceHypotheses:
    def test_local_window(self, two_maps):
        atlas, matched, _ = two_maps
        window = build_local_window(atlas.maps[matched.map_id], matched.id)
        assert window.keyframe_ids == [matched.id]
        assert len(window.point_ids) == 30
        assert window.observations[0] == (matched.id, 0)
        with pytest.raises(PreconditionException):
            build_local_window(atlas.maps[matched.map_id], 999)

    def test_ransac_recovers_transform(self, two_maps):
        atlas, matched, active = two_maps
        window = build_local_window(atlas.maps[matched.map_id], matched.id)
        matches = putative_matches(window, active)
        assert len(matches) == 30
        transform, inliers = ransac_align(window, active, atlas.active, matches, estimate_scale=True)
        assert inliers.all()
        assert np.isclose(transform.scale, T_AM.scale, rtol=1e-6)
        assert np.allclose(transform.translation, T_AM.translation, atol=1e-6)

    def test_hypothesize(self, two_maps):
        atlas, matched, active = two_maps
        recognizer = PlaceRecognizer(atlas)
        hypothesis = recognizer.hypothesize(active, matched.id, estimate_scale=True)
        assert hypothesis.is_merge
        assert hypothesis.matched_keyframe_id == matched.id
        assert len(hypothesis.matches) == 30
        assert np.isclose(hypothesis.transform.scale, T_AM.scale, rtol=1e-5)

    def test_process_waits_for_verification(self, two_maps):
        atlas, _, active = two_maps
        recognizer = PlaceRecognizer(atlas)
        assert recognizer.process(active, estimate_scale=True) is None
        assert len(recognizer.pending) == 1
        recognizer.reset()
        assert recognizer.pending == []

    def test_search_by_projection(self, two_maps):
        atlas, matched, _ = two_maps
        positions = np.array([atlas.maps[matched.map_id].points[p].position for p in (0, 1, 2)])
        descriptors = matched.descriptors()[:3]
        found = search_by_projection(matched, positions, descriptors, radius=2.0)
        assert found == {0: 0, 1: 1, 2: 2}
        assert search_by_projection(matched, positions, descriptors, radius=2.0, used=[1]) == {0: 0, 2: 2}


class TestVerification:
    def hypothesis(self, two_maps):
        atlas, matched, active = two_maps
        window = build_local_window(atlas.maps[matched.map_id], matched.id)
        return PlaceHypothesis(active.id, active.map_id, window, T_AM, True)

    def test_accepts_after_three(self, two_maps):
        verifier = Verifier(self.hypothesis(two_maps))
        assert verifier.add_keyframe(True) is VerificationState.PENDING
        assert verifier.add_keyframe(True) is VerificationState.ACCEPTED
        assert verifier.hypothesis.verifications == 3

    def test_rejects_after_two_failures(self, two_maps):
        verifier = Verifier(self.hypothesis(two_maps))
        verifier.add_keyframe(False)
        verifier.add_keyframe(True)
        verifier.add_keyframe(False)
        assert verifier.state is VerificationState.PENDING
        assert verifier.add_keyframe(False) is VerificationState.REJECTED
        assert verifier.add_keyframe(True) is VerificationState.REJECTED

    def test_covisible_failures_do_not_count(self, two_maps):
        verifier = Verifier(self.hypothesis(two_maps))
        verifier.add_covisible(False)
        verifier.add_covisible(False)
        assert verifier.state is VerificationState.PENDING
        verifier.add_covisible(True)
        assert verifier.add_keyframe(True) is VerificationState.ACCEPTED

    def test_temporal_baseline(self):
        baseline = TemporalConsistencyBaseline(required=3)
        assert not baseline.update(True)
        assert not baseline.update(True)
        assert not baseline.update(False)
        assert [baseline.update(True) for _ in range(3)] == [False, False, True]


WARP = SimTransform(1.5, exp_so3(np.array([0.02, -0.01, 0.4])), np.array([1.0, -2.0, 0.5]))


@pytest.fixture(scope="module")
def revisit_world():
    return generate(WorldSpec(duration=3.0, landmarks=1200))


class TestRevisit:
    def test_query_candidates(self, revisit_world):
        atlas, _, _, matched, active = overlapping_maps(revisit_world, WARP)
        candidates = atlas.database.query_candidates(active, 3)
        assert matched.id in candidates
        assert active.id not in candidates
        assert not set(candidates) & set(active.covisibility)

    def test_hypothesize_recovers_warp(self, revisit_world):
        atlas, matched_map, _, matched, active = overlapping_maps(revisit_world, WARP)
        hypothesis = PlaceRecognizer(atlas).hypothesize(active, matched.id, estimate_scale=True)
        assert hypothesis.is_merge
        assert hypothesis.matched_map_id == matched_map.id
        assert len(hypothesis.matches) >= PlaceRecognizer(atlas).config.inlier_threshold
        assert np.isclose(hypothesis.transform.scale, WARP.scale, rtol=1e-3)
        assert np.allclose(hypothesis.transform.rotation, WARP.rotation, atol=1e-3)
        assert np.allclose(hypothesis.transform.translation, WARP.translation, atol=1e-2)

    def test_guided_refine_from_transform(self, revisit_world):
        atlas, matched_map, active_map, matched, active = overlapping_maps(revisit_world, WARP)
        window = build_local_window(matched_map, matched.id)
        hypothesis = PlaceHypothesis(active.id, active_map.id, window, WARP, True)
        refined = guided_refine(hypothesis, active, active_map, matched_map)
        assert len(refined.matches) >= 20
        assert all(matched_map.points[p].landmark == active.keypoints[k].landmark for p, k in refined.matches.items())
        assert np.isclose(refined.transform.scale, WARP.scale, rtol=1e-3)

    def test_guided_refine_rejects_wrong_transform(self, revisit_world):
        atlas, matched_map, active_map, matched, active = overlapping_maps(revisit_world, WARP)
        window = build_local_window(matched_map, matched.id)
        hypothesis = PlaceHypothesis(active.id, active_map.id, window, SimTransform.identity(), True)
        with pytest.raises(BelowInlierThresholdException):
            guided_refine(hypothesis, active, active_map, matched_map)

    def test_verify_with_covisibles(self, revisit_world):
        atlas, matched_map, active_map, matched, active = overlapping_maps(revisit_world, WARP)
        window = build_local_window(matched_map, matched.id)
        hypothesis = PlaceHypothesis(active.id, active_map.id, window, WARP, True)
        state, consumed = verify(hypothesis, active_map)
        assert state is VerificationState.ACCEPTED
        assert consumed == 0
        assert hypothesis.verifications == 3

    def test_verify_rejects_wrong_place(self, revisit_world):
        atlas, matched_map, active_map, matched, active = overlapping_maps(revisit_world, WARP)
        window = build_local_window(matched_map, matched.id)
        shifted = SimTransform(1.0, np.eye(3), np.array([3.0, 0.0, 0.0])).compose(WARP)
        hypothesis = PlaceHypothesis(active.id, active_map.id, window, shifted, True)
        later = [kf for kf in active_map.ordered_keyframes() if kf.timestamp > 2.2]
        state, consumed = verify(hypothesis, active_map, later)
        assert state is VerificationState.REJECTED
        assert consumed == 2

    def test_process_accepts_merge(self, revisit_world):
        atlas, matched_map, _, _, active = overlapping_maps(revisit_world, WARP)
        hypothesis = PlaceRecognizer(atlas).process(active, estimate_scale=True)
        assert hypothesis is not None
        assert hypothesis.is_merge
        assert hypothesis.matched_map_id == matched_map.id
        assert hypothesis.verifications == 3
