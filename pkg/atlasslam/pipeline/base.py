import logging
from abc import ABC, abstractmethod
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .frame import Frame, ImuBuffer, TrackingState, TrackingStatus
from .mapping import LocalMapper, create_stereo_points, stereo_points
from .tracking import Tracker
from ..camera import CameraRig, rig_from_config
from ..config import RunConfig
from ..exceptions import (
    EstimationException,
    GeometryException,
    PreconditionException,
)
from ..fusion import EventLog, close_loop, merge_maps
from ..imu import ImuNoise, ImuSample, NavState
from ..initializer import InertialInitializer, build_tracks, vision_only_init
from ..manifold import Pose
from ..models import Atlas, Keyframe, Keypoint, SlamMap
from ..placerec import PlaceRecognizer

logger = logging.getLogger(__name__)

StatusRow = Tuple[float, str, float, int, Optional[int]]


class SystemBase(ABC):
    """Tracking, local mapping and place recognition over one atlas.

    Frames go through :meth:`process_frame`; keyframes created while tracking
    are handed to mapping, inertial initialization and place recognition.
    Subclasses decide whether that second half runs inline or on a worker.
    """

    atlas: Atlas
    """The maps built so far, one of them active."""

    status: TrackingStatus
    """State of the tracking state machine."""

    events: EventLog
    """Merges and loop closures of the run."""

    status_rows: List[StatusRow]
    """Per-frame ``(timestamp, state, time in state, tracked points, active map)``."""

    def __init__(self, config: RunConfig = None, rig: CameraRig = None, atlas: Atlas = None):
        self.config = config or RunConfig()
        self.rig = rig if rig is not None else rig_from_config(self.config.cameras, self.config.mode.stereo)
        self.events = EventLog()
        self.status_rows = []
        self._records: List[Tuple[float, int, Pose]] = []
        self._bind(atlas if atlas is not None else Atlas(self.config.map, self.config.placerec, self.config.seed))
        self.mapper = LocalMapper(self.atlas, self.config)
        self.initializer = InertialInitializer(self.config.init, self.config.solver, self.config.mode.stereo)
        self._open_session()

    def _bind(self, atlas: Atlas):
        self.atlas = atlas
        noise = ImuNoise.from_config(self.config.imu) if self.config.imu is not None else ImuNoise()
        self.imu = ImuBuffer(noise)
        self.tracker = Tracker(atlas, self.config, self.imu)
        self.recognizer = PlaceRecognizer(atlas, self.config.placerec, self.config.solver, self.config.seed)
        if hasattr(self, "mapper"):
            self.mapper.atlas = atlas

    def _open_session(self):
        if self.atlas.active_id is None or len(self.atlas.active.keyframes):
            self.atlas.new_active_map(self.config.mode.inertial)
        self.status = TrackingStatus()
        self._views: List[Frame] = []

    def new_session(self, atlas: Atlas = None):
        """Start processing another recording, in a new active map.

        Arguments:
            atlas: Continue from this atlas, e.g. one loaded from disk, instead
                of the current one. Keyframe ids must carry over.
        """
        self.finish()
        self._bind(atlas if atlas is not None else self.atlas)
        self.mapper.reset()
        self._open_session()
        logger.info("New session in map %d", self.atlas.active_id)

    @abstractmethod
    def process_frame(self, timestamp: float, keypoints: Sequence[Keypoint], imu: Sequence[ImuSample] = ()) -> Frame:
        """Track one frame given its observations and the IMU samples since the previous one."""

    @abstractmethod
    def finish(self):
        """Wait for every pending keyframe to be processed."""

    def run(self, frames: Iterable, imu: Sequence[ImuSample] = ()) -> List[Tuple[float, Pose]]:
        """Process frames, objects with ``timestamp`` and ``keypoints``, with one IMU stream.

        Returns:
            The trajectory, see :meth:`trajectory`.
        """
        imu = list(imu)
        stamps = np.array([s.timestamp for s in imu])
        start = 0
        for frame in frames:
            end = int(np.searchsorted(stamps, frame.timestamp, side="right")) if imu else 0
            self.process_frame(frame.timestamp, frame.keypoints, imu[start:end])
            start = max(start, end)
        self.finish()
        return self.trajectory()

    ### FRAMES ###
    def _handle_frame(
        self, timestamp: float, keypoints: Sequence[Keypoint], imu: Sequence[ImuSample] = ()
    ) -> Tuple[Frame, Optional[Keyframe]]:
        frame = Frame(timestamp, keypoints, self.rig, imu)
        self.imu.extend(frame.imu)
        self.status.start(frame.timestamp)
        if self.status.state is TrackingState.LOST:
            keyframe = self._recover(frame)
        else:
            keyframe = self._track(frame)
        self._record(frame)
        self._discard_imu()
        return frame, keyframe

    def _track(self, frame: Frame) -> Optional[Keyframe]:
        slam_map = self.atlas.active
        recently_lost = self.status.state is TrackingState.RECENTLY_LOST
        tracked = self.tracker.track(frame, slam_map, wide=recently_lost)
        if tracked >= self.config.map.min_tracked_points:
            self.status.transition(TrackingState.OK, frame.timestamp)
            if self.tracker.need_keyframe(frame, slam_map):
                return self.tracker.create_keyframe(frame, slam_map)
            return None

        if not recently_lost:
            self.status.transition(TrackingState.RECENTLY_LOST, frame.timestamp)
        elif not self.config.mode.inertial and self._relocalize(frame):
            return None
        elif self.status.time_in_state(frame.timestamp) >= self.config.tracking.short_term_lost_seconds:
            self._start_new_map(frame.timestamp)
        return None

    def _relocalize(self, frame: Frame) -> bool:
        slam_map = self.tracker.relocalize(frame)
        if slam_map is None:
            return False
        if slam_map.id != self.atlas.active_id:
            if not self.atlas.active.keyframes:
                self.atlas.remove_map(self.atlas.active_id)
            self.atlas.active_id = slam_map.id
            self.recognizer.reset()
        self._views = []
        self.status.transition(TrackingState.OK, frame.timestamp)
        return True

    def _recover(self, frame: Frame) -> Optional[Keyframe]:
        if not self.config.mode.inertial and self.atlas.non_active() and self._relocalize(frame):
            return None
        if self.config.mode.stereo:
            keyframe = self._initialize_stereo(frame)
        else:
            keyframe = self._initialize_monocular(frame)
        if keyframe is not None:
            self._views = []
            self.tracker.anchor(keyframe)
            frame.state = keyframe.state.copy() if keyframe.timestamp == frame.timestamp else frame.state
            frame.matches = dict(keyframe.points) if keyframe.timestamp == frame.timestamp else {}
            self.status.transition(TrackingState.OK, frame.timestamp)
        return None

    def _initialize_stereo(self, frame: Frame) -> Optional[Keyframe]:
        """Start the active map from one stereo frame at the origin."""
        pairs = stereo_points(frame.keypoints, frame.rig, Pose.identity(), self.config)
        if len(pairs) < self.config.init.min_matches:
            logger.debug("Stereo initialization at t=%.3f: %d points", frame.timestamp, len(pairs))
            return None
        slam_map = self.atlas.active
        keyframe = Keyframe(self.atlas.new_keyframe_id(), frame.timestamp, NavState(), frame.rig, frame.keypoints)
        self.atlas.insert_keyframe(keyframe, slam_map.id)
        created = create_stereo_points(self.atlas, slam_map, keyframe, self.config)
        logger.info("Initialized map %d from stereo with %d points", slam_map.id, len(created))
        return keyframe

    def _initialize_monocular(self, frame: Frame) -> Optional[Keyframe]:
        """Collect views at the initialization rate and try the vision-only stage."""
        init = self.config.init
        if self._views and frame.timestamp - self._views[-1].timestamp < 1.0 / init.keyframe_rate_hz - 1e-9:
            return None
        self._views.append(frame)
        span = self._views[-1].timestamp - self._views[0].timestamp
        if self.config.mode.inertial:
            if span < init.window_seconds - 1e-9:
                return None
        elif len(self._views) < 3:
            return None

        tracks = build_tracks(
            self._views,
            self.config.tracking.association,
            self.config.placerec.hamming_threshold,
            self.config.placerec.ratio,
        )
        preintegrations = None
        if self.config.mode.inertial:
            preintegrations = [None] + [
                self.imu.preintegrate(a.timestamp, b.timestamp) for a, b in zip(self._views, self._views[1:])
            ]
        try:
            result = vision_only_init(
                self.atlas, self._views, tracks, self.rig, init, self.config.solver, preintegrations, self.config.seed
            )
        except (EstimationException, GeometryException, PreconditionException) as e:
            logger.debug("Monocular initialization at t=%.3f failed: %s", frame.timestamp, e)
            if self.atlas.active.keyframes:
                self._reset_active()
            if self.config.mode.inertial or span >= init.window_seconds - 1e-9:
                self._views.pop(0)
            return None
        logger.info("Initialized map %d from %d views", result.map_id, len(result.keyframe_ids))
        return self.atlas.active.keyframes[self.atlas.active.last_id]

    def _reset_active(self):
        inertial = self.atlas.active.inertial
        self.atlas.remove_map(self.atlas.active_id)
        self.atlas.new_active_map(inertial)

    def _start_new_map(self, timestamp: float):
        """Long-term lost: store the active map and start from scratch."""
        active = self.atlas.active
        if self.config.mode.inertial:
            age = timestamp - active.imu_init_time if active.imu_initialized else 0.0
            if not self.atlas.discard_active_if_young(age, True, self.config.tracking.young_map_seconds):
                self.atlas.new_active_map(True)
        elif active.keyframes:
            self.atlas.new_active_map(False)
        self.tracker.reset()
        self.recognizer.reset()
        self._views = []
        self.status.transition(TrackingState.LOST, timestamp)

    def _record(self, frame: Frame):
        state = self.status.state
        active = None if state is TrackingState.LOST else self.atlas.active_id
        self.status_rows.append(
            (frame.timestamp, state.value, self.status.time_in_state(frame.timestamp), frame.tracked, active)
        )
        reference_id = self.tracker.reference_id
        if state is TrackingState.LOST or reference_id is None or self.atlas.map_of(reference_id) is None:
            return
        reference = self.atlas.keyframe(reference_id)
        self._records.append((frame.timestamp, reference_id, reference.pose.inverse().compose(frame.pose)))

    def _discard_imu(self):
        needed = [self.tracker.last_frame.timestamp] if self.tracker.last_frame is not None else []
        if self._views:
            needed.append(self._views[0].timestamp)
        slam_map = self.atlas.active
        if slam_map.last_id is not None:
            needed.append(slam_map.keyframes[slam_map.last_id].timestamp)
        if needed:
            self.imu.discard_before(min(needed))

    ### KEYFRAMES ###
    def _handle_keyframe(self, keyframe: Keyframe):
        slam_map = self.atlas.map_of(keyframe.id)
        if slam_map is None:
            logger.debug("Keyframe %d left the atlas before mapping", keyframe.id)
            return
        before = keyframe.state.copy()
        initialized = slam_map.imu_initialized
        self.mapper.process(slam_map, keyframe)
        if self.config.mode.inertial and slam_map.inertial:
            self._handle_inertial(slam_map, keyframe.timestamp)
        initialized = slam_map.imu_initialized and not initialized
        self._handle_place(keyframe)
        if self.atlas.map_of(keyframe.id) is not None:
            self.tracker.correct(self.atlas.keyframe(keyframe.id), before, initialized)

    def _handle_inertial(self, slam_map: SlamMap, timestamp: float):
        try:
            if self.initializer.ready(slam_map):
                self.initializer.initialize(slam_map)
            else:
                self.initializer.step(slam_map, timestamp)
        except (EstimationException, GeometryException, PreconditionException) as e:
            logger.warning("Inertial initialization of map %d at t=%.3f: %s", slam_map.id, timestamp, e)

    def _handle_place(self, keyframe: Keyframe):
        slam_map = self.atlas.map_of(keyframe.id)
        estimate_scale = not self.config.mode.stereo and not slam_map.mature
        check_gravity = self.config.mode.inertial and slam_map.mature
        hypothesis = self.recognizer.process(keyframe, estimate_scale, check_gravity)
        if hypothesis is None:
            return
        fusion, placerec, solver = self.config.fusion, self.config.placerec, self.config.solver
        try:
            if hypothesis.is_merge:
                if self.config.mode.inertial and not slam_map.imu_initialized:
                    logger.debug("Merge of map %d postponed until IMU initialization", slam_map.id)
                    return
                merge_maps(self.atlas, hypothesis, fusion, placerec, solver, self.events)
            else:
                close_loop(slam_map, hypothesis, fusion, placerec, solver, self.events)
        except (EstimationException, PreconditionException) as e:
            logger.warning("Fusion at keyframe %d failed: %s", keyframe.id, e)
        self.recognizer.reset()

    ### RESULTS ###
    def trajectory(self) -> List[Tuple[float, Pose]]:
        """Body poses of the frames tracked in the final active map.

        Frames are stored relative to their reference keyframe, so later
        corrections of the map move them too.
        """
        trajectory = []
        for timestamp, keyframe_id, relative in self._records:
            live, offset = self.mapper.resolve(keyframe_id)
            if live is None or self.atlas.map_of(live).id != self.atlas.active_id:
                continue
            trajectory.append((timestamp, self.atlas.keyframe(live).pose.compose(offset).compose(relative)))
        return trajectory

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.config.mode.value} {self.status.state.value} {self.atlas!r}>"
