import logging
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..camera import CameraRig
from ..exceptions import PreconditionException
from ..imu import ImuNoise, ImuSample, NavState, Preintegrated, preintegrate, samples_between
from ..manifold import Pose
from ..models import Keypoint

logger = logging.getLogger(__name__)


class TrackingState(str, Enum):
    OK = "ok"
    RECENTLY_LOST = "recently-lost"
    LOST = "lost"


_TRANSITIONS = {
    TrackingState.OK: {TrackingState.RECENTLY_LOST},
    TrackingState.RECENTLY_LOST: {TrackingState.OK, TrackingState.LOST},
    TrackingState.LOST: {TrackingState.OK},
}


class TrackingStatus:
    """State of the tracking state machine and the time it was entered.

    The system starts without a map, in the lost state.
    """

    state: TrackingState
    since: Optional[float]
    """Timestamp of the last transition, ``None`` before the first frame."""

    def __init__(self, state: TrackingState = TrackingState.LOST):
        self.state = TrackingState(state)
        self.since = None

    def time_in_state(self, timestamp: float) -> float:
        return 0.0 if self.since is None else timestamp - self.since

    def start(self, timestamp: float):
        if self.since is None:
            self.since = timestamp

    def transition(self, state: TrackingState, timestamp: float):
        """Move to another state, resetting the time in state.

        Raises:
            PreconditionException: For a transition that skips a state.
        """
        state = TrackingState(state)
        if state is self.state:
            return
        if state not in _TRANSITIONS[self.state]:
            raise PreconditionException(
                "Invalid tracking transition.", {"from": self.state.value, "to": state.value}
            )
        logger.info("Tracking %s -> %s at t=%.3f", self.state.value, state.value, timestamp)
        self.state = state
        self.since = timestamp

    def __repr__(self) -> str:
        return f"<TrackingStatus {self.state.value} since={self.since}>"


class Frame:
    """An image instant being tracked against the active map."""

    timestamp: float
    keypoints: List[Keypoint]
    rig: CameraRig

    imu: List[ImuSample]
    """IMU samples received since the previous frame."""

    state: NavState
    """Solved (or predicted) body state."""

    matches: Dict[int, int]
    """Keypoint index to map point id, the inliers of the last optimization."""

    preintegrated: Optional[Preintegrated]
    """IMU measurements from the previous frame."""

    def __init__(
        self,
        timestamp: float,
        keypoints: Sequence[Keypoint],
        rig: CameraRig,
        imu: Sequence[ImuSample] = (),
        state: NavState = None,
    ):
        self.timestamp = float(timestamp)
        self.keypoints = list(keypoints)
        self.rig = rig
        self.imu = list(imu)
        self.state = state if state is not None else NavState()
        self.matches = {}
        self.preintegrated = None

    @property
    def pose(self) -> Pose:
        return self.state.pose

    @property
    def tracked(self) -> int:
        return len(self.matches)

    def descriptors(self) -> np.ndarray:
        if not self.keypoints:
            return np.zeros((0, 32), dtype=np.uint8)
        return np.stack([kp.descriptor for kp in self.keypoints])

    def __repr__(self) -> str:
        return f"<Frame t={self.timestamp:.3f} keypoints={len(self.keypoints)} tracked={self.tracked}>"


class ImuBuffer:
    """IMU samples received so far, queried by time interval."""

    def __init__(self, noise: ImuNoise = None):
        self.noise = noise or ImuNoise()
        self.samples: List[ImuSample] = []
        self._timestamps = np.zeros(0)

    def extend(self, samples: Sequence[ImuSample]):
        fresh = [s for s in samples if not self.samples or s.timestamp > self.samples[-1].timestamp]
        if len(fresh) != len(samples):
            logger.debug("Dropped %d out-of-order IMU samples", len(samples) - len(fresh))
        if fresh:
            self.samples.extend(fresh)
            self._timestamps = np.append(self._timestamps, [s.timestamp for s in fresh])

    def between(self, start: float, end: float) -> List[ImuSample]:
        return samples_between(self.samples, start, end, self._timestamps)

    def preintegrate(self, start: float, end: float, bias: np.ndarray = None) -> Optional[Preintegrated]:
        """Preintegration over ``[start, end]``, ``None`` without samples or for an empty interval."""
        if not self.samples or end <= start:
            return None
        return preintegrate(self.between(start, end), bias, self.noise)

    def discard_before(self, timestamp: float):
        """Forget samples older than ``timestamp``, keeping one before it for interpolation."""
        index = max(int(np.searchsorted(self._timestamps, timestamp)) - 1, 0)
        if index:
            del self.samples[:index]
            self._timestamps = self._timestamps[index:]

    def __len__(self) -> int:
        return len(self.samples)

    def __repr__(self) -> str:
        return f"<ImuBuffer samples={len(self.samples)}>"
