from typing import Dict, List, Optional, Sequence, Set

import numpy as np

from .common import Keypoint, ModelBase
from ..camera import CameraRig
from ..imu import NavState, Preintegrated
from ..manifold import Pose


class Keyframe(ModelBase):
    """A frame retained in a map with its state and observations."""

    timestamp: float
    """Time of the frame in seconds."""

    state: NavState
    """Pose, velocity and biases of the body at :attr:`timestamp`."""

    rig: CameraRig
    """The camera rig that captured the frame."""

    keypoints: List[Keypoint]
    """Detected features of all cameras."""

    points: Dict[int, int]
    """Map point id matched to each keypoint index."""

    preintegrated: Optional[Preintegrated]
    """IMU measurements from the previous keyframe of the temporal chain."""

    previous_id: Optional[int]
    """Previous keyframe in time, for inertial maps."""

    next_id: Optional[int]
    """Next keyframe in time, for inertial maps."""

    covisibility: Dict[int, int]
    """Number of map points shared with other keyframes of the same map."""

    parent_id: Optional[int]
    """Spanning-tree parent, ``None`` only for the root of a map."""

    children: Set[int]
    """Spanning-tree children."""

    loop_ids: Set[int]
    """Keyframes linked by loop-closure or merge edges."""

    map_id: Optional[int]
    """Map the keyframe belongs to."""

    def __init__(
        self,
        id: int,
        timestamp: float,
        state: NavState,
        rig: CameraRig,
        keypoints: Sequence[Keypoint] = (),
        preintegrated: Optional[Preintegrated] = None,
    ):
        super().__init__(id)
        self.timestamp = float(timestamp)
        self.state = state
        self.rig = rig
        self.keypoints = list(keypoints)
        self.points = {}
        self.preintegrated = preintegrated
        self.previous_id = None
        self.next_id = None
        self.covisibility = {}
        self.parent_id = None
        self.children = set()
        self.loop_ids = set()
        self.map_id = None

    @property
    def pose(self) -> Pose:
        """World-from-body pose."""
        return self.state.pose

    @pose.setter
    def pose(self, value: Pose):
        self.state.pose = value

    def camera_pose(self, index: int = 0) -> Pose:
        return self.rig.camera_pose(self.state.pose, index)

    def point_ids(self) -> Set[int]:
        return set(self.points.values())

    def descriptors(self) -> np.ndarray:
        """``(N, 32)`` descriptors of all keypoints."""
        if not self.keypoints:
            return np.zeros((0, 32), dtype=np.uint8)
        return np.stack([kp.descriptor for kp in self.keypoints])

    def best_covisibles(self, count: int = None, min_weight: int = 1) -> List[int]:
        """Covisible keyframe ids, most shared points first."""
        ranked = sorted(
            (kf for kf, w in self.covisibility.items() if w >= min_weight),
            key=lambda kf: (-self.covisibility[kf], kf),
        )
        return ranked if count is None else ranked[:count]

    def __repr__(self) -> str:
        return (
            f"<Keyframe {self.id} t={self.timestamp:.3f} map={self.map_id} "
            f"points={len(self.points)}>"
        )
