from typing import Sequence

from .base import SystemBase
from .frame import Frame
from ..imu import ImuSample
from ..models import Keypoint


class System(SystemBase):
    """Sequential system: each keyframe is mapped before the next frame is tracked.

    Runs are deterministic for a given configuration and seed.
    """

    def process_frame(self, timestamp: float, keypoints: Sequence[Keypoint], imu: Sequence[ImuSample] = ()) -> Frame:
        frame, keyframe = self._handle_frame(timestamp, keypoints, imu)
        if keyframe is not None:
            self._handle_keyframe(keyframe)
        return frame

    def finish(self):
        pass
