import logging
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from typing import List, Sequence

from .base import SystemBase
from .frame import Frame
from ..camera import CameraRig
from ..config import RunConfig
from ..imu import ImuSample
from ..models import Atlas, Keypoint, Keyframe

logger = logging.getLogger(__name__)


class ConcurrentSystem(SystemBase):
    """Tracking on the caller's thread, mapping and fusion on one worker thread.

    The atlas has a single writer at a time: tracking and the worker take the
    same lock, so tracking only ever waits for a keyframe being processed.
    """

    def __init__(self, config: RunConfig = None, rig: CameraRig = None, atlas: Atlas = None):
        self._lock = threading.RLock()
        self._pending: List[Future] = []
        self._executor = None
        super().__init__(config, rig, atlas)

    def __enter__(self) -> "ConcurrentSystem":
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()

    def _worker(self) -> ThreadPoolExecutor:
        if self._executor is None:
            self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix="atlasslam-mapping")
        return self._executor

    def _map(self, keyframe: Keyframe):
        with self._lock:
            self._handle_keyframe(keyframe)

    def process_frame(self, timestamp: float, keypoints: Sequence[Keypoint], imu: Sequence[ImuSample] = ()) -> Frame:
        with self._lock:
            frame, keyframe = self._handle_frame(timestamp, keypoints, imu)
        if keyframe is not None:
            self._pending.append(self._worker().submit(self._map, keyframe))
        done = [f for f in self._pending if f.done()]
        self._pending = [f for f in self._pending if not f.done()]
        for future in done:
            # re-raise worker errors on the caller's thread
            future.result()
        return frame

    def finish(self):
        pending, self._pending = self._pending, []
        for future in pending:
            future.result()
        logger.debug("Mapping worker drained %d keyframes", len(pending))

    def close(self):
        """Drain the worker and stop it."""
        self.finish()
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None
