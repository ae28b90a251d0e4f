"""Feature-track sidecar files replacing image decoding.

Columns: ``frame_ts_ns, cam_index, landmark_id, u_px, v_px, descriptor_hex``.
A negative ``landmark_id`` marks a track without ground truth.
"""

import csv
import logging
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np

from ..exceptions import MalformedCsvException, NonMonotoneTimeException
from ..models import Keypoint

logger = logging.getLogger(__name__)

HEADER = ["frame_ts_ns", "cam_index", "landmark_id", "u_px", "v_px", "descriptor_hex"]


class TrackFrame:
    """Keypoints observed at one image timestamp."""

    def __init__(self, timestamp: float, keypoints: List[Keypoint]):
        self.timestamp = timestamp
        self.keypoints = keypoints

    def __repr__(self) -> str:
        return f"<TrackFrame t={self.timestamp:.6f} keypoints={len(self.keypoints)}>"


def seconds_to_ns(timestamp: float) -> int:
    return int(round(timestamp * 1e9))


def write_tracks(path: Union[str, Path], frames: Sequence):
    """Write the keypoints of frames, any objects with ``timestamp`` and ``keypoints``."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(HEADER)
        for frame in frames:
            stamp = seconds_to_ns(frame.timestamp)
            for keypoint in frame.keypoints:
                landmark = -1 if keypoint.landmark is None else keypoint.landmark
                writer.writerow(
                    [
                        stamp,
                        keypoint.camera,
                        landmark,
                        f"{keypoint.uv[0]:.6f}",
                        f"{keypoint.uv[1]:.6f}",
                        keypoint.descriptor.tobytes().hex(),
                    ]
                )


def read_tracks(path: Union[str, Path], sigma: float = 1.0) -> List[TrackFrame]:
    """Read a track file grouped by frame, in time order.

    Raises:
        MalformedCsvException: For rows that cannot be parsed, with the line number.
        NonMonotoneTimeException: If frames are not in time order.
    """
    frames: Dict[int, List[Keypoint]] = {}
    order: List[int] = []
    with open(path, newline="") as f:
        for number, row in enumerate(csv.reader(f), start=1):
            if not row or row[0].startswith("#") or row[0] == HEADER[0]:
                continue
            if len(row) != len(HEADER):
                raise MalformedCsvException(
                    "Track rows hold six columns.", {"path": str(path), "line": number, "columns": len(row)}
                )
            try:
                stamp, camera, landmark = int(row[0]), int(row[1]), int(row[2])
                uv = np.array([float(row[3]), float(row[4])])
                descriptor = bytes.fromhex(row[5].strip())
                keypoint = Keypoint(uv, descriptor, camera, sigma, landmark if landmark >= 0 else None)
            except ValueError as e:
                raise MalformedCsvException(f"Invalid track row: {e}", {"path": str(path), "line": number}) from None
            if stamp not in frames:
                if order and stamp < order[-1]:
                    raise NonMonotoneTimeException("Track frames must be in time order.", {"path": str(path), "line": number})
                frames[stamp] = []
                order.append(stamp)
            frames[stamp].append(keypoint)
    logger.debug("Read %d frames of tracks from %s", len(order), path)
    return [TrackFrame(stamp / 1e9, frames[stamp]) for stamp in order]
