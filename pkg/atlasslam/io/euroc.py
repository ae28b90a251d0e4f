"""EuRoC-style dataset directories and the fixture bundles written by the simulator.

Layout, relative to the dataset root (``mav0/`` may be omitted)::

    mav0/imu0/data.csv                     timestamp_ns, w_x, w_y, w_z, a_x, a_y, a_z
    mav0/cam0/data.csv                     timestamp_ns, filename
    mav0/state_groundtruth_estimate0/data.csv   (optional) timestamp_ns, p, q_wxyz, ...
    groundtruth.txt                        (optional) TUM trajectory
    tracks.csv                             (optional) feature-track sidecar
"""

import csv
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .tracks import TrackFrame, read_tracks, seconds_to_ns, write_tracks
from .tum import Trajectory, read_tum, write_tum
from ..exceptions import ConfigurationException, EmptyStreamException, MalformedCsvException, NonMonotoneTimeException
from ..imu import ImuSample
from ..manifold import Pose, rotation_from_quaternion

logger = logging.getLogger(__name__)

IMU_HEADER = ["#timestamp [ns]", "w_RS_S_x [rad s^-1]", "w_RS_S_y [rad s^-1]", "w_RS_S_z [rad s^-1]",
              "a_RS_S_x [m s^-2]", "a_RS_S_y [m s^-2]", "a_RS_S_z [m s^-2]"]


def _rows(path: Path):
    """Numeric rows with their line numbers; header and comment lines are skipped."""
    with open(path, newline="") as f:
        for number, row in enumerate(csv.reader(f), start=1):
            if not row or not row[0].strip() or row[0].lstrip().startswith("#"):
                continue
            yield number, [field.strip() for field in row]


def _check_increasing(stamps: List[int], numbers: List[int], path: Path):
    for k in range(1, len(stamps)):
        if stamps[k] <= stamps[k - 1]:
            raise NonMonotoneTimeException(
                "Timestamps must be strictly increasing.", {"path": str(path), "line": numbers[k]}
            )


def read_imu_csv(path: Union[str, Path]) -> List[ImuSample]:
    """Parse an IMU file into samples with timestamps in seconds.

    Raises:
        MalformedCsvException: For rows without seven numbers.
        NonMonotoneTimeException: If timestamps do not increase.
        EmptyStreamException: If the file holds no sample.
    """
    path = Path(path)
    stamps, numbers, values = [], [], []
    for number, row in _rows(path):
        if len(row) < 7:
            raise MalformedCsvException("IMU rows hold seven columns.", {"path": str(path), "line": number})
        try:
            stamps.append(int(row[0]))
            values.append([float(v) for v in row[1:7]])
        except ValueError:
            raise MalformedCsvException("Non-numeric IMU value.", {"path": str(path), "line": number}) from None
        numbers.append(number)
    if not stamps:
        raise EmptyStreamException("IMU file holds no samples.", {"path": str(path)})
    _check_increasing(stamps, numbers, path)
    return [ImuSample(stamp / 1e9, v[:3], v[3:]) for stamp, v in zip(stamps, values)]


def write_imu_csv(path: Union[str, Path], samples: Sequence[ImuSample]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(IMU_HEADER)
        for sample in samples:
            writer.writerow([seconds_to_ns(sample.timestamp)] + [f"{v:.12g}" for v in (*sample.gyro, *sample.accel)])


def read_image_timestamps(path: Union[str, Path]) -> np.ndarray:
    """Image timestamps (s) from a camera ``data.csv``.

    Raises:
        MalformedCsvException: For a non-numeric timestamp.
        NonMonotoneTimeException: If timestamps do not increase.
    """
    path = Path(path)
    stamps, numbers = [], []
    for number, row in _rows(path):
        try:
            stamps.append(int(row[0]))
        except ValueError:
            raise MalformedCsvException("Non-numeric image timestamp.", {"path": str(path), "line": number}) from None
        numbers.append(number)
    _check_increasing(stamps, numbers, path)
    return np.array(stamps, dtype=np.int64) / 1e9


def write_image_timestamps(path: Union[str, Path], timestamps: Sequence[float]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["#timestamp [ns]", "filename"])
        for timestamp in timestamps:
            stamp = seconds_to_ns(timestamp)
            writer.writerow([stamp, f"{stamp}.png"])


def read_groundtruth_csv(path: Union[str, Path]) -> Trajectory:
    """EuRoC ground truth: position then ``w, x, y, z`` quaternion of the body.

    Raises:
        MalformedCsvException: For rows without eight numbers.
        NonMonotoneTimeException: If timestamps do not increase.
    """
    path = Path(path)
    stamps, numbers, poses = [], [], []
    for number, row in _rows(path):
        try:
            values = [float(v) for v in row[:8]]
        except ValueError:
            raise MalformedCsvException("Non-numeric ground-truth value.", {"path": str(path), "line": number}) from None
        if len(values) < 8:
            raise MalformedCsvException("Ground-truth rows hold eight columns.", {"path": str(path), "line": number})
        stamps.append(int(row[0]))
        numbers.append(number)
        qw, qx, qy, qz = values[4:8]
        poses.append(Pose(rotation_from_quaternion(np.array([qx, qy, qz, qw])), np.array(values[1:4])))
    _check_increasing(stamps, numbers, path)
    return [(stamp / 1e9, pose) for stamp, pose in zip(stamps, poses)]


class EurocSequence:
    """Timed streams of one recording."""

    root: Path
    imu: List[ImuSample]
    """IMU samples, empty for purely visual runs."""

    frames: List[TrackFrame]
    """One entry per image timestamp, with the keypoints of the sidecar."""

    groundtruth: Optional[Trajectory]

    def __init__(self, root: Path, imu: List[ImuSample], frames: List[TrackFrame], groundtruth: Optional[Trajectory]):
        self.root = root
        self.imu = imu
        self.frames = frames
        self.groundtruth = groundtruth

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([frame.timestamp for frame in self.frames])

    def __repr__(self) -> str:
        return f"<EurocSequence {self.root.name} frames={len(self.frames)} imu={len(self.imu)}>"


def _mav0(root: Path) -> Path:
    return root / "mav0" if (root / "mav0").is_dir() else root


def ingest_euroc(
    path: Union[str, Path], inertial: bool = True, tracks: Union[str, Path, None] = None
) -> EurocSequence:
    """Load a EuRoC-style directory.

    Image rows only contribute timestamps; keypoints come from the track
    sidecar, ``tracks.csv`` in the root unless given.

    Raises:
        ConfigurationException: If an inertial run lacks ``imu0``.
        MalformedCsvException: For unparsable rows, with the line number.
        NonMonotoneTimeException: For timestamps out of order.
    """
    root = Path(path)
    mav0 = _mav0(root)
    imu_path = mav0 / "imu0" / "data.csv"
    if inertial and not imu_path.is_file():
        raise ConfigurationException("Inertial modes need imu0/data.csv.", {"path": str(root)})
    imu = read_imu_csv(imu_path) if imu_path.is_file() else []

    by_stamp = {}
    track_path = Path(tracks) if tracks else root / "tracks.csv"
    if track_path.is_file():
        by_stamp = {seconds_to_ns(f.timestamp): f for f in read_tracks(track_path)}
    camera_path = mav0 / "cam0" / "data.csv"
    if camera_path.is_file():
        stamps = [seconds_to_ns(t) for t in read_image_timestamps(camera_path)]
    else:
        stamps = sorted(by_stamp)
    frames = [by_stamp.get(stamp) or TrackFrame(stamp / 1e9, []) for stamp in stamps]

    groundtruth = None
    euroc_truth = mav0 / "state_groundtruth_estimate0" / "data.csv"
    if euroc_truth.is_file():
        groundtruth = read_groundtruth_csv(euroc_truth)
    elif (root / "groundtruth.txt").is_file():
        groundtruth = read_tum(root / "groundtruth.txt")
    sequence = EurocSequence(root, imu, frames, groundtruth)
    logger.info("Loaded %r", sequence)
    return sequence


def write_bundle(path: Union[str, Path], frames: Sequence, imu: Sequence[ImuSample], truth: Sequence[Tuple[float, Pose]]):
    """Write a fixture bundle readable by :func:`ingest_euroc`."""
    root = Path(path)
    (root / "mav0" / "imu0").mkdir(parents=True, exist_ok=True)
    (root / "mav0" / "cam0").mkdir(parents=True, exist_ok=True)
    write_imu_csv(root / "mav0" / "imu0" / "data.csv", imu)
    write_image_timestamps(root / "mav0" / "cam0" / "data.csv", [frame.timestamp for frame in frames])
    write_tracks(root / "tracks.csv", frames)
    write_tum(root / "groundtruth.txt", truth)
    logger.info("Wrote fixture bundle to %s", root)
