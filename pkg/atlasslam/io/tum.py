"""TUM trajectory files: ``timestamp tx ty tz qx qy qz qw`` per line."""

import logging
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from ..const import TUM_TIMESTAMP_DECIMALS
from ..exceptions import MalformedCsvException, NonMonotoneTimeException
from ..manifold import Pose, quaternion_from_rotation, rotation_from_quaternion

logger = logging.getLogger(__name__)

Trajectory = List[Tuple[float, Pose]]


def format_line(timestamp: float, pose: Pose) -> str:
    """One trajectory line; the quaternion is normalized with ``qw >= 0``."""
    q = quaternion_from_rotation(pose.rotation)
    q = q / np.linalg.norm(q)
    if q[3] < 0:
        q = -q
    values = " ".join(f"{v:.9f}" for v in np.concatenate((pose.translation, q)))
    return f"{timestamp:.{TUM_TIMESTAMP_DECIMALS}f} {values}"


def write_tum(path: Union[str, Path], trajectory: Sequence[Tuple[float, Pose]]):
    with open(path, "w") as f:
        for timestamp, pose in trajectory:
            f.write(format_line(timestamp, pose) + "\n")
    logger.debug("Wrote %d poses to %s", len(trajectory), path)


def read_tum(path: Union[str, Path]) -> Trajectory:
    """Read a TUM trajectory; ``#`` comments and blank lines are skipped.

    Raises:
        MalformedCsvException: For lines without eight numbers.
        NonMonotoneTimeException: If timestamps are not strictly increasing.
    """
    trajectory = []
    with open(path) as f:
        for number, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.replace(",", " ").split()
            try:
                values = [float(v) for v in fields]
            except ValueError:
                raise MalformedCsvException("Non-numeric trajectory value.", {"path": str(path), "line": number}) from None
            if len(values) != 8:
                raise MalformedCsvException(
                    "Trajectory lines hold eight values.", {"path": str(path), "line": number, "values": len(values)}
                )
            if trajectory and values[0] <= trajectory[-1][0]:
                raise NonMonotoneTimeException("Trajectory timestamps must increase.", {"path": str(path), "line": number})
            trajectory.append((values[0], Pose(rotation_from_quaternion(np.array(values[4:8])), np.array(values[1:4]))))
    return trajectory
