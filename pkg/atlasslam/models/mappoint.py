from typing import TYPE_CHECKING, Dict, Optional, Set, Tuple

import numpy as np

from .common import ModelBase, as_descriptor

if TYPE_CHECKING:
    from .keyframe import Keyframe

Observation = Tuple[int, int]
"""A ``(keyframe id, keypoint index)`` pair."""


class MapPoint(ModelBase):
    """A 3D landmark of a map."""

    position: np.ndarray
    """World coordinates in meters."""

    descriptor: np.ndarray
    """Representative 256-bit descriptor."""

    observations: Set[Observation]
    """Keyframes and keypoints observing the point."""

    reference_id: Optional[int]
    """Keyframe the point is attached to for rigid corrections."""

    landmark: Optional[int]
    """Ground-truth landmark id when known."""

    def __init__(
        self,
        id: int,
        position: np.ndarray,
        descriptor,
        reference_id: Optional[int] = None,
        landmark: Optional[int] = None,
    ):
        super().__init__(id)
        self.position = np.asarray(position, dtype=float).copy()
        self.descriptor = as_descriptor(descriptor)
        self.observations = set()
        self.reference_id = reference_id
        self.landmark = landmark

    def observers(self) -> Set[int]:
        return {kf for kf, _ in self.observations}

    def observations_in(self, keyframe_id: int) -> Set[int]:
        return {index for kf, index in self.observations if kf == keyframe_id}

    @property
    def num_observers(self) -> int:
        return len(self.observers())

    def update_descriptor(self, keyframes: Dict[int, "Keyframe"]):
        """Keep the observed descriptor with the least median distance to the others."""
        from ..placerec.vocabulary import hamming_distances

        candidates = [
            keyframes[kf].keypoints[index].descriptor
            for kf, index in sorted(self.observations)
            if kf in keyframes
        ]
        if not candidates:
            return
        stacked = np.stack(candidates)
        distances = hamming_distances(stacked, stacked)
        self.descriptor = stacked[int(np.argmin(np.median(distances, axis=1)))].copy()

    def __repr__(self) -> str:
        return f"<MapPoint {self.id} observers={self.num_observers}>"
