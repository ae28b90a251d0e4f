from typing import Optional

import numpy as np

from ..const import DESCRIPTOR_BYTES
from ..exceptions import InvalidArgumentException


class ModelBase:
    """Base class for all map entities."""

    id: int
    """Identifier, unique across every map of an atlas."""

    def __init__(self, id: int):
        self.id = int(id)

    def __hash__(self) -> int:
        return hash((type(self).__name__, self.id))

    def __eq__(self, other) -> bool:
        return type(self) is type(other) and self.id == other.id


def as_descriptor(value) -> np.ndarray:
    """Coerce a value to a 256-bit binary descriptor stored as 32 bytes."""
    if isinstance(value, (bytes, bytearray)):
        value = np.frombuffer(bytes(value), dtype=np.uint8)
    descriptor = np.asarray(value, dtype=np.uint8).reshape(-1)
    if descriptor.size != DESCRIPTOR_BYTES:
        raise InvalidArgumentException(f"Descriptors hold {DESCRIPTOR_BYTES} bytes, got {descriptor.size}.")
    return descriptor


class Keypoint:
    """A feature detected in one camera of a keyframe."""

    __slots__ = ("uv", "descriptor", "camera", "sigma", "landmark")

    def __init__(
        self,
        uv,
        descriptor,
        camera: int = 0,
        sigma: float = 1.0,
        landmark: Optional[int] = None,
    ):
        self.uv: np.ndarray = np.asarray(uv, dtype=float)
        """Pixel coordinates."""

        self.descriptor: np.ndarray = as_descriptor(descriptor)
        """Binary descriptor."""

        self.camera: int = int(camera)
        """Index of the camera in the rig."""

        self.sigma: float = float(sigma)
        """Standard deviation of the pixel measurement, depends on the pyramid level."""

        self.landmark: Optional[int] = landmark
        """Ground-truth landmark id when known (simulation and oracle association)."""

    def __repr__(self) -> str:
        return f"<Keypoint cam{self.camera} uv={np.round(self.uv, 2).tolist()}>"
