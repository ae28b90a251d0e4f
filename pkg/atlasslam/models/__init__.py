"""Map data model: keyframes, map points, maps and the atlas."""

from .common import Keypoint, ModelBase, as_descriptor
from .keyframe import Keyframe
from .mappoint import MapPoint, Observation
from .slam_map import SlamMap
from .atlas import Atlas
