"""Tracking, local mapping and the systems running them over an atlas."""

from .frame import Frame, ImuBuffer, TrackingState, TrackingStatus
from .tracking import LocalPoints, Tracker
from .mapping import LocalMapper, create_monocular_points, create_stereo_points, pair_keypoints, redundant, stereo_points
from .base import SystemBase
from ._sequential import System
from ._concurrent import ConcurrentSystem
