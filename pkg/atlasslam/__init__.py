"""Multi-map visual-inertial SLAM on feature tracks: tracking, inertial initialization, map merging and loop closing."""

from .config import RunConfig, SensorMode, load_config
from .models import Atlas, Keyframe, Keypoint, MapPoint, SlamMap
from .pipeline import ConcurrentSystem, System, TrackingState
from .evaluation import EvalReport, eval_ate
from .exceptions import *
