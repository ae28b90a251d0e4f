from typing import Dict, Optional, Any


class AtlasException(Exception):
    """
    Base class for all atlasslam specific exceptions,
    this will not cover all possible exceptions such as numpy linear algebra errors.
    """

    def __init__(self, detail: str, context: Optional[Dict[str, Any]] = None):
        super().__init__()
        self.__detail = detail
        self.__context = dict(context) if context else {}
        self.args = (self.title, self.detail)

    @property
    def title(self) -> str:
        """
        Short name of the error, derived from the class name
        """
        name = type(self).__name__
        return name[: -len("Exception")] if name.endswith("Exception") else name

    @property
    def detail(self) -> str:
        """
        Detailed description of the error
        """
        return self.__detail

    @property
    def context(self) -> Dict[str, Any]:
        """
        Extra values describing where the error happened (ids, line numbers, counts)
        """
        return self.__context

    def __str__(self):
        if self.context:
            extra = ", ".join(f"{k}={v}" for k, v in self.context.items())
            return f"{self.title}: {self.detail} [{extra}]"
        return f"{self.title}: {self.detail}"


class ConfigurationException(AtlasException):
    """Raised for an invalid or mode-inconsistent run configuration."""


class InvalidArgumentException(AtlasException, ValueError):
    """Raised when a constructor or function receives an out-of-range argument."""


### GEOMETRY ###
class GeometryException(AtlasException):
    """Base class for failures of camera and alignment geometry."""


class ProjectionException(GeometryException):
    """Base class for points that cannot be projected by a camera model."""


class BehindCameraException(ProjectionException):
    """Raised when a pin-hole camera is asked to project a point with z <= 0."""


class OutOfFovException(ProjectionException):
    """Raised when a fisheye camera is asked to project a ray beyond its maximum angle."""


class NoConvergenceException(GeometryException):
    """Raised when an iterative inversion (e.g. fisheye unprojection) does not converge."""


class DegenerateParallaxException(GeometryException):
    """Raised when two rays are too close to parallel, or meet behind a camera."""


class DegenerateConfigurationException(GeometryException):
    """Raised when a point set is degenerate for alignment (e.g. collinear)."""


### ESTIMATION ###
class EstimationException(AtlasException):
    """Base class for optimization and robust estimation failures."""


class SingularSystemException(EstimationException):
    """Raised when the free variables of a factor graph are not fully constrained."""


class StructureViolationException(EstimationException):
    """Raised when a graph does not have the structure required for Schur elimination."""


class InsufficientInliersException(EstimationException):
    """Raised when a robust pose estimate is not supported by enough correspondences."""


class InsufficientParallaxException(EstimationException):
    """Raised when the vision-only initialization has no depth observability."""


class InitializationFailedException(EstimationException):
    """Raised when the inertial initialization does not converge to an accurate solution."""


class NotEnoughVotesException(EstimationException):
    """Raised when no alignment hypothesis gathers enough votes."""


class BelowInlierThresholdException(EstimationException):
    """Raised when a refined alignment keeps too few inliers."""


class DisconnectedGraphException(EstimationException):
    """Raised when a pose graph has a component not connected to a fixed node."""


### MAP ###
class MapException(AtlasException):
    """Base class for map data model errors."""


class DuplicateIdException(MapException):
    """Raised when a keyframe or map point id is already in use."""


class SamePointException(MapException):
    """Raised when a map point is fused with itself."""


class MapIntegrityException(MapException):
    """Raised by the map validator when cross references are inconsistent."""


class PreconditionException(MapException):
    """Raised when an operation is called on maps or hypotheses it does not apply to."""


### DATA ###
class DataException(AtlasException):
    """Base class for malformed or inconsistent input data."""


class EmptyStreamException(DataException):
    """Raised when an IMU stream holds no samples."""


class NonMonotoneTimeException(DataException):
    """Raised when timestamps are not strictly increasing."""


class MalformedCsvException(DataException):
    """Raised when a CSV row cannot be parsed, the line number is in the context."""


class InsufficientOverlapException(DataException):
    """Raised when too few poses can be associated between two trajectories."""


class InvalidSpecException(DataException):
    """Raised for an invalid synthetic world description."""


__all__ = [name for name in dir() if name.endswith("Exception")]
