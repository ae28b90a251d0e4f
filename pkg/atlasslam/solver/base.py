import logging
from abc import ABC, abstractmethod
from enum import Enum
from typing import Any, Dict, Hashable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..const import HUBER_DELTA_2DOF
from ..exceptions import InvalidArgumentException, ProjectionException
from ..manifold import Pose, SimTransform, retract_gravity

logger = logging.getLogger(__name__)


class VariableKind(str, Enum):
    POSE = "pose"
    VELOCITY = "velocity"
    BIAS = "bias"
    POINT = "point"
    SCALE = "scale"
    GRAVITY = "gravity-rotation"
    SIM3 = "sim3"


_DIMENSIONS = {
    VariableKind.POSE: 6,
    VariableKind.VELOCITY: 3,
    VariableKind.BIAS: 6,
    VariableKind.POINT: 3,
    VariableKind.SCALE: 1,
    VariableKind.GRAVITY: 2,
    VariableKind.SIM3: 7,
}


class FactorKind(str, Enum):
    REPROJECTION = "reprojection"
    INERTIAL = "inertial"
    BIAS_PRIOR = "bias-prior"
    BIAS_WALK = "bias-walk"
    POSE_GRAPH = "pose-graph"
    RAY_ANGULAR = "ray-angular"
    PRIOR = "prior"


class KernelKind(str, Enum):
    NONE = "none"
    HUBER = "huber"


def huber_weight(r_norm: float, delta: float) -> float:
    """IRLS weight of the Huber kernel for a whitened residual norm.

    Arguments:
        r_norm: Whitened residual norm.
        delta: Kernel threshold, must be positive.

    Returns:
        ``1`` inside the threshold, ``δ/r`` outside.
    """
    if delta <= 0:
        raise InvalidArgumentException("Huber threshold must be positive.")
    if r_norm <= delta:
        return 1.0
    return delta / r_norm


class RobustKernel:
    """Robust cost applied to the whitened residual norm of a factor."""

    kind: KernelKind
    """The kernel type."""

    delta: float
    """Threshold δ in whitened units (ignored for ``none``)."""

    def __init__(self, kind: KernelKind = KernelKind.NONE, delta: float = HUBER_DELTA_2DOF):
        self.kind = KernelKind(kind)
        if self.kind is KernelKind.HUBER and delta <= 0:
            raise InvalidArgumentException("Huber threshold must be positive.")
        self.delta = float(delta)

    @classmethod
    def none(cls) -> "RobustKernel":
        return cls(KernelKind.NONE)

    @classmethod
    def huber(cls, delta: float = HUBER_DELTA_2DOF) -> "RobustKernel":
        return cls(KernelKind.HUBER, delta)

    @property
    def is_identity(self) -> bool:
        return self.kind is KernelKind.NONE

    def cost(self, r_norm: float) -> float:
        """ρ of a whitened residual norm; equals ``r²`` in the quadratic region."""
        if self.kind is KernelKind.NONE or r_norm <= self.delta:
            return r_norm * r_norm
        return 2.0 * self.delta * r_norm - self.delta * self.delta

    def weight(self, r_norm: float) -> float:
        if self.kind is KernelKind.NONE:
            return 1.0
        return huber_weight(r_norm, self.delta)

    def __repr__(self) -> str:
        if self.is_identity:
            return "<RobustKernel none>"
        return f"<RobustKernel {self.kind.value} δ={self.delta:.3f}>"


class Variable:
    """An optimizable value living on a manifold."""

    key: Hashable
    """Unique identifier within a graph."""

    kind: VariableKind
    """Determines the value type and the retraction."""

    value: Any
    """Current estimate: a Pose, SimTransform, 3×3 rotation, float or vector."""

    fixed: bool
    """Fixed variables are never modified by the solver."""

    fixed_scale: bool
    """For Sim(3) variables, keep the scale constant (6 degrees of freedom)."""

    def __init__(
        self,
        key: Hashable,
        kind: VariableKind,
        value: Any,
        fixed: bool = False,
        fixed_scale: bool = False,
    ):
        self.key = key
        self.kind = VariableKind(kind)
        self.value = value
        self.fixed = fixed
        self.fixed_scale = fixed_scale and self.kind is VariableKind.SIM3

    @property
    def dim(self) -> int:
        """Dimension of the tangent space the solver works in."""
        if self.fixed_scale:
            return 6
        return _DIMENSIONS[self.kind]

    def retract(self, delta: np.ndarray) -> Any:
        """Return the value moved by a tangent-space increment."""
        kind = self.kind
        if kind is VariableKind.POSE:
            return self.value.retract(delta)
        if kind is VariableKind.SIM3:
            if self.fixed_scale:
                delta = np.append(delta, 0.0)
            return self.value.retract(delta)
        if kind is VariableKind.SCALE:
            # s·exp(δ) stays positive for any increment
            return float(self.value * np.exp(delta[0]))
        if kind is VariableKind.GRAVITY:
            return retract_gravity(self.value, delta[0], delta[1])
        return self.value + delta

    def copy_value(self) -> Any:
        value = self.value
        if isinstance(value, Pose):
            return Pose(value.rotation, value.translation)
        if isinstance(value, SimTransform):
            return SimTransform(value.scale, value.rotation, value.translation)
        if isinstance(value, np.ndarray):
            return value.copy()
        return value

    def __repr__(self) -> str:
        flag = " fixed" if self.fixed else ""
        return f"<Variable {self.key!r} {self.kind.value}{flag}>"


class Factor(ABC):
    """A residual block connecting one or more variables.

    Subclasses implement :meth:`residual` and :meth:`linearize`; the Jacobians
    are taken with respect to each variable's full tangent space, in the order
    of :attr:`keys`.
    """

    kind: FactorKind
    keys: Tuple[Hashable, ...]
    """Keys of the connected variables."""

    information: np.ndarray
    """Inverse covariance of the residual."""

    kernel: RobustKernel
    """Robust kernel applied to the whitened residual norm."""

    def __init__(
        self,
        keys: Sequence[Hashable],
        information: np.ndarray,
        kernel: Optional[RobustKernel] = None,
    ):
        self.keys = tuple(keys)
        information = np.atleast_2d(np.asarray(information, dtype=float))
        if not np.allclose(information, information.T, rtol=1e-9, atol=1e-12):
            raise InvalidArgumentException("Information matrix must be symmetric.")
        try:
            lower = np.linalg.cholesky(information)
        except np.linalg.LinAlgError:
            raise InvalidArgumentException("Information matrix must be positive definite.") from None
        self.information = information
        self.sqrt_information = lower.T
        self.kernel = RobustKernel.none() if kernel is None else kernel

    @property
    def dim(self) -> int:
        return self.information.shape[0]

    @abstractmethod
    def residual(self, values: List[Any]) -> np.ndarray: ...

    @abstractmethod
    def linearize(self, values: List[Any]) -> Tuple[np.ndarray, List[np.ndarray]]: ...

    def whitened_norm(self, values: List[Any]) -> float:
        return float(np.linalg.norm(self.sqrt_information @ self.residual(values)))

    def cost(self, values: List[Any]) -> float:
        return self.kernel.cost(self.whitened_norm(values))

    def __repr__(self) -> str:
        return f"<{type(self).__name__} keys={list(self.keys)}>"


class OptimizeResult:
    """Summary of a solver run."""

    initial_chi2: float
    """Cost at the initial values."""

    chi2: float
    """Cost at the returned values."""

    iterations: int
    """Number of accepted steps."""

    converged: bool
    """True if a termination tolerance was reached before the iteration limit."""

    def __init__(self, initial_chi2: float, chi2: float, iterations: int, converged: bool):
        self.initial_chi2 = initial_chi2
        self.chi2 = chi2
        self.iterations = iterations
        self.converged = converged

    def __repr__(self) -> str:
        return (
            f"<OptimizeResult chi2={self.chi2:.6g} initial={self.initial_chi2:.6g} "
            f"iterations={self.iterations}>"
        )


class FactorGraph:
    """Variables and the factors connecting them."""

    variables: Dict[Hashable, Variable]
    """Variables by key, in insertion order."""

    factors: List[Factor]
    """All residual blocks."""

    def __init__(self):
        self.variables = {}
        self.factors = []

    def add_variable(
        self,
        key: Hashable,
        kind: VariableKind,
        value: Any,
        fixed: bool = False,
        fixed_scale: bool = False,
    ) -> Variable:
        if key in self.variables:
            raise InvalidArgumentException(f"Variable {key!r} is already in the graph.")
        variable = Variable(key, kind, value, fixed, fixed_scale)
        self.variables[key] = variable
        return variable

    def add_factor(self, factor: Factor) -> Factor:
        missing = [key for key in factor.keys if key not in self.variables]
        if missing:
            raise InvalidArgumentException(f"Factor references unknown variables {missing}.")
        self.factors.append(factor)
        return factor

    def __contains__(self, key: Hashable) -> bool:
        return key in self.variables

    def value(self, key: Hashable) -> Any:
        return self.variables[key].value

    def values_of(self, factor: Factor) -> List[Any]:
        return [self.variables[key].value for key in factor.keys]

    def fix(self, *keys: Hashable):
        for key in keys:
            self.variables[key].fixed = True

    def free_variables(self) -> List[Variable]:
        return [v for v in self.variables.values() if not v.fixed]

    def factors_of_kind(self, kind: FactorKind) -> List[Factor]:
        return [f for f in self.factors if f.kind is kind]

    def neighbours(self) -> Dict[Hashable, List[int]]:
        """Indices of the factors touching each variable."""
        result: Dict[Hashable, List[int]] = {key: [] for key in self.variables}
        for index, factor in enumerate(self.factors):
            for key in factor.keys:
                result[key].append(index)
        return result

    def chi2(self, factors: Iterable[Factor] = None) -> float:
        """Total robust cost at the current values."""
        total = 0.0
        for factor in self.factors if factors is None else factors:
            try:
                total += factor.cost(self.values_of(factor))
            except ProjectionException:
                continue
        return total

    def snapshot(self) -> Dict[Hashable, Any]:
        return {key: v.copy_value() for key, v in self.variables.items()}

    def restore(self, snapshot: Dict[Hashable, Any]):
        for key, value in snapshot.items():
            self.variables[key].value = value

    def __len__(self) -> int:
        return len(self.factors)

    def __repr__(self) -> str:
        return f"<FactorGraph variables={len(self.variables)} factors={len(self.factors)}>"
