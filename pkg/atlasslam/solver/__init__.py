"""Robust nonlinear least squares over manifold-valued variables."""

from .base import (
    Factor,
    FactorGraph,
    FactorKind,
    KernelKind,
    OptimizeResult,
    RobustKernel,
    Variable,
    VariableKind,
    huber_weight,
)
from .factors import (
    BiasPriorFactor,
    BiasWalkFactor,
    DistancePriorFactor,
    InertialFactor,
    PoseGraphFactor,
    PosePriorFactor,
    PriorFactor,
    RayAngularFactor,
    ReprojectionFactor,
    ScaledInertialFactor,
    SimilarityGraphFactor,
    SimilarityReprojectionFactor,
)
from ._lm import (
    ReducedSystem,
    marginal_covariance,
    optimize,
    reprojection_chi2,
    schur_eliminate,
    solve_normal_equations,
)
