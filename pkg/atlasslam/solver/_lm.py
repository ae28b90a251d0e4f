import logging
from typing import Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .base import Factor, FactorGraph, OptimizeResult, Variable, VariableKind
from .factors import ReprojectionFactor
from ..config import SolverConfig
from ..exceptions import (
    ProjectionException,
    SingularSystemException,
    StructureViolationException,
)

logger = logging.getLogger(__name__)

_DENSE_LIMIT = 3000
_EIGEN_LIMIT = 2500
_MIN_LAMBDA = 1e-15


class _Layout:
    """Column layout of the free variables, points last when eliminated."""

    def __init__(self, graph: FactorGraph, use_schur: bool):
        free = graph.free_variables()
        if use_schur:
            points = [v for v in free if v.kind is VariableKind.POINT]
            others = [v for v in free if v.kind is not VariableKind.POINT]
        else:
            points, others = [], free
        self.order: List[Variable] = others + points
        self.offsets: Dict[Hashable, int] = {}
        offset = 0
        for variable in self.order:
            self.offsets[variable.key] = offset
            offset += variable.dim
        self.size = offset
        self.point_count = len(points)
        self.reduced_size = offset - 3 * len(points)
        self.point_keys = {v.key for v in points}


def _skew_many(v: np.ndarray) -> np.ndarray:
    result = np.zeros((len(v), 3, 3))
    result[:, 0, 1], result[:, 0, 2] = -v[:, 2], v[:, 1]
    result[:, 1, 0], result[:, 1, 2] = v[:, 2], -v[:, 0]
    result[:, 2, 0], result[:, 2, 1] = -v[:, 1], v[:, 0]
    return result


def _robust(norms: np.ndarray, delta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Costs and IRLS weights of whitened norms, ``delta = inf`` for no kernel."""
    inside = norms <= delta
    finite = np.where(np.isfinite(delta), delta, 0.0)
    costs = np.where(inside, norms * norms, 2.0 * finite * norms - finite * finite)
    weights = np.where(inside, 1.0, finite / np.where(inside, 1.0, norms))
    return costs, weights


class _ReprojectionBatch:
    """Reprojection factors sharing one camera, evaluated together."""

    def __init__(self, indices: List[int], factors: List[ReprojectionFactor]):
        self.indices = indices
        self.camera = factors[0].camera
        extrinsics = factors[0].camera_from_body
        self.rotation_cb = extrinsics.rotation
        self.translation_cb = extrinsics.translation
        self.pose_keys = [f.keys[0] for f in factors]
        self.point_keys = [f.keys[1] for f in factors]
        self.measurements = np.array([f.measurement for f in factors])
        self.sqrt_information = np.array([f.sqrt_information for f in factors])
        self.delta = np.array([np.inf if f.kernel.is_identity else f.kernel.delta for f in factors])

    def evaluate(self, graph: FactorGraph, jacobians: bool):
        variables = graph.variables
        poses = [variables[key].value for key in self.pose_keys]
        rotations = np.array([pose.rotation for pose in poses])
        translations = np.array([pose.translation for pose in poses])
        points = np.array([variables[key].value for key in self.point_keys], dtype=float)

        body = np.einsum("nji,nj->ni", rotations, points - translations)
        x_cam = body @ self.rotation_cb.T + self.translation_cb
        uv, valid = self.camera.project_many(x_cam)
        whitened = np.einsum("nij,nj->ni", self.sqrt_information, uv - self.measurements)
        norms = np.linalg.norm(whitened, axis=1)
        costs, weights = _robust(norms, self.delta)
        if not jacobians:
            return valid, norms, costs, None

        proj = self.camera.projection_jacobian_many(x_cam) @ self.rotation_cb
        jac_pose = np.concatenate((proj @ _skew_many(body), -proj), axis=2)
        jac_point = proj @ np.transpose(rotations, (0, 2, 1))
        scale = np.sqrt(weights)[:, None, None]
        whiten = scale * self.sqrt_information
        return valid, norms, costs, (np.sqrt(weights)[:, None] * whitened, whiten @ jac_pose, whiten @ jac_point)


def _group_by_camera(factors: Sequence[ReprojectionFactor], indices: Sequence[int]) -> List[_ReprojectionBatch]:
    groups: Dict[Tuple[int, int], List[int]] = {}
    for index, factor in zip(indices, factors):
        groups.setdefault((id(factor.camera), id(factor.camera_from_body)), []).append(index)
    lookup = dict(zip(indices, factors))
    return [_ReprojectionBatch(members, [lookup[i] for i in members]) for members in groups.values()]


def reprojection_chi2(graph: FactorGraph, factors: Sequence[ReprojectionFactor]) -> np.ndarray:
    """Squared whitened errors of reprojection factors, ``inf`` where the point does not project."""
    result = np.full(len(factors), np.inf)
    for batch in _group_by_camera(factors, list(range(len(factors)))):
        valid, norms, _, _ = batch.evaluate(graph, False)
        rows = np.asarray(batch.indices)
        result[rows[valid]] = norms[valid] ** 2
    return result


class _Evaluator:
    """Factors of a graph split into batched reprojections and the rest."""

    def __init__(self, graph: FactorGraph):
        self.graph = graph
        batched = [i for i, factor in enumerate(graph.factors) if type(factor) is ReprojectionFactor]
        self.generic = [i for i, factor in enumerate(graph.factors) if type(factor) is not ReprojectionFactor]
        self.batches = _group_by_camera([graph.factors[i] for i in batched], batched)

    def cost(self, active: Optional[np.ndarray] = None) -> float:
        """Robust cost; ``inf`` if a factor in ``active`` cannot be evaluated."""
        graph = self.graph
        total = 0.0
        for index in self.generic:
            if active is not None and not active[index]:
                continue
            factor = graph.factors[index]
            try:
                total += factor.cost(graph.values_of(factor))
            except ProjectionException:
                if active is not None:
                    return np.inf
        for batch in self.batches:
            valid, _, costs, _ = batch.evaluate(graph, False)
            use = valid if active is None else active[batch.indices]
            if active is not None and np.any(use & ~valid):
                return np.inf
            total += float(costs[use].sum())
        return total


def _blocks_to_coo(blocks: np.ndarray, row_starts: np.ndarray, col_starts: np.ndarray):
    """Triplets of ``(N, r, c)`` dense blocks placed at the given offsets."""
    _, r, c = blocks.shape
    rows = np.broadcast_to(row_starts[:, None, None] + np.arange(r)[None, :, None], blocks.shape)
    cols = np.broadcast_to(col_starts[:, None, None] + np.arange(c)[None, None, :], blocks.shape)
    return rows.ravel(), cols.ravel(), blocks.ravel()


class _LinearSystem:
    def __init__(self, jacobian, residual, active: np.ndarray, chi2: float):
        self.jacobian = jacobian
        self.residual = residual
        self.active = active
        self.chi2 = chi2
        jt = jacobian.T.tocsr()
        self.hessian = (jt @ jacobian).tocsr()
        self.gradient = jt @ residual


def _check_structure(graph: FactorGraph, layout: _Layout):
    for factor in graph.factors:
        points = [key for key in factor.keys if key in layout.point_keys]
        if len(points) > 1:
            raise StructureViolationException(
                "A factor connects two eliminated point variables.",
                {"factor": type(factor).__name__, "points": points},
            )


def _linearize(evaluator: _Evaluator, layout: _Layout) -> _LinearSystem:
    graph = evaluator.graph
    rows, cols, vals, residuals = [], [], [], []
    active = np.zeros(len(graph.factors), dtype=bool)
    chi2 = 0.0
    row = 0
    for index in evaluator.generic:
        factor = graph.factors[index]
        try:
            residual, jacobians = factor.linearize(graph.values_of(factor))
        except ProjectionException:
            # skipped this iteration, e.g. a point moved behind a camera
            continue
        active[index] = True

        whitened = factor.sqrt_information @ residual
        norm = float(np.linalg.norm(whitened))
        chi2 += factor.kernel.cost(norm)
        scale = np.sqrt(factor.kernel.weight(norm))
        dim = len(whitened)
        residuals.append(scale * whitened)

        for key, jacobian in zip(factor.keys, jacobians):
            offset = layout.offsets.get(key)
            if offset is None:
                continue
            width = graph.variables[key].dim
            block = scale * (factor.sqrt_information @ jacobian[:, :width])
            r, c, v = _blocks_to_coo(block[None], np.array([row]), np.array([offset]))
            rows.append(r)
            cols.append(c)
            vals.append(v)
        row += dim

    for batch in evaluator.batches:
        valid, _, costs, (whitened, jac_pose, jac_point) = batch.evaluate(graph, True)
        kept = np.nonzero(valid)[0]
        if len(kept) == 0:
            continue
        active[np.asarray(batch.indices)[kept]] = True
        chi2 += float(costs[kept].sum())
        residuals.append(whitened[kept].ravel())
        row_starts = row + 2 * np.arange(len(kept))
        for keys, blocks in ((batch.pose_keys, jac_pose), (batch.point_keys, jac_point)):
            offsets = np.array([layout.offsets.get(keys[k], -1) for k in kept])
            free = offsets >= 0
            if np.any(free):
                r, c, v = _blocks_to_coo(blocks[kept][free], row_starts[free], offsets[free])
                rows.append(r)
                cols.append(c)
                vals.append(v)
        row += 2 * len(kept)

    if rows:
        jacobian = scipy.sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(row, layout.size),
        ).tocsr()
    else:
        jacobian = scipy.sparse.csr_matrix((row, layout.size))
    residual = np.concatenate(residuals) if residuals else np.zeros(0)
    return _LinearSystem(jacobian, residual, active, chi2)


def _block_diagonal(matrix, count: int, size: int = 3) -> np.ndarray:
    """Diagonal ``size×size`` blocks of a sparse block-diagonal matrix."""
    blocks = np.zeros((count, size, size))
    base = np.arange(count) * size
    for a in range(size):
        for b in range(size):
            diagonal = matrix.diagonal(b - a)
            blocks[:, a, b] = diagonal[base + min(a, b)]
    return blocks


def _damp(hessian, damping: float):
    if damping <= 0:
        return hessian
    diagonal = hessian.diagonal()
    floor = 1e-12 * max(float(diagonal.max(initial=0.0)), 1e-12)
    return (hessian + scipy.sparse.diags(damping * np.maximum(diagonal, floor))).tocsr()


def _dense_solve(matrix: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    factor = scipy.linalg.cho_factor(matrix, check_finite=False)
    return scipy.linalg.cho_solve(factor, rhs, check_finite=False)


def _solve_full(hessian, gradient: np.ndarray) -> np.ndarray:
    if hessian.shape[0] <= _DENSE_LIMIT:
        return _dense_solve(hessian.toarray(), -gradient)
    solution = scipy.sparse.linalg.spsolve(hessian.tocsc(), -gradient)
    if not np.all(np.isfinite(solution)):
        raise np.linalg.LinAlgError("Sparse solve failed.")
    return solution


class ReducedSystem:
    """Normal equations with the point variables eliminated.

    Solving :attr:`matrix` ``·δc =`` :attr:`rhs` gives the increments of the
    non-point variables; :meth:`back_substitute` recovers the point
    increments.
    """

    matrix: np.ndarray
    """Dense Schur complement over the non-point variables."""

    rhs: np.ndarray
    """Right-hand side of the reduced system."""

    def __init__(self, hessian, gradient: np.ndarray, reduced_size: int, point_count: int):
        n = reduced_size
        h_cc = hessian[:n, :n]
        h_cp = hessian[:n, n:]
        h_pc = hessian[n:, :n]
        g_c = gradient[:n]
        g_p = gradient[n:]

        if point_count:
            blocks = _block_diagonal(hessian[n:, n:], point_count)
            inverse_blocks = np.linalg.inv(blocks)
            self._point_inverse = scipy.sparse.bsr_matrix(
                (inverse_blocks, np.arange(point_count), np.arange(point_count + 1)),
                shape=(3 * point_count, 3 * point_count),
            )
            coupling = (h_cp @ self._point_inverse).tocsr()
            self.matrix = (h_cc - coupling @ h_pc).toarray()
            self.rhs = -g_c + coupling @ g_p
        else:
            self._point_inverse = None
            self.matrix = h_cc.toarray()
            self.rhs = -g_c
        self._h_pc = h_pc
        self._g_p = g_p

    def back_substitute(self, delta_c: np.ndarray) -> np.ndarray:
        """Full increment vector from the reduced solution."""
        if self._point_inverse is None:
            return delta_c
        delta_p = self._point_inverse @ (-self._g_p - self._h_pc @ delta_c)
        return np.concatenate((delta_c, delta_p))

    def solve(self) -> np.ndarray:
        if self.matrix.shape[0] == 0:
            return self.back_substitute(np.zeros(0))
        return self.back_substitute(_dense_solve(self.matrix, self.rhs))


def _solve(system: _LinearSystem, layout: _Layout, damping: float, use_schur: bool) -> np.ndarray:
    hessian = _damp(system.hessian, damping)
    if use_schur and layout.point_count:
        return ReducedSystem(hessian, system.gradient, layout.reduced_size, layout.point_count).solve()
    return _solve_full(hessian, system.gradient)


def _is_rank_deficient(matrix: np.ndarray, tol: float) -> bool:
    diagonal = np.diag(matrix).copy()
    if diagonal.size == 0:
        return False
    peak = float(diagonal.max())
    if peak <= 0 or np.any(diagonal <= 1e-30 * peak):
        return True
    inv_sqrt = 1.0 / np.sqrt(diagonal)
    scaled = matrix * inv_sqrt[:, None] * inv_sqrt[None, :]
    if scaled.shape[0] <= _EIGEN_LIMIT:
        eigenvalues = scipy.linalg.eigvalsh(scaled, check_finite=False)
        return eigenvalues[0] < tol * eigenvalues[-1]
    try:
        lower = scipy.linalg.cholesky(scaled, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError:
        return True
    return float(np.min(np.diag(lower)) ** 2) < tol


def _any_rank_deficient_block(blocks: np.ndarray, tol: float) -> bool:
    """Batched :func:`_is_rank_deficient` over small diagonal blocks."""
    diagonal = np.diagonal(blocks, axis1=1, axis2=2)
    peak = diagonal.max(axis=1)
    if np.any(peak <= 0) or np.any(diagonal <= 1e-30 * peak[:, None]):
        return True
    inv_sqrt = 1.0 / np.sqrt(diagonal)
    eigenvalues = np.linalg.eigvalsh(blocks * inv_sqrt[:, :, None] * inv_sqrt[:, None, :])
    return bool(np.any(eigenvalues[:, 0] < tol * eigenvalues[:, -1]))


def _check_singular(system: _LinearSystem, layout: _Layout, use_schur: bool, tol: float):
    hessian = system.hessian
    context = {"variables": len(layout.order), "dimension": layout.size}
    if use_schur and layout.point_count:
        n = layout.reduced_size
        blocks = _block_diagonal(hessian[n:, n:], layout.point_count)
        if _any_rank_deficient_block(blocks, tol):
            raise SingularSystemException("A point variable is not constrained.", context)
        reduced = ReducedSystem(hessian, system.gradient, n, layout.point_count).matrix
        if _is_rank_deficient(reduced, tol):
            raise SingularSystemException("The free variables are not fully constrained.", context)
    elif _is_rank_deficient(hessian.toarray(), tol):
        raise SingularSystemException("The free variables are not fully constrained.", context)


def _apply(layout: _Layout, delta: np.ndarray):
    for variable in layout.order:
        offset = layout.offsets[variable.key]
        variable.value = variable.retract(delta[offset : offset + variable.dim])


def optimize(
    graph: FactorGraph,
    config: Optional[SolverConfig] = None,
    max_iterations: Optional[int] = None,
    use_schur: Optional[bool] = None,
) -> OptimizeResult:
    """Robust Levenberg-Marquardt over the free variables of a graph.

    Arguments:
        graph: The factor graph; free variables are updated in place, fixed
            variables are never touched.
        config: Damping schedule and tolerances.
        max_iterations: Overrides ``config.max_iterations``.
        use_schur: Overrides ``config.use_schur``.

    Returns:
        The cost before and after, and the number of accepted steps.

    Raises:
        SingularSystemException: If the free variables are not fully constrained.
        StructureViolationException: If Schur elimination is requested for a
            graph where a factor connects two point variables.
    """
    config = config if config else SolverConfig()
    iterations_limit = config.max_iterations if max_iterations is None else max_iterations
    use_schur = config.use_schur if use_schur is None else use_schur

    evaluator = _Evaluator(graph)
    initial = evaluator.cost()
    layout = _Layout(graph, use_schur)
    if layout.size == 0:
        return OptimizeResult(initial, initial, 0, True)
    if use_schur and layout.point_count:
        _check_structure(graph, layout)

    damping = config.lambda_initial
    chi2 = initial
    iterations = 0
    converged = False
    for iteration in range(iterations_limit):
        if chi2 <= config.chi2_floor:
            converged = True
            break
        system = _linearize(evaluator, layout)
        chi2 = system.chi2
        if iteration == 0:
            _check_singular(system, layout, use_schur, config.singularity_tol)

        accepted = False
        while damping <= config.lambda_max:
            try:
                delta = _solve(system, layout, damping, use_schur)
            except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
                damping *= config.lambda_up
                continue
            previous = [v.value for v in layout.order]
            _apply(layout, delta)
            new_chi2 = evaluator.cost(system.active)
            if new_chi2 < chi2:
                accepted = True
                damping = max(damping * config.lambda_down, _MIN_LAMBDA)
                break
            for variable, value in zip(layout.order, previous):
                variable.value = value
            damping *= config.lambda_up

        if not accepted:
            logger.debug("No further decrease at chi2=%.6g", chi2)
            converged = True
            break

        iterations += 1
        decrease = chi2 - new_chi2
        logger.debug(
            "LM iteration %d: chi2 %.6g -> %.6g, lambda=%.1e", iterations, chi2, new_chi2, damping
        )
        step = float(np.linalg.norm(delta))
        relative = decrease / chi2 if chi2 > 0 else 0.0
        chi2 = new_chi2
        if relative < config.term_tol or step < config.step_tol or chi2 <= config.chi2_floor:
            converged = True
            break

    return OptimizeResult(initial, evaluator.cost(), iterations, converged)


def schur_eliminate(graph: FactorGraph) -> ReducedSystem:
    """Undamped normal equations of a graph with its point variables eliminated.

    Raises:
        StructureViolationException: If a factor connects two point variables.
    """
    layout = _Layout(graph, True)
    _check_structure(graph, layout)
    system = _linearize(_Evaluator(graph), layout)
    return ReducedSystem(system.hessian, system.gradient, layout.reduced_size, layout.point_count)


def solve_normal_equations(
    graph: FactorGraph, damping: float = 0.0, use_schur: bool = False
) -> Dict[Hashable, np.ndarray]:
    """One Gauss-Newton (or damped) step, as increments keyed by variable."""
    layout = _Layout(graph, use_schur)
    if use_schur:
        _check_structure(graph, layout)
    system = _linearize(_Evaluator(graph), layout)
    delta = _solve(system, layout, damping, use_schur)
    return {
        v.key: delta[layout.offsets[v.key] : layout.offsets[v.key] + v.dim] for v in layout.order
    }


def marginal_covariance(graph: FactorGraph, keys: Sequence[Hashable]) -> np.ndarray:
    """Covariance of some free variables from the inverse of the information.

    Raises:
        SingularSystemException: If the information matrix is not invertible.
    """
    layout = _Layout(graph, False)
    system = _linearize(_Evaluator(graph), layout)
    try:
        covariance = np.linalg.inv(system.hessian.toarray())
    except np.linalg.LinAlgError:
        raise SingularSystemException("Information matrix is singular.") from None
    index = np.concatenate(
        [np.arange(layout.offsets[k], layout.offsets[k] + graph.variables[k].dim) for k in keys]
    )
    return covariance[np.ix_(index, index)]
