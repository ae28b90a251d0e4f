import numpy as np
import pytest

from atlasslam.config import SolverConfig
from atlasslam.const import HUBER_DELTA_2DOF
from atlasslam.exceptions import InvalidArgumentException, SingularSystemException, StructureViolationException
from atlasslam.manifold import Pose, SimTransform, exp_so3
from atlasslam.solver import (
    DistancePriorFactor,
    Factor,
    FactorGraph,
    KernelKind,
    PoseGraphFactor,
    PosePriorFactor,
    PriorFactor,
    RayAngularFactor,
    ReprojectionFactor,
    RobustKernel,
    SimilarityGraphFactor,
    SimilarityReprojectionFactor,
    Variable,
    VariableKind,
    huber_weight,
    marginal_covariance,
    optimize,
    reprojection_chi2,
    schur_eliminate,
    solve_normal_equations,
)

from .conftest import numeric_jacobian


def random_pose(rng, spread: float = 1.0) -> Pose:
    return Pose(exp_so3(rng.normal(size=3) * 0.4), rng.normal(size=3) * spread)


def assert_jacobians(factor, variables, atol=1e-5):
    values = [v.value for v in variables]
    _, jacobians = factor.linearize(values)
    for index, variable in enumerate(variables):

        def residual(delta, index=index, variable=variable):
            moved = list(values)
            moved[index] = variable.retract(delta)
            return factor.residual(moved)

        numeric = numeric_jacobian(residual, np.zeros(variable.dim), variable.dim)
        assert np.allclose(jacobians[index], numeric, atol=atol), type(factor).__name__


class PointDifference(Factor):
    def __init__(self, a, b):
        super().__init__((a, b), np.eye(3))

    def residual(self, values):
        return values[1] - values[0]

    def linearize(self, values):
        return self.residual(values), [-np.eye(3), np.eye(3)]


class TestKernels:
    def test_huber_weight(self):
        assert huber_weight(1.0, 2.0) == 1.0
        assert huber_weight(4.0, 2.0) == 0.5
        with pytest.raises(InvalidArgumentException):
            huber_weight(1.0, 0.0)

    def test_cost_is_continuous(self):
        kernel = RobustKernel.huber(2.0)
        assert np.isclose(kernel.cost(2.0), 4.0)
        assert np.isclose(kernel.cost(2.0 + 1e-9), 4.0)
        assert np.isclose(kernel.cost(3.0), 2.0 * 2.0 * 3.0 - 4.0)

    def test_none(self):
        kernel = RobustKernel.none()
        assert kernel.is_identity
        assert kernel.weight(100.0) == 1.0
        assert kernel.cost(3.0) == 9.0

    def test_invalid(self):
        with pytest.raises(InvalidArgumentException):
            RobustKernel(KernelKind.HUBER, -1.0)

    def test_default_threshold(self):
        assert RobustKernel.huber().delta == HUBER_DELTA_2DOF


class TestFactorJacobians:
    def test_reprojection(self, rig, rng):
        pose = Variable("pose", VariableKind.POSE, random_pose(rng, 0.2))
        body_point = np.array([4.0, 0.3, -0.4])
        point = Variable("point", VariableKind.POINT, pose.value.act(body_point))
        factor = ReprojectionFactor(
            "pose", "point", rig.cameras[0], rig.extrinsics[0], np.array([300.0, 200.0])
        )
        assert_jacobians(factor, [pose, point], atol=1e-3)

    def test_pose_graph(self, rng):
        a = Variable("a", VariableKind.POSE, random_pose(rng))
        b = Variable("b", VariableKind.POSE, random_pose(rng))
        factor = PoseGraphFactor("a", "b", random_pose(rng))
        assert_jacobians(factor, [a, b])

    def test_similarity_graph(self, rng):
        a = Variable("a", VariableKind.SIM3, SimTransform.from_pose(random_pose(rng), 1.3))
        b = Variable("b", VariableKind.SIM3, SimTransform.from_pose(random_pose(rng), 0.8))
        factor = SimilarityGraphFactor("a", "b", SimTransform.from_pose(random_pose(rng), 1.1))
        assert_jacobians(factor, [a, b])

    def test_ray_angular(self, rng):
        pose = Variable("pose", VariableKind.POSE, random_pose(rng, 0.2))
        point = pose.value.act(np.array([0.5, -0.2, 5.0]))
        factor = RayAngularFactor("pose", np.array([0.1, 0.0, 1.0]), point)
        assert_jacobians(factor, [pose])

    @pytest.mark.parametrize("inverse", [False, True])
    def test_similarity_reprojection(self, rig, rng, inverse):
        transform = SimTransform(1.2, exp_so3(np.array([0.02, -0.05, 0.1])), np.array([0.1, 0.2, 0.0]))
        variable = Variable("sim", VariableKind.SIM3, transform)
        camera_from_world = rig.extrinsics[0]
        factor = SimilarityReprojectionFactor(
            "sim",
            rig.cameras[0],
            camera_from_world,
            np.array([4.0, 0.5, 0.3]),
            np.array([350.0, 250.0]),
            inverse=inverse,
        )
        assert_jacobians(factor, [variable], atol=1e-3)

    def test_priors(self, rng):
        pose = Variable("pose", VariableKind.POSE, random_pose(rng))
        assert_jacobians(PosePriorFactor("pose", random_pose(rng)), [pose])
        other = Variable("other", VariableKind.POSE, random_pose(rng))
        assert_jacobians(DistancePriorFactor("pose", "other", 1.0), [pose, other])

    def test_information_must_be_symmetric(self):
        with pytest.raises(InvalidArgumentException):
            PriorFactor("x", np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_information_must_be_positive(self):
        with pytest.raises(InvalidArgumentException):
            PriorFactor("x", np.zeros(2), np.diag([1.0, -1.0]))


class TestFactorGraph:
    def test_duplicate_variable(self):
        graph = FactorGraph()
        graph.add_variable("x", VariableKind.POINT, np.zeros(3))
        with pytest.raises(InvalidArgumentException):
            graph.add_variable("x", VariableKind.POINT, np.zeros(3))

    def test_unknown_variable(self):
        graph = FactorGraph()
        with pytest.raises(InvalidArgumentException):
            graph.add_factor(PriorFactor("x", np.zeros(3), np.eye(3)))

    def test_neighbours(self):
        graph = FactorGraph()
        graph.add_variable("a", VariableKind.POINT, np.zeros(3))
        graph.add_variable("b", VariableKind.POINT, np.ones(3))
        graph.add_factor(PointDifference("a", "b"))
        graph.add_factor(PriorFactor("a", np.zeros(3), np.eye(3)))
        assert graph.neighbours() == {"a": [0, 1], "b": [0]}
        assert len(graph) == 2

    def test_snapshot_restore(self):
        graph = FactorGraph()
        graph.add_variable("a", VariableKind.POINT, np.zeros(3))
        snapshot = graph.snapshot()
        graph.variables["a"].value = np.ones(3)
        graph.restore(snapshot)
        assert np.allclose(graph.value("a"), 0.0)

    def test_scale_stays_positive(self):
        variable = Variable("s", VariableKind.SCALE, 2.0)
        assert variable.retract(np.array([-50.0])) > 0


class TestOptimize:
    def two_view_graph(self, rig, rng, use_points_noise=0.05):
        graph = FactorGraph()
        poses = [Pose(), Pose(translation=np.array([0.0, 0.5, 0.0]))]
        for index, pose in enumerate(poses):
            graph.add_variable(("pose", index), VariableKind.POSE, pose, fixed=True)
        truth = np.column_stack(
            (rng.uniform(3.0, 6.0, 12), rng.uniform(-1.0, 1.0, 12), rng.uniform(-0.5, 0.5, 12))
        )
        for k, point in enumerate(truth):
            graph.add_variable(
                ("point", k), VariableKind.POINT, point + rng.normal(size=3) * use_points_noise
            )
            for index, pose in enumerate(poses):
                graph.add_factor(
                    ReprojectionFactor(
                        ("pose", index),
                        ("point", k),
                        rig.cameras[0],
                        rig.extrinsics[0],
                        rig.project(pose, point),
                    )
                )
        return graph, truth

    @pytest.mark.parametrize("use_schur", [True, False])
    def test_points_converge(self, rig, rng, use_schur):
        graph, truth = self.two_view_graph(rig, rng)
        result = optimize(graph, max_iterations=60, use_schur=use_schur)
        assert result.chi2 < result.initial_chi2
        assert result.chi2 < 1e-10
        for k, point in enumerate(truth):
            assert np.allclose(graph.value(("point", k)), point, atol=1e-5)
        assert np.allclose(graph.value(("pose", 1)).translation, [0.0, 0.5, 0.0])

    def test_schur_matches_full(self, rig, rng):
        graph, _ = self.two_view_graph(rig, rng)
        graph.variables[("pose", 1)].fixed = False
        graph.add_factor(PosePriorFactor(("pose", 1), graph.value(("pose", 1))))
        reduced = solve_normal_equations(graph, damping=1e-3, use_schur=True)
        full = solve_normal_equations(graph, damping=1e-3, use_schur=False)
        assert reduced.keys() == full.keys()
        for key, delta in full.items():
            assert np.allclose(reduced[key], delta, atol=1e-8)
        assert schur_eliminate(graph).matrix.shape == (6, 6)
    def test_unconstrained_point(self, rig):
        graph = FactorGraph()
        graph.add_variable("pose", VariableKind.POSE, Pose(), fixed=True)
        graph.add_variable("point", VariableKind.POINT, np.array([4.0, 0.0, 0.0]))
        graph.add_factor(
            ReprojectionFactor("pose", "point", rig.cameras[0], rig.extrinsics[0], np.array([360.0, 250.0]))
        )
        with pytest.raises(SingularSystemException):
            optimize(graph)

    def test_structure_violation(self):
        graph = FactorGraph()
        graph.add_variable("a", VariableKind.POINT, np.zeros(3))
        graph.add_variable("b", VariableKind.POINT, np.ones(3))
        graph.add_factor(PointDifference("a", "b"))
        with pytest.raises(StructureViolationException):
            optimize(graph, use_schur=True)
        with pytest.raises(StructureViolationException):
            schur_eliminate(graph)

    def test_pose_graph_chain(self, rng):
        truth = [Pose()]
        for _ in range(4):
            truth.append(truth[-1].compose(random_pose(rng, 0.5)))
        graph = FactorGraph()
        for index, pose in enumerate(truth):
            start = pose if index == 0 else pose.retract(rng.normal(size=6) * 0.05)
            graph.add_variable(index, VariableKind.POSE, start, fixed=index == 0)
        for index in range(len(truth) - 1):
            relative = truth[index].inverse().compose(truth[index + 1])
            graph.add_factor(PoseGraphFactor(index, index + 1, relative))
        optimize(graph, SolverConfig(max_iterations=50))
        for index, pose in enumerate(truth):
            assert np.allclose(graph.value(index).translation, pose.translation, atol=1e-6)
            assert np.allclose(graph.value(index).rotation, pose.rotation, atol=1e-6)

    def test_nothing_to_solve(self):
        graph = FactorGraph()
        graph.add_variable("x", VariableKind.POINT, np.ones(3), fixed=True)
        graph.add_factor(PriorFactor("x", np.zeros(3), np.eye(3)))
        result = optimize(graph)
        assert result.iterations == 0
        assert np.isclose(result.chi2, 3.0)

    def test_marginal_covariance(self):
        graph = FactorGraph()
        graph.add_variable("x", VariableKind.VELOCITY, np.zeros(3))
        graph.add_factor(PriorFactor("x", np.ones(3), np.eye(3) * 4.0))
        assert np.allclose(marginal_covariance(graph, ["x"]), np.eye(3) * 0.25)


class TestBatchedReprojection:
    def graph(self, rig, rng):
        graph = FactorGraph()
        for index in range(3):
            pose = Pose(exp_so3(rng.normal(size=3) * 0.02), np.array([0.0, 0.3 * index, 0.0]))
            graph.add_variable(("pose", index), VariableKind.POSE, pose, fixed=index == 0)
        factors = []
        for k in range(10):
            point = np.array([rng.uniform(3.0, 6.0), rng.uniform(-1.0, 1.0), rng.uniform(-0.5, 0.5)])
            graph.add_variable(("point", k), VariableKind.POINT, point)
            for index in range(3):
                measured = rig.project(graph.value(("pose", index)), point) + rng.normal(size=2) * 3.0
                factor = ReprojectionFactor(("pose", index), ("point", k), rig.cameras[0], rig.extrinsics[0], measured)
                graph.add_factor(factor)
                factors.append(factor)
        return graph, factors

    def test_chi2_matches_factors(self, rig, rng):
        graph, factors = self.graph(rig, rng)
        chi2 = reprojection_chi2(graph, factors)
        expected = [f.whitened_norm(graph.values_of(f)) ** 2 for f in factors]
        assert np.allclose(chi2, expected)

    def test_point_behind_camera(self, rig, rng):
        graph, factors = self.graph(rig, rng)
        graph.variables[("point", 0)].value = np.array([-4.0, 0.0, 0.0])
        chi2 = reprojection_chi2(graph, factors)
        assert np.all(np.isinf(chi2[:3]))
        assert np.all(np.isfinite(chi2[3:]))

    def test_initial_cost_is_sum_of_factors(self, rig, rng):
        graph, _ = self.graph(rig, rng)
        graph.add_factor(PosePriorFactor(("pose", 1), graph.value(("pose", 1))))
        expected = sum(f.cost(graph.values_of(f)) for f in graph.factors)
        result = optimize(graph, max_iterations=5)
        assert np.isclose(result.initial_chi2, expected)
        assert result.chi2 <= result.initial_chi2

    def test_invalid_sigma(self, rig):
        with pytest.raises(InvalidArgumentException):
            ReprojectionFactor("pose", "point", rig.cameras[0], rig.extrinsics[0], np.zeros(2), sigma_px=0.0)
