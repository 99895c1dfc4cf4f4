import math

import numpy as np
import pytest
import scipy.sparse as sp

from herdlab import analytics, model
from herdlab.continuation import (ACTIVE_PARAMETERS, STOP_DG, STOP_MAX_POINTS, STOP_RANGE,
                                  BvpSystem, ConvergenceError, HomotopyError, StepConfig,
                                  _newton_fixed, bvp_jacobian, bvp_residual, continue_branch,
                                  count_interfaces, detect_branch_points, determinant_sign,
                                  diffusion_determinant, dominant_mode, homogeneous_start,
                                  homotopy_rho_to_zero, l2_norm_z, newton_solve,
                                  smallest_singular_triplets, switch_branch, _splu)
from herdlab.grid import Grid, StateField, discrete_neumann_eigenvalue


def fd_matrix(fun, x, h=1e-7):
    cols = []
    for j in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        cols.append((fun(xp) - fun(xm)) / (2 * h))
    return np.column_stack(cols)


def wavy_state(grid, mean, rng):
    x = grid.x / grid.length
    u1 = mean + 0.2 * np.cos(2 * math.pi * x) + 0.02 * rng.standard_normal(grid.n_cells)
    return StateField(u1, 1.0 + 0.3 * np.sin(3 * x) + 0.1 * rng.standard_normal(grid.n_cells),
                      grid)


@pytest.fixture(scope="module")
def case1_branch_100():
    params = model.ModelParams(delta=-25.0, kappa=1.0, alpha=0.2, length=20.0, rho=0.05,
                               u1_mean=0.594)
    system = BvpSystem(100, params, "delta")
    cfg = StepConfig()
    branch = continue_branch(system, homogeneous_start(system, -25.0), (-25.0, 0.0), cfg)
    return system, cfg, branch, detect_branch_points(branch, cfg)


class TestResidual:
    def test_homogeneous_state_solves(self, case1):
        grid = Grid(50, case1.length)
        u1s, u2s = model.steady_state(case1)
        r = bvp_residual(StateField.constant(grid, u1s, u2s), case1)
        assert r.shape == (100,) and np.max(np.abs(r)) < 1e-14

    def test_jacobian_matches_finite_differences(self, case1):
        rng = np.random.default_rng(7)
        grid = Grid(16, case1.length)
        s = wavy_state(grid, 0.5, rng)
        J = bvp_jacobian(s, case1).toarray()
        J_fd = fd_matrix(lambda v: bvp_residual(StateField.from_vector(v, grid), case1),
                         s.as_vector())
        assert np.max(np.abs(J - J_fd)) <= 1e-6 * np.max(np.abs(J_fd))

    @pytest.mark.parametrize("name", ACTIVE_PARAMETERS)
    def test_augmented_jacobian_matches_finite_differences(self, case1, name):
        rng = np.random.default_rng(8)
        system = BvpSystem(16, case1, name)
        grid = system.grid_at(system.parameter_value())
        X = system.pack(wavy_state(grid, 0.594, rng), system.parameter_value(), 0.01)
        J = system.full_jacobian(X).toarray()
        J_fd = fd_matrix(system.residual, X, h=1e-6)
        assert np.max(np.abs(J - J_fd)) <= 1e-6 * np.max(np.abs(J_fd))

    def test_diffusion_determinant(self, case1):
        u1 = np.array([0.2, 0.5])
        assert diffusion_determinant(u1, case1) == pytest.approx(1.0 - 25.0 * u1 * (1 - u1))


class TestHelpers:
    def test_count_interfaces_ignores_plateaus(self):
        u = 0.5 + np.array([0.1, 1e-8, -1e-8, -0.1, -0.2, 1e-7, 0.3])
        assert count_interfaces(u, 0.5) == 2

    def test_dominant_mode_of_constant_is_zero(self):
        assert dominant_mode(np.full(16, 0.3), np.zeros(16)) == 0

    def test_dominant_mode(self):
        grid = Grid(64, 3.0)
        u = 0.5 + 0.1 * np.cos(5 * math.pi * grid.x / 3.0)
        assert dominant_mode(u, np.zeros(64)) == 5

    def test_l2_norm_z_of_constant_state(self):
        # derivative components vanish; the norm is taken per unit length
        s = StateField.constant(Grid(10, 4.0), 0.5, 1.5)
        assert l2_norm_z(s) == pytest.approx(math.sqrt(0.25 + 2.25))

    def test_l2_norm_z_includes_derivatives(self):
        grid = Grid(400, 2.0)
        s = StateField(np.cos(math.pi * grid.x / 2.0), np.zeros(400), grid)
        # mean of cos^2 + (pi/2)^2 sin^2 over the interval
        assert l2_norm_z(s) == pytest.approx(math.sqrt(0.5 + 0.5 * (math.pi / 2) ** 2), rel=1e-4)

    def test_determinant_sign_matches_dense(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            A = sp.random(30, 30, density=0.2, random_state=rng) + sp.diags(rng.standard_normal(30))
            A = sp.csc_matrix(A)
            assert determinant_sign(_splu(A)) == int(np.sign(np.linalg.slogdet(A.toarray())[0]))

    @pytest.mark.parametrize("n", [40, 801])
    def test_smallest_singular_values_match_dense_svd(self, n):
        rng = np.random.default_rng(n)
        A = sp.diags([rng.random(n - 1), 2 + rng.random(n), rng.random(n - 1)], [-1, 0, 1],
                     format="csc")
        A = A + sp.csc_matrix(([1e-3], ([0], [n - 1])), shape=(n, n))
        trip = smallest_singular_triplets(A, k=2)
        dense = np.linalg.svd(A.toarray(), compute_uv=False)[::-1][:2]
        assert trip.values[:2] == pytest.approx(dense, rel=1e-8)


class TestNewtonSolve:
    params = model.ModelParams(delta=-21.5, kappa=1.0, alpha=0.2, length=20.0, rho=0.05,
                               u1_mean=0.594)

    def test_steady_state_converges_immediately(self):
        grid = Grid(100, 20.0)
        u1s, u2s = model.steady_state(self.params)
        system = BvpSystem(100, self.params)
        _, iterations = _newton_fixed(system, system.pack(StateField.constant(grid, u1s, u2s),
                                                          -21.5), 1e-9, 50)
        assert iterations <= 2

    def test_perturbed_guess_past_second_bifurcation_has_two_interfaces(self):
        # delta = -21.5 lies past delta_b^2 ~ -20.81 on the side of the mode-2 branch
        grid = Grid(200, 20.0)
        u1s, u2s = model.steady_state(self.params)
        e = analytics.null_eigenfunction(2, self.params, grid)
        scale = 0.3 / np.max(np.abs(e.u1))
        guess = StateField(u1s + scale * e.u1, u2s + scale * e.u2, grid)
        s = newton_solve(guess, self.params)
        assert np.max(np.abs(bvp_residual(s, self.params))) <= 1e-9
        assert count_interfaces(s.u1, u1s) == 2

    def test_guess_outside_unit_interval(self):
        grid = Grid(50, 20.0)
        with pytest.raises(ConvergenceError):
            newton_solve(StateField.constant(grid, 1.5, 0.0), self.params)

    def test_tolerance_must_be_positive(self):
        with pytest.raises(ValueError):
            newton_solve(StateField.constant(Grid(50, 20.0), 0.5, 0.0), self.params, tol=0.0)


class TestStepConfig:
    @pytest.mark.parametrize("kw", [{"ds": 1.0}, {"ds_min": 0.0}, {"tol": 0.0},
                                    {"max_points": 1}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            StepConfig(**kw)


class TestHomogeneousBranch:
    def test_points_are_converged(self, case1_branch_100):
        system, cfg, branch, _ = case1_branch_100
        for p in branch.points:
            assert np.max(np.abs(system.residual(p.vector()))) <= cfg.tol

    def test_stops_at_degeneracy(self, case1_branch_100):
        system, _, branch, detections = case1_branch_100
        assert branch.stop_reason == STOP_DG
        delta_d = model.delta_d(system.params)
        assert branch.points[-1].parameter_value == pytest.approx(delta_d, abs=1e-3)
        assert all(abs(d.parameter_value - delta_d) > 1e-3 for d in detections)

    def test_detections_match_discrete_formula(self, case1_branch_100):
        system, _, _, detections = case1_branch_100
        grid = system.grid_at(-25.0)
        for d in detections:
            n = d.dominant_mode
            mu = discrete_neumann_eigenvalue(n, grid)
            assert d.parameter_value == pytest.approx(
                analytics.delta_b(n, system.params, mu=mu), abs=1e-6)
            assert d.is_bifurcation

    def test_detections_ordered_and_below_delta_d(self, case1_branch_100):
        system, _, _, detections = case1_branch_100
        values = [d.parameter_value for d in detections]
        assert np.all(np.diff(values) > 0)
        assert values[-1] < model.delta_d(system.params)
        assert [d.dominant_mode for d in detections[:5]] == [2, 3, 4, 5, 6]

    def test_decreasing_run_finds_one_point(self, case1):
        system = BvpSystem(100, case1, "delta")
        cfg = StepConfig(ds_max=1.0)
        branch = continue_branch(system, homogeneous_start(system, -25.0), (-130.0, -25.0), cfg,
                                 direction=-1.0)
        detections = detect_branch_points(branch, cfg)
        assert branch.stop_reason == STOP_RANGE and branch.points[-1].parameter_value == -130.0
        assert len(detections) == 1 and detections[0].dominant_mode == 1
        mu = discrete_neumann_eigenvalue(1, Grid(100, 20.0))
        assert detections[0].parameter_value == pytest.approx(
            analytics.delta_b(1, case1, mu=mu), abs=1e-6)

    def test_max_points(self, case1):
        system = BvpSystem(50, case1, "delta")
        branch = continue_branch(system, homogeneous_start(system, -25.0), (-25.0, 0.0),
                                 StepConfig(max_points=5))
        assert branch.stop_reason == STOP_MAX_POINTS and len(branch.points) == 5

    def test_start_outside_range(self, case1):
        system = BvpSystem(50, case1, "delta")
        with pytest.raises(ValueError):
            continue_branch(system, homogeneous_start(system, -25.0), (-20.0, 0.0))

    def test_rho_as_active_parameter(self, case1):
        system = BvpSystem(50, case1, "rho")
        branch = continue_branch(system, homogeneous_start(system, 0.05), (0.0, 0.05),
                                 StepConfig(ds=0.01), direction=-1.0)
        assert branch.stop_reason == STOP_RANGE and branch.points[-1].parameter_value == 0.0


class TestSwitching:
    def test_switched_branch_has_two_interfaces(self, case1_branch_100):
        system, cfg, _, detections = case1_branch_100
        branch = switch_branch(detections[0], 1, system, (-22.0, 0.0), cfg)
        assert branch.stop_reason == STOP_RANGE
        assert branch.points[0].parameter_value == detections[0].parameter_value
        assert all(p.n_interfaces == 2 for p in branch.points[1:])
        assert branch.provenance.direction == 1 and branch.provenance.mode_hint == 2

    def test_invalid_direction(self, case1_branch_100):
        system, cfg, _, detections = case1_branch_100
        with pytest.raises(ValueError):
            switch_branch(detections[0], 0, system, (-22.0, 0.0), cfg)

    def test_homotopy_failure_reports_last_rho(self, case1_branch_100):
        system, cfg, _, detections = case1_branch_100
        branch = switch_branch(detections[0], 1, system, (-22.0, 0.0), cfg)
        with pytest.raises(HomotopyError) as info:
            homotopy_rho_to_zero(branch.points[-1], system, cfg)
        assert 0.0 < info.value.last_rho < 0.05
        assert info.value.branch.stop_reason == STOP_DG

    def test_homotopy_needs_positive_rho(self, case1_branch_100):
        system, cfg, branch, _ = case1_branch_100
        sys0 = BvpSystem(100, system.params.replace(rho=0.0), "delta")
        with pytest.raises(ValueError):
            homotopy_rho_to_zero(homogeneous_start(sys0, -25.0), sys0, cfg)
