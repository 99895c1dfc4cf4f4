import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from herdlab import integrator as itg
from herdlab.grid import Grid, StateField
from herdlab.integrator import (ENTROPY, PRIMAL, StepFailure, TimeStepperConfig,
                                cosine_perturbation, entropy_balance, evolve, fit_decay_rate,
                                l2_distance, l2_distance_bound, step_entropy_variables,
                                step_primal)
from herdlab.model import ModelParams, Nonlinearity

PARAMS = ModelParams(delta=1.0, kappa=1.0, alpha=10.0, length=math.pi)


def fd_jacobian(fun, x, h=1e-7):
    f0 = fun(x)
    J = np.empty((len(f0), len(x)))
    for j in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        J[:, j] = (fun(xp) - fun(xm)) / (2 * h)
    return J


def random_state(grid, rng, lo=0.1, hi=0.9):
    return StateField(lo + (hi - lo) * rng.random(grid.n_cells),
                      rng.standard_normal(grid.n_cells), grid)


class TestConfig:
    def test_entropy_mode_needs_regularisation(self):
        with pytest.raises(ValueError):
            TimeStepperConfig(eps_reg=0.0, mode=ENTROPY)

    def test_primal_mode_allows_zero_regularisation(self):
        assert TimeStepperConfig(eps_reg=0.0, mode=PRIMAL).eps_reg == 0.0

    @pytest.mark.parametrize("kw", [{"tau": 0.0}, {"mode": "implicit"}, {"t_final": -1.0},
                                    {"newton_max_iter": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TimeStepperConfig(**kw)


class TestJacobians:
    @pytest.mark.parametrize("delta", [1.0, -2.0, 0.3])
    def test_entropy_jacobian_matches_finite_differences(self, delta):
        rng = np.random.default_rng(11)
        grid = Grid(12, 2.0)
        params = PARAMS.replace(delta=delta, length=2.0)
        prev = random_state(grid, rng)
        cfg = TimeStepperConfig(tau=0.05, eps_reg=1e-3)
        w = itg.entropy_variables(random_state(grid, rng), params)
        J = itg.entropy_jacobian(w, prev, params, cfg).toarray()
        J_fd = fd_jacobian(lambda v: itg.entropy_residual(v, prev, params, cfg), w)
        assert np.max(np.abs(J - J_fd)) <= 1e-6 * np.max(np.abs(J_fd))

    def test_entropy_jacobian_with_nearly_equal_neighbours(self):
        # exercises the Taylor branch of the divided-difference mobility
        rng = np.random.default_rng(2)
        grid = Grid(10, 1.0)
        prev = random_state(grid, rng)
        cfg = TimeStepperConfig(tau=0.05, eps_reg=1e-3)
        w = np.concatenate([0.3 + 1e-6 * rng.standard_normal(10), rng.standard_normal(10)])
        J = itg.entropy_jacobian(w, prev, PARAMS, cfg).toarray()
        J_fd = fd_jacobian(lambda v: itg.entropy_residual(v, prev, PARAMS, cfg), w)
        assert np.max(np.abs(J - J_fd)) <= 1e-6 * np.max(np.abs(J_fd))

    def test_primal_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        grid = Grid(12, 2.0)
        params = PARAMS.replace(delta=-2.0, nonlinearity=Nonlinearity("power", 2.0, 1.5))
        prev = random_state(grid, rng)
        cfg = TimeStepperConfig(tau=0.05, mode=PRIMAL)
        u = random_state(grid, rng).as_vector()
        J = itg.primal_jacobian(u, prev, params, cfg).toarray()
        J_fd = fd_jacobian(lambda v: itg.primal_residual(v, prev, params, cfg), u)
        assert np.max(np.abs(J - J_fd)) <= 1e-6 * np.max(np.abs(J_fd))


class TestSteps:
    grid = Grid(40, math.pi)

    def test_steady_state_is_fixed_point_of_primal_step(self):
        s = StateField.constant(self.grid, 0.5, 0.025)
        new = step_primal(s, PARAMS, TimeStepperConfig(mode=PRIMAL))
        assert np.max(np.abs(new.as_vector() - s.as_vector())) < 1e-10

    def test_steady_state_drift_in_entropy_step_is_regularisation_sized(self):
        s = StateField.constant(self.grid, 0.5, 0.025)
        cfg = TimeStepperConfig(tau=1e-2, eps_reg=1e-8)
        new = step_entropy_variables(s, PARAMS, cfg)
        w_norm = np.max(np.abs(itg.entropy_variables(s, PARAMS)))
        assert np.max(np.abs(new.as_vector() - s.as_vector())) <= 10 * cfg.eps_reg * cfg.tau * (
            1 + w_norm) + 1e-12

    def test_primal_step_conserves_mass(self):
        s = cosine_perturbation(self.grid, PARAMS, 0.3, mode=2)
        new = step_primal(s, PARAMS.replace(delta=-2.0), TimeStepperConfig(tau=0.1, mode=PRIMAL))
        assert abs(new.mass_u1 - s.mass_u1) <= 1e-12 * s.mass_u1

    def test_entropy_step_mean_drift_identity(self):
        s = cosine_perturbation(self.grid, PARAMS, 0.3, mode=1)
        cfg = TimeStepperConfig(tau=0.05, eps_reg=1e-3)
        new = step_entropy_variables(s, PARAMS, cfg)
        w1 = itg.entropy_variables(new, PARAMS)[: self.grid.n_cells]
        expected = np.mean(s.u1) - cfg.eps_reg * cfg.tau * np.mean(w1)
        assert np.mean(new.u1) == pytest.approx(expected, abs=1e-13)

    def test_entropy_step_rejects_boundary_values(self):
        u1 = np.full(self.grid.n_cells, 0.5)
        u1[0] = 0.0
        with pytest.raises(ValueError):
            step_entropy_variables(StateField(u1, u1, self.grid), PARAMS, TimeStepperConfig())

    def test_entropy_mode_rejects_power_mobility(self):
        s = StateField.constant(self.grid, 0.5, 0.025)
        params = PARAMS.replace(nonlinearity=Nonlinearity("power", 2.0, 1.0))
        with pytest.raises(ValueError):
            step_entropy_variables(s, params, TimeStepperConfig())

    def test_newton_failure_is_step_failure(self):
        s = cosine_perturbation(self.grid, PARAMS, 0.3)
        with pytest.raises(StepFailure):
            step_primal(s, PARAMS, TimeStepperConfig(tau=1.0, mode=PRIMAL, newton_max_iter=1))

    @settings(max_examples=15, deadline=None)
    @given(delta=st.floats(-3.5, 5.0).filter(lambda d: abs(d) > 0.05),
           amplitude=st.floats(0.05, 0.45), seed=st.integers(0, 10**6))
    def test_entropy_inequality_each_step(self, delta, amplitude, seed):
        rng = np.random.default_rng(seed)
        grid = Grid(24, 2.0)
        params = ModelParams(delta=delta, alpha=1.0, length=2.0)
        u1 = np.clip(0.5 + amplitude * rng.uniform(-1, 1, 24), 0.02, 0.98)
        prev = StateField(u1, rng.random(24), grid)
        cfg = TimeStepperConfig(tau=0.02, eps_reg=1e-6)
        new = step_entropy_variables(prev, params, cfg)
        assert np.all((new.u1 > 0) & (new.u1 < 1))
        assert entropy_balance(prev, new, params, cfg).holds


class TestEvolve:
    def test_zero_perturbation_gives_flat_zero_trace(self):
        grid = Grid(20, math.pi)
        s = cosine_perturbation(grid, PARAMS, 0.0)
        traj = evolve(s, PARAMS, TimeStepperConfig(tau=0.1, t_final=1.0))
        assert len(traj.times) == 11
        assert traj.times[-1] == pytest.approx(1.0, abs=1e-14)
        assert np.max(np.abs(traj.relative_entropy)) < 1e-14
        assert traj.error is None

    def test_times_strictly_increasing_by_tau(self):
        grid = Grid(20, math.pi)
        traj = evolve(cosine_perturbation(grid, PARAMS, 0.1), PARAMS,
                      TimeStepperConfig(tau=0.05, t_final=0.5, mode=PRIMAL))
        assert np.diff(traj.times) == pytest.approx(np.full(10, 0.05))

    def test_primal_trace_decays_monotonically(self):
        grid = Grid(40, math.pi)
        traj = evolve(cosine_perturbation(grid, PARAMS, 0.1), PARAMS,
                      TimeStepperConfig(tau=0.05, t_final=2.0, mode=PRIMAL))
        assert np.all(np.diff(traj.relative_entropy) < 0)

    def test_persistent_failure_returns_partial_trajectory(self):
        grid = Grid(20, math.pi)
        cfg = TimeStepperConfig(tau=1.0, t_final=2.0, mode=PRIMAL, newton_max_iter=1)
        traj = evolve(cosine_perturbation(grid, PARAMS, 0.3), PARAMS, cfg, max_tau_halvings=2)
        assert traj.error is not None and traj.tau_halvings == 2
        assert len(traj.states) >= 1

    def test_modes_agree_and_converge_first_order_in_tau(self):
        grid = Grid(32, math.pi)
        params = PARAMS.replace(alpha=1.0)
        s = cosine_perturbation(grid, params, 0.2)
        reference = evolve(s, params, TimeStepperConfig(tau=0.02 / 16, t_final=0.2, mode=PRIMAL))
        errors = []
        for tau in (0.02, 0.01):
            a = evolve(s, params, TimeStepperConfig(tau=tau, t_final=0.2, eps_reg=1e-12))
            b = evolve(s, params, TimeStepperConfig(tau=tau, t_final=0.2, mode=PRIMAL))
            # same tau: only the face mobilities differ, an O(h^2) effect
            assert np.max(np.abs(a.final_state.as_vector() - b.final_state.as_vector())) < 1e-6
            errors.append(np.max(np.abs(a.final_state.as_vector()
                                        - reference.final_state.as_vector())))
        assert 1.7 < errors[0] / errors[1] < 2.3


class TestFitDecayRate:
    def test_exact_exponential(self):
        t = np.linspace(0, 5, 101)
        assert fit_decay_rate(t, np.exp(-2 * t)) == pytest.approx(2.0, abs=1e-6)

    def test_constant_trace(self):
        t = np.linspace(0, 5, 101)
        assert fit_decay_rate(t, np.full(101, 0.3)) == pytest.approx(0.0, abs=1e-12)

    def test_below_floor_everywhere(self):
        with pytest.raises(ValueError, match="no decay measurable"):
            fit_decay_rate(np.arange(20.0), np.full(20, 1e-16))

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            fit_decay_rate(np.arange(5.0), np.ones(5))


def test_l2_distance_bound_at_time_zero():
    grid = Grid(64, math.pi)
    s = cosine_perturbation(grid, PARAMS, 0.1)
    traj = evolve(s, PARAMS, TimeStepperConfig(tau=0.1, t_final=0.1))
    h0 = traj.reports[0].relative_entropy
    assert l2_distance(s, PARAMS) <= l2_distance_bound(PARAMS, h0, 0.0)
    assert l2_distance_bound(PARAMS.replace(alpha=0.01), h0, 1.0) == math.inf
