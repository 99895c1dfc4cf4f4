"""Implicit Euler time stepping in entropy variables or primal variables.

Both modes use the same conservative finite-volume fluxes

    F1 = D u1 - g_face D u2,        F2 = delta D u1 + kappa D u2

on interior faces, with zero flux on the two boundary faces.  They differ in
the unknowns and the face mobility:

* entropy-variable mode solves for ``w = (h0'(u1), u2/delta0)`` so that
  ``u1 = (h0')^{-1}(w1)`` lies in (0, 1) by construction.  The face mobility is
  the divided difference ``g_face = (u1_b - u1_a) / (w1_b - w1_a)``, a mean
  value of ``g`` between the two cells.  With it the face flux equals
  ``B(g_face) (D w)`` exactly and the discrete entropy inequality holds step
  by step.  An H1 regularisation ``eps (-w_xx + w)`` is added.
* primal mode solves for ``u`` directly with ``g_face = g((u_a + u_b)/2)``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import expit, logit

from . import model
from .grid import EntropyReport, EntropyUndefined, Grid, StateField, entropy_report, integrate
from .model import ModelParams

logger = logging.getLogger(__name__)

ENTROPY = "entropy"
PRIMAL = "primal"

# below this |w_b - w_a| the divided difference uses its Taylor expansion
_TAYLOR_SWITCH = 1e-4
# cap on a Newton update in entropy variables; logit-space steps overshoot otherwise
_MAX_ENTROPY_STEP = 2.0


class StepFailure(RuntimeError):
    """Newton did not converge for one implicit step."""


@dataclass(frozen=True)
class TimeStepperConfig:
    tau: float = 1e-2
    eps_reg: float = 1e-8
    mode: str = ENTROPY
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    t_final: float = 1.0

    def __post_init__(self):
        if self.mode not in (ENTROPY, PRIMAL):
            raise ValueError(f"mode must be {ENTROPY!r} or {PRIMAL!r}")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if self.eps_reg < 0:
            raise ValueError("eps_reg must be >= 0")
        if self.mode == ENTROPY and not self.eps_reg > 0:
            raise ValueError("eps_reg must be > 0 in entropy-variable mode")
        if not self.newton_tol > 0 or self.newton_max_iter < 1:
            raise ValueError("newton_tol must be > 0 and newton_max_iter >= 1")
        if not self.t_final > 0:
            raise ValueError("t_final must be > 0")


# ---------------------------------------------------------------------------
# sparse assembly helpers


class _Triplets:
    def __init__(self, size: int):
        self.size = size
        self.rows: List[np.ndarray] = []
        self.cols: List[np.ndarray] = []
        self.vals: List[np.ndarray] = []

    def add(self, rows, cols, vals):
        rows, cols = np.asarray(rows), np.asarray(cols)
        vals = np.broadcast_to(np.asarray(vals, dtype=float), rows.shape)
        self.rows.append(rows)
        self.cols.append(cols)
        self.vals.append(vals)

    def add_flux(self, row_offset, col_offset, n, d_left, d_right, h):
        """Rows get ``-(F_{i+1/2} - F_{i-1/2}) / h`` for a face flux ``F(x_a, x_b)``."""
        a = np.arange(n - 1)
        b = a + 1
        for cells, sign in ((a, -1.0), (b, 1.0)):
            self.add(row_offset + cells, col_offset + a, sign * d_left / h)
            self.add(row_offset + cells, col_offset + b, sign * d_right / h)

    def tocsc(self) -> sp.csc_matrix:
        rows = np.concatenate(self.rows)
        cols = np.concatenate(self.cols)
        vals = np.concatenate(self.vals)
        return sp.csc_matrix((vals, (rows, cols)), shape=(self.size, self.size))


def _divergence(face_flux: np.ndarray, h: float) -> np.ndarray:
    padded = np.concatenate([[0.0], face_flux, [0.0]])
    return np.diff(padded) / h


def _flux_pair(u1, u2, g_face, params: ModelParams, h: float):
    du1 = np.diff(u1) / h
    du2 = np.diff(u2) / h
    return du1 - g_face * du2, params.delta * du1 + params.kappa * du2


# ---------------------------------------------------------------------------
# entropy-variable mode


def _divided_difference_mobility(w1: np.ndarray, nl: model.Nonlinearity):
    """``(u(w_b) - u(w_a)) / (w_b - w_a)`` and its partial derivatives."""
    wa, wb = w1[:-1], w1[1:]
    dw = wb - wa
    ua, ub = expit(wa), expit(wb)
    small = np.abs(dw) < _TAYLOR_SWITCH
    safe = np.where(small, 1.0, dw)
    gf = np.where(small, 0.0, (ub - ua) / safe)
    d_a = np.where(small, 0.0, (gf - nl.g(ua)) / safe)
    d_b = np.where(small, 0.0, (nl.g(ub) - gf) / safe)
    if np.any(small):
        um = expit(0.5 * (wa + wb))
        g, gp, gpp = nl.g(um), nl.g_prime(um), nl.g_second(um)
        s2 = gp * g
        s3 = (gpp * g + gp**2) * g
        gf = np.where(small, g + s3 * dw**2 / 24.0, gf)
        d_a = np.where(small, 0.5 * s2 - s3 * dw / 12.0, d_a)
        d_b = np.where(small, 0.5 * s2 + s3 * dw / 12.0, d_b)
    return gf, d_a, d_b


def _require_logistic(params: ModelParams) -> None:
    if not params.nonlinearity.is_logistic:
        raise ValueError("entropy-variable mode is implemented for the logistic mobility only")


def entropy_residual(w: np.ndarray, prev: StateField, params: ModelParams,
                     config: TimeStepperConfig) -> np.ndarray:
    """Pointwise residual of one implicit step in entropy variables ``w = [w1, w2]``."""
    _require_logistic(params)
    grid = prev.grid
    n, h = grid.n_cells, grid.h
    d0 = model.delta0(params)
    w1, w2 = w[:n], w[n:]
    u1, u2 = expit(w1), d0 * w2
    gf, _, _ = _divided_difference_mobility(w1, params.nonlinearity)
    f1, f2 = _flux_pair(u1, u2, gf, params, h)
    eps, tau = config.eps_reg, config.tau
    reg1 = eps * (-_divergence(np.diff(w1) / h, h) + w1)
    reg2 = eps * (-_divergence(np.diff(w2) / h, h) + w2)
    r1 = (u1 - prev.u1) / tau - _divergence(f1, h) + reg1
    r2 = ((u2 - prev.u2) / tau - _divergence(f2, h) + reg2
          - model.f_source(u1) + params.alpha * u2)
    return np.concatenate([r1, r2])


def entropy_jacobian(w: np.ndarray, prev: StateField, params: ModelParams,
                     config: TimeStepperConfig) -> sp.csc_matrix:
    _require_logistic(params)
    grid = prev.grid
    n, h = grid.n_cells, grid.h
    nl = params.nonlinearity
    d0 = model.delta0(params)
    w1, w2 = w[:n], w[n:]
    u1, u2 = expit(w1), d0 * w2
    g_cell = nl.g(u1)
    gf, dg_a, dg_b = _divided_difference_mobility(w1, nl)
    du2 = np.diff(u2) / h
    eps, tau = config.eps_reg, config.tau
    idx = np.arange(n)
    T = _Triplets(2 * n)
    # time derivative, regularisation zero-order term and reaction
    T.add(idx, idx, g_cell / tau + eps)
    T.add(n + idx, n + idx, d0 / tau + eps + params.alpha * d0)
    T.add(n + idx, idx, -model.f_prime(u1) * g_cell)
    # regularisation gradient term: flux eps * D w
    ones = np.ones(n - 1)
    for off in (0, n):
        T.add_flux(off, off, n, -eps * ones / h, eps * ones / h, h)
    # F1 = D u1 - gf D u2
    T.add_flux(0, 0, n, -g_cell[:-1] / h - dg_a * du2, g_cell[1:] / h - dg_b * du2, h)
    T.add_flux(0, n, n, gf * d0 / h, -gf * d0 / h, h)
    # F2 = delta D u1 + kappa D u2
    T.add_flux(n, 0, n, -params.delta * g_cell[:-1] / h, params.delta * g_cell[1:] / h, h)
    T.add_flux(n, n, n, -params.kappa * d0 * ones / h, params.kappa * d0 * ones / h, h)
    return T.tocsc()


# ---------------------------------------------------------------------------
# primal mode


def primal_residual(u: np.ndarray, prev: StateField, params: ModelParams,
                    config: TimeStepperConfig) -> np.ndarray:
    grid = prev.grid
    n, h = grid.n_cells, grid.h
    u1, u2 = u[:n], u[n:]
    gf = params.nonlinearity.g(0.5 * (u1[:-1] + u1[1:]))
    f1, f2 = _flux_pair(u1, u2, gf, params, h)
    tau = config.tau
    r1 = (u1 - prev.u1) / tau - _divergence(f1, h)
    r2 = ((u2 - prev.u2) / tau - _divergence(f2, h)
          - model.f_source(u1) + params.alpha * u2)
    return np.concatenate([r1, r2])


def primal_jacobian(u: np.ndarray, prev: StateField, params: ModelParams,
                    config: TimeStepperConfig) -> sp.csc_matrix:
    grid = prev.grid
    n, h = grid.n_cells, grid.h
    nl = params.nonlinearity
    u1, u2 = u[:n], u[n:]
    mid = 0.5 * (u1[:-1] + u1[1:])
    gf = nl.g(mid)
    dgf = 0.5 * nl.g_prime(mid)
    du2 = np.diff(u2) / h
    tau = config.tau
    idx = np.arange(n)
    ones = np.ones(n - 1)
    T = _Triplets(2 * n)
    T.add(idx, idx, 1.0 / tau)
    T.add(n + idx, n + idx, 1.0 / tau + params.alpha)
    T.add(n + idx, idx, -model.f_prime(u1))
    T.add_flux(0, 0, n, -ones / h - dgf * du2, ones / h - dgf * du2, h)
    T.add_flux(0, n, n, gf / h, -gf / h, h)
    T.add_flux(n, 0, n, -params.delta * ones / h, params.delta * ones / h, h)
    T.add_flux(n, n, n, -params.kappa * ones / h, params.kappa * ones / h, h)
    return T.tocsc()


# ---------------------------------------------------------------------------
# Newton


def newton(residual: Callable[[np.ndarray], np.ndarray],
           jacobian: Callable[[np.ndarray], sp.spmatrix],
           x0: np.ndarray, tol: float, max_iter: int,
           max_halvings: int = 8, max_step: Optional[float] = None) -> Tuple[np.ndarray, int]:
    """Damped Newton iteration on ``residual(x) = 0``.

    An update larger than ``max_step`` in max norm is scaled down to it; the
    step is then halved (up to ``max_halvings`` times) while it fails to
    reduce the Euclidean residual norm.  Returns the solution and the
    iteration count.
    """
    x = np.array(x0, dtype=float)
    r = residual(x)
    norm = float(np.linalg.norm(r))
    for it in range(max_iter + 1):
        if np.max(np.abs(r)) <= tol:
            return x, it
        if it == max_iter:
            break
        try:
            with np.errstate(all="ignore"):
                dx = spla.splu(jacobian(x)).solve(-r)
        except RuntimeError as exc:
            raise StepFailure(f"singular Jacobian in Newton iteration {it}: {exc}") from exc
        if not np.all(np.isfinite(dx)):
            raise StepFailure(f"non-finite Newton update in iteration {it}")
        if max_step is not None:
            biggest = float(np.max(np.abs(dx)))
            if biggest > max_step:
                dx *= max_step / biggest
        lam = 1.0
        for _ in range(max_halvings + 1):
            x_try = x + lam * dx
            with np.errstate(all="ignore"):
                r_try = residual(x_try)
            n_try = float(np.linalg.norm(r_try))
            if np.isfinite(n_try) and n_try < norm:
                break
            lam *= 0.5
        else:
            raise StepFailure(f"line search failed in Newton iteration {it} "
                              f"(residual {np.max(np.abs(r)):.3e})")
        x, r, norm = x_try, r_try, n_try
    raise StepFailure(f"Newton did not converge in {max_iter} iterations "
                      f"(residual {np.max(np.abs(r)):.3e}); try a smaller tau")


def entropy_variables(state: StateField, params: ModelParams) -> np.ndarray:
    """``w = (h0'(u1), u2/delta0)`` stacked into one vector."""
    _require_logistic(params)
    return np.concatenate([logit(state.u1), state.u2 / model.delta0(params)])


def step_entropy_variables(prev: StateField, params: ModelParams,
                           config: TimeStepperConfig) -> StateField:
    """One implicit Euler step of the regularised entropy-variable scheme."""
    _require_logistic(params)
    if np.any(prev.u1 <= 0) or np.any(prev.u1 >= 1):
        raise ValueError("entropy-variable step needs 0 < u1 < 1 in every cell")
    d0 = model.delta0(params)
    w0 = entropy_variables(prev, params)
    w, _ = newton(lambda w: entropy_residual(w, prev, params, config),
                  lambda w: entropy_jacobian(w, prev, params, config),
                  w0, config.newton_tol, config.newton_max_iter, max_step=_MAX_ENTROPY_STEP)
    n = prev.grid.n_cells
    return StateField(expit(w[:n]), d0 * w[n:], prev.grid)


def step_primal(prev: StateField, params: ModelParams,
                config: TimeStepperConfig) -> StateField:
    """One implicit Euler step in the primal variables ``(u1, u2)``."""
    u, _ = newton(lambda u: primal_residual(u, prev, params, config),
                  lambda u: primal_jacobian(u, prev, params, config),
                  prev.as_vector(), config.newton_tol, config.newton_max_iter)
    new = StateField.from_vector(u, prev.grid)
    if np.min(new.u1) < -1e-8 or np.max(new.u1) > 1 + 1e-8:
        logger.warning("primal step left [0, 1]: u1 in [%.3e, %.3e]",
                       np.min(new.u1), np.max(new.u1))
    return new


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """Time series of states and entropy reports.

    ``error`` is set when the run aborted early; the recorded samples are then
    the partial trajectory up to the last accepted step.
    """

    times: List[float] = field(default_factory=list)
    states: List[StateField] = field(default_factory=list)
    reports: List[EntropyReport] = field(default_factory=list)
    error: Optional[str] = None
    tau_halvings: int = 0

    def append(self, time: float, state: StateField, report: EntropyReport) -> None:
        self.times.append(time)
        self.states.append(state)
        self.reports.append(report)

    @property
    def relative_entropy(self) -> np.ndarray:
        return np.array([r.relative_entropy for r in self.reports])

    @property
    def final_state(self) -> StateField:
        return self.states[-1]


def _report(state: StateField, params: ModelParams, time: float) -> EntropyReport:
    try:
        return entropy_report(state, params, time)
    except EntropyUndefined:
        nan = float("nan")
        return EntropyReport(time, nan, nan, nan, state.mass_u1, state.l2_u2())


def evolve(initial: StateField, params: ModelParams, config: TimeStepperConfig,
           on_step: Optional[Callable[[StateField, StateField, float], None]] = None,
           max_tau_halvings: int = 10) -> Trajectory:
    """Step from ``t = 0`` to ``config.t_final``.

    A failed step is retried with half the time step, at most
    ``max_tau_halvings`` times over the run; the reduced step is kept
    afterwards.  ``on_step(prev, new, tau)`` is called after every accepted
    step.
    """
    stepper = step_entropy_variables if config.mode == ENTROPY else step_primal
    traj = Trajectory()
    state, t, tau = initial, 0.0, config.tau
    traj.append(t, state, _report(state, params, t))
    n_steps = int(round(config.t_final / config.tau))
    step_cfg = config
    k = 0
    while t < config.t_final - 1e-12 * config.t_final:
        try:
            new = stepper(state, params, step_cfg)
        except StepFailure as exc:
            if traj.tau_halvings >= max_tau_halvings:
                traj.error = f"step failure at t={t:.6g} after {traj.tau_halvings} tau halvings: {exc}"
                logger.error(traj.error)
                return traj
            traj.tau_halvings += 1
            tau *= 0.5
            step_cfg = TimeStepperConfig(tau, config.eps_reg, config.mode, config.newton_tol,
                                         config.newton_max_iter, config.t_final)
            logger.warning("step failed at t=%.6g, halving tau to %.3e", t, tau)
            continue
        if on_step is not None:
            on_step(state, new, tau)
        k += 1
        # exact multiples of tau while tau is unchanged, to avoid drift
        t = k * tau if traj.tau_halvings == 0 and k <= n_steps else t + tau
        state = new
        traj.append(t, state, _report(state, params, t))
    return traj


def fit_decay_rate(times: Sequence[float], values: Sequence[float],
                   floor: float = 1e-14) -> float:
    """Least-squares exponential rate of ``values`` over the second half of the samples.

    Samples at or below ``floor`` are dropped.  A positive result means decay.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if times.shape != values.shape:
        raise ValueError("times and values must have equal length")
    if len(times) < 10:
        raise ValueError("need at least 10 samples to fit a decay rate")
    keep = np.isfinite(values) & (values > floor)
    if not np.any(keep):
        raise ValueError("no decay measurable: relative entropy below floor everywhere")
    half = len(times) // 2
    t, v = times[half:][keep[half:]], values[half:][keep[half:]]
    if len(t) < 2:
        t, v = times[keep], values[keep]
    if len(t) < 2:
        raise ValueError("no decay measurable: fewer than two samples above floor")
    slope = np.polyfit(t, np.log(v), 1)[0]
    return float(-slope)


def trajectory_decay_rate(traj: Trajectory, floor: float = 1e-14) -> float:
    return fit_decay_rate(traj.times, traj.relative_entropy, floor)


def l2_distance(state: StateField, params: ModelParams) -> float:
    """``||u1 - u1*|| + ||u2 - u2*||`` in L2(0, l)."""
    u1s, u2s = model.steady_state(params)
    grid = state.grid
    return (math.sqrt(integrate((state.u1 - u1s) ** 2, grid))
            + math.sqrt(integrate((state.u2 - u2s) ** 2, grid)))


def l2_distance_bound(params: ModelParams, initial_relative_entropy: float, t: float) -> float:
    """``2 sqrt(max(gamma, delta0) H0) exp(-chi t / 2)``; infinite if no rate is guaranteed."""
    chi = model.chi_rate(params)
    if chi is None:
        return float("inf")
    scale = max(params.gamma, model.delta0(params))
    return 2.0 * math.sqrt(scale * initial_relative_entropy) * math.exp(-0.5 * chi * t)


# ---------------------------------------------------------------------------
# scheme diagnostics


@dataclass(frozen=True)
class EntropyBalance:
    """Both sides of the discrete entropy inequality for one step."""

    lhs: float
    rhs: float

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs


def entropy_inequality_constants(params: ModelParams) -> Tuple[float, float]:
    """``(c0, c_f)`` of the per-step entropy inequality."""
    d0 = model.delta0(params)
    c0 = model.epsilon1(params) * min(1.0 / params.gamma, 1.0 / d0**2)
    cf = params.length * model.F_MAX**2 / (4.0 * params.alpha * d0)
    return c0, cf


def entropy_balance(prev: StateField, new: StateField, params: ModelParams,
                    config: TimeStepperConfig) -> EntropyBalance:
    """Evaluate ``H(u^k) + c0 tau |grad u^k|^2 + eps tau |w^k|_{H1}^2`` against
    ``c_f tau + H(u^{k-1})``."""
    grid = new.grid
    h, tau, eps = grid.h, config.tau, config.eps_reg
    d0 = model.delta0(params)
    c0, cf = entropy_inequality_constants(params)

    def entropy(s: StateField) -> float:
        return integrate(model.h0_eval(s.u1) + s.u2**2 / (2 * d0), grid)

    w = entropy_variables(new, params)
    n = grid.n_cells
    w1, w2 = w[:n], w[n:]
    grad_u = h * float(np.sum((np.diff(new.u1) / h) ** 2 + (np.diff(new.u2) / h) ** 2))
    h1_w = h * float(np.sum((np.diff(w1) / h) ** 2 + (np.diff(w2) / h) ** 2)
                     + np.sum(w1**2 + w2**2))
    lhs = entropy(new) + c0 * tau * grad_u + eps * tau * h1_w
    rhs = cf * tau + entropy(prev)
    return EntropyBalance(lhs, rhs)


def cosine_perturbation(grid: Grid, params: ModelParams, amplitude: float,
                        mode: int = 1) -> StateField:
    """``u1 = mean + a cos(n pi x / l)`` with ``u2`` at its steady value."""
    u1s, u2s = model.steady_state(params)
    u1 = u1s + amplitude * np.cos(mode * math.pi * grid.x / grid.length)
    return StateField(u1, np.full(grid.n_cells, u2s), grid)
