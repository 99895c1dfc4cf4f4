"""Steady states and pseudo-arclength continuation.

The steady problem is discretised in second-order form with the same
finite-volume fluxes as the time integrator (arithmetic-mean face mobility):

    R1 = div(D u1 - g_face D u2) - rho (u1 - mean)
    R2 = div(delta D u1 + kappa D u2) - alpha u2 + f(u1)

For continuation the system is extended by a mass constraint and a scalar
multiplier ``m``,

    R1 + m / sqrt(N) = 0,   R2 = 0,   sum(u1 - mean) / sqrt(N) = 0,

which has the same solutions for ``rho > 0`` (summing R1 forces ``m = 0`` and
the mass constraint) and stays regular at ``rho = 0``, where the plain system
has the constant mode in its kernel.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.fft import dct

from . import model
from .grid import Grid, StateField, face_differences, integrate
from .integrator import _Triplets, _divergence
from .model import ModelParams

logger = logging.getLogger(__name__)

ACTIVE_PARAMETERS = ("delta", "rho", "kappa", "alpha", "length")

STOP_RANGE = "range boundary"
STOP_DG = "D_g degeneracy"
STOP_CORRECTOR = "corrector failure"
STOP_MAX_POINTS = "max points"
STOP_UNPHYSICAL = "u1 left [0, 1]"


class ConvergenceError(RuntimeError):
    """Newton or corrector iteration failed."""


class HomotopyError(RuntimeError):
    """The rho homotopy stopped before reaching rho = 0."""

    def __init__(self, message: str, branch: "Branch"):
        super().__init__(message)
        self.branch = branch

    @property
    def last_rho(self) -> float:
        return self.branch.points[-1].parameter_value


class DetectionMergeWarning(UserWarning):
    """Two detections closer than the parameter tolerance were merged."""


# ---------------------------------------------------------------------------
# residual and Jacobian of the plain steady system


@dataclass(frozen=True)
class _Coefficients:
    delta: float
    kappa: float
    alpha: float
    rho: float
    length: float
    u1_mean: float
    nonlinearity: model.Nonlinearity


def _coefficients(params: ModelParams, **override) -> _Coefficients:
    values = {k: getattr(params, k) for k in ("delta", "kappa", "alpha", "rho", "length", "u1_mean")}
    values.update(override)
    return _Coefficients(nonlinearity=params.nonlinearity, **values)


def _residual(u1, u2, c: _Coefficients, h: float) -> Tuple[np.ndarray, np.ndarray]:
    gf = c.nonlinearity.g(0.5 * (u1[:-1] + u1[1:]))
    du1 = np.diff(u1) / h
    du2 = np.diff(u2) / h
    r1 = _divergence(du1 - gf * du2, h) - c.rho * (u1 - c.u1_mean)
    r2 = _divergence(c.delta * du1 + c.kappa * du2, h) - c.alpha * u2 + model.f_source(u1)
    return r1, r2


def _jacobian_triplets(u1, u2, c: _Coefficients, h: float, size: int) -> _Triplets:
    n = len(u1)
    nl = c.nonlinearity
    mid = 0.5 * (u1[:-1] + u1[1:])
    gf = nl.g(mid)
    dgf = 0.5 * nl.g_prime(mid)
    du2 = np.diff(u2) / h
    ones = np.ones(n - 1)
    idx = np.arange(n)
    T = _Triplets(size)
    # add_flux assembles -div(F); the steady residual carries +div(F)
    T.add_flux(0, 0, n, ones / h + dgf * du2, -ones / h + dgf * du2, h)
    T.add_flux(0, n, n, -gf / h, gf / h, h)
    T.add_flux(n, 0, n, c.delta * ones / h, -c.delta * ones / h, h)
    T.add_flux(n, n, n, c.kappa * ones / h, -c.kappa * ones / h, h)
    T.add(idx, idx, -c.rho)
    T.add(n + idx, n + idx, -c.alpha)
    T.add(n + idx, idx, model.f_prime(u1))
    return T


def bvp_residual(state: StateField, params: ModelParams) -> np.ndarray:
    """Pointwise residual of the discrete steady problem, ``[R1, R2]``.

    The no-flux condition is built in: boundary face fluxes are exactly zero.
    """
    if abs(state.grid.length - params.length) > 1e-12 * params.length:
        raise ValueError("grid length does not match params.length")
    r1, r2 = _residual(state.u1, state.u2, _coefficients(params), state.grid.h)
    return np.concatenate([r1, r2])


def bvp_jacobian(state: StateField, params: ModelParams) -> sp.csc_matrix:
    n = state.grid.n_cells
    return _jacobian_triplets(state.u1, state.u2, _coefficients(params),
                              state.grid.h, 2 * n).tocsc()


def diffusion_determinant(u1: np.ndarray, params: ModelParams) -> np.ndarray:
    """``D_g = kappa + delta g(u1)`` at every node."""
    return params.kappa + params.delta * params.nonlinearity.g(u1)


def l2_norm_z(state: StateField) -> float:
    """``sqrt((1/l) int (u1^2 + u2^2 + u1'^2 + u2'^2))`` with face difference quotients."""
    grid = state.grid
    values = integrate(state.u1**2 + state.u2**2, grid)
    grads = grid.h * float(np.sum(face_differences(state.u1, grid) ** 2
                                  + face_differences(state.u2, grid) ** 2))
    return math.sqrt((values + grads) / grid.length)


def count_interfaces(u1: np.ndarray, mean: float, plateau: float = 1e-6) -> int:
    """Strict sign changes of ``u1 - mean``, ignoring entries within ``plateau`` of zero."""
    d = np.asarray(u1) - mean
    s = np.sign(d[np.abs(d) >= plateau])
    return int(np.count_nonzero(s[1:] != s[:-1]))


def dominant_mode(u1: np.ndarray, u2: np.ndarray) -> int:
    """Index ``k >= 1`` of the cosine ``cos(k pi x / l)`` carrying most energy of ``(u1, u2)``.

    The constant mode is ignored; 0 is returned only for constant input.
    """
    power = dct(np.asarray(u1), type=2, norm="ortho") ** 2 + dct(np.asarray(u2), type=2, norm="ortho") ** 2
    if np.all(power[1:] == 0):
        return 0
    return int(np.argmax(power[1:])) + 1


# ---------------------------------------------------------------------------
# extended system used by Newton and continuation


@dataclass(frozen=True)
class BvpSystem:
    """Discrete steady problem with one active continuation parameter."""

    n_cells: int
    params: ModelParams
    active_parameter: str = "delta"

    def __post_init__(self):
        if self.active_parameter not in ACTIVE_PARAMETERS:
            raise ValueError(f"active_parameter must be one of {ACTIVE_PARAMETERS}")
        Grid(self.n_cells, self.params.length)

    @property
    def size(self) -> int:
        """Number of state unknowns ``(u1, u2, m)``."""
        return 2 * self.n_cells + 1

    @property
    def weights(self) -> np.ndarray:
        """Arclength weights: mean square over the state, unit weight on the parameter."""
        w = np.full(self.size + 1, 1.0 / self.size)
        w[-1] = 1.0
        return w

    def parameter_value(self) -> float:
        return float(getattr(self.params, self.active_parameter))

    def params_at(self, lam: float) -> ModelParams:
        return self.params.replace(**{self.active_parameter: float(lam)})

    def with_active(self, name: str, params: Optional[ModelParams] = None) -> "BvpSystem":
        return BvpSystem(self.n_cells, params or self.params, name)

    def grid_at(self, lam: float) -> Grid:
        length = lam if self.active_parameter == "length" else self.params.length
        return Grid(self.n_cells, length)

    def _coeffs(self, lam: float) -> _Coefficients:
        return _coefficients(self.params, **{self.active_parameter: float(lam)})

    def pack(self, state: StateField, lam: float, multiplier: float = 0.0) -> np.ndarray:
        return np.concatenate([state.u1, state.u2, [multiplier, lam]])

    def unpack(self, X: np.ndarray) -> Tuple[StateField, float]:
        n = self.n_cells
        lam = float(X[-1])
        return StateField(X[:n], X[n:2 * n], self.grid_at(lam)), lam

    def residual(self, X: np.ndarray) -> np.ndarray:
        n = self.n_cells
        lam = X[-1]
        c = self._coeffs(lam)
        u1, u2, m = X[:n], X[n:2 * n], X[2 * n]
        r1, r2 = _residual(u1, u2, c, c.length / n)
        sq = math.sqrt(n)
        return np.concatenate([r1 + m / sq, r2, [np.sum(u1 - c.u1_mean) / sq]])

    def state_jacobian(self, X: np.ndarray) -> sp.csc_matrix:
        n = self.n_cells
        c = self._coeffs(X[-1])
        T = _jacobian_triplets(X[:n], X[n:2 * n], c, c.length / n, self.size)
        col = np.full(n, 1.0 / math.sqrt(n))
        T.add(np.arange(n), np.full(n, 2 * n), col)
        T.add(np.full(n, 2 * n), np.arange(n), col)
        return T.tocsc()

    def parameter_derivative(self, X: np.ndarray) -> np.ndarray:
        n = self.n_cells
        lam = float(X[-1])
        c = self._coeffs(lam)
        u1, u2 = X[:n], X[n:2 * n]
        h = c.length / n
        zero = np.zeros(n)
        name = self.active_parameter
        if name == "delta":
            d = (zero, _divergence(np.diff(u1) / h, h))
        elif name == "kappa":
            d = (zero, _divergence(np.diff(u2) / h, h))
        elif name == "alpha":
            d = (zero, -u2)
        elif name == "rho":
            d = (-(u1 - c.u1_mean), zero)
        else:
            step = 1e-6 * max(1.0, abs(lam))
            Xp, Xm = X.copy(), X.copy()
            Xp[-1] += step
            Xm[-1] -= step
            return (self.residual(Xp) - self.residual(Xm)) / (2 * step)
        return np.concatenate([d[0], d[1], [0.0]])

    def full_jacobian(self, X: np.ndarray) -> sp.csc_matrix:
        """``[dR/dY, dR/dlambda]`` of shape ``(size, size + 1)``."""
        return sp.hstack([self.state_jacobian(X), sp.csc_matrix(self.parameter_derivative(X)[:, None])],
                         format="csc")

    def bordered(self, X: np.ndarray, row: np.ndarray) -> sp.csc_matrix:
        """Square matrix ``[[dR/dY, dR/dlambda], [row]]``."""
        return sp.vstack([self.full_jacobian(X), sp.csr_matrix(row[None, :])], format="csc")

    def dg_values(self, X: np.ndarray) -> np.ndarray:
        c = self._coeffs(X[-1])
        return c.kappa + c.delta * c.nonlinearity.g(X[:self.n_cells])

    def inner(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.sum(self.weights * a * b))

    def norm(self, a: np.ndarray) -> float:
        return math.sqrt(self.inner(a, a))


def _splu(A: sp.spmatrix):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sp.SparseEfficiencyWarning)
        return spla.splu(sp.csc_matrix(A))


def _permutation_parity(perm: np.ndarray) -> int:
    perm = np.asarray(perm)
    seen = np.zeros(len(perm), dtype=bool)
    parity = 1
    for i in range(len(perm)):
        if seen[i]:
            continue
        j, length = i, 0
        while not seen[j]:
            seen[j] = True
            j = perm[j]
            length += 1
        if length % 2 == 0:
            parity = -parity
    return parity


def determinant_sign(lu) -> int:
    diag = lu.U.diagonal()
    if np.any(diag == 0):
        return 0
    sign = -1 if np.count_nonzero(diag < 0) % 2 else 1
    return sign * _permutation_parity(lu.perm_r) * _permutation_parity(lu.perm_c)


def smallest_singular_value(A: sp.spmatrix, iterations: int = 12, lu=None) -> float:
    """Inverse iteration on ``A^T A`` using one sparse LU factorisation."""
    try:
        lu = lu or _splu(A)
    except RuntimeError:
        return 0.0
    rng = np.random.default_rng(12345)
    x = rng.standard_normal(A.shape[0])
    x /= np.linalg.norm(x)
    growth = 1.0
    for _ in range(iterations):
        y = lu.solve(lu.solve(x, trans="T"))
        growth = np.linalg.norm(y)
        if not np.isfinite(growth) or growth == 0:
            return 0.0
        x = y / growth
    return float(1.0 / math.sqrt(growth))


@dataclass(frozen=True)
class SingularTriplets:
    values: np.ndarray  # ascending
    right: np.ndarray  # columns
    left_min: np.ndarray


def smallest_singular_triplets(A: sp.spmatrix, k: int = 3) -> SingularTriplets:
    """Smallest ``k`` singular values of a square sparse matrix and their right vectors.

    Small systems use a dense SVD; larger ones run Lanczos on ``(A^T A)^{-1}``
    applied through a sparse LU factorisation.
    """
    n = A.shape[0]
    if n <= 700:
        U, s, Vt = np.linalg.svd(A.toarray())
        order = np.argsort(s)[:k]
        return SingularTriplets(s[order], Vt[order].T, U[:, order[0]])
    lu = _splu(A)
    op = spla.LinearOperator((n, n), matvec=lambda x: lu.solve(lu.solve(np.ravel(x), trans="T")),
                             dtype=float)
    vals, vecs = spla.eigsh(op, k=k, which="LM", v0=np.ones(n), tol=1e-12)
    order = np.argsort(-vals)
    sig = 1.0 / np.sqrt(vals[order])
    right = vecs[:, order]
    left = lu.solve(right[:, 0], trans="T")
    left /= np.linalg.norm(left)
    return SingularTriplets(sig, right, left)


# ---------------------------------------------------------------------------
# Newton at fixed parameter


def _newton_fixed(system: BvpSystem, X0: np.ndarray, tol: float, max_iter: int) -> Tuple[np.ndarray, int]:
    X = X0.copy()
    r = system.residual(X)
    for it in range(max_iter + 1):
        if np.max(np.abs(r)) <= tol:
            return X, it
        if it == max_iter:
            break
        try:
            dY = _splu(system.state_jacobian(X)).solve(-r)
        except RuntimeError as exc:
            raise ConvergenceError(f"singular Jacobian: {exc}") from exc
        norm0 = np.linalg.norm(r)
        lam = 1.0
        for _ in range(9):
            Xt = X.copy()
            Xt[:-1] += lam * dY
            with np.errstate(all="ignore"):
                rt = system.residual(Xt)
            if np.all(np.isfinite(rt)) and np.linalg.norm(rt) < norm0:
                break
            lam *= 0.5
        else:
            raise ConvergenceError(f"Newton line search failed (residual {np.max(np.abs(r)):.3e})")
        X, r = Xt, rt
    raise ConvergenceError(f"Newton did not converge in {max_iter} iterations "
                           f"(residual {np.max(np.abs(r)):.3e})")


def newton_solve(initial_guess: StateField, params: ModelParams, tol: float = 1e-9,
                 max_iter: int = 50) -> StateField:
    """Damped Newton for the steady problem at fixed parameters.

    The mass of ``u1`` is held at ``u1_mean * l``; with ``rho > 0`` every
    solution has that mass anyway.
    """
    if not tol > 0:
        raise ValueError("tol must be > 0")
    u1 = initial_guess.u1
    if np.min(u1) < 0.0 or np.max(u1) > 1.0:
        raise ConvergenceError("initial guess has u1 outside [0, 1]; Newton is not attempted")
    system = BvpSystem(initial_guess.grid.n_cells, params)
    X, _ = _newton_fixed(system, system.pack(initial_guess, params.delta), tol, max_iter)
    state, _ = system.unpack(X)
    if np.min(state.u1) < 0.0 or np.max(state.u1) > 1.0:
        raise ConvergenceError("Newton converged to a state with u1 outside [0, 1]")
    return state


# ---------------------------------------------------------------------------
# branches


HOMOGENEOUS = "homogeneous"


@dataclass(frozen=True)
class SwitchedAt:
    parameter_value: float
    mode_hint: int
    direction: int


@dataclass(frozen=True)
class HomotopyFrom:
    parameter_name: str
    parameter_value: float


@dataclass(frozen=True)
class BranchPoint:
    parameter_value: float
    state: StateField
    l2_norm: float
    tangent: np.ndarray
    smallest_singular_value: float
    n_interfaces: int
    is_bifurcation: bool = False
    multiplier: float = 0.0
    test_sign: int = 0
    min_abs_dg: float = float("nan")

    def vector(self) -> np.ndarray:
        return np.concatenate([self.state.u1, self.state.u2, [self.multiplier, self.parameter_value]])


@dataclass(frozen=True)
class StepConfig:
    """Pseudo-arclength settings (norms are weighted as in :attr:`BvpSystem.weights`)."""

    ds: float = 1e-2
    ds_min: float = 1e-8
    ds_max: float = 0.1
    max_points: int = 2000
    tol: float = 1e-9
    max_corrector_iter: int = 12
    grow_below: int = 3
    shrink_above: int = 8
    dg_floor: float = 1e-6
    dg_sign_guard: bool = True
    refine_tol: float = 1e-9
    min_cos_turn: float = 0.9
    max_resolved_fraction: float = 0.125

    def __post_init__(self):
        if not (0 < self.ds_min <= self.ds <= self.ds_max):
            raise ValueError("need 0 < ds_min <= ds <= ds_max")
        if not self.tol > 0 or not self.dg_floor > 0:
            raise ValueError("tol and dg_floor must be > 0")
        if self.max_points < 2:
            raise ValueError("max_points must be >= 2")


@dataclass
class Branch:
    system: BvpSystem
    points: List[BranchPoint] = field(default_factory=list)
    provenance: Union[str, SwitchedAt, HomotopyFrom] = HOMOGENEOUS
    stop_reason: str = ""
    folds: List[int] = field(default_factory=list)

    @property
    def parameter_values(self) -> np.ndarray:
        return np.array([p.parameter_value for p in self.points])

    @property
    def l2_norms(self) -> np.ndarray:
        return np.array([p.l2_norm for p in self.points])


def _corrector(system: BvpSystem, Xp: np.ndarray, direction: np.ndarray, cfg: StepConfig,
               fixed_plane: bool = False) -> Tuple[np.ndarray, int]:
    """Moore-Penrose corrector (or Keller's with ``fixed_plane``) from the prediction ``Xp``."""
    w = system.weights
    X = Xp.copy()
    V = direction.copy()
    r = system.residual(X)
    r0 = np.max(np.abs(r))
    for it in range(cfg.max_corrector_iter + 1):
        res = np.max(np.abs(r))
        if not np.isfinite(res) or res > 1e6 * max(r0, 1.0):
            raise ConvergenceError("corrector diverged")
        if res <= cfg.tol and it > 0:
            return X, it
        if it == cfg.max_corrector_iter:
            break
        A = system.bordered(X, w * V)
        try:
            lu = _splu(A)
        except RuntimeError as exc:
            raise ConvergenceError(f"singular bordered matrix: {exc}") from exc
        dX = lu.solve(np.concatenate([-r, [0.0]]))
        if not fixed_plane:
            e = np.zeros(len(X))
            e[-1] = 1.0
            Vn = lu.solve(e)
            V = Vn / system.norm(Vn)
            if system.inner(V, direction) < 0:
                V = -V
        X = X + dX
        with np.errstate(all="ignore"):
            r = system.residual(X)
    raise ConvergenceError(f"corrector did not converge in {cfg.max_corrector_iter} iterations "
                           f"(residual {np.max(np.abs(r)):.3e})")


def _tangent_and_sign(system: BvpSystem, X: np.ndarray, orient: np.ndarray):
    """Unit tangent at ``X`` oriented along ``orient`` and the sign of the bordered determinant."""
    A = system.bordered(X, system.weights * orient)
    lu = _splu(A)
    e = np.zeros(len(X))
    e[-1] = 1.0
    t = lu.solve(e)
    t /= system.norm(t)
    return t, determinant_sign(lu)


def _make_point(system: BvpSystem, X: np.ndarray, tangent: np.ndarray, sign: int) -> BranchPoint:
    state, lam = system.unpack(X)
    J = system.state_jacobian(X)
    dg = system.dg_values(X)
    return BranchPoint(
        parameter_value=lam,
        state=state,
        l2_norm=l2_norm_z(state),
        tangent=tangent,
        smallest_singular_value=smallest_singular_value(J),
        n_interfaces=count_interfaces(state.u1, system.params.u1_mean),
        multiplier=float(X[2 * system.n_cells]),
        test_sign=sign,
        min_abs_dg=float(np.min(np.abs(dg))),
    )


def _initial_tangent(system: BvpSystem, X: np.ndarray, direction: float,
                     hint: Optional[np.ndarray]) -> np.ndarray:
    if hint is not None:
        t, _ = _tangent_and_sign(system, X, hint)
        return t
    e = np.zeros(len(X))
    e[-1] = 1.0
    try:
        t, _ = _tangent_and_sign(system, X, e)
    except RuntimeError:
        t = e
    if t[-1] * direction < 0:
        t = -t
    return t


def continue_branch(system: BvpSystem, start: Union[BranchPoint, StateField],
                    parameter_range: Tuple[float, float], cfg: StepConfig = StepConfig(),
                    direction: float = 1.0, initial_direction: Optional[np.ndarray] = None,
                    provenance: Union[str, SwitchedAt, HomotopyFrom] = HOMOGENEOUS,
                    start_parameter: Optional[float] = None) -> Branch:
    """Trace a solution branch of ``system`` in its active parameter.

    The trace stops at either end of ``parameter_range`` (landing exactly on
    it), when a node has ``|D_g| < dg_floor`` or ``D_g`` would change sign at
    some node and the step cannot be reduced further, on corrector failure
    below ``ds_min``, or after ``max_points`` points.
    """
    lo, hi = sorted(parameter_range)
    if isinstance(start, BranchPoint):
        X = start.vector()
    else:
        lam0 = system.parameter_value() if start_parameter is None else start_parameter
        X = system.pack(start, lam0)
    if not lo <= X[-1] <= hi:
        raise ValueError(f"start parameter {X[-1]} outside range [{lo}, {hi}]")
    if np.max(np.abs(system.residual(X))) > cfg.tol:
        X, _ = _newton_fixed(system, X, cfg.tol, 50)
    t = _initial_tangent(system, X, direction, initial_direction)
    t, sign = _tangent_and_sign(system, X, t)
    branch = Branch(system, provenance=provenance)
    branch.points.append(_make_point(system, X, t, sign))
    ds = cfg.ds
    may_grow = True
    secant: Optional[np.ndarray] = None
    dg_prev = np.sign(system.dg_values(X))

    while len(branch.points) < cfg.max_points:
        pred = t if secant is None else secant
        Xp = X + ds * pred
        try:
            Xc, iters = _corrector(system, Xp, pred, cfg)
            step = system.norm(Xc - X)
            if step > 2.0 * ds or system.inner(Xc - X, pred) < cfg.min_cos_turn * step:
                raise ConvergenceError("corrector left the step neighbourhood")
        except (ConvergenceError, RuntimeError, ValueError) as exc:
            ds *= 0.5
            may_grow = False
            if ds < cfg.ds_min:
                branch.stop_reason = f"{STOP_CORRECTOR}: {exc}"
                break
            continue

        dg = system.dg_values(Xc)
        if np.min(np.abs(dg)) < cfg.dg_floor:
            branch.stop_reason = STOP_DG
            break
        if cfg.dg_sign_guard and np.any(np.sign(dg) != dg_prev):
            ds *= 0.5
            may_grow = False
            if ds < cfg.ds_min:
                branch.stop_reason = STOP_DG
                break
            continue
        u1 = Xc[:system.n_cells]
        if np.min(u1) < -1e-8 or np.max(u1) > 1 + 1e-8:
            ds *= 0.5
            may_grow = False
            if ds < cfg.ds_min:
                branch.stop_reason = STOP_UNPHYSICAL
                break
            continue

        landed = False
        if not lo <= Xc[-1] <= hi:
            bound = hi if Xc[-1] > hi else lo
            frac = (bound - X[-1]) / (Xc[-1] - X[-1])
            Xb = X + frac * (Xc - X)
            Xb[-1] = bound
            try:
                Xc, _ = _newton_fixed(system, Xb, cfg.tol, 50)
            except ConvergenceError:
                ds *= 0.5
                may_grow = False
                if ds < cfg.ds_min:
                    branch.stop_reason = f"{STOP_CORRECTOR}: could not land on range boundary"
                    break
                continue
            landed = True

        new_secant = (Xc - X) / system.norm(Xc - X)
        try:
            t_new, sign = _tangent_and_sign(system, Xc, new_secant)
        except RuntimeError:
            t_new, sign = new_secant, 0
        if t_new[-1] * t[-1] < 0:
            branch.folds.append(len(branch.points))
        branch.points.append(_make_point(system, Xc, t_new, sign))
        dg_prev = np.sign(dg)
        X, t, secant = Xc, t_new, new_secant
        if landed:
            branch.stop_reason = STOP_RANGE
            break
        if iters <= cfg.grow_below and may_grow:
            ds = min(2.0 * ds, cfg.ds_max)
        elif iters >= cfg.shrink_above:
            ds = max(0.5 * ds, cfg.ds_min)
        may_grow = True
    else:
        branch.stop_reason = STOP_MAX_POINTS
    logger.info("branch stopped after %d points at %s=%.8g: %s", len(branch.points),
                system.active_parameter, X[-1], branch.stop_reason)
    return branch


# ---------------------------------------------------------------------------
# detection


@dataclass(frozen=True)
class Detection:
    parameter_value: float
    null_vector: StateField
    point: BranchPoint
    sigma_min: float
    sigma_second: float
    dominant_mode: int
    is_bifurcation: bool
    resolved: bool

    @property
    def singular_gap(self) -> float:
        return self.sigma_second / self.sigma_min if self.sigma_min > 0 else float("inf")


def _orient_null(state: StateField) -> StateField:
    """Sign convention: the larger of ``|U1[0]|, |U2[0]|`` is positive."""
    first = state.u1[0] if abs(state.u1[0]) >= abs(state.u2[0]) else state.u2[0]
    if first < 0:
        return StateField(-state.u1, -state.u2, state.grid)
    return state


def _analyse(system: BvpSystem, X: np.ndarray, orient: np.ndarray, cfg: StepConfig,
             fold_tol: float = 1e-2) -> Detection:
    J = system.state_jacobian(X)
    trip = smallest_singular_triplets(J, k=2)
    n = system.n_cells
    v = trip.right[:, 0]
    state, lam = system.unpack(X)
    null = _orient_null(StateField(v[:n], v[n:2 * n], state.grid))
    dR = system.parameter_derivative(X)
    # dR/dlambda in the range of J (orthogonal to the left null vector) means
    # a bifurcation; the floor covers dR/dlambda at roundoff level
    projection = abs(float(trip.left_min @ dR))
    floor = 1e-6 * max(1.0, float(np.max(np.abs(X[:-1]))))
    in_range = projection <= max(fold_tol * np.linalg.norm(dR), floor)
    mode = dominant_mode(null.u1, null.u2)
    resolved = (mode <= cfg.max_resolved_fraction * n
                and float(np.min(np.abs(system.dg_values(X)))) >= cfg.dg_floor)
    t, sign = _tangent_and_sign(system, X, orient)
    point = dataclasses.replace(_make_point(system, X, t, sign), is_bifurcation=in_range,
                                smallest_singular_value=float(trip.values[0]))
    return Detection(lam, null, point, float(trip.values[0]), float(trip.values[1]), mode,
                     in_range, resolved)


def _screen_mode(system: BvpSystem, X: np.ndarray, cfg: StepConfig) -> bool:
    """Cheap resolution screen with an inverse-iteration null vector."""
    try:
        lu = _splu(system.state_jacobian(X))
    except RuntimeError:
        return True
    n = system.n_cells
    x = np.random.default_rng(7).standard_normal(system.size)
    for _ in range(6):
        x = lu.solve(lu.solve(x, trans="T"))
        x /= np.linalg.norm(x)
    mode = dominant_mode(x[:n], x[n:2 * n])
    return mode <= cfg.max_resolved_fraction * n


def _refine(system: BvpSystem, Xa: np.ndarray, sa: int, Xb: np.ndarray, sb: int,
            cfg: StepConfig) -> Optional[Detection]:
    chord = Xb - Xa
    length = system.norm(chord)
    d = chord / length
    lo_s, hi_s = 0.0, length
    X_lo, X_hi = Xa, Xb
    screened = False
    for _ in range(200):
        if abs(X_hi[-1] - X_lo[-1]) <= cfg.refine_tol * max(1.0, abs(X_lo[-1])):
            break
        s = 0.5 * (lo_s + hi_s)
        try:
            Xs, _ = _corrector(system, Xa + s * d, d, cfg, fixed_plane=True)
            _, ss = _tangent_and_sign(system, Xs, d)
        except (ConvergenceError, RuntimeError):
            break
        if ss == sa:
            lo_s, X_lo = s, Xs
        else:
            hi_s, X_hi = s, Xs
        if not screened and abs(X_hi[-1] - X_lo[-1]) <= 1e-3 * max(1.0, abs(X_lo[-1])):
            screened = True
            if not _screen_mode(system, Xs, cfg):
                return None
    Xm = X_lo if abs(X_lo[-1] - X_hi[-1]) < 1e-300 else 0.5 * (X_lo + X_hi)
    try:
        Xm, _ = _corrector(system, Xm, d, cfg, fixed_plane=True)
    except ConvergenceError:
        Xm = X_lo
    return _analyse(system, Xm, d, cfg)


def detect_branch_points(branch: Branch, cfg: StepConfig = StepConfig(),
                         include_unresolved: bool = False) -> List[Detection]:
    """Locate sign changes of the bordered determinant and refine them by bisection.

    Detections whose null vector is dominated by a cosine mode above
    ``max_resolved_fraction * n_cells`` (not resolved by the grid) or that sit
    where ``|D_g| < dg_floor`` are dropped unless ``include_unresolved``.
    """
    if len(branch.points) < 2:
        raise ValueError("branch needs at least two points")
    system = branch.system
    found: List[Detection] = []
    for a, b in zip(branch.points[:-1], branch.points[1:]):
        if a.test_sign == 0 or b.test_sign == 0 or a.test_sign == b.test_sign:
            continue
        det = _refine(system, a.vector(), a.test_sign, b.vector(), b.test_sign, cfg)
        if det is None:
            logger.debug("dropped grid-scale crossing between %s=%.6g and %.6g",
                         system.active_parameter, a.parameter_value, b.parameter_value)
            continue
        if not det.resolved and not include_unresolved:
            logger.debug("dropped unresolved detection at %.8g (mode %d)", det.parameter_value,
                         det.dominant_mode)
            continue
        if found and abs(found[-1].parameter_value - det.parameter_value) <= 1e-6:
            warnings.warn(f"merged detections at {det.parameter_value:.8g}", DetectionMergeWarning)
            continue
        found.append(det)
    return found


# ---------------------------------------------------------------------------
# branch switching and homotopy


def homogeneous_start(system: BvpSystem, lam: float) -> BranchPoint:
    params = system.params_at(lam)
    u1s, u2s = model.steady_state(params)
    grid = system.grid_at(lam)
    X = system.pack(StateField.constant(grid, u1s, u2s), lam)
    e = np.zeros(len(X))
    e[-1] = 1.0
    t, sign = _tangent_and_sign(system, X, e)
    return _make_point(system, X, t, sign)


def switch_branch(detection: Detection, direction: int, system: BvpSystem,
                  parameter_range: Tuple[float, float], cfg: StepConfig = StepConfig(),
                  max_halvings: int = 6) -> Branch:
    """Leave a bifurcation point along ``direction * null_vector`` and trace the new branch.

    The first point is found by a corrector restricted to the hyperplane
    orthogonal to the null vector at offset ``a``; ``a`` starts at
    ``1e-2 * ||state||`` (reduced to keep u1 inside (0, 1)) and is halved up
    to ``max_halvings`` times on failure.
    """
    if direction not in (1, -1):
        raise ValueError("direction must be +1 or -1")
    n = system.n_cells
    Xb = detection.point.vector()
    phi = np.concatenate([detection.null_vector.u1, detection.null_vector.u2, [0.0, 0.0]])
    phi /= system.norm(phi)
    state_norm = system.norm(np.concatenate([Xb[:-1], [0.0]]))
    a0 = 1e-2 * state_norm
    u1 = Xb[:n]
    room = np.min(np.minimum(u1, 1 - u1))
    peak = np.max(np.abs(phi[:n]))
    if peak > 0:
        a0 = min(a0, 0.5 * room / peak)
    last_exc: Optional[Exception] = None
    for k in range(max_halvings + 1):
        a = a0 * 0.5**k
        X0 = Xb + direction * a * phi
        try:
            Xc, _ = _corrector(system, X0, phi, cfg, fixed_plane=True)
        except ConvergenceError as exc:
            last_exc = exc
            continue
        if not np.all(np.isfinite(Xc)) or np.min(Xc[:n]) < 0 or np.max(Xc[:n]) > 1:
            last_exc = ConvergenceError("switched point left [0, 1]")
            continue
        if not parameter_range[0] <= Xc[-1] <= parameter_range[1]:
            last_exc = ConvergenceError("switched point outside parameter range")
            continue
        first = detection.point
        hint = (Xc - Xb) / system.norm(Xc - Xb)
        provenance = SwitchedAt(detection.parameter_value, detection.dominant_mode, direction)
        branch = continue_branch(system, system.unpack(Xc)[0], parameter_range, cfg,
                                 initial_direction=hint, provenance=provenance,
                                 start_parameter=Xc[-1])
        branch.points.insert(0, first)
        branch.folds = [i + 1 for i in branch.folds]
        return branch
    raise ConvergenceError(f"branch switching failed after {max_halvings} amplitude halvings: {last_exc}")


def homotopy_rho_to_zero(start: BranchPoint, system: BvpSystem, cfg: StepConfig = StepConfig()) -> Branch:
    """Continue a solution of the rho-regularised problem in ``rho`` down to ``rho = 0``.

    ``system`` supplies the fixed parameters; its active parameter is switched
    to ``rho``.  Raises :class:`HomotopyError` (carrying the partial branch)
    if the trace ends anywhere but at ``rho = 0``.
    """
    base = system.params_at(start.parameter_value)
    rho0 = base.rho
    if not rho0 > 0:
        raise ValueError("homotopy needs rho > 0 at the start point")
    rsys = BvpSystem(system.n_cells, base, "rho")
    X = np.concatenate([start.state.u1, start.state.u2, [start.multiplier, rho0]])
    branch = continue_branch(rsys, rsys.unpack(X)[0], (0.0, rho0 * 10.0), cfg, direction=-1.0,
                             provenance=HomotopyFrom(system.active_parameter, start.parameter_value),
                             start_parameter=rho0)
    last = branch.points[-1]
    if branch.stop_reason != STOP_RANGE or last.parameter_value != 0.0:
        raise HomotopyError(f"homotopy stopped at rho={last.parameter_value:.6g}: {branch.stop_reason}",
                            branch)
    return branch
