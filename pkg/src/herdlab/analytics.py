"""Closed-form bifurcation values of the homogeneous steady state on an interval."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import model
from .grid import Grid, StateField
from .model import ModelParams

LARGE = "large"
SMALL = "small"
BOUNDARY = "boundary"


class ConditioningWarning(UserWarning):
    """A determinant is small but not small enough to be treated as zero."""


def neumann_eigenvalue(n: int, length: float) -> float:
    """``(n pi / l)^2``, the n-th nonzero eigenvalue of ``-d^2/dx^2`` with Neumann ends."""
    if int(n) != n or n < 1:
        raise ValueError("mode index n must be an integer >= 1 (the constant mode is "
                         "excluded by the mass constraint)")
    if not length > 0:
        raise ValueError("length must be > 0")
    return (n * math.pi / length) ** 2


def _g_star(params: ModelParams) -> float:
    g = float(model.g_eval(params.u1_mean, params))
    if not g > 0:
        raise ValueError("g(u1*) must be positive")
    return g


def delta_b(n: int, params: ModelParams, include_rho: bool = True, mu: Optional[float] = None) -> float:
    """Cross-diffusion value where mode ``n`` of the homogeneous state turns singular.

    ``include_rho=False`` gives the value of the unregularised system, written
    as ``delta_d + (f' - alpha/g)/mu`` so that the offset from ``delta_d`` is
    computed without cancellation.  ``mu`` overrides the eigenvalue, e.g. with
    a discrete one.
    """
    if mu is None:
        mu = neumann_eigenvalue(n, params.length)
    g = _g_star(params)
    fp = float(model.f_prime(params.u1_mean))
    if not include_rho:
        return -params.kappa / g + (fp - params.alpha / g) / mu
    rho = params.rho
    return fp / mu - (params.kappa * mu + params.alpha) * (mu + rho) / (g * mu**2)


@dataclass(frozen=True)
class Eigenfunction:
    """``sqrt(2/l) cos(k x) (amplitude_u1, amplitude_u2)``."""

    wavenumber: float
    amplitude_u1: float
    amplitude_u2: float
    length: float

    def sample(self, grid: Grid) -> StateField:
        e = math.sqrt(2.0 / self.length) * np.cos(self.wavenumber * grid.x)
        return StateField(self.amplitude_u1 * e, self.amplitude_u2 * e, grid)


def eigenfunction(n: int, params: ModelParams, include_rho: bool = False) -> Eigenfunction:
    """Null eigenfunction descriptor of mode ``n``.

    Without ``rho`` the amplitude pair is ``(g(u1*), 1)``.  With ``rho`` the
    kernel of the regularised linearisation has the ratio
    ``g(u1*) mu / (mu + rho)`` instead.
    """
    mu = neumann_eigenvalue(n, params.length)
    g = _g_star(params)
    a1 = g * mu / (mu + params.rho) if include_rho else g
    return Eigenfunction(n * math.pi / params.length, a1, 1.0, params.length)


def null_eigenfunction(n: int, params: ModelParams, grid: Grid,
                       include_rho: bool = False) -> StateField:
    """``(U1, U2) = sqrt(2/l) cos(n pi x / l) (g(u1*), 1)`` sampled at the cell centres."""
    return eigenfunction(n, params, include_rho).sample(grid)


@dataclass(frozen=True)
class BifurcationPrediction:
    mode_index: int
    mu_n: float
    delta_b: float
    delta_b_rho0: float
    eigenfunction: Eigenfunction

    def as_dict(self) -> dict:
        ef = self.eigenfunction
        return {
            "mode_index": self.mode_index,
            "mu_n": self.mu_n,
            "delta_b": self.delta_b,
            "delta_b_rho0": self.delta_b_rho0,
            "eigenfunction": {
                "amplitude_u1": ef.amplitude_u1,
                "amplitude_u2": ef.amplitude_u2,
                "wavenumber": ef.wavenumber,
                "normalization": "integral of e^2 over [0, l] equals 1",
            },
        }


def predict(params: ModelParams, n_max: int = 9) -> List[BifurcationPrediction]:
    return [BifurcationPrediction(n, neumann_eigenvalue(n, params.length),
                                  delta_b(n, params, True), delta_b(n, params, False),
                                  eigenfunction(n, params))
            for n in range(1, n_max + 1)]


def linearized_mode_matrix(n: int, params: ModelParams, mu: Optional[float] = None) -> np.ndarray:
    """Linearisation of the steady problem at ``u*`` restricted to mode ``n``.

    Rows are the two steady equations, columns the amplitudes ``(U1, U2)``.
    """
    if mu is None:
        mu = neumann_eigenvalue(n, params.length)
    g = _g_star(params)
    fp = float(model.f_prime(params.u1_mean))
    return np.array([[-mu - params.rho, g * mu],
                     [fp - params.delta * mu, -params.kappa * mu - params.alpha]])


def crossing_check(n: int, params: ModelParams, det_tol: float = 1e-10,
                   warn_tol: float = 1e-6) -> bool:
    """Whether mode ``n`` crosses non-degenerately at ``params.delta``.

    Normalising the null eigenfunction by ``U1 = P e, U2 = Q e`` with the
    ``delta``-derivative condition leads to the 2x2 system

        (1 + rho/mu) P - g Q = -g
        (f' - delta mu) P - (kappa mu + alpha) Q = 0.

    Its coefficient matrix is singular exactly at ``delta_b`` (with ``rho``);
    the crossing is non-degenerate iff the right-hand side then lies outside
    the column space, i.e. the system has no solution.
    """
    g = _g_star(params)
    if params.kappa + params.delta * g == 0:
        raise ValueError("delta equals delta_d = -kappa/g(u1*); the crossing is not generic there")
    mu = neumann_eigenvalue(n, params.length)
    fp = float(model.f_prime(params.u1_mean))
    A = np.array([[1.0 + params.rho / mu, -g], [fp - params.delta * mu, -(params.kappa * mu + params.alpha)]])
    rhs = np.array([-g, 0.0])
    scale = np.linalg.norm(A, 2) ** 2
    det = float(np.linalg.det(A)) / scale
    if abs(det) > det_tol:
        if abs(det) < warn_tol:
            warnings.warn(f"determinant {det:.3e} is small but above tolerance {det_tol:.1e}",
                          ConditioningWarning)
        return False
    rank_a = np.linalg.matrix_rank(A, tol=det_tol * np.linalg.norm(A, 2))
    rank_aug = np.linalg.matrix_rank(np.column_stack([A, rhs]),
                                     tol=det_tol * np.linalg.norm(A, 2))
    return rank_aug > rank_a


def alpha_threshold(n: int, params: ModelParams) -> float:
    """``mu (f' g - kappa rho) / (rho + mu)``: ``delta_b^n < delta_d`` iff ``alpha`` exceeds it."""
    mu = neumann_eigenvalue(n, params.length)
    g = _g_star(params)
    fp = float(model.f_prime(params.u1_mean))
    return mu * (fp * g - params.kappa * params.rho) / (params.rho + mu)


def alpha_regime(params: ModelParams, n_max: int = 50, rtol: float = 1e-12) -> str:
    """Classify ``alpha`` against the per-mode thresholds for ``n = 1..n_max``.

    ``"large"``: every ``delta_b^n`` lies below ``delta_d``; ``"small"``: every
    one lies above; ``"boundary"``: equality for some mode, or mixed.
    """
    signs = set()
    for n in range(1, n_max + 1):
        thr = alpha_threshold(n, params)
        diff = params.alpha - thr
        if abs(diff) <= rtol * max(abs(params.alpha), abs(thr)):
            signs.add(0)
        else:
            signs.add(1 if diff > 0 else -1)
    if signs == {1}:
        return LARGE
    if signs == {-1}:
        return SMALL
    return BOUNDARY
