"""Closed-form model quantities for the cross-diffusion herding system.

The system is

    u1_t = (u1_x - g(u1) u2_x)_x
    u2_t = (delta u1_x + kappa u2_x)_x + f(u1) - alpha u2

with no-flux boundaries on [0, l].  Everything here is a pure function of an
immutable :class:`ModelParams`.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from functools import cached_property
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, optimize
from scipy.special import expit, logit, xlogy

DOMAIN_TOL = 1e-12


class DomainError(ValueError):
    """Argument outside the domain of a nonlinearity or entropy density."""


class InadmissibleDelta(ValueError):
    """delta = 0 or delta <= -kappa/gamma, where the entropy structure is undefined."""


@dataclass(frozen=True)
class Nonlinearity:
    """Mobility ``g``: ``s(1-s)`` (``kind="logistic"``) or ``s**a (1-s)**b``."""

    kind: str = "logistic"
    a: float = 1.0
    b: float = 1.0

    def __post_init__(self):
        if self.kind not in ("logistic", "power"):
            raise ValueError(f"unknown nonlinearity kind {self.kind!r}")
        if self.kind == "power" and (self.a < 1 or self.b < 1):
            raise ValueError("power nonlinearity needs a >= 1 and b >= 1")

    @property
    def is_logistic(self) -> bool:
        return self.kind == "logistic" or (self.a == 1.0 and self.b == 1.0)

    def g(self, s):
        s = np.asarray(s, dtype=float)
        if self.is_logistic:
            return s * (1.0 - s)
        return s**self.a * (1.0 - s) ** self.b

    def g_prime(self, s):
        s = np.asarray(s, dtype=float)
        if self.is_logistic:
            return 1.0 - 2.0 * s
        a, b = self.a, self.b
        return a * s ** (a - 1) * (1 - s) ** b - b * s**a * (1 - s) ** (b - 1)

    def g_second(self, s):
        s = np.asarray(s, dtype=float)
        if self.is_logistic:
            return np.full_like(s, -2.0)
        a, b = self.a, self.b
        t1 = a * (a - 1) * s ** (a - 2) * (1 - s) ** b if a != 1 else 0.0 * s
        t2 = -2 * a * b * s ** (a - 1) * (1 - s) ** (b - 1)
        t3 = b * (b - 1) * s**a * (1 - s) ** (b - 2) if b != 1 else 0.0 * s
        return t1 + t2 + t3

    @cached_property
    def gamma(self) -> float:
        """``max g`` on [0, 1]."""
        if self.is_logistic:
            return 0.25
        res = optimize.minimize_scalar(
            lambda s: -float(self.g(s)), bracket=(0.0, 0.5, 1.0), method="golden",
            tol=1e-12)
        return float(-res.fun)


LOGISTIC = Nonlinearity()


def f_source(s):
    """Source term ``f(s) = s(1-s)``."""
    s = np.asarray(s, dtype=float)
    return s * (1.0 - s)


def f_prime(s):
    return 1.0 - 2.0 * np.asarray(s, dtype=float)


F_MAX = 0.25


@dataclass(frozen=True)
class ModelParams:
    """Scalar parameters of the model.

    ``c_sobolev`` is the convex Sobolev constant, which has no closed form and
    is therefore supplied by the user.
    """

    delta: float
    kappa: float = 1.0
    alpha: float = 1.0
    length: float = 1.0
    rho: float = 0.0
    u1_mean: float = 0.5
    c_sobolev: float = 1.0
    c_lipschitz: float = 1.0
    nonlinearity: Nonlinearity = LOGISTIC

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be > 0")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if not self.length > 0:
            raise ValueError("length must be > 0")
        if not self.rho >= 0:
            raise ValueError("rho must be >= 0")
        if not 0 < self.u1_mean < 1:
            raise ValueError("u1_mean must lie in (0, 1)")
        if not self.c_sobolev > 0:
            raise ValueError("c_sobolev must be > 0")
        if not self.c_lipschitz > 0:
            raise ValueError("c_lipschitz must be > 0")

    def replace(self, **changes) -> "ModelParams":
        return dataclasses.replace(self, **changes)

    @property
    def gamma(self) -> float:
        return self.nonlinearity.gamma


def _check_unit(s, open_interval=False):
    s = np.asarray(s, dtype=float)
    if open_interval:
        if np.any(s <= 0.0) or np.any(s >= 1.0):
            raise DomainError("argument must lie strictly inside (0, 1)")
    elif np.any(s < -DOMAIN_TOL) or np.any(s > 1.0 + DOMAIN_TOL):
        raise DomainError("argument must lie in [0, 1]")
    return s


def g_eval(s, params: ModelParams):
    s = _check_unit(s)
    return params.nonlinearity.g(np.clip(s, 0.0, 1.0))


def g_prime_eval(s, params: ModelParams):
    s = _check_unit(s)
    return params.nonlinearity.g_prime(np.clip(s, 0.0, 1.0))


def g_second_eval(s, params: ModelParams):
    s = _check_unit(s)
    return params.nonlinearity.g_second(np.clip(s, 0.0, 1.0))


# ---------------------------------------------------------------------------
# entropy density h0 (second antiderivative of 1/g, reference point m = 1/2)

_M_REF = 0.5


def _h0_prime_quad(s: float, nl: Nonlinearity) -> float:
    val, _ = integrate.quad(lambda t: 1.0 / float(nl.g(t)), _M_REF, s, limit=200)
    return val


def _h0_quad(s: float, nl: Nonlinearity) -> float:
    # Cauchy formula for the repeated integral
    val, _ = integrate.quad(lambda t: (s - t) / float(nl.g(t)), _M_REF, s, limit=200)
    return val


def h0_eval(s, nonlinearity: Nonlinearity = LOGISTIC):
    """Entropy density ``h0(s)``; for the logistic mobility ``s log s + (1-s) log(1-s)``."""
    s = _check_unit(s, open_interval=True)
    if nonlinearity.is_logistic:
        return xlogy(s, s) + xlogy(1.0 - s, 1.0 - s)
    return np.vectorize(lambda v: _h0_quad(v, nonlinearity), otypes=[float])(s)


def h0_prime(s, nonlinearity: Nonlinearity = LOGISTIC):
    s = _check_unit(s, open_interval=True)
    if nonlinearity.is_logistic:
        return logit(s)
    return np.vectorize(lambda v: _h0_prime_quad(v, nonlinearity), otypes=[float])(s)


def h0_prime_inverse(w, nonlinearity: Nonlinearity = LOGISTIC):
    """The map ``(h0')^{-1}: R -> (0, 1)``."""
    w = np.asarray(w, dtype=float)
    if nonlinearity.is_logistic:
        return expit(w)

    def inv(v):
        lo, hi = 1e-3, 1 - 1e-3
        while _h0_prime_quad(lo, nonlinearity) > v:
            lo *= 1e-3
            if lo < 1e-300:
                raise DomainError("h0' inverse out of floating range")
        while _h0_prime_quad(hi, nonlinearity) < v:
            hi = 1 - (1 - hi) * 1e-3
            if 1 - hi < 1e-15:
                raise DomainError("h0' inverse out of floating range")
        return optimize.brentq(lambda s: _h0_prime_quad(s, nonlinearity) - v, lo, hi,
                               xtol=1e-15, rtol=1e-15)

    return np.vectorize(inv, otypes=[float])(w)


def relative_h0(s, s_ref, nonlinearity: Nonlinearity = LOGISTIC):
    """Pointwise Bregman form ``h0(s) - h0(s_ref) - h0'(s_ref)(s - s_ref) >= 0``.

    It integrates to ``h0(u1) - h0(u1*)`` whenever the mean of ``u1`` equals
    ``u1*``, and stays non-negative when it does not.
    """
    s = _check_unit(s, open_interval=True)
    if nonlinearity.is_logistic:
        # Kullback-Leibler form, no cancellation between h0 terms
        return xlogy(s, s / s_ref) + xlogy(1.0 - s, (1.0 - s) / (1.0 - s_ref))
    return (h0_eval(s, nonlinearity) - h0_eval(s_ref, nonlinearity)
            - h0_prime(s_ref, nonlinearity) * (s - s_ref))


# ---------------------------------------------------------------------------
# entropy-method constants


def _check_delta(params: ModelParams) -> None:
    if params.delta == 0:
        raise InadmissibleDelta("delta must be nonzero (delta=0 is not covered "
                                "by the entropy structure)")
    if params.delta <= -params.kappa / params.gamma:
        raise InadmissibleDelta(
            f"delta={params.delta} must exceed delta* = -kappa/gamma = "
            f"{-params.kappa / params.gamma}")


def is_admissible(params: ModelParams) -> bool:
    try:
        _check_delta(params)
    except InadmissibleDelta:
        return False
    return True


def delta0(params: ModelParams) -> float:
    _check_delta(params)
    if params.delta > 0:
        return params.delta
    return params.kappa / params.gamma


def epsilon1(params: ModelParams) -> float:
    """Coercivity constant of the diffusion matrix in entropy variables."""
    _check_delta(params)
    d, k, gam = params.delta, params.kappa, params.gamma
    if d > 0:
        return min(1.0, d * k)
    eps0 = 0.5 * (1.0 - 0.25 * (1.0 - gam * d / k) ** 2)
    second = (k**2 - (k - gam * d) ** 2 / (4.0 * (1.0 - eps0))) / gam
    return min(eps0, second)


def b_matrix(u1, params: ModelParams) -> np.ndarray:
    """Diffusion matrix ``B(w)`` in entropy variables, evaluated at ``u1 = u1(w)``."""
    d0 = delta0(params)
    g = float(g_eval(u1, params))
    return np.array([[g, -d0 * g], [params.delta * g, d0 * params.kappa]])


def decay_margin(params: ModelParams) -> float:
    """``delta0 * eps1 - (gamma/alpha) c_L^2 c_S``; decay is guaranteed iff positive."""
    return delta0(params) * epsilon1(params) - (
        params.gamma / params.alpha * params.c_lipschitz**2 * params.c_sobolev)


def chi_rate(params: ModelParams) -> Optional[float]:
    """Guaranteed exponential decay rate of the relative entropy.

    Returns ``None`` when the decay condition fails, meaning no rate is
    guaranteed (this is a normal outcome, not an error).
    """
    if decay_margin(params) <= 0:
        return None
    e1, d0 = epsilon1(params), delta0(params)
    gam, cl, cs, a = params.gamma, params.c_lipschitz, params.c_sobolev, params.alpha
    return min(e1 / cs - gam * cl**2 / (a * d0), a)


@dataclass(frozen=True)
class CriticalDeltas:
    delta_star: float
    delta_d: float
    decay_intervals: Tuple[Tuple[float, float], ...]


def delta_star(params: ModelParams) -> float:
    return -params.kappa / params.gamma


def delta_d(params: ModelParams) -> float:
    return -params.kappa / float(g_eval(params.u1_mean, params))


def decay_region(params: ModelParams, delta_grid: Sequence[float],
                 xtol: float = 1e-10) -> CriticalDeltas:
    """Maximal sub-intervals of ``delta_grid`` where decay is guaranteed.

    Grid points outside ``(delta*, 0) U (0, inf)`` are skipped.  Interval ends
    between a passing and a failing grid point are located by bisection; an
    end that runs into ``delta = 0`` or ``delta*`` is reported at that point.
    """
    grid = np.asarray(delta_grid, dtype=float)
    if np.any(np.diff(grid) <= 0):
        raise ValueError("delta_grid must be strictly increasing")
    dstar = delta_star(params)

    def margin(d):
        return decay_margin(params.replace(delta=d))

    def admissible(d):
        return d != 0 and d > dstar

    ok = np.array([admissible(d) and margin(d) > 0 for d in grid])

    def edge(inside: float, outside: float) -> float:
        # barrier between the two points: 0 or delta*
        for barrier in (0.0, dstar):
            if min(inside, outside) <= barrier <= max(inside, outside):
                if inside == barrier:
                    return inside
                near = barrier + math.copysign(1e-300 + abs(barrier) * 1e-15, inside - barrier)
                if margin(near) > 0:
                    return barrier
                outside = near
                break
        if not admissible(outside):
            return inside
        return optimize.brentq(margin, inside, outside, xtol=xtol)

    intervals: List[Tuple[float, float]] = []
    i = 0
    n = len(grid)
    while i < n:
        if not ok[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and ok[j + 1] and not (grid[j] < 0 < grid[j + 1]):
            j += 1
        lo = grid[i] if i == 0 else edge(grid[i], grid[i - 1])
        hi = grid[j] if j == n - 1 else edge(grid[j], grid[j + 1])
        intervals.append((float(lo), float(hi)))
        i = j + 1
    return CriticalDeltas(dstar, delta_d(params), tuple(intervals))


def steady_state(params: ModelParams) -> Tuple[float, float]:
    """Homogeneous steady state ``(u1*, u2*) = (mean u1, f(u1*)/alpha)``."""
    u1 = params.u1_mean
    return u1, float(f_source(u1)) / params.alpha
