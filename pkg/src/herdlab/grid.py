"""Uniform cell-centred grid, discrete fields and diagnostics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
import scipy.sparse as sp

from . import model
from .model import ModelParams


class EntropyUndefined(ValueError):
    """Raised when the entropy is evaluated at a state touching u1 = 0 or 1."""


@dataclass(frozen=True)
class Grid:
    """Cell-centred grid on ``[0, length]`` with ``n_cells`` equal cells."""

    n_cells: int
    length: float

    def __post_init__(self):
        if int(self.n_cells) != self.n_cells or self.n_cells < 8:
            raise ValueError("n_cells must be an integer >= 8")
        if not self.length > 0:
            raise ValueError("length must be > 0")

    @property
    def h(self) -> float:
        return self.length / self.n_cells

    @property
    def x(self) -> np.ndarray:
        return (np.arange(self.n_cells) + 0.5) * self.h


def _check_len(values, grid: Grid) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.shape != (grid.n_cells,):
        raise ValueError(f"expected a vector of length {grid.n_cells}, got shape {values.shape}")
    return values


def integrate(values, grid: Grid) -> float:
    """Midpoint rule ``h * sum(values)``."""
    return grid.h * float(np.sum(_check_len(values, grid)))


def face_differences(values, grid: Grid) -> np.ndarray:
    """Difference quotients ``(v[i+1] - v[i]) / h`` at the interior faces."""
    return np.diff(_check_len(values, grid)) / grid.h


def neumann_laplacian_apply(values, grid: Grid) -> np.ndarray:
    """Three-point Laplacian with zero-flux (reflecting) boundaries."""
    v = _check_len(values, grid)
    flux = np.zeros(grid.n_cells + 1)
    flux[1:-1] = np.diff(v) / grid.h
    return np.diff(flux) / grid.h


def neumann_laplacian_matrix(grid: Grid) -> sp.csr_matrix:
    n, h2 = grid.n_cells, grid.h**2
    main = np.full(n, -2.0)
    main[0] = main[-1] = -1.0
    off = np.ones(n - 1)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr") / h2


def discrete_neumann_eigenvalue(n: int, grid: Grid) -> float:
    """Eigenvalue of the negative discrete Laplacian for the mode ``cos(n pi x / l)``."""
    return (2.0 / grid.h * math.sin(n * math.pi * grid.h / (2.0 * grid.length))) ** 2


@dataclass(frozen=True)
class StateField:
    """Pair ``(u1, u2)`` of cell values on a grid."""

    u1: np.ndarray
    u2: np.ndarray
    grid: Grid

    def __post_init__(self):
        u1 = _check_len(self.u1, self.grid).copy()
        u2 = _check_len(self.u2, self.grid).copy()
        u1.setflags(write=False)
        u2.setflags(write=False)
        object.__setattr__(self, "u1", u1)
        object.__setattr__(self, "u2", u2)

    @classmethod
    def constant(cls, grid: Grid, u1: float, u2: float) -> "StateField":
        return cls(np.full(grid.n_cells, float(u1)), np.full(grid.n_cells, float(u2)), grid)

    @classmethod
    def from_vector(cls, vec: np.ndarray, grid: Grid) -> "StateField":
        n = grid.n_cells
        return cls(vec[:n], vec[n:], grid)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.u1, self.u2])

    @property
    def mass_u1(self) -> float:
        return integrate(self.u1, self.grid)

    @property
    def mass_u2(self) -> float:
        return integrate(self.u2, self.grid)

    def l2_u1(self) -> float:
        return math.sqrt(integrate(self.u1**2, self.grid))

    def l2_u2(self) -> float:
        return math.sqrt(integrate(self.u2**2, self.grid))

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "u1", "u2"])
            for row in zip(self.grid.x, self.u1, self.u2):
                w.writerow([format_float(v) for v in row])

    @classmethod
    def from_csv(cls, path: Union[str, Path], length: float) -> "StateField":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        grid = Grid(data.shape[0], length)
        return cls(data[:, 1], data[:, 2], grid)


def format_float(value: float) -> str:
    """17 significant digits, enough to round-trip any double."""
    return format(float(value), ".17g")


@dataclass(frozen=True)
class EntropyReport:
    time: float
    entropy: float
    relative_entropy: float
    dissipation: float
    mass_u1: float
    l2_u2: float


def entropy_report(state: StateField, params: ModelParams, time: float = 0.0) -> EntropyReport:
    """Entropy, relative entropy against the steady state, and entropy dissipation.

    For ``delta`` outside the admissible range the entropy quantities are NaN;
    mass and the u2 norm are still reported.
    """
    grid = state.grid
    u1, u2 = state.u1, state.u2
    if np.any(u1 <= 0.0) or np.any(u1 >= 1.0):
        raise EntropyUndefined("entropy undefined: some u1 value is not strictly inside (0, 1)")
    mass = state.mass_u1
    l2 = state.l2_u2()
    if not model.is_admissible(params):
        nan = float("nan")
        return EntropyReport(time, nan, nan, nan, mass, l2)
    nl = params.nonlinearity
    d0 = model.delta0(params)
    u1s, u2s = model.steady_state(params)
    entropy = integrate(model.h0_eval(u1, nl) + u2**2 / (2 * d0), grid)
    rel = integrate(model.relative_h0(u1, u1s, nl) + (u2 - u2s) ** 2 / (2 * d0), grid)
    du1 = face_differences(u1, grid)
    du2 = face_differences(u2, grid)
    g_face = nl.g(0.5 * (u1[1:] + u1[:-1]))
    integrand = (du1**2 / g_face + (params.delta / d0 - 1.0) * du1 * du2
                 + params.kappa / d0 * du2**2)
    dissipation = grid.h * float(np.sum(integrand))
    return EntropyReport(time, float(entropy), float(rel), dissipation, mass, l2)
