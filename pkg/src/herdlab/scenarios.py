"""Scenario runners: each turns a :class:`RunConfig` into artifacts plus a manifest."""
from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import analytics, model
from .config import ConfigError, RunConfig, to_dict
from .continuation import (STOP_RANGE, Branch, BvpSystem, ConvergenceError, Detection,
                           HomotopyError, continue_branch, detect_branch_points,
                           homogeneous_start, homotopy_rho_to_zero, switch_branch, bvp_residual)
from .grid import Grid, StateField
from .integrator import (ENTROPY, StepFailure, entropy_balance, evolve, cosine_perturbation,
                         trajectory_decay_rate)
from .io import Manifest, write_csv, write_json

logger = logging.getLogger(__name__)

THREADS_ENV = "HERDLAB_THREADS"


class ScenarioFailure(RuntimeError):
    """A solver stage ended without producing the requested result."""


@dataclass
class ScenarioResult:
    output_dir: Path
    manifest_path: Path
    manifest: Manifest


def thread_count() -> int:
    """Worker count: ``HERDLAB_THREADS`` if set, else the CPU count."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return max(1, os.cpu_count() or 1)
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def _parallel_map(fn: Callable, items: Sequence) -> List:
    """Ordered map over a thread pool capped by :func:`thread_count`."""
    workers = min(thread_count(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


class _Timer:
    def __init__(self, timings: Dict[str, float], key: str):
        self.timings, self.key = timings, key

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.timings[self.key] = time.perf_counter() - self.start
        return False


# ---------------------------------------------------------------------------
# branch artifacts


BRANCH_HEADER = ["index", "parameter", "l2_norm", "smallest_singular_value", "n_interfaces",
                 "is_bifurcation", "min_abs_dg", "u1_min", "u1_max"]
DETECTION_HEADER = ["index", "parameter", "dominant_mode", "sigma_min", "sigma_second",
                    "singular_gap", "is_bifurcation", "resolved"]


def write_branch(path: Path, branch: Branch) -> Path:
    rows = [(i, p.parameter_value, p.l2_norm, p.smallest_singular_value, p.n_interfaces,
             p.is_bifurcation, p.min_abs_dg, float(np.min(p.state.u1)), float(np.max(p.state.u1)))
            for i, p in enumerate(branch.points)]
    return write_csv(path, BRANCH_HEADER, rows)


def write_profiles(path: Path, branch: Branch) -> Path:
    """Long-format solution profiles ``(index, parameter, x, u1, u2)`` of every point."""
    def rows():
        for i, p in enumerate(branch.points):
            for x, a, b in zip(p.state.grid.x, p.state.u1, p.state.u2):
                yield (i, p.parameter_value, x, a, b)
    return write_csv(path, ["index", "parameter", "x", "u1", "u2"], rows())


def write_detections(path: Path, detections: Sequence[Detection]) -> Path:
    rows = [(i, d.parameter_value, d.dominant_mode, d.sigma_min, d.sigma_second, d.singular_gap,
             d.is_bifurcation, d.resolved) for i, d in enumerate(detections)]
    return write_csv(path, DETECTION_HEADER, rows)


def write_diagram(path: Path, branches: Sequence[Tuple[str, Branch]]) -> Path:
    """Plot data for the bifurcation diagram: ``(branch, parameter, l2_norm)``."""
    rows = [(name, p.parameter_value, p.l2_norm) for name, b in branches for p in b.points]
    return write_csv(path, ["branch", "parameter", "l2_norm"], rows)


def _homogeneous_branch(cfg: RunConfig) -> Tuple[BvpSystem, Branch, List[Detection]]:
    c = cfg.continuation
    params = cfg.model_params().replace(**{c.parameter: c.start})
    system = BvpSystem(cfg.grid.n_cells, params, c.parameter)
    step = c.to_step_config()
    start = homogeneous_start(system, c.start)
    direction = 1.0 if c.stop > c.start else -1.0
    branch = continue_branch(system, start, (c.start, c.stop), step, direction=direction)
    detections = detect_branch_points(branch, step)
    return system, branch, detections


def _pick_detection(detections: Sequence[Detection], mode_index: int) -> Detection:
    for d in detections:
        if d.dominant_mode == mode_index and d.is_bifurcation:
            return d
    found = [(round(d.parameter_value, 6), d.dominant_mode) for d in detections]
    raise ScenarioFailure(f"no bifurcation of mode {mode_index} detected on the homogeneous "
                          f"branch; detections (value, mode): {found}")


def _branch_summary(branch: Branch) -> Dict[str, object]:
    return {"points": len(branch.points), "stop_reason": branch.stop_reason,
            "parameter_first": branch.points[0].parameter_value,
            "parameter_last": branch.points[-1].parameter_value,
            "folds": [branch.points[i].parameter_value for i in branch.folds]}


# ---------------------------------------------------------------------------
# scenarios


def run_predict(cfg: RunConfig, out: Path, manifest: Manifest) -> None:
    params = cfg.model_params()
    n_max = cfg.predict.n_max
    with _Timer(manifest.timings, "predict"):
        preds = analytics.predict(params, n_max)
        regime = analytics.alpha_regime(params)
    header = ["formula"] + [str(p.mode_index) for p in preds]
    manifest.add(write_csv(out / "bifurcation_values.csv", header,
                           [["rho0"] + [p.delta_b_rho0 for p in preds],
                            ["rho"] + [p.delta_b for p in preds]]))
    manifest.add(write_csv(out / "bifurcation_values_plot.csv",
                           ["mode_index", "mu_n", "delta_b", "delta_b_rho0", "alpha_threshold"],
                           [(p.mode_index, p.mu_n, p.delta_b, p.delta_b_rho0,
                             analytics.alpha_threshold(p.mode_index, params)) for p in preds]))
    manifest.add(write_json(out / "predictions.json",
                            {"delta_d": model.delta_d(params), "alpha_regime": regime,
                             "modes": [p.as_dict() for p in preds]}))
    manifest.results.update(delta_d=model.delta_d(params), alpha_regime=regime,
                            delta_b=[p.delta_b for p in preds],
                            delta_b_rho0=[p.delta_b_rho0 for p in preds])


def run_simulate(cfg: RunConfig, out: Path, manifest: Manifest) -> None:
    params = cfg.model_params()
    t = cfg.time
    stepper = t.to_stepper()
    grid = Grid(cfg.grid.n_cells, params.length)
    initial = cosine_perturbation(grid, params, t.perturbation_amplitude, t.perturbation_mode)
    if np.any(initial.u1 <= 0) or np.any(initial.u1 >= 1):
        raise ConfigError("time.perturbation_amplitude moves the initial u1 outside (0, 1)")
    balance: List[Tuple[float, float, float]] = []

    def on_step(prev: StateField, new: StateField, tau: float) -> None:
        if t.mode == ENTROPY:
            step_cfg = stepper if tau == stepper.tau else type(stepper)(
                tau, stepper.eps_reg, stepper.mode, stepper.newton_tol, stepper.newton_max_iter,
                stepper.t_final)
            b = entropy_balance(prev, new, params, step_cfg)
            balance.append((b.lhs, b.rhs, b.rhs - b.lhs))

    with _Timer(manifest.timings, "evolve"):
        traj = evolve(initial, params, stepper, on_step=on_step)
    rows = [(r.time, r.entropy, r.relative_entropy, r.dissipation, r.mass_u1, r.l2_u2)
            for r in traj.reports]
    manifest.add(write_csv(out / "trajectory.csv", ["time", "entropy", "relative_entropy",
                                                    "dissipation", "mass_u1", "l2_u2"], rows))
    traj.final_state.to_csv(out / "final_state.csv")
    manifest.add(out / "final_state.csv")
    if t.snapshot_every > 0:
        for k in range(0, len(traj.states), t.snapshot_every):
            path = out / "snapshots" / f"state_{k:06d}.csv"
            path.parent.mkdir(parents=True, exist_ok=True)
            traj.states[k].to_csv(path)
            manifest.add(path)
    if balance:
        manifest.add(write_csv(out / "entropy_balance.csv", ["step", "lhs", "rhs", "slack"],
                               [(i + 1, *b) for i, b in enumerate(balance)]))
    try:
        rate: Optional[float] = trajectory_decay_rate(traj)
    except ValueError as exc:
        logger.warning("no decay rate fitted: %s", exc)
        rate = None
    chi = model.chi_rate(params) if model.is_admissible(params) else None
    manifest.results.update(
        steps=len(traj.times) - 1, t_reached=traj.times[-1], tau_halvings=traj.tau_halvings,
        fitted_decay_rate=rate, guaranteed_rate=chi,
        mass_drift=abs(traj.reports[-1].mass_u1 - traj.reports[0].mass_u1),
        entropy_inequality_violations=sum(1 for b in balance if b[2] < 0),
        u1_min=float(np.min(traj.final_state.u1)), u1_max=float(np.max(traj.final_state.u1)))
    manifest.stopping_reasons["evolve"] = traj.error or "t_final reached"
    if traj.error:
        raise ScenarioFailure(traj.error)


def run_continue(cfg: RunConfig, out: Path, manifest: Manifest) -> None:
    with _Timer(manifest.timings, "continue"):
        system, branch, detections = _homogeneous_branch(cfg)
    manifest.add(write_branch(out / "branch.csv", branch))
    manifest.add(write_detections(out / "detections.csv", detections))
    manifest.add(write_diagram(out / "bifurcation_diagram.csv", [("homogeneous", branch)]))
    manifest.stopping_reasons["homogeneous"] = branch.stop_reason
    manifest.results["homogeneous"] = _branch_summary(branch)
    manifest.results["detections"] = [
        {"parameter": d.parameter_value, "dominant_mode": d.dominant_mode,
         "is_bifurcation": d.is_bifurcation, "singular_gap": d.singular_gap} for d in detections]


def run_switch(cfg: RunConfig, out: Path, manifest: Manifest) -> None:
    if cfg.continuation.parameter != "delta":
        raise ConfigError("switch scenario needs continuation.parameter = 'delta'")
    with _Timer(manifest.timings, "homogeneous"):
        system, hom, detections = _homogeneous_branch(cfg)
    manifest.add(write_branch(out / "branch_homogeneous.csv", hom))
    manifest.add(write_detections(out / "detections.csv", detections))
    manifest.stopping_reasons["homogeneous"] = hom.stop_reason
    det = _pick_detection(detections, cfg.switch.mode_index)
    step = cfg.continuation.to_step_config()
    rng = (cfg.switch.range_min, cfg.switch.range_max)

    def trace(direction: int) -> Branch:
        return switch_branch(det, direction, system, rng, step)

    with _Timer(manifest.timings, "switch"):
        branches = _parallel_map(trace, list(cfg.switch.directions))
    named = [("homogeneous", hom)]
    for d, b in zip(cfg.switch.directions, branches):
        name = "switch_plus" if d > 0 else "switch_minus"
        manifest.add(write_branch(out / f"branch_{name}.csv", b))
        manifest.add(write_profiles(out / f"profiles_{name}.csv", b))
        manifest.stopping_reasons[name] = b.stop_reason
        manifest.results[name] = _branch_summary(b)
        named.append((name, b))
    manifest.add(write_diagram(out / "bifurcation_diagram.csv", named))
    manifest.results["bifurcation_point"] = {"parameter": det.parameter_value,
                                             "dominant_mode": det.dominant_mode}


def run_homotopy(cfg: RunConfig, out: Path, manifest: Manifest) -> None:
    if cfg.continuation.parameter != "delta":
        raise ConfigError("homotopy scenario needs continuation.parameter = 'delta'")
    h = cfg.homotopy
    with _Timer(manifest.timings, "homogeneous"):
        system, hom, detections = _homogeneous_branch(cfg)
    manifest.add(write_detections(out / "detections.csv", detections))
    manifest.stopping_reasons["homogeneous"] = hom.stop_reason
    det = _pick_detection(detections, h.mode_index)
    step = cfg.continuation.to_step_config()
    if h.delta_fixed < det.parameter_value:
        rng = (h.delta_fixed, cfg.switch.range_max)
    else:
        rng = (cfg.switch.range_min, h.delta_fixed)
    if not rng[0] < rng[1]:
        raise ConfigError("homotopy.delta_fixed and the switch range leave an empty interval")
    with _Timer(manifest.timings, "switch"):
        branch = switch_branch(det, h.direction, system, rng, step)
    manifest.add(write_branch(out / "branch_switched.csv", branch))
    manifest.add(write_profiles(out / "profiles_switched.csv", branch))
    manifest.stopping_reasons["switched"] = branch.stop_reason
    manifest.results["switched"] = _branch_summary(branch)
    last = branch.points[-1]
    if branch.stop_reason != STOP_RANGE or last.parameter_value != h.delta_fixed:
        raise ScenarioFailure(f"switched branch did not reach delta = {h.delta_fixed}: stopped at "
                              f"delta = {last.parameter_value:.8g} ({branch.stop_reason}); "
                              f"folds at {[branch.points[i].parameter_value for i in branch.folds]}")
    with _Timer(manifest.timings, "homotopy"):
        try:
            hbranch = homotopy_rho_to_zero(last, system, step)
        except HomotopyError as exc:
            manifest.add(write_branch(out / "branch_homotopy.csv", exc.branch))
            manifest.stopping_reasons["homotopy"] = exc.branch.stop_reason
            raise
    manifest.add(write_branch(out / "branch_homotopy.csv", hbranch))
    manifest.stopping_reasons["homotopy"] = hbranch.stop_reason
    final = hbranch.points[-1]
    final.state.to_csv(out / "final_state.csv")
    manifest.add(out / "final_state.csv")
    params0 = system.params_at(h.delta_fixed).replace(rho=0.0)
    residual = float(np.max(np.abs(bvp_residual(final.state, params0))))
    manifest.results["rho0_solution"] = {
        "u1_min": float(np.min(final.state.u1)), "u1_max": float(np.max(final.state.u1)),
        "mass_u1": final.state.mass_u1, "mass_target": params0.u1_mean * params0.length,
        "max_residual": residual, "n_interfaces": final.n_interfaces}


def run_decay_map(cfg: RunConfig, out: Path, manifest: Manifest) -> None:
    d = cfg.decay_map
    base = cfg.model_params()
    deltas = np.linspace(d.delta_min, d.delta_max, d.n_delta)

    def one(alpha: float):
        params = base.replace(alpha=alpha)
        rows = []
        for delta in deltas:
            p = params.replace(delta=float(delta))
            if model.is_admissible(p):
                margin = model.decay_margin(p)
                chi = model.chi_rate(p)
            else:
                margin, chi = float("nan"), None
            rows.append((alpha, float(delta), margin, chi if chi is not None else float("nan"),
                         chi is not None))
        return rows, model.decay_region(params, deltas)

    with _Timer(manifest.timings, "decay_map"):
        results = _parallel_map(one, list(d.alphas))
    manifest.add(write_csv(out / "decay_map.csv",
                           ["alpha", "delta", "decay_margin", "chi", "decay_guaranteed"],
                           [r for rows, _ in results for r in rows]))
    manifest.add(write_csv(out / "decay_intervals.csv", ["alpha", "lower", "upper"],
                           [(a, lo, hi) for a, (_, crit) in zip(d.alphas, results)
                            for lo, hi in crit.decay_intervals]))
    manifest.add(write_csv(out / "critical_deltas.csv", ["alpha", "delta_star", "delta_d"],
                           [(a, crit.delta_star, crit.delta_d)
                            for a, (_, crit) in zip(d.alphas, results)]))
    manifest.results["decay_intervals"] = {str(a): [list(iv) for iv in crit.decay_intervals]
                                           for a, (_, crit) in zip(d.alphas, results)}


RUNNERS = {
    "predict": run_predict,
    "simulate": run_simulate,
    "continue": run_continue,
    "switch": run_switch,
    "homotopy": run_homotopy,
    "decay-map": run_decay_map,
}

SOLVER_ERRORS = (ScenarioFailure, ConvergenceError, HomotopyError, StepFailure)


def run_scenario(cfg: RunConfig, output_dir: Optional[Path] = None) -> ScenarioResult:
    """Run the configured scenario.

    The manifest is written even when a solver stage fails; the error is
    recorded there and re-raised.
    """
    out = Path(output_dir if output_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    thread_count()  # validate the environment before doing any work
    manifest = Manifest(cfg.scenario, to_dict(cfg))
    try:
        with _Timer(manifest.timings, "total"):
            RUNNERS[cfg.scenario](cfg, out, manifest)
    except SOLVER_ERRORS as exc:
        manifest.status = "solver failure"
        manifest.error = f"{type(exc).__name__}: {exc}"
        manifest.write(out)
        raise
    path = manifest.write(out)
    return ScenarioResult(out, path, manifest)
