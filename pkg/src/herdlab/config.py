"""Run configuration: TOML/JSON loading with strict validation, and saving."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import tomli
import tomli_w

from . import model
from .continuation import ACTIVE_PARAMETERS, StepConfig
from .integrator import ENTROPY, PRIMAL, TimeStepperConfig
from .model import ModelParams, Nonlinearity

SCENARIOS = ("predict", "simulate", "continue", "switch", "homotopy", "decay-map")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key or invariant."""


@dataclass(frozen=True)
class ParamsSection:
    delta: float = -25.0
    kappa: float = 1.0
    alpha: float = 0.2
    length: float = 20.0
    rho: float = 0.05
    u1_mean: float = 0.594
    c_sobolev: float = 1.0
    c_lipschitz: float = 1.0
    nonlinearity: str = "logistic"
    power_a: float = 1.0
    power_b: float = 1.0

    def to_params(self) -> ModelParams:
        nl = Nonlinearity(self.nonlinearity, self.power_a, self.power_b)
        return ModelParams(self.delta, self.kappa, self.alpha, self.length, self.rho,
                           self.u1_mean, self.c_sobolev, self.c_lipschitz, nl)


@dataclass(frozen=True)
class GridSection:
    n_cells: int = 200


@dataclass(frozen=True)
class TimeSection:
    tau: float = 1e-2
    eps_reg: float = 1e-8
    mode: str = ENTROPY
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    t_final: float = 10.0
    snapshot_every: int = 0
    perturbation_amplitude: float = 0.1
    perturbation_mode: int = 1

    def to_stepper(self) -> TimeStepperConfig:
        return TimeStepperConfig(self.tau, self.eps_reg, self.mode, self.newton_tol,
                                 self.newton_max_iter, self.t_final)


@dataclass(frozen=True)
class ContinuationSection:
    parameter: str = "delta"
    start: float = -25.0
    stop: float = 0.0
    ds: float = 1e-2
    ds_min: float = 1e-8
    ds_max: float = 0.1
    max_points: int = 2000
    tol: float = 1e-9
    dg_floor: float = 1e-6
    dg_sign_guard: bool = True
    refine_tol: float = 1e-9
    max_resolved_fraction: float = 0.125

    def to_step_config(self) -> StepConfig:
        return StepConfig(ds=self.ds, ds_min=self.ds_min, ds_max=self.ds_max,
                          max_points=self.max_points, tol=self.tol, dg_floor=self.dg_floor,
                          dg_sign_guard=self.dg_sign_guard, refine_tol=self.refine_tol,
                          max_resolved_fraction=self.max_resolved_fraction)


@dataclass(frozen=True)
class SwitchSection:
    mode_index: int = 2
    directions: Tuple[int, ...] = (1, -1)
    range_min: float = -25.0
    range_max: float = 0.0


@dataclass(frozen=True)
class HomotopySection:
    mode_index: int = 2
    delta_fixed: float = -9.0
    direction: int = 1


@dataclass(frozen=True)
class PredictSection:
    n_max: int = 9


@dataclass(frozen=True)
class DecayMapSection:
    delta_min: float = -3.9
    delta_max: float = 2.0
    n_delta: int = 60
    alphas: Tuple[float, ...] = (0.2, 1.0, 10.0)


@dataclass(frozen=True)
class RunConfig:
    scenario: str = "predict"
    output_dir: str = "herdlab-output"
    seed: int = 0
    params: ParamsSection = field(default_factory=ParamsSection)
    grid: GridSection = field(default_factory=GridSection)
    time: TimeSection = field(default_factory=TimeSection)
    continuation: ContinuationSection = field(default_factory=ContinuationSection)
    switch: SwitchSection = field(default_factory=SwitchSection)
    homotopy: HomotopySection = field(default_factory=HomotopySection)
    predict: PredictSection = field(default_factory=PredictSection)
    decay_map: DecayMapSection = field(default_factory=DecayMapSection)

    def model_params(self) -> ModelParams:
        return self.params.to_params()


_SECTIONS = {f.name: f.type for f in dataclasses.fields(RunConfig)}
_SECTION_TYPES = {
    "params": ParamsSection, "grid": GridSection, "time": TimeSection,
    "continuation": ContinuationSection, "switch": SwitchSection, "homotopy": HomotopySection,
    "predict": PredictSection, "decay_map": DecayMapSection,
}


def _coerce(value: Any, default: Any, where: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        proto = default[0] if default else 0.0
        return tuple(_coerce(v, proto, f"{where}[{i}]") for i, v in enumerate(value))
    raise ConfigError(f"{where}: unsupported value {value!r}")


def _build_section(cls, data: Dict[str, Any], name: str):
    if not isinstance(data, dict):
        raise ConfigError(f"[{name}] must be a table")
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    values = {k: _coerce(v, getattr(defaults, k), f"{name}.{k}") for k, v in data.items()}
    return cls(**values)


def from_dict(data: Dict[str, Any]) -> RunConfig:
    """Build and validate a :class:`RunConfig`; unknown keys are errors."""
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    defaults = RunConfig()
    values: Dict[str, Any] = {}
    for key, value in data.items():
        if key in _SECTION_TYPES:
            values[key] = _build_section(_SECTION_TYPES[key], value, key)
        else:
            values[key] = _coerce(value, getattr(defaults, key), key)
    cfg = RunConfig(**values)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.scenario not in SCENARIOS:
        raise ConfigError(f"scenario must be one of {SCENARIOS}, got {cfg.scenario!r}")
    try:
        params = cfg.model_params()
    except ValueError as exc:
        raise ConfigError(f"params: {exc}") from exc
    try:
        from .grid import Grid

        Grid(cfg.grid.n_cells, params.length)
    except ValueError as exc:
        raise ConfigError(f"grid: {exc}") from exc
    if cfg.scenario == "simulate":
        if cfg.time.mode not in (ENTROPY, PRIMAL):
            raise ConfigError(f"time.mode must be {ENTROPY!r} or {PRIMAL!r}")
        if cfg.time.mode == ENTROPY:
            if params.delta == 0:
                raise ConfigError("params.delta: entropy-variable mode requires delta != 0 "
                                  "(δ≠0)")
            if not model.is_admissible(params):
                raise ConfigError(f"params.delta: entropy-variable mode requires "
                                  f"delta > -kappa/gamma = {model.delta_star(params)}")
            if not params.nonlinearity.is_logistic:
                raise ConfigError("params.nonlinearity: entropy-variable mode supports the "
                                  "logistic mobility only")
        try:
            cfg.time.to_stepper()
        except ValueError as exc:
            raise ConfigError(f"time: {exc}") from exc
        if cfg.time.snapshot_every < 0:
            raise ConfigError("time.snapshot_every must be >= 0")
        if cfg.time.perturbation_mode < 1:
            raise ConfigError("time.perturbation_mode must be >= 1")
    if cfg.scenario in ("continue", "switch", "homotopy"):
        c = cfg.continuation
        if c.parameter not in ACTIVE_PARAMETERS:
            raise ConfigError(f"continuation.parameter must be one of {ACTIVE_PARAMETERS}")
        if cfg.scenario != "continue" and c.parameter != "delta":
            raise ConfigError("switch and homotopy scenarios continue in delta")
        if c.start == c.stop:
            raise ConfigError("continuation.start and continuation.stop must differ")
        try:
            c.to_step_config()
        except ValueError as exc:
            raise ConfigError(f"continuation: {exc}") from exc
    if cfg.scenario == "switch":
        if not cfg.switch.directions or any(d not in (1, -1) for d in cfg.switch.directions):
            raise ConfigError("switch.directions must be a non-empty list of +1/-1")
        if cfg.switch.range_min >= cfg.switch.range_max:
            raise ConfigError("switch.range_min must be < switch.range_max")
    if cfg.scenario == "homotopy":
        if cfg.homotopy.direction not in (1, -1):
            raise ConfigError("homotopy.direction must be +1 or -1")
        if not params.rho > 0:
            raise ConfigError("params.rho must be > 0 for the homotopy scenario")
    if cfg.scenario == "predict" and cfg.predict.n_max < 1:
        raise ConfigError("predict.n_max must be >= 1")
    if cfg.scenario == "decay-map":
        d = cfg.decay_map
        if d.n_delta < 2 or d.delta_min >= d.delta_max:
            raise ConfigError("decay_map needs n_delta >= 2 and delta_min < delta_max")
        if not d.alphas or any(a <= 0 for a in d.alphas):
            raise ConfigError("decay_map.alphas must be a non-empty list of positive numbers")


def to_dict(cfg: RunConfig) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            out[f.name] = {k: list(v) if isinstance(v, tuple) else v
                           for k, v in dataclasses.asdict(value).items()}
        else:
            out[f.name] = value
    return out


def _parse_error_location(text: str, exc: Exception) -> str:
    return str(exc)


def load_config(path: Union[str, Path]) -> RunConfig:
    """Read a TOML (or ``.json``) run configuration."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    if path.suffix.lower() == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: JSON parse error at line {exc.lineno}, "
                              f"column {exc.colno}: {exc.msg}") from exc
    else:
        try:
            data = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            # tomli reports "(at line L, column C)"
            raise ConfigError(f"{path}: TOML parse error {exc}") from exc
    return from_dict(data)


def save_config(cfg: RunConfig, path: Union[str, Path]) -> None:
    path = Path(path)
    data = to_dict(cfg)
    if path.suffix.lower() == ".json":
        path.write_text(json.dumps(data, indent=2) + "\n")
    else:
        path.write_text(tomli_w.dumps(data))


def parse_override(text: str) -> Tuple[List[str], Any]:
    """``"section.key=value"`` to a key path and a TOML-parsed value (bare words stay strings)."""
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    try:
        value = tomli.loads(f"v = {raw.strip()}")["v"]
    except tomli.TOMLDecodeError:
        value = raw.strip()
    return key.split("."), value


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    data = json.loads(json.dumps(data))
    for text in overrides:
        keys, value = parse_override(text)
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {text!r}: {k} is not a table")
        node[keys[-1]] = value
    return data


def read_raw(path: Optional[Union[str, Path]]) -> Dict[str, Any]:
    """Parsed but unvalidated config data (empty if ``path`` is None)."""
    if path is None:
        return {}
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            return json.loads(text)
        return tomli.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: JSON parse error at line {exc.lineno}, column {exc.colno}: "
                          f"{exc.msg}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: TOML parse error {exc}") from exc
