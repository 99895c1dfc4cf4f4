"""Artifact writing (CSV, JSON, manifest) and comparison against reference tables."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import scipy

from .grid import format_float

PathLike = Union[str, Path]


class SchemaMismatch(ValueError):
    """Produced and reference tables differ in header or shape."""


def _cell(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format_float(value)
    if value is None:
        return ""
    return str(value)


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    """Write a table; floats use 17 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    return path


def read_csv(path: PathLike) -> tuple:
    """``(header, rows)`` with every cell as a string."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration as exc:
            raise SchemaMismatch(f"{path}: empty file") from exc
        rows = [r for r in reader if r]
    return header, rows


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if math.isfinite(v) else str(v)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    return value


def write_json(path: PathLike, data: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")
    return path


def sha256_file(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def versions() -> Dict[str, str]:
    from . import __version__

    return {"herdlab": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


@dataclass
class Manifest:
    """Run record; artifacts are hashed when the manifest is written."""

    scenario: str
    config: Dict[str, Any]
    results: Dict[str, Any] = field(default_factory=dict)
    stopping_reasons: Dict[str, str] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)
    artifacts: List[Path] = field(default_factory=list)
    status: str = "ok"
    error: Optional[str] = None

    def add(self, path: PathLike) -> Path:
        path = Path(path)
        self.artifacts.append(path)
        return path

    def write(self, output_dir: PathLike) -> Path:
        output_dir = Path(output_dir)
        entries = []
        for p in sorted(set(self.artifacts)):
            entries.append({"path": p.relative_to(output_dir).as_posix(),
                            "sha256": sha256_file(p), "bytes": p.stat().st_size})
        data = {
            "scenario": self.scenario,
            "status": self.status,
            "error": self.error,
            "config": self.config,
            "results": self.results,
            "stopping_reasons": self.stopping_reasons,
            "timings_seconds": self.timings,
            "versions": versions(),
            "artifacts": entries,
        }
        return write_json(output_dir / "manifest.json", data)


@dataclass(frozen=True)
class CellMismatch:
    row: int
    column: str
    produced: str
    reference: str
    abs_error: float

    def describe(self) -> str:
        return (f"row {self.row}, column {self.column!r}: produced {self.produced}, "
                f"reference {self.reference}, |diff| = {self.abs_error:.3e}")


@dataclass(frozen=True)
class ComparisonReport:
    n_cells_checked: int
    mismatches: tuple

    @property
    def passed(self) -> bool:
        return not self.mismatches

    def describe(self) -> str:
        if self.passed:
            return f"all {self.n_cells_checked} cells within tolerance"
        lines = [f"{len(self.mismatches)} of {self.n_cells_checked} cells out of tolerance:"]
        lines += ["  " + m.describe() for m in self.mismatches]
        return "\n".join(lines)


def _as_float(text: str) -> Optional[float]:
    try:
        return float(text)
    except ValueError:
        return None


def compare_tables(produced: PathLike, reference: PathLike, atol: float = 0.0,
                   rtol: float = 0.0) -> ComparisonReport:
    """Cell-by-cell comparison: numeric cells need ``|p - r| <= atol + rtol |r|``,
    other cells must match exactly.  Headers and shapes must agree."""
    if atol < 0 or rtol < 0:
        raise ValueError("atol and rtol must be >= 0")
    ph, prows = read_csv(produced)
    rh, rrows = read_csv(reference)
    if ph != rh:
        raise SchemaMismatch(f"header mismatch: produced {ph}, reference {rh}")
    if len(prows) != len(rrows):
        raise SchemaMismatch(f"row count mismatch: produced {len(prows)}, reference {len(rrows)}")
    mismatches: List[CellMismatch] = []
    checked = 0
    for i, (pr, rr) in enumerate(zip(prows, rrows), start=1):
        if len(pr) != len(ph) or len(rr) != len(rh):
            raise SchemaMismatch(f"row {i} has the wrong number of cells")
        for col, p, r in zip(ph, pr, rr):
            checked += 1
            pv, rv = _as_float(p), _as_float(r)
            if pv is None or rv is None:
                if p != r:
                    mismatches.append(CellMismatch(i, col, p, r, float("nan")))
                continue
            if math.isnan(pv) and math.isnan(rv):
                continue
            err = abs(pv - rv)
            if not (err <= atol + rtol * abs(rv)) and not (pv == rv):
                mismatches.append(CellMismatch(i, col, p, r, err))
    return ComparisonReport(checked, tuple(mismatches))
