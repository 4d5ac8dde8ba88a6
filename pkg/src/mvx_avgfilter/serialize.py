"""Deterministic CSV and JSON writers.

Every file is written atomically (temp file in the target directory, then
rename), floats are printed with 17 significant digits so they parse back
bit for bit, and row order is fixed by the data structures themselves.
Identical inputs therefore produce byte-identical files.
"""

from __future__ import annotations

import dataclasses
import json
import os
import tempfile
from typing import Iterable, List, Sequence

from . import SCHEMA_VERSION


def format_float(x: float) -> str:
    """Shortest-of-17-significant-digits decimal; always round-trips."""
    return format(float(x), ".17g")


def format_value(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return format_float(v)
    return str(v)


def atomic_write_bytes(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_csv(path: str, command: str, columns: Sequence[str], rows: Iterable[Sequence]) -> None:
    lines = [f"# {SCHEMA_VERSION} {command}", ",".join(columns)]
    for row in rows:
        lines.append(",".join(format_value(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_json(path: str, payload: dict) -> None:
    atomic_write_text(path, json.dumps(payload, sort_keys=True, indent=2) + "\n")


# ----- payload builders -----


def ensemble_columns(n: int, m: int, with_fast: bool) -> List[str]:
    cols = ["t", "particle"] + [f"x{j}" for j in range(n)]
    if with_fast:
        cols += [f"z{j}" for j in range(m)]
    return cols


def ensemble_rows(ensemble) -> List[list]:
    """Long-form rows (t, particle, slow comps[, fast comps])."""
    with_fast = ensemble.fast_clouds is not None
    rows = []
    for k, t in enumerate(ensemble.times):
        xs = ensemble.slow_clouds[k].points
        zs = ensemble.fast_clouds[k].points if with_fast else None
        for i in range(xs.shape[0]):
            row = [float(t), i] + [float(v) for v in xs[i]]
            if with_fast:
                row += [float(v) for v in zs[i]]
            rows.append(row)
    return rows


def ensemble_json(ensemble) -> dict:
    return {
        "times": [float(t) for t in ensemble.times],
        "slow": [c.points.tolist() for c in ensemble.slow_clouds],
        "fast": (
            None
            if ensemble.fast_clouds is None
            else [c.points.tolist() for c in ensemble.fast_clouds]
        ),
    }


def frozen_rows(ensemble) -> List[list]:
    """Fast-state rows only; the slow input is pinned and lives in the config."""
    rows = []
    for k, t in enumerate(ensemble.times):
        zs = ensemble.fast_clouds[k].points
        for i in range(zs.shape[0]):
            rows.append([float(t), i] + [float(v) for v in zs[i]])
    return rows


def filter_rows(traj) -> List[list]:
    events = set(traj.resample_events)
    return [
        [float(traj.times[k]), float(traj.pi_F[k]), float(traj.log_rho1[k]),
         float(traj.ess[k]), int(k in events)]
        for k in range(len(traj.times))
    ]


def filter_json(traj) -> dict:
    return {
        "times": [float(t) for t in traj.times],
        "pi_F": [float(v) for v in traj.pi_F],
        "log_rho1": [float(v) for v in traj.log_rho1],
        "ess": [float(v) for v in traj.ess],
        "resample_events": [int(k) for k in traj.resample_events],
    }


SWEEP_COLUMNS = ("eps", "delta_eps", "p", "mean_error", "std_error", "reps")


def sweep_rows(report) -> List[list]:
    return [
        [r.eps, r.delta_eps, r.p, r.mean_error, r.std_error, r.reps]
        for r in report.rows
    ]


def sweep_json(report) -> dict:
    # runtime_s deliberately omitted: the payload is reproducible, wall clock is not
    return {
        "kind": report.kind,
        "rows": [dataclasses.asdict(r) for r in report.rows],
        "envelope": report.envelope,
        "fits": {str(p): list(fit) for p, fit in sorted(report.fits.items())},
        "config_digest": report.config_digest,
    }
