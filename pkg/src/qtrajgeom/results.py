"""Deterministic CSV and JSON output for experiment runs.

Every CSV starts with a ``# config_hash=...`` comment line followed by the
header row.  Floats are written with 17 significant digits and lines end in
LF, so identical configurations produce byte-identical tables.
"""

from __future__ import annotations

import json
import math
import subprocess
from pathlib import Path

import numpy as np


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return format(v, ".17g")
    return str(v)


def write_csv(path: Path, columns, rows, cfg_hash: str) -> None:
    """Write rows (sequences aligned with ``columns``) with LF endings."""
    lines = [f"# config_hash={cfg_hash}", ",".join(columns)]
    for row in rows:
        if len(row) != len(columns):
            raise ValueError(f"row has {len(row)} fields, expected {len(columns)}")
        lines.append(",".join(format_value(v) for v in row))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


def write_json(path: Path, payload: dict, cfg_hash: str) -> None:
    body = {"config_hash": cfg_hash}
    body.update(_jsonable(payload))
    with open(path, "w", newline="\n") as fh:
        fh.write(json.dumps(body, indent=2, sort_keys=True) + "\n")


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from . import __version__
    return __version__
