"""CSV / JSON writers shared by the scenarios.

Every float is written with 17 significant digits so that a reread gives
back the identical double.
"""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path
import tempfile

import numpy as np

__all__ = ["fmt", "write_profile_csv", "read_profile_csv", "write_modes_csv", "write_json", "atomic_write_text"]


def fmt(x) -> str:
    return "" if x is None else f"{float(x):.17g}"


def atomic_write_text(path, text: str) -> Path:
    """Write via a temporary file in the same directory and rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None if np.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def write_json(path, data) -> Path:
    return atomic_write_text(path, json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")


def write_profile_csv(path, profile) -> Path:
    """Two columns r, q(r)."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["r", "q"])
        for r, v in zip(profile.grid.r, profile.values):
            wr.writerow([fmt(r), fmt(v)])
    return path


def read_profile_csv(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1]


def write_modes_csv(path, modes, names=None) -> Path:
    """Columns r, then one column per mode."""
    path = Path(path)
    names = names or [f"Y_{k + 1}" for k in range(len(modes))]
    grid = modes[0].grid if modes else None
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["r"] + list(names))
        if grid is None:
            return path
        cols = [m.values for m in modes]
        for j, r in enumerate(grid.r):
            wr.writerow([fmt(r)] + [fmt(c[j]) for c in cols])
    return path
