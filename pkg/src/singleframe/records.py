"""Fixed-precision JSON output, so reruns with one seed give byte-identical files."""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

DIGITS = 6


def fixed(obj, digits: int = DIGITS):
    """Round every float in a nested structure; numpy scalars become Python numbers."""
    if isinstance(obj, dict):
        return {str(k): fixed(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [fixed(v, digits) for v in obj]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return round(x, digits) if math.isfinite(x) else str(x)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dumps(obj, digits: int = DIGITS, indent: int | None = 2) -> str:
    return json.dumps(fixed(obj, digits), indent=indent, sort_keys=True)


def write_json(obj, path: str | Path, digits: int = DIGITS) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj, digits) + "\n")
    return path
