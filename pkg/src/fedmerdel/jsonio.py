"""JSON writing with 17-significant-digit floats.

The stdlib encoder writes the shortest repr of each float, which already
round-trips, but the wire format promises at least 17 significant digits so
other readers never need shortest-repr parsing. Output is deterministic:
keys are sorted and numpy scalars/arrays are converted.
"""
from __future__ import annotations

import hashlib
import json
import math

import numpy as np


def _format_float(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"non-finite float {x!r} cannot be written as JSON")
    text = format(x, ".17g")
    if "e" not in text and "." not in text and "n" not in text:
        text += ".0"
    return text


def _encode(obj, out: list[str]) -> None:
    if obj is None or isinstance(obj, (bool, np.bool_)):
        out.append(json.dumps(None if obj is None else bool(obj)))
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(_format_float(float(obj)))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, np.ndarray):
        _encode(obj.tolist(), out)
    elif isinstance(obj, dict):
        out.append("{")
        for i, key in enumerate(sorted(obj, key=str)):
            if i:
                out.append(",")
            out.append(json.dumps(str(key)))
            out.append(":")
            _encode(obj[key], out)
        out.append("}")
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for i, item in enumerate(obj):
            if i:
                out.append(",")
            _encode(item, out)
        out.append("]")
    else:
        raise TypeError(f"cannot encode {type(obj).__name__} as JSON")


def dumps(obj) -> str:
    """Compact, key-sorted JSON text."""
    out: list[str] = []
    _encode(obj, out)
    return "".join(out)


def loads(text):
    return json.loads(text)


def sha256_hex(obj) -> str:
    return hashlib.sha256(dumps(obj).encode("utf-8")).hexdigest()
