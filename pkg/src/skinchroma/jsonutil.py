"""JSON emission with fixed 17-significant-digit floats.

Python's ``json`` module prints floats with ``repr`` (shortest round-trip
form), which varies in digit count.  Interchange files in this project pin
17 significant digits so any IEEE-754 double round-trips bit-exactly and
files diff cleanly across writers.
"""

from __future__ import annotations

import json
import math


def _render(obj) -> str:
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise ValueError(f"non-finite float {obj!r} is not representable in JSON")
        return format(obj, ".17g")
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, int):
        return str(obj)
    if obj is None:
        return "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_render(v) for v in obj) + "]"
    if isinstance(obj, dict):
        items = []
        for k, v in obj.items():
            if not isinstance(k, str):
                raise TypeError(f"JSON object keys must be strings, got {type(k)}")
            items.append(json.dumps(k) + ":" + _render(v))
        return "{" + ",".join(items) + "}"
    raise TypeError(f"cannot serialize {type(obj)} to JSON")


def dumps(obj) -> str:
    return _render(obj)


def loads(text: str):
    return json.loads(text)
