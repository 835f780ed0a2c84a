"""Deterministic report serialization: fixed-format JSON, RFC-4180 CSV.

Every float is printed with ``%.17g`` (17 significant digits round-trip a
binary64 exactly), keys are emitted in sorted order, and CSV rows end in
CRLF with minimal quoting -- identical inputs give byte-identical files on
any platform, which is what makes report diffs meaningful.
"""

from __future__ import annotations

import csv
import json
import sys
import time
from typing import Any, Iterable, Sequence

import numpy as np

__all__ = ["fmt_float", "to_json_text", "write_json", "write_csv",
           "write_manifest"]


def fmt_float(x: float) -> str:
    out = "%.17g" % float(x)
    return "0" if out in ("-0", "0") else out


def _json_chunks(obj: Any, indent: int) -> str:
    pad = "  " * indent
    if obj is None or isinstance(obj, bool):
        return json.dumps(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if v != v or v in (float("inf"), float("-inf")):
            raise ValueError(f"non-finite value {v!r} in report")
        return fmt_float(v)
    if isinstance(obj, (np.integer, int)):
        return str(int(obj))
    if isinstance(obj, (np.complexfloating, complex)):
        c = complex(obj)
        return (f'{{"im": {fmt_float(c.imag)}, "re": {fmt_float(c.real)}}}')
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return _json_chunks(obj.tolist(), indent)
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        inner = ",\n".join(pad + "  " + _json_chunks(v, indent + 1)
                           for v in obj)
        return "[\n" + inner + "\n" + pad + "]"
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = sorted(obj.items(), key=lambda kv: str(kv[0]))
        inner = ",\n".join(
            pad + "  " + json.dumps(str(k)) + ": " + _json_chunks(v, indent + 1)
            for k, v in items)
        return "{\n" + inner + "\n" + pad + "}"
    raise TypeError(f"cannot serialize {type(obj).__name__} deterministically")


def to_json_text(obj: Any) -> str:
    return _json_chunks(obj, 0) + "\n"


def write_json(path, obj: Any) -> None:
    with open(path, "w", newline="") as f:
        f.write(to_json_text(obj))


def _cell(v: Any) -> str:
    if isinstance(v, (np.floating, float)):
        return fmt_float(float(v))
    if isinstance(v, (np.integer, int)) and not isinstance(v, bool):
        return str(int(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
        w.writerow(list(header))
        for row in rows:
            w.writerow([_cell(v) for v in row])


def write_manifest(path, config: dict, started: float) -> None:
    """Config echo, tool versions and wall time, beside the data outputs.

    The wall time makes the manifest the one file exempt from byte-identical
    reruns; every data artifact stays exactly reproducible.
    """
    import scipy

    from . import __version__

    write_json(path, {
        "config": config,
        "versions": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "froblax": __version__,
        },
        "wall_time_s": time.perf_counter() - started,
    })
