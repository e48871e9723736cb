"""Shared file-writing helpers: atomic replace plus nodata JSON encoding."""

from __future__ import annotations

import json
import math
import os
import tempfile
from pathlib import Path


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write bytes via a temp file in the same directory, then rename."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=target.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path: str | os.PathLike, obj) -> None:
    # allow_nan=False keeps the files strict JSON; NaN must be encoded upstream.
    atomic_write_text(path, json.dumps(obj, indent=2, allow_nan=False) + "\n")


def encode_nodata(value: float | None):
    """Encode a nodata sentinel for strict JSON (NaN has no literal)."""
    if value is None:
        return None
    if math.isnan(value):
        return "nan"
    return float(value)


def decode_nodata(value) -> float | None:
    if value is None:
        return None
    if value == "nan":
        return math.nan
    return float(value)
