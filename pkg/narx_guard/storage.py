"""Atomic file output and checksums shared by every exporter."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any

import pandas as pd

_LOGGER = logging.getLogger(__name__)


def atomic_write_text(path: str | os.PathLike[str], text: str) -> Path:
    """Write ``text`` to a temp file next to ``path`` and rename it into place."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp, target)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    _LOGGER.debug("Wrote %s", target)
    return target


def dumps_json(data: Any) -> str:
    """Serialize deterministically (sorted keys, fixed indentation)."""
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def write_json(path: str | os.PathLike[str], data: Any) -> Path:
    """Atomically write a JSON document."""
    return atomic_write_text(path, dumps_json(data))


def read_json(path: str | os.PathLike[str]) -> Any:
    """Read a JSON document."""
    with open(path, encoding="utf-8") as handle:
        return json.load(handle)


def write_frame(path: str | os.PathLike[str], frame: pd.DataFrame) -> Path:
    """Atomically write a DataFrame as CSV with full float precision."""
    return atomic_write_text(path, frame.to_csv(index=False, float_format="%.17g"))


def read_frame(path: str | os.PathLike[str]) -> pd.DataFrame:
    """Read a CSV written by :func:`write_frame`; floats round-trip bit-exactly."""
    return pd.read_csv(path, float_precision="round_trip")


def sha256_file(path: str | os.PathLike[str]) -> str:
    """Return the hex sha256 digest of a file."""
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def config_hash(data: Any) -> str:
    """Return the sha256 of a canonical JSON rendering of ``data``."""
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
