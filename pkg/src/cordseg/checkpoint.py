"""Byte-stable checkpoint container.

Layout: a magic line, one line of canonical JSON (sorted keys) describing
metadata and the array directory, then the raw little-endian float64 array
payloads in directory order. No timestamps or environment data are written,
so identical state always produces identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DataFormatError

_MAGIC = "CORDSEG-CKPT 1"


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    directory = []
    payloads = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        directory.append({"name": name, "shape": list(arr.shape)})
        payloads.append(arr.tobytes())
    header = json.dumps({"meta": meta, "arrays": directory},
                        sort_keys=True, separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(_MAGIC.encode("ascii") + b"\n")
        fh.write(header.encode("ascii") + b"\n")
        for chunk in payloads:
            fh.write(chunk)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.readline().decode("ascii", errors="replace").rstrip("\n")
        if magic != _MAGIC:
            raise DataFormatError(f"{path}: unknown checkpoint magic {magic!r}")
        try:
            header = json.loads(fh.readline().decode("ascii"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataFormatError(f"{path}: malformed checkpoint header: {exc}") from exc
        arrays: dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise DataFormatError(
                    f"{path}: truncated payload for array {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise DataFormatError(f"{path}: trailing bytes after declared arrays")
    return arrays, header["meta"]
