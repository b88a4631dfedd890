"""Directory container: ``meta.json`` plus flat little-endian float32 ``<name>.bin`` files."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

DTYPE = "<f4"


class ContainerError(ValueError):
    """Missing, truncated or inconsistent container files."""


def write(directory, arrays: dict[str, np.ndarray], meta: dict) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    index = {}
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype=DTYPE)
        (d / f"{name}.bin").write_bytes(a.tobytes(order="C"))
        index[name] = {"file": f"{name}.bin", "shape": list(a.shape)}
    full = dict(meta)
    full.update({"dtype": "float32", "byte_order": "little-endian", "arrays": index})
    (d / "meta.json").write_text(json.dumps(full, indent=2, sort_keys=True) + "\n")


def read(directory) -> tuple[dict[str, np.ndarray], dict]:
    d = Path(directory)
    meta_path = d / "meta.json"
    if not meta_path.is_file():
        raise ContainerError(f"no meta.json in {d}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise ContainerError(f"unreadable meta.json: {exc}") from None
    if meta.get("dtype") != "float32" or meta.get("byte_order") != "little-endian":
        raise ContainerError("only little-endian float32 containers are supported")
    arrays = {}
    for name, entry in meta.get("arrays", {}).items():
        path = d / entry["file"]
        if not path.is_file():
            raise ContainerError(f"missing array file {path}")
        shape = tuple(entry["shape"])
        raw = path.read_bytes()
        expected = int(np.prod(shape)) * 4
        if len(raw) != expected:
            raise ContainerError(f"{path} has {len(raw)} bytes, expected {expected}")
        arrays[name] = np.frombuffer(raw, dtype=DTYPE).reshape(shape).copy()
    return arrays, meta
