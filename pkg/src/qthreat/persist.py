"""Artifact persistence: JSON headers, raw float64 array files, content hashes.

All array files are little-endian float64, row-major, no header; shapes live
in the accompanying JSON. JSON floats are written with Python's repr, which
round-trips float64 bit-exactly.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np


def canonical_json(obj) -> str:
    """Deterministic JSON encoding (sorted keys, no whitespace drift)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def stage_key(stage: str, config_slice, input_hashes) -> str:
    """Content key for resume-by-hash: stage name + config slice + inputs."""
    payload = canonical_json(
        {"stage": stage, "config": config_slice, "inputs": input_hashes}
    )
    return sha256_bytes(payload.encode("utf-8"))


def save_array_f64(path, arr: np.ndarray) -> str:
    """Write a float64 array as raw little-endian bytes; returns its sha256."""
    data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(data)
    return sha256_bytes(data)


def load_array_f64(path, shape) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    arr = np.frombuffer(data, dtype="<f8").astype(np.float64)
    expected = int(np.prod(shape)) if shape else arr.size
    if arr.size != expected:
        raise ValueError(
            f"{path}: expected {expected} float64 values, found {arr.size}"
        )
    return arr.reshape(shape)


def save_json(path, obj) -> str:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(obj, indent=2, sort_keys=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
        f.write("\n")
    return sha256_bytes((text + "\n").encode("utf-8"))


def load_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def relative_file_map(root, names):
    """sha256 of each named file under root, keyed by name."""
    root = Path(root)
    return {name: sha256_file(root / name) for name in names if os.path.exists(root / name)}
