"""The ".tns" tensor file format and checkpoint directories.

Layout of a .tns file:
  8-byte magic  b"TNS1\\x00\\x00\\x00\\x00"
  4-byte little-endian uint32: JSON header length
  UTF-8 JSON header {"dtype": "f32"|"f64", "shape": [...]}
  raw little-endian row-major payload

A checkpoint is a directory of named .tns files plus a manifest.json
listing parameter names, shapes, and a CRC32 per file.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"TNS1\x00\x00\x00\x00"

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NAMES = {np.dtype("<f4"): "f32", np.dtype("<f8"): "f64"}


def save_tns(path, array: np.ndarray, dtype: str = "f64") -> None:
    if dtype not in _DTYPES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
    arr = np.ascontiguousarray(array, dtype=_DTYPES[dtype])
    header = json.dumps({"dtype": dtype, "shape": list(arr.shape)}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(arr.tobytes())


def load_tns(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        dtype = _DTYPES[header["dtype"]]
        shape = tuple(header["shape"])
        count = int(np.prod(shape)) if shape else 1
        payload = f.read(count * dtype.itemsize)
        if len(payload) != count * dtype.itemsize:
            raise ValueError(f"{path}: truncated payload")
        return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(np.float64)


def _safe_name(name: str) -> str:
    return name.replace("/", "_") + ".tns"


def save_weight_dir(dirpath, state: dict[str, np.ndarray], extra: dict | None = None) -> None:
    """Write named arrays as .tns files plus manifest.json with per-file CRCs."""
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {"params": {}, "extra": extra or {}}
    for name in sorted(state):
        fname = _safe_name(name)
        fpath = d / fname
        save_tns(fpath, state[name])
        manifest["params"][name] = {
            "file": fname,
            "shape": list(np.asarray(state[name]).shape),
            "crc32": zlib.crc32(fpath.read_bytes()),
        }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_weight_dir(dirpath) -> tuple[dict[str, np.ndarray], dict]:
    d = Path(dirpath)
    manifest = json.loads((d / "manifest.json").read_text())
    state = {}
    for name, meta in manifest["params"].items():
        fpath = d / meta["file"]
        raw = fpath.read_bytes()
        if zlib.crc32(raw) != meta["crc32"]:
            raise ValueError(f"CRC mismatch for {name} in {dirpath}")
        state[name] = load_tns(fpath)
        if list(state[name].shape) != meta["shape"]:
            raise ValueError(f"shape mismatch for {name} in {dirpath}")
    return state, manifest.get("extra", {})
