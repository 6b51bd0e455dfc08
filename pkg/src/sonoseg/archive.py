"""Tensor archive file format, checkpoint directories, and flat config files.

Archive layout: magic b"TNS4", 1-byte dtype tag (0 = f32, 1 = f64), four
little-endian u32 dims, then raw little-endian values.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor4

MAGIC = b"TNS4"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_tensor(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim != 4:
        raise ValueError(f"archive stores rank-4 tensors, got shape {arr.shape}")
    tag = _TAGS[np.dtype(arr.dtype)]
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<B4I", tag, *arr.shape))
        f.write(arr.astype(_DTYPES[tag], copy=False).tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        tag, n, c, h, w = struct.unpack("<B4I", f.read(17))
        if tag not in _DTYPES:
            raise ValueError(f"{path}: unknown dtype tag {tag}")
        dt = _DTYPES[tag]
        buf = f.read(n * c * h * w * dt.itemsize)
    arr = np.frombuffer(buf, dtype=dt).reshape(n, c, h, w)
    return arr.astype(arr.dtype.newbyteorder("="))


def save_checkpoint(dirpath, params: dict[str, Tensor4]) -> None:
    """Directory of tensor archives plus a manifest (key = tensor name,
    value = file + dims)."""
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in sorted(params):
        fname = name.replace("/", ".") + ".tns4"
        save_tensor(d / fname, params[name].data)
        dims = " ".join(str(v) for v in params[name].dims)
        lines.append(f"{name} = {fname} {dims}\n")
    (d / "manifest.txt").write_text("".join(lines))


def load_checkpoint(dirpath, params: dict[str, Tensor4]) -> None:
    """Load archived values into an existing parameter dict (shapes must match)."""
    d = Path(dirpath)
    manifest = d / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.txt in {d}")
    entries = {}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        name, rest = line.split(" = ", 1)
        entries[name] = rest.split()[0]
    missing = set(params) - set(entries)
    if missing:
        raise ValueError(f"checkpoint {d} missing tensors: {sorted(missing)}")
    for name, t in params.items():
        arr = load_tensor(d / entries[name])
        if arr.shape != t.dims:
            raise ValueError(
                f"checkpoint tensor {name} has dims {arr.shape}, expected {t.dims}")
        t.data = arr.astype(t.dtype, copy=False)


def parse_config_text(text: str, schema: dict[str, type]) -> dict:
    """Flat key=value config; '#' starts a comment; unknown keys rejected."""
    out = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {ln}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in schema:
            raise ValueError(f"config line {ln}: unknown key {key!r}")
        typ = schema[key]
        if typ is bool:
            if val.lower() not in ("true", "false"):
                raise ValueError(f"config line {ln}: {key} must be true/false")
            out[key] = val.lower() == "true"
        else:
            out[key] = typ(val)
    return out
