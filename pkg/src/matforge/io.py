"""File formats: 8-bit sRGB PNGs, raw ``.f32`` maps and JSON documents."""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

F32_MAGIC = b"MF32"


def save_png(path: str | Path, image: np.ndarray) -> None:
    """Store an ``H x W x 3`` (or ``H x W``) image with values in [0, 1]."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    arr = np.round(arr * 255.0).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    # fixed PNG options keep the bytes reproducible
    Image.fromarray(arr).save(path, format="PNG", optimize=False, compress_level=6)


def load_png(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return arr


def save_f32(path: str | Path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise ValueError(f".f32 files hold H x W x C arrays, got shape {arr.shape}")
    h, w, c = arr.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(F32_MAGIC + struct.pack("<III", h, w, c))
        fh.write(np.ascontiguousarray(arr).tobytes())


def load_f32(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != F32_MAGIC:
        raise ValueError(f"{path}: not an MF32 file")
    h, w, c = struct.unpack_from("<III", data, 4)
    arr = np.frombuffer(data, dtype="<f4", offset=16, count=h * w * c)
    return arr.reshape(h, w, c).astype(np.float32)


def dump_json(path: str | Path, doc) -> str:
    """Write canonical JSON (sorted keys, fixed indent) and return its sha256."""
    text = json.dumps(doc, sort_keys=True, indent=1) + "\n"
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load_json(path: str | Path):
    return json.loads(Path(path).read_text())


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
