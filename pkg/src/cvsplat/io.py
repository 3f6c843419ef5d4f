"""On-disk formats: PNG images, UCMAP001 float maps, xyzrgb point clouds, key=value configs."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

UCMAP_MAGIC = b"UCMAP001"


def write_png(path, image):
    """Write an H x W x 3 (or H x W) float image in [0, 1] as 8-bit PNG."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    arr = np.round(arr * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def read_png(path, dtype=np.float32):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.astype(dtype)


def quantize8(image):
    """Round-trip through 8 bits, as a PNG save/load would."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def write_ucmap(path, values, valid=None):
    """UCMAP001: magic, u32 width, u32 height, f32 LE row-major; NaN marks invalid."""
    v = np.array(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"map must be 2-D, got shape {v.shape}")
    if valid is not None:
        v[~np.asarray(valid, dtype=bool)] = np.nan
    h, w = v.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(UCMAP_MAGIC + struct.pack("<II", w, h) + v.astype("<f4").tobytes())


def read_ucmap(path):
    """Returns (values float64 with NaN for invalid pixels, valid mask)."""
    data = Path(path).read_bytes()
    if data[:8] != UCMAP_MAGIC:
        raise ValueError(f"{path}: not a UCMAP001 file")
    w, h = struct.unpack("<II", data[8:16])
    body = np.frombuffer(data, dtype="<f4", offset=16)
    if body.size != w * h:
        raise ValueError(f"{path}: expected {w * h} values, found {body.size}")
    v = body.reshape(h, w).astype(np.float64)
    return v, ~np.isnan(v)


def write_points(path, xyz, rgb):
    rows = np.concatenate([np.asarray(xyz, np.float64), np.asarray(rgb, np.float64)], axis=1)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(rows.astype("<f4").tobytes())


def read_points(path):
    body = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if body.size % 6:
        raise ValueError(f"{path}: size is not a multiple of 6 floats")
    rows = body.reshape(-1, 6).astype(np.float64)
    return rows[:, :3], rows[:, 3:]


def gray_ramp(values, valid=None):
    """Fixed grayscale visualization of a [0, 1] map; invalid pixels drawn black."""
    v = np.clip(np.nan_to_num(np.asarray(values, dtype=np.float64)), 0.0, 1.0)
    if valid is not None:
        v = np.where(valid, v, 0.0)
    return np.repeat(v[..., None], 3, axis=2)


def parse_kv(text):
    """Flat ``key = value`` lines; '#' starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        out[key] = value
    return out


def read_kv(path):
    return parse_kv(Path(path).read_text())


def format_kv(mapping):
    lines = []
    for key, value in mapping.items():
        if isinstance(value, (tuple, list, np.ndarray)):
            value = ",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def write_kv(path, mapping):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(format_kv(mapping))


def coerce(value: str, like):
    """Parse a config string into the type of ``like``."""
    if isinstance(like, bool):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        parts = [p for p in value.replace(" ", "").split(",") if p]
        elem = like[0] if like else 0.0
        return tuple(coerce(p, elem) for p in parts)
    if like is None:
        return value
    return type(like)(value)
