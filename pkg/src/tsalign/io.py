"""File formats: STT1 tensors, PPM images and atomic writes.

STT1 layout (little-endian)::

    b"STT1" | u8 dtype (0 = f32, 1 = f64) | u8 rank | rank x u32 extents | payload

The payload is the row-major array data.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"STT1"
_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class FormatError(ValueError):
    pass


def atomic_write(path, data: bytes) -> None:
    """Write ``data`` to ``path`` through a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_stt1(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _TAG_OF:
        arr = arr.astype(np.float64)
    if arr.ndim > 255:
        raise FormatError("rank too large for STT1")
    tag = _TAG_OF[np.dtype(arr.dtype)]
    header = MAGIC + struct.pack("<BB", tag, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes()
    return header + payload


def decode_stt1(buf: bytes) -> np.ndarray:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise FormatError("not an STT1 file (bad magic)")
    tag, rank = struct.unpack_from("<BB", buf, 4)
    if tag not in _TAGS:
        raise FormatError(f"unknown STT1 dtype tag {tag}")
    off = 6 + 4 * rank
    if len(buf) < off:
        raise FormatError("truncated STT1 header")
    shape = struct.unpack_from(f"<{rank}I", buf, 6)
    dt = _TAGS[tag]
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) != off + count * dt.itemsize:
        raise FormatError(
            f"STT1 payload size mismatch: expected {count * dt.itemsize} bytes, got {len(buf) - off}"
        )
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(shape)
    return arr.astype(dt.newbyteorder("="))


def write_stt1(path, arr) -> None:
    atomic_write(path, encode_stt1(arr))


def read_stt1(path) -> np.ndarray:
    return decode_stt1(Path(path).read_bytes())


def encode_ppm(rgb: np.ndarray) -> bytes:
    """Binary P6 encoding of an [H, W, 3] uint8 image."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError("PPM export expects an [H, W, 3] uint8 array")
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()


def decode_ppm(buf: bytes) -> np.ndarray:
    # Only what encode_ppm emits: no comments, single whitespace separators.
    try:
        magic, dims, maxval, pixels = buf.split(b"\n", 3)
        w, h = (int(x) for x in dims.split())
    except ValueError:
        raise FormatError("malformed PPM header") from None
    if magic != b"P6" or maxval != b"255" or len(pixels) != w * h * 3:
        raise FormatError("unsupported PPM variant")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path, rgb: np.ndarray) -> None:
    atomic_write(path, encode_ppm(rgb))


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def heatmap_image(distribution, height: int, width: int) -> np.ndarray:
    """Gray image with intensity ``value / max(value)`` quantized to 8 bits."""
    d = np.asarray(distribution, dtype=np.float64).reshape(-1)
    if d.size != height * width:
        raise ValueError(f"distribution has {d.size} entries, grid is {height}x{width}")
    peak = d.max()
    scaled = d / peak if peak > 0 else np.zeros_like(d)
    gray = np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8).reshape(height, width)
    return np.repeat(gray[:, :, None], 3, axis=2)


def write_heatmap(distribution, height: int, width: int, path) -> None:
    write_ppm(path, heatmap_image(distribution, height, width))


def overlay_image(frame_rgb: np.ndarray, mask: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Tint masked pixels of a float [H, W, 3] frame in [0, 1] red."""
    frame = np.clip(np.asarray(frame_rgb, dtype=np.float64), 0.0, 1.0)
    m = np.asarray(mask, dtype=bool)[:, :, None]
    red = np.array([1.0, 0.0, 0.0])
    out = np.where(m, (1 - alpha) * frame + alpha * red, frame)
    return np.rint(out * 255).astype(np.uint8)
