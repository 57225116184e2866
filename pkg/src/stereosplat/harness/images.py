"""Image file I/O: 8-bit PNG for viewing, raw float32 for exact metrics.

The raw format is a little-endian container: magic ``IMGF``, u32 version (1),
u32 ndim, then ndim u32 dimensions, then the float32 payload in row-major
order. It exists so metric comparisons do not depend on 8-bit quantization.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

_MAGIC = b"IMGF"
_VERSION = 1


class ImageFormatError(ValueError):
    pass


def save_png(path: str | Path, image: np.ndarray) -> None:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None].repeat(3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageFormatError(f"expected (H, W[, 3]) image, got {arr.shape}")
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(Path(path), format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(Path(path)) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def save_raw(path: str | Path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float32)
    header = _MAGIC + struct.pack("<II", _VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def load_raw(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise ImageFormatError(f"{path}: bad magic {blob[:4]!r}")
    version, ndim = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise ImageFormatError(f"{path}: unsupported version {version}")
    shape = struct.unpack_from(f"<{ndim}I", blob, 12)
    offset = 12 + 4 * ndim
    expected = int(np.prod(shape)) * 4
    payload = blob[offset:]
    if len(payload) != expected:
        raise ImageFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
