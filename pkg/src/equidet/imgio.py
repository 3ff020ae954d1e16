"""8-bit PNG I/O for unit-range float images."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
from PIL import Image


def save_png(image: np.ndarray, path: Path | str) -> None:
    """Quantize a [0,1] float H x W x C image to 8 bit and write a PNG."""
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    u8 = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    if u8.shape[2] == 1:
        u8 = u8[:, :, 0]
    Image.fromarray(u8).save(str(path))


def load_png(path: Path | str) -> np.ndarray:
    """Read a PNG back to a float32 H x W x C image in [0,1]."""
    with Image.open(str(path)) as im:
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return (arr.astype(np.float32) / 255.0)


def sha256_file(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
