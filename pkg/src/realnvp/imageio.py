"""PNG grid output with a decode-reencode check."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError, ShapeError

_MODES = {1: "L", 3: "RGB", 4: "RGBA"}


def tile(images: np.ndarray, cols: int | None = None, pad: int = 1, fill: int = 0) -> np.ndarray:
    """Arrange uint8 images into one raster.

    ``images`` is (rows, cols, H, W, C) or (N, H, W, C); the flat form is wrapped
    at ``cols`` (default: ceil(sqrt(N))).
    """
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim == 4:
        n = images.shape[0]
        cols = cols or int(np.ceil(np.sqrt(n)))
        rows = -(-n // cols)
        blank = np.full((rows * cols - n, *images.shape[1:]), fill, np.uint8)
        images = np.concatenate([images, blank]).reshape(rows, cols, *images.shape[1:])
    if images.ndim != 5:
        raise ShapeError("image grid", images.shape, ("rows", "cols", "H", "W", "C"))
    rows, cols, h, w, c = images.shape
    out = np.full((rows * (h + pad) - pad, cols * (w + pad) - pad, c), fill, np.uint8)
    for i in range(rows):
        for j in range(cols):
            out[i * (h + pad):i * (h + pad) + h, j * (w + pad):j * (w + pad) + w] = images[i, j]
    return out


def write_png(path, raster: np.ndarray) -> Path:
    """Write an (H, W, C) uint8 raster and verify it decodes to the same pixels."""
    raster = np.asarray(raster)
    if raster.dtype != np.uint8:
        raise ShapeError("png raster must be uint8", raster.shape)
    if raster.ndim == 2:
        raster = raster[..., None]
    channels = raster.shape[-1]
    if raster.ndim != 3 or channels not in _MODES:
        raise ShapeError("png raster", raster.shape, ("H", "W", "1|3|4"))
    path = Path(path)
    data = raster[..., 0] if channels == 1 else raster
    Image.fromarray(data, mode=_MODES[channels]).save(path, format="PNG")
    if not np.array_equal(read_png(path), raster):
        raise FormatError(f"{path}: PNG decode does not reproduce the written pixels")
    return path


def read_png(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img)
    return arr[..., None] if arr.ndim == 2 else arr


def heatmap(values: np.ndarray) -> np.ndarray:
    """Scale a 2-D float field to a grayscale uint8 raster (max -> 255)."""
    values = np.asarray(values, dtype=np.float64)
    top = values.max()
    scaled = values / top if top > 0 else np.zeros_like(values)
    return np.clip(np.floor(scaled * 255.0 + 0.5), 0, 255).astype(np.uint8)[..., None]
