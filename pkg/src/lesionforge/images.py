"""PNG round-tripping and sample-grid rendering.

Images are [C, H, W] float64 in [0, 1] in memory and 8-bit RGB on disk;
quantization is the only loss and it is deterministic.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Quantize [0, 1] floats to uint8 with round-half-away from zero."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr, dtype=np.float64) / 255.0


def save_png(path, image: np.ndarray) -> Path:
    """Write a [C, H, W] float image in [0, 1] as an 8-bit PNG."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise DataError(f"expected [C,H,W] with 1 or 3 channels, got {image.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    hwc = to_uint8(image).transpose(1, 2, 0)
    if hwc.shape[2] == 1:
        hwc = hwc[:, :, 0]
    Image.fromarray(hwc).save(path)
    return path


def load_png(path) -> np.ndarray:
    """Read an image file into [3, H, W] float64 in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"image file not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return from_uint8(arr).transpose(2, 0, 1)


def image_grid(images: np.ndarray, cols: int = 8, pad: int = 2) -> np.ndarray:
    """Tile [N, C, H, W] images into one [C, H', W'] grid with padding."""
    images = np.asarray(images)
    if images.ndim != 4:
        raise DataError(f"expected [N,C,H,W], got {images.shape}")
    n, c, h, w = images.shape
    if n == 0:
        raise DataError("cannot build a grid from zero images")
    cols = min(cols, n)
    rows = (n + cols - 1) // cols
    grid = np.ones((c, rows * (h + pad) + pad, cols * (w + pad) + pad))
    for i in range(n):
        r, q = divmod(i, cols)
        y = pad + r * (h + pad)
        x = pad + q * (w + pad)
        grid[:, y : y + h, x : x + w] = np.clip(images[i], 0.0, 1.0)
    return grid


def save_image_grid(path, images: np.ndarray, cols: int = 8) -> Path:
    return save_png(path, image_grid(images, cols=cols))
