"""Small image helpers shared by data loading, augmentation, and heatmap export.

Images are [C, H, W] float64 arrays in [0, 1] throughout the package.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

__all__ = ["load_image", "save_image_rgb", "save_image_gray", "bilinear_resize"]


def load_image(path) -> np.ndarray:
    """Decode an 8-bit raster file to [3, H, W] floats in [0, 1]."""
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        arr = np.asarray(rgb, dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def save_image_rgb(path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = (arr.transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def save_image_gray(path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8), mode="L").save(path)


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of a [C, H, W] (or [H, W]) array.

    Sample points follow the half-pixel convention: destination pixel centers
    map to ``(dst + 0.5) * scale - 0.5`` in the source grid.
    """
    squeeze = image.ndim == 2
    img = image[None] if squeeze else image
    _, h, w = img.shape
    if (h, w) == (out_h, out_w):
        out = img.copy()
        return out[0] if squeeze else out

    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]

    top = img[:, y0[:, None], x0[None, :]] * (1 - wx) + img[:, y0[:, None], x1[None, :]] * wx
    bot = img[:, y1[:, None], x0[None, :]] * (1 - wx) + img[:, y1[:, None], x1[None, :]] * wx
    out = top * (1 - wy) + bot * wy
    return out[0] if squeeze else out
