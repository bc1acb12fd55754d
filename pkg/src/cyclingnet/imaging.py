"""Raster helpers shared by the flow and pipeline modules."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)

FRAME_SUFFIXES = (".png", ".ppm", ".pgm", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff")


def to_unit_range(image: np.ndarray) -> np.ndarray:
    """8-bit rasters are divided by 255; float rasters are assumed to be in [0, 1]."""
    if np.issubdtype(image.dtype, np.integer):
        return image.astype(np.float32) / 255.0
    return image.astype(np.float32, copy=False)


def to_gray(image: np.ndarray) -> np.ndarray:
    image = to_unit_range(image)
    if image.ndim == 2:
        return image
    if image.shape[-1] == 1:
        return image[..., 0]
    return image[..., :3] @ LUMA_WEIGHTS


def bilinear_resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centred bilinear resampling with edge clamping.

    Works on (H, W) and (H, W, C) arrays. Same-size input is returned as a copy.
    """
    src_h, src_w = image.shape[:2]
    if (src_h, src_w) == (height, width):
        return image.copy()
    rows = (np.arange(height) + 0.5) * (src_h / height) - 0.5
    cols = (np.arange(width) + 0.5) * (src_w / width) - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    if image.ndim == 2:
        return ndimage.map_coordinates(image, [rr, cc], order=1, mode="nearest")
    planes = [ndimage.map_coordinates(image[..., k], [rr, cc], order=1, mode="nearest")
              for k in range(image.shape[2])]
    return np.stack(planes, axis=-1)


def read_image(path: Path) -> np.ndarray:
    """Load an 8-bit raster as uint8 (H, W) or (H, W, 3)."""
    with Image.open(path) as img:
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        return np.asarray(img)


def write_image(path: Path, image: np.ndarray) -> None:
    """Write a [0, 1] float image (or uint8) as an 8-bit raster."""
    if not np.issubdtype(image.dtype, np.integer):
        image = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(image).save(path)
