"""8-bit RGB image files (PNG and binary PPM) as (3, H, W) float arrays in [0, 1]."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .entropy.pmf import round_half_away

SUFFIXES = {".png": "PNG", ".ppm": "PPM"}


class ImageError(ValueError):
    """Unreadable or unsupported image file."""


def to_uint8(x: np.ndarray) -> np.ndarray:
    """[0, 1] floats to 8-bit codes, rounding halves away from zero."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return round_half_away(x * 255.0).astype(np.uint8)


def read_image(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode not in ("RGB", "L", "P", "RGBA"):
                raise ImageError(f"{path}: unsupported pixel mode {im.mode} (8-bit RGB expected)")
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise ImageError(f"cannot read image {path}: {exc}") from exc
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0).astype(np.float32)


def write_image(path, x: np.ndarray) -> None:
    path = Path(path)
    fmt = SUFFIXES.get(path.suffix.lower())
    if fmt is None:
        raise ImageError(f"{path}: output must be .png or .ppm")
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {x.shape}")
    Image.fromarray(to_uint8(x).transpose(1, 2, 0), "RGB").save(path, format=fmt)


def list_images(directory) -> list:
    directory = Path(directory)
    if not directory.is_dir():
        raise ImageError(f"{directory} is not a directory")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in SUFFIXES)
