"""Training patches: loading from image folders and a synthetic texture generator."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .imageio import ImageError, list_images, read_image, write_image


def _grating(rng, yy, xx):
    freq = rng.uniform(0.05, 0.6)
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    return 0.5 + 0.5 * np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)


def _blobs(rng, yy, xx, size):
    out = np.zeros_like(xx)
    for _ in range(rng.integers(2, 8)):
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(size / 16, size / 3)
        out += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    return out / out.max()


def _checker(rng, yy, xx):
    cell = rng.integers(3, 17)
    return ((yy // cell + xx // cell) % 2).astype(np.float64)


def _ramp(rng, yy, xx, size):
    theta = rng.uniform(0, 2 * np.pi)
    v = np.cos(theta) * xx + np.sin(theta) * yy
    return (v - v.min()) / (np.ptp(v) + 1e-12)


def texture_patch(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """One (3, size, size) patch: a random blend of gratings, blobs, checks and ramps."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    kinds = rng.choice(4, size=rng.integers(1, 4), replace=False)
    out = np.zeros((3, size, size))
    for k in kinds:
        if k == 0:
            layer = _grating(rng, yy, xx)
        elif k == 1:
            layer = _blobs(rng, yy, xx, size)
        elif k == 2:
            layer = _checker(rng, yy, xx)
        else:
            layer = _ramp(rng, yy, xx, size)
        colour = rng.uniform(-0.6, 0.6, 3)
        out += colour[:, None, None] * layer
    out += rng.uniform(0.2, 0.8, 3)[:, None, None]
    # quantize to 8-bit levels like real image data
    return (np.round(np.clip(out, 0, 1) * 255) / 255).astype(np.float32)


def make_textures(count: int, size: int = 64, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.stack([texture_patch(rng, size) for _ in range(count)])


def write_textures(out_dir, count: int, size: int = 64, seed: int = 0) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, patch in enumerate(make_textures(count, size, seed)):
        p = out_dir / f"tex_{i:05d}.png"
        write_image(p, patch)
        paths.append(p)
    return paths


def tile_patches(image: np.ndarray, patch: int) -> np.ndarray:
    """Non-overlapping patch x patch tiles of a (3, H, W) image (remainder dropped)."""
    _, h, w = image.shape
    if h < patch or w < patch:
        return np.zeros((0, 3, patch, patch), image.dtype)
    tiles = [image[:, i : i + patch, j : j + patch]
             for i in range(0, h - patch + 1, patch) for j in range(0, w - patch + 1, patch)]
    return np.stack(tiles)


def load_patches(directory, patch: int) -> np.ndarray:
    """All tiles of every PNG/PPM in a folder, sorted by file name."""
    paths = list_images(directory)
    if not paths:
        raise ImageError(f"no .png or .ppm images in {directory}")
    tiles = [tile_patches(read_image(p), patch) for p in paths]
    out = np.concatenate(tiles)
    if len(out) == 0:
        raise ImageError(f"no image in {directory} is at least {patch}x{patch}")
    return out
