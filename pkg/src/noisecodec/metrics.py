"""PSNR and MS-SSIM.

MS-SSIM follows the usual reference recipe: 11-tap Gaussian window
(sigma 1.5) applied without padding, 2x2 average pooling between scales,
contrast-structure terms at every scale and luminance at the coarsest one.
The same tensor code path produces the differentiable training loss and the
reported metric.
"""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .tensor import F, Tensor, conv2d, no_grad

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03
# negative contrast-structure values would make fractional powers undefined
CS_FLOOR = 1e-6


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; ``inf`` for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image extents differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def msssim_db(value: float) -> float:
    """The -10 log10(1 - v) plotting transform; ``inf`` at v = 1."""
    if value >= 1.0:
        return math.inf
    return -10.0 * math.log10(1.0 - value)


def max_scales(height: int, width: int, limit: int = len(MSSSIM_WEIGHTS)) -> int:
    """Largest scale count whose coarsest level still fits the window."""
    s = limit
    while s > 0 and min(height, width) < 2 ** (s - 1) * WINDOW:
        s -= 1
    return s


def _gaussian_taps(dtype) -> np.ndarray:
    x = np.arange(WINDOW, dtype=np.float64) - WINDOW // 2
    g = np.exp(-(x**2) / (2 * WINDOW_SIGMA**2))
    return (g / g.sum()).astype(dtype)


def _blur(x: Tensor, taps: np.ndarray) -> Tensor:
    x = conv2d(x, Tensor(taps.reshape(1, 1, 1, WINDOW)))
    return conv2d(x, Tensor(taps.reshape(1, 1, WINDOW, 1)))


def _pool(x: Tensor) -> Tensor:
    h, w = x.shape[2] // 2 * 2, x.shape[3] // 2 * 2
    if (h, w) != x.shape[2:]:
        x = F.getitem(x, (slice(None), slice(None), slice(0, h), slice(0, w)))
    kernel = np.full((1, 1, 2, 2), 0.25, x.dtype)
    return conv2d(x, Tensor(kernel), stride=2)


def _ssim_terms(a: Tensor, b: Tensor, taps: np.ndarray):
    c1, c2 = K1**2, K2**2
    mu_a, mu_b = _blur(a, taps), _blur(b, taps)
    mu_aa, mu_bb, mu_ab = F.mul(mu_a, mu_a), F.mul(mu_b, mu_b), F.mul(mu_a, mu_b)
    var_a = F.sub(_blur(F.mul(a, a), taps), mu_aa)
    var_b = F.sub(_blur(F.mul(b, b), taps), mu_bb)
    cov = F.sub(_blur(F.mul(a, b), taps), mu_ab)
    cs = F.div(F.add(F.mul(cov, 2.0), c2), F.add(F.add(var_a, var_b), c2))
    lum = F.div(F.add(F.mul(mu_ab, 2.0), c1), F.add(F.add(mu_aa, mu_bb), c1))
    return lum, cs


def ms_ssim_tensor(a: Tensor, b: Tensor, scales: Optional[int] = None) -> Tensor:
    """Differentiable MS-SSIM of (B, C, H, W) tensors, averaged over the batch."""
    if a.shape != b.shape:
        raise ValueError(f"image extents differ: {a.shape} vs {b.shape}")
    if a.ndim != 4:
        raise ValueError(f"expected (B, C, H, W) tensors, got {a.shape}")
    bsz, ch, h, w = a.shape
    if scales is None:
        scales = max_scales(h, w)
        if scales == 0:
            raise ValueError(f"MS-SSIM needs images of at least {WINDOW}x{WINDOW} pixels, got {h}x{w}")
    elif not 1 <= scales <= len(MSSSIM_WEIGHTS):
        raise ValueError(f"scales must lie in 1..{len(MSSSIM_WEIGHTS)}")
    elif min(h, w) < 2 ** (scales - 1) * WINDOW:
        need = 2 ** (scales - 1) * WINDOW
        raise ValueError(f"{scales}-scale MS-SSIM needs min(H, W) >= {need}, got {h}x{w}")
    weights = np.asarray(MSSSIM_WEIGHTS[:scales], dtype=np.float64)
    weights = weights / weights.sum()
    taps = _gaussian_taps(a.dtype)

    x = F.reshape(a, (bsz * ch, 1, h, w))
    y = F.reshape(b, (bsz * ch, 1, h, w))
    factors = []
    for s in range(scales):
        lum, cs = _ssim_terms(x, y, taps)
        term = F.mul(lum, cs) if s == scales - 1 else cs
        # mean over each image's channels and positions
        per_image = F.mean(F.reshape(term, (bsz, -1)), axis=1)
        factors.append(F.power(F.clamp(per_image, CS_FLOOR, None), float(weights[s])))
        if s < scales - 1:
            x, y = _pool(x), _pool(y)
    out = factors[0]
    for f in factors[1:]:
        out = F.mul(out, f)
    return F.mean(out)


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"expected a (3, H, W) image or (B, 3, H, W) batch, got {x.shape}")
    return x


def ms_ssim(a, b, scales: Optional[int] = None) -> float:
    """MS-SSIM of images in [0, 1] (evaluated in double precision)."""
    a, b = _as_batch(a), _as_batch(b)
    if a.shape != b.shape:
        raise ValueError(f"image extents differ: {a.shape} vs {b.shape}")
    with no_grad():
        return float(ms_ssim_tensor(Tensor(a), Tensor(b), scales).data)
