"""Camera-style noise in the linear raw domain.

Clean sRGB values are linearised with the inverse sRGB gamma curve, a
signal-dependent Gaussian is added per pixel and channel, and the result is
clipped to [0, 1] and gamma-encoded again.

Random draws use numpy's ``Generator`` over the PCG64 bit generator; normals
come from ``Generator.standard_normal`` (ziggurat). Seeds are plain integers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GAMMA_A = 0.055
GAMMA_B = 0.0031308
GAMMA_M = 12.92
GAMMA_EXP = 2.4
# sRGB value at the linear-segment knee
_X_KNEE = GAMMA_M * GAMMA_B


@dataclass(frozen=True)
class NoiseParams:
    sigma_r: float
    sigma_s: float

    def __post_init__(self):
        if not (self.sigma_r >= 0 and self.sigma_s >= 0):
            raise ValueError(f"noise parameters must be non-negative, got {self}")

    def variance(self, y):
        """Linear-domain variance at true intensity ``y``."""
        return self.sigma_s * y + self.sigma_r ** 2


GAIN_PRESETS = {
    1: NoiseParams(10 ** -2.1, 10 ** -2.6),
    2: NoiseParams(10 ** -1.8, 10 ** -2.3),
    4: NoiseParams(10 ** -1.4, 10 ** -1.9),
    8: NoiseParams(10 ** -1.1, 10 ** -1.5),
}

LOG_SIGMA_R_RANGE = (-3.0, -1.5)
LOG_SIGMA_S_RANGE = (-4.0, -2.0)


def _check(x) -> np.ndarray:
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite values in image")
    return x


def _out_dtype(x: np.ndarray):
    return x.dtype if x.dtype.kind == "f" else np.float64


def gamma_forward(y):
    """Linear intensities -> sRGB values (input clipped to [0, 1] first).

    Evaluated in double precision and cast back to the input's float type.
    """
    y = _check(y)
    yd = np.clip(y.astype(np.float64), 0.0, 1.0)
    root = np.power(yd, 1.0 / GAMMA_EXP)
    # (1 + a) * root - a, arranged so that Y = 1 maps to exactly 1
    hi = root + GAMMA_A * (root - 1.0)
    return np.where(yd <= GAMMA_B, GAMMA_M * yd, hi).astype(_out_dtype(y))


def gamma_inverse(x):
    """sRGB values -> linear intensities; exact inverse of :func:`gamma_forward`."""
    x = _check(x)
    xd = np.clip(x.astype(np.float64), 0.0, 1.0)
    hi = np.power((xd + GAMMA_A) / (1 + GAMMA_A), GAMMA_EXP)
    return np.where(xd <= _X_KNEE, xd / GAMMA_M, hi).astype(_out_dtype(x))


def noisy_linear(y: np.ndarray, params: NoiseParams, rng: np.random.Generator) -> np.ndarray:
    """Draw y~ ~ N(y, sigma_s * y + sigma_r^2) elementwise, without clipping."""
    std = np.sqrt(params.variance(y.astype(np.float64)))
    return y + std * rng.standard_normal(y.shape)


def synthesize_noise(x_clean, params: NoiseParams, seed: int) -> np.ndarray:
    """Noisy sRGB image from a clean sRGB image in [0, 1]; deterministic per seed."""
    x = np.asarray(x_clean)
    if params.sigma_r == 0 and params.sigma_s == 0:
        return x.copy()
    y = gamma_inverse(x.astype(np.float64))
    y_noisy = noisy_linear(y, params, np.random.default_rng(seed))
    out = gamma_forward(np.clip(y_noisy, 0.0, 1.0))
    return out.astype(_out_dtype(x))


def sample_noise_params(rng: np.random.Generator) -> NoiseParams:
    """Log-uniform draw over the training ranges of both parameters."""
    log_r = rng.uniform(*LOG_SIGMA_R_RANGE)
    log_s = rng.uniform(*LOG_SIGMA_S_RANGE)
    return NoiseParams(10.0 ** log_r, 10.0 ** log_s)
