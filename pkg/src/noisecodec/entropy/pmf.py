"""Discretized likelihood models as the coder sees them.

Both model families share one rule. Integer symbols live in a window of
``2 * TAIL + 1`` values; the probability of symbol ``k`` is the CDF mass on
``[k - 0.5, k + 0.5)``, except that the two edge symbols also absorb all mass
beyond the window. The resulting pmf is quantized with
:func:`noisecodec.entropy.rans.quantize_pmf`, and those integer frequencies
are what both the coder and :func:`rate_estimate` use.

Phi is ``scipy.special.ndtr`` (Cephes erf/erfc, accurate to double precision).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .rans import PRECISION, quantize_pmf

TAIL = 32
SIGMA_FLOOR = 0.11


def round_half_away(x):
    """Round to nearest integer, ties away from zero."""
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _check_sigma(sigma):
    sigma = np.asarray(sigma, dtype=np.float64)
    # float32 network outputs can sit one ulp under the floor after rounding
    if np.any(sigma < SIGMA_FLOOR * (1 - 1e-6)):
        raise ValueError(f"sigma below the floor {SIGMA_FLOOR}: min {sigma.min():.4g}")
    return sigma


def gaussian_pmf(k, mu, sigma, tail: int = TAIL):
    """Probability of integer ``k`` under N(mu, sigma^2) discretized to unit bins.

    Symbols at the window edge ``round(mu) +- tail`` include the folded tails.
    """
    sigma = _check_sigma(sigma)
    k = np.asarray(k, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    center = round_half_away(mu)
    upper = special.ndtr((k + 0.5 - mu) / sigma)
    lower = special.ndtr((k - 0.5 - mu) / sigma)
    upper = np.where(k >= center + tail, 1.0, upper)
    lower = np.where(k <= center - tail, 0.0, lower)
    return upper - lower


def _gaussian_window_pmf(frac_mu, sigma, tail):
    """(n, 2*tail+1) pmf rows for offsets -tail..tail about the window centre."""
    offs = np.arange(-tail, tail + 2, dtype=np.float64) - 0.5
    edges = special.ndtr((offs[None, :] - frac_mu[:, None]) / sigma[:, None])
    edges[:, 0] = 0.0
    edges[:, -1] = 1.0
    return np.diff(edges, axis=1)


@dataclass
class DiscretizedGaussian:
    """A batch of per-symbol mean-scale Gaussian models."""

    mu: np.ndarray
    sigma: np.ndarray
    tail: int = TAIL
    precision: int = PRECISION

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        self.sigma = _check_sigma(self.sigma).reshape(-1)
        if self.mu.shape != self.sigma.shape:
            raise ValueError("mu and sigma must have the same number of elements")
        self.center = round_half_away(self.mu)
        self._cdf = None

    def __len__(self) -> int:
        return self.mu.size

    @property
    def cdf(self) -> np.ndarray:
        if self._cdf is None:
            self._cdf = gaussian_cdf_tables(self.mu - self.center, self.sigma, self.tail, self.precision)
        return self._cdf

    def to_index(self, symbols) -> np.ndarray:
        idx = np.asarray(symbols, dtype=np.float64).reshape(-1) - self.center + self.tail
        if np.any(idx < 0) or np.any(idx > 2 * self.tail):
            raise ValueError("symbol outside the representable window")
        return idx.astype(np.int64)

    def from_index(self, idx) -> np.ndarray:
        return (np.asarray(idx) - self.tail + self.center).astype(np.int64)

    def rows(self) -> np.ndarray:
        return np.arange(len(self), dtype=np.int64)


def gaussian_cdf_tables(frac_mu, sigma, tail: int = TAIL, precision: int = PRECISION,
                        chunk: int = 1 << 16) -> np.ndarray:
    """Integer CDF tables for Gaussians with window-relative means ``frac_mu``."""
    frac_mu = np.asarray(frac_mu, dtype=np.float64).reshape(-1)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    out = np.empty((frac_mu.size, 2 * tail + 2), np.int32)
    for s in range(0, frac_mu.size, chunk):
        pmf = _gaussian_window_pmf(frac_mu[s : s + chunk], sigma[s : s + chunk], tail)
        out[s : s + chunk] = quantize_pmf(pmf, precision)
    return out


def prior_cdf_tables(cdf_fn, channels: int, tail: int = TAIL, precision: int = PRECISION) -> np.ndarray:
    """Integer CDF tables for a factorized prior, one row per channel.

    ``cdf_fn(values)`` maps a (channels, n) array of real values to CDF values.
    """
    edges = np.arange(-tail, tail + 2, dtype=np.float64) - 0.5
    grid = np.broadcast_to(edges, (channels, edges.size)).copy()
    c = np.asarray(cdf_fn(grid), dtype=np.float64)
    c[:, 0] = 0.0
    c[:, -1] = 1.0
    pmf = np.maximum(np.diff(c, axis=1), 0.0)
    return quantize_pmf(pmf, precision)


def table_bits(symbol_idx, rows, cdf: np.ndarray, precision: int = PRECISION) -> np.ndarray:
    """Per-symbol code length -log2(freq / 2**precision) under quantized tables."""
    symbol_idx = np.asarray(symbol_idx, dtype=np.int64).reshape(-1)
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)
    freq = cdf[rows, symbol_idx + 1].astype(np.float64) - cdf[rows, symbol_idx]
    return precision - np.log2(freq)


def rate_estimate(symbols, model: DiscretizedGaussian) -> float:
    """Ideal code length in bits of integer ``symbols`` under ``model``."""
    idx = model.to_index(symbols)
    return float(table_bits(idx, model.rows(), model.cdf, model.precision).sum())


@dataclass
class TableModel:
    """Symbols in ``[-tail, tail]`` coded with shared tables, e.g. one per channel."""

    cdf: np.ndarray
    table_rows: np.ndarray
    tail: int = TAIL
    precision: int = PRECISION

    def __post_init__(self):
        self.table_rows = np.asarray(self.table_rows, dtype=np.int64).reshape(-1)

    def __len__(self) -> int:
        return self.table_rows.size

    def to_index(self, symbols) -> np.ndarray:
        idx = np.asarray(symbols, dtype=np.int64).reshape(-1) + self.tail
        if np.any(idx < 0) or np.any(idx > 2 * self.tail):
            raise ValueError("symbol outside the representable window")
        return idx

    def from_index(self, idx) -> np.ndarray:
        return np.asarray(idx, dtype=np.int64) - self.tail

    def rows(self) -> np.ndarray:
        return self.table_rows
