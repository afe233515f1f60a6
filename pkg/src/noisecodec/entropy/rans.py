"""Byte-wise range ANS with a 32-bit state and 16-bit probability precision.

Models are passed as integer CDF tables: row ``r`` of ``cdf`` holds
``cdf[r, 0] = 0 <= ... <= cdf[r, K] = 2**PRECISION`` and symbol ``s`` owns
the slot range ``[cdf[r, s], cdf[r, s + 1])``. Each coded symbol names the
table row it uses, so one call can mix per-element and per-channel models.

Stream layout: 4-byte little-endian final encoder state, then renormalisation
bytes in decoder order. A valid stream leaves the decoder in the initial
state ``RANS_L`` with every byte consumed; anything else is reported as
corruption.
"""
from __future__ import annotations

import numpy as np
from numba import njit

PRECISION = 16
RANS_L = 1 << 23


class DecodeError(ValueError):
    """Truncated or corrupt rANS payload."""


@njit(cache=True)
def _encode_kernel(sym, rows, cdf, precision):
    n = sym.shape[0]
    buf = np.empty(2 * n + 8, np.uint8)
    pos = buf.shape[0]
    x = np.int64(RANS_L)
    for i in range(n - 1, -1, -1):
        r = rows[i]
        s = sym[i]
        start = np.int64(cdf[r, s])
        freq = np.int64(cdf[r, s + 1]) - start
        x_max = ((RANS_L >> precision) << 8) * freq
        while x >= x_max:
            pos -= 1
            buf[pos] = x & 0xFF
            x >>= 8
        x = ((x // freq) << precision) + (x % freq) + start
    pos -= 4
    buf[pos] = x & 0xFF
    buf[pos + 1] = (x >> 8) & 0xFF
    buf[pos + 2] = (x >> 16) & 0xFF
    buf[pos + 3] = (x >> 24) & 0xFF
    return buf[pos:].copy()


@njit(cache=True)
def _decode_kernel(buf, pos, x, rows, cdf, precision, out):
    """Decode len(out) symbols; returns (pos, x, ok)."""
    mask = (1 << precision) - 1
    nbuf = buf.shape[0]
    k = cdf.shape[1] - 1
    for i in range(out.shape[0]):
        slot = x & mask
        r = rows[i]
        lo = 0
        hi = k
        while hi - lo > 1:
            mid = (lo + hi) >> 1
            if cdf[r, mid] <= slot:
                lo = mid
            else:
                hi = mid
        start = np.int64(cdf[r, lo])
        freq = np.int64(cdf[r, lo + 1]) - start
        if freq <= 0:
            return pos, x, False
        x = freq * (x >> precision) + slot - start
        while x < RANS_L:
            if pos >= nbuf:
                return pos, x, False
            x = (x << 8) | np.int64(buf[pos])
            pos += 1
        out[i] = lo
    return pos, x, True


@njit(cache=True)
def _quantize_kernel(pmf, precision):
    """Probabilities -> integer CDF rows summing to 2**precision.

    Every symbol first gets one quantum; the remaining mass is distributed by
    flooring, then leftover quanta go to the largest fractional remainders
    (ties to the lower index).
    """
    n, k = pmf.shape
    total = np.int64(1) << precision
    free = total - k
    cdf = np.empty((n, k + 1), np.int32)
    freq = np.empty(k, np.int64)
    rem = np.empty(k, np.float64)
    order = np.empty(k, np.int64)
    for r in range(n):
        s = 0.0
        for j in range(k):
            s += pmf[r, j]
        used = np.int64(0)
        for j in range(k):
            v = pmf[r, j] / s * free
            f = np.floor(v)
            freq[j] = 1 + np.int64(f)
            rem[j] = v - f
            used += freq[j]
        deficit = total - used
        if deficit != 0:
            # stable insertion sort of indices by descending remainder
            for j in range(k):
                v = rem[j]
                t = j - 1
                while t >= 0 and rem[order[t]] < v:
                    order[t + 1] = order[t]
                    t -= 1
                order[t + 1] = j
            t = 0
            while deficit > 0:
                freq[order[t % k]] += 1
                deficit -= 1
                t += 1
            t = k - 1
            while deficit < 0:
                j = order[t % k]
                if freq[j] > 1:
                    freq[j] -= 1
                    deficit += 1
                t -= 1
        c = 0
        cdf[r, 0] = 0
        for j in range(k):
            c += freq[j]
            cdf[r, j + 1] = c
    return cdf


def quantize_pmf(pmf: np.ndarray, precision: int = PRECISION) -> np.ndarray:
    """Quantize rows of probabilities to integer CDF tables (int32, width K+1)."""
    pmf = np.ascontiguousarray(np.atleast_2d(pmf), dtype=np.float64)
    if pmf.shape[1] > (1 << precision):
        raise ValueError("alphabet larger than the coder precision")
    if np.any(pmf < 0) or not np.all(np.isfinite(pmf)):
        raise ValueError("probabilities must be finite and non-negative")
    return _quantize_kernel(pmf, precision)


def _prepare(symbols, rows, cdf):
    sym = np.ascontiguousarray(symbols, dtype=np.int64).reshape(-1)
    rows = np.ascontiguousarray(rows, dtype=np.int64).reshape(-1)
    cdf = np.ascontiguousarray(cdf, dtype=np.int32)
    if sym.shape != rows.shape:
        raise ValueError(f"{sym.size} symbols but {rows.size} table indices")
    return sym, rows, cdf


def encode(symbols, rows, cdf: np.ndarray, precision: int = PRECISION) -> bytes:
    """Encode symbol indices, each under CDF table ``cdf[rows[i]]``."""
    sym, rows, cdf = _prepare(symbols, rows, cdf)
    if sym.size == 0:
        return b""
    k = cdf.shape[1] - 1
    if sym.min() < 0 or sym.max() >= k:
        raise ValueError(f"symbol index outside the alphabet [0, {k})")
    if rows.min() < 0 or rows.max() >= cdf.shape[0]:
        raise ValueError("table index out of range")
    freqs = cdf[rows, sym + 1].astype(np.int64) - cdf[rows, sym]
    if np.any(freqs <= 0):
        raise ValueError("a coded symbol has zero frequency")
    return _encode_kernel(sym, rows, cdf, precision).tobytes()


class RansDecoder:
    """Incremental decoder: call :meth:`decode` with successive table batches."""

    def __init__(self, data: bytes, precision: int = PRECISION):
        self.buf = np.frombuffer(bytes(data), dtype=np.uint8)
        self.precision = precision
        if self.buf.size == 0:
            self.x = RANS_L
            self.pos = 0
            return
        if self.buf.size < 4:
            raise DecodeError("payload shorter than the 4-byte state header")
        self.x = int(self.buf[0]) | int(self.buf[1]) << 8 | int(self.buf[2]) << 16 | int(self.buf[3]) << 24
        self.pos = 4
        if not RANS_L <= self.x < (RANS_L << 8):
            raise DecodeError("initial state out of range")

    def decode(self, rows, cdf: np.ndarray) -> np.ndarray:
        rows = np.ascontiguousarray(rows, dtype=np.int64).reshape(-1)
        cdf = np.ascontiguousarray(cdf, dtype=np.int32)
        out = np.empty(rows.size, np.int64)
        if rows.size == 0:
            return out
        if self.buf.size == 0:
            raise DecodeError("empty payload but symbols were requested")
        if rows.min() < 0 or rows.max() >= cdf.shape[0]:
            raise ValueError("table index out of range")
        pos, x, ok = _decode_kernel(self.buf, self.pos, self.x, rows, cdf, self.precision, out)
        self.pos, self.x = int(pos), int(x)
        if not ok:
            raise DecodeError("payload truncated or corrupt")
        return out

    def finish(self) -> None:
        """Check that the stream was consumed exactly."""
        if self.buf.size == 0:
            return
        if self.pos != self.buf.size or self.x != RANS_L:
            raise DecodeError("payload corrupt: decoder did not end in the initial state")


def decode(data: bytes, rows, cdf: np.ndarray, precision: int = PRECISION) -> np.ndarray:
    """Decode all symbols at once; inverse of :func:`encode`."""
    dec = RansDecoder(data, precision)
    out = dec.decode(rows, cdf)
    dec.finish()
    return out
