"""2-D convolutions (cross-correlation) over NCHW tensors via im2col."""
from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import core
from .core import NonFiniteError, Tensor, _make, mul


def _out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> (B*ho*wo, C*kh*kw)."""
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add columns back into a (B, C, Hp, Wp) array."""
    b, c = shape[:2]
    cols = cols.reshape(b, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros(shape, dtype=cols.dtype)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + hspan : stride, j : j + wspan : stride] += cols[:, :, i, j]
    return out


def _check_input(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{op}: expected a 4-D NCHW tensor, got shape {x.shape}")
    if core.CHECK_FINITE and not np.all(np.isfinite(x.data)):
        raise NonFiniteError(f"{op}: non-finite input")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x`` (B, C, H, W) with ``weight`` (O, C, kh, kw)."""
    _check_input(x, "conv2d")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} / padding={padding}")
    b, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv2d: kernel expects {ci} input channels, input has {c}")
    ho, wo = _out_extent(h, kh, stride, padding), _out_extent(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: {kh}x{kw} kernel does not fit a {h}x{w} input with padding {padding}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({o},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(b, ho, wo, o).transpose(0, 3, 1, 2))

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = gw = gb = None
        if x.requires_grad:
            gxp = _col2im(gmat @ wmat, xp.shape, kh, kw, stride, ho, wo)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
            gx = np.ascontiguousarray(gx)
        if weight.requires_grad:
            gw = (gmat.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv2d")


def conv2d_transpose(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`; ``weight`` is (C_in, C_out, kh, kw).

    Output extent per axis is ``(H - 1) * stride - 2 * padding + kh``.
    """
    _check_input(x, "conv2d_transpose")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d_transpose: invalid stride={stride} / padding={padding}")
    b, c, h, w = x.shape
    ci, o, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv2d_transpose: kernel expects {ci} input channels, input has {c}")
    hf, wf = (h - 1) * stride + kh, (w - 1) * stride + kw
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d_transpose: padding {padding} leaves an empty output")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d_transpose: bias shape {bias.shape} != ({o},)")

    xmat = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    wmat = weight.data.reshape(c, -1)
    full = _col2im(xmat @ wmat, (b, o, hf, wf), kh, kw, stride, h, w)
    out = full[:, :, padding : padding + ho, padding : padding + wo]
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        gcols = _im2col(gp, kh, kw, stride, h, w)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray((gcols @ wmat.T).reshape(b, h, w, c).transpose(0, 3, 1, 2))
        if weight.requires_grad:
            gw = (xmat.T @ gcols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv2d_transpose")


def causal_mask(kh: int, kw: int, mask_type: str = "A") -> np.ndarray:
    """Raster-order mask: keep weights strictly before the centre (type A)."""
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"masked convolution needs odd kernel extents, got {kh}x{kw}")
    if mask_type not in ("A", "B"):
        raise ValueError(f"unknown mask type {mask_type!r}")
    mask = np.zeros((kh, kw), dtype=bool)
    ch, cw = kh // 2, kw // 2
    mask[:ch, :] = True
    mask[ch, :cw] = True
    if mask_type == "B":
        mask[ch, cw] = True
    return mask


def masked_conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, mask_type: str = "A") -> Tensor:
    """Same-size stride-1 convolution with a causal raster mask on ``weight``."""
    o, c, kh, kw = weight.shape
    if kh != kw:
        raise ValueError(f"masked_conv2d: kernel must be square, got {kh}x{kw}")
    mask = causal_mask(kh, kw, mask_type).astype(weight.dtype)
    masked = mul(weight, Tensor(np.broadcast_to(mask, weight.shape).copy()))
    return conv2d(x, masked, bias, stride=1, padding=kh // 2)
