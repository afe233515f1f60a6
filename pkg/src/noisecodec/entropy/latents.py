"""Coding the quantized latents of a :class:`CodecModel`.

Hyper-latent symbols are coded channel-major under the factorized prior.
Main-latent residuals ``round(z1 - mu)`` are coded position-major (raster
order over positions, channels within a position) under zero-mean
discretized Gaussians with the predicted scales, which is the order a
context-model decoder needs.
"""
from __future__ import annotations

from typing import Tuple

import numpy as np

from ..codec.model import CodecModel, LatentBundle
from ..tensor import Tensor, no_grad
from .bitstream import Bitstream, BitstreamError
from .pmf import TAIL, gaussian_cdf_tables, round_half_away, table_bits
from .rans import DecodeError, RansDecoder, decode, encode


def _residual_symbols(bundle: LatentBundle) -> np.ndarray:
    sym = round_half_away(bundle.z1_hat.data.astype(np.float64) - bundle.mu.data)
    if np.any(np.abs(sym) > TAIL):
        raise ValueError("latent residual outside the coder window; quantize with infer_round first")
    return sym.astype(np.int64)


def _position_major(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a[0].transpose(1, 2, 0)).reshape(-1)


def _z1_tables(sigma: np.ndarray) -> np.ndarray:
    return gaussian_cdf_tables(np.zeros(sigma.size), sigma, TAIL)


def _check_bundle(bundle: LatentBundle, model: CodecModel) -> None:
    if bundle.z1_hat.shape[0] != 1:
        raise ValueError("latent coding handles one image at a time")
    if bundle.z1_hat.shape[1] != model.arch.M or bundle.z2_hat.shape[1] != model.arch.Z:
        raise ValueError("bundle channel counts do not match the model")


def latent_bits(bundle: LatentBundle, model: CodecModel) -> Tuple[float, float]:
    """Ideal (z2, z1) code lengths in bits under the coder's quantized tables."""
    _check_bundle(bundle, model)
    prior = model.prior.table_model(bundle.z2_hat.shape)
    z2_bits = table_bits(prior.to_index(bundle.z2_hat.data.astype(np.int64)), prior.rows(), prior.cdf).sum()
    sym = _position_major(_residual_symbols(bundle))
    sigma = _position_major(bundle.sigma.data)
    z1_bits = table_bits(sym + TAIL, np.arange(sym.size), _z1_tables(sigma)).sum()
    return float(z2_bits), float(z1_bits)


def compress_latents(bundle: LatentBundle, model: CodecModel, orig_size: Tuple[int, int]) -> Bitstream:
    """Entropy-code inference-quantized latents into a container.

    ``orig_size`` is the (height, width) before padding.
    """
    _check_bundle(bundle, model)
    prior = model.prior.table_model(bundle.z2_hat.shape)
    z2_payload = encode(prior.to_index(bundle.z2_hat.data.astype(np.int64)), prior.rows(), prior.cdf)
    sym = _position_major(_residual_symbols(bundle))
    sigma = _position_major(bundle.sigma.data)
    z1_payload = encode(sym + TAIL, np.arange(sym.size), _z1_tables(sigma))
    f = model.arch.latent_factor
    h, w = bundle.z1_hat.shape[2] * f, bundle.z1_hat.shape[3] * f
    return Bitstream(
        context_enabled=model.arch.context_enabled, metric=model.metric, quality=int(model.quality[1:]),
        orig_width=int(orig_size[1]), orig_height=int(orig_size[0]), pad_width=w, pad_height=h,
        z2_payload=z2_payload, z1_payload=z1_payload,
    )


def check_compatible(bs: Bitstream, model: CodecModel) -> None:
    problems = []
    if bs.context_enabled != model.arch.context_enabled:
        problems.append(f"context model {'on' if bs.context_enabled else 'off'} in stream")
    if bs.metric != model.metric:
        problems.append(f"metric {bs.metric} in stream vs {model.metric} in checkpoint")
    if f"q{bs.quality}" != model.quality:
        problems.append(f"quality q{bs.quality} in stream vs {model.quality} in checkpoint")
    m = model.arch.pad_multiple
    if bs.pad_width % m or bs.pad_height % m or bs.pad_width == 0 or bs.pad_height == 0:
        problems.append(f"padded extent {bs.pad_width}x{bs.pad_height} is not a multiple of {m}")
    elif not (0 < bs.orig_width <= bs.pad_width and 0 < bs.orig_height <= bs.pad_height):
        problems.append("original extent exceeds the padded extent")
    if problems:
        raise BitstreamError("stream does not match the checkpoint: " + "; ".join(problems))


def decompress_latents(bs: Bitstream, model: CodecModel) -> Tuple[np.ndarray, np.ndarray]:
    """Recover (z2_hat, z1_hat) exactly as the encoder quantized them."""
    check_compatible(bs, model)
    arch = model.arch
    M, Z = arch.M, arch.Z
    h2, w2 = bs.pad_height // arch.pad_multiple, bs.pad_width // arch.pad_multiple
    h1, w1 = bs.pad_height // arch.latent_factor, bs.pad_width // arch.latent_factor

    prior = model.prior.table_model((1, Z, h2, w2))
    try:
        z2_idx = decode(bs.z2_payload, prior.rows(), prior.cdf)
    except DecodeError as exc:
        raise BitstreamError(f"hyper-latent payload: {exc}") from exc
    z2_hat = prior.from_index(z2_idx).reshape(1, Z, h2, w2).astype(model.dtype)
    hs = model.hyper_synthesis(z2_hat)
    if hs.shape[2:] != (h1, w1):
        raise BitstreamError("hyper-latent extent inconsistent with the declared image size")

    rows = np.arange(M)

    def emit(b, i, j, mu, sigma):
        return dec.decode(rows, _z1_tables(sigma)) - TAIL

    try:
        dec = RansDecoder(bs.z1_payload)
        _, z1_hat, _, _ = model.scan_latents(hs, emit)
        dec.finish()
    except DecodeError as exc:
        raise BitstreamError(f"main latent payload: {exc}") from exc
    return z2_hat, z1_hat


def encode_image(model: CodecModel, x_padded: np.ndarray) -> LatentBundle:
    """Denoising-branch analysis plus inference quantization of a padded image."""
    with no_grad():
        z0, z1 = model.analyze(Tensor(x_padded), "denoising")
        z2_hat, mu, sigma, z1_hat, z2 = model.hyper_path(z1, "infer_round")
    return LatentBundle(z0=z0, z1=z1, z2=z2, z1_hat=z1_hat, z2_hat=z2_hat, mu=mu, sigma=sigma)
