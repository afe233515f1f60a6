"""Two-branch joint denoising / compression network.

The analysis transform is split in two halves, ``g_a0`` (image -> 1/4
resolution features) and ``g_a1`` (-> 1/16 resolution latent). The guidance
branch runs them on the clean image; the denoising branch runs the very same
module objects on the noisy image and adds a plug-in residual denoiser after
each half. A scale hyperprior with a causal context model predicts a mean and
scale for every latent element.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from ..entropy.models import FactorizedPrior, gaussian_likelihood
from ..entropy.pmf import SIGMA_FLOOR, TAIL, round_half_away
from ..tensor import F, Conv2d, LeakyReLU, MaskedConv2d, Module, Sequential, Tensor, causal_mask, no_grad
from .layers import SLOPE, AttentionBlock, Denoiser, DownStage, UpStage, upsampler

QUALITIES = ("q1", "q2", "q3", "q4", "q5", "q6")
METRICS = ("mse", "msssim")


@dataclass
class ArchConfig:
    N: int = 128
    latent_channels: Optional[int] = None
    hyper_channels: Optional[int] = None
    analysis_strides: Tuple[int, int, int, int] = (2, 2, 2, 2)
    hyper_strides: Tuple[int, int] = (2, 2)
    context_kernel: int = 5
    context_enabled: bool = True
    prior_filters: Tuple[int, ...] = (3, 3, 3)

    def __post_init__(self):
        self.analysis_strides = tuple(int(s) for s in self.analysis_strides)
        self.hyper_strides = tuple(int(s) for s in self.hyper_strides)
        self.prior_filters = tuple(int(f) for f in self.prior_filters)
        if self.N <= 0:
            raise ValueError("N must be positive")
        if len(self.analysis_strides) != 4 or len(self.hyper_strides) != 2:
            raise ValueError("stride plan needs four analysis and two hyper stages")
        if any(s not in (1, 2) for s in self.analysis_strides + self.hyper_strides):
            raise ValueError("strides must be 1 or 2")
        if self.context_kernel % 2 == 0:
            raise ValueError("context kernel extent must be odd")

    @property
    def M(self) -> int:
        return self.latent_channels or self.N

    @property
    def Z(self) -> int:
        return self.hyper_channels or self.N

    @property
    def latent_factor(self) -> int:
        return math.prod(self.analysis_strides)

    @property
    def pad_multiple(self) -> int:
        return self.latent_factor * math.prod(self.hyper_strides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["analysis_strides"] = list(self.analysis_strides)
        d["hyper_strides"] = list(self.hyper_strides)
        d["prior_filters"] = list(self.prior_filters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)


@dataclass
class LatentBundle:
    z0: Tensor
    z1: Tensor
    z2: Tensor
    z1_hat: Tensor
    z2_hat: Tensor
    mu: Tensor
    sigma: Tensor
    lik1: Optional[Tensor] = None
    lik2: Optional[Tensor] = None
    x_hat: Optional[Tensor] = None
    z0_gt: Optional[Tensor] = None
    z1_gt: Optional[Tensor] = None


def pad_reflect(x: np.ndarray, multiple: int = 64):
    """Reflect-pad the bottom/right of a (..., H, W) array to a multiple.

    Returns the padded array and the original (H, W). Inputs shorter than the
    padding amount are reflected repeatedly (symmetric tiling).
    """
    h, w = x.shape[-2:]
    if h < 1 or w < 1:
        raise ValueError("image must be at least 1x1")
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return x.copy(), (h, w)
    widths = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
    mode = "reflect" if (h > 1 and w > 1 and ph < h and pw < w) else "symmetric"
    return np.pad(x, widths, mode=mode), (h, w)


def crop(x, size: Tuple[int, int]):
    h, w = size
    return x[..., :h, :w]


def quantize(z, mode: str, mu=None, rng: Optional[np.random.Generator] = None):
    """Noise surrogate (``train_noise``) or rounding about ``mu`` (``infer_round``).

    ``train_noise`` works on tensors and keeps the graph; ``infer_round``
    works on arrays and returns ``round(z - mu) + mu`` with ties away from zero.
    """
    if mode == "train_noise":
        if rng is None:
            raise ValueError("train_noise quantization needs a generator")
        u = rng.uniform(-0.5, 0.5, size=z.shape).astype(z.dtype)
        return F.add(z, Tensor(u))
    if mode == "infer_round":
        z = np.asarray(z.data if isinstance(z, Tensor) else z)
        if mu is None:
            return round_half_away(z).astype(z.dtype)
        mu = np.asarray(mu.data if isinstance(mu, Tensor) else mu)
        if mu.shape != z.shape:
            raise ValueError(f"mean shape {mu.shape} != latent shape {z.shape}")
        return (round_half_away(z - mu) + mu).astype(z.dtype)
    raise ValueError(f"unknown quantization mode {mode!r}")


class CodecModel(Module):
    def __init__(self, arch: ArchConfig, quality: str = "q1", metric: str = "mse", seed: int = 0):
        if quality not in QUALITIES:
            raise ValueError(f"quality must be one of {QUALITIES}")
        if metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        self.arch = arch
        self.quality = quality
        self.metric = metric
        rng = np.random.default_rng(seed)
        N, M, Z = arch.N, arch.M, arch.Z
        s0, s1, s2, s3 = arch.analysis_strides
        h0, h1 = arch.hyper_strides

        self.g_a0 = Sequential(DownStage(3, N, s0, rng), DownStage(N, N, s1, rng))
        self.g_a1 = Sequential(DownStage(N, N, s2, rng), DownStage(N, M, s3, rng), AttentionBlock(M, rng))
        self.d_0 = Denoiser(N, rng)
        self.d_1 = Denoiser(M, rng)
        self.g_s = Sequential(AttentionBlock(M, rng), UpStage(M, N, s3, rng), UpStage(N, N, s2, rng),
                              UpStage(N, N, s1, rng), UpStage(N, 3, s0, rng))
        self.h_a = Sequential(Conv2d(M, N, 3, rng), LeakyReLU(SLOPE),
                              Conv2d(N, N, 3, rng, stride=h0, padding=1), LeakyReLU(SLOPE),
                              Conv2d(N, Z, 3, rng, stride=h1, padding=1))
        self.h_s = Sequential(upsampler(Z, N, h1, rng), LeakyReLU(SLOPE),
                              upsampler(N, N, h0, rng), LeakyReLU(SLOPE),
                              Conv2d(N, 2 * M, 3, rng))
        head_in = 4 * M if arch.context_enabled else 2 * M
        self.context = MaskedConv2d(M, 2 * M, arch.context_kernel, rng) if arch.context_enabled else None
        self.entropy_head = Sequential(Conv2d(head_in, 2 * M, 1, rng), LeakyReLU(SLOPE),
                                       Conv2d(2 * M, 2 * M, 1, rng))
        self.prior = FactorizedPrior(Z, rng, arch.prior_filters)

    @property
    def dtype(self):
        return self.g_a0.layers[0].conv.weight.dtype

    # -- shapes ---------------------------------------------------------------
    def check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected a (B, 3, H, W) image, got {x.shape}")
        m = self.arch.pad_multiple
        if x.shape[2] % m or x.shape[3] % m:
            raise ValueError(f"image extent {x.shape[2]}x{x.shape[3]} must be a multiple of {m}; pad it first")

    # -- transforms -----------------------------------------------------------
    def analyze(self, x: Tensor, branch: str = "denoising") -> Tuple[Tensor, Tensor]:
        """Features at the 1/4 and 1/16 levels for the given branch."""
        self.check_input(x)
        if branch == "guidance":
            z0 = self.g_a0(x)
            return z0, self.g_a1(z0)
        if branch != "denoising":
            raise ValueError(f"unknown branch {branch!r}")
        g0 = self.g_a0(x)
        z0 = F.add(g0, self.d_0(g0))
        g1 = self.g_a1(z0)
        return z0, F.add(g1, self.d_1(g1))

    def entropy_parameters(self, hs: Tensor, z1_hat: Tensor) -> Tuple[Tensor, Tensor]:
        M = self.arch.M
        if hs.shape[2:] != z1_hat.shape[2:]:
            raise ValueError(f"hyper synthesis output {hs.shape} does not match latent {z1_hat.shape}")
        feats = F.concat([hs, self.context(z1_hat)], axis=1) if self.context is not None else hs
        mu, raw = F.split(self.entropy_head(feats), [M, M], axis=1)
        return mu, F.add(F.softplus(raw), SIGMA_FLOOR)

    def hyper_path(self, z1: Tensor, mode: str = "train_noise", rng=None):
        """(z2_hat, mu, sigma, z1_hat, z2) for a latent z1.

        In ``infer_round`` mode with the context model on, z1 is quantized
        position by position in raster order, since each mean depends on the
        already-quantized neighbours.
        """
        if z1.ndim != 4 or z1.shape[1] != self.arch.M:
            raise ValueError(f"latent must be (B, {self.arch.M}, h, w), got {z1.shape}")
        z2 = self.h_a(z1)
        if mode == "train_noise":
            z2_hat = quantize(z2, mode, rng=rng)
            hs = self.h_s(z2_hat)
            z1_hat = quantize(z1, mode, rng=rng)
            mu, sigma = self.entropy_parameters(hs, z1_hat)
            return z2_hat, mu, sigma, z1_hat, z2
        if mode != "infer_round":
            raise ValueError(f"unknown quantization mode {mode!r}")
        with no_grad():
            z2_sym = np.clip(round_half_away(z2.data), -TAIL, TAIL).astype(z2.dtype)
            hs = self.h_s(Tensor(z2_sym)).data
            z1d = z1.data

            def emit(b, i, j, mu_vec, sigma_vec):
                return np.clip(round_half_away(z1d[b, :, i, j] - mu_vec), -TAIL, TAIL)

            _, z1_hat, mu, sigma = self.scan_latents(hs, emit)
        return Tensor(z2_sym), Tensor(mu), Tensor(sigma), Tensor(z1_hat), z2

    def synthesize(self, z1_hat: Tensor, size: Optional[Tuple[int, int]] = None, clamp: bool = False) -> Tensor:
        if z1_hat.ndim != 4 or z1_hat.shape[1] != self.arch.M:
            raise ValueError(f"latent must be (B, {self.arch.M}, h, w), got {z1_hat.shape}")
        x_hat = self.g_s(z1_hat)
        if size is not None:
            x_hat = F.getitem(x_hat, (slice(None), slice(None), slice(0, size[0]), slice(0, size[1])))
        if clamp:
            x_hat = F.clamp(x_hat, 0.0, 1.0)
        return x_hat

    # -- training forward -------------------------------------------------------
    def forward_train(self, x: Tensor, rng: np.random.Generator, branch: str = "guidance",
                      x_guide: Optional[Tensor] = None) -> LatentBundle:
        """Noise-surrogate forward pass with likelihoods and reconstruction.

        With ``x_guide`` (the clean image) the guidance features are computed
        under ``no_grad`` and returned as fixed targets.
        """
        z0, z1 = self.analyze(x, branch)
        z0_gt = z1_gt = None
        if x_guide is not None:
            with no_grad():
                z0_gt, z1_gt = self.analyze(x_guide, "guidance")
        z2_hat, mu, sigma, z1_hat, z2 = self.hyper_path(z1, "train_noise", rng)
        return LatentBundle(
            z0=z0, z1=z1, z2=z2, z1_hat=z1_hat, z2_hat=z2_hat, mu=mu, sigma=sigma,
            lik1=gaussian_likelihood(z1_hat, mu, sigma),
            lik2=self.prior.likelihood(z2_hat),
            x_hat=self.synthesize(z1_hat),
            z0_gt=z0_gt, z1_gt=z1_gt,
        )

    # -- sequential inference -----------------------------------------------------
    def _head_np(self, feats: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Entropy head on a (C,) feature vector; returns (mu, sigma)."""
        c1, c2 = self.entropy_head.layers[0], self.entropy_head.layers[2]
        h = c1.weight.data[:, :, 0, 0] @ feats + c1.bias.data
        h = np.where(h > 0, h, SLOPE * h).astype(h.dtype)
        out = c2.weight.data[:, :, 0, 0] @ h + c2.bias.data
        M = self.arch.M
        sigma = (np.logaddexp(0, out[M:]) + SIGMA_FLOOR).astype(out.dtype)
        return out[:M], sigma

    def scan_latents(self, hs: np.ndarray, emit: Callable):
        """Walk latent positions in raster order, predicting (mu, sigma) at each.

        ``emit(b, i, j, mu, sigma)`` returns the integer residual symbols for
        that position; the quantized latent there becomes ``symbols + mu``.
        Encoder and decoder both go through this loop, which keeps their
        predictions bit-identical.
        """
        M = self.arch.M
        b, _, h, w = hs.shape
        dtype = hs.dtype
        sym = np.zeros((b, M, h, w), np.int64)
        mu = np.zeros((b, M, h, w), dtype)
        sigma = np.zeros((b, M, h, w), dtype)
        if self.context is None:
            with no_grad():
                mu_t, sigma_t = self.entropy_parameters(Tensor(hs), Tensor(np.zeros((b, M, h, w), dtype)))
            mu, sigma = mu_t.data, sigma_t.data
            for bi in range(b):
                for i in range(h):
                    for j in range(w):
                        sym[bi, :, i, j] = emit(bi, i, j, mu[bi, :, i, j], sigma[bi, :, i, j])
            return sym, (sym + mu).astype(dtype), mu, sigma

        k = self.arch.context_kernel
        p = k // 2
        wm = (self.context.weight.data * causal_mask(k, k)).reshape(2 * M, -1)
        bm = self.context.bias.data
        z1_hat = np.zeros((b, M, h, w), dtype)
        for bi in range(b):
            padded = np.zeros((M, h + 2 * p, w + 2 * p), dtype)
            for i in range(h):
                for j in range(w):
                    ctx = wm @ padded[:, i : i + k, j : j + k].reshape(-1) + bm
                    m, s = self._head_np(np.concatenate([hs[bi, :, i, j], ctx]))
                    q = emit(bi, i, j, m, s)
                    sym[bi, :, i, j] = q
                    mu[bi, :, i, j] = m
                    sigma[bi, :, i, j] = s
                    padded[:, i + p, j + p] = (q + m).astype(dtype)
            z1_hat[bi] = padded[:, p : p + h, p : p + w]
        return sym, z1_hat, mu, sigma

    def hyper_synthesis(self, z2_hat: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.h_s(Tensor(z2_hat)).data

    # -- parameter groups ---------------------------------------------------------
    def denoiser_parameters(self):
        return self.d_0.parameters() + self.d_1.parameters()

    def header(self) -> dict:
        return {"arch": self.arch.to_dict(), "quality": self.quality, "metric": self.metric}
