"""Differentiable likelihoods used for training, and their coder tables."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..tensor import F, Module, Tensor, no_grad
from .pmf import TAIL, TableModel, prior_cdf_tables

LIKELIHOOD_BOUND = 1e-9


def gaussian_likelihood(z_hat: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """P(z_hat) under N(mu, sigma^2) convolved with a unit uniform.

    Evaluated on the lower half-line (|z - mu|) where Phi is most accurate.
    """
    v = F.abs(F.sub(z_hat, mu))
    upper = F.normal_cdf(F.div(F.sub(0.5, v), sigma))
    lower = F.normal_cdf(F.div(F.sub(-0.5, v), sigma))
    return F.clamp(F.sub(upper, lower), LIKELIHOOD_BOUND, None)


class FactorizedPrior(Module):
    """Per-channel learned univariate density built from K monotone stages.

    Each stage is ``x -> softplus(H) x + b`` followed, except for the last, by
    ``x -> x + tanh(a) * tanh(x)``; positive matrices and ``tanh(a) > -1``
    keep the composition non-decreasing, and a final sigmoid maps it to a CDF.
    """

    def __init__(self, channels: int, rng: np.random.Generator, filters: Sequence[int] = (3, 3, 3),
                 init_scale: float = 10.0):
        self.channels = channels
        dims = (1, *filters, 1)
        scale = init_scale ** (1.0 / (len(dims) - 1))
        self.matrices, self.biases, self.factors = [], [], []
        for i in range(len(dims) - 1):
            init = np.log(np.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(Tensor(np.full((channels, dims[i + 1], dims[i]), init, np.float32),
                                        requires_grad=True))
            self.biases.append(Tensor(rng.uniform(-0.5, 0.5, (channels, dims[i + 1], 1)).astype(np.float32),
                                      requires_grad=True))
            if i < len(dims) - 2:
                self.factors.append(Tensor(np.zeros((channels, dims[i + 1], 1), np.float32), requires_grad=True))

    @property
    def stages(self) -> int:
        return len(self.matrices)

    def _named_parameters(self, prefix):
        for i, m in enumerate(self.matrices):
            yield f"{prefix}matrix{i}", m
            yield f"{prefix}bias{i}", self.biases[i]
            if i < len(self.factors):
                yield f"{prefix}factor{i}", self.factors[i]

    def logits_cdf(self, x: Tensor) -> Tensor:
        """(C, 1, n) values -> (C, 1, n) CDF logits."""
        n = x.shape[-1]
        for i, matrix in enumerate(self.matrices):
            x = F.matmul(F.softplus(matrix), x)
            x = F.add(x, F.broadcast_to(self.biases[i], (self.channels, matrix.shape[1], n)))
            if i < len(self.factors):
                gate = F.broadcast_to(F.tanh(self.factors[i]), x.shape)
                x = F.add(x, F.mul(gate, F.tanh(x)))
        return x

    def likelihood(self, z_hat: Tensor) -> Tensor:
        b, c, h, w = z_hat.shape
        if c != self.channels:
            raise ValueError(f"prior has {self.channels} channels, input has {c}")
        v = F.reshape(F.transpose(z_hat, (1, 0, 2, 3)), (c, 1, b * h * w))
        lower = self.logits_cdf(F.sub(v, 0.5))
        upper = self.logits_cdf(F.add(v, 0.5))
        # evaluate on the side of the median where the sigmoid is not saturated
        sign = Tensor(-np.sign(lower.data + upper.data).astype(v.dtype))
        lik = F.abs(F.sub(F.sigmoid(F.mul(sign, upper)), F.sigmoid(F.mul(sign, lower))))
        lik = F.clamp(lik, LIKELIHOOD_BOUND, None)
        return F.transpose(F.reshape(lik, (c, b, h, w)), (1, 0, 2, 3))

    def cdf(self, values: np.ndarray) -> np.ndarray:
        """CDF at real ``values`` of shape (C, n), without graph construction."""
        with no_grad():
            logits = self.logits_cdf(Tensor(np.asarray(values, np.float64)[:, None, :]))
        from scipy.special import expit
        return expit(logits.data[:, 0, :].astype(np.float64))

    def cdf_tables(self, tail: int = TAIL) -> np.ndarray:
        return prior_cdf_tables(self.cdf, self.channels, tail)

    def table_model(self, shape, tail: int = TAIL) -> TableModel:
        """Coder view for a (1, C, h, w) latent in raster order, channel-major."""
        _, c, h, w = shape
        rows = np.repeat(np.arange(c), h * w)
        return TableModel(self.cdf_tables(tail), rows, tail)
