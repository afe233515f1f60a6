"""Building blocks of the reduced anchor network."""
from __future__ import annotations

import numpy as np

from ..tensor import F, Conv2d, ConvTranspose2d, Module, Tensor

SLOPE = 0.01


class ResidualBlock(Module):
    """x + conv(leaky(conv(leaky(x)))) with two 3x3 convolutions."""

    def __init__(self, ch: int, rng: np.random.Generator):
        self.conv1 = Conv2d(ch, ch, 3, rng)
        self.conv2 = Conv2d(ch, ch, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv1(F.leaky_relu(x, SLOPE))
        y = self.conv2(F.leaky_relu(y, SLOPE))
        return F.add(x, y)


class BottleneckUnit(Module):
    """1x1 -> 3x3 -> 1x1 bottleneck with identity skip."""

    def __init__(self, ch: int, rng: np.random.Generator):
        mid = max(ch // 2, 1)
        self.reduce = Conv2d(ch, mid, 1, rng)
        self.conv = Conv2d(mid, mid, 3, rng)
        self.expand = Conv2d(mid, ch, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        y = F.relu(self.reduce(x))
        y = F.relu(self.conv(y))
        return F.relu(F.add(x, self.expand(y)))


class AttentionBlock(Module):
    """Trunk gated by a sigmoid mask branch, with identity skip.

    ``residual`` returns only the gated term (no skip); the plug-in denoisers
    use it so their output can be exactly zero at initialisation.
    """

    def __init__(self, ch: int, rng: np.random.Generator, zero_out: bool = False):
        self.trunk = BottleneckUnit(ch, rng)
        self.mask = BottleneckUnit(ch, rng)
        self.mask_out = Conv2d(ch, ch, 1, rng)
        self.out = Conv2d(ch, ch, 1, rng, zero_init=True) if zero_out else None

    def residual(self, x: Tensor) -> Tensor:
        gated = F.mul(self.trunk(x), F.sigmoid(self.mask_out(self.mask(x))))
        return self.out(gated) if self.out is not None else gated

    def forward(self, x: Tensor) -> Tensor:
        return F.add(x, self.residual(x))


class Denoiser(Module):
    """Plug-in feature denoiser: the residual of one attention block.

    Its last 1x1 convolution starts at zero, so a fresh denoiser is the zero map.
    """

    def __init__(self, ch: int, rng: np.random.Generator):
        self.block = AttentionBlock(ch, rng, zero_out=True)

    def forward(self, x: Tensor) -> Tensor:
        return self.block.residual(x)


class DownStage(Module):
    """Strided 3x3 convolution followed by a residual block."""

    def __init__(self, cin: int, cout: int, stride: int, rng: np.random.Generator):
        self.conv = Conv2d(cin, cout, 3, rng, stride=stride, padding=1)
        self.res = ResidualBlock(cout, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.res(self.conv(x))


def upsampler(cin: int, cout: int, stride: int, rng: np.random.Generator) -> Module:
    if stride == 1:
        return Conv2d(cin, cout, 3, rng)
    if stride != 2:
        raise ValueError(f"unsupported upsampling stride {stride}")
    return ConvTranspose2d(cin, cout, 4, rng, stride=2, padding=1)


class UpStage(Module):
    """Residual block followed by a 2x transposed convolution."""

    def __init__(self, cin: int, cout: int, stride: int, rng: np.random.Generator):
        self.res = ResidualBlock(cin, rng)
        self.up = upsampler(cin, cout, stride, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.up(self.res(x))
