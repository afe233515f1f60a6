"""Parameter containers and the handful of layers the codec needs."""
from __future__ import annotations

from collections import OrderedDict
from typing import Dict, Iterator, Tuple

import numpy as np

from .core import Tensor, leaky_relu
from .conv import conv2d, conv2d_transpose, masked_conv2d


class Module:
    """Attribute-registered parameters and submodules, in definition order."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        seen = set()
        for name, p in self._named_parameters(prefix):
            if id(p) in seen:
                continue
            seen.add(id(p))
            yield name, p

    def _named_parameters(self, prefix):
        for key, val in vars(self).items():
            full = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield full, val
            elif isinstance(val, Module):
                yield from val._named_parameters(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item._named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return OrderedDict((k, p.data) for k, p in self.named_parameters())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for k, p in own.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1, padding=None,
                 zero_init: bool = False):
        fan_in = cin * k * k
        bound = 1.0 / np.sqrt(fan_in)
        w = np.zeros((cout, cin, k, k), np.float32) if zero_init else _uniform(rng, (cout, cin, k, k), bound)
        b = np.zeros(cout, np.float32) if zero_init else _uniform(rng, (cout,), bound)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(b, requires_grad=True)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 2, padding: int = 1):
        bound = 1.0 / np.sqrt(cin * k * k / (stride * stride))
        self.weight = Tensor(_uniform(rng, (cin, cout, k, k), bound), requires_grad=True)
        self.bias = Tensor(_uniform(rng, (cout,), bound), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return conv2d_transpose(x, self.weight, self.bias, self.stride, self.padding)


class MaskedConv2d(Conv2d):
    """Type-A causal convolution, same spatial size."""

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator):
        if k % 2 == 0:
            raise ValueError(f"masked convolution needs an odd kernel, got {k}")
        super().__init__(cin, cout, k, rng)

    def forward(self, x):
        return masked_conv2d(x, self.weight, self.bias, mask_type="A")


class LeakyReLU(Module):
    def __init__(self, slope: float = 0.01):
        self.slope = slope

    def forward(self, x):
        return leaky_relu(x, self.slope)


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x
