"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable op records its parents and a closure mapping the output
gradient to parent gradients. Tensors carry a global creation counter, so the
reachable subgraph sorted by that counter is already topologically ordered.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy import special

_counter = itertools.count()
_grad_enabled = True
CHECK_FINITE = True


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf from its inputs."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._seq = next(_counter)
        self.op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self, inputs: Optional[Sequence["Tensor"]] = None):
        return backward(self, inputs)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: non-finite values in output")


def _make(data: np.ndarray, parents: Iterable[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op result, attaching graph links only when needed."""
    _check_finite(data, op)
    out = Tensor(data)
    out.op = op
    parents = tuple(parents)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


# -- graph & backward ------------------------------------------------------
class ComputeGraph:
    """The subgraph reachable from an output, in creation order.

    Creation order is a valid topological order because an op's output is
    always created after its inputs.
    """

    def __init__(self, output: Tensor):
        seen = {id(output): output}
        stack = [output]
        while stack:
            t = stack.pop()
            for p in t._parents:
                if p.requires_grad and id(p) not in seen:
                    seen[id(p)] = p
                    stack.append(p)
        self.nodes = sorted(seen.values(), key=lambda t: t._seq)
        self.output = output

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, inputs: Optional[Sequence[Tensor]] = None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    If ``inputs`` is given, each of them ends up with a gradient buffer
    (zeros when it does not participate) and the list of buffers is returned.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if inputs is not None:
        for t in inputs:
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)
    if not loss.requires_grad:
        return [t.grad for t in inputs] if inputs is not None else None
    graph = ComputeGraph(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=node.dtype, copy=True)
            else:
                node.grad += g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise RuntimeError(f"{node.op}: gradient shape {pg.shape} != input shape {p.shape}")
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return [t.grad for t in inputs] if inputs is not None else None


# -- binary elementwise ---------------------------------------------------
def _binary_operands(a, b, op: str):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (only scalar broadcasting is supported)")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    out = a.data / b.data

    def bw(g):
        gb = g / b.data
        return _unbroadcast(gb, a.shape), _unbroadcast(-gb * out, b.shape)

    return _make(out, (a, b), bw, "div")


# -- unary elementwise ----------------------------------------------------
def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def power(x: Tensor, p: float) -> Tensor:
    """x ** p for a constant exponent; the gradient at x == 0 is taken as 0."""
    p = float(p)
    out = np.power(x.data, p)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * np.power(x.data, p - 1.0)
        d = np.where(x.data == 0, 0.0 if p != 1.0 else 1.0, d).astype(x.dtype)
        return (g * d,)

    return _make(out, (x,), bw, "pow")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def log2(x: Tensor) -> Tensor:
    inv_ln2 = 1.0 / np.log(2.0)
    return _make(np.log2(x.data), (x,), lambda g: ((g * (inv_ln2 / x.data)).astype(x.dtype),), "log2")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    pos = x.data > 0
    scale = np.where(pos, 1.0, slope).astype(x.dtype)
    return _make(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    out = special.expit(x.data)
    return _make(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1 - out * out),), "tanh")


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0, x.data).astype(x.dtype)
    return _make(out, (x,), lambda g: (g * special.expit(x.data),), "softplus")


def clamp(x: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """Clip to [lo, hi]; gradient passes where the input lies inside the range."""
    out = np.clip(x.data, lo, hi)
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x.data >= lo
    if hi is not None:
        inside &= x.data <= hi
    return _make(out, (x,), lambda g: (g * inside,), "clamp")


_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def normal_cdf(x: Tensor) -> Tensor:
    """Standard normal CDF, Phi(x)."""
    out = special.ndtr(x.data)
    return _make(out, (x,),
                 lambda g: (g * (_INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)).astype(x.dtype),),
                 "normal_cdf")


# -- reductions -----------------------------------------------------------
def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.asarray(g).reshape((1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)
    return _make(out, (x,),
                 lambda g: (np.ascontiguousarray(_expand_reduced(g, x.shape, axis, keepdims)),), "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims), dtype=x.dtype)
    count = x.size // max(out.size, 1)
    return _make(out, (x,),
                 lambda g: (np.ascontiguousarray(_expand_reduced(g, x.shape, axis, keepdims)) / count,),
                 "mean")


def prod(xs: Sequence[Tensor]) -> Tensor:
    out = xs[0]
    for t in xs[1:]:
        out = mul(out, t)
    return out


# -- shape ops --------------------------------------------------------------
def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast; the gradient is summed back over expanded axes."""
    shape = tuple(shape)
    if len(shape) != x.ndim:
        raise ValueError(f"broadcast_to: rank mismatch {x.shape} -> {shape}")
    axes = tuple(i for i, (a, b) in enumerate(zip(x.shape, shape)) if a != b)
    for i in axes:
        if x.shape[i] != 1:
            raise ValueError(f"broadcast_to: cannot expand axis {i} of {x.shape} to {shape}")
    out = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    return _make(out, (x,), lambda g: (g.sum(axis=axes, keepdims=True),), "broadcast_to")


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for i in range(len(xs)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            out.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(out)

    return _make(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), bw, "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> list:
    bounds = np.cumsum([0] + list(sizes))
    if bounds[-1] != x.shape[axis]:
        raise ValueError(f"split: sizes {sizes} do not cover axis of extent {x.shape[axis]}")
    out = []
    for i in range(len(sizes)):
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
        out.append(getitem(x, tuple(sl)))
    return out


def getitem(x: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        full[idx] += g
        return (full,)

    return _make(np.ascontiguousarray(x.data[idx]), (x,), bw, "getitem")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over matching leading dimensions."""
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _make(out, (a, b), bw, "matmul")


def where_const(cond: np.ndarray, x: Tensor, y: Tensor) -> Tensor:
    """Select elementwise between two same-shape tensors with a fixed mask."""
    if x.shape != y.shape or cond.shape != x.shape:
        raise ValueError("where_const: shape mismatch")
    return _make(np.where(cond, x.data, y.data), (x, y),
                 lambda g: (g * cond, g * ~cond), "where")
