"""Central finite-difference oracle for autodiff checks."""
import numpy as np

from noisecodec.tensor import Tensor, backward, no_grad


def rel_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(a)), np.max(np.abs(b))))


def numeric_grad(fn, tensors, index_sets, step_rel=1e-3, step_min=1e-6):
    """Central differences of scalar ``fn()`` wrt selected entries of each tensor."""
    out = []
    for t, idx in zip(tensors, index_sets):
        flat = t.data.reshape(-1)
        g = np.zeros(len(idx))
        for n, i in enumerate(idx):
            orig = flat[i].copy()
            h = max(step_rel * abs(float(orig)), step_min)
            flat[i] = orig + h
            with no_grad():
                up = float(fn().data)
            flat[i] = orig - h
            with no_grad():
                down = float(fn().data)
            flat[i] = orig
            g[n] = (up - down) / (2 * h)
        out.append(g)
    return out


def check_gradients(fn, tensors, max_entries=40, rng=None, step_rel=1e-3, step_min=1e-6):
    """Return the worst relative error between autodiff and finite differences."""
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    loss = fn()
    backward(loss, tensors)
    index_sets = []
    for t in tensors:
        n = t.size
        index_sets.append(rng.choice(n, size=min(n, max_entries), replace=False))
    numeric = numeric_grad(fn, tensors, index_sets, step_rel, step_min)
    worst = 0.0
    for t, idx, num in zip(tensors, index_sets, numeric):
        worst = max(worst, rel_error(t.grad.reshape(-1)[idx], num))
    return worst


def param(shape, rng, dtype=np.float64, scale=1.0):
    return Tensor((rng.standard_normal(shape) * scale).astype(dtype), requires_grad=True)
