import numpy as np
import pytest

from gradcheck import check_gradients, param
from noisecodec.tensor import (
    Adam,
    AdamState,
    ComputeGraph,
    NonFiniteError,
    Tensor,
    adam_step,
    backward,
    causal_mask,
    conv2d,
    conv2d_transpose,
    masked_conv2d,
    no_grad,
)
from noisecodec.tensor import core as F


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3))
        k = Tensor(np.ones((1, 1, 1, 1), np.float32))
        np.testing.assert_array_equal(conv2d(x, k).data, x.data)

    def test_hand_cross_correlation(self):
        x = Tensor(np.array([[1, 2], [3, 4]], np.float32).reshape(1, 1, 2, 2))
        k = Tensor(np.array([[1, 0], [0, 1]], np.float32).reshape(1, 1, 2, 2))
        out = conv2d(x, k)
        assert out.shape == (1, 1, 1, 1)
        assert out.data.item() == 5.0

    def test_stride_pad_shape(self):
        x = Tensor(np.zeros((1, 1, 8, 8), np.float32))
        k = Tensor(np.zeros((1, 1, 3, 3), np.float32))
        assert conv2d(x, k, stride=2, padding=1).shape == (1, 1, 4, 4)

    def test_channel_mismatch(self):
        x = Tensor(np.zeros((1, 2, 8, 8), np.float32))
        k = Tensor(np.zeros((1, 3, 3, 3), np.float32))
        with pytest.raises(ValueError, match="input channels"):
            conv2d(x, k)

    def test_window_does_not_fit(self):
        with pytest.raises(ValueError, match="does not fit"):
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))

    def test_non_finite_input(self):
        x = np.zeros((1, 1, 4, 4), np.float32)
        x[0, 0, 1, 1] = np.nan
        with pytest.raises(NonFiniteError):
            conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3), np.float32)))

    def test_matches_direct_loops(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 3, 7, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros_like(out)
        for n in range(2):
            for o in range(4):
                for i in range(out.shape[2]):
                    for j in range(out.shape[3]):
                        ref[n, o, i, j] = np.sum(xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]) + b[o]
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


class TestConvTranspose:
    def test_shape(self):
        x = Tensor(np.zeros((1, 1, 4, 4), np.float32))
        k = Tensor(np.zeros((1, 1, 3, 3), np.float32))
        assert conv2d_transpose(x, k, stride=2, padding=1).shape == (1, 1, 7, 7)

    def test_zero_input(self):
        rng = np.random.default_rng(0)
        k = Tensor(rng.standard_normal((2, 3, 4, 4)).astype(np.float32))
        out = conv2d_transpose(Tensor(np.zeros((1, 2, 5, 5), np.float32)), k, stride=2, padding=1)
        assert not out.data.any()

    @pytest.mark.parametrize("seed", range(20))
    def test_adjoint_identity(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.choice([1, 3, 4, 5]))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, k // 2 + 1))
        cin, cout = 2, int(rng.integers(1, 4))
        h = 5
        # choose the conv2d input extent so both directions agree on geometry
        ho = (h + 2 * pad - k) // stride + 1
        h_back = (ho - 1) * stride - 2 * pad + k
        a = rng.standard_normal((1, cin, h_back, h_back)).astype(np.float32)
        kern = rng.standard_normal((cout, cin, k, k)).astype(np.float32)
        fwd = conv2d(Tensor(a), Tensor(kern), stride=stride, padding=pad).data
        b = rng.standard_normal(fwd.shape).astype(np.float32)
        back = conv2d_transpose(Tensor(b), Tensor(kern), stride=stride, padding=pad).data
        lhs = float(np.sum(fwd.astype(np.float64) * b))
        rhs = float(np.sum(a.astype(np.float64) * back))
        assert abs(lhs - rhs) <= 1e-5 * max(1.0, abs(lhs), abs(rhs))


class TestMaskedConv:
    def test_mask_type_a(self):
        m = causal_mask(5, 5)
        assert m[:2].all() and m[2, :2].all()
        assert not m[2, 2:].any() and not m[3:].any()

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            masked_conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 4, 4))))

    def test_center_only_kernel_gives_zero(self):
        w = np.zeros((1, 1, 5, 5), np.float32)
        w[0, 0, 2, 2] = 3.0
        x = Tensor(np.random.default_rng(0).standard_normal((1, 1, 6, 6)).astype(np.float32))
        assert not masked_conv2d(x, Tensor(w)).data.any()

    def test_equals_premasked_conv(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((1, 2, 6, 6)))
        w = rng.standard_normal((3, 2, 5, 5))
        ref = conv2d(x, Tensor(w * causal_mask(5, 5)), padding=2).data
        np.testing.assert_array_equal(masked_conv2d(x, Tensor(w)).data, ref)

    @pytest.mark.parametrize("p", range(36))
    def test_raster_causality(self, p):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((1, 1, 6, 6))
        w = Tensor(rng.standard_normal((1, 1, 5, 5)))
        base = masked_conv2d(Tensor(x), w).data.reshape(-1)
        x2 = x.copy().reshape(-1)
        x2[p] += 10.0
        out = masked_conv2d(Tensor(x2.reshape(x.shape)), w).data.reshape(-1)
        assert np.all(out[: p + 1] == base[: p + 1])


class TestBackward:
    def test_bilinear(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((1, 2, 3, 3)))
        w = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
        backward(F.tsum(F.mul(x, w)))
        np.testing.assert_array_equal(w.grad, x.data)
        assert x.grad is None

    def test_non_scalar_loss(self):
        w = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            backward(F.mul(w, 2.0))

    def test_non_participating_gets_zero(self):
        a = Tensor(np.ones(3), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        ga, gb = backward(F.tsum(F.mul(a, 3.0)), [a, b])
        np.testing.assert_array_equal(ga, 3.0)
        np.testing.assert_array_equal(gb, 0.0)

    def test_graph_visits_each_node_once(self):
        a = Tensor(np.ones(3), requires_grad=True)
        b = F.mul(a, a)
        c = F.add(b, b)
        loss = F.tsum(F.add(c, b))
        graph = ComputeGraph(loss)
        ids = [id(n) for n in graph.nodes]
        assert len(ids) == len(set(ids))
        seqs = [n._seq for n in graph.nodes]
        assert seqs == sorted(seqs)
        backward(loss)
        np.testing.assert_allclose(a.grad, 6.0)

    def test_no_grad_builds_nothing(self):
        a = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            out = F.mul(a, 2.0)
        assert not out.requires_grad and out._parents == ()


class TestElementwise:
    def test_leaky_relu(self):
        out = F.leaky_relu(Tensor(np.array([-1.0, 2.0])), 0.01).data
        np.testing.assert_allclose(out, [-0.01, 2.0])

    def test_sigmoid_zero(self):
        assert F.sigmoid(Tensor(np.zeros(1))).data[0] == 0.5

    def test_mean(self):
        assert F.mean(Tensor(np.array([1.0, 2.0, 3.0, 4.0]))).data == 2.5

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            F.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))

    def test_scalar_broadcast(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        s = Tensor(np.array(2.0), requires_grad=True)
        backward(F.tsum(F.mul(a, s)))
        assert s.grad == 6.0
        np.testing.assert_array_equal(a.grad, 2.0)

    def test_clamp(self):
        np.testing.assert_array_equal(F.clamp(Tensor(np.array([-1.0, 0.5, 3.0])), 0, 1).data, [0, 0.5, 1])


class TestAdam:
    def test_zero_grad_leaves_params(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        adam_step([p], [np.zeros(2)], AdamState(lr=1e-3))
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step(self):
        # t=1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
        p = Tensor(np.array([0.0]), requires_grad=True)
        st = AdamState(lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8)
        adam_step([p], [np.array([1.0])], st)
        assert abs(p.data[0] - (-1e-4 / (1 + 1e-8))) < 1e-15
        assert abs(p.data[0] + 1e-4) < 1e-9
        assert st.t == 1

    def test_identical_params_identical_updates(self):
        a = Tensor(np.array([0.3, 0.1]), requires_grad=True)
        b = Tensor(np.array([0.3, 0.1]), requires_grad=True)
        st = AdamState(lr=1e-2)
        for _ in range(5):
            g = np.array([0.7, -0.2])
            adam_step([a, b], [g, g.copy()], st)
        np.testing.assert_array_equal(a.data, b.data)

    def test_shape_mismatch(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ValueError, match="gradient shape"):
            adam_step([p], [np.zeros(2)], AdamState())

    def test_step_counter(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        opt = Adam([p], lr=0.1)
        for t in range(1, 4):
            p.grad = np.ones(2)
            opt.step()
            assert opt.state.t == t


# -- finite-difference property over random configurations ------------------

def _away_from_zero(a, margin=0.2):
    return np.where(np.abs(a) < margin, np.sign(a + 1e-12) * margin, a)


def _op_case(name, rng, dtype):
    """Build (inputs, loss_fn) for one op at a random shape."""
    b, c = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    h, w = int(rng.integers(3, 7)), int(rng.integers(3, 7))
    shape = (b, c, h, w)
    x = param(shape, rng, dtype)
    weight = Tensor(rng.standard_normal(shape).astype(dtype))

    if name in ("abs", "relu", "leaky_relu"):
        x.data[...] = _away_from_zero(x.data)
    if name == "clamp":
        x.data[...] = np.where(np.abs(np.abs(x.data) - 0.5) < 0.1, x.data + 0.25, x.data)
    if name in ("log", "log2", "sqrt", "pow"):
        x.data[...] = np.abs(x.data) + 0.5
    y = param(shape, rng, dtype)
    if name == "div":
        y.data[...] = np.abs(y.data) + 0.5

    fns = {
        "add": lambda: F.add(x, y),
        "sub": lambda: F.sub(x, y),
        "mul": lambda: F.mul(x, y),
        "div": lambda: F.div(x, y),
        "abs": lambda: F.abs(x),
        "relu": lambda: F.relu(x),
        "leaky_relu": lambda: F.leaky_relu(x, 0.1),
        "sigmoid": lambda: F.sigmoid(x),
        "tanh": lambda: F.tanh(x),
        "softplus": lambda: F.softplus(x),
        "exp": lambda: F.exp(F.mul(x, 0.5)),
        "log": lambda: F.log(x),
        "log2": lambda: F.log2(x),
        "sqrt": lambda: F.sqrt(x),
        "pow": lambda: F.power(x, 0.7),
        "clamp": lambda: F.clamp(x, -0.5, 0.5),
        "normal_cdf": lambda: F.normal_cdf(x),
        "mean": lambda: F.broadcast_to(F.mean(x, axis=(2, 3), keepdims=True), shape),
        "sum": lambda: F.broadcast_to(F.tsum(x, axis=1, keepdims=True), shape),
        "transpose": lambda: F.transpose(F.transpose(x, (0, 2, 3, 1)), (0, 3, 1, 2)),
        "concat": lambda: F.getitem(F.concat([x, y], axis=1), (slice(None), slice(c // 2, c // 2 + c))),
    }
    ins = [x, y] if name in ("add", "sub", "mul", "div", "concat") else [x]
    fn = fns[name]
    return ins, lambda: F.tsum(F.mul(fn(), weight))


def _conv_case(name, rng, dtype):
    b = int(rng.integers(1, 3))
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = int(rng.choice([1, 3, 5])) if name != "conv2d_transpose" else int(rng.choice([2, 3, 4]))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, k // 2 + 1))
    h = int(rng.integers(k, k + 5))
    x = param((b, cin, h, h), rng, dtype)
    bias = param((cout,), rng, dtype)
    if name == "conv2d":
        w = param((cout, cin, k, k), rng, dtype, 0.5)
        fn = lambda: conv2d(x, w, bias, stride, pad)
    elif name == "conv2d_transpose":
        w = param((cin, cout, k, k), rng, dtype, 0.5)
        fn = lambda: conv2d_transpose(x, w, bias, stride, pad)
    else:
        k = int(rng.choice([3, 5]))
        w = param((cout, cin, k, k), rng, dtype, 0.5)
        fn = lambda: masked_conv2d(x, w, bias)
    with no_grad():
        out_shape = fn().shape
    r = Tensor(rng.standard_normal(out_shape).astype(dtype))
    return [x, w, bias], lambda: F.tsum(F.mul(fn(), r))


ELEMENTWISE = ["add", "sub", "mul", "div", "abs", "relu", "leaky_relu", "sigmoid", "tanh", "softplus", "exp",
               "log", "log2", "sqrt", "pow", "clamp", "normal_cdf", "mean", "sum", "transpose", "concat"]
CONVS = ["conv2d", "conv2d_transpose", "masked_conv2d"]


@pytest.mark.parametrize("dtype,tol,step", [(np.float64, 1e-5, 1e-6), (np.float32, 1e-3, 1e-2)])
@pytest.mark.parametrize("op", ELEMENTWISE + CONVS)
def test_gradient_property(op, dtype, tol, step):
    """>= 100 random shapes/configs per op, checked against central differences."""
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed * 131 + len(op))
        case = _conv_case if op in CONVS else _op_case
        ins, fn = case(op, rng, dtype)
        worst = max(worst, check_gradients(fn, ins, max_entries=6, rng=rng, step_rel=0.0, step_min=step))
    assert worst <= tol, f"{op}: worst relative error {worst:.3e}"
