import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mobileutr import ops
from mobileutr.errors import ConfigurationError, NumericError, StateError, UsageError
from mobileutr.gradcheck import check_gradients
from mobileutr.tensor import Parameter, Tape, Tensor


def rand(rng, *shape):
    return Parameter(rng.standard_normal(shape))


def inner(a, b):
    return float(np.sum(a * b))


# ---------------------------------------------------------------- conv2d

def test_conv2d_all_ones_padded():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = ops.conv2d(x, w, padding=1).data[0, 0]
    assert out[1, 1] == 9.0
    assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4.0
    assert out[0, 1] == 6.0


@pytest.mark.parametrize("k", [3, 5, 7])
def test_depthwise_delta_kernel_is_identity(k):
    rng = np.random.default_rng(k)
    x = Tensor(rng.standard_normal((2, 5, 9, 9)))
    w = np.zeros((5, 1, k, k))
    w[:, 0, k // 2, k // 2] = 1.0
    out = ops.conv2d(x, Tensor(w), padding=(k - 1) // 2, groups=5)
    assert np.array_equal(out.data, x.data)


def test_conv2d_output_size_formula():
    x = Tensor(np.zeros((1, 2, 11, 8)))
    w = Tensor(np.zeros((4, 2, 3, 3)))
    out = ops.conv2d(x, w, stride=2, padding=1)
    assert out.shape == (1, 4, (11 + 2 - 3) // 2 + 1, (8 + 2 - 3) // 2 + 1)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 4, 5, 6))
    w = rng.standard_normal((6, 2, 3, 3))
    out = ops.conv2d(Tensor(x), Tensor(w), padding=1, groups=2).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for n in range(2):
        for o in range(6):
            g = o // 3
            for i in range(5):
                for j in range(6):
                    ref[n, o, i, j] = np.sum(xp[n, 2 * g:2 * g + 2, i:i + 3, j:j + 3] * w[o])
    assert np.allclose(out, ref, atol=1e-12)


def test_conv2d_errors():
    with pytest.raises(ConfigurationError):
        ops.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((4, 1, 3, 3))), groups=2)
    with pytest.raises(ConfigurationError):
        ops.conv2d(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros((1, 2, 5, 5))))
    with pytest.raises(NumericError):
        ops.conv2d(Tensor(np.full((1, 1, 2, 2), np.inf)), Tensor(np.ones((1, 1, 1, 1))))


@pytest.mark.parametrize("groups", [1, 4])
def test_conv2d_gradients(groups):
    rng = np.random.default_rng(10 + groups)
    x = rand(rng, 2, 4, 6, 6)
    w = rand(rng, 4, 4 // groups, 3, 3)
    b = rand(rng, 4)
    c = rng.standard_normal((2, 4, 6, 6))
    rep = check_gradients("conv2d", lambda: (ops.conv2d(x, w, b, padding=1, groups=groups) * c).sum(),
                          [("x", x), ("w", w), ("b", b)])
    assert rep.max_error < 1e-6, rep.errors


def test_conv2d_strided_gradients():
    rng = np.random.default_rng(5)
    x = rand(rng, 2, 3, 7, 7)
    w = rand(rng, 2, 3, 3, 3)
    c = rng.standard_normal((2, 2, 4, 4))
    rep = check_gradients("conv2d", lambda: (ops.conv2d(x, w, stride=2, padding=1) * c).sum(),
                          [("x", x), ("w", w)])
    assert rep.max_error < 1e-6, rep.errors


# ---------------------------------------------------------------- transposed conv

def test_conv_transpose_single_tap():
    out = ops.conv2d_transpose(Tensor(np.full((1, 1, 1, 1), 2.5)), Tensor(np.ones((1, 1, 2, 2))), stride=2)
    assert out.shape == (1, 1, 2, 2)
    assert np.all(out.data == 2.5)


@pytest.mark.parametrize("seed", range(3))
def test_conv_transpose_is_adjoint_of_strided_conv(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 8, 6))
    w = rng.standard_normal((5, 3, 2, 2))
    y = rng.standard_normal((2, 5, 4, 3))
    lhs = inner(ops.conv2d(Tensor(x), Tensor(w), stride=2).data, y)
    rhs = inner(x, ops.conv2d_transpose(Tensor(y), Tensor(w), stride=2).data)
    assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), 1.0)


def test_conv_transpose_gradients():
    rng = np.random.default_rng(7)
    x = rand(rng, 2, 3, 3, 4)
    w = rand(rng, 3, 2, 2, 2)
    b = rand(rng, 2)
    c = rng.standard_normal((2, 2, 6, 8))
    rep = check_gradients("convT", lambda: (ops.conv2d_transpose(x, w, b, stride=2) * c).sum(),
                          [("x", x), ("w", w), ("b", b)])
    assert rep.max_error < 1e-6, rep.errors


def test_conv_transpose_requires_kernel_equal_stride():
    with pytest.raises(ConfigurationError):
        ops.conv2d_transpose(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), stride=2)


# ---------------------------------------------------------------- pooling / upsampling

def test_maxpool_examples():
    assert ops.maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))).data.item() == 4.0
    const = ops.maxpool2d(Tensor(np.full((1, 2, 6, 4), 1.5)))
    assert const.shape == (1, 2, 3, 2) and np.all(const.data == 1.5)
    with pytest.raises(ConfigurationError):
        ops.maxpool2d(Tensor(np.zeros((1, 1, 3, 4))))


def test_maxpool_gradient_routes_to_argmax():
    rng = np.random.default_rng(0)
    x = Parameter(rng.permutation(64).reshape(1, 1, 8, 8).astype(np.float64))
    with Tape() as tape:
        loss = ops.maxpool2d(x).sum()
    tape.backward(loss)
    win = x.data.reshape(4, 2, 4, 2).transpose(0, 2, 1, 3).reshape(4, 4, 4)
    expected = np.zeros((4, 4, 4))
    expected[np.arange(4)[:, None], np.arange(4)[None], win.argmax(-1)] = 1
    expected = expected.reshape(4, 4, 2, 2).transpose(0, 2, 1, 3).reshape(1, 1, 8, 8)
    assert np.array_equal(x.grad, expected)
    rep = check_gradients("maxpool", lambda: ops.maxpool2d(x).sum(), [("x", x)])
    assert rep.max_error < 1e-6


def test_maxpool_tie_goes_to_first():
    x = Parameter(np.ones((1, 1, 2, 2)))
    with Tape() as tape:
        loss = ops.maxpool2d(x).sum()
    tape.backward(loss)
    assert np.array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_upsample_examples():
    one = ops.bilinear_upsample2x(Tensor(np.full((1, 1, 1, 1), 3.0)))
    assert np.all(one.data == 3.0) and one.shape == (1, 1, 2, 2)
    a, b = 1.0, 5.0
    row = ops.bilinear_upsample2x(Tensor(np.array([[[[a, b]]]]))).data[0, 0, 0]
    assert np.allclose(row, [a, 0.75 * a + 0.25 * b, 0.25 * a + 0.75 * b, b], atol=1e-15)
    const = ops.bilinear_upsample2x(Tensor(np.full((2, 3, 5, 4), -0.7)))
    assert np.allclose(const.data, -0.7, atol=1e-15)


def test_upsample_adjoint_and_gradients():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 5, 4))
    y = rng.standard_normal((2, 3, 10, 8))
    with Tape() as tape:
        xt = Parameter(x)
        loss = (ops.bilinear_upsample2x(xt) * y).sum()
    tape.backward(loss)
    lhs = inner(ops.bilinear_upsample2x(Tensor(x)).data, y)
    assert abs(lhs - inner(x, xt.grad)) <= 1e-10 * max(1.0, abs(lhs))
    xp = Parameter(x.copy())
    rep = check_gradients("upsample", lambda: (ops.bilinear_upsample2x(xp) * y).sum(), [("x", xp)])
    assert rep.max_error < 1e-6


def test_matmul_adjoint():
    rng = np.random.default_rng(8)
    a = rng.standard_normal((3, 4, 5))
    x = rng.standard_normal((3, 5, 2))
    y = rng.standard_normal((3, 4, 2))
    lhs = inner(ops.matmul(Tensor(a), Tensor(x)).data, y)
    rhs = inner(x, np.matmul(np.swapaxes(a, 1, 2), y))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


# ---------------------------------------------------------------- batchnorm

def test_batchnorm_train_normalizes():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((4, 3, 5, 5)) * 3 + 2)
    w, b = Parameter(np.ones(3)), Parameter(np.zeros(3))
    rm, rv = np.zeros(3), np.ones(3)
    out = ops.batchnorm2d(x, w, b, rm, rv, training=True).data
    assert np.allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    assert np.allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-5)
    assert np.allclose(rm, 0.1 * x.data.mean(axis=(0, 2, 3)))


def test_batchnorm_eval_identity():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    out = ops.batchnorm2d(x, Parameter(np.ones(3)), Parameter(np.zeros(3)), np.zeros(3), np.ones(3),
                          training=False, eps=0.0 + 1e-300)
    assert np.allclose(out.data, x.data, atol=1e-12)


def test_batchnorm_rejects_negative_variance():
    with pytest.raises(StateError):
        ops.batchnorm2d(Tensor(np.zeros((1, 2, 2, 2))), Parameter(np.ones(2)), Parameter(np.zeros(2)),
                        np.zeros(2), np.array([1.0, -1.0]), training=False)


@pytest.mark.parametrize("seed", range(5))
def test_batchnorm_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rand(rng, 3, 2, 3, 3)
    w, b = rand(rng, 2), rand(rng, 2)
    c = rng.standard_normal((3, 2, 3, 3))
    rep = check_gradients("bn", lambda: (ops.batchnorm2d(x, w, b, np.zeros(2), np.ones(2), True) * c).sum(),
                          [("x", x), ("gamma", w), ("beta", b)])
    assert rep.max_error < 1e-5, rep.errors


# ---------------------------------------------------------------- elementwise / linear

def test_scalar_activations():
    assert ops.gelu(Tensor(np.array(0.0))).data == 0.0
    assert ops.relu(Tensor(np.array(-1.0))).data == 0.0
    assert ops.sigmoid(Tensor(np.array(0.0))).data == 0.5
    assert np.allclose(ops.softmax(Tensor(np.array([0.0, 0.0]))).data, [0.5, 0.5])


def test_gelu_is_exact_erf_form():
    from scipy.stats import norm
    x = np.linspace(-4, 4, 41)
    assert np.allclose(ops.gelu(Tensor(x)).data, x * norm.cdf(x), atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_shift_invariant(xs, c):
    x = np.array(xs)
    a = ops.softmax(Tensor(x)).data
    b = ops.softmax(Tensor(x + c)).data
    assert np.allclose(a, b, atol=1e-12, rtol=0)


def test_softmax_f32_rows_sum_to_one():
    x = np.random.default_rng(0).standard_normal((4, 7, 9)).astype(np.float32) * 10
    out = ops.softmax(Tensor(x), axis=1).data
    assert out.dtype == np.float32
    assert np.all(out >= 0)
    assert np.allclose(out.sum(axis=1), 1, atol=1e-6)


def test_axis_out_of_range():
    with pytest.raises(ConfigurationError):
        ops.softmax(Tensor(np.zeros((2, 3))), axis=2)


@pytest.mark.parametrize("seed", range(5))
def test_elementwise_gradients(seed):
    rng = np.random.default_rng(100 + seed)
    x = rand(rng, 3, 4)
    y = rand(rng, 4)
    w = rand(rng, 4, 5)
    lw, lb = rand(rng, 5), rand(rng, 5)
    c = rng.standard_normal((3, 5))

    def f():
        h = ops.gelu(x * y + x) / (ops.sigmoid(x) + 1.0)
        h = ops.matmul(h, w)
        h = ops.layer_norm(h, lw, lb, axis=-1)
        return (ops.softmax(h, axis=0) * c).sum() + (ops.relu(h) * c).mean()

    rep = check_gradients("elementwise", f, [("x", x), ("y", y), ("w", w), ("lw", lw), ("lb", lb)])
    assert rep.max_error < 1e-5, rep.errors


def test_shape_ops_gradients():
    rng = np.random.default_rng(9)
    x = rand(rng, 2, 3, 4, 4)
    z = rand(rng, 2, 2, 4, 4)
    c = rng.standard_normal((4, 2, 5, 2, 2))

    def f():
        h = ops.concat([x, z], axis=1)
        h = ops.subsample(h, 2)
        return (h.permute(0, 2, 3, 1).reshape(4, 2, 5, 1, 1).sum(axis=-1, keepdims=True) * c).sum()

    rep = check_gradients("shape", f, [("x", x), ("z", z)])
    assert rep.max_error < 1e-6


# ---------------------------------------------------------------- tape semantics

def test_backward_simple_sums():
    x = Parameter(np.array([1.0, -2.0, 3.5]))
    with Tape() as tape:
        loss = x.sum()
    tape.backward(loss)
    assert np.array_equal(x.grad, np.ones(3))
    x.grad = None
    with Tape():
        loss = (x * x).sum()
    loss.backward()
    assert np.array_equal(x.grad, 2 * x.data)


def test_unused_leaf_gets_zero_grad():
    x, unused = Parameter(np.ones(2)), Parameter(np.ones(3))
    with Tape() as tape:
        loss = x.sum()
    tape.backward(loss, leaves=[x, unused])
    assert np.array_equal(unused.grad, np.zeros(3))


def test_backward_usage_errors():
    x = Parameter(np.ones(3))
    with pytest.raises(UsageError):
        x.sum().backward()
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(UsageError):
        tape.backward(y)
    with Tape() as tape:
        loss = x.sum()
    tape.backward(loss)
    with pytest.raises(UsageError):
        tape.backward(loss)


def test_f32_ops_stay_f32():
    x = Tensor(np.ones((1, 2, 4, 4), np.float32))
    w = Tensor(np.ones((2, 2, 3, 3), np.float32))
    y = ops.gelu(ops.conv2d(x, w, padding=1)) * 2.0 + 1.0
    assert y.dtype == np.float32


def test_forward_backward_deterministic():
    def run():
        rng = np.random.default_rng(42)
        x = rand(rng, 2, 4, 8, 8)
        w = rand(rng, 8, 4, 3, 3)
        with Tape() as tape:
            loss = (ops.gelu(ops.conv2d(x, w, padding=1)) ** 1 if False else ops.gelu(ops.conv2d(x, w, padding=1))).sum()
        tape.backward(loss)
        return loss.data.tobytes(), w.grad.tobytes(), x.grad.tobytes()

    assert run() == run()
