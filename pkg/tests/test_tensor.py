import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hcseg import tensor as T
from hcseg.gradcheck import grad_check
from hcseg.tensor import Tensor


def brute_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            out[i, j] = sum(a[i, t] * b[t, j] for t in range(k))
    return out


def brute_conv(x, w, stride, pad):
    """Sliding-window cross-correlation with explicit loops."""
    b, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((b, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((b, o, ho, wo))
    for n in range(b):
        for f in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[n, f, i, j] = (patch * w[f]).sum()
    return out


class TestMatmul:
    def test_identity_left(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(T.matmul(a, Tensor(np.eye(2))).data, [[1, 2], [3, 4]])

    def test_identity_vector(self):
        out = T.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[5.0], [7.0]]))
        assert np.array_equal(out.data, [[5], [7]])

    def test_hand_computed(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[2.0], [1.0]])
        expected = brute_matmul(a, b)
        assert np.array_equal(expected, [[4], [10]])
        assert np.array_equal(T.matmul(Tensor(a), Tensor(b)).data, expected)

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_dtype_mismatch(self):
        with pytest.raises(T.DTypeError):
            T.matmul(Tensor(np.ones((2, 2)), dtype="f32"), Tensor(np.ones((2, 2)), dtype="f64"))

    def test_matches_brute_force(self, rng):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, brute_matmul(a, b), atol=1e-12)


class TestConv2d:
    def test_scalar_kernel(self):
        out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.full((1, 1, 1, 1), 2.0)))
        assert np.array_equal(out.data, np.full((1, 1, 3, 3), 2.0))

    def test_delta_image_reproduces_flipped_kernel(self, rng):
        x = np.zeros((1, 1, 5, 5))
        x[0, 0, 2, 2] = 1.0
        w = rng.standard_normal((1, 1, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(w), pad=1).data
        oracle = brute_conv(x, w, 1, 1)
        np.testing.assert_allclose(out, oracle, atol=1e-14)
        # cross-correlation: the response around the delta is the kernel flipped
        np.testing.assert_allclose(out[0, 0, 1:4, 1:4], w[0, 0, ::-1, ::-1], atol=1e-14)

    def test_zero_input(self, rng):
        out = T.conv2d(Tensor(np.zeros((2, 3, 6, 6))), Tensor(rng.standard_normal((4, 3, 3, 3))), pad=1)
        assert not out.data.any()

    def test_kernel_too_large(self):
        with pytest.raises(T.ShapeError):
            T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))), pad=1)

    @pytest.mark.parametrize("k,stride,pad", list(itertools.product([1, 3], [1, 2], [0, 1])))
    def test_matches_brute_force(self, rng, k, stride, pad):
        x = rng.standard_normal((2, 3, 6, 5))
        w = rng.standard_normal((4, 3, k, k))
        np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad).data,
                                   brute_conv(x, w, stride, pad), atol=1e-12)


def test_shape_algebra_exhaustive():
    for k, s, p, h, w in itertools.product([1, 3], [1, 2], [0, 1], range(3, 7), range(3, 7)):
        out = T.conv2d(Tensor(np.ones((1, 2, h, w))), Tensor(np.ones((3, 2, k, k))), stride=s, pad=p)
        assert out.shape == (1, 3, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
    for m, kk, n in itertools.product(range(1, 5), repeat=3):
        assert T.matmul(Tensor(np.ones((m, kk))), Tensor(np.ones((kk, n)))).shape == (m, n)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        g = T.backward(T.sum(x))[x]
        assert np.array_equal(g.data, np.ones((2, 3, 4)))

    def test_square(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        assert np.array_equal(T.backward(T.sum(x * x))[x].data, [2, 4, 6])

    def test_untracked_leaves_absent(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        c = Tensor([3.0, 4.0])
        grads = T.backward(T.sum(x * c))
        assert x in grads and c not in grads

    def test_loss_not_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(T.ShapeError):
            T.backward(x * 2.0)

    def test_loss_not_on_tape(self):
        with pytest.raises(T.TapeError):
            T.backward(T.sum(Tensor([1.0, 2.0])))

    def test_shared_subexpression_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * x
        assert np.allclose(T.backward(T.sum(y + y * x))[x].data, [2 * 2 + 3 * 4])

    def test_dice_softmax_matches_finite_differences(self, rng):
        from hcseg.metrics import dice_loss

        g = np.zeros((1, 2, 2, 2))
        g[0, 0] = [[1, 0], [0, 1]]
        g[0, 1] = 1 - g[0, 0]
        wmat = Tensor(rng.standard_normal((2, 2)))

        def f(x):
            logits = T.transpose(T.matmul(wmat, T.reshape(x, (2, 4))), (1, 0))
            p = T.reshape(T.transpose(T.softmax(logits, axis=1), (1, 0)), (1, 2, 2, 2))
            return dice_loss(p, g, class_axis=1)

        assert grad_check(f, rng.standard_normal((2, 2, 2)), eps=1e-5) < 1e-4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
class TestNonFinite:
    def test_log_zero_raises(self):
        with pytest.raises(T.NonFiniteError):
            T.log(Tensor([0.0, 1.0]))

    def test_overflow_raises(self):
        with pytest.raises(T.NonFiniteError):
            T.exp(Tensor([1000.0]))

    def test_division_by_zero_raises(self):
        with pytest.raises(T.NonFiniteError):
            Tensor([1.0]) / Tensor([0.0])


def test_forward_determinism(rng):
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    a = T.conv2d(Tensor(x), Tensor(w), pad=1)
    b = T.conv2d(Tensor(x.copy()), Tensor(w.copy()), pad=1)
    assert a.data.tobytes() == b.data.tobytes()
    assert a.dtype == np.float32


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


class TestGradCheck:
    def test_sum(self, rng):
        assert grad_check(lambda x: T.sum(x), rng.standard_normal((3, 2))) <= 1e-10

    def test_tanh(self):
        assert grad_check(lambda x: T.sum(T.tanh(x)), np.array([0.1, -0.3])) < 1e-6

    def test_requires_f64(self):
        with pytest.raises(TypeError):
            grad_check(lambda x: T.sum(x), np.ones(2, np.float32))

    def test_nonfinite_output(self):
        with pytest.raises(T.NonFiniteError):
            grad_check(lambda x: T.sum(x) * np.inf, np.ones(2))


# -- every registered op against central differences -------------------------------

def _weighted(out, seed):
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return T.sum(out * Tensor(w))


def _away_from_zero(a, margin=0.1):
    return np.where(np.abs(a) < margin, np.sign(a + 1e-12) * (margin + np.abs(a)), a)


def op_cases(seed):
    r = np.random.default_rng(seed)
    other = Tensor(r.standard_normal((3, 4)))
    row = Tensor(r.standard_normal((1, 4)))
    mat = Tensor(r.standard_normal((4, 2)))
    w = Tensor(r.standard_normal((2, 3, 3, 3)))
    bias = Tensor(r.standard_normal(2))
    x_img = Tensor(r.standard_normal((2, 3, 4, 4)))
    return {
        "add": (lambda x: x + row, (3, 4)),
        "sub": (lambda x: other - x, (3, 4)),
        "mul": (lambda x: x * other, (3, 4)),
        "mul_broadcast_rhs": (lambda x: other * x, (1, 4)),
        "div": (lambda x: other / (T.exp(x) + 1.0), (3, 4)),
        "div_lhs": (lambda x: x / (T.exp(other) + 1.0), (3, 4)),
        "neg": (lambda x: -x, (3, 4)),
        "power": (lambda x: (T.exp(x)) ** 1.5, (3, 4)),
        "exp": (T.exp, (3, 4)),
        "log": (lambda x: T.log(T.exp(x) + 0.5), (3, 4)),
        "sqrt": (lambda x: T.sqrt(T.exp(x)), (3, 4)),
        "tanh": (T.tanh, (3, 4)),
        "relu": (lambda x: T.relu(x), (3, 4)),
        "clip": (lambda x: T.clip(x, -0.05, 0.05), (3, 4)),
        "sum_axis": (lambda x: T.sum(x, axis=1, keepdims=True), (3, 4)),
        "mean_axis": (lambda x: T.mean(x, axis=0), (3, 4)),
        "reshape": (lambda x: T.reshape(x, (2, 6)), (3, 4)),
        "transpose": (lambda x: T.transpose(x, (1, 0)), (3, 4)),
        "broadcast_to": (lambda x: T.broadcast_to(x, (3, 4)), (1, 4)),
        "getitem": (lambda x: x[1:, ::2], (3, 4)),
        "concat": (lambda x: T.concat([x, other, x], axis=0), (3, 4)),
        "matmul_lhs": (lambda x: T.matmul(x, mat), (3, 4)),
        "matmul_rhs": (lambda x: T.matmul(other, x), (4, 2)),
        "matmul_batched": (lambda x: T.matmul(x, mat), (2, 3, 4)),
        "softmax": (lambda x: T.softmax(x, axis=1), (3, 4)),
        "conv2d_x": (lambda x: T.conv2d(x, w, bias, stride=1, pad=1), (2, 3, 4, 4)),
        "conv2d_x_stride2": (lambda x: T.conv2d(x, w, None, stride=2, pad=1), (2, 3, 5, 5)),
        "conv2d_w": (lambda x: T.conv2d(x_img, x, bias, pad=1), (2, 3, 3, 3)),
        "conv2d_b": (lambda x: T.conv2d(x_img, w, x, pad=0), (2,)),
        "avg_pool2d": (lambda x: T.avg_pool2d(x, 2), (2, 3, 4, 4)),
        "upsample2d": (lambda x: T.upsample2d(x, 2), (2, 3, 2, 2)),
    }


OPS = list(op_cases(0))


@pytest.mark.parametrize("name", OPS)
def test_op_gradient(name):
    fn, shape = op_cases(0)[name]
    x = np.random.default_rng(5).standard_normal(shape)
    if name in ("relu",):
        x = _away_from_zero(x)
    if name == "clip":
        x = x * 0.1
        x = np.where(np.abs(np.abs(x) - 0.05) < 0.01, x * 0.5, x)
    assert grad_check(lambda t: _weighted(fn(t), 99), x, eps=1e-5) < 1e-4


@settings(max_examples=15, deadline=None)
@given(name=st.sampled_from(OPS), seed=st.integers(0, 2**31 - 1))
def test_op_gradient_property(name, seed):
    fn, shape = op_cases(seed)[name]
    x = np.random.default_rng(seed).standard_normal(shape)
    if name == "relu":
        x = _away_from_zero(x)
    if name == "clip":
        x = np.clip(x * 0.1, -0.2, 0.2)
        x = np.where(np.abs(np.abs(x) - 0.05) < 0.01, x * 0.5, x)
    assert grad_check(lambda t: _weighted(fn(t), seed + 1), x, eps=1e-5) < 1e-4


def test_dtype_preserved_f32():
    x = Tensor(np.ones((2, 2)), dtype="f32")
    y = T.tanh(x * 2.0 + 1.0)
    assert y.dtype == np.float32


def test_zero_extent_rejected():
    with pytest.raises(T.ShapeError):
        Tensor(np.ones((0, 3)))
