import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affuse.errors import (
    ConfigurationError,
    DataError,
    DeterminismError,
    DimensionError,
    NumericError,
    StateError,
)
from affuse.nn import (
    EncoderLayer,
    Linear,
    MultiHeadAttention,
    Parameter,
    RMSprop,
    Tensor,
    cross_entropy,
    grad_check,
    layer_norm,
    matmul,
    positional_encoding,
    softmax,
)
from affuse.nn import tensor as T

from conftest import max_rel_err, numeric_grad


def _tape_grad(build, x):
    x.grad = None
    build().backward()
    return x.grad


class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_dot(self):
        assert matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]

    def test_shape_error_names_both(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradient(self, rng):
        a = Parameter(rng.normal(size=(3, 4)))
        b = Parameter(rng.normal(size=(4, 2)))
        w = rng.normal(size=(3, 2))
        build = lambda: (matmul(a, b) * w).sum()
        f = lambda: float((a.data @ b.data * w).sum())
        build().backward()
        assert max_rel_err(a.grad, numeric_grad(f, a.data)) <= 1e-6
        assert max_rel_err(b.grad, numeric_grad(f, b.data)) <= 1e-6

    def test_batched_broadcast_gradient(self, rng):
        a = Parameter(rng.normal(size=(2, 3, 4)))
        b = Parameter(rng.normal(size=(4, 5)))
        w = rng.normal(size=(2, 3, 5))
        (matmul(a, b) * w).sum().backward()
        f = lambda: float((np.matmul(a.data, b.data) * w).sum())
        assert max_rel_err(b.grad, numeric_grad(f, b.data)) <= 1e-6


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax(Tensor([0.0, 0, 0, 0]), 0).data, [0.25] * 4)

    def test_no_overflow(self):
        np.testing.assert_allclose(softmax(Tensor([1000.0, 0.0]), 0).data, [1.0, 0.0], atol=1e-12)

    def test_non_finite_raises(self):
        with pytest.raises(NumericError):
            softmax(Tensor([np.inf, 0.0]), 0)

    def test_bad_axis(self):
        with pytest.raises(DimensionError):
            softmax(Tensor([1.0, 2.0]), 1)

    def test_gradient(self, rng):
        x = Parameter(rng.normal(size=(2, 5)))
        w = rng.normal(size=(2, 5))

        def f():
            e = np.exp(x.data - x.data.max(1, keepdims=True))
            return float((e / e.sum(1, keepdims=True) * w).sum())

        g = _tape_grad(lambda: (softmax(x, 1) * w).sum(), x)
        assert max_rel_err(g, numeric_grad(f, x.data)) <= 1e-6

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
    def test_rows_sum_to_one(self, rows, cols, seed):
        x = np.random.default_rng(seed).normal(scale=30, size=(rows, cols))
        s = softmax(Tensor(x), axis=1).data
        np.testing.assert_allclose(s.sum(1), 1.0, atol=1e-9)
        assert np.all(s > 0) or np.all(s.sum(1) > 0)


class TestLayerNorm:
    def test_constant_slice_collapses_to_bias(self):
        out = layer_norm(Tensor([5.0, 5, 5, 5]), Tensor(np.ones(4)), Tensor(np.zeros(4)), 1e-6)
        np.testing.assert_allclose(out.data, 0.0)

    def test_two_point(self):
        out = layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-6)
        np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-6)

    def test_zero_width(self):
        with pytest.raises(DimensionError):
            layer_norm(Tensor(np.ones((2, 0))), Tensor(np.ones(0)), Tensor(np.zeros(0)))

    def test_gradient(self, rng):
        x = Parameter(rng.normal(size=(4, 8)))
        g = Parameter(rng.normal(size=8))
        b = Parameter(rng.normal(size=8))
        w = rng.normal(size=(4, 8))

        def f():
            mu = x.data.mean(-1, keepdims=True)
            var = ((x.data - mu) ** 2).mean(-1, keepdims=True)
            return float((((x.data - mu) / np.sqrt(var + 1e-6) * g.data + b.data) * w).sum())

        (layer_norm(x, g, b, 1e-6) * w).sum().backward()
        for p in (x, g, b):
            assert max_rel_err(p.grad, numeric_grad(f, p.data)) <= 1e-6


class TestAttention:
    def test_singleton_sequence(self, rng):
        mha = MultiHeadAttention(8, 2, rng)
        x = Tensor(rng.normal(size=(1, 8)))
        out, weights = mha(x, return_weights=True)
        np.testing.assert_allclose(weights.data, np.ones((2, 1, 1)))
        np.testing.assert_allclose(out.data, x.data @ mha.Wv.data @ mha.Wo.data, atol=1e-12)

    def test_equal_tokens_uniform(self, rng):
        mha = MultiHeadAttention(8, 2, rng)
        x = Tensor(np.tile(rng.normal(size=(1, 8)), (5, 1)))
        _, weights = mha(x, return_weights=True)
        np.testing.assert_allclose(weights.data, 1 / 5, atol=1e-12)

    def test_bad_heads(self, rng):
        with pytest.raises(ConfigurationError):
            MultiHeadAttention(8, 3, rng)

    def test_gradient_all_params(self, rng):
        mha = MultiHeadAttention(8, 2, rng)
        x = Parameter(rng.normal(size=(3, 8)), "x")
        w = rng.normal(size=(3, 8))
        params = dict(mha.named_parameters())
        params["x"] = x
        report = grad_check(lambda: (mha(x) * w).sum(), params, samples=None)
        assert report.worst <= 1e-4, report.errors


class TestEncoderLayer:
    def test_residual_identity(self, rng):
        layer = EncoderLayer(8, 2, 32, rng)
        layer.attn.Wo.data[:] = 0
        layer.ffn.lin2.W.data[:] = 0
        layer.ffn.lin2.b.data[:] = 0
        x = Tensor(rng.normal(size=(3, 8)))
        np.testing.assert_array_equal(layer(x).data, x.data)

    @pytest.mark.parametrize("L", range(1, 17))
    def test_shape_preserved(self, L, rng):
        layer = EncoderLayer(8, 2, 32, rng)
        assert layer(Tensor(rng.normal(size=(L, 8)))).shape == (L, 8)

    def test_gradient(self, rng):
        layer = EncoderLayer(8, 2, 32, rng)
        x = Parameter(rng.normal(size=(3, 8)), "x")
        w = rng.normal(size=(3, 8))
        params = dict(layer.named_parameters())
        params["x"] = x
        report = grad_check(lambda: (layer(x) * w).sum(), params, samples=None)
        assert report.worst <= 1e-4, report.errors


class TestPositionalEncoding:
    def test_first_row(self):
        np.testing.assert_array_equal(positional_encoding(1, 6)[0], [0, 1, 0, 1, 0, 1])

    def test_range(self):
        pe = positional_encoding(50, 16)
        assert pe.min() >= -1 and pe.max() <= 1

    def test_value(self):
        assert positional_encoding(2, 4)[1, 0] == pytest.approx(0.841471, abs=1e-6)
        assert positional_encoding(3, 4)[2, 3] == pytest.approx(math.cos(2 / 100.0))

    def test_odd_width(self):
        with pytest.raises(ConfigurationError):
            positional_encoding(3, 5)


class TestCrossEntropy:
    def test_uniform(self):
        loss = cross_entropy(Tensor([[0.0, 0, 0, 0]]), [2])
        assert loss.item() == pytest.approx(math.log(4), abs=1e-6)

    def test_confident(self):
        assert cross_entropy(Tensor([[10.0, 0, 0, 0]]), [0]).item() < 1e-3

    def test_bad_label_names_row(self):
        with pytest.raises(DataError, match="row 1"):
            cross_entropy(Tensor(np.zeros((2, 4))), [0, 4])

    def test_gradient(self, rng):
        x = Parameter(rng.normal(size=(4, 4)))
        labels = np.array([0, 3, 1, 1])

        def f():
            z = x.data - x.data.max(1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(1, keepdims=True))
            return float(-logp[np.arange(4), labels].mean())

        g = _tape_grad(lambda: cross_entropy(x, labels), x)
        assert max_rel_err(g, numeric_grad(f, x.data)) <= 1e-6
        # closed form: (softmax - onehot) / B
        s = np.exp(x.data) / np.exp(x.data).sum(1, keepdims=True)
        s[np.arange(4), labels] -= 1
        np.testing.assert_allclose(g, s / 4, atol=1e-12)


class TestRMSprop:
    def test_zero_gradient_identity(self, rng):
        p = Parameter(rng.normal(size=(3, 3)))
        before = p.data.copy()
        opt = RMSprop([p], learning_rate=0.1, epsilon=0.0)
        p.grad = np.zeros_like(p.data)
        opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_hand_evaluated_step(self):
        p = Parameter(np.array(1.0))
        opt = RMSprop([p], learning_rate=0.1, decay=0.9, epsilon=0.0)
        p.grad = np.array(1.0)
        opt.step()
        assert opt.mean_square[0] == pytest.approx(0.1)
        assert p.data == pytest.approx(1 - 0.1 / math.sqrt(0.1))
        assert p.data == pytest.approx(0.683772, abs=1e-6)
        assert p.grad is None

    @pytest.mark.parametrize("g", [1.5, -0.3])
    def test_monotone_under_constant_gradient(self, g):
        p = Parameter(np.array(0.0))
        opt = RMSprop([p], learning_rate=0.01)
        values = [0.0]
        for _ in range(30):
            p.grad = np.array(g)
            opt.step()
            values.append(float(p.data))
        steps = np.diff(values)
        assert np.all(np.sign(steps) == -np.sign(g))

    def test_missing_gradient_names_param(self):
        p = Parameter(np.zeros(2), name="head.W")
        with pytest.raises(StateError, match="head.W"):
            RMSprop([p]).step()

    def test_accumulator_nonnegative(self, rng):
        p = Parameter(rng.normal(size=(2, 3)))
        opt = RMSprop([p])
        for _ in range(5):
            p.grad = rng.normal(size=(2, 3))
            opt.step()
        assert opt.mean_square[0].shape == p.shape
        assert np.all(opt.mean_square[0] >= 0)


class TestGradCheck:
    def test_linear_model_exact(self, rng):
        lin = Linear(5, 3, rng)
        x = rng.normal(size=(4, 5))
        w = rng.normal(size=(4, 3))
        report = grad_check(lambda: (lin(Tensor(x)) * w).sum(), dict(lin.named_parameters()), samples=None)
        assert report.worst <= 1e-8

    def test_detects_sign_flip(self, rng):
        x = Parameter(rng.normal(size=(3,)), "x")

        def bad_square(t):
            def backward(g):
                return (-2 * t.data * g,)

            return T._result(t.data ** 2, (t,), backward, "bad")

        report = grad_check(lambda: bad_square(x).sum(), {"x": x}, tolerance=1e-4)
        # |g - (-g)| / (|g| + |-g|) is 1 for every element
        assert report.errors["x"] == pytest.approx(1.0)
        assert not report.passed and report.failures == ["x"]

    def test_relu_kink_skipped_and_counted(self):
        # first entry sits 1e-6 from the kink, well inside the h=1e-5 stencil
        x = Parameter(np.array([1e-6, 0.5, -0.7]), "x")
        w = np.array([3.0, 2.0, 1.0])
        report = grad_check(lambda: (T.relu(x) * w).sum(), {"x": x}, samples=None)
        assert report.kinks == {"x": 1}
        assert report.worst <= 1e-8
        # the raw central difference there would be off by half
        fd = (3 * (1e-6 + 1e-5) - 0.0) / 2e-5
        assert abs(fd - 3.0) / 6.0 > 0.1

    def test_nondeterministic_closure(self):
        x = Parameter(np.ones(2), "x")
        calls = iter(range(100))
        with pytest.raises(DeterminismError):
            grad_check(lambda: (x * float(next(calls))).sum(), {"x": x})


def test_forward_is_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(7)
        layer = EncoderLayer(8, 2, 32, rng)
        return layer(Tensor(np.random.default_rng(8).normal(size=(4, 8)))).data

    assert run().tobytes() == run().tobytes()


def test_shared_subexpression_accumulates():
    x = Parameter(np.array([2.0, -1.0]))
    y = x * x + x
    y.sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)
