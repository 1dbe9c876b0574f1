import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sgscl import tensor as T
from sgscl.tensor import Graph, Tensor


def grads(fn, **inputs):
    g = Graph(fn)
    g.forward(**inputs)
    return g.backward()


class TestForward:
    def test_identity(self):
        g = Graph(lambda x: x * 1.0)
        np.testing.assert_array_equal(g.forward(x=np.array([1.0, 2, 3])).data, [1, 2, 3])

    def test_relu(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0, 2])).data, [0, 0, 2])

    def test_l2_normalize(self):
        np.testing.assert_allclose(T.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8])

    def test_non_finite_raises(self):
        with pytest.raises(FloatingPointError), np.errstate(over="ignore"):
            Tensor([1e308, 1.0]) * 10.0

    def test_masked_logsumexp_reads_only_mask(self):
        x = Tensor([[1.0, 100.0, 2.0]])
        out = T.logsumexp(x, axis=1, mask=np.array([[True, False, True]]))
        np.testing.assert_allclose(out.data, [np.log(np.e + np.e ** 2)])

    def test_empty_mask_row_raises(self):
        with pytest.raises(ValueError):
            T.logsumexp(Tensor([[1.0, 2.0]]), axis=1, mask=np.array([[False, False]]))


class TestBackward:
    def test_sum_gives_ones(self):
        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(grads(lambda x: T.sum(x), x=x)["x"], np.ones((2, 3)))

    def test_square(self):
        assert grads(lambda x: T.sum(x * x), x=np.array(3.0))["x"] == 6.0

    def test_mean_relu(self):
        np.testing.assert_array_equal(grads(lambda x: T.mean(T.relu(x)), x=np.array([-1.0, 2.0]))["x"], [0, 0.5])

    def test_backward_before_forward(self):
        with pytest.raises(RuntimeError):
            Graph(lambda x: x).backward()

    def test_nonscalar_needs_seed(self):
        g = Graph(lambda x: x * 2.0)
        g.forward(x=np.ones(3))
        with pytest.raises(ValueError):
            g.backward()
        np.testing.assert_array_equal(g.backward(np.array([1.0, 2, 3]))["x"], [2, 4, 6])

    def test_seed_shape_checked(self):
        g = Graph(lambda x: x * 2.0)
        g.forward(x=np.ones(3))
        with pytest.raises(ValueError):
            g.backward(np.ones(4))

    def test_broadcast_add_unbroadcasts(self):
        out = grads(lambda a, b: T.sum(a + b), a=np.ones((4, 3)), b=np.zeros(3))
        np.testing.assert_array_equal(out["b"], [4, 4, 4])

    def test_shared_subexpression_accumulates(self):
        def f(x):
            y = x * 2.0
            return T.sum(y * y + y)
        x = np.array([1.0, -2.0])
        np.testing.assert_allclose(grads(f, x=x)["x"], 8 * x + 2)


class TestReversal:
    def test_forward_identity(self):
        np.testing.assert_array_equal(T.gradient_reversal(Tensor([5.0, -2.0]), 0.7).data, [5, -2])

    @pytest.mark.parametrize("lam,expected", [(0.5, -0.5), (0.0, 0.0)])
    def test_backward(self, lam, expected):
        g = grads(lambda x: T.sum(T.gradient_reversal(x, lam)), x=np.array([1.0, 1.0]))["x"]
        np.testing.assert_array_equal(g, [expected, expected])

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            T.gradient_reversal(Tensor([1.0]), -0.1)


class TestStopGradient:
    def test_forward(self):
        np.testing.assert_array_equal(T.stop_gradient(Tensor([1.0, 2.0])).data, [1, 2])

    def test_blocks(self):
        np.testing.assert_array_equal(grads(lambda x: T.sum(T.stop_gradient(x)), x=np.ones(3))["x"], 0)

    def test_only_live_branch(self):
        g = grads(lambda x: T.sum(x + T.stop_gradient(x)), x=np.array([1.0, 2.0]))["x"]
        np.testing.assert_array_equal(g, [1, 1])


class TestGradCheck:
    def test_quadratic(self, rng):
        assert T.grad_check(lambda x: T.sum(x * x), {"x": rng.standard_normal(5)}) < 1e-8

    def test_reversal_uses_declared_semantics(self):
        # raw differences of the identity forward would give +1 against analytic -1
        assert T.grad_check(lambda x: T.sum(T.gradient_reversal(x, 1.0)), {"x": np.ones(3)}) < 1e-8

    def test_stop_gradient_declared(self, rng):
        f = lambda x: T.sum(x * T.stop_gradient(x))  # noqa: E731
        assert T.grad_check(f, {"x": rng.standard_normal(4)}) < 1e-8

    def test_detects_wrong_gradient(self):
        # relu at an exact kink: analytic 0, central difference 0.5
        assert T.grad_check(lambda x: T.sum(T.relu(x)), {"x": np.zeros(1)}) > 0.1

    def test_epsilon_range(self):
        with pytest.raises(ValueError):
            T.grad_check(lambda x: T.sum(x), {"x": np.ones(1)}, epsilon=1e-2)

    def test_scalar_loss_required(self):
        with pytest.raises(ValueError):
            T.grad_check(lambda x: x * 1.0, {"x": np.ones(2)})

    def test_ops_batch(self, rng):
        def f(x, w, g, b):
            h = T.batch_norm(T.relu(x @ w), g, b)
            return T.sum(T.log_softmax(T.l2_normalize(h, axis=1) / 0.3, axis=1)) + T.sum(T.softmax(h, axis=0))
        inputs = {"x": rng.standard_normal((6, 3)), "w": rng.standard_normal((3, 4)),
                  "g": rng.uniform(0.5, 1.5, 4), "b": rng.standard_normal(4)}
        assert T.grad_check(f, inputs) < 1e-6

    def test_take_reshape_transpose(self, rng):
        idx = np.array([[0, 1], [1, 2], [2, 3]])
        f = lambda x: T.sum(T.transpose(T.reshape(T.take(x, idx, axis=0), (6, 2))) * 1.5)  # noqa: E731
        assert T.grad_check(f, {"x": rng.standard_normal((4, 2))}) < 1e-8


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-5, 5, allow_nan=False)))
def test_logsumexp_matches_numpy(x):
    np.testing.assert_allclose(T.logsumexp(Tensor(x), axis=1).data, np.log(np.exp(x).sum(axis=1)), rtol=1e-12, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(2, 6), elements=st.floats(-3, 3, allow_nan=False)),
       st.sampled_from([0.0, 0.0096, 0.5, 1.0, 2.5]))
def test_reversal_is_negated_scaled_upstream(g, lam):
    x = Tensor(np.zeros_like(g), requires_grad=True)
    T.backward(T.gradient_reversal(x, lam), g)
    np.testing.assert_array_equal(x.grad, -lam * g)
