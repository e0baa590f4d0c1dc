import numpy as np
import pytest

from defectnet import ops
from defectnet.tensor import (
    NonFiniteError,
    Tensor,
    concat,
    elementwise,
    no_grad,
    reduce,
    zero_grads,
)

from gradcheck import assert_gradients_close


class TestElementwise:
    def test_add(self):
        out = Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_mul_by_scalar_zero(self):
        out = Tensor([2.0]) * 0.0
        np.testing.assert_array_equal(out.data, [0.0])

    def test_log_of_e(self):
        out = Tensor([np.e]).log()
        np.testing.assert_allclose(out.data, [1.0], rtol=0, atol=1e-15)

    def test_sub_div_square_clamp(self):
        a = Tensor([6.0, 2.0])
        np.testing.assert_array_equal((a - Tensor([1.0, 1.0])).data, [5.0, 1.0])
        np.testing.assert_array_equal((a / 2.0).data, [3.0, 1.0])
        np.testing.assert_array_equal(a.square().data, [36.0, 4.0])
        np.testing.assert_array_equal(a.clamp_min(3.0).data, [6.0, 3.0])

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError, match="shapes must match"):
            Tensor([1.0, 2.0]) + Tensor([1.0, 2.0, 3.0])

    def test_div_by_exact_zero_raises(self):
        with pytest.raises(ZeroDivisionError):
            Tensor([1.0]) / Tensor([0.0])

    def test_log_nonpositive_raises(self):
        with pytest.raises(ValueError, match="log undefined"):
            Tensor([0.0]).log()
        with pytest.raises(ValueError, match="log undefined"):
            Tensor([-1.0]).log()

    def test_recorded_only_with_requires_grad(self):
        out = Tensor([1.0]) + Tensor([2.0])
        assert not out.requires_grad and out._backward is None
        out = Tensor([1.0], requires_grad=True) + Tensor([2.0])
        assert out.requires_grad and out._backward is not None

    def test_dispatcher(self):
        np.testing.assert_array_equal(elementwise("add", Tensor([1.0]), Tensor([2.0])).data, [3.0])
        np.testing.assert_array_equal(elementwise("clamp-min", Tensor([0.2]), 1.0).data, [1.0])
        with pytest.raises(ValueError, match="unknown elementwise kind"):
            elementwise("pow", Tensor([1.0]), 2.0)


class TestReduce:
    def test_sum_mean_max(self):
        assert reduce("sum", Tensor([1.0, 2.0, 3.0])).item() == 6.0
        assert reduce("mean", Tensor([2.0, 4.0])).item() == 3.0
        assert reduce("max", Tensor([-1.0, 5.0, 2.0])).item() == 5.0

    def test_axis_reduction(self):
        t = Tensor(np.arange(6.0).reshape(2, 3))
        np.testing.assert_array_equal(t.sum(axes=1).data, [3.0, 12.0])
        np.testing.assert_array_equal(t.max(axes=0).data, [3.0, 4.0, 5.0])

    def test_empty_axis_raises(self):
        with pytest.raises(ValueError, match="empty axis"):
            Tensor(np.zeros((2, 0))).sum(axes=1)

    def test_sum_gradient_is_broadcast_ones(self):
        t = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        t.sum().backward()
        np.testing.assert_array_equal(t.grad, np.ones((2, 3)))

    def test_max_gradient_first_tie_row_major(self):
        t = Tensor([[1.0, 5.0], [5.0, 0.0]], requires_grad=True)
        t.max().backward()
        np.testing.assert_array_equal(t.grad, [[0.0, 1.0], [0.0, 0.0]])

    def test_mean_gradient(self):
        t = Tensor([2.0, 4.0, 6.0, 8.0], requires_grad=True)
        t.mean().backward()
        np.testing.assert_array_equal(t.grad, np.full(4, 0.25))


class TestBackward:
    def test_square_loss(self):
        x = Tensor([3.0], requires_grad=True)
        x.square().sum().backward()
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_product_rule(self):
        x = Tensor([2.0], requires_grad=True)
        y = Tensor([5.0], requires_grad=True)
        (x * y).sum().backward()
        np.testing.assert_array_equal(x.grad, [5.0])
        np.testing.assert_array_equal(y.grad, [2.0])

    def test_leaky_relu_negative_slope(self):
        x = Tensor([-1.0], requires_grad=True)
        ops.leaky_relu(x, 0.1).sum().backward()
        np.testing.assert_allclose(x.grad, [0.1])

    def test_non_scalar_raises(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            (x * 2.0).backward()

    def test_double_backward_raises(self):
        x = Tensor([1.0], requires_grad=True)
        loss = x.square().sum()
        loss.backward()
        with pytest.raises(RuntimeError, match="already ran"):
            loss.backward()

    def test_fanout_accumulates_additively(self):
        x = Tensor([3.0], requires_grad=True)
        y = x * 2.0
        (y + y).sum().backward()
        np.testing.assert_array_equal(x.grad, [4.0])

    def test_shared_subexpression_equals_expanded(self):
        vals = np.array([1.3, -0.4, 2.1])
        x1 = Tensor(vals, requires_grad=True)
        shared = x1 * x1
        ((shared + shared) * Tensor([2.0, 3.0, 4.0])).sum().backward()

        x2 = Tensor(vals, requires_grad=True)
        (((x2 * x2) + (x2 * x2)) * Tensor([2.0, 3.0, 4.0])).sum().backward()
        np.testing.assert_array_equal(x1.grad, x2.grad)

    def test_each_recorded_op_fires_once(self):
        fired = []
        x = Tensor([2.0], requires_grad=True)
        y = x * 3.0
        orig = y._backward

        def counting(g):
            fired.append(1)
            orig(g)

        y._backward = counting
        (y + y).sum().backward()  # diamond: y consumed twice
        assert len(fired) == 1

    def test_grad_reset_between_steps(self):
        x = Tensor([1.0], requires_grad=True)
        x.square().sum().backward()
        first = x.grad.copy()
        zero_grads([x])
        x.square().sum().backward()
        np.testing.assert_array_equal(x.grad, first)

    def test_no_grad_suspends_recording(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad and y._backward is None


class TestGraphOps:
    def test_concat_forward_backward(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.full((2, 2), 2.0), requires_grad=True)
        out = concat([a, b], axis=1)
        assert out.shape == (2, 5)
        (out * Tensor(np.arange(10.0).reshape(2, 5))).sum().backward()
        np.testing.assert_array_equal(a.grad, [[0, 1, 2], [5, 6, 7]])
        np.testing.assert_array_equal(b.grad, [[3, 4], [8, 9]])

    def test_reshape_backward(self):
        x = Tensor(np.arange(6.0), requires_grad=True)
        x.reshape((2, 3)).sum(axes=1).square().sum().backward()
        assert x.grad.shape == (6,)

    def test_assert_finite(self):
        Tensor([1.0]).assert_finite()
        with pytest.raises(NonFiniteError):
            Tensor([np.nan]).assert_finite("loss")
        with pytest.raises(NonFiniteError):
            Tensor([np.inf]).assert_finite()

    def test_scalar_tensor_broadcast_grad(self):
        s = Tensor([2.0], requires_grad=True)
        x = Tensor(np.ones(4), requires_grad=True)
        (x * s).sum().backward()
        np.testing.assert_array_equal(s.grad, [4.0])
        np.testing.assert_array_equal(x.grad, np.full(4, 2.0))


def _random_smooth_program(rng):
    """A random composition of smooth recorded ops ending in a scalar."""

    def f(a, b, c):
        t1 = (a * b + c).square()
        t2 = (t1 + 0.5) / (b.square() + 1.5)
        t3 = (t2 + 1.2).log() * a
        t4 = t3.mean(axes=1) + t2.sum(axes=1)
        return (t4 * t4).sum() / 7.0 + t1.max()

    shapes = [(2, 3), (2, 3), (2, 3)]
    return f, [rng.uniform(-2.0, 2.0, s) for s in shapes]


class TestFiniteDifferenceProperty:
    """Autodiff of composed losses matches central finite differences."""

    @pytest.mark.parametrize("seed", range(6))
    def test_random_composition(self, seed):
        rng = np.random.default_rng(seed)
        f, arrays = _random_smooth_program(rng)
        # keep max() away from ties so the FD quotient stays one-sided
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        assert_gradients_close(f, tensors)

    def test_clamp_min_away_from_kink(self):
        x = Tensor(np.array([0.2, 0.9, 1.4, 2.0]), requires_grad=True)
        assert_gradients_close(lambda t: t.clamp_min(1.0).sum(), [x])
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0, 1.0])
