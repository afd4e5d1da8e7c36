import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import check_grads, weighted_sum
from milore.tensor import (
    GraphError,
    ShapeError,
    Tensor,
    cross_entropy_with_logits,
    embedding_lookup,
    gelu,
    getitem,
    layer_norm,
    linear,
    log_softmax,
    matmul,
    no_grad,
    softmax,
)


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_projector(self):
        out = matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])

    def test_gradient_of_sum_3x4_by_4x2(self, rng):
        a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
        check_grads(lambda: matmul(a, b).sum(), [a, b])

    def test_batched_broadcast_gradient(self, rng):
        a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
        check_grads(lambda: weighted_sum(matmul(a, b), np.random.default_rng(0)), [a, b])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_analytic(self):
        np.testing.assert_allclose(softmax(Tensor([math.log(3.0), 0.0])).data, [0.75, 0.25], atol=1e-15)

    def test_large_logits_do_not_overflow(self):
        with np.errstate(over="raise"):
            p = softmax(Tensor([1000.0, 0.0])).data
        assert p[0] == 1.0 and 0.0 <= p[1] < 1e-300

    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
    def test_rows_on_simplex(self, x):
        p = softmax(Tensor(x)).data
        assert np.all(p >= 0) and np.all(p <= 1)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)

    def test_gradients(self, rng):
        x = leaf(rng, 4, 6)
        check_grads(lambda: weighted_sum(softmax(x), np.random.default_rng(1)), [x])
        check_grads(lambda: weighted_sum(log_softmax(x), np.random.default_rng(2)), [x])


class TestCrossEntropy:
    def test_uniform_logits_equal_log_k(self):
        loss = cross_entropy_with_logits(Tensor(np.zeros((5, 4))), [0, 1, 2, 3, 1])
        assert abs(loss.item() - math.log(4)) < 1e-12

    def test_gradient_with_index_and_sum(self, rng):
        z = leaf(rng, 6, 5)
        tg = rng.integers(0, 5, size=6)
        check_grads(lambda: cross_entropy_with_logits(z, tg, index=[0, 2, 5]), [z])
        check_grads(lambda: cross_entropy_with_logits(z, tg, reduction="sum"), [z])

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            cross_entropy_with_logits(Tensor(np.zeros((2, 3))), [0, 3])


class TestElementwise:
    def test_gelu_zero(self):
        assert gelu(Tensor([0.0])).data[0] == 0.0

    def test_layer_norm_of_constant_is_zero(self):
        out = layer_norm(Tensor(np.full((2, 7), 3.5)))
        np.testing.assert_array_equal(out.data, np.zeros((2, 7)))

    def test_gelu_gradient(self, rng):
        x = leaf(rng, 3, 4, scale=2.0)
        check_grads(lambda: weighted_sum(gelu(x), np.random.default_rng(3)), [x])

    def test_layer_norm_gradient(self, rng):
        x, w, b = leaf(rng, 3, 6), leaf(rng, 6), leaf(rng, 6)
        check_grads(lambda: weighted_sum(layer_norm(x, w, b), np.random.default_rng(4)), [x, w, b])

    def test_linear_gradient(self, rng):
        x, w, b = leaf(rng, 2, 3, 4), leaf(rng, 5, 4), leaf(rng, 5)
        check_grads(lambda: weighted_sum(linear(x, w, b), np.random.default_rng(5)), [x, w, b])

    def test_arithmetic_and_reductions(self, rng):
        a, b = leaf(rng, 3, 4), leaf(rng, 4)
        w = Tensor(rng.normal(size=(2, 6)))

        def f():
            y = (a * b - b) / 3.0 + 2.0 * a
            return (y.transpose(1, 0).reshape(2, 6) * w).sum() + y.mean(axis=0).sum() - (-a).sum(axis=1).mean()

        check_grads(f, [a, b])

    def test_getitem_and_embedding_gradients(self, rng):
        table = leaf(rng, 5, 3)
        idx = np.array([0, 3, 3, 1])
        check_grads(lambda: weighted_sum(embedding_lookup(table, idx), np.random.default_rng(7)), [table])
        check_grads(lambda: weighted_sum(getitem(table, (slice(1, 4), 2)), np.random.default_rng(8)), [table])
        check_grads(lambda: weighted_sum(getitem(table, np.array([4, 0]), unique=True), np.random.default_rng(9)), [table])


class TestGraph:
    def test_shared_subexpression_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * x + x * 3.0
        y.sum().backward()
        assert x.grad[0] == pytest.approx(2 * 2.0 + 3.0)

    def test_second_backward_raises(self):
        x = Tensor([1.0], requires_grad=True)
        y = (x * 2.0).sum()
        y.backward()
        with pytest.raises(GraphError):
            y.backward()

    def test_no_grad_builds_no_graph(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_item_requires_single_element(self):
        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0]).item()

    def test_forward_is_bit_identical_across_runs(self, rng):
        x = rng.normal(size=(4, 8))
        w = rng.normal(size=(8, 8))
        runs = [layer_norm(gelu(matmul(Tensor(x), Tensor(w)))).data for _ in range(3)]
        assert all(np.array_equal(runs[0], r) for r in runs[1:])
