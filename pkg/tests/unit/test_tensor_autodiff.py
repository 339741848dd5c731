"""
Test Suite: Tensor engine and reverse-mode differentiation
"""

import math

import numpy as np
import pytest

from src.errors import DomainError, GraphError, NonFiniteError, ShapeError
from src.tensor_autodiff import (Graph, Tensor, chunk, concat, get_default_dtype, grad_check, no_grad, precision,
                                 softplus, softplus_value, tensor)


class TestForwardPrimitives:
    """Values of the forward kernels"""

    def test_softmax_of_zeros_is_uniform(self):
        out = tensor([[0.0, 0.0, 0.0]]).softmax()
        assert np.allclose(out.data, 1.0 / 3.0)

    def test_softmax_rows_sum_to_one(self, rng):
        out = Tensor(rng.standard_normal((5, 7)) * 30).softmax()
        assert np.all(out.data >= 0)
        assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-6)

    def test_log_softmax_matches_log_of_softmax(self, rng):
        x = Tensor(rng.standard_normal((4, 3)))
        assert np.allclose(x.log_softmax().data, np.log(x.softmax().data), atol=1e-12)

    def test_identity_matmul(self, rng):
        a = rng.standard_normal((3, 5))
        out = Tensor(np.eye(3)) @ Tensor(a)
        assert np.array_equal(out.data, a)

    def test_batched_matmul(self, rng):
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 5))
        assert np.allclose((Tensor(a) @ Tensor(b)).data, a @ b)

    def test_softplus_of_zero_is_ln2(self):
        assert softplus(tensor(0.0)).item() == pytest.approx(math.log(2.0), abs=1e-15)
        assert softplus_value(0.0) == pytest.approx(0.6931471805599453)

    def test_softplus_large_inputs_stay_finite(self):
        out = softplus(tensor([800.0, -800.0]))
        assert out.data[0] == pytest.approx(800.0)
        assert out.data[1] >= 0.0 and np.isfinite(out.data[1])

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeError, match="3"):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_no_implicit_broadcasting(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones(3))

    def test_scalar_broadcasting_allowed(self):
        out = Tensor(np.ones((2, 3))) * 2.0 + 1.0
        assert np.array_equal(out.data, np.full((2, 3), 3.0))

    def test_log_of_non_positive_is_domain_error(self):
        with pytest.raises(DomainError):
            tensor([1.0, 0.0]).log()

    def test_division_by_zero_is_domain_error(self):
        with pytest.raises(DomainError):
            tensor([1.0, 2.0]) / tensor([1.0, 0.0])

    def test_chunk_and_concat_roundtrip(self, rng):
        x = Tensor(rng.standard_normal((2, 8)))
        pieces = chunk(x, 4, axis=1)
        assert [p.shape for p in pieces] == [(2, 2)] * 4
        assert np.array_equal(concat(pieces, axis=1).data, x.data)

    def test_chunk_requires_divisible_axis(self):
        with pytest.raises(ShapeError):
            chunk(Tensor(np.ones((2, 5))), 2, axis=1)

    def test_expand_then_sum_gradient(self):
        b = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        b.reshape(1, 3).expand(4, 3).sum().backward()
        assert np.array_equal(b.grad, np.full(3, 4.0))

    def test_reshape_infers_one_dimension(self, rng):
        x = Tensor(rng.standard_normal((2, 6)))
        assert x.reshape(-1).shape == (12,)
        assert x.reshape(3, -1).shape == (3, 4)
        assert x.reshape((-1, 2, 3)).shape == (2, 2, 3)

        weights = rng.standard_normal(12)
        report = grad_check(lambda v: (v.reshape(-1) * Tensor(weights)).sum() * v.reshape(4, -1).sum(), [x])
        assert report.passed, report.max_error

    @pytest.mark.parametrize("shape", [(-1, -1), (5, -1), (-2, 6), (0, -1)])
    def test_reshape_rejects_bad_shapes(self, shape):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 6))).reshape(*shape)

    def test_repeated_index_accumulates_gradient(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        x[np.array([0, 0, 2])].sum().backward()
        assert np.array_equal(x.grad, np.array([2.0, 0.0, 1.0]))


class TestBackward:
    """Gradients, graph bookkeeping and error paths"""

    def test_sum_gives_all_ones(self, rng):
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        x.sum().backward()
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_product_rule(self):
        x = tensor(2.0, requires_grad=True)
        y = tensor(3.0, requires_grad=True)
        (x * y).backward()
        assert x.grad == pytest.approx(3.0)
        assert y.grad == pytest.approx(2.0)

    def test_backward_on_non_scalar_fails(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError, match="scalar"):
            (x * 2.0).backward()

    def test_second_backward_without_forward_fails(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = (x * x).sum()
        loss.backward()
        with pytest.raises(GraphError, match="consumed"):
            loss.backward()

    def test_fresh_forward_after_backward_works(self):
        x = Tensor(np.ones(3), requires_grad=True)
        (x * x).sum().backward()
        first = x.grad.copy()
        x.zero_grad()
        (x * x).sum().backward()
        assert np.array_equal(first, x.grad)

    def test_non_finite_loss_is_rejected(self):
        x = Tensor(np.array([np.inf]), requires_grad=True)
        with pytest.raises(NonFiniteError):
            (x * 1.0).sum().backward()

    def test_graph_records_nodes_in_topological_order(self):
        x = Tensor(np.ones(2), requires_grad=True)
        y = (x * 2.0).exp().sum()
        graph = Graph(y)
        assert [node.op for node in graph.nodes] == ['scale', 'exp', 'sum']
        assert graph.order[-1] is y

    def test_linearity_of_backward(self, rng):
        data = rng.standard_normal(5)
        x = Tensor(data.copy(), requires_grad=True)
        (x.exp().sum() + (x * x).sum()).backward()
        joint = x.grad.copy()

        a = Tensor(data.copy(), requires_grad=True)
        a.exp().sum().backward()
        b = Tensor(data.copy(), requires_grad=True)
        (b * b).sum().backward()
        assert np.allclose(joint, a.grad + b.grad, atol=1e-10)

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            y = (x * 3.0).sum()
        assert not y.requires_grad
        assert y.creator is None

    def test_repeated_forward_backward_is_bit_identical(self, rng):
        data = rng.standard_normal((4, 3))
        grads = []
        for _ in range(2):
            w = Tensor(data.copy(), requires_grad=True)
            (w @ w.transpose()).softmax().log().mean().backward()
            grads.append(w.grad)
        assert np.array_equal(grads[0], grads[1])

    def test_norm_gradient_at_zero_is_zero(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        (x.norm() + x.sum()).backward()
        assert np.array_equal(x.grad, np.ones(3))


class TestGradCheck:
    """Central-difference oracle"""

    def test_squared_norm(self):
        x = tensor([1.0, 2.0])
        report = grad_check(lambda v: (v * v).sum(), [x])
        assert report.passed
        assert report.max_error < 1e-8

    def test_constant_function(self):
        x = tensor([1.0, 2.0])
        report = grad_check(lambda v: tensor(5.0), [x])
        assert report.max_error == 0.0

    def test_two_layer_mlp_cross_entropy(self, rng):
        w1 = Tensor(rng.standard_normal((3, 5)))
        w2 = Tensor(rng.standard_normal((5, 4)))
        x = Tensor(rng.standard_normal((6, 3)))
        target = Tensor(np.eye(4)[rng.integers(0, 4, 6)])

        def loss(a, b):
            return -((((x @ a).relu() @ b).log_softmax() * target).sum(axis=1).mean())

        report = grad_check(loss, [w1, w2])
        print(f"mlp grad check max rel error {report.max_error:.2e}")
        assert report.passed

    def test_every_primitive(self, rng):
        a = Tensor(rng.uniform(0.5, 1.5, (3, 4)))
        b = Tensor(rng.uniform(0.5, 1.5, (3, 4)))

        def f(p, q):
            mixed = (p / q - q).softplus() + (p * q).exp() * 0.1 + p.log()
            rows = mixed.softmax().norm(axis=1) + mixed.mean(axis=1)
            pieces = concat(chunk(mixed, 2, axis=1)[::-1], axis=1)
            return rows.sum() + (pieces @ pieces.T).sum() * 0.01 + mixed[1:, :2].sum()

        assert grad_check(f, [a, b]).passed

    def test_non_finite_value_is_rejected(self):
        x = tensor([1.0])
        with pytest.raises(NonFiniteError):
            grad_check(lambda v: (v * 1000.0).exp().sum(), [x])

    def test_point_is_restored(self):
        x = tensor([0.3, -0.7])
        before = x.data.copy()
        grad_check(lambda v: (v * v * v).sum(), [x])
        assert np.array_equal(x.data, before)
        assert x.grad is None


class TestPrecision:
    """Default dtype switching"""

    def test_precision_context(self):
        with precision('float32'):
            assert tensor([1.0]).data.dtype == np.float32
        assert get_default_dtype() == np.float64

    def test_unknown_precision(self):
        with pytest.raises(ValueError):
            with precision('float16'):
                pass


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
