"""Tests for the dense helpers and the autodiff engine"""
import math

import numpy as np
import pytest

from app.exceptions import KTooLarge, LengthMismatch, NonPositiveTemperature, ShapeMismatch, ZeroRow
from app.numerics import (
    Tensor,
    concat,
    cross_entropy,
    gather,
    gelu,
    grad_check,
    l2_normalize,
    layer_norm,
    log,
    masked_sum,
    matmul,
    mean,
    no_grad,
    precision,
    reshape,
    rowwise_l2_normalize,
    softmax,
    softmax_temp,
    topk_rowwise,
    transpose,
)


class TestMatmul:

    def test_identity(self):
        A = np.arange(6, dtype=np.float32).reshape(2, 3)
        np.testing.assert_array_equal(matmul(A, np.eye(3, dtype=np.float32)), A)

    def test_cosine_of_unit_rows(self):
        A = rowwise_l2_normalize(np.array([[1.0, 1.0], [1.0, 0.0]]))
        S = matmul(A, A.T)
        assert S[0, 1] == pytest.approx(1 / math.sqrt(2), abs=1e-6)

    def test_inner_dimension_mismatch(self):
        with pytest.raises(ShapeMismatch):
            matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestRowwiseNormalize:

    def test_three_four_five(self):
        np.testing.assert_allclose(rowwise_l2_normalize(np.array([[3.0, 4.0]])), [[0.6, 0.8]], atol=1e-7)

    def test_zero_row(self):
        with pytest.raises(ZeroRow):
            rowwise_l2_normalize(np.array([[1.0, 0.0], [0.0, 0.0]]))

    def test_rows_unit_norm(self, rng):
        M = rowwise_l2_normalize(rng.standard_normal((50, 7)))
        np.testing.assert_allclose(np.linalg.norm(M, axis=1), 1.0, atol=1e-6)

    def test_idempotent(self, rng):
        M = rowwise_l2_normalize(rng.standard_normal((30, 5)))
        np.testing.assert_allclose(rowwise_l2_normalize(M), M, atol=1e-6)


class TestSoftmaxTemp:

    def test_symmetric(self):
        np.testing.assert_allclose(softmax_temp(np.array([0.0, 0.0]), 0.1), [0.5, 0.5], atol=1e-7)

    def test_analytic(self):
        np.testing.assert_allclose(softmax_temp(np.array([math.log(2), 0.0]), 1.0), [2 / 3, 1 / 3], atol=1e-6)

    def test_matches_float64_oracle(self):
        v = np.array([1.0, 2.0, 3.0])
        e = np.exp(v / 0.5)
        np.testing.assert_allclose(softmax_temp(v, 0.5), e / e.sum(), atol=1e-6)

    def test_sums_to_one_over_temperature_range(self, rng):
        for tau in (1e-3, 0.07, 1.0, 10.0):
            P = softmax_temp(rng.uniform(-1, 1, size=(20, 30)), tau)
            np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-6)
            assert np.all(np.isfinite(P))

    @pytest.mark.parametrize('tau', [0.0, -0.5])
    def test_rejects_non_positive_temperature(self, tau):
        with pytest.raises(NonPositiveTemperature):
            softmax_temp(np.zeros(3), tau)


class TestCrossEntropy:

    def test_uniform(self):
        p = np.full(4, 0.25)
        assert cross_entropy(p, p) == pytest.approx(math.log(4), abs=1e-6)

    def test_one_hot_with_zero_target_mass(self):
        assert cross_entropy(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == pytest.approx(0.0, abs=1e-7)

    def test_clamp_keeps_loss_finite(self):
        value = cross_entropy(np.array([0.0, 1.0]), np.array([1.0, 0.0]))
        assert value == pytest.approx(-math.log(1e-12), rel=1e-3)

    def test_rowwise(self):
        P = np.array([[0.5, 0.5], [1.0, 0.0]])
        np.testing.assert_allclose(cross_entropy(P, P), [math.log(2), 0.0], atol=1e-6)

    def test_never_below_entropy(self, rng):
        P = rng.dirichlet(np.ones(6), size=200)
        Q = rng.dirichlet(np.full(6, 0.5), size=200)
        assert np.all(cross_entropy(P, Q) >= cross_entropy(P, P) - 1e-5)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            cross_entropy(np.ones(3) / 3, np.ones(4) / 4)


class TestTopK:

    def test_descending(self):
        values, indices = topk_rowwise(np.array([[0.1, 0.9, 0.5]]), 2)
        np.testing.assert_array_equal(indices, [[1, 2]])
        np.testing.assert_allclose(values, [[0.9, 0.5]])

    def test_ties_break_to_lower_index(self):
        _, indices = topk_rowwise(np.array([[1.0, 1.0, 0.0, 1.0]]), 3)
        np.testing.assert_array_equal(indices, [[0, 1, 3]])

    def test_matches_exhaustive_sort(self, rng):
        S = rng.standard_normal((30, 40))
        _, indices = topk_rowwise(S, 5)
        for row, idx in zip(S, indices):
            assert list(idx) == sorted(range(40), key=lambda j: -row[j])[:5]

    def test_k_too_large(self):
        with pytest.raises(KTooLarge):
            topk_rowwise(np.zeros((2, 3)), 4)


class TestTensorGraph:

    def test_shared_node_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = x * x + x
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [7.0])

    def test_broadcast_gradient_is_reduced(self):
        a = Tensor(np.ones((4, 3)), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        (a + b).sum().backward()
        np.testing.assert_allclose(b.grad, [4.0, 4.0, 4.0])

    def test_no_grad_builds_constants(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad
        assert y._parents == ()

    def test_detach_stops_gradient(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        (x * x.detach()).sum().backward()
        np.testing.assert_allclose(x.grad, [2.0])

    def test_precision_switches_dtype(self):
        assert Tensor([1.0]).data.dtype == np.float32
        with precision(np.float64):
            assert Tensor([1.0]).data.dtype == np.float64
        assert Tensor([1.0]).data.dtype == np.float32

    def test_division_only_by_scalars(self):
        with pytest.raises(ShapeMismatch):
            Tensor(np.ones(2)) / Tensor(np.ones(2))


class TestGradCheck:
    """Every differentiable operator against central differences in float64"""

    @pytest.fixture
    def weights(self):
        return np.random.default_rng(7).uniform(0.5, 1.5, size=(3, 4))

    def test_matmul(self, weights):
        B = np.random.default_rng(1).standard_normal((4, 2))
        assert grad_check(lambda x: masked_sum(matmul(x, B) * matmul(x, B)), weights) < 1e-4

    def test_l2_normalize(self, weights):
        w = np.random.default_rng(2).uniform(0.5, 1.5, size=(3, 4))
        assert grad_check(lambda x: masked_sum(l2_normalize(x) * w), weights) < 1e-4

    def test_softmax_log(self, weights):
        w = np.random.default_rng(3).uniform(0.5, 1.5, size=(3, 4))
        assert grad_check(lambda x: masked_sum(log(softmax(x)) * w), weights) < 1e-4

    def test_layer_norm_gelu(self, weights):
        w = np.random.default_rng(4).uniform(0.5, 1.5, size=(3, 4))
        assert grad_check(lambda x: masked_sum(gelu(layer_norm(x)) * w), weights) < 1e-4

    def test_gather_with_repeats(self, weights):
        w = np.random.default_rng(5).uniform(0.5, 1.5, size=(4, 4))
        assert grad_check(lambda x: masked_sum(gather(x, [0, 2, 2, 1]) * w), weights) < 1e-4

    def test_masked_sum_and_mean(self, weights):
        mask = np.array([[1, 0, 1, 1], [0, 1, 1, 0], [1, 1, 0, 1]])
        assert grad_check(lambda x: masked_sum(x * x, mask) + mean(x * x), weights) < 1e-4

    def test_shape_plumbing(self, weights):
        w = np.random.default_rng(6).uniform(0.5, 1.5, size=(4, 6))

        def f(x):
            y = concat([transpose(x), reshape(x * x, (4, 3))], axis=1)
            return masked_sum(y * w)

        assert grad_check(f, weights) < 1e-4
