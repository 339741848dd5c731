"""
Test Suite: Posterior distances and the parameter diversity loss
"""

import math

import numpy as np
import pytest

from src.errors import DomainError, ShapeError
from src.posterior_geometry import (DiagonalGaussian, DistanceMetric, bures_squared_diag, bures_squared_matrix,
                                    diverse_param_loss, kl_diag_gaussian, posterior_distance, w2_squared)
from src.tensor_autodiff import Tensor, grad_check


def _random_gaussian(rng, d):
    return DiagonalGaussian(rng.standard_normal(d), rng.uniform(0.05, 2.0, d))


class TestW2:
    """Closed-form Wasserstein-2 distance"""

    def test_matches_coordinatewise_1d_sum(self):
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(1000):
            d = int(rng.integers(1, 12))
            q1, q2 = _random_gaussian(rng, d), _random_gaussian(rng, d)
            expected = sum((a - b) ** 2 + (s - t) ** 2 for a, b, s, t in
                           zip(q1.mu.data, q2.mu.data, q1.sigma.data, q2.sigma.data))
            worst = max(worst, abs(w2_squared(q1, q2).item() - expected))
        print(f"worst W2 deviation over 1000 pairs: {worst:.2e}")
        assert worst < 1e-10

    def test_identical_posteriors(self, rng):
        q = _random_gaussian(rng, 5)
        assert w2_squared(q, q).item() == 0.0

    def test_symmetric(self, rng):
        q1, q2 = _random_gaussian(rng, 7), _random_gaussian(rng, 7)
        assert w2_squared(q1, q2).item() == pytest.approx(w2_squared(q2, q1).item(), abs=1e-12)

    def test_hand_example(self):
        q1 = DiagonalGaussian([0.0, 0.0], [1.0, 1.0])
        q2 = DiagonalGaussian([1.0, 2.0], [2.0, 1.0])
        assert w2_squared(q1, q2).item() == pytest.approx(1.0 + 4.0 + 1.0)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ShapeError):
            w2_squared(_random_gaussian(rng, 3), _random_gaussian(rng, 4))


class TestBures:
    """Diagonal shortcut against the full trace formula"""

    def test_diagonal_matches_matrix_form(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            s1, s2 = rng.uniform(0.1, 2.0, 4), rng.uniform(0.1, 2.0, 4)
            full = bures_squared_matrix(np.diag(s1 ** 2), np.diag(s2 ** 2))
            assert bures_squared_diag(s1, s2).item() == pytest.approx(full, abs=1e-10)

    def test_matrix_form_identical_covariances(self):
        cov = np.array([[2.0, 0.3], [0.3, 1.0]])
        assert bures_squared_matrix(cov, cov) == pytest.approx(0.0, abs=1e-10)


class TestKL:
    """Closed-form Gaussian KL"""

    def test_zero_for_identical(self, rng):
        q = _random_gaussian(rng, 6)
        assert kl_diag_gaussian(q, q).item() == pytest.approx(0.0, abs=1e-12)

    def test_non_negative_and_asymmetric(self, rng):
        q1, q2 = _random_gaussian(rng, 6), _random_gaussian(rng, 6)
        forward, backward = kl_diag_gaussian(q1, q2).item(), kl_diag_gaussian(q2, q1).item()
        assert forward > 0 and backward > 0
        assert forward != pytest.approx(backward)

    @pytest.mark.slow
    @pytest.mark.timeout(120)
    def test_matches_monte_carlo(self):
        rng = np.random.default_rng(99)
        draws = 1_000_000
        within_three = 0
        for _ in range(20):
            q1, q2 = _random_gaussian(rng, 3), _random_gaussian(rng, 3)
            mu1, s1, mu2, s2 = q1.mu.data, q1.sigma.data, q2.mu.data, q2.sigma.data
            x = mu1 + s1 * rng.standard_normal((draws, 3))
            log_ratio = np.sum(np.log(s2 / s1) - 0.5 * ((x - mu1) / s1) ** 2 + 0.5 * ((x - mu2) / s2) ** 2, axis=1)
            estimate = log_ratio.mean()
            stderr = log_ratio.std() / math.sqrt(draws)
            exact = kl_diag_gaussian(q1, q2).item()
            z = abs(estimate - exact) / stderr
            assert z < 4.0, f"KL {exact:.5f} vs MC {estimate:.5f} ({z:.1f} standard errors)"
            within_three += z < 3.0
        assert within_three >= 19


class TestDiversityLoss:
    """log(1 + exp(-D))"""

    def test_value_at_zero(self):
        assert diverse_param_loss(0.0).item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_strictly_decreasing_and_bounded(self):
        values = [diverse_param_loss(d).item() for d in (0.0, 0.5, 1.0, 5.0, 50.0, 800.0)]
        assert all(a > b for a, b in zip(values, values[1:]) if a > 0 and b > 0)
        assert all(0.0 <= v <= math.log(2.0) for v in values)
        assert np.isfinite(values[-1])

    def test_gradient_pushes_distance_up(self):
        d = Tensor(np.array(0.7), requires_grad=True)
        diverse_param_loss(d).backward()
        assert d.grad < 0
        assert float(d.grad) == pytest.approx(-1.0 / (1.0 + math.exp(0.7)))

    @pytest.mark.parametrize("metric", [DistanceMetric.W2, DistanceMetric.KL])
    def test_gradient_check_against_fixed_peer(self, rng, metric):
        mu, rho = Tensor(rng.standard_normal(6) * 0.3), Tensor(rng.standard_normal(6) * 0.3)
        peer = DiagonalGaussian(rng.standard_normal(6) * 0.3, rng.uniform(0.5, 1.0, 6))

        def loss(m, r):
            return diverse_param_loss(posterior_distance(DiagonalGaussian(m, r.softplus()), peer, metric))

        assert grad_check(loss, [mu, rho]).passed


class TestDiagonalGaussian:
    """Validation"""

    def test_sigma_must_be_positive(self):
        with pytest.raises(DomainError):
            DiagonalGaussian([0.0, 0.0], [1.0, 0.0])

    def test_lengths_must_match(self):
        with pytest.raises(ShapeError):
            DiagonalGaussian([0.0, 0.0], [1.0])

    def test_from_model(self, micro_arch, rng):
        from src.variational_net import BnnModel

        model = BnnModel(micro_arch, rng=rng)
        q = DiagonalGaussian.from_model(model)
        assert q.dim == model.num_parameters
        assert q.mu.requires_grad


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
