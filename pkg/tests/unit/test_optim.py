"""
Test Suite: Adam updates and the step-decay schedule
"""

import math

import numpy as np
import pytest

from src.errors import NonFiniteError
from src.optim import Adam, StepDecay
from src.tensor_autodiff import Tensor


class TestAdam:
    """Bias-corrected first/second moment updates"""

    def test_first_step_moves_by_lr(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.array([0.5, -3.0])
        opt = Adam([p], lr=0.1)
        opt.step()
        # the bias-corrected first step is lr * sign(g)
        assert np.allclose(p.data, [0.9, -1.9], atol=1e-7)

    def test_matches_reference_over_several_steps(self, rng):
        start = rng.standard_normal(4)
        grads = [rng.standard_normal(4) for _ in range(5)]
        p = Tensor(start.copy(), requires_grad=True)
        opt = Adam([p], lr=0.01)
        for g in grads:
            p.grad = g.copy()
            opt.step()

        expected, m, v = start.copy(), np.zeros(4), np.zeros(4)
        for t, g in enumerate(grads, start=1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            expected = expected - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert np.allclose(p.data, expected, rtol=0, atol=1e-12)
        assert opt.state.step == 5

    def test_parameters_without_grad_are_untouched(self):
        a = Tensor(np.ones(2), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        a.grad = np.ones(2)
        opt = Adam([a, b], lr=0.1)
        opt.step()
        assert np.array_equal(b.data, np.ones(3))
        assert np.array_equal(opt.state.m[1], np.zeros(3))

    def test_clipping_rescales_to_norm(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        p.grad = np.array([3.0, 4.0])
        opt = Adam([p], lr=0.1)
        norm = opt.step(clip_norm=1.0)
        assert norm == pytest.approx(5.0)
        assert np.allclose(opt.state.m[0], 0.1 * np.array([0.6, 0.8]))

    def test_no_clipping_below_threshold(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        p.grad = np.array([0.3, 0.4])
        opt = Adam([p], lr=0.1)
        opt.step(clip_norm=1.0)
        assert np.allclose(opt.state.m[0], 0.1 * np.array([0.3, 0.4]))

    def test_non_finite_gradient_raises_before_update(self):
        p = Tensor(np.ones(2), requires_grad=True)
        p.grad = np.array([1.0, np.nan])
        opt = Adam([p], lr=0.1)
        with pytest.raises(NonFiniteError):
            opt.step()
        assert np.array_equal(p.data, np.ones(2))
        assert opt.state.step == 0

    def test_zero_grad(self):
        p = Tensor(np.ones(2), requires_grad=True)
        p.grad = np.ones(2)
        opt = Adam([p])
        opt.zero_grad()
        assert p.grad is None or np.array_equal(p.grad, np.zeros(2))

    def test_state_copy_is_independent(self):
        p = Tensor(np.ones(2), requires_grad=True)
        p.grad = np.ones(2)
        opt = Adam([p])
        opt.step()
        saved = opt.state.copy()
        p.grad = np.ones(2)
        opt.step()
        assert saved.step == 1
        assert not np.array_equal(saved.m[0], opt.state.m[0])


class TestStepDecay:
    """Learning rate divided by the factor after each boundary"""

    def test_stage_one_schedule(self):
        schedule = StepDecay(1e-3, (16, 24, 32, 36), 10.0)
        assert schedule.lr_at(0) == 1e-3
        assert schedule.lr_at(15) == 1e-3
        assert schedule.lr_at(16) == pytest.approx(1e-4)
        assert schedule.lr_at(30) == pytest.approx(1e-5)
        assert schedule.lr_at(39) == pytest.approx(1e-7)

    def test_no_boundaries(self):
        assert StepDecay(0.5).lr_at(100) == 0.5

    def test_monotone(self):
        schedule = StepDecay(1.0, (2, 5), 2.0)
        rates = [schedule.lr_at(e) for e in range(8)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))
        assert rates[-1] == pytest.approx(0.25)
        assert math.isclose(rates[2], 0.5)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
