import numpy as np
import pytest

from flesd.autodiff import Tensor
from flesd.optim import (
    Adam,
    adam_step,
    finite_diff_gradient,
    init_adam_state,
)

from testutil import rel_err


def manual_adam_trace(value, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Independent hand evaluation of the Adam recurrence."""
    v = float(value)
    m1 = m2 = 0.0
    for t, g in enumerate(grads, start=1):
        m1 = b1 * m1 + (1 - b1) * g
        m2 = b2 * m2 + (1 - b2) * g * g
        mh = m1 / (1 - b1 ** t)
        vh = m2 / (1 - b2 ** t)
        v -= lr * mh / (np.sqrt(vh) + eps)
    return v


class TestAdam:
    def test_zero_gradient_leaves_value(self):
        p = Tensor(np.array([[1.5, -2.0]]))
        p.zero_grad()
        s = init_adam_state(p, lr=1e-3)
        adam_step(p, s)
        assert np.array_equal(p.value, np.array([[1.5, -2.0]]))
        assert s.step == 1

    def test_first_step_is_about_lr_times_sign(self):
        for g in (0.3, -7.0):
            p = Tensor(np.array([[1.0]]))
            p.zero_grad()
            p.grad[0, 0] = g
            s = init_adam_state(p, lr=1e-3)
            adam_step(p, s)
            delta = p.value[0, 0] - 1.0
            # bias correction makes the first step lr * sign(g) up to eps
            assert delta == pytest.approx(-1e-3 * np.sign(g), rel=1e-4)
            expected = manual_adam_trace(1.0, [g])
            assert p.value[0, 0] == pytest.approx(expected, abs=1e-15)

    def test_matches_manual_recurrence_over_ten_steps(self):
        rng = np.random.default_rng(0)
        grads = rng.normal(size=10)
        p = Tensor(np.array([[0.7]]))
        s = init_adam_state(p, lr=2e-3)
        for g in grads:
            p.zero_grad()
            p.grad[0, 0] = g
            adam_step(p, s)
        assert p.value[0, 0] == pytest.approx(
            manual_adam_trace(0.7, grads, lr=2e-3), abs=1e-14)

    def test_identical_streams_stay_identical(self):
        rng = np.random.default_rng(1)
        grads = [rng.normal(size=(3, 2)) for _ in range(5)]
        ps = [Tensor(np.full((3, 2), 0.25)) for _ in range(2)]
        states = [init_adam_state(p) for p in ps]
        for g in grads:
            for p, s in zip(ps, states):
                p.zero_grad()
                p.grad[...] = g
                adam_step(p, s)
        assert np.array_equal(ps[0].value, ps[1].value)

    def test_second_moment_nonnegative(self):
        p = Tensor(np.ones((2, 2)))
        s = init_adam_state(p)
        rng = np.random.default_rng(2)
        for _ in range(20):
            p.zero_grad()
            p.grad[...] = rng.normal(size=(2, 2))
            adam_step(p, s)
        assert (s.m2 >= 0.0).all()
        assert s.m1.shape == p.value.shape and s.m2.shape == p.value.shape

    def test_adam_wrapper_steps_all_params(self):
        ps = [Tensor(np.ones((1, 1))), Tensor(np.ones((2, 1)))]
        opt = Adam(ps, lr=1e-2)
        opt.zero_grad()
        for p in ps:
            p.grad[...] = 1.0
        opt.step()
        assert all((p.value < 1.0).all() for p in ps)


class TestFiniteDiff:
    def test_sum_of_squares(self):
        rng = np.random.default_rng(3)
        v = rng.normal(size=(3, 4))
        grad = finite_diff_gradient(lambda x: float((x * x).sum()), v, 1e-5)
        assert rel_err(grad, 2.0 * v) < 1e-6

    def test_constant_function(self):
        grad = finite_diff_gradient(lambda x: 42.0, np.ones((2, 2)), 1e-5)
        assert np.abs(grad).max() < 1e-9
