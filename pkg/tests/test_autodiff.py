import numpy as np
import pytest

from flesd import autodiff as ad
from flesd.autodiff import Tensor
from flesd.errors import DegenerateInputError, ShapeError
from flesd.optim import finite_diff_gradient

from testutil import rel_err


def check_grad(build_loss, shape, seed, tol=1e-6):
    """Gradient of build_loss(leaf) at a random point vs central differences."""
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=shape)
    leaf = Tensor(x0.copy())
    loss = build_loss(leaf)
    leaf.zero_grad()
    loss.backward()

    def value_at(x):
        return build_loss(Tensor(x)).item()

    fd = finite_diff_gradient(value_at, x0, 1e-5)
    assert rel_err(leaf.grad, fd) < tol


class TestOpGradients:
    def test_matmul(self):
        const = np.random.default_rng(0).normal(size=(4, 3))
        check_grad(lambda x: ad.sum_all(ad.matmul(x, ad.constant(const))),
                   (5, 4), seed=1)
        check_grad(lambda x: ad.sum_all(ad.matmul(ad.constant(const.T), x)),
                   (4, 5), seed=2)

    def test_bias_add_broadcast(self):
        check_grad(lambda x: ad.sum_squares(ad.add(ad.constant(
            np.random.default_rng(1).normal(size=(6, 3))), x)), (1, 3), seed=3)

    def test_relu_tanh(self):
        check_grad(lambda x: ad.sum_squares(ad.relu(x)), (4, 4), seed=4)
        check_grad(lambda x: ad.sum_squares(ad.tanh(x)), (4, 4), seed=5)

    def test_normalize_rows(self):
        check_grad(lambda x: ad.sum_squares(ad.add(ad.normalize_rows(x),
                                                   ad.constant(np.ones((3, 4))))),
                   (3, 4), seed=6)

    def test_softmax_and_log_softmax(self):
        w = np.random.default_rng(2).normal(size=(3, 5))
        check_grad(lambda x: ad.weighted_sum(ad.softmax_rows(x), w),
                   (3, 5), seed=7)
        check_grad(lambda x: ad.weighted_sum(ad.log_softmax_rows(x), w),
                   (3, 5), seed=8)

    def test_log_pick_concat(self):
        check_grad(lambda x: ad.sum_all(ad.log(ad.add_const(
            ad.sum_squares(x), 1.0))), (2, 3), seed=9)
        cols = np.array([2, 0, 1])
        check_grad(lambda x: ad.mean_all(ad.pick_per_row(x, cols)),
                   (3, 4), seed=10)
        other = np.random.default_rng(3).normal(size=(2, 3))
        check_grad(lambda x: ad.sum_squares(ad.concat_rows(x, ad.constant(other))),
                   (4, 3), seed=11)

    def test_transpose_sub_scalar_ops(self):
        other = np.random.default_rng(4).normal(size=(3, 2))
        check_grad(lambda x: ad.sum_squares(ad.sub(ad.transpose(x),
                                                   ad.constant(other))),
                   (2, 3), seed=12)
        check_grad(lambda x: ad.mul_scalar(ad.mean_all(x), 3.25), (4, 2),
                   seed=13)

    def test_cross_entropy_from_logits(self):
        labels = np.array([0, 2, 1, 2])
        check_grad(lambda x: ad.cross_entropy_from_logits(x, labels),
                   (4, 3), seed=14)


class TestEngine:
    def test_backward_requires_scalar(self):
        t = Tensor(np.ones((2, 2)))
        with pytest.raises(ShapeError):
            t.backward()

    def test_grad_accumulates_across_backwards(self):
        leaf = Tensor(np.array([[2.0]]))
        leaf.zero_grad()
        for _ in range(3):
            ad.sum_squares(leaf).backward()
        assert leaf.grad[0, 0] == pytest.approx(3 * 2 * 2.0)

    def test_zero_grad_resets(self):
        leaf = Tensor(np.array([[2.0]]))
        ad.sum_squares(leaf).backward()
        leaf.zero_grad()
        assert np.array_equal(leaf.grad, np.zeros((1, 1)))
        assert leaf.grad.shape == leaf.value.shape

    def test_shared_subexpression(self):
        # y = x used twice: gradients from both paths must accumulate
        leaf = Tensor(np.array([[3.0]]))
        y = ad.add(leaf, leaf)
        leaf.zero_grad()
        ad.sum_all(y).backward()
        assert leaf.grad[0, 0] == pytest.approx(2.0)

    def test_backward_is_deterministic(self):
        rng = np.random.default_rng(15)
        x0 = rng.normal(size=(6, 4))
        grads = []
        for _ in range(2):
            leaf = Tensor(x0.copy())
            loss = ad.mean_all(ad.softmax_rows(ad.matmul(
                ad.normalize_rows(leaf), ad.constant(rng.standard_normal((4, 4)) * 0 + np.eye(4)))))
            leaf.zero_grad()
            loss.backward()
            grads.append(leaf.grad.copy())
        assert np.array_equal(grads[0], grads[1])

    def test_normalize_rows_zero_row_rejected(self):
        with pytest.raises(DegenerateInputError):
            ad.normalize_rows(Tensor(np.zeros((2, 3))))

    def test_log_floor_blocks_nan(self):
        t = Tensor(np.array([[0.0, 1.0]]))
        out = ad.log(t)
        assert np.isfinite(out.value).all()
