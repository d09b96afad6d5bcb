import numpy as np
import pytest

import tensor_autodiff as ad
from errors import AutodiffError, ShapeError
from tensor_autodiff import Tensor


def away_from_zero(rng, shape):
    """Values with |v| in [0.1, 1] so relu/abs kinks stay outside the finite-difference step"""
    return rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


class TestForward:
    def test_matmul_identity(self):
        out = ad.matmul([[1, 2], [3, 4]], np.eye(2))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_l2norm_345(self):
        assert ad.l2norm([3.0, 4.0]).item() == pytest.approx(5.0)

    def test_relu(self):
        np.testing.assert_array_equal(ad.relu([-1.0, 0.0, 2.0]).data, [0, 0, 2])

    def test_sign_of_zero_is_zero(self):
        np.testing.assert_array_equal(ad.sign([-2.0, 0.0, 3.0]).data, [-1, 0, 1])

    def test_maxpool_ties_pick_first_element(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with ad.tape_scope():
            ad.backward(ad.sum(ad.maxpool2d(x)))
        np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])

    def test_conv2d_matches_direct_loop(self, rng):
        x = rng.normal(size=(2, 3, 6, 6)).astype(np.float32)
        w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        b = rng.normal(size=(4,)).astype(np.float32)
        out = ad.conv2d(x, w, b).data
        expected = np.zeros((2, 4, 4, 4))
        for n in range(2):
            for o in range(4):
                for i in range(4):
                    for j in range(4):
                        expected[n, o, i, j] = np.sum(x[n, :, i:i + 3, j:j + 3] * w[o]) + b[o]
        np.testing.assert_allclose(out, expected, rtol=1e-5, atol=1e-5)

    def test_forward_is_deterministic(self, rng):
        x = rng.normal(size=(2, 1, 8, 8))
        w = rng.normal(size=(2, 1, 3, 3))
        b = np.zeros(2)
        first = ad.conv2d(x, w, b).data
        second = ad.conv2d(x, w, b).data
        assert np.array_equal(first, second)


class TestShapes:
    def test_mismatch_names_op_and_shapes(self):
        with pytest.raises(ShapeError, match=r"add: incompatible shapes \(2, 3\) and \(4,\)"):
            ad.add(np.zeros((2, 3)), np.zeros(4))

    def test_matmul_inner_dimension(self):
        with pytest.raises(ShapeError, match="matmul"):
            ad.matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_leading_batch_broadcast(self):
        out = ad.add(np.zeros((3, 2)), np.array([1.0, 2.0]))
        np.testing.assert_array_equal(out.data, [[1, 2]] * 3)

    def test_reshape_rejects_bad_size(self):
        with pytest.raises(ShapeError):
            ad.reshape(np.zeros(6), (4, 2))


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with ad.tape_scope():
            ad.backward(ad.sum(x * x))
        np.testing.assert_allclose(x.grad, [2, 4, 6])

    def test_mean(self):
        x = Tensor(np.arange(4.0), requires_grad=True)
        with ad.tape_scope():
            ad.backward(ad.mean(x))
        np.testing.assert_allclose(x.grad, [0.25] * 4)

    def test_reductions_are_zero_dimensional(self):
        assert Tensor(np.float32(3.0)).shape == ()
        assert Tensor(2.0).shape == ()
        x = Tensor([[1.0, -2.0], [3.0, 0.5]], requires_grad=True)
        with ad.tape_scope():
            total = ad.sum(ad.mul(x, x))
            assert total.shape == ()
            assert ad.mean(x).shape == ()
            ad.backward(total)
        np.testing.assert_allclose(x.grad, [[2.0, -4.0], [6.0, 1.0]])

    def test_second_backward_without_reset_fails(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with ad.tape_scope():
            loss = ad.sum(x * x)
            ad.backward(loss)
            with pytest.raises(AutodiffError):
                ad.backward(loss)

    def test_non_scalar_loss_fails(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with ad.tape_scope():
            with pytest.raises(AutodiffError):
                ad.backward(x * x)

    def test_detached_loss_fails(self):
        with pytest.raises(AutodiffError):
            ad.backward(Tensor(1.0))

    def test_detached_tensor_never_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        frozen = x.detach()
        with ad.tape_scope():
            ad.backward(ad.sum(ad.mul(x, frozen)))
        assert frozen.grad is None
        np.testing.assert_allclose(x.grad, [1, 2])

    def test_reset_reproduces_gradients(self):
        x = Tensor([0.5, -1.5, 2.0], requires_grad=True)
        with ad.tape_scope() as tape:
            ad.backward(ad.sum(ad.mul(x, x)))
            first = x.grad.copy()
            tape.reset()
            assert x.grad is None
            ad.backward(ad.sum(ad.mul(x, x)))
            np.testing.assert_array_equal(x.grad, first)

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with ad.tape_scope() as tape, ad.no_grad():
            y = x * x
        assert not y.requires_grad
        assert tape.nodes == []


class TestGradientCheck:
    """Analytic gradients against central finite differences.

    Piecewise-polynomial ops use a wide step (their central differences are
    exact away from kinks); smooth nonlinear ops use h=1e-2.
    """

    CASES = 10

    @pytest.mark.parametrize('case', range(CASES))
    def test_elementwise(self, case):
        rng = np.random.default_rng(case)
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 5)))
        a = rng.normal(size=shape)
        b = rng.uniform(1.0, 2.0, size=shape)
        for fn in (
            lambda x, y: ad.sum(ad.add(x, y) * ad.sub(x, y)),
            lambda x, y: ad.mean(ad.mul(ad.neg(x), y)),
        ):
            assert ad.gradient_check(fn, [a, b], h=0.1) < 1e-3
        assert ad.gradient_check(lambda x, y: ad.sum(ad.div(x, y)), [a, b], h=1e-2) < 1e-3

    @pytest.mark.parametrize('case', range(CASES))
    def test_kinked_ops(self, case):
        rng = np.random.default_rng(100 + case)
        a = away_from_zero(rng, (3, 4))
        assert ad.gradient_check(lambda x: ad.sum(ad.relu(x) * x), [a], h=0.05) < 1e-3
        assert ad.gradient_check(lambda x: ad.sum(ad.abs(x) * x), [a], h=0.05) < 1e-3

    @pytest.mark.parametrize('case', range(CASES))
    def test_matmul_reshape(self, case):
        rng = np.random.default_rng(200 + case)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        fn = lambda x, y: ad.sum(ad.reshape(ad.matmul(x, y), (-1,)) * np.arange(6.0, dtype=np.float32))
        assert ad.gradient_check(fn, [a, b], h=0.1) < 1e-3

    @pytest.mark.parametrize('case', range(CASES))
    def test_reductions_and_norm(self, case):
        rng = np.random.default_rng(300 + case)
        a = rng.normal(size=(4, 5))
        weights = rng.normal(size=4).astype(np.float32)
        assert ad.gradient_check(lambda x: ad.sum(ad.l2norm(x, axis=1) * weights), [a], h=1e-2) < 1e-3
        assert ad.gradient_check(lambda x: ad.mean(ad.sum(x, axis=0) * ad.sum(x, axis=0)), [a], h=0.1) < 1e-3

    @pytest.mark.parametrize('case', range(CASES))
    def test_log_softmax(self, case):
        rng = np.random.default_rng(400 + case)
        logits = rng.normal(size=(3, 5))
        weights = rng.normal(size=(3, 5)).astype(np.float32)
        assert ad.gradient_check(lambda x: ad.sum(ad.log_softmax(x) * weights), [logits], h=1e-2) < 1e-3

    @pytest.mark.parametrize('case', range(CASES))
    def test_conv2d(self, case):
        rng = np.random.default_rng(500 + case)
        x = rng.normal(size=(2, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=(3,))
        weights = rng.normal(size=(2, 3, 3, 3)).astype(np.float32)
        fn = lambda x_, w_, b_: ad.sum(ad.conv2d(x_, w_, b_) * weights)
        assert ad.gradient_check(fn, [x, w, b], h=0.5) < 1e-3

    @pytest.mark.parametrize('case', range(CASES))
    def test_maxpool2d(self, case):
        rng = np.random.default_rng(600 + case)
        # distinct values one apart keep every argmax fixed under the step
        x = rng.permutation(32).astype(np.float64).reshape(1, 2, 4, 4)
        weights = rng.normal(size=(1, 2, 2, 2)).astype(np.float32)
        assert ad.gradient_check(lambda t: ad.sum(ad.maxpool2d(t) * weights), [x], h=0.1) < 1e-3

    @pytest.mark.parametrize('case', range(CASES))
    def test_index_rows(self, case):
        rng = np.random.default_rng(700 + case)
        a = rng.normal(size=(5, 3))
        rows = rng.integers(0, 5, size=4)
        weights = rng.normal(size=(4, 3)).astype(np.float32)
        assert ad.gradient_check(lambda x: ad.sum(ad.index_rows(x, rows) * weights), [a], h=0.1) < 1e-3


class TestGradWrtInput:
    class Linear:
        def __init__(self, w):
            self.w = Tensor(w, requires_grad=True)

        def parameters(self):
            return [self.w]

        def __call__(self, x):
            return ad.sum(ad.mul(self.w, x))

    def test_linear_model(self):
        model = self.Linear([2.0])
        grad = ad.grad_wrt_input(model, np.array([1.0]), None, lambda out, _: out)
        np.testing.assert_allclose(grad.data, [2.0])
        assert model.w.grad is None
        assert model.w.requires_grad

    def test_zero_weights_give_zero_gradient(self):
        model = self.Linear([0.0, 0.0])
        grad = ad.grad_wrt_input(model, np.array([1.0, -1.0]), None, lambda out, _: out)
        np.testing.assert_array_equal(grad.data, [0.0, 0.0])

    def test_softmax_cross_entropy_matches_finite_differences(self, rng):
        w = rng.normal(size=(4, 3)).astype(np.float32)
        x = rng.normal(size=(1, 4))

        def loss(t):
            return ad.neg(ad.sum(ad.mul(ad.log_softmax(ad.matmul(t, w)), np.array([[0, 1, 0]], np.float32))))

        assert ad.gradient_check(loss, [x], h=1e-2) < 1e-3
