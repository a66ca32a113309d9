import numpy as np
import pytest

from tsdiar.autodiff import Adam, GradCheckError, Tensor, concat, grad_check, softmax, stack


class TestBasicOps:
    def test_add_mul_forward(self):
        x = Tensor([1.0, 2.0])
        y = Tensor([3.0, 4.0])
        assert np.allclose((x + y * 2.0).data, [7.0, 10.0])

    def test_broadcast_backward(self):
        x = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.ones(4), requires_grad=True)
        (x + b).sum().backward()
        assert np.allclose(x.grad, np.ones((3, 4)))
        assert np.allclose(b.grad, 3.0 * np.ones(4))

    def test_matmul_shapes_enforced(self):
        with pytest.raises(ValueError):
            Tensor(np.ones(3)) @ Tensor(np.ones((3, 2)))

    def test_getitem_grad_routes_to_slice(self):
        x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
        x[1].sum().backward()
        expected = np.zeros((3, 4))
        expected[1] = 1.0
        assert np.allclose(x.grad, expected)

    def test_concat_grad_splits(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        b = Tensor(np.ones((2, 3)), requires_grad=True)
        out = concat([a, b], axis=1)
        (out * Tensor(np.arange(10.0).reshape(2, 5))).sum().backward()
        assert np.allclose(a.grad, [[0, 1], [5, 6]])
        assert np.allclose(b.grad, [[2, 3, 4], [7, 8, 9]])

    def test_stack(self):
        a = Tensor(np.ones(3), requires_grad=True)
        b = Tensor(2 * np.ones(3))
        s = stack([a, b], axis=0)
        assert s.shape == (2, 3)
        s.sum().backward()
        assert np.allclose(a.grad, np.ones(3))

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            (x * 2.0).backward()

    def test_grad_accumulates_on_reuse(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * x + x * 3.0
        y.sum().backward()
        assert np.allclose(x.grad, [7.0])

    def test_deep_chain_does_not_recurse(self):
        x = Tensor(np.array([[1.0]]), requires_grad=True)
        h = x
        for _ in range(3000):
            h = h * 1.0001
        h.sum().backward()
        assert np.isfinite(x.grad).all()


class TestSoftmax:
    def test_rows_sum_to_one(self, rng):
        x = Tensor(rng.normal(size=(5, 7)) * 10)
        s = softmax(x, axis=-1)
        assert np.allclose(s.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_invariant_to_constant_shift(self, rng):
        logits = rng.normal(size=(4, 6))
        a = softmax(Tensor(logits), axis=-1).data
        b = softmax(Tensor(logits + 123.4), axis=-1).data
        assert np.allclose(a, b, atol=1e-12)


class TestGradCheckedOps:
    def _check(self, f, params, tol=1e-6):
        err = grad_check(f, params, eps=1e-6)
        assert err < tol, f"max rel grad error {err}"

    def test_quadratic_is_tight(self, rng):
        x = Tensor(rng.normal(size=(4, 3)).astype(np.float64), requires_grad=True)
        err = grad_check(lambda: (x * x).sum(), [x], eps=1e-5)
        assert err < 1e-8

    def test_elementwise_ops(self, rng):
        x = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
        self._check(lambda: (x.log() + x.exp() + x.sqrt() + x.tanh() + x.sigmoid()).sum(), [x])

    def test_matmul_and_reductions(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        self._check(lambda: ((a @ b) ** 2.0).mean(), [a, b])

    def test_batched_matmul(self, rng):
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        self._check(lambda: ((a @ b).tanh()).sum(), [a, b])

    def test_softmax_grad(self, rng):
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        w = rng.normal(size=(3, 5))
        self._check(lambda: (softmax(x, axis=-1) * w).sum(), [x])

    def test_moveaxis_reshape_grad(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        w = rng.normal(size=(4, 3, 2))
        self._check(lambda: (x.moveaxis(0, 2).reshape(4, 3, 2) * w).sum(), [x])

    def test_mean_axis_grad(self, rng):
        x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        self._check(lambda: (x.mean(axis=0) ** 2.0).sum(), [x])

    def test_division_grad(self, rng):
        a = Tensor(rng.uniform(1, 2, size=(3,)), requires_grad=True)
        b = Tensor(rng.uniform(1, 2, size=(3,)), requires_grad=True)
        self._check(lambda: (a / b).sum(), [a, b])

    def test_nonfinite_objective_raises(self):
        x = Tensor(np.array([0.0]), requires_grad=True)
        with pytest.raises(GradCheckError):
            grad_check(lambda: (Tensor(np.array([1.0])) / x).sum(), [x])


class TestAdam:
    def test_zero_grads_leave_params_unchanged(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = Adam([p], lr=0.1)
        p.grad = np.zeros(2)
        opt.step()
        assert np.allclose(p.data, [1.0, -2.0])

    def test_first_step_is_signed_lr(self):
        p = Tensor(np.array([1.0, 1.0, 1.0]), requires_grad=True)
        opt = Adam([p], lr=0.01)
        p.grad = np.array([0.5, -3.0, 1e-3])
        opt.step()
        # Bias correction makes the first update ~ lr * sign(g).
        assert np.allclose(p.data, [1.0 - 0.01, 1.0 + 0.01, 1.0 - 0.01], atol=1e-5)

    def test_matches_scalar_recurrence(self, rng):
        p = Tensor(np.array([0.3]), requires_grad=True)
        lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
        opt = Adam([p], lr=lr, beta1=b1, beta2=b2, eps=eps)
        # Independent scalar reference recurrence.
        theta, m, v = 0.3, 0.0, 0.0
        for t in range(1, 11):
            g = float(rng.normal())
            p.grad = np.array([g])
            opt.step()
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
            assert float(p.data[0]) == pytest.approx(theta, abs=1e-12)

    def test_zero_grad_clears(self):
        p = Tensor(np.ones(2), requires_grad=True)
        opt = Adam([p])
        p.grad = np.ones(2)
        opt.zero_grad()
        assert p.grad is None


class TestDeterminism:
    def test_bitwise_identical_losses(self):
        def run():
            r = np.random.default_rng(7)
            x = Tensor(r.normal(size=(4, 6)), requires_grad=True)
            w = Tensor(r.normal(size=(6, 2)), requires_grad=True)
            loss = ((x @ w).sigmoid() ** 2.0).mean()
            loss.backward()
            return loss.data.copy(), x.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert np.array_equal(l1, l2)
        assert np.array_equal(g1, g2)
