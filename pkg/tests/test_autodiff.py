"""Every autodiff primitive against central finite differences."""

import numpy as np
import pytest

from jointvl import autodiff as ad
from jointvl.autodiff import Tensor


def finite_diff(loss_fn, tensor: Tensor, eps: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.ravel()
    out = grad.ravel()
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        up = float(loss_fn().data)
        flat[i] = original - eps
        down = float(loss_fn().data)
        flat[i] = original
        out[i] = (up - down) / (2 * eps)
    return grad


def check(loss_fn, tensors, atol=1e-7):
    loss_fn().backward()
    for t in tensors:
        analytic = t.grad.copy()
        numeric = finite_diff(loss_fn, t)
        np.testing.assert_allclose(analytic, numeric, atol=atol)


@pytest.fixture()
def ts(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    return a, b


class TestArithmetic:
    def test_add_sub_mul_div(self, ts):
        a, b = ts
        check(lambda: ((a + b) * (a - b) / (b * b + 2.0)).sum(), [a, b])

    def test_broadcasting(self, rng):
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        row = Tensor(rng.normal(size=(4,)), requires_grad=True)
        col = Tensor(rng.normal(size=(3, 1)), requires_grad=True)
        check(lambda: ((a + row) * col).sum(), [a, row, col])

    def test_pow_and_scalars(self, rng):
        a = Tensor(rng.uniform(0.5, 2.0, size=(5,)), requires_grad=True)
        check(lambda: (2.0 * a ** 3 - a / 4.0 + 1.0).sum(), [a])

    def test_matmul(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        check(lambda: (a @ b).sum(), [a, b])

    def test_matmul_batched(self, rng):
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 4, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        check(lambda: ((a @ b) ** 2).sum(), [a, b])
        check(lambda: ((a @ w) ** 2).sum(), [a, w])  # broadcast rhs


class TestShapeOps:
    def test_reshape_transpose_swapaxes(self, rng):
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        check(lambda: (a.reshape(6, 4).transpose(1, 0) ** 2).sum(), [a])
        check(lambda: (a.swapaxes(0, 2) * 3.0).sum(), [a])

    def test_getitem_slices(self, rng):
        a = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        check(lambda: (a[1:3, ::2] ** 2).sum(), [a])
        check(lambda: (a[:, 0] * a[:, 1]).sum(), [a])

    def test_getitem_fancy_with_repeats(self, rng):
        a = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        idx = np.array([0, 2, 2, 3, 0])
        check(lambda: (a[idx] ** 2).sum(), [a])

    def test_take_accumulates_repeated_rows(self, rng):
        table = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
        ids = np.array([[0, 1, 1], [5, 5, 5]])
        check(lambda: (ad.take(table, ids) ** 2).sum(), [table])

    def test_concat(self, rng):
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        check(lambda: (ad.concat([a, b], axis=1) ** 2).sum(), [a, b])


class TestReductions:
    def test_sum_axes(self, rng):
        a = Tensor(rng.normal(size=(3, 4, 2)), requires_grad=True)
        check(lambda: (a.sum(axis=1) ** 2).sum(), [a])
        check(lambda: (a.sum(axis=(0, 2)) ** 2).sum(), [a])
        check(lambda: (a.sum(axis=-1, keepdims=True) * a).sum(), [a])

    def test_mean(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        check(lambda: (a.mean(axis=0) ** 2).sum() + a.mean(), [a])


class TestNonlinearities:
    def test_exp_log_sqrt_tanh(self, rng):
        a = Tensor(rng.uniform(0.5, 2.0, size=(4, 3)), requires_grad=True)
        check(lambda: (ad.exp(a) + ad.log(a) + ad.sqrt(a) + ad.tanh(a)).sum(), [a])

    def test_sigmoid_extremes_stable(self):
        z = Tensor(np.array([-500.0, -1.0, 0.0, 1.0, 500.0]), requires_grad=True)
        out = ad.sigmoid(z)
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data[2], 0.5)
        out.sum().backward()
        assert np.all(np.isfinite(z.grad))

    def test_gelu(self, rng):
        a = Tensor(rng.normal(size=(20,)) * 2.0, requires_grad=True)
        check(lambda: (ad.gelu(a) ** 2).sum(), [a])

    def test_softmax_log_softmax(self, rng):
        a = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 6)))
        check(lambda: (ad.softmax(a, axis=-1) * w).sum(), [a])
        check(lambda: (ad.log_softmax(a, axis=-1) * w).sum(), [a])

    def test_softmax_rows_sum_to_one_with_huge_negatives(self):
        logits = Tensor(np.array([[0.0, -1e9, 3.0], [-1e9, -1e9, 0.0]]))
        out = ad.softmax(logits).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
        assert out[0, 1] == 0.0  # underflows exactly

    def test_layernorm(self, rng):
        x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        g = Tensor(rng.normal(size=(6,)), requires_grad=True)
        b = Tensor(rng.normal(size=(6,)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 6)))
        check(lambda: (ad.layernorm(x, g, b) * w).sum(), [x, g, b])

    def test_bce_with_logits_matches_naive_and_is_stable(self, rng):
        z = Tensor(rng.normal(size=(8,)) * 3.0, requires_grad=True)
        y = (rng.random(8) < 0.5).astype(float)
        naive = -(y * np.log(1 / (1 + np.exp(-z.data)))
                  + (1 - y) * np.log(1 - 1 / (1 + np.exp(-z.data))))
        np.testing.assert_allclose(ad.bce_with_logits(z, y).data, naive, atol=1e-12)
        check(lambda: ad.bce_with_logits(z, y).sum(), [z])
        extreme = Tensor(np.array([1e4, -1e4]), requires_grad=True)
        out = ad.bce_with_logits(extreme, np.array([0.0, 1.0]))
        assert np.all(np.isfinite(out.data))


class TestGraphMechanics:
    def test_diamond_reuse_accumulates(self, rng):
        a = Tensor(rng.normal(size=(3,)), requires_grad=True)
        check(lambda: (a * a + a * 2.0 + (a + a) ** 2).sum(), [a])

    def test_backward_requires_scalar(self, rng):
        a = Tensor(rng.normal(size=(3,)), requires_grad=True)
        with pytest.raises(ValueError):
            (a * 2.0).backward()

    def test_repeated_backward_overwrites_not_accumulates(self, rng):
        a = Tensor(rng.normal(size=(3,)), requires_grad=True)
        (a * 3.0).sum().backward()
        first = a.grad.copy()
        (a * 3.0).sum().backward()
        np.testing.assert_array_equal(a.grad, first)

    def test_no_grad_blocks_taping(self, rng):
        a = Tensor(rng.normal(size=(3,)), requires_grad=True)
        with ad.no_grad():
            out = (a * 2.0).sum()
        assert not out.requires_grad
        assert out._parents == ()

    def test_constants_do_not_require_grad(self):
        a = Tensor(np.ones(3), requires_grad=True)
        c = Tensor(np.ones(3))
        out = (a + c).sum()
        out.backward()
        assert c.grad is None
        np.testing.assert_array_equal(a.grad, np.ones(3))

    def test_dtype_preserved_float32(self):
        a = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
        out = ad.gelu(a * 2.0 + 1.0)
        assert out.dtype == np.float32
        out.sum().backward()
        assert a.grad.dtype == np.float32
