"""Gradient and forward-value checks for the autodiff engine.

Forward oracles are hand-computable identities; gradients are verified
against central finite differences through grad_check.
"""

import numpy as np
import pytest

from earthmim import autodiff as ad
from earthmim.autodiff import Tensor, backward, grad_check

RNG = np.random.default_rng(20260822)

PRIMITIVE_TOL = 1e-6


def _rand(*shape):
    return RNG.normal(size=shape)


class TestForwardValues:
    def test_matmul_identity(self):
        a = _rand(5, 5)
        out = ad.matmul(Tensor(a), Tensor(np.eye(5)))
        np.testing.assert_array_equal(out.data, a)

    def test_softmax_of_equal_logits_is_uniform(self):
        out = ad.softmax(Tensor(np.full((3, 7), 2.5)))
        np.testing.assert_allclose(out.data, 1.0 / 7.0, rtol=0, atol=1e-15)

    def test_softmax_shift_invariance(self):
        x = _rand(4, 9)
        np.testing.assert_allclose(
            ad.softmax(Tensor(x)).data, ad.softmax(Tensor(x + 100.0)).data, atol=1e-12
        )

    def test_layer_norm_constant_vector_maps_to_zero(self):
        out = ad.layer_norm(Tensor(np.full((2, 8), 3.7)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_layer_norm_output_statistics(self):
        out = ad.layer_norm(Tensor(_rand(6, 32)))
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=-1), 1.0, atol=1e-5)

    def test_gelu_key_points(self):
        out = ad.gelu(Tensor(np.array([0.0, 100.0, -100.0])))
        np.testing.assert_allclose(out.data, [0.0, 100.0, 0.0], atol=1e-12)

    def test_exp_log_roundtrip(self):
        x = np.abs(_rand(5)) + 0.5
        out = ad.exp(ad.log(Tensor(x)))
        np.testing.assert_allclose(out.data, x, rtol=1e-14)

    def test_concat_slice_roundtrip(self):
        a, b = _rand(3, 4), _rand(2, 4)
        cat = ad.concat([Tensor(a), Tensor(b)], axis=0)
        np.testing.assert_array_equal(ad.slice_axis(cat, 0, 3, 5).data, b)

    def test_smooth_l1_regions(self):
        pred = Tensor(np.array([0.0, 0.5, 3.0]))
        out = ad.smooth_l1(pred, np.zeros(3))
        np.testing.assert_allclose(out.data, [0.0, 0.125, 2.5], atol=1e-15)


class TestBackwardBasics:
    def test_square_gradient(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        backward(ad.multiply(x, x))
        np.testing.assert_allclose(x.grad, 6.0)

    def test_softmax_sum_has_zero_gradient(self):
        # sum(softmax(x)) == 1 for every x, so the gradient vanishes.
        x = Tensor(_rand(6), requires_grad=True)
        backward(ad.reduce_sum(ad.softmax(x)))
        np.testing.assert_allclose(x.grad, 0.0, atol=1e-15)

    def test_gradient_accumulates_across_paths(self):
        # f(x) = x*x + x at x=2 gives f' = 2x + 1 = 5.
        x = Tensor(np.array(2.0), requires_grad=True)
        backward(ad.add(ad.multiply(x, x), x))
        np.testing.assert_allclose(x.grad, 5.0)

    def test_backward_twice_accumulates(self):
        x = Tensor(np.array(4.0), requires_grad=True)
        backward(ad.multiply(x, x))
        backward(ad.multiply(x, x))
        np.testing.assert_allclose(x.grad, 16.0)

    def test_non_scalar_root_rejected(self):
        x = Tensor(_rand(3), requires_grad=True)
        with pytest.raises(ad.AutodiffError):
            backward(ad.exp(x))

    def test_detach_blocks_gradient(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        backward(ad.multiply(x.detach(), x))
        np.testing.assert_allclose(x.grad, 2.0)

    def test_no_grad_leaf_untouched(self):
        x = Tensor(np.array(2.0))
        y = Tensor(np.array(3.0), requires_grad=True)
        backward(ad.multiply(x, y))
        assert x.grad is None

    def test_deep_chain_does_not_recurse(self):
        x = Tensor(np.array(1.0), requires_grad=True)
        out = x
        for _ in range(5000):
            out = ad.scale(out, 1.0)
        backward(out)
        np.testing.assert_allclose(x.grad, 1.0)


class TestShapeErrors:
    def test_matmul_mismatch(self):
        with pytest.raises(ad.AutodiffError, match="matmul"):
            ad.matmul(Tensor(_rand(2, 3)), Tensor(_rand(4, 2)))

    def test_add_mismatch(self):
        with pytest.raises(ad.AutodiffError, match="add"):
            ad.add(Tensor(_rand(2, 3)), Tensor(_rand(3, 2)))

    def test_reshape_bad_size(self):
        with pytest.raises(ad.AutodiffError, match="reshape"):
            ad.reshape(Tensor(_rand(6)), (4, 2))

    def test_gather_out_of_range(self):
        with pytest.raises(ad.AutodiffError, match="gather"):
            ad.gather_rows(Tensor(_rand(3, 2)), [0, 5])


class TestGradCheckPrimitives:
    """Every differentiable primitive passes central-difference checks."""

    def test_sum_of_squares_reference(self):
        x = Tensor(_rand(4, 3))
        err = grad_check(lambda t: ad.reduce_sum(ad.multiply(t, t)), x)
        assert err <= 1e-7

    @pytest.mark.parametrize("trial", range(10))
    def test_add_multiply_scale(self, trial):
        rng = np.random.default_rng(100 + trial)
        x = Tensor(rng.normal(size=(3, 4)))
        other = rng.normal(size=(3, 4))

        def f(t):
            s = ad.add(ad.multiply(t, Tensor(other)), ad.scale(t, 0.5))
            return ad.reduce_sum(s)

        assert grad_check(f, x) <= PRIMITIVE_TOL

    @pytest.mark.parametrize("trial", range(10))
    def test_matmul_2d(self, trial):
        rng = np.random.default_rng(200 + trial)
        x = Tensor(rng.normal(size=(3, 5)))
        w = rng.normal(size=(5, 2))
        f = lambda t: ad.reduce_sum(ad.matmul(t, Tensor(w)))
        assert grad_check(f, x) <= PRIMITIVE_TOL

    @pytest.mark.parametrize("trial", range(10))
    def test_matmul_batched(self, trial):
        rng = np.random.default_rng(300 + trial)
        x = Tensor(rng.normal(size=(2, 3, 4)))
        w = rng.normal(size=(2, 4, 3))
        v = rng.normal(size=(2, 3, 3))
        f = lambda t: ad.reduce_sum(ad.multiply(ad.matmul(t, Tensor(w)), Tensor(v)))
        assert grad_check(f, x) <= PRIMITIVE_TOL

    @pytest.mark.parametrize("trial", range(10))
    def test_transpose_reshape(self, trial):
        rng = np.random.default_rng(400 + trial)
        x = Tensor(rng.normal(size=(2, 3, 4)))
        w = rng.normal(size=(4, 3, 2))

        def f(t):
            return ad.reduce_sum(ad.multiply(ad.reshape(ad.transpose(t, (2, 1, 0)), (4, 3, 2)), Tensor(w)))

        assert grad_check(f, x) <= PRIMITIVE_TOL

    @pytest.mark.parametrize("trial", range(10))
    def test_concat_slice(self, trial):
        rng = np.random.default_rng(500 + trial)
        x = Tensor(rng.normal(size=(4, 3)))

        def f(t):
            cat = ad.concat([t, ad.scale(t, 2.0)], axis=0)
            return ad.reduce_sum(ad.multiply(ad.slice_axis(cat, 0, 2, 7), ad.slice_axis(cat, 0, 2, 7)))

        assert grad_check(f, x) <= PRIMITIVE_TOL

    @pytest.mark.parametrize("trial", range(10))
    def test_gather_rows(self, trial):
        rng = np.random.default_rng(600 + trial)
        x = Tensor(rng.normal(size=(5, 3)))
        idx = rng.integers(0, 5, size=8)  # repeats exercise accumulation
        f = lambda t: ad.reduce_sum(ad.multiply(ad.gather_rows(t, idx), ad.gather_rows(t, idx)))
        assert grad_check(f, x) <= PRIMITIVE_TOL

    @pytest.mark.parametrize("trial", range(10))
    def test_sum_mean_axes(self, trial):
        rng = np.random.default_rng(700 + trial)
        x = Tensor(rng.normal(size=(3, 4)))

        def f(t):
            s = ad.reduce_sum(t, axis=1, keepdims=True)
            m = ad.reduce_mean(t, axis=0)
            return ad.add(ad.reduce_sum(ad.multiply(s, s)), ad.reduce_sum(ad.multiply(m, m)))

        assert grad_check(f, x) <= PRIMITIVE_TOL

    @pytest.mark.parametrize("trial", range(10))
    def test_softmax(self, trial):
        rng = np.random.default_rng(800 + trial)
        x = Tensor(rng.normal(size=(3, 6)))
        w = rng.normal(size=(3, 6))
        f = lambda t: ad.reduce_sum(ad.multiply(ad.softmax(t), Tensor(w)))
        assert grad_check(f, x) <= PRIMITIVE_TOL

    @pytest.mark.parametrize("trial", range(10))
    def test_exp_log(self, trial):
        rng = np.random.default_rng(900 + trial)
        x = Tensor(np.abs(rng.normal(size=(4,))) + 0.5)
        f = lambda t: ad.reduce_sum(ad.multiply(ad.log(t), ad.exp(ad.scale(t, 0.1))))
        assert grad_check(f, x) <= PRIMITIVE_TOL

    @pytest.mark.parametrize("trial", range(10))
    def test_gelu(self, trial):
        rng = np.random.default_rng(1000 + trial)
        x = Tensor(rng.normal(size=(5, 3)))
        w = rng.normal(size=(5, 3))
        f = lambda t: ad.reduce_sum(ad.multiply(ad.gelu(t), Tensor(w)))
        assert grad_check(f, x) <= PRIMITIVE_TOL

    @pytest.mark.parametrize("trial", range(10))
    def test_layer_norm(self, trial):
        rng = np.random.default_rng(1100 + trial)
        x = Tensor(rng.normal(size=(3, 8)))
        w = rng.normal(size=(3, 8))
        f = lambda t: ad.reduce_sum(ad.multiply(ad.layer_norm(t), Tensor(w)))
        assert grad_check(f, x) <= PRIMITIVE_TOL

    @pytest.mark.parametrize("trial", range(10))
    def test_pow_clip(self, trial):
        rng = np.random.default_rng(1200 + trial)
        # keep values away from the clip kink so the numeric derivative is valid
        x = Tensor(np.abs(rng.normal(size=(4,))) + 0.7)

        def f(t):
            return ad.reduce_sum(ad.pow_const(ad.clip_min_const(t, 0.5), 1.5))

        assert grad_check(f, x) <= PRIMITIVE_TOL

    @pytest.mark.parametrize("trial", range(10))
    def test_smooth_l1(self, trial):
        rng = np.random.default_rng(1300 + trial)
        # stay away from |d| = 1 where the second derivative jumps
        target = rng.normal(size=(4, 3))
        x = Tensor(target + rng.choice([-0.4, 0.4, 2.0, -2.0], size=(4, 3)))
        f = lambda t: ad.reduce_sum(ad.smooth_l1(t, target))
        assert grad_check(f, x) <= PRIMITIVE_TOL


class TestComposites:
    def test_attention_block_grad(self):
        # single-head attention composed from primitives
        rng = np.random.default_rng(42)
        x = Tensor(rng.normal(size=(5, 8)) * 0.3)
        wq, wk, wv = (rng.normal(size=(8, 8)) * 0.3 for _ in range(3))

        def f(t):
            q = ad.matmul(t, Tensor(wq))
            k = ad.matmul(t, Tensor(wk))
            v = ad.matmul(t, Tensor(wv))
            att = ad.softmax(ad.scale(ad.matmul(q, ad.transpose(k, (1, 0))), 8 ** -0.5))
            out = ad.matmul(att, v)
            return ad.reduce_sum(ad.multiply(out, out))

        assert grad_check(f, x) <= 1e-5

    def test_mlp_block_grad(self):
        rng = np.random.default_rng(43)
        x = Tensor(rng.normal(size=(4, 6)))
        w1, w2 = rng.normal(size=(6, 12)) * 0.4, rng.normal(size=(12, 6)) * 0.4

        def f(t):
            h = ad.gelu(ad.matmul(ad.layer_norm(t), Tensor(w1)))
            return ad.reduce_sum(ad.multiply(ad.matmul(h, Tensor(w2)), ad.matmul(h, Tensor(w2))))

        assert grad_check(f, x) <= 1e-5

    def test_forward_backward_deterministic(self):
        rng = np.random.default_rng(7)
        data = rng.normal(size=(6, 6))
        grads = []
        for _ in range(2):
            x = Tensor(data.copy(), requires_grad=True)
            backward(ad.reduce_sum(ad.softmax(ad.matmul(x, x))))
            grads.append(x.grad.copy())
        np.testing.assert_array_equal(grads[0], grads[1])
