import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from maskvar import autodiff as ad
from maskvar.autodiff import DimensionError, Tape, Tensor, grad_check


def param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(Tensor(np.eye(2)), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])

    def test_row_times_column(self):
        out = ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_inner_mismatch(self):
        with pytest.raises(DimensionError):
            ad.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 2))))

    @pytest.mark.parametrize("seed", range(3))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        a, b = param(rng, 3, 4), param(rng, 4, 2)
        w = rng.normal(size=(3, 2))
        err = grad_check(lambda ps: ad.tsum(ad.mul(ad.matmul(ps[0], ps[1]), Tensor(w))), [a, b])
        assert err <= 1e-6

    def test_batched_weight_matches_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
        out = ad.matmul(Tensor(a), Tensor(b)).data
        for i in range(2):
            np.testing.assert_allclose(out[i], a[i] @ b, rtol=0, atol=1e-14)

    def test_batched_both(self):
        rng = np.random.default_rng(1)
        a, b = param(rng, 2, 3, 4), param(rng, 2, 4, 3)
        w = rng.normal(size=(2, 3, 3))
        assert grad_check(lambda ps: ad.tsum(ad.mul(ad.matmul(*ps), Tensor(w))), [a, b]) <= 1e-6


class TestSoftmax:
    def test_identical_logits(self):
        np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)

    def test_large_logit_no_overflow(self):
        y = ad.softmax(Tensor([1000.0, 0.0])).data
        assert y[0] == 1.0 and 0.0 <= y[1] < 1e-300

    @given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-50, 50)))
    @settings(max_examples=50, deadline=None)
    def test_sums_to_one_and_positive(self, x):
        y = ad.softmax(Tensor(x)).data
        assert abs(y.sum() - 1.0) <= 1e-12
        assert np.all(y > 0)

    def test_invalid_axis(self):
        with pytest.raises(DimensionError):
            ad.softmax(Tensor(np.ones(3)), axis=2)

    @pytest.mark.parametrize("axis", [-1, 0])
    def test_gradient(self, axis):
        rng = np.random.default_rng(2)
        x = param(rng, 4, 5)
        w = rng.normal(size=(4, 5))
        assert grad_check(lambda p: ad.tsum(ad.mul(ad.softmax(p, axis), Tensor(w))), x) <= 1e-6


class TestCrossEntropy:
    def test_uniform_logits(self):
        assert float(ad.cross_entropy(Tensor(np.zeros(32)), 5).data) == pytest.approx(math.log(32), abs=1e-12)

    def test_confident_logit(self):
        logits = np.zeros(10)
        logits[3] = 1e6
        assert float(ad.cross_entropy(Tensor(logits), 3).data) == pytest.approx(0.0, abs=1e-12)

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            ad.cross_entropy(Tensor(np.zeros(4)), 4)

    def test_backward_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(3)
        z = param(rng, 7)
        with Tape() as tape:
            loss = ad.cross_entropy(z, 2)
        tape.backward(loss)
        expect = np.exp(z.data) / np.exp(z.data).sum()
        expect[2] -= 1.0
        np.testing.assert_allclose(tape.grad(z), expect, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("seed", range(3))
    def test_rows_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        z = param(rng, 4, 9, scale=2.0)
        tgt = rng.integers(9, size=4)
        assert grad_check(lambda p: ad.tsum(ad.cross_entropy(p, tgt)), z) <= 1e-6

    def test_composed_softmax_ce(self):
        rng = np.random.default_rng(4)
        z = param(rng, 6)
        err = grad_check(lambda p: ad.cross_entropy(ad.log_softmax(ad.scale(p, 1.7)), 1), z)
        assert err <= 1e-6


class TestPrimitives:
    def test_gelu_zero(self):
        assert float(ad.gelu(Tensor([0.0])).data[0]) == 0.0

    def test_gelu_is_exact_erf(self):
        x = np.linspace(-4, 4, 17)
        expect = [0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in x]
        np.testing.assert_allclose(ad.gelu(Tensor(x)).data, expect, rtol=1e-14, atol=1e-15)

    def test_layernorm_constant_vector(self):
        y = ad.layernorm(Tensor(np.full((2, 8), 3.5)), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
        np.testing.assert_array_equal(y, 0.0)

    def test_layernorm_shape_check(self):
        with pytest.raises(DimensionError):
            ad.layernorm(Tensor(np.ones((2, 8))), Tensor(np.ones(4)), Tensor(np.zeros(4)))

    def test_add_rejects_broadcast(self):
        with pytest.raises(DimensionError):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))

    def test_non_finite_is_error(self):
        with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
            ad.scale(Tensor([1e308]), 10.0)

    @pytest.mark.parametrize(
        "name,op,shapes",
        [
            ("gelu", lambda p: ad.gelu(p[0]), [(3, 5)]),
            ("layernorm", lambda p: ad.layernorm(*p), [(3, 5), (5,), (5,)]),
            ("add_bias", lambda p: ad.add(*p), [(3, 5), (5,)]),
            ("linear", lambda p: ad.linear(*p), [(2, 3, 5), (5, 4), (4,)]),
            ("transpose", lambda p: ad.transpose(p[0], (1, 0, 2)), [(2, 3, 4)]),
            ("reshape", lambda p: ad.reshape(p[0], (4, 6)), [(2, 3, 4)]),
            ("square", lambda p: ad.mul(p[0], p[0]), [(4, 3)]),
            ("sub", lambda p: ad.sub(*p), [(3,), (3,)]),
            ("scale", lambda p: ad.scale(p[0], -2.5), [(3,)]),
        ],
    )
    def test_finite_differences(self, name, op, shapes):
        rng = np.random.default_rng(5)
        params = [param(rng, *s) for s in shapes]
        w = Tensor(rng.normal(size=op(params).shape))
        assert grad_check(lambda p: ad.tsum(ad.mul(op(p), w)), params) <= 1e-6, name

    def test_mean(self):
        rng = np.random.default_rng(11)
        assert grad_check(lambda p: ad.mean(ad.mul(p, p)), param(rng, 4, 3)) <= 1e-6

    def test_embedding_gather_scatters_rows(self):
        rng = np.random.default_rng(6)
        table = param(rng, 5, 3)
        idx = np.array([[0, 2, 2], [4, 0, 1]])
        with Tape() as tape:
            out = ad.tsum(ad.embedding_gather(table, idx))
        tape.backward(out)
        counts = np.bincount(idx.ravel(), minlength=5)
        np.testing.assert_array_equal(tape.grad(table), np.repeat(counts[:, None], 3, axis=1))
        w = rng.normal(size=(2, 3, 3))
        assert grad_check(lambda p: ad.tsum(ad.mul(ad.embedding_gather(p, idx), Tensor(w))), table) <= 1e-6

    def test_embedding_gather_out_of_range(self):
        with pytest.raises(IndexError):
            ad.embedding_gather(Tensor(np.ones((3, 2))), [3])

    def test_take(self):
        rng = np.random.default_rng(7)
        x = param(rng, 2, 4)
        idx = np.array([1, 6, 6])
        assert grad_check(lambda p: ad.tsum(ad.mul(ad.take(p, idx), ad.take(p, idx))), x) <= 1e-6


class TestGradCheck:
    def test_linear_function_exact(self):
        rng = np.random.default_rng(8)
        x = param(rng, 6)
        w = rng.normal(size=6)
        assert grad_check(lambda p: ad.tsum(ad.mul(p, Tensor(w))), x) <= 1e-10

    def test_detects_wrong_gradient(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)

        def broken(p):
            y = ad.mul(p, p)
            y.backward_fn = lambda g: (g * p.data, None)  # drops one product-rule term
            return ad.tsum(y)

        assert grad_check(broken, x) > 0.1


class TestTape:
    def test_sum_of_backwards_is_backward_of_sum(self):
        rng = np.random.default_rng(9)
        x = param(rng, 5)
        with Tape() as t1:
            a = ad.tsum(ad.gelu(x))
            b = ad.tsum(ad.mul(x, x))
        t1.backward(a)
        t1.backward(b)
        with Tape() as t2:
            c = ad.add(ad.tsum(ad.gelu(x)), ad.tsum(ad.mul(x, x)))
        t2.backward(c)
        np.testing.assert_allclose(t1.grad(x), t2.grad(x), rtol=0, atol=1e-14)

    def test_rerun_is_bitwise_identical(self):
        rng = np.random.default_rng(10)
        x, w = param(rng, 3, 4), param(rng, 4, 4)

        def run():
            with Tape() as t:
                y = ad.tsum(ad.softmax(ad.matmul(ad.layernorm(x, Tensor(np.ones(4)), Tensor(np.zeros(4))), w)))
            t.backward(y)
            return t.grad(x).tobytes(), t.grad(w).tobytes()

        assert run() == run()

    def test_no_tape_no_history(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = ad.scale(x, 2.0)
        assert y.backward_fn is None and not y.requires_grad

    def test_untouched_leaf_gets_zero_grad(self):
        x, z = Tensor(np.ones(3), True), Tensor(np.ones(2), True)
        with Tape() as t:
            y = ad.tsum(x)
        t.backward(y)
        np.testing.assert_array_equal(t.grad(z), 0.0)
        assert not t.has_grad(z)
