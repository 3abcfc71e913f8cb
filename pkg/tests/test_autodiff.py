"""Tensor-engine tests: forward oracles and finite-difference gradient checks."""

import math

import numpy as np
import pytest

from merchcat import autodiff as ad
from merchcat.autodiff import Tensor
from merchcat.errors import DimensionError, UsageError


def conv1d_direct(x, w, b, padding):
    """Triple-loop convolution oracle (no vectorization)."""
    t_in, c_in = x.shape
    c_out, _, k = w.shape
    t_out = t_in + 2 * padding - k + 1
    out = np.zeros((t_out, c_out))
    for t in range(t_out):
        for o in range(c_out):
            acc = b[o]
            for kk in range(k):
                for i in range(c_in):
                    src = t + kk - padding
                    if 0 <= src < t_in:
                        acc += x[src, i] * w[o, i, kk]
            out[t, o] = acc
    return out


def finite_diff_grad(f, x, h=1e-5):
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        ix = it.multi_index
        orig = x[ix]
        x[ix] = orig + h
        hi = f()
        x[ix] = orig - h
        lo = f()
        x[ix] = orig
        g[ix] = (hi - lo) / (2 * h)
        it.iternext()
    return g


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return np.abs(a - b).max() / denom


# ---------------------------------------------------------------------------
# forward behaviour
# ---------------------------------------------------------------------------


class TestConv1d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(9, 4)))
        w = Tensor(np.eye(4)[:, :, None])  # (4, 4, 1)
        b = Tensor(np.zeros(4))
        out = ad.conv1d(x, w, b, padding=0)
        np.testing.assert_allclose(out.data, x.data)

    def test_paperlike_shapes(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(911, 10)))
        w = Tensor(rng.normal(size=(64, 10, 3)) * 0.1)
        b = Tensor(np.zeros(64))
        out = ad.conv1d(x, w, b, padding=1)
        assert out.data.shape == (911, 64)
        pooled = ad.global_avg_pool(out)
        assert pooled.data.shape == (64,)

    def test_matches_direct_oracle(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            x = rng.normal(size=(5, 2))
            w = rng.normal(size=(3, 2, 3))
            b = rng.normal(size=3)
            got = ad.conv1d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
            want = conv1d_direct(x, w, b, padding=1)
            assert rel_err(got, want) < 1e-12

    def test_same_padding_preserves_length_for_odd_kernels(self):
        rng = np.random.default_rng(2)
        for k in (1, 3, 5, 7):
            x = Tensor(rng.normal(size=(20, 3)))
            w = Tensor(rng.normal(size=(4, 3, k)))
            b = Tensor(np.zeros(4))
            out = ad.conv1d(x, w, b, padding=(k - 1) // 2)
            assert out.data.shape == (20, 4)

    def test_channel_mismatch_raises(self):
        x = Tensor(np.zeros((5, 3)))
        w = Tensor(np.zeros((2, 4, 3)))
        with pytest.raises(DimensionError):
            ad.conv1d(x, w, Tensor(np.zeros(2)), padding=1)

    def test_batched_matches_stacked_single(self):
        rng = np.random.default_rng(3)
        xs = rng.normal(size=(4, 7, 3))
        w = Tensor(rng.normal(size=(5, 3, 3)))
        b = Tensor(rng.normal(size=5))
        batched = ad.conv1d(Tensor(xs), w, b, padding=1).data
        for i in range(4):
            single = ad.conv1d(Tensor(xs[i]), w, b, padding=1).data
            np.testing.assert_allclose(batched[i], single, atol=1e-14)


class TestLinear:
    def test_identity(self):
        x = Tensor(np.arange(4.0))
        out = ad.linear(x, Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, x.data)

    def test_generator_layer_shape(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=64))
        w = Tensor(rng.normal(size=(64, 64 * 56)) * 0.01)
        b = Tensor(np.zeros(64 * 56))
        assert ad.linear(x, w, b).data.shape == (3584,)

    def test_matches_naive_matmul(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            x = rng.normal(size=(3, 4))
            w = rng.normal(size=(4, 6))
            b = rng.normal(size=6)
            got = ad.linear(Tensor(x), Tensor(w), Tensor(b)).data
            want = np.array([[x[i] @ w[:, j] + b[j] for j in range(6)] for i in range(3)])
            assert rel_err(got, want) < 1e-12

    def test_mismatch_raises(self):
        with pytest.raises(DimensionError):
            ad.linear(Tensor(np.zeros(3)), Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))


class TestPointwise:
    def test_softmax_uniform_on_equal_logits(self):
        out = ad.softmax(Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, np.full(4, 0.25))

    def test_softmax_rows_sum_to_one_and_positive(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            x = Tensor(rng.normal(size=(6, 9)) * rng.uniform(0.1, 50))
            y = ad.softmax(x).data
            np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)
            assert (y > 0).all()

    def test_softmax_empty_raises(self):
        with pytest.raises(DimensionError):
            ad.softmax(Tensor(np.zeros((3, 0))))

    def test_relu(self):
        out = ad.relu(Tensor(np.array([-2.0, 0.0, 3.5])))
        np.testing.assert_allclose(out.data, [0.0, 0.0, 3.5])

    def test_gap_shape_and_value(self):
        x = np.arange(12.0).reshape(6, 2)
        out = ad.global_avg_pool(Tensor(x))
        np.testing.assert_allclose(out.data, x.mean(axis=0))

    def test_dropout_eval_is_identity(self):
        x = Tensor(np.random.default_rng(0).normal(size=(5, 5)))
        out = ad.dropout(x, keep_prob=0.5, train=False)
        assert out is x

    def test_dropout_train_expectation(self):
        rng = np.random.default_rng(42)
        x = Tensor(np.full((20, 20), 3.0))
        acc = np.zeros((20, 20))
        reps = 10_000
        for _ in range(reps):
            acc += ad.dropout(x, keep_prob=0.9, train=True, rng=rng).data
        mean = acc / reps
        assert np.abs(mean - 3.0).max() / 3.0 < 0.02


class TestNll:
    def test_perfect_prediction_zero_loss(self):
        probs = np.zeros((3, 4))
        probs[np.arange(3), [1, 2, 0]] = 1.0
        loss = ad.nll_loss(Tensor(probs), np.array([1, 2, 0]))
        assert loss.data == pytest.approx(0.0, abs=1e-9)

    def test_uniform_prediction_ln_c(self):
        c = 56
        probs = np.full((2, c), 1.0 / c)
        loss = ad.nll_loss(Tensor(probs), np.array([0, 55]))
        assert loss.data == pytest.approx(math.log(c), rel=1e-12)

    def test_matches_per_sample_oracle(self):
        rng = np.random.default_rng(7)
        logits = rng.normal(size=(4, 5))
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        labels = rng.integers(0, 5, size=4)
        loss = ad.nll_loss(Tensor(probs), labels).data
        want = np.mean([-math.log(probs[i, labels[i]]) for i in range(4)])
        assert loss == pytest.approx(want, rel=1e-12)

    def test_label_out_of_range(self):
        probs = np.full((2, 3), 1.0 / 3)
        with pytest.raises(DimensionError):
            ad.nll_loss(Tensor(probs), np.array([0, 3]))

    def test_rejects_unnormalized_rows(self):
        with pytest.raises(UsageError):
            ad.nll_loss(Tensor(np.full((2, 3), 0.5)), np.array([0, 1]))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


class TestBackward:
    def test_backward_requires_scalar(self):
        x = ad.parameter(np.zeros((2, 2)))
        with pytest.raises(UsageError):
            ad.relu(x).backward()

    def test_constant_loss_gives_zero_grads(self):
        x = ad.parameter(np.ones(3))
        loss = Tensor(np.array(5.0))  # no path to x
        loss.backward()
        np.testing.assert_allclose(x.grad, np.zeros(3))

    def test_repeated_backward_accumulates(self):
        x = ad.parameter(np.array([2.0]))
        loss = ad.tensor_sum(ad.mul(x, x))
        loss.backward()
        first = x.grad.copy()
        loss.backward()
        np.testing.assert_allclose(x.grad, 2 * first)

    def test_linear_weight_grad_is_outer_product(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=4))
        w = ad.parameter(rng.normal(size=(4, 3)))
        b = ad.parameter(np.zeros(3))
        out = ad.linear(x, w, b)
        # pick out a weighted sum so the upstream delta is the weight vector
        delta = rng.normal(size=3)
        loss = ad.tensor_sum(ad.mul(out, Tensor(delta)))
        loss.backward()
        np.testing.assert_allclose(w.grad, np.outer(x.data, delta), atol=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_every_layer_against_finite_differences(self, seed):
        rng = np.random.default_rng(seed)

        cases = []

        x = ad.parameter(rng.normal(size=(6, 3)))
        w = ad.parameter(rng.normal(size=(4, 3, 3)))
        b = ad.parameter(rng.normal(size=4))
        cases.append(("conv1d", (x, w, b),
                      lambda: ad.conv1d(x, w, b, padding=1)))

        x2 = ad.parameter(rng.normal(size=(5, 4)))
        w2 = ad.parameter(rng.normal(size=(4, 3)))
        b2 = ad.parameter(rng.normal(size=3))
        cases.append(("linear", (x2, w2, b2), lambda: ad.linear(x2, w2, b2)))

        x3 = ad.parameter(rng.normal(size=(4, 5)))
        cases.append(("relu", (x3,), lambda: ad.relu(x3)))
        x4 = ad.parameter(rng.normal(size=(7, 3)))
        cases.append(("gap", (x4,), lambda: ad.global_avg_pool(x4)))
        x5 = ad.parameter(rng.normal(size=(3, 6)))
        cases.append(("softmax", (x5,), lambda: ad.softmax(x5)))
        x6 = ad.parameter(rng.normal(size=(2, 8)))
        w6 = ad.parameter(rng.normal(size=(2, 8, 3)))
        cases.append(("rowwise_bmm", (x6, w6), lambda: ad.rowwise_bmm(x6, w6)))

        for name, params, fwd in cases:
            weights = rng.normal(size=fwd().data.shape)

            def scalar():
                return float((fwd().data * weights).sum())

            for p in params:
                ad.zero_grads(list(params))
                loss = ad.tensor_sum(ad.mul(fwd(), Tensor(weights)))
                loss.backward()
                num = finite_diff_grad(scalar, p.data)
                assert rel_err(p.grad, num) < 1e-4, f"{name} grad mismatch"

    def test_nll_softmax_chain_against_finite_differences(self):
        rng = np.random.default_rng(3)
        logits = ad.parameter(rng.normal(size=(4, 5)))
        labels = rng.integers(0, 5, size=4)

        def scalar():
            return float(ad.nll_loss(ad.softmax(logits), labels).data)

        loss = ad.nll_loss(ad.softmax(logits), labels)
        loss.backward()
        num = finite_diff_grad(scalar, logits.data)
        assert rel_err(logits.grad, num) < 1e-4

    def test_dropout_backward_uses_same_mask(self):
        rng = np.random.default_rng(0)
        x = ad.parameter(np.ones((50, 4)))
        out = ad.dropout(x, keep_prob=0.8, train=True, rng=rng)
        loss = ad.tensor_sum(out)
        loss.backward()
        # gradient is exactly the realized mask
        np.testing.assert_allclose(x.grad, out.data)

    def test_no_grad_blocks_graph(self):
        x = ad.parameter(np.ones(3))
        with ad.no_grad():
            out = ad.relu(x)
        assert out._backward_fn is None and not out.requires_grad


def test_gradcheck_property_many_seeds():
    """Random small graphs: analytic vs numeric gradients, 100 seeds."""
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x = ad.parameter(rng.normal(size=(3, 4)))
        w = ad.parameter(rng.normal(size=(4, 3)))
        b = ad.parameter(rng.normal(size=3))
        labels = rng.integers(0, 3, size=3)

        def fwd():
            return ad.nll_loss(ad.softmax(ad.linear(ad.relu(x), w, b)), labels)

        loss = fwd()
        loss.backward()
        for p in (w, b):
            num = finite_diff_grad(lambda: float(fwd().data), p.data)
            assert rel_err(p.grad, num) < 1e-4
