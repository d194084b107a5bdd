import numpy as np
import pytest

from udarts.autodiff import Tensor, finite_diff_grad, max_rel_err, ops, value_and_grad
from udarts.uncertainty import (CALLS, DropoutParams, MaskSampler, McPrediction, apply_dropout,
                                binary_entropy, concrete_mask, logit, mc_predict,
                                mc_regularizer, predictive_variance)


def brute_variance(samples, tau_inverse=0.0):
    t, b, d = samples.shape
    total = 0.0
    for i in range(b):
        for k in range(d):
            col = samples[:, i, k]
            mean = sum(col) / t
            total += sum((v - mean) ** 2 for v in col) / t
    return total / b + tau_inverse * d


def random_probs(rng, shape):
    z = np.exp(rng.normal(size=shape))
    return z / z.sum(axis=-1, keepdims=True)


class TestConcreteMask:
    def test_no_dropout_limit(self):
        m = concrete_mask(Tensor(-60.0), 0.1, shape=(1000,), rng=np.random.default_rng(0))
        assert np.all(m.data > 1 - 1e-6)

    def test_full_dropout_limit(self):
        m = concrete_mask(Tensor(60.0), 0.1, shape=(1000,), rng=np.random.default_rng(0))
        assert np.all(m.data < 1e-6)

    def test_mean_mask(self):
        m = concrete_mask(Tensor(logit(0.3)), 0.1, shape=(100_000,), rng=np.random.default_rng(1))
        assert abs(m.data.mean() - 0.7) < 0.01
        assert np.all((m.data >= 0) & (m.data <= 1))  # open interval up to float64 rounding

    def test_rejects_bad_temperature(self):
        with pytest.raises(ValueError):
            concrete_mask(Tensor(0.0), 0.0, shape=(3,))

    @pytest.mark.parametrize("seed", range(5))
    def test_reparameterized_gradient(self, seed):
        rng = np.random.default_rng(seed)
        u = rng.uniform(0.05, 0.95, size=(4, 3))
        x = rng.normal(size=(4, 3))

        def loss(p):
            site = ops.take(p["logits"], 0)
            return ops.sum(ops.square(apply_dropout(Tensor(x), site, 0.5, _FixedSampler(u))))

        params = {"logits": np.array([rng.normal(), 0.0])}
        _, grads, _ = value_and_grad(loss, params)
        fd = finite_diff_grad(lambda q: float(loss({"logits": Tensor(q["logits"])}).data), params)
        assert max_rel_err(grads["logits"], fd["logits"]) < 1e-4


class _FixedSampler:
    groups = 1

    def __init__(self, u):
        self.u = u

    def uniform(self, shape):
        return self.u


class TestSampler:
    def test_stacked_matches_separate_streams(self):
        stacked = MaskSampler(5, groups=3).uniform((6, 2))
        for t in range(3):
            alone = MaskSampler(5, groups=1)
            alone._rngs = [np.random.default_rng([5, t])]
            np.testing.assert_array_equal(stacked[2 * t:2 * t + 2], alone.uniform((2, 2)))

    def test_indivisible_batch(self):
        with pytest.raises(ValueError):
            MaskSampler(0, groups=3).uniform((4, 2))


class TestMcPredict:
    @staticmethod
    def deterministic(x, sampler):
        return Tensor(np.stack([x[:, 0], -x[:, 0]], axis=1))

    @staticmethod
    def stochastic(x, sampler):
        h = apply_dropout(Tensor(x), Tensor(logit(0.3)), 0.1, sampler)
        return ops.concat([h, ops.neg(h)], axis=1)

    def test_no_dropout_identical_samples(self):
        x = np.random.default_rng(0).normal(size=(4, 1))
        mc = mc_predict(self.deterministic, x, T=5, seed=0)
        assert mc.T == 5
        for t in range(1, 5):
            np.testing.assert_array_equal(mc.samples[t], mc.samples[0])
        np.testing.assert_allclose(mc.mean, mc.samples[0], rtol=1e-15, atol=1e-15)
        assert predictive_variance(mc) == 0.0

    def test_rows_sum_to_one(self):
        x = np.random.default_rng(0).normal(size=(4, 1))
        mc = mc_predict(self.stochastic, x, T=7, seed=3)
        np.testing.assert_allclose(mc.samples.sum(axis=-1), 1.0, atol=1e-9)

    def test_seed_reproducible(self):
        x = np.random.default_rng(0).normal(size=(4, 1))
        a = mc_predict(self.stochastic, x, T=6, seed=11).samples
        b = mc_predict(self.stochastic, x, T=6, seed=11).samples
        c = mc_predict(self.stochastic, x, T=6, seed=12).samples
        assert a.tobytes() == b.tobytes()
        assert a.tobytes() != c.tobytes()


class TestPredictiveVariance:
    def test_two_opposite_samples(self):
        mc = McPrediction(np.array([[[1.0, 0.0]], [[0.0, 1.0]]]))
        assert predictive_variance(mc) == 0.5

    def test_identical_samples_give_tau_term(self):
        s = np.tile(random_probs(np.random.default_rng(0), (1, 3, 4)), (6, 1, 1))
        assert predictive_variance(McPrediction(s), tau_inverse=0.3) == 0.3 * 4

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_direct_formula(self, seed):
        rng = np.random.default_rng(seed)
        s = random_probs(rng, (int(rng.integers(2, 9)), int(rng.integers(1, 5)), 3))
        tau = float(rng.uniform(0, 0.5))
        assert abs(predictive_variance(McPrediction(s), tau) - brute_variance(s, tau)) < 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_permutation_invariant_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        s = random_probs(rng, (8, 3, 4))
        v = predictive_variance(McPrediction(s), 0.1)
        vp = predictive_variance(McPrediction(s[rng.permutation(8)]), 0.1)
        assert abs(v - vp) < 1e-14
        assert v > 0.1 * 4

    def test_needs_two_samples(self):
        with pytest.raises(ValueError):
            predictive_variance(McPrediction(np.ones((1, 2, 2)) / 2))

    def test_gradient_through_samples(self):
        rng = np.random.default_rng(4)
        params = {"z": rng.normal(size=(5, 2, 3))}
        loss = lambda p: predictive_variance(ops.softmax(p["z"]), 0.0)
        _, grads, _ = value_and_grad(loss, params)
        fd = finite_diff_grad(lambda q: float(loss({"z": Tensor(q["z"])}).data), params)
        assert max_rel_err(grads["z"], fd["z"]) < 1e-4


class TestRegularizer:
    def test_entropy_at_half(self):
        assert abs(binary_entropy(Tensor([0.0])).data[0] - np.log(2)) < 1e-15

    def test_hand_example(self):
        val = mc_regularizer(Tensor([logit(0.2)]), [Tensor(4.0)], [10], 100, 1.0).item()
        h = -(0.2 * np.log(0.2) + 0.8 * np.log(0.8))
        assert abs(val - (1.6 - 10 * h) / 100) < 1e-12
        assert abs(val - (-0.03404)) < 1e-5

    def test_zero_weights(self):
        val = mc_regularizer(Tensor([logit(0.4)]), [Tensor(0.0)], [7], 50, 0.3).item()
        h = -(0.4 * np.log(0.4) + 0.6 * np.log(0.6))
        assert abs(val - (-7 / 50 * h)) < 1e-12

    def test_clamps_extreme_logits(self):
        val = mc_regularizer(Tensor([80.0]), [Tensor(1.0)], [3], 10, 1.0)
        assert np.isfinite(val.item())

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        params = {"logits": rng.normal(size=3), "m0": rng.normal(size=(2, 2)),
                  "m1": rng.normal(size=4), "m2": rng.normal(size=(3,))}

        def loss(p):
            norms = [ops.sum(ops.square(p[k])) for k in ("m0", "m1", "m2")]
            return mc_regularizer(p["logits"], norms, [2, 4, 3], 20, 0.7)

        _, grads, _ = value_and_grad(loss, params)
        fd = finite_diff_grad(lambda q: float(loss({k: Tensor(v) for k, v in q.items()}).data), params)
        for k in params:
            assert max_rel_err(grads[k], fd[k]) < 1e-4

    def test_counters(self):
        before = CALLS["mc_regularizer"]
        mc_regularizer(Tensor([0.0]), [Tensor(1.0)], [1], 1, 1.0)
        assert CALLS["mc_regularizer"] == before + 1


class TestDropoutParams:
    def test_initial_probability(self):
        d = DropoutParams.initial(3)
        np.testing.assert_allclose(d.p, 0.1)

    @pytest.mark.parametrize("kw", [{"temperature": 0.0}, {"length_scale": -1.0},
                                    {"tau_inverse": -0.1}])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            DropoutParams(np.zeros(2), **kw)

    def test_non_finite_logits(self):
        with pytest.raises(ValueError):
            DropoutParams(np.array([np.inf]))
