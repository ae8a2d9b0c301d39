import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from ctrengine.errors import ConfigurationError, ValidationError
from ctrengine.features import collate
from ctrengine.losses import (MULTI_TASK, BiasConstraintConfig, DualVariables, LossConfig, Ramp, bias_terms,
                              combine, condition_from_dict, distill_loss, logistic_loss, ranknet_batch,
                              ranknet_loss, slice_membership)
from ctrengine.model import CTRModel, ModelConfig
from ctrengine.numerics import sigmoid

from conftest import dense_grad, finite_difference, make_example, rel_error


def brute_ranknet(s, y):
    total = 0.0
    for i in range(len(s)):
        for j in range(len(s)):
            if y[i] == 1 and y[j] != 1:
                total += math.log1p(math.exp(-(s[i] - s[j])))
    return total


class TestLogistic:
    def test_confident_correct(self):
        loss, _ = logistic_loss(np.array([1.0]), np.array([1 - 1e-7]))
        assert loss[0] == pytest.approx(0.0, abs=2e-7)

    def test_half(self):
        loss, g = logistic_loss(np.array([0.0]), np.array([0.5]))
        assert loss[0] == pytest.approx(math.log(2), rel=1e-15)
        assert g[0] == 0.5

    def test_weight_linear(self):
        y, p = np.array([0.0, 1.0, 1.0]), np.array([0.2, 0.7, 0.01])
        l1, g1 = logistic_loss(y, p)
        l4, g4 = logistic_loss(y, p, 4.0)
        np.testing.assert_array_equal(l4, 4 * l1)
        np.testing.assert_array_equal(g4, 4 * g1)

    def test_clamped(self):
        loss, _ = logistic_loss(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
        assert np.all(np.isfinite(loss))

    def test_gradient(self):
        z = np.linspace(-3, 3, 7)
        y = np.array([0, 1, 1, 0, 1, 0, 0.0])
        f = lambda zz: logistic_loss(y, sigmoid(zz))[0].sum()
        _, g = logistic_loss(y, sigmoid(z))
        num = np.array([(f(z + h) - f(z - h)) / 2e-6 for h in np.eye(7) * 1e-6])
        assert rel_error(g, num) < 1e-7


class TestRankNet:
    def test_tied_pair(self):
        loss, _ = ranknet_loss([0.3, 0.3], [1, 0])
        assert loss == pytest.approx(math.log(2), rel=1e-15)

    def test_separated_pair(self):
        loss, g = ranknet_loss([50.0, -50.0], [1, 0])
        assert loss < 1e-40
        assert np.abs(g).max() < 1e-40

    def test_two_by_two(self):
        s = [1.5, -0.2, 0.7, 0.1]
        y = [1, 0, 1, 0]
        loss, _ = ranknet_loss(s, y)
        assert loss == pytest.approx(brute_ranknet(s, y), rel=1e-14)

    def test_single_class_groups(self):
        assert ranknet_loss([1.0, 2.0], [0, 0])[0] == 0.0
        assert ranknet_loss([1.0, 2.0], [1, 1])[0] == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=8), st.integers(0, 2**16), st.floats(-100, 100))
    def test_translation_invariant(self, s, seed, c):
        y = np.random.default_rng(seed).integers(0, 2, len(s))
        a, _ = ranknet_loss(np.array(s), y)
        b, _ = ranknet_loss(np.array(s) + c, y)
        assert b == pytest.approx(a, rel=1e-9, abs=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(1)
        s = rng.normal(size=6)
        y = np.array([1, 0, 0, 1, 0, 1])
        _, g = ranknet_loss(s, y)
        num = np.array([(ranknet_loss(s + h, y)[0] - ranknet_loss(s - h, y)[0]) / 2e-6 for h in np.eye(6) * 1e-6])
        assert rel_error(g, num) < 1e-7

    def test_batch_is_sum_over_groups(self):
        rng = np.random.default_rng(2)
        s = rng.normal(size=12)
        y = rng.integers(0, 2, 12)
        q = np.repeat([0, 1, 2], 4)
        loss, g = ranknet_batch(s, y, q)
        parts = [ranknet_loss(s[q == k], y[q == k]) for k in range(3)]
        assert loss == pytest.approx(sum(p[0] for p in parts), rel=1e-13)
        np.testing.assert_allclose(g, np.concatenate([p[1] for p in parts]), rtol=1e-13)


class TestDistill:
    def test_fixed_point(self):
        p = np.array([0.1, 0.6, 0.93])
        _, g = distill_loss(p, p)
        np.testing.assert_array_equal(g, 0.0)

    def test_half(self):
        loss, _ = distill_loss(np.array([0.5]), np.array([0.5]))
        assert loss[0] == pytest.approx(math.log(2))

    def test_gradient(self):
        t = np.array([0.2, 0.8, 0.5])
        z = np.array([0.3, -1.0, 2.0])
        _, g = distill_loss(t, sigmoid(z), 2.0)
        f = lambda zz: distill_loss(t, sigmoid(zz), 2.0)[0].sum()
        num = np.array([(f(z + h) - f(z - h)) / 2e-6 for h in np.eye(3) * 1e-6])
        assert rel_error(g, num) < 1e-7

    def test_missing_teacher(self):
        with pytest.raises(ValidationError):
            distill_loss(np.array([np.nan]), np.array([0.5]))


class TestCombine:
    def _cache(self, tiny_spec, tiny_examples, cfg=None):
        m = CTRModel(tiny_spec, cfg or ModelConfig(hidden=(4,)))
        return m, m.forward(collate(tiny_examples, tiny_spec))

    def test_ramp_start_is_pure_logistic(self, tiny_spec, tiny_examples):
        _, cache = self._cache(tiny_spec, tiny_examples)
        cfg = LossConfig(alpha1=0.5, rank_ramp=Ramp(0, 10))
        terms = combine(cache, cfg, 0)
        ref = combine(cache, LossConfig(), 0)
        assert terms.weights["rank"] == 0.0
        np.testing.assert_array_equal(terms.dlogit, ref.dlogit)
        assert terms.total == ref.total

    def test_alpha_zero_bitwise(self, tiny_spec, tiny_examples):
        _, cache = self._cache(tiny_spec, tiny_examples)
        a = combine(cache, LossConfig(alpha1=0.0), 5)
        loss, g = logistic_loss(cache.batch.labels, cache.pred, cache.batch.weights)
        np.testing.assert_array_equal(a.dlogit, g)
        assert a.total == float(loss.sum())

    def test_weights_and_ramps(self):
        cfg = LossConfig(alpha1=0.4, distill_weight=2.0, rank_ramp=Ramp(10, 20), distill_ramp=Ramp(5, 6))
        assert cfg.weights(4) == {"logistic": 1.0, "rank": 0.0, "distill": 0.0}
        w = cfg.weights(15)
        assert w["rank"] == pytest.approx(0.2) and w["logistic"] == pytest.approx(0.8) and w["distill"] == 2.0

    def test_curriculum_zero_before_start(self, tiny_spec, tiny_examples):
        _, cache = self._cache(tiny_spec, tiny_examples)
        cfg = LossConfig(alpha1=0.5, distill_weight=1.0, rank_ramp=Ramp(3, 8), distill_ramp=Ramp(3, 8))
        terms = combine(cache, cfg, 2)
        assert set(terms.components) == {"logistic"}
        np.testing.assert_array_equal(terms.dlogit, combine(cache, LossConfig(), 2).dlogit)

    def test_multi_task_needs_rank_head(self, tiny_spec, tiny_examples):
        _, cache = self._cache(tiny_spec, tiny_examples)
        with pytest.raises(ConfigurationError):
            combine(cache, LossConfig(alpha1=0.3, mode=MULTI_TASK), 0)

    def test_multi_task_head_separation(self, tiny_spec, tiny_examples):
        m, cache = self._cache(tiny_spec, tiny_examples, ModelConfig(hidden=(4,), rank_head=True))
        m.params["rank/W"] += 1.0
        again = m.forward(cache.batch)
        np.testing.assert_array_equal(again.logit, cache.logit)
        assert not np.array_equal(again.rank_logit, cache.rank_logit)

    def test_multi_task_rank_gradient_skips_logistic_head(self, tiny_spec, tiny_examples):
        m, cache = self._cache(tiny_spec, tiny_examples, ModelConfig(hidden=(4,), rank_head=True))
        terms = combine(cache, LossConfig(alpha1=0.5, mode=MULTI_TASK), 0)
        only_rank = m.backward(cache, np.zeros(len(tiny_examples)), terms.dlogit_rank)
        np.testing.assert_array_equal(only_rank["out/W"], 0.0)
        assert np.abs(only_rank["rank/W"]).sum() > 0

    @pytest.mark.parametrize("mode", ["multi_objective", MULTI_TASK])
    def test_total_gradient(self, tiny_spec, tiny_examples, mode):
        cfg_m = ModelConfig(hidden=(4,), activation="smelu", rank_head=(mode == MULTI_TASK))
        m = CTRModel(tiny_spec, cfg_m)
        rng = np.random.default_rng(3)
        for k in m.params:
            m.params[k] = rng.normal(0, 0.5, m.params[k].shape)
        batch = collate(tiny_examples, tiny_spec)
        cfg = LossConfig(alpha1=0.3, distill_weight=0.7, mode=mode)
        value = lambda: combine(m.forward(batch), cfg, 0).total
        cache = m.forward(batch)
        terms = combine(cache, cfg, 0)
        grads = m.backward(cache, terms.dlogit, terms.dlogit_rank)
        for name in m.params:
            idx, num = finite_difference(value, m.params, name)
            assert rel_error(dense_grad(grads[name]).reshape(-1)[idx], num) < 1e-4, name

    def test_missing_teacher_raises(self, tiny_spec):
        m = CTRModel(tiny_spec, ModelConfig(hidden=(3,)))
        cache = m.forward(collate([make_example(0)], tiny_spec))
        with pytest.raises(ValidationError):
            combine(cache, LossConfig(distill_weight=1.0), 0)

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            LossConfig(alpha1=1.0)
        with pytest.raises(ConfigurationError):
            LossConfig(mode="other")
        with pytest.raises(ConfigurationError):
            Ramp(5, 2)


def fake_cache(tiny_spec, examples, pred):
    return SimpleNamespace(batch=collate(examples, tiny_spec), pred=np.asarray(pred, dtype=np.float64))


class TestBiasTerms:
    def test_membership(self, tiny_spec):
        ex = [make_example(0, position=1, q=((1, 2), (0,))), make_example(1, position=3, q=((2,), (4,)), ui=2),
              make_example(2, position=4, q=((5,), (4,)))]
        batch = collate(ex, tiny_spec)
        cfg = BiasConstraintConfig(slices=[[{"feature": "q0", "value": 2}], [{"position": [3, 4]}],
                                           [{"feature": "q1", "value": 4}, {"feature": "u0", "value": 2}],
                                           [{"ctr_bucket": 19}]], alpha3=0.1, lr_lambda=0.1)
        member = slice_membership(batch, np.array([0.1, 0.2, 0.95]), cfg.slices, cfg.edges)
        np.testing.assert_array_equal(member, [[1, 1, 0], [0, 1, 1], [0, 1, 0], [0, 0, 1]])

    def test_calibrated_slice_fixed_point(self, tiny_spec):
        ex = [make_example(0, label=1), make_example(1, label=0)]
        cfg = BiasConstraintConfig(slices=[[{"feature": "q1", "value": 0}]], alpha3=0.1, lr_lambda=0.5)
        duals = DualVariables(1)
        out = bias_terms(fake_cache(tiny_spec, ex, [0.5, 0.5]), duals, cfg, 0)
        np.testing.assert_array_equal(out.dual_step, [0.0])
        np.testing.assert_array_equal(out.dlogit, 0.0)

    def test_single_example_update(self, tiny_spec):
        ex = [make_example(0, label=1, q=((0,), (1,))), make_example(1, label=0, q=((0,), (2,)))]
        cfg = BiasConstraintConfig(slices=[[{"feature": "q1", "value": 1}]], alpha3=0.1, lr_lambda=0.3,
                                   ramp=Ramp(0, 4))
        out = bias_terms(fake_cache(tiny_spec, ex, [0.25, 0.6]), DualVariables(1), cfg, 2)
        assert out.dual_step[0] == pytest.approx(0.3 * 0.5 * 0.75, rel=1e-15)

    def test_ramp_zero_is_inert(self, tiny_spec):
        ex = [make_example(0, label=1)]
        cfg = BiasConstraintConfig(slices=[[{"position": [1, 1]}]], alpha3=0.1, lr_lambda=0.3, ramp=Ramp(5, 10))
        duals = DualVariables(1)
        duals.lambdas[:] = 2.0
        out = bias_terms(fake_cache(tiny_spec, ex, [0.3]), duals, cfg, 0)
        assert out.value == 0.0
        np.testing.assert_array_equal(out.dlogit, 0.0)
        np.testing.assert_array_equal(out.dual_step, 0.0)

    def test_logit_gradient(self, tiny_spec, tiny_examples):
        cfg = BiasConstraintConfig(slices=[[{"position": [1, 2]}], [{"feature": "q1", "value": 3}]],
                                   alpha3=0.2, lr_lambda=0.1, ramp=Ramp(0, 4))
        duals = DualVariables(2)
        duals.lambdas[:] = [0.7, -1.3]
        z = np.random.default_rng(0).normal(size=len(tiny_examples))
        f = lambda zz: bias_terms(fake_cache(tiny_spec, tiny_examples, sigmoid(zz)), duals, cfg, 3).value
        g = bias_terms(fake_cache(tiny_spec, tiny_examples, sigmoid(z)), duals, cfg, 3).dlogit
        num = np.array([(f(z + h) - f(z - h)) / 2e-6 for h in np.eye(len(z)) * 1e-6])
        assert rel_error(g, num) < 1e-6

    def test_dual_step_is_lambda_gradient(self, tiny_spec, tiny_examples):
        cfg = BiasConstraintConfig(slices=[[{"position": [1, 2]}]], alpha3=0.2, lr_lambda=0.1)
        p = np.linspace(0.1, 0.9, len(tiny_examples))
        duals = DualVariables(1)
        duals.lambdas[:] = 0.4

        def value(lam):
            duals.lambdas[:] = lam
            return bias_terms(fake_cache(tiny_spec, tiny_examples, p), duals, cfg, 0).value

        num = (value(0.4 + 1e-6) - value(0.4 - 1e-6)) / 2e-6
        duals.lambdas[:] = 0.4
        step = bias_terms(fake_cache(tiny_spec, tiny_examples, p), duals, cfg, 0).dual_step[0]
        assert step == pytest.approx(cfg.lr_lambda * num, rel=1e-7)

    def test_toy_saddle(self, tiny_spec):
        # one shared scalar logit; slice S has CTR a, the rest CTR b
        n_s, n_o, a, b, alpha3 = 4, 6, 0.75, 1 / 6, 0.5
        labels_s = [1, 1, 1, 0]
        labels_o = [1, 0, 0, 0, 0, 0]
        ex = [make_example(i, label=l, q=((0,), (1,))) for i, l in enumerate(labels_s)]
        ex += [make_example(n_s + i, label=l, q=((0,), (2,))) for i, l in enumerate(labels_o)]
        cfg = BiasConstraintConfig(slices=[[{"feature": "q1", "value": 1}]], alpha3=alpha3, lr_lambda=0.05)

        def stationarity(p):
            lam = (a - p) / alpha3
            return n_s * (p - a) + n_o * (p - b) - lam * n_s * p * (1 - p)

        p_star = brentq(stationarity, 1e-6, 1 - 1e-6)
        lam_star = (a - p_star) / alpha3

        theta, duals = 0.0, DualVariables(1)
        y = np.array(labels_s + labels_o, dtype=float)
        for _ in range(20_000):
            p = np.full(len(ex), sigmoid(theta))
            bt = bias_terms(fake_cache(tiny_spec, ex, p), duals, cfg, 0)
            g = float(np.sum(p - y) + bt.dlogit.sum())
            theta -= 0.05 * g
            duals.apply(bt.dual_step)
        assert sigmoid(theta) == pytest.approx(p_star, abs=1e-8)
        assert duals.lambdas[0] == pytest.approx(lam_star, abs=1e-7)

    def test_config_round_trip(self):
        cfg = BiasConstraintConfig(slices=[[{"feature": "q0", "value": 3}, {"position": [2, 5]}],
                                           [{"ctr_bucket": 4}]], alpha3=0.1, lr_lambda=0.2, ramp=Ramp(1, 9))
        again = BiasConstraintConfig(**cfg.to_dict())
        assert again.slices == cfg.slices and again.ramp == cfg.ramp

    def test_bad_condition(self):
        with pytest.raises(ConfigurationError):
            condition_from_dict({"colour": "red"})
