import numpy as np
import pytest
import torch

import cntpp.effects as effects
from cntpp.effects import (
    EffectEstimate,
    MissingTreatment,
    ate_from_estimates,
    default_step,
    engagement_items,
    predict_ate,
    predict_effect,
    predict_effects,
    rollout_effects,
    treated_sample_items,
)
from cntpp.events import ENGAGEMENT, EventSequence, TrainingSample, engagement, generation
from helpers import history, make_model, pin_unit_process


class Fn(torch.nn.Module):
    def __init__(self, fn):
        super().__init__()
        self.fn = fn

    def forward(self, *args):
        return self.fn(*args)


def linear_process(model, c, a, b):
    """Pin the outcome head to λ ≡ c and E[f | τ] = a + b·τ, ignoring h."""
    a, b = torch.as_tensor(a, dtype=torch.float64), torch.as_tensor(b, dtype=torch.float64)

    def intensity(h, t_n, tau):
        tau = torch.as_tensor(tau, dtype=torch.float64)
        return c * tau, torch.full_like(tau, c)

    def expectation(h, tau, t):
        return a + b * tau[..., None]

    model.outcome.intensity = Fn(intensity)
    model.outcome.marks.expectation = expectation
    model.unstandardise = lambda z: z
    return model


def test_default_step():
    assert default_step(10.0) == 0.05
    assert default_step(10.0, 0.3) == 0.3


class TestPinnedQuadrature:
    T, STEP, C = 10.0, 0.05, 0.7
    A, B = [0.3, -1.2], [0.02, 0.5]

    def run(self):
        model = linear_process(make_model(), self.C, self.A, self.B)
        s = history(n=6)
        k = 3  # odd positions are engagements
        assert s[k].kind == ENGAGEMENT
        return predict_effects(model, [(s, k)], self.T, self.STEP)[0]

    def test_arm_functional_by_hand(self):
        est = self.run()
        # left-Riemann nodes 0, Δ, ..., T−Δ: the τ average is (T − Δ)/2
        hand = np.array(self.A) + np.array(self.B) * (self.T - self.STEP) / 2
        assert np.allclose(est.f1, hand, atol=1e-12)
        assert np.allclose(est.f0, hand, atol=1e-12)
        assert est.mu1 == pytest.approx(self.C * self.T, abs=1e-12)

    def test_continuum_limit(self):
        est = self.run()
        exact = np.array(self.A) + np.array(self.B) * self.T / 2
        assert np.allclose(est.f1 - exact, -np.array(self.B) * self.STEP / 2, atol=1e-12)

    def test_same_process_gives_zero(self):
        assert np.array_equal(self.run().ite, np.zeros(2))


def test_forced_equal_encodings_give_exact_zero(monkeypatch):
    model = make_model(seed=4)
    real = effects._encodings

    def tied(model, items):
        h1, h0, t = real(model, items)
        return h0, h0, t

    monkeypatch.setattr(effects, "_encodings", tied)
    s = history(n=7, seed=2)
    ests = predict_effects(model, engagement_items([s]), 10.0, 0.1)
    assert ests and all(e.defined and not e.ite.any() for e in ests)


def test_treatment_changes_prediction():
    model = make_model(seed=1)
    s = history(n=7, seed=2)
    est = predict_effects(model, [(s, 3)], 10.0, 0.1)[0]
    assert est.defined and np.abs(est.ite).max() > 0
    assert np.array_equal(est.ite, est.f1 - est.f0)


def test_step_halving_converges():
    model = make_model(seed=5)
    s = history(n=7, seed=3)
    f = {d: predict_effects(model, [(s, 3)], 10.0, d)[0] for d in (0.2, 0.1, 0.2 / 64)}
    for arm in ("f1", "f0"):
        ref = getattr(f[0.2 / 64], arm)
        err = np.abs(getattr(f[0.2], arm) - ref)
        change = np.abs(getattr(f[0.1], arm) - getattr(f[0.2], arm))
        assert np.all(change <= err + 1e-12)


def test_batched_matches_single():
    model = make_model(seed=6)
    seqs = [history(n=n, seed=n) for n in (4, 6, 9)]
    items = engagement_items(seqs)
    batched = predict_effects(model, items, 10.0, 0.1, chunk=2)
    for (s, k), b in zip(items, batched):
        one = predict_effects(model, [(s, k)], 10.0, 0.1)[0]
        assert np.allclose(one.ite, b.ite, atol=1e-12)


def test_predict_effect_from_sample():
    model = make_model(seed=7)
    s = history(n=6)
    sample = TrainingSample(generation(s[3].t + 1.0, [0.0, 0.0]), s[3], s.prefix(3))
    a = predict_effect(model, sample, 10.0, 0.1)
    b = predict_effects(model, [(s, 3)], 10.0, 0.1)[0]
    assert np.allclose(a.ite, b.ite, atol=1e-12)


class TestUndefined:
    def test_below_floor(self):
        model = linear_process(make_model(), 1e-5, [0.0, 0.0], [0.0, 0.0])
        est = predict_effects(model, [(history(n=4), 1)], 10.0, 0.1)[0]
        assert not est.defined and est.mu1 < 1e-3

    def test_floor_configurable(self):
        model = linear_process(make_model(), 1e-5, [0.0, 0.0], [0.0, 0.0])
        est = predict_effects(model, [(history(n=4), 1)], 10.0, 0.1, eps_count=1e-5)[0]
        assert est.defined


class TestValidation:
    def test_non_engagement_rejected(self):
        with pytest.raises(MissingTreatment):
            predict_effects(make_model(), [(history(n=4), 0)])

    def test_out_of_range(self):
        with pytest.raises(MissingTreatment):
            predict_effects(make_model(), [(history(n=4), 9)])

    def test_sample_without_treatment(self):
        s = history(n=4)
        with pytest.raises(MissingTreatment):
            predict_effect(make_model(), TrainingSample(generation(20.0, [0.0, 0.0]), None, s))

    def test_bad_window(self):
        with pytest.raises(ValueError):
            predict_effects(make_model(), [(history(n=4), 1)], window=0.0)


class TestAte:
    def est(self, ite):
        return EffectEstimate(None if ite is None else np.asarray(ite, float), np.zeros(2), np.zeros(2), 1.0, 1.0)

    def test_mean_of_defined(self):
        ate = ate_from_estimates(3, [self.est([1.0, 0.0]), self.est([3.0, 2.0]), self.est(None)])
        assert np.allclose(ate.ate, [2.0, 1.0])
        assert (ate.n_used, ate.n_undefined) == (2, 1)

    def test_all_undefined(self):
        with pytest.raises(ValueError):
            ate_from_estimates(0, [self.est(None)])

    def test_unknown_news(self):
        with pytest.raises(LookupError):
            predict_ate(make_model(), [history(n=6)], news_id=99)

    def test_matches_manual_average(self):
        model = make_model(seed=8)
        seqs = [history(n=6, seed=i) for i in range(4)]
        news = seqs[0][1].news_id
        ate = predict_ate(model, seqs, news, 10.0, 0.1)
        items = engagement_items(seqs, news)
        manual = np.mean([e.ite for e in predict_effects(model, items, 10.0, 0.1)], axis=0)
        assert np.allclose(ate.ate, manual)


def test_item_selection():
    s = EventSequence(0, (generation(1.0, [0.0]), engagement(2.0, [0.0], 0), generation(3.0, [0.0]),
                          engagement(4.0, [0.0], 1), engagement(5.0, [0.0], 2)))
    assert [k for _, k in engagement_items([s])] == [1, 3, 4]
    assert [k for _, k in engagement_items([s], news_id=1)] == [3]
    assert [k for _, k in treated_sample_items([s])] == [1]


class TestRollout:
    def test_unit_process_counts(self):
        model = make_model(seed=9)
        pin_unit_process(model)
        est = rollout_effects(model, [(history(n=4), 1)], window=5.0, rollouts=4000, seed=0)[0]
        se = np.sqrt(5.0 / 4000)
        assert abs(est.mu1 - 5.0) < 4 * se and abs(est.mu0 - 5.0) < 4 * se
        # marks are N(0, I) in standardised units, so F has mean zero, SE ~ 1/sqrt(total events)
        assert np.all(np.abs(est.ite) < 4 * np.sqrt(2 / 20000))

    def test_seeded(self):
        model = make_model(seed=10)
        a = rollout_effects(model, [(history(n=4), 1)], window=3.0, rollouts=50, seed=1)[0]
        b = rollout_effects(model, [(history(n=4), 1)], window=3.0, rollouts=50, seed=1)[0]
        assert np.array_equal(a.ite, b.ite)

    def test_agrees_with_quadrature_for_history_free_heads(self):
        """When the heads ignore h, feeding samples back cannot matter."""
        model = make_model(seed=11)
        pin_unit_process(model)
        q = predict_effects(model, [(history(n=4), 1)], 5.0, 0.01)[0]
        r = rollout_effects(model, [(history(n=4), 1)], window=5.0, rollouts=4000, seed=2)[0]
        assert q.mu1 == pytest.approx(5.0, rel=1e-9)
        assert abs(r.mu1 - q.mu1) < 4 * np.sqrt(5.0 / 4000)
        assert np.all(np.abs(r.f1 - q.f1) < 4 / np.sqrt(20000))
