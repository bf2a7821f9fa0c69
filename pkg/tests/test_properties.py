"""Randomised invariants across modules."""

import numpy as np
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cntpp.events import EventSequence, build_outcome_samples, build_treatment_samples, engagement, generation, quadrature
from helpers import make_model

seeds = st.integers(0, 2**31 - 1)


def random_state(seed, n=8, hidden=16):
    gen = torch.Generator().manual_seed(seed)
    return 3 * torch.randn(n, hidden, generator=gen, dtype=torch.float64)


@settings(max_examples=30, deadline=None)
@given(seeds, seeds)
def test_cumulative_intensity_invariants(model_seed, h_seed):
    model = make_model(seed=model_seed % 1000)
    h = random_state(h_seed)
    t_n = torch.rand(8, generator=torch.Generator().manual_seed(h_seed), dtype=torch.float64) * 50
    taus = torch.linspace(0, 40, 81, dtype=torch.float64)
    hh = h[:, None, :].expand(8, 81, 16)
    cum, lam = model.outcome.intensity(hh, t_n[:, None].expand(8, 81), taus.expand(8, 81))
    assert torch.all(cum[:, 0] == 0)
    assert torch.all(cum.diff(dim=1) >= 0)
    assert torch.all(lam >= 0)


@settings(max_examples=30, deadline=None)
@given(seeds, seeds, st.floats(0.0, 30.0))
def test_mixture_weights_normalised(model_seed, h_seed, tau):
    model = make_model(m=5, seed=model_seed % 1000)
    h = random_state(h_seed)
    tau_t = torch.full((8,), tau, dtype=torch.float64)
    log_w, log_sigma, mu = model.outcome.marks.components(h, tau_t, tau_t)
    assert torch.allclose(log_w.exp().sum(-1), torch.ones(8, dtype=torch.float64), atol=1e-12)
    expect = model.outcome.marks.expectation(h, tau_t, tau_t)
    assert torch.allclose(expect, (log_w.exp()[..., None] * mu).sum(1), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(float, 3, elements=st.floats(-5, 5)), st.floats(0.0, 5.0), st.floats(0.01, 5.0),
       st.floats(1e-3, 0.5))
def test_quadrature_exact_for_constants(c, t1, length, step):
    got = quadrature(lambda t: np.broadcast_to(c, (len(t), 3)), t1, t1 + length, step)
    assert np.allclose(got, c * length, rtol=1e-12, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 5.0), st.floats(0.1, 5.0), st.floats(1e-3, 0.2))
def test_quadrature_left_sum_bounds_increasing(t1, length, step):
    # a left sum underestimates an increasing integrand by at most step × (f(t2) − f(t1))
    f = lambda t: np.exp(0.3 * t)[:, None]
    got = quadrature(f, t1, t1 + length, step)[0]
    exact = (np.exp(0.3 * (t1 + length)) - np.exp(0.3 * t1)) / 0.3
    assert got <= exact + 1e-12
    assert exact - got <= step * (np.exp(0.3 * (t1 + length)) - np.exp(0.3 * t1)) + 1e-12


@st.composite
def sequences(draw):
    n = draw(st.integers(0, 12))
    gaps = draw(st.lists(st.floats(0.01, 3.0), min_size=n, max_size=n))
    kinds = draw(st.lists(st.booleans(), min_size=n, max_size=n))
    t = np.cumsum(gaps)
    events = [engagement(t[i], [0.1 * i], i) if k else generation(t[i], [0.1 * i]) for i, k in enumerate(kinds)]
    return EventSequence(0, tuple(events))


@settings(max_examples=100, deadline=None)
@given(sequences())
def test_sample_construction_partitions_events(s):
    outs = build_outcome_samples(s)
    trs = build_treatment_samples(s)
    # every generation event after the first position is one outcome; every engagement after it one treatment
    n_gen = sum(e.kind == "generation" for e in s.events[1:])
    n_eng = sum(e.kind == "engagement" for e in s.events[1:])
    assert len(outs) == n_gen and len(trs) == n_eng
    for smp in outs:
        last = smp.treatment or smp.outcome
        assert all(e.t < last.t for e in smp.covariates.events)
        if smp.treatment is not None:
            assert smp.treatment.t < smp.outcome.t
    for target, cov in trs:
        assert all(e.t < target.t for e in cov.events)
