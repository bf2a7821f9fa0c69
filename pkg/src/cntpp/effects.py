"""Counterfactual effect estimates from a trained model.

For an engagement at time ``t_tr`` the factual arm conditions on
``H(Tr ∪ X)`` and the counterfactual arm on ``H(X)``.  Each arm's window
functional is ``F = φ / μ`` with ``μ = ∫ λ`` and ``φ = ∫ λ·E[f|t,h]`` over
``[t_tr, t_tr + T]``, both by left-Riemann quadrature.  Elapsed time is
measured from ``t_tr`` in both arms, so the arms differ only in ``h``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .events import ENGAGEMENT, EventSequence, riemann_grid
from .model import CntppModel
from .training import make_batch

EPS_COUNT = 1e-3
UNDEFINED = "undefined"
STEPS_PER_WINDOW = 200


def default_step(window: float, step: Optional[float] = None) -> float:
    return window / STEPS_PER_WINDOW if step is None else step


@dataclass
class EffectEstimate:
    ite: Optional[np.ndarray]  # None when undefined
    f1: np.ndarray
    f0: np.ndarray
    mu1: float
    mu0: float

    @property
    def defined(self) -> bool:
        return self.ite is not None


class MissingTreatment(ValueError):
    pass


def arm_functional(model: CntppModel, h: torch.Tensor, t_n: torch.Tensor, t_start: torch.Tensor,
                   window: float, step: float) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """``(μ, φ, F)`` for conditioning states ``h`` (N, H) over ``[t_start, t_start + window]``.

    ``t_n`` is each row's last conditioning time (``t_n ≤ t_start``); the
    intensity is evaluated at elapsed time ``t − t_n``.
    """
    nodes, widths = riemann_grid(0.0, window, step)
    s = torch.from_numpy(nodes)
    w = torch.from_numpy(widths)
    N, G = h.shape[0], s.shape[0]
    tn = t_n[:, None].expand(N, G)
    tau = (t_start - t_n)[:, None] + s[None, :]
    hh = h[:, None, :].expand(N, G, h.shape[-1])
    _, lam = model.outcome.intensity(hh, tn, tau)
    ef = model.unstandardise(model.outcome.marks.expectation(hh, tau, tn + tau))
    mu = lam @ w
    phi = ((lam * w)[..., None] * ef).sum(dim=1)
    return mu, phi, phi / mu[:, None]


def _encodings(model: CntppModel, items: Sequence[tuple[EventSequence, int]]):
    """``(h1, h0, t_tr)`` for engagement ``seq[k]`` of each item."""
    seqs = [seq.prefix(k + 1) for seq, k in items]
    batch = make_batch(model, seqs)
    S = model.encoder.states(batch.x)
    b = torch.arange(len(items))
    k = torch.tensor([k for _, k in items], dtype=torch.long)
    h0 = S[b, k]
    xt = batch.x[b, k].clone()
    xt[:, -1] = 1.0
    h1 = model.encoder.step(h0, xt)
    return h1, h0, batch.times[b, k]


@torch.no_grad()
def predict_effects(
    model: CntppModel,
    items: Sequence[tuple[EventSequence, int]],
    window: float = 10.0,
    step: Optional[float] = None,
    eps_count: float = EPS_COUNT,
    chunk: int = 256,
) -> list[EffectEstimate]:
    """Batched effect estimates; ``items`` are ``(sequence, engagement index)`` pairs.

    Args:
        window: Effect window length ``T``.
        step: Quadrature spacing; defaults to ``T / 200``.
        eps_count: Floor on each arm's expected count below which the ITE is undefined.
    """
    step = default_step(window, step)
    if window <= 0 or step <= 0:
        raise ValueError("window and step must be positive")
    for seq, k in items:
        if not 0 <= k < len(seq) or seq[k].kind != ENGAGEMENT:
            raise MissingTreatment(f"user {seq.user_id}: event {k} is not an engagement")
    model.eval()
    out = []
    for c in range(0, len(items), chunk):
        part = items[c:c + chunk]
        h1, h0, t_tr = _encodings(model, part)
        mu1, _, F1 = arm_functional(model, h1, t_tr, t_tr, window, step)
        mu0, _, F0 = arm_functional(model, h0, t_tr, t_tr, window, step)
        for i in range(len(part)):
            ok = mu1[i] >= eps_count and mu0[i] >= eps_count
            ite = (F1[i] - F0[i]).numpy() if ok else None
            out.append(EffectEstimate(ite, F1[i].numpy(), F0[i].numpy(), float(mu1[i]), float(mu0[i])))
    return out


def predict_effect(model: CntppModel, sample, window: float = 10.0, step: Optional[float] = None,
                   eps_count: float = EPS_COUNT) -> EffectEstimate:
    """Effect for a with-treatment :class:`TrainingSample`."""
    if sample.treatment is None:
        raise MissingTreatment("sample has no treatment")
    events = sample.covariates.events + (sample.treatment,)
    seq = EventSequence(sample.covariates.user_id, events)
    return predict_effects(model, [(seq, len(events) - 1)], window, step, eps_count)[0]


def engagement_items(seqs: Sequence[EventSequence], news_id: Optional[int] = None):
    return [(s, i) for s in seqs for i, e in enumerate(s.events)
            if e.kind == ENGAGEMENT and (news_id is None or e.news_id == news_id)]


def treated_sample_items(seqs: Sequence[EventSequence]):
    """Engagements immediately followed by a generation event (the with-treatment samples)."""
    return [(s, i) for s in seqs for i in range(len(s) - 1)
            if s[i].kind == ENGAGEMENT and s[i + 1].kind != ENGAGEMENT]


@dataclass
class AteEstimate:
    news_id: int
    ate: np.ndarray
    n_used: int
    n_undefined: int


def predict_ate(model: CntppModel, seqs: Sequence[EventSequence], news_id: int, window: float = 10.0,
                step: Optional[float] = None, eps_count: float = EPS_COUNT) -> AteEstimate:
    items = engagement_items(seqs, news_id)
    if not items:
        raise LookupError(f"no engagements with news {news_id}")
    return ate_from_estimates(news_id, predict_effects(model, items, window, step, eps_count))


def ate_from_estimates(news_id: int, ests: Sequence[EffectEstimate]) -> AteEstimate:
    defined = [e.ite for e in ests if e.defined]
    if not defined:
        raise ValueError(f"news {news_id}: every ITE is undefined")
    return AteEstimate(news_id, np.mean(defined, axis=0), len(defined), len(ests) - len(defined))


# -- autoregressive rollout (optional mode) ----------------------------------


@torch.no_grad()
def _sample_mixture(model: CntppModel, h, tau, t, gen: torch.Generator) -> torch.Tensor:
    log_w, log_sigma, mu = model.outcome.marks.components(h, tau, t)
    j = torch.multinomial(log_w.exp(), 1, generator=gen)[:, 0]
    rows = torch.arange(h.shape[0])
    z = mu[rows, j] + log_sigma[rows, j].exp()[:, None] * torch.randn(mu.shape[0], mu.shape[-1], generator=gen)
    return model.unstandardise(z)


@torch.no_grad()
def _invert_cumulative(model, h, t_n, lo, hi, target, iters=60):
    """Smallest τ in [lo, hi] with Λ(τ) ≥ target (bisection on the monotone Λ)."""
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        cum, _ = model.outcome.intensity(h, t_n, mid)
        below = cum < target
        lo = torch.where(below, mid, lo)
        hi = torch.where(below, hi, mid)
    return hi


@torch.no_grad()
def rollout_effects(
    model: CntppModel,
    items: Sequence[tuple[EventSequence, int]],
    window: float = 10.0,
    rollouts: int = 100,
    seed: int = 0,
    eps_count: float = EPS_COUNT,
    max_events: int = 200,
) -> list[EffectEstimate]:
    """Monte-Carlo alternative that feeds sampled posts back into the encoder.

    Only the outcome (generation) process is simulated; ``F`` per arm is the
    ratio of the mean feature sum to the mean count across rollouts.
    """
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    h1, h0, t_tr = _encodings(model, items)
    n = len(items)
    h = torch.cat([h1, h0]).repeat_interleave(rollouts, dim=0)
    t_n = torch.cat([t_tr, t_tr]).repeat_interleave(rollouts)
    end = t_n + window
    prev_t = t_n.clone()
    count = torch.zeros(h.shape[0])
    fsum = torch.zeros(h.shape[0], model.cfg.d_f)
    alive = torch.ones(h.shape[0], dtype=torch.bool)
    for _ in range(max_events):
        if not alive.any():
            break
        idx = torch.nonzero(alive)[:, 0]
        hh, tn = h[idx], t_n[idx]
        c_end, _ = model.outcome.intensity(hh, tn, end[idx] - tn)
        target = -torch.log(torch.rand(idx.shape[0], generator=gen))
        hit = target <= c_end
        alive[idx[~hit]] = False
        if not hit.any():
            break
        idx, hh, tn, target = idx[hit], hh[hit], tn[hit], target[hit]
        tau = _invert_cumulative(model, hh, tn, torch.zeros_like(tn), end[idx] - tn, target)
        t_new = tn + tau
        f = _sample_mixture(model, hh, tau, t_new, gen)
        count[idx] += 1
        fsum[idx] += f
        x = model.event_inputs(f, t_new, torch.zeros_like(t_new), torch.zeros_like(t_new), prev_t[idx])
        h[idx] = model.encoder.step(hh, x)
        t_n[idx] = t_new
        prev_t[idx] = t_new
    mu = count.reshape(2, n, rollouts).mean(-1)
    phi = fsum.reshape(2, n, rollouts, -1).mean(2)
    out = []
    for i in range(n):
        ok = mu[0, i] >= eps_count and mu[1, i] >= eps_count
        F1 = (phi[0, i] / mu[0, i]).numpy() if mu[0, i] > 0 else np.full(model.cfg.d_f, math.nan)
        F0 = (phi[1, i] / mu[1, i]).numpy() if mu[1, i] > 0 else np.full(model.cfg.d_f, math.nan)
        out.append(EffectEstimate(F1 - F0 if ok else None, F1, F0, float(mu[0, i]), float(mu[1, i])))
    return out
