"""CNTPP: shared event encoder, monotone cumulative intensity, Gaussian-mixture marks.

The same three pieces (cumulative intensity, mark mixture) are used twice:
once for the outcome process (original posts) conditioned on ``H(Tr ∪ X)``
or ``H(X)``, and once as the treatment predictor over engagements, which
reads the covariate encoding through a gradient reversal layer.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffkit import MLP, grl
from .events import ENGAGEMENT, EventSequence, MarkedEvent

LOG_2PI = math.log(2 * math.pi)


@dataclass
class ModelConfig:
    d_f: int
    hidden: int = 64
    embed: int = 32
    head_width: int = 32
    n_components: int = 4
    dropout: float = 0.1
    time_scale: float = 50.0
    adversarial: bool = True
    with_treatment_predictor: bool = True
    feature_mean: list = field(default_factory=list)
    feature_scale: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def event_inputs(feats: torch.Tensor, times: torch.Tensor, kinds: torch.Tensor, treat: torch.Tensor,
                 prev_times: torch.Tensor, mean: torch.Tensor, scale: float) -> torch.Tensor:
    """Per-event encoder input: standardised feature, log(1+Δt), engagement flag, treatment flag."""
    dt = torch.log1p(torch.clamp(times - prev_times, min=0.0))
    return torch.cat([(feats - mean) / scale, dt[..., None], kinds[..., None], treat[..., None]], dim=-1)


class Encoder(nn.Module):
    """GRU summariser over per-event embeddings with a learned initial state."""

    def __init__(self, cfg: ModelConfig, generator: torch.Generator):
        super().__init__()
        self.dropout = cfg.dropout
        self.embed = MLP([cfg.d_f + 3, cfg.embed], out="tanh", generator=generator)
        self.gru = nn.GRU(cfg.embed, cfg.hidden, batch_first=True)
        bound = 1.0 / math.sqrt(cfg.hidden)
        with torch.no_grad():
            for p in self.gru.parameters():
                p.copy_(torch.empty_like(p).uniform_(-bound, bound, generator=generator))
        self.h0 = nn.Parameter(torch.zeros(cfg.hidden))

    def _embed(self, x: torch.Tensor) -> torch.Tensor:
        if self.dropout and self.training:
            x = F.dropout(x, self.dropout, training=True)
        return self.embed(x)

    def states(self, x: torch.Tensor) -> torch.Tensor:
        """Encoder state after each prefix: ``out[:, i]`` summarises the first ``i`` events."""
        B = x.shape[0]
        h0 = self.h0.expand(B, -1)
        if x.shape[1] == 0:
            return h0[:, None, :]
        out, _ = self.gru(self._embed(x), h0[None].contiguous())
        return torch.cat([h0[:, None, :], out], dim=1)

    def step(self, h: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        """Advance states ``h`` (N, H) by one event each (N, d_in)."""
        out, _ = self.gru(self._embed(x)[:, None, :], h[None].contiguous())
        return out[:, 0]


class CumulativeIntensity(nn.Module):
    """Λ(h, τ) = g(h, t_n, τ) − g(h, t_n, 0) + softplus(c)·τ with g nondecreasing in τ.

    ``t_n`` is the time of the last conditioning event, fed (scaled) as context.
    The intensity is the analytic τ-derivative obtained by tangent propagation.
    """

    def __init__(self, h_dim: int, width: int, time_scale: float, dropout: float, generator: torch.Generator):
        super().__init__()
        self.time_scale = time_scale
        self.net = MLP([h_dim + 2, width, width, 1], out="softplus", positive_inputs=[h_dim + 1],
                       dropout=dropout, generator=generator)
        self.floor = nn.Parameter(torch.tensor(-3.0))

    def forward(self, h: torch.Tensor, t_n: torch.Tensor, tau: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns ``(Λ, λ)`` at elapsed times ``tau`` (same leading shape as ``t_n``)."""
        ctx = torch.cat([h, (t_n / self.time_scale)[..., None]], dim=-1)
        z = torch.zeros_like(tau)[..., None]
        x = torch.stack([torch.cat([ctx, tau[..., None]], -1), torch.cat([ctx, z], -1)])
        dx = torch.zeros_like(x)
        dx[..., -1] = 1.0
        g, dg = self.net.forward_with_tangent(x, dx)
        base = F.softplus(self.floor)
        # the two stacked rows may round differently in BLAS; keep Λ(0) = 0 and Λ ≥ 0 exact
        diff = (g[0, ..., 0] - g[1, ..., 0]).clamp(min=0.0)
        cum = torch.where(tau > 0, diff, torch.zeros_like(diff)) + base * tau
        return cum, dg[0, ..., 0] + base


class MixtureHead(nn.Module):
    """p(f | t, h) = Σ_j w_j N(f; μ_j, σ_j² I) with softmax weights and exp scales."""

    def __init__(self, h_dim: int, d_f: int, m: int, width: int, time_scale: float, dropout: float,
                 generator: torch.Generator):
        super().__init__()
        self.d_f, self.m, self.time_scale = d_f, m, time_scale
        n_in = h_dim + 2
        self.weight_net = MLP([n_in, width, m], dropout=dropout, generator=generator)
        self.log_sigma_net = MLP([n_in, width, m], dropout=dropout, generator=generator)
        self.mean_nets = nn.ModuleList(MLP([n_in, width, d_f], dropout=dropout, generator=generator)
                                       for _ in range(m))
        with torch.no_grad():
            self.log_sigma_net.biases[-1].fill_(math.log(0.5))

    def _inputs(self, h, tau, t):
        return torch.cat([h, torch.log1p(tau)[..., None], (t / self.time_scale)[..., None]], dim=-1)

    def components(self, h: torch.Tensor, tau: torch.Tensor, t: torch.Tensor):
        """``(log w, log σ, μ)`` with shapes (..., m), (..., m), (..., m, d_f) in standardised units."""
        x = self._inputs(h, tau, t)
        log_w = torch.log_softmax(self.weight_net(x), dim=-1)
        log_sigma = self.log_sigma_net(x)
        mu = torch.stack([net(x) for net in self.mean_nets], dim=-2)
        return log_w, log_sigma, mu

    def log_density(self, h, tau, t, z) -> torch.Tensor:
        log_w, log_sigma, mu = self.components(h, tau, t)
        return mixture_log_density(log_w, log_sigma, mu, z)

    def expectation(self, h, tau, t) -> torch.Tensor:
        log_w, _, mu = self.components(h, tau, t)
        return (log_w.exp()[..., None] * mu).sum(dim=-2)


def mixture_log_density(log_w: torch.Tensor, log_sigma: torch.Tensor, mu: torch.Tensor, f: torch.Tensor) -> torch.Tensor:
    """log Σ_j w_j N(f; μ_j, σ_j² I) including the σ_j^{-d} normalisation."""
    d = mu.shape[-1]
    sq = ((f[..., None, :] - mu) ** 2).sum(-1)
    comp = log_w - d * log_sigma - 0.5 * d * LOG_2PI - 0.5 * sq * torch.exp(-2 * log_sigma)
    return torch.logsumexp(comp, dim=-1)


class EventHeads(nn.Module):
    """Cumulative intensity plus mark mixture for one event type."""

    def __init__(self, cfg: ModelConfig, generator: torch.Generator):
        super().__init__()
        self.intensity = CumulativeIntensity(cfg.hidden, cfg.head_width, cfg.time_scale, cfg.dropout, generator)
        self.marks = MixtureHead(cfg.hidden, cfg.d_f, cfg.n_components, cfg.head_width, cfg.time_scale,
                                 cfg.dropout, generator)

    def nll_parts(self, h, t_n, tau, z, log_scale: float):
        """``(log λ, Λ, log p(f))`` for standardised marks ``z``; ``log_scale`` converts the density back."""
        cum, lam = self.intensity(h, t_n, tau)
        log_p = self.marks.log_density(h, tau, t_n + tau, z) - z.shape[-1] * log_scale
        return torch.log(lam), cum, log_p

    def nll(self, h, t_n, tau, z, log_scale: float) -> torch.Tensor:
        log_lam, cum, log_p = self.nll_parts(h, t_n, tau, z, log_scale)
        return -(log_lam - cum + log_p)


class CntppModel(nn.Module):
    """Encoder + outcome heads (+ treatment predictor behind a GRL).

    With ``adversarial=False`` training never touches the predictor, which makes
    the model the plain neural TPP ablation.
    """

    PREDICTOR_SEED_OFFSET = 0x7F4A7C15

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        self.encoder = Encoder(cfg, gen)
        self.outcome = EventHeads(cfg, gen)
        if cfg.with_treatment_predictor:
            gen_tr = torch.Generator().manual_seed(seed + self.PREDICTOR_SEED_OFFSET)
            self.treatment = EventHeads(cfg, gen_tr)
        else:
            self.treatment = None
        mean = cfg.feature_mean or [0.0] * cfg.d_f
        self.register_buffer("feature_mean", torch.tensor(mean, dtype=torch.float64))
        self.feature_scale = float(cfg.feature_scale)

    # -- helpers ---------------------------------------------------------------

    def standardise(self, f: torch.Tensor) -> torch.Tensor:
        return (f - self.feature_mean) / self.feature_scale

    def unstandardise(self, z: torch.Tensor) -> torch.Tensor:
        return z * self.feature_scale + self.feature_mean

    @property
    def log_scale(self) -> float:
        return math.log(self.feature_scale)

    def event_inputs(self, feats, times, kinds, treat, prev_times):
        return event_inputs(feats, times, kinds, treat, prev_times, self.feature_mean, self.feature_scale)

    # -- single-sequence API ----------------------------------------------------

    def encode(self, prefix: EventSequence | tuple, treatment: Optional[MarkedEvent] = None) -> torch.Tensor:
        """h = H(X) or H(Tr ∪ X); an empty input returns the learned initial state."""
        events = list(prefix.events if isinstance(prefix, EventSequence) else prefix)
        if treatment is not None:
            if events and not treatment.t > events[-1].t:
                raise ValueError("treatment must follow every covariate event")
        seq = events + ([treatment] if treatment is not None else [])
        if not seq:
            return self.encoder.h0.clone()
        x = sequence_inputs(self, seq, treated_last=treatment is not None)
        return self.encoder.states(x[None])[0, -1]

    def cumulative_intensity(self, h: torch.Tensor, tau, t_n=0.0) -> torch.Tensor:
        tau = torch.as_tensor(tau, dtype=torch.float64)
        t_n = torch.as_tensor(t_n, dtype=torch.float64).expand_as(tau)
        return self.outcome.intensity(h.expand(tau.shape + h.shape[-1:]), t_n, tau)[0]

    def intensity(self, h: torch.Tensor, tau, t_n=0.0) -> torch.Tensor:
        tau = torch.as_tensor(tau, dtype=torch.float64)
        t_n = torch.as_tensor(t_n, dtype=torch.float64).expand_as(tau)
        return self.outcome.intensity(h.expand(tau.shape + h.shape[-1:]), t_n, tau)[1]

    def feature_log_density(self, h: torch.Tensor, t, f, t_n=0.0) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.float64)
        f = torch.as_tensor(f, dtype=torch.float64)
        tau = t - torch.as_tensor(t_n, dtype=torch.float64)
        hh = h.expand(t.shape + h.shape[-1:])
        return self.outcome.marks.log_density(hh, tau, t, self.standardise(f)) - f.shape[-1] * self.log_scale

    def feature_expectation(self, h: torch.Tensor, t, t_n=0.0) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.float64)
        tau = t - torch.as_tensor(t_n, dtype=torch.float64)
        hh = h.expand(t.shape + h.shape[-1:])
        return self.unstandardise(self.outcome.marks.expectation(hh, tau, t))


def sequence_inputs(model: CntppModel, events, treated_last: bool = False) -> torch.Tensor:
    feats = torch.tensor([e.feature for e in events], dtype=torch.float64).reshape(len(events), model.cfg.d_f)
    times = torch.tensor([e.t for e in events], dtype=torch.float64)
    kinds = torch.tensor([1.0 if e.kind == ENGAGEMENT else 0.0 for e in events])
    treat = torch.zeros(len(events))
    if treated_last and len(events):
        treat[-1] = 1.0
    prev = torch.cat([torch.zeros(1), times[:-1]])
    return model.event_inputs(feats, times, kinds, treat, prev)


def event_nll(model: CntppModel, sample) -> torch.Tensor:
    """Negative log-likelihood of a training sample's outcome event."""
    h = model.encode(sample.covariates, sample.treatment)
    t_n = torch.tensor(sample.conditioning_time)
    tau = torch.tensor(sample.outcome.t) - t_n
    z = model.standardise(torch.tensor(sample.outcome.feature))
    return model.outcome.nll(h, t_n, tau, z, model.log_scale)


def treatment_nll(model: CntppModel, target: MarkedEvent, covariates: EventSequence, gamma: float = 1.0) -> torch.Tensor:
    """Predictor NLL of an engagement given the reversed-gradient covariate encoding."""
    if model.treatment is None:
        raise ValueError("model was built without a treatment predictor")
    h = grl(model.encode(covariates), gamma)
    t_n = torch.tensor(covariates.events[-1].t if covariates.events else 0.0)
    tau = torch.tensor(target.t) - t_n
    z = model.standardise(torch.tensor(target.feature))
    return model.treatment.nll(h, t_n, tau, z, model.log_scale)
