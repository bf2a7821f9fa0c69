"""Mini-batch training of :class:`CntppModel` and the frozen-encoder treatment probe."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .diffkit import ParamStore, adam_step, collect_grads, grl
from .events import ENGAGEMENT, GENERATION, EventSequence
from .model import CntppModel, EventHeads, ModelConfig

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    """Non-finite loss; ``model`` holds the last good (best-validation) parameters."""

    def __init__(self, msg: str, model: CntppModel, history: list):
        super().__init__(msg)
        self.model = model
        self.history = history


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 128
    lr: float = 1e-3
    gamma_max: float = 1.0
    warmup_frac: float = 0.1
    seed: int = 0
    adversarial: bool = True
    hidden: int = 64
    embed: int = 32
    head_width: int = 32
    n_components: int = 4
    dropout: float = 0.1

    @classmethod
    def full(cls, **overrides) -> "TrainConfig":
        return cls(**{"epochs": 500, "batch_size": 128, "lr": 1e-3, "dropout": 0.1, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)

    def gamma_at(self, progress: float) -> float:
        if self.warmup_frac <= 0:
            return self.gamma_max
        return self.gamma_max * min(1.0, progress / self.warmup_frac)


# -- batching ------------------------------------------------------------------


@dataclass
class Batch:
    x: torch.Tensor        # (B, L, d_in) encoder inputs, treatment flag 0
    feats: torch.Tensor    # (B, L, d_f)
    times: torch.Tensor    # (B, L)
    o_b: torch.Tensor      # outcome samples: row, index, treated?
    o_i: torch.Tensor
    o_tr: torch.Tensor
    e_b: torch.Tensor      # treatment-predictor samples: row, index
    e_i: torch.Tensor


def make_batch(model: CntppModel, seqs: Sequence[EventSequence]) -> Batch:
    B = len(seqs)
    L = max((len(s) for s in seqs), default=0)
    d_f = model.cfg.d_f
    feats = np.zeros((B, L, d_f))
    times = np.zeros((B, L))
    kinds = np.zeros((B, L))
    o_b, o_i, o_tr, e_b, e_i = [], [], [], [], []
    for b, s in enumerate(seqs):
        n = len(s)
        if n:
            feats[b, :n] = s.features()
            times[b, :n] = s.times()
        # pad times forward so padded Δt stay finite
        if n < L:
            times[b, n:] = times[b, n - 1] if n else 0.0
        for i, e in enumerate(s.events):
            kinds[b, i] = e.kind == ENGAGEMENT
            if i == 0:
                continue
            if e.kind == GENERATION:
                o_b.append(b)
                o_i.append(i)
                o_tr.append(s.events[i - 1].kind == ENGAGEMENT)
            else:
                e_b.append(b)
                e_i.append(i)
    feats_t = torch.from_numpy(feats)
    times_t = torch.from_numpy(times)
    prev = torch.cat([torch.zeros(B, 1), times_t[:, :-1]], dim=1) if L else times_t
    x = model.event_inputs(feats_t, times_t, torch.from_numpy(kinds), torch.zeros(B, L), prev)
    lt = lambda v: torch.tensor(v, dtype=torch.long)
    return Batch(x, feats_t, times_t, lt(o_b), lt(o_i), torch.tensor(o_tr, dtype=torch.bool), lt(e_b), lt(e_i))


def batch_losses(model: CntppModel, batch: Batch, gamma: float = 1.0, with_treatment: bool = True):
    """Per-sample outcome NLLs and (optionally) treatment-predictor NLLs through the GRL."""
    S = model.encoder.states(batch.x)
    ob, oi, tr = batch.o_b, batch.o_i, batch.o_tr
    h = S[ob, oi]
    if tr.any():
        xt = batch.x[ob[tr], oi[tr] - 1].clone()
        xt[:, -1] = 1.0
        h_tr = model.encoder.step(S[ob[tr], oi[tr] - 1], xt)
        h = h.index_put((torch.nonzero(tr)[:, 0],), h_tr)
    t_n = batch.times[ob, oi - 1]
    tau = batch.times[ob, oi] - t_n
    z = model.standardise(batch.feats[ob, oi])
    out_nll = model.outcome.nll(h, t_n, tau, z, model.log_scale)
    tr_nll = None
    if with_treatment and model.treatment is not None and batch.e_b.numel():
        eb, ei = batch.e_b, batch.e_i
        he = grl(S[eb, ei], gamma)
        t_n = batch.times[eb, ei - 1]
        tau = batch.times[eb, ei] - t_n
        z = model.standardise(batch.feats[eb, ei])
        tr_nll = model.treatment.nll(he, t_n, tau, z, model.log_scale)
    return out_nll, tr_nll


def _batches(seqs, size, order=None):
    order = range(len(seqs)) if order is None else order
    order = list(order)
    for k in range(0, len(order), size):
        yield [seqs[i] for i in order[k:k + size]]


@torch.no_grad()
def mean_outcome_nll(model: CntppModel, seqs: Sequence[EventSequence], batch_size: int = 256) -> float:
    model.eval()
    total, n = 0.0, 0
    for chunk in _batches(seqs, batch_size):
        out, _ = batch_losses(model, make_batch(model, chunk), with_treatment=False)
        total += float(out.sum())
        n += out.numel()
    return total / max(n, 1)


@torch.no_grad()
def mean_treatment_nll(model: CntppModel, seqs: Sequence[EventSequence], batch_size: int = 256) -> float:
    model.eval()
    total, n = 0.0, 0
    for chunk in _batches(seqs, batch_size):
        _, tr = batch_losses(model, make_batch(model, chunk))
        if tr is not None:
            total += float(tr.sum())
            n += tr.numel()
    return total / max(n, 1)


# -- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    model: CntppModel
    store: ParamStore
    history: list = field(default_factory=list)
    best_epoch: int = -1
    init_val_nll: float = math.nan
    best_val_nll: float = math.nan


def feature_stats(seqs: Sequence[EventSequence]) -> tuple[list, float]:
    feats = np.concatenate([s.features() for s in seqs if len(s)])
    mean = feats.mean(axis=0)
    scale = float(np.sqrt(((feats - mean) ** 2).mean()))
    return mean.tolist(), scale if scale > 0 else 1.0


def build_model(cfg: TrainConfig, train_seqs: Sequence[EventSequence], time_scale: float,
                with_treatment_predictor: bool = True) -> CntppModel:
    d_f = next(s.feature_dim for s in train_seqs if len(s))
    mean, scale = feature_stats(train_seqs)
    mcfg = ModelConfig(d_f=d_f, hidden=cfg.hidden, embed=cfg.embed, head_width=cfg.head_width,
                       n_components=cfg.n_components, dropout=cfg.dropout, time_scale=time_scale,
                       adversarial=cfg.adversarial, with_treatment_predictor=with_treatment_predictor,
                       feature_mean=mean, feature_scale=scale)
    return CntppModel(mcfg, seed=cfg.seed)


def train(
    train_seqs: Sequence[EventSequence],
    val_seqs: Sequence[EventSequence],
    cfg: TrainConfig,
    time_scale: float = 50.0,
    model: Optional[CntppModel] = None,
    progress: bool = False,
) -> TrainResult:
    """Minimise outcome NLL (+ treatment NLL through the GRL when adversarial).

    Returns the best-validation parameters.  The predictor always learns at
    full rate; the encoder sees its gradient scaled by ``-gamma_t``.
    """
    train_seqs = [s for s in train_seqs if len(s) > 1]
    if model is None:
        model = build_model(cfg, train_seqs, time_scale)
    store = ParamStore.from_module(model)
    torch.manual_seed(cfg.seed)
    order_rng = np.random.default_rng(cfg.seed)
    n_batches = math.ceil(len(train_seqs) / cfg.batch_size)
    total_steps = max(1, cfg.epochs * n_batches)
    use_tr = cfg.adversarial and model.treatment is not None

    init_val = mean_outcome_nll(model, val_seqs) if val_seqs else math.nan
    best = (init_val, -1, copy.deepcopy(model.state_dict()))
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        order = order_rng.permutation(len(train_seqs))
        sums = {"outcome": 0.0, "treatment": 0.0, "n_out": 0, "n_tr": 0}
        for chunk in _batches(train_seqs, cfg.batch_size, order):
            gamma = cfg.gamma_at(step / total_steps)
            batch = make_batch(model, chunk)
            out_nll, tr_nll = batch_losses(model, batch, gamma, with_treatment=use_tr)
            loss = out_nll.mean()
            if tr_nll is not None:
                loss = loss + tr_nll.mean()
            if not torch.isfinite(loss):
                model.load_state_dict(best[2])
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", model, history)
            model.zero_grad(set_to_none=True)
            loss.backward()
            adam_step(store, collect_grads(store), lr=cfg.lr)
            step += 1
            sums["outcome"] += float(out_nll.detach().sum())
            sums["n_out"] += out_nll.numel()
            if tr_nll is not None:
                sums["treatment"] += float(tr_nll.detach().sum())
                sums["n_tr"] += tr_nll.numel()
        val = mean_outcome_nll(model, val_seqs) if val_seqs else math.nan
        rec = {
            "epoch": epoch,
            "train_outcome_nll": sums["outcome"] / max(sums["n_out"], 1),
            "train_treatment_nll": sums["treatment"] / sums["n_tr"] if sums["n_tr"] else None,
            "val_outcome_nll": val,
            "gamma": cfg.gamma_at(step / total_steps) if use_tr else 0.0,
        }
        history.append(rec)
        if progress:
            log.info("epoch %d %s", epoch, rec)
        if not math.isfinite(val):
            model.load_state_dict(best[2])
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}", model, history)
        if math.isnan(best[0]) or val < best[0]:
            best = (val, epoch, copy.deepcopy(model.state_dict()))
    model.load_state_dict(best[2])
    model.eval()
    return TrainResult(model, store, history, best[1], init_val, best[0])


# -- balance probe -------------------------------------------------------------


def _treatment_rows(model: CntppModel, seqs: Sequence[EventSequence], batch_size: int = 256):
    hs, tns, taus, zs = [], [], [], []
    model.eval()
    with torch.no_grad():
        for chunk in _batches(seqs, batch_size):
            batch = make_batch(model, chunk)
            if not batch.e_b.numel():
                continue
            S = model.encoder.states(batch.x)
            eb, ei = batch.e_b, batch.e_i
            hs.append(S[eb, ei])
            t_n = batch.times[eb, ei - 1]
            tns.append(t_n)
            taus.append(batch.times[eb, ei] - t_n)
            zs.append(model.standardise(batch.feats[eb, ei]))
    return torch.cat(hs), torch.cat(tns), torch.cat(taus), torch.cat(zs)


def probe_treatment_nll(model: CntppModel, train_seqs: Sequence[EventSequence], test_seqs: Sequence[EventSequence],
                        epochs: int = 40, batch_size: int = 512, lr: float = 1e-3, seed: int = 0) -> float:
    """Fit a fresh treatment predictor on frozen covariate encodings; return held-out mean NLL."""
    h, tn, tau, z = _treatment_rows(model, train_seqs)
    h_te, tn_te, tau_te, z_te = _treatment_rows(model, test_seqs)
    cfg = copy.copy(model.cfg)
    cfg.dropout = 0.0
    probe = EventHeads(cfg, torch.Generator().manual_seed(seed + 1))
    store = ParamStore.from_module(probe)
    rng = np.random.default_rng(seed)
    n = h.shape[0]
    for _ in range(epochs):
        perm = torch.from_numpy(rng.permutation(n))
        for k in range(0, n, batch_size):
            idx = perm[k:k + batch_size]
            loss = probe.nll(h[idx], tn[idx], tau[idx], z[idx], model.log_scale).mean()
            probe.zero_grad(set_to_none=True)
            loss.backward()
            adam_step(store, collect_grads(store), lr=lr)
    with torch.no_grad():
        return float(probe.nll(h_te, tn_te, tau_te, z_te, model.log_scale).mean())
