"""Synthetic social-media world with a Monte-Carlo ground-truth oracle.

Users carry a hidden status vector ``u``; news items carry a topic vector and
an inherent-influence vector.  Each user runs two coupled Hawkes-style
processes (engaging with news, posting original content) whose intensities
depend on ``u`` and on exponentially decaying history excitation.  Engaging
with news ``n`` moves the status by ``NN_scale(v_topic, u) * v_in``.

Simulation is vectorised over *lanes*: a lane is one user timeline (for
:func:`simulate`) or one counterfactual rollout (for the oracle).  Each lane
owns a counter-based random stream keyed by integers such as
``(seed, user_id)`` so results never depend on how lanes are batched.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import yaml

from .events import ENGAGEMENT, GENERATION, EventSequence, FormatVersionError, MarkedEvent

log = logging.getLogger(__name__)

GROUND_TRUTH_FORMAT = "cntpp-groundtruth/1"


class SimulationDiverged(RuntimeError):
    """A lane produced more events than ``max_events`` (runaway excitation)."""


# -- counter-based random streams ---------------------------------------------

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def stream_keys(*parts) -> np.ndarray:
    """Mix integer key components (scalars or equal-length arrays) into 64-bit stream keys."""
    arrays = [np.atleast_1d(np.asarray(p, dtype=np.int64)).astype(np.uint64) for p in parts]
    n = max(a.size for a in arrays)
    z = np.full(n, np.uint64(0x243F6A8885A308D3))
    with np.errstate(over="ignore"):
        for a in arrays:
            z = _mix(z ^ _mix(np.broadcast_to(a, (n,)) + _GAMMA))
    return z


class LaneRNG:
    """One SplitMix64 sequence per lane, advanced only when that lane draws."""

    def __init__(self, keys: np.ndarray):
        self.keys = np.asarray(keys, dtype=np.uint64).copy()
        self.counters = np.zeros(self.keys.size, dtype=np.uint64)

    def _raw(self, idx: np.ndarray, k: int) -> np.ndarray:
        c = self.counters[idx][:, None] + np.arange(1, k + 1, dtype=np.uint64)[None, :]
        with np.errstate(over="ignore"):
            z = _mix(self.keys[idx][:, None] + c * _GAMMA)
        self.counters[idx] += np.uint64(k)
        return z

    def uniform(self, idx: np.ndarray, k: int = 1) -> np.ndarray:
        """Uniforms in the open interval (0, 1), shape ``(len(idx), k)``."""
        z = self._raw(idx, k)
        return ((z >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)

    def normal(self, idx: np.ndarray, k: int = 1) -> np.ndarray:
        u = self.uniform(idx, 2 * k)
        return np.sqrt(-2.0 * np.log(u[:, :k])) * np.cos(2.0 * np.pi * u[:, k:])


# -- random networks ---------------------------------------------------------


class RandomNet:
    """Fixed random MLP: tanh hidden layers, weights ~ N(0, 1/fan_in), optional hidden noise."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, out: str = "identity",
                 out_gain: float = 1.0, bias_scale: float = 0.5):
        self.sizes = tuple(sizes)
        self.weights = [rng.standard_normal((o, i)) / math.sqrt(i) for i, o in zip(sizes, sizes[1:])]
        self.biases = [bias_scale * rng.standard_normal(o) for o in sizes[1:]]
        self.out = out
        self.out_gain = out_gain

    @property
    def hidden_widths(self) -> list[int]:
        return list(self.sizes[1:-1])

    def __call__(self, x: np.ndarray, noise: Optional[Sequence[np.ndarray]] = None) -> np.ndarray:
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w.T + b
            if i < n - 1:
                x = np.tanh(x)
                if noise is not None:
                    x = x + noise[i]
        if self.out == "softplus":
            x = np.logaddexp(0.0, x)
        return self.out_gain * x

    def digest_into(self, h) -> None:
        for a in (*self.weights, *self.biases):
            h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        h.update(f"{self.out}:{self.out_gain!r}".encode())


class ConstantNet:
    """Network stand-in returning a fixed output; used to pin worlds in tests."""

    def __init__(self, value: float | Sequence[float], hidden_widths: Sequence[int] = ()):
        self.value = np.atleast_1d(np.asarray(value, dtype=float))
        self._hidden = list(hidden_widths)

    @property
    def hidden_widths(self) -> list[int]:
        return self._hidden

    def __call__(self, x: np.ndarray, noise=None) -> np.ndarray:
        return np.broadcast_to(self.value, x.shape[:-1] + self.value.shape).copy()

    def digest_into(self, h) -> None:
        h.update(self.value.tobytes())


# -- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class WorldSpec:
    n_users: int = 1500
    n_news: int = 40
    d_hidden: int = 8
    d_f: int = 4
    horizon: float = 50.0
    seed: int = 0
    net_width: int = 32
    net_depth: int = 2
    user_noise: float = 0.1
    neutralize_news: tuple[int, ...] = ()
    # distribution scales for the "randomly generated" vectors
    user_scale: float = 0.15
    topic_scale: float = 0.25
    influence_scale: float = 0.15
    news_post_window: float = 0.6  # news post times ~ U(0, news_post_window * horizon)
    # output gains of the random networks
    rec_gain: float = 0.04
    post_gain: float = 0.3
    scale_gain: float = 0.3
    max_events: int = 500

    def __post_init__(self):
        object.__setattr__(self, "neutralize_news", tuple(int(n) for n in self.neutralize_news))
        if self.n_users < 1 or self.n_news < 0 or self.d_hidden < 1 or self.d_f < 1:
            raise ValueError("n_users, d_hidden, d_f must be positive and n_news nonnegative")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        bad = [n for n in self.neutralize_news if not 0 <= n < self.n_news]
        if bad:
            raise ValueError(f"neutralize_news ids out of range: {bad}")

    @classmethod
    def full(cls, **overrides) -> "WorldSpec":
        return cls(**{"n_users": 15000, "n_news": 120, **overrides})

    @classmethod
    def desk(cls, **overrides) -> "WorldSpec":
        return cls(**overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["neutralize_news"] = list(self.neutralize_news)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown world spec fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: Path | str) -> "WorldSpec":
        doc = yaml.safe_load(Path(path).read_text()) or {}
        return cls.from_dict(doc.get("world", doc))


@dataclass(frozen=True)
class NewsItem:
    id: int
    v_topic: np.ndarray
    v_in: np.ndarray
    post_time: float
    observed_feature: np.ndarray


@dataclass
class UserTrajectory:
    user_id: int
    u0: np.ndarray
    checkpoints: list[tuple[float, np.ndarray]]
    events: EventSequence

    def status_before(self, event_index: int) -> np.ndarray:
        """Hidden status in force just before ``events[event_index]``."""
        t = self.events[event_index].t
        u = self.u0
        for tc, uc in self.checkpoints:
            if tc < t:
                u = uc
            else:
                break
        return u

    def engagement_indices(self) -> list[int]:
        return [i for i, e in enumerate(self.events) if e.kind == ENGAGEMENT]


@dataclass
class EngagementTruth:
    user_id: int
    engagement_index: int
    news_id: int
    t: float
    delta_u: np.ndarray
    oracle_ite: Optional[np.ndarray] = None
    oracle_se: Optional[np.ndarray] = None


@dataclass
class GroundTruth:
    digest: str
    records: list[EngagementTruth] = field(default_factory=list)
    news_avg_delta: dict[int, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def lookup(self) -> dict[tuple[int, int], EngagementTruth]:
        return {(r.user_id, r.engagement_index): r for r in self.records}

    def recompute_news_averages(self) -> None:
        sums: dict[int, list[np.ndarray]] = {}
        for r in self.records:
            sums.setdefault(r.news_id, []).append(r.delta_u)
        self.news_avg_delta = {n: np.mean(v, axis=0) for n, v in sorted(sums.items())}

    def save(self, path: Path | str) -> None:
        header = {
            "format": GROUND_TRUTH_FORMAT,
            "digest": self.digest,
            "news_avg_delta": {str(k): v.tolist() for k, v in sorted(self.news_avg_delta.items())},
            **self.meta,
        }
        lines = [json.dumps({"header": header}, separators=(",", ":"))]
        for r in self.records:
            lines.append(json.dumps({
                "user_id": r.user_id,
                "engagement_index": r.engagement_index,
                "news_id": r.news_id,
                "t": r.t,
                "delta_u": r.delta_u.tolist(),
                "oracle_ite": None if r.oracle_ite is None else r.oracle_ite.tolist(),
                "oracle_se": None if r.oracle_se is None else r.oracle_se.tolist(),
            }, separators=(",", ":"), allow_nan=False))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: Path | str) -> "GroundTruth":
        truth = None
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                if "header" in rec:
                    h = dict(rec["header"])
                    if h.pop("format", None) != GROUND_TRUTH_FORMAT:
                        raise FormatVersionError(f"{path}: not a {GROUND_TRUTH_FORMAT} file")
                    avg = {int(k): np.array(v) for k, v in h.pop("news_avg_delta").items()}
                    truth = cls(h.pop("digest"), [], avg, h)
                    continue
                if truth is None:
                    raise ValueError(f"{path}: missing header record")
                ite, se = rec["oracle_ite"], rec.get("oracle_se")
                truth.records.append(EngagementTruth(
                    rec["user_id"], rec["engagement_index"], rec["news_id"], rec["t"],
                    np.array(rec["delta_u"]), None if ite is None else np.array(ite),
                    None if se is None else np.array(se)))
        if truth is None:
            raise ValueError(f"{path}: empty ground-truth file")
        return truth


# -- the world ---------------------------------------------------------------


class World:
    """All random quantities of a synthetic world, built deterministically from a spec."""

    def __init__(self, spec: WorldSpec):
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 0x5EED])
        d, df = spec.d_hidden, spec.d_f
        hidden = [spec.net_width] * spec.net_depth

        def net(n_in, n_out, **kw):
            return RandomNet([n_in, *hidden, n_out], rng, **kw)

        self.nn_news = net(2 * d, df)
        self.nn_user = net(d + 1, df)
        self.nn_rec = net(df + d, 1, out_gain=spec.rec_gain)
        self.nn_post = net(df + d, 1, out_gain=spec.post_gain)
        self.nn_scale = net(2 * d, 1, out="softplus", out_gain=spec.scale_gain)

        n = spec.n_news
        self.v_topic = spec.topic_scale * rng.standard_normal((n, d))
        self.v_in = spec.influence_scale * rng.standard_normal((n, d))
        self.post_time = np.sort(rng.uniform(0.0, spec.news_post_window * spec.horizon, n))
        self.excite = np.ones(n)
        for k in spec.neutralize_news:
            self.v_in[k] = 0.0
            self.excite[k] = 0.0
        self.refresh()

    def refresh(self) -> None:
        """Recompute derived tables after networks or news vectors were replaced."""
        n = self.spec.n_news
        if n:
            self.news_feature = self.nn_news(np.hstack([self.v_topic / self.spec.topic_scale,
                                                        self._vin_input(self.v_in)]))
            self.news_rec = self.rec_matrix(self.news_feature)
        else:
            self.news_feature = np.zeros((0, self.spec.d_f))
            self.news_rec = np.zeros((0, 0))

    def _vin_input(self, v_in):
        return v_in / self.spec.influence_scale if self.spec.influence_scale else v_in

    @property
    def news(self) -> list[NewsItem]:
        return [NewsItem(i, self.v_topic[i], self.v_in[i], float(self.post_time[i]), self.news_feature[i])
                for i in range(self.spec.n_news)]

    # scalar building blocks -------------------------------------------------

    def rec_matrix(self, feats: np.ndarray) -> np.ndarray:
        """``NN_rec(f_j, v_topic(n))`` for every feature row j and news n: shape (J, n_news)."""
        feats = np.atleast_2d(feats)
        J, n = feats.shape[0], self.spec.n_news
        if n == 0:
            return np.zeros((J, 0))
        topics = self.v_topic / self.spec.topic_scale
        x = np.concatenate([np.repeat(feats, n, axis=0), np.tile(topics, (J, 1))], axis=1)
        return self.nn_rec(x)[:, 0].reshape(J, n)

    def post_excitation(self, feats: np.ndarray, u: np.ndarray) -> np.ndarray:
        """``NN_post(f_j, u)`` for aligned rows of features and statuses."""
        return self.nn_post(np.concatenate([feats, u / self.spec.user_scale], axis=-1))[..., 0]

    def scale(self, news_ids: np.ndarray, u: np.ndarray) -> np.ndarray:
        x = np.concatenate([self.v_topic[news_ids] / self.spec.topic_scale, u / self.spec.user_scale], axis=-1)
        return self.nn_scale(x)[..., 0]

    def user_feature(self, u: np.ndarray, t: np.ndarray, noise=None) -> np.ndarray:
        x = np.concatenate([u / self.spec.user_scale, np.asarray(t, dtype=float)[..., None] / self.spec.horizon], axis=-1)
        return self.nn_user(x, noise)

    def engagement_intensity(self, news: NewsItem | int, t: float, u: np.ndarray, history: EventSequence) -> float:
        k = news.id if isinstance(news, NewsItem) else int(news)
        raw = float(self.v_topic[k] @ u)
        for e in history:
            if e.t >= t:
                raise ValueError("history events must precede t")
            w = self._history_weight(e)
            if w:
                raw += math.exp(e.t - t) * w * self.rec_matrix(np.array(e.feature))[0, k]
        return max(0.0, raw)

    def generation_intensity(self, t: float, u: np.ndarray, history: EventSequence) -> float:
        raw = float(u @ u)
        for e in history:
            if e.t >= t:
                raise ValueError("history events must precede t")
            w = self._history_weight(e)
            if w:
                raw += math.exp(e.t - t) * w * float(self.post_excitation(np.array(e.feature), u))
        return max(0.0, raw)

    def _history_weight(self, e: MarkedEvent) -> float:
        return float(self.excite[e.news_id]) if e.kind == ENGAGEMENT else 1.0

    def observe_post(self, u: np.ndarray, t: float, rng: np.random.Generator) -> np.ndarray:
        sd = self.spec.user_noise
        noise = [sd * rng.standard_normal(w) for w in self.nn_user.hidden_widths] if sd else None
        return self.user_feature(np.asarray(u, float), np.asarray(t, float), noise)

    def apply_engagement(self, u: np.ndarray, news: NewsItem | int) -> tuple[np.ndarray, np.ndarray]:
        k = news.id if isinstance(news, NewsItem) else int(news)
        delta = float(self.scale(np.array(k), u)) * self.v_in[k]
        return u + delta, delta

    # diagnostics ------------------------------------------------------------

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        h.update(b"init=normal;stream=splitmix64")
        for net in (self.nn_news, self.nn_user, self.nn_rec, self.nn_post, self.nn_scale):
            net.digest_into(h)
        for a in (self.v_topic, self.v_in, self.post_time):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def branching_ratio_estimate(self, n_samples: int = 256) -> float:
        """Mean positive excitation mass one event adds across all intensities."""
        if self.spec.n_news == 0:
            feats = self.user_feature(np.zeros((1, self.spec.d_hidden)), np.zeros(1))
        else:
            feats = self.news_feature
        rng = np.random.default_rng([self.spec.seed, 0xB4A])
        u = self.spec.user_scale * rng.standard_normal((n_samples, self.spec.d_hidden))
        posts = self.user_feature(u, rng.uniform(0, self.spec.horizon, n_samples))
        all_f = np.vstack([feats, posts])
        rec = np.clip(self.rec_matrix(all_f), 0, None).sum(axis=1).mean() if self.spec.n_news else 0.0
        uu = u[rng.integers(0, n_samples, all_f.shape[0])]
        post = np.clip(self.post_excitation(all_f, uu), 0, None).mean()
        return float(rec + post)

    def validate(self) -> None:
        ratio = self.branching_ratio_estimate()
        if ratio > 0.9:
            warnings.warn(f"expected branching ratio {ratio:.2f} exceeds 0.9; simulation may run away",
                          RuntimeWarning, stacklevel=2)


# -- vectorised competing-risks engine ----------------------------------------


@dataclass
class _Lanes:
    u: np.ndarray          # (N, d)
    t: np.ndarray          # (N,) time of last event / start
    t_stop: np.ndarray     # (N,)
    hist_f: np.ndarray     # (N, L, d_f)
    hist_t: np.ndarray     # (N, L)
    hist_w: np.ndarray     # (N, L) excitation weight; 0 on padding
    hist_len: np.ndarray   # (N,)
    rec_exc: np.ndarray    # (N, n_news) engagement excitation at time t
    post_exc: np.ndarray   # (N,) generation excitation at time t
    rng: LaneRNG
    n_new: np.ndarray      # events generated by the engine per lane
    engaged: np.ndarray    # (N, n_news) bool; a user engages with a news item at most once


def _init_lanes(world: World, u: np.ndarray, t0: np.ndarray, t_stop: np.ndarray, keys: np.ndarray,
                prefixes: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]], capacity: int,
                engaged: Optional[Sequence[Iterable[int]]] = None) -> _Lanes:
    """Lanes starting at ``t0`` with given history prefixes ``(times, feats, weights)``."""
    N = u.shape[0]
    d_f = world.spec.d_f
    Lp = max((len(p[0]) for p in prefixes), default=0)
    L = Lp + capacity
    hist_f = np.zeros((N, L, d_f))
    hist_t = np.zeros((N, L))
    hist_w = np.zeros((N, L))
    hist_len = np.zeros(N, dtype=np.int64)
    for i, (ts, fs, ws) in enumerate(prefixes):
        k = len(ts)
        if k:
            hist_t[i, :k], hist_f[i, :k], hist_w[i, :k] = ts, fs, ws
        hist_len[i] = k
    lanes = _Lanes(u.copy(), t0.astype(float).copy(), t_stop.astype(float).copy(), hist_f, hist_t, hist_w, hist_len,
                   np.zeros((N, world.spec.n_news)), np.zeros(N), LaneRNG(keys), np.zeros(N, dtype=np.int64),
                   np.zeros((N, world.spec.n_news), dtype=bool))
    for i, seen in enumerate(engaged or ()):
        lanes.engaged[i, list(seen)] = True
    if Lp:
        # excitation state at t0 from the prefixes
        decay = np.exp(np.minimum(hist_t[:, :Lp] - t0[:, None], 0.0)) * hist_w[:, :Lp]
        if world.spec.n_news:
            rec = world.rec_matrix(hist_f[:, :Lp].reshape(-1, d_f)).reshape(N, Lp, -1)
            lanes.rec_exc = np.einsum("nl,nlk->nk", decay, rec)
        _refresh_post_exc(world, lanes, np.arange(N))
    return lanes


def _replicate(lanes: _Lanes, repeats: int, keys: np.ndarray) -> _Lanes:
    """Copy each lane ``repeats`` times (consecutively), giving every copy its own stream."""
    rep = lambda a: np.repeat(a, repeats, axis=0)
    return _Lanes(rep(lanes.u), rep(lanes.t), rep(lanes.t_stop), rep(lanes.hist_f), rep(lanes.hist_t),
                  rep(lanes.hist_w), rep(lanes.hist_len), rep(lanes.rec_exc), rep(lanes.post_exc),
                  LaneRNG(keys), rep(lanes.n_new), rep(lanes.engaged))


def _refresh_post_exc(world: World, lanes: _Lanes, idx: np.ndarray) -> None:
    if idx.size == 0:
        return
    Lmax = int(lanes.hist_len[idx].max())
    if Lmax == 0:
        lanes.post_exc[idx] = 0.0
        return
    f = lanes.hist_f[idx, :Lmax]
    u = np.broadcast_to(lanes.u[idx][:, None, :], (idx.size, Lmax, lanes.u.shape[1]))
    vals = world.post_excitation(f, u)
    decay = np.exp(np.minimum(lanes.hist_t[idx, :Lmax] - lanes.t[idx][:, None], 0.0)) * lanes.hist_w[idx, :Lmax]
    lanes.post_exc[idx] = (decay * vals).sum(axis=1)


def _components(world: World, lanes: _Lanes, idx: np.ndarray, s: np.ndarray):
    """Raw intensities and suprema-from-``s`` for generation (col 0) and each news item."""
    u = lanes.u[idx]
    decay = np.exp(-(s - lanes.t[idx]))
    a = np.empty((idx.size, 1 + world.spec.n_news))
    b = np.empty_like(a)
    a[:, 0] = np.einsum("nd,nd->n", u, u)
    b[:, 0] = lanes.post_exc[idx] * decay
    if world.spec.n_news:
        a[:, 1:] = u @ world.v_topic.T
        b[:, 1:] = lanes.rec_exc[idx] * decay[:, None]
    raw = a + b
    sup = np.maximum(np.maximum(raw, a), 0.0)
    rate = np.maximum(raw, 0.0)
    if world.spec.n_news:
        open_ = ~lanes.engaged[idx]
        sup[:, 1:] *= open_
        rate[:, 1:] *= open_
    return rate, sup


def _run(world: World, lanes: _Lanes, on_event=None, max_events: Optional[int] = None) -> None:
    """Advance every lane until ``t_stop``; ``on_event(lane_idx, times, kinds, news, feats)`` observes events.

    ``kinds`` is 0 for generation, 1 for engagement; ``news`` is -1 for generation.
    """
    spec = world.spec
    n_news = spec.n_news
    max_events = spec.max_events if max_events is None else max_events
    d_h = spec.d_hidden
    active = np.flatnonzero(lanes.t < lanes.t_stop)
    while active.size:
        # --- adaptive thinning for the first event of the superposed process
        s = lanes.t[active].copy()
        pending = np.arange(active.size)
        chosen = np.full(active.size, -1, dtype=np.int64)
        t_new = np.full(active.size, np.inf)
        while pending.size:
            idx = active[pending]
            _, sup = _components(world, lanes, idx, s[pending])
            if n_news:
                # news posted after the lane's stop time can never be engaged
                live = world.post_time[None, :] < lanes.t_stop[idx][:, None]
                sup[:, 1:] *= live
            bound = sup.sum(axis=1)
            draws = lanes.rng.uniform(idx, 2)
            dead = bound <= 0
            prop = s[pending] - np.log(draws[:, 0]) / np.where(dead, 1.0, bound)
            prop = np.where(prop <= lanes.t[idx], np.nextafter(lanes.t[idx], np.inf), prop)
            over = dead | (prop >= lanes.t_stop[idx])
            keep = ~over
            if keep.any():
                kidx = idx[keep]
                rate, _ = _components(world, lanes, kidx, prop[keep])
                if n_news:
                    rate[:, 1:] *= world.post_time[None, :] < prop[keep][:, None]
                total = rate.sum(axis=1)
                if np.any(total > bound[keep] * (1 + 1e-9) + 1e-300):
                    raise AssertionError("thinning bound violated")
                level = draws[keep, 1] * bound[keep]
                accept = level < total
                pos = pending[keep]
                acc_pos = pos[accept]
                if acc_pos.size:
                    cum = np.cumsum(rate[accept], axis=1)
                    cat = (cum <= level[accept][:, None]).sum(axis=1)
                    chosen[acc_pos] = np.minimum(cat, rate.shape[1] - 1)
                    t_new[acc_pos] = prop[keep][accept]
                s[pos] = prop[keep]
                pending = pos[~accept]
            else:
                pending = pending[:0]
            # lanes whose proposal ran past t_stop are finished
        done = chosen < 0
        lanes.t[active[done]] = lanes.t_stop[active[done]]
        hit = ~done
        if not hit.any():
            break
        idx = active[hit]
        tn = t_new[hit]
        cat = chosen[hit]
        dt = tn - lanes.t[idx]
        gen = cat == 0
        feats = np.empty((idx.size, spec.d_f))
        news_ids = cat - 1
        weights = np.ones(idx.size)
        # generation features with hidden-layer noise
        if gen.any():
            g = idx[gen]
            noise = None
            if spec.user_noise:
                widths = world.nn_user.hidden_widths
                z = lanes.rng.normal(g, sum(widths)) * spec.user_noise
                noise, off = [], 0
                for w in widths:
                    noise.append(z[:, off:off + w])
                    off += w
            feats[gen] = world.user_feature(lanes.u[g], tn[gen], noise)
        eng = ~gen
        if eng.any():
            feats[eng] = world.news_feature[news_ids[eng]]
            weights[eng] = world.excite[news_ids[eng]]
        # decay excitation to the new time, then add the new event
        decay = np.exp(-dt)
        lanes.post_exc[idx] *= decay
        if n_news:
            lanes.rec_exc[idx] *= decay[:, None]
            lanes.rec_exc[idx] += weights[:, None] * world.rec_matrix(feats)
        k = lanes.hist_len[idx]
        if np.any(k >= lanes.hist_t.shape[1]) or np.any(lanes.n_new[idx] >= max_events):
            bad = idx[(k >= lanes.hist_t.shape[1]) | (lanes.n_new[idx] >= max_events)]
            raise SimulationDiverged(f"{bad.size} lane(s) exceeded the event budget of {max_events}")
        lanes.hist_t[idx, k] = tn
        lanes.hist_f[idx, k] = feats
        lanes.hist_w[idx, k] = weights
        lanes.hist_len[idx] += 1
        lanes.n_new[idx] += 1
        lanes.t[idx] = tn
        if gen.any():
            g = idx[gen]
            lanes.post_exc[g] += world.post_excitation(feats[gen], lanes.u[g])
        if eng.any():
            e = idx[eng]
            delta = world.scale(news_ids[eng], lanes.u[e])[:, None] * world.v_in[news_ids[eng]]
            lanes.u[e] += delta
            lanes.engaged[e, news_ids[eng]] = True
            _refresh_post_exc(world, lanes, e)
        else:
            delta = np.zeros((0, d_h))
        if on_event is not None:
            on_event(idx, tn, (~gen).astype(np.int64), np.where(gen, -1, news_ids), feats, eng, delta)
        active = idx[lanes.t[idx] < lanes.t_stop[idx]]


# -- simulation --------------------------------------------------------------


def _user_keys(spec: WorldSpec, user_ids: np.ndarray) -> np.ndarray:
    return stream_keys(spec.seed, 1, user_ids)


def initial_status(spec: WorldSpec, user_ids: Sequence[int]) -> np.ndarray:
    ids = np.asarray(user_ids, dtype=np.int64)
    rng = LaneRNG(stream_keys(spec.seed, 2, ids))
    return spec.user_scale * rng.normal(np.arange(ids.size), spec.d_hidden)


def simulate(spec: WorldSpec | World, chunk: int = 4096) -> tuple[list[UserTrajectory], GroundTruth]:
    """Run every user from time 0 to the horizon; deterministic given the WorldSpec."""
    world = spec if isinstance(spec, World) else World(spec)
    spec = world.spec
    world.validate()
    trajectories: list[UserTrajectory] = []
    truth = GroundTruth(world.digest())
    for start in range(0, spec.n_users, chunk):
        ids = np.arange(start, min(start + chunk, spec.n_users))
        u0 = initial_status(spec, ids)
        N = ids.size
        empty = (np.zeros(0), np.zeros((0, spec.d_f)), np.zeros(0))
        lanes = _init_lanes(world, u0, np.zeros(N), np.full(N, spec.horizon), _user_keys(spec, ids),
                            [empty] * N, capacity=spec.max_events)
        logs: list[list] = [[] for _ in range(N)]

        def record(idx, tn, kinds, news, feats, eng, delta):
            di = 0
            for j in range(idx.size):
                if kinds[j]:
                    logs[idx[j]].append((tn[j], int(news[j]), feats[j].copy(), delta[di].copy(), lanes.u[idx[j]].copy()))
                    di += 1
                else:
                    logs[idx[j]].append((tn[j], -1, feats[j].copy(), None, None))

        _run(world, lanes, record)
        for j, uid in enumerate(ids):
            events, checkpoints = [], []
            for i, (t, n, f, delta, u_after) in enumerate(logs[j]):
                if n >= 0:
                    events.append(MarkedEvent(ENGAGEMENT, float(t), tuple(f), n))
                    checkpoints.append((float(t), u_after))
                    truth.records.append(EngagementTruth(int(uid), i, n, float(t), delta))
                else:
                    events.append(MarkedEvent(GENERATION, float(t), tuple(f)))
            trajectories.append(UserTrajectory(int(uid), u0[j], checkpoints, EventSequence(int(uid), tuple(events))))
    truth.recompute_news_averages()
    n_events = sum(len(tr.events) for tr in trajectories)
    log.info("simulated %d users, %d events, %d engagements", len(trajectories), n_events, len(truth.records))
    return trajectories, truth


# -- Monte-Carlo oracle ---------------------------------------------------------


@dataclass
class OracleEstimate:
    ite: Optional[np.ndarray]
    se: Optional[np.ndarray]
    f1: Optional[np.ndarray]
    f0: Optional[np.ndarray]
    mu1: float
    mu0: float


def _history_arrays(world: World, events: Sequence[MarkedEvent]):
    ts = np.array([e.t for e in events], dtype=float)
    fs = np.array([e.feature for e in events], dtype=float).reshape(len(events), world.spec.d_f)
    ws = np.array([world._history_weight(e) for e in events], dtype=float)
    return ts, fs, ws


def _ratio_estimate(counts: np.ndarray, sums: np.ndarray, eps: float):
    R = counts.size
    mu = counts.mean()
    if mu < eps:
        return None, None, float(mu)
    phi = sums.mean(axis=0)
    F = phi / mu
    resid = sums - counts[:, None] * F[None, :]
    var = resid.var(axis=0, ddof=1) / (R * mu * mu) if R > 1 else np.full_like(F, np.inf)
    return F, var, float(mu)


def oracle_ites(
    world: World,
    items: Sequence[tuple[UserTrajectory, int]],
    window: float,
    rollouts: int,
    seed: int = 0,
    eps_count: float = 1e-3,
    max_lanes: int = 8192,
    max_window_events: int = 200,
) -> list[OracleEstimate]:
    """Monte-Carlo ITE for each ``(trajectory, engagement event index)``.

    Per item, ``rollouts`` forward simulations over ``[t, t + window]`` with
    the engagement applied and as many with it removed (no status update, no
    history entry).  Each arm's functional is a ratio of Monte-Carlo means.
    """
    spec = world.spec
    for traj, k in items:
        if not 0 <= k < len(traj.events) or traj.events[k].kind != ENGAGEMENT:
            raise IndexError(f"user {traj.user_id}: event {k} is not an engagement")
    per_chunk = max(1, max_lanes // (2 * rollouts))
    results: list[OracleEstimate] = []
    for c0 in range(0, len(items), per_chunk):
        chunk = items[c0:c0 + per_chunk]
        us, t0s, prefixes, engaged = [], [], [], []
        for traj, k in chunk:
            ev = traj.events[k]
            u_before = traj.status_before(k)
            u_after, _ = world.apply_engagement(u_before, ev.news_id)
            us += [u_before, u_after]
            t0s += [ev.t, ev.t]
            prefixes += [_history_arrays(world, traj.events[:k]), _history_arrays(world, traj.events[:k + 1])]
            seen = {e.news_id for e in traj.events[:k] if e.kind == ENGAGEMENT}
            engaged += [seen, seen | {ev.news_id}]
        # lane order: item-major, then arm, then rollout
        uid = np.repeat([traj.user_id for traj, _ in chunk], 2 * rollouts)
        eix = np.repeat([k for _, k in chunk], 2 * rollouts)
        arm = np.tile(np.repeat([0, 1], rollouts), len(chunk))
        rid = np.tile(np.arange(rollouts), 2 * len(chunk))
        keys = stream_keys(spec.seed, 3, seed, uid, eix, arm, rid)
        t0 = np.array(t0s)
        template = _init_lanes(world, np.array(us), t0, t0 + window, keys[:t0.size], prefixes,
                               capacity=max_window_events, engaged=engaged)
        lanes = _replicate(template, rollouts, keys)
        t0 = lanes.t.copy()
        counts = np.zeros(t0.size)
        sums = np.zeros((t0.size, spec.d_f))

        def record(idx, tn, kinds, news, feats, eng, delta):
            g = kinds == 0
            np.add.at(counts, idx[g], 1.0)
            np.add.at(sums, idx[g], feats[g])

        _run(world, lanes, record, max_events=max_window_events)
        for i in range(len(chunk)):
            base = i * 2 * rollouts
            arms = []
            for arm in (0, 1):
                sl = slice(base + arm * rollouts, base + (arm + 1) * rollouts)
                arms.append(_ratio_estimate(counts[sl], sums[sl], eps_count))
            (F0, v0, mu0), (F1, v1, mu1) = arms
            if F0 is None or F1 is None:
                results.append(OracleEstimate(None, None, F1, F0, mu1, mu0))
            else:
                results.append(OracleEstimate(F1 - F0, np.sqrt(v0 + v1), F1, F0, mu1, mu0))
    return results


def oracle_ite(world: World, traj: UserTrajectory, engagement_index: int, window: float, rollouts: int,
               seed: int = 0, eps_count: float = 1e-3) -> OracleEstimate:
    return oracle_ites(world, [(traj, engagement_index)], window, rollouts, seed, eps_count)[0]
