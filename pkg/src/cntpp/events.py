"""Marked event sequences, training-sample construction, thinning and quadrature.

A user's timeline merges two marked point processes: *engagement* events
(interacting with a news post, ``news_id`` set) and *generation* events
(original posts).  Everything downstream consumes :class:`EventSequence`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

ENGAGEMENT = "engagement"
GENERATION = "generation"
KINDS = (ENGAGEMENT, GENERATION)

DATASET_FORMAT = "cntpp-events/1"


class FormatVersionError(ValueError):
    """File written by an incompatible format version."""


class RateBoundExceeded(ValueError):
    """Raised when a thinning target intensity exceeds its declared bound."""


@dataclass(frozen=True)
class MarkedEvent:
    kind: str
    t: float
    feature: tuple[float, ...]
    news_id: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if not self.t >= 0.0:
            raise ValueError(f"event time must be nonnegative, got {self.t}")
        if (self.news_id is not None) != (self.kind == ENGAGEMENT):
            raise ValueError("news_id must be set exactly for engagement events")
        object.__setattr__(self, "feature", tuple(float(x) for x in self.feature))

    @property
    def is_engagement(self) -> bool:
        return self.kind == ENGAGEMENT

    def to_record(self) -> dict:
        return {"kind": self.kind, "t": self.t, "feature": list(self.feature), "news_id": self.news_id}

    @classmethod
    def from_record(cls, rec: dict) -> "MarkedEvent":
        return cls(rec["kind"], float(rec["t"]), tuple(rec["feature"]), rec.get("news_id"))


def engagement(t: float, feature: Sequence[float], news_id: int) -> MarkedEvent:
    return MarkedEvent(ENGAGEMENT, t, tuple(feature), news_id)


def generation(t: float, feature: Sequence[float]) -> MarkedEvent:
    return MarkedEvent(GENERATION, t, tuple(feature))


@dataclass(frozen=True)
class EventSequence:
    user_id: int
    events: tuple[MarkedEvent, ...] = field(default_factory=tuple)

    def __post_init__(self):
        events = tuple(self.events)
        object.__setattr__(self, "events", events)
        for prev, cur in zip(events, events[1:]):
            if not cur.t > prev.t:
                raise ValueError(
                    f"user {self.user_id}: event times must be strictly increasing "
                    f"({prev.t!r} then {cur.t!r})"
                )
        dims = {len(e.feature) for e in events}
        if len(dims) > 1:
            raise ValueError(f"user {self.user_id}: mixed feature dimensions {sorted(dims)}")

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[MarkedEvent]:
        return iter(self.events)

    def __getitem__(self, idx):
        return self.events[idx]

    def prefix(self, n: int) -> "EventSequence":
        return EventSequence(self.user_id, self.events[:n])

    @property
    def feature_dim(self) -> Optional[int]:
        return len(self.events[0].feature) if self.events else None

    def times(self) -> np.ndarray:
        return np.array([e.t for e in self.events], dtype=float)

    def features(self) -> np.ndarray:
        return np.array([e.feature for e in self.events], dtype=float)

    def to_record(self) -> dict:
        return {"user_id": self.user_id, "events": [e.to_record() for e in self.events]}

    @classmethod
    def from_record(cls, rec: dict) -> "EventSequence":
        return cls(int(rec["user_id"]), tuple(MarkedEvent.from_record(e) for e in rec["events"]))


@dataclass(frozen=True)
class TrainingSample:
    """Outcome event with its optional treatment and covariate prefix.

    ``index`` is the position of the outcome in the source sequence, which
    lets batched code recover prefixes without copying events.
    """

    outcome: MarkedEvent
    treatment: Optional[MarkedEvent]
    covariates: EventSequence
    index: int = -1

    def __post_init__(self):
        if self.outcome.kind != GENERATION:
            raise ValueError("outcome must be a generation event")
        if self.treatment is not None:
            if self.treatment.kind != ENGAGEMENT:
                raise ValueError("treatment must be an engagement event")
            if not self.treatment.t < self.outcome.t:
                raise ValueError("treatment must precede the outcome")
            last = self.treatment
        else:
            last = self.outcome
        if self.covariates.events and not self.covariates.events[-1].t < last.t:
            raise ValueError("covariates must precede the treatment/outcome")

    @property
    def conditioning_time(self) -> float:
        """Time of the last event in ``Tr ∪ X`` (0.0 when both are empty)."""
        if self.treatment is not None:
            return self.treatment.t
        if self.covariates.events:
            return self.covariates.events[-1].t
        return 0.0


def build_outcome_samples(seq: EventSequence) -> list[TrainingSample]:
    """One sample per generation event that has a predecessor.

    If the immediate predecessor is an engagement it becomes the treatment
    and the covariates are everything before it; otherwise the covariates
    are everything before the outcome.
    """
    samples = []
    events = seq.events
    for i in range(1, len(events)):
        ev = events[i]
        if ev.kind != GENERATION:
            continue
        prev = events[i - 1]
        if prev.kind == ENGAGEMENT:
            samples.append(TrainingSample(ev, prev, seq.prefix(i - 1), i))
        else:
            samples.append(TrainingSample(ev, None, seq.prefix(i), i))
    return samples


def build_treatment_samples(seq: EventSequence) -> list[tuple[MarkedEvent, EventSequence]]:
    """Targets for the treatment predictor: each engagement with its prior events."""
    return [
        (ev, seq.prefix(i))
        for i, ev in enumerate(seq.events)
        if i > 0 and ev.kind == ENGAGEMENT
    ]


def thinning_sample(
    rate_fn: Callable[[float], float],
    rate_bound: float,
    t_start: float,
    t_end: float,
    rng: np.random.Generator,
) -> list[float]:
    """Draw an inhomogeneous Poisson realisation on ``[t_start, t_end)`` by thinning.

    ``rate_fn`` must stay below ``rate_bound`` on the interval; a violation
    at any proposed point raises :class:`RateBoundExceeded`.
    """
    if not rate_bound > 0:
        raise ValueError(f"rate_bound must be positive, got {rate_bound}")
    out = []
    t = t_start
    while True:
        t += rng.exponential(1.0 / rate_bound)
        if t >= t_end:
            return out
        rate = rate_fn(t)
        if rate > rate_bound * (1.0 + 1e-12):
            raise RateBoundExceeded(f"rate {rate} exceeds bound {rate_bound} at t={t}")
        if rng.uniform() * rate_bound < rate:
            out.append(t)


def riemann_grid(t1: float, t2: float, step: float) -> tuple[np.ndarray, np.ndarray]:
    """Left-Riemann nodes and cell widths covering ``[t1, t2]``; the last cell may be partial."""
    if step <= 0:
        raise ValueError("step must be positive")
    if t2 < t1:
        raise ValueError("t2 must be >= t1")
    span = t2 - t1
    if span == 0:
        return np.zeros(0), np.zeros(0)
    n = max(1, math.ceil(span / step - 1e-9))
    nodes = t1 + step * np.arange(n)
    widths = np.full(n, step)
    widths[-1] = t2 - nodes[-1]
    return nodes, widths


def quadrature(f: Callable[[np.ndarray], np.ndarray], t1: float, t2: float, step: float) -> np.ndarray:
    """Left-Riemann approximation of the integral of ``f`` over ``[t1, t2]``.

    ``f`` is called once on the array of nodes and may return shape ``(n,)``
    or ``(n, d)``.
    """
    nodes, widths = riemann_grid(t1, t2, step)
    if nodes.size == 0:
        probe = np.asarray(f(np.array([t1])))
        return np.zeros(probe.shape[1:])
    values = np.asarray(f(nodes), dtype=float)
    return np.tensordot(widths, values, axes=(0, 0))


# -- dataset files -----------------------------------------------------------


def _dumps(obj) -> str:
    # float repr is the shortest string that round-trips exactly
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def write_dataset(path: Path | str, sequences: Iterable[EventSequence], header: Optional[dict] = None) -> None:
    """Write line-delimited user records, preceded by one header record."""
    lines = [_dumps({"header": {"format": DATASET_FORMAT, **(header or {})}})]
    lines.extend(_dumps(seq.to_record()) for seq in sequences)
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset(path: Path | str) -> tuple[list[EventSequence], dict]:
    header: dict = {}
    seqs = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "header" in rec:
                header = rec["header"]
                if header.get("format") != DATASET_FORMAT:
                    raise FormatVersionError(f"{path}: unsupported dataset format {header.get('format')!r}")
                continue
            seqs.append(EventSequence.from_record(rec))
    return seqs, header
