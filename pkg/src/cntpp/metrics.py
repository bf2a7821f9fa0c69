"""Effect-estimation metrics and effect-table I/O.

Row-level metrics compare predicted and true ITE vectors; news-level metrics
(MatDis, LinCor) compare per-news predicted ATEs with the true average hidden
status change; ASD measures cluster tightness of embeddings.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

EPS_SIGN = 1e-6


class MetricError(ValueError):
    """Metric undefined for the given inputs (empty, degenerate, rank deficient)."""


# -- tables ------------------------------------------------------------------


@dataclass
class EffectRow:
    user_id: int
    news_id: int
    t: float
    predicted: Optional[np.ndarray]  # None = undefined
    oracle: Optional[np.ndarray] = None
    oracle_se: Optional[np.ndarray] = None

    @property
    def usable(self) -> bool:
        return self.predicted is not None and self.oracle is not None


@dataclass
class EffectTable:
    rows: list[EffectRow] = field(default_factory=list)
    header: dict = field(default_factory=dict)

    def __post_init__(self):
        dims = {len(v) for r in self.rows for v in (r.predicted, r.oracle) if v is not None}
        if len(dims) > 1:
            raise ValueError(f"inconsistent ITE dimensions {sorted(dims)}")

    def usable(self) -> tuple[np.ndarray, np.ndarray]:
        rows = [r for r in self.rows if r.usable]
        if not rows:
            return np.zeros((0, 0)), np.zeros((0, 0))
        return np.array([r.predicted for r in rows]), np.array([r.oracle for r in rows])

    @property
    def n_excluded(self) -> int:
        return sum(not r.usable for r in self.rows)


@dataclass
class NewsEffectTable:
    news_ids: list[int]
    predicted_ate: np.ndarray
    true_change: np.ndarray
    header: dict = field(default_factory=dict)

    def __post_init__(self):
        self.predicted_ate = np.asarray(self.predicted_ate, dtype=float)
        self.true_change = np.asarray(self.true_change, dtype=float)
        if len(set(self.news_ids)) != len(self.news_ids):
            raise ValueError("one row per news item")
        if self.predicted_ate.shape[0] != len(self.news_ids) or self.true_change.shape[0] != len(self.news_ids):
            raise ValueError("row counts differ")
        order = np.argsort(self.news_ids, kind="stable")
        self.news_ids = [self.news_ids[i] for i in order]
        self.predicted_ate = self.predicted_ate[order]
        self.true_change = self.true_change[order]


def _fmt_vec(v) -> str:
    if v is None:
        return "undefined"
    return ",".join(repr(float(x)) for x in v)


def _parse_vec(s: str):
    if s in ("undefined", "null", ""):
        return None
    return np.array([float(x) for x in s.split(",")])


def _write_header(fh, header: dict):
    for k in sorted(header):
        fh.write(f"# {k}={json.dumps(header[k], sort_keys=True)}\n")


def _read_lines(path):
    header, lines = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# "):
            k, _, v = line[2:].partition("=")
            header[k] = json.loads(v)
        elif line:
            lines.append(line.split("\t"))
    return header, lines


EFFECT_COLUMNS = ["user_id", "news_id", "t", "predicted_ite", "oracle_ite", "oracle_se"]


def write_effect_table(path: Path | str, table: EffectTable) -> None:
    with open(path, "w") as fh:
        _write_header(fh, table.header)
        fh.write("\t".join(EFFECT_COLUMNS) + "\n")
        for r in table.rows:
            fh.write("\t".join([str(r.user_id), str(r.news_id), repr(float(r.t)), _fmt_vec(r.predicted),
                                "null" if r.oracle is None else _fmt_vec(r.oracle),
                                "null" if r.oracle_se is None else _fmt_vec(r.oracle_se)]) + "\n")


def read_effect_table(path: Path | str) -> EffectTable:
    header, lines = _read_lines(path)
    if not lines or lines[0] != EFFECT_COLUMNS:
        raise ValueError(f"{path}: not an effect table")
    rows = [EffectRow(int(u), int(n), float(t), _parse_vec(p), _parse_vec(o), _parse_vec(s))
            for u, n, t, p, o, s in lines[1:]]
    return EffectTable(rows, header)


NEWS_COLUMNS = ["news_id", "predicted_ate", "true_avg_status_change", "n_used", "n_undefined"]


def write_news_table(path: Path | str, table: NewsEffectTable, counts: Optional[Sequence[tuple[int, int]]] = None) -> None:
    counts = counts or [(0, 0)] * len(table.news_ids)
    with open(path, "w") as fh:
        _write_header(fh, table.header)
        fh.write("\t".join(NEWS_COLUMNS) + "\n")
        for nid, a, y, (nu, nx) in zip(table.news_ids, table.predicted_ate, table.true_change, counts):
            fh.write("\t".join([str(nid), _fmt_vec(a), _fmt_vec(y), str(nu), str(nx)]) + "\n")


def read_news_table(path: Path | str) -> NewsEffectTable:
    header, lines = _read_lines(path)
    if not lines or lines[0] != NEWS_COLUMNS:
        raise ValueError(f"{path}: not a news effect table")
    body = lines[1:]
    return NewsEffectTable([int(r[0]) for r in body], np.array([_parse_vec(r[1]) for r in body]),
                           np.array([_parse_vec(r[2]) for r in body]), header)


# -- row-level metrics -------------------------------------------------------


def _pair(pred, true):
    if isinstance(pred, EffectTable):
        pred, true = pred.usable()
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    true = np.atleast_2d(np.asarray(true, dtype=float))
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {true.shape}")
    return pred, true


def sign_accuracy(pred, true=None, eps: float = EPS_SIGN) -> float:
    """Fraction of (row, dimension) pairs whose signs agree; near-zero truths are skipped."""
    pred, true = _pair(pred, true)
    mask = np.abs(true) >= eps
    if pred.size == 0 or not mask.any():
        raise MetricError("no usable (row, dimension) pairs")
    return float((np.sign(pred) == np.sign(true))[mask].mean())


def _relative(pred, true, power):
    pred, true = _pair(pred, true)
    if pred.shape[0] < 2:
        raise MetricError("need at least two rows")
    num = (np.abs(pred - true) ** power).sum()
    den = (np.abs(true - true.mean(axis=0)) ** power).sum()
    if den == 0:
        raise MetricError("constant truth: zero denominator")
    return float(num / den)


def rae(pred, true=None) -> float:
    """Σ|ŷ − y| / Σ|y − ȳ| pooled over dimensions."""
    return _relative(pred, true, 1)


def rrse(pred, true=None) -> float:
    """sqrt(Σ(ŷ − y)² / Σ(y − ȳ)²) pooled over dimensions."""
    return math.sqrt(_relative(pred, true, 2))


# -- news-level metrics ------------------------------------------------------


def _pairwise(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    return np.linalg.norm(x[:, None, :] - x[None, :, :], axis=-1)


def _news(pred, true):
    if isinstance(pred, NewsEffectTable):
        return pred.predicted_ate, pred.true_change
    return np.asarray(pred, dtype=float), np.asarray(true, dtype=float)


def matdis(pred, true=None) -> float:
    """Frobenius distance between Frobenius-normalised pairwise distance matrices."""
    pred, true = _news(pred, true)
    if len(pred) < 2:
        raise MetricError("need at least two news items")
    a, b = _pairwise(pred), _pairwise(true)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise MetricError("degenerate (all-zero) distance matrix")
    return float(np.linalg.norm(a / na - b / nb))


def lincor(pred, true=None) -> float:
    """Uniformly averaged R² of an OLS fit from predicted ATE to the true change."""
    pred, true = _news(pred, true)
    X = np.asarray(pred, dtype=float).reshape(len(pred), -1)
    Y = np.asarray(true, dtype=float).reshape(len(true), -1)
    n, d = X.shape
    if n <= d + 1:
        raise MetricError(f"need more than {d + 1} news items, got {n}")
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    if not np.any(Xc):
        return 0.0
    if np.linalg.matrix_rank(Xc) < d:
        raise MetricError("rank-deficient design")
    coef, *_ = np.linalg.lstsq(Xc, Yc, rcond=None)
    resid = Yc - Xc @ coef
    ss_tot = (Yc ** 2).sum(axis=0)
    ss_res = (resid ** 2).sum(axis=0)
    r2 = np.where(ss_tot > 0, 1.0 - ss_res / np.where(ss_tot > 0, ss_tot, 1.0), 0.0)
    return float(r2.mean())


# -- clustering ---------------------------------------------------------------


def asd(points, labels) -> dict:
    """Average distance to centroid after joint per-dimension min-max normalisation.

    Returns ``{"per_label": {label: value}, "mean_label": ..., "joint": ...}``.
    """
    X = np.asarray(points, dtype=float)
    labels = list(labels)
    if len(X) == 0 or len(labels) == 0:
        raise MetricError("empty label set")
    X = X.reshape(len(X), -1)
    if len(labels) != len(X):
        raise ValueError("one label per point")
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    Z = (X - lo) / span

    def spread(P):
        return float(np.linalg.norm(P - P.mean(axis=0), axis=1).mean())

    lab = np.array(labels, dtype=object)
    per = {}
    for key in sorted(set(labels), key=lambda v: (str(type(v)), v)):
        per[key] = spread(Z[lab == key])
    return {"per_label": per, "mean_label": float(np.mean(list(per.values()))), "joint": spread(Z)}


# -- report ------------------------------------------------------------------


def metric_report(table: EffectTable, news: Optional[NewsEffectTable] = None, asd_labels: str = "news_id") -> dict:
    """All six metrics as ``{name: {"value", "n_used", "n_excluded"}}``; failures carry an ``error``."""
    out = {}
    pred, true = table.usable()
    n_used, n_excl = len(pred), table.n_excluded

    def put(name, fn, used, excl):
        try:
            out[name] = {"value": fn(), "n_used": used, "n_excluded": excl}
        except MetricError as exc:
            out[name] = {"value": None, "n_used": used, "n_excluded": excl, "error": str(exc)}

    put("accuracy", lambda: sign_accuracy(pred, true), n_used, n_excl)
    put("rae", lambda: rae(pred, true), n_used, n_excl)
    put("rrse", lambda: rrse(pred, true), n_used, n_excl)
    if news is not None:
        k = len(news.news_ids)
        put("matdis", lambda: matdis(news), k, 0)
        put("lincor", lambda: lincor(news), k, 0)
    defined = [r for r in table.rows if r.predicted is not None]
    put("asd", lambda: asd([r.predicted for r in defined], [getattr(r, asd_labels) for r in defined])["mean_label"],
        len(defined), len(table.rows) - len(defined))
    return out
