"""Pipeline stages as pure functions of their input files.

generate -> {train,val,test}.events, truth.gt, manifest.json
train    -> checkpoint.json, train_log.tsv, train_manifest.json
estimate -> effects.tsv, news_effects.tsv
evaluate -> metrics.json
report   -> ite_scatter.svg, ite_pcs.csv, metrics.csv
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import RunConfig
from .diffkit import CheckpointVersionError, ParamStore, load_into, read_checkpoint, save_checkpoint
from .effects import (ate_from_estimates, default_step, engagement_items, predict_effects, rollout_effects,
                      treated_sample_items)
from .events import read_dataset, write_dataset
from .metrics import (EffectRow, EffectTable, NewsEffectTable, metric_report, read_effect_table,
                      read_news_table, write_effect_table, write_news_table)
from .model import CntppModel, ModelConfig
from .training import TrainingDiverged, train
from .world import GroundTruth, World, oracle_ites, simulate

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "cntpp-manifest/1"
SPLITS = ("train", "val", "test")


class DataError(RuntimeError):
    """Missing or inconsistent pipeline inputs."""


def file_sha256(path: Path | str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _require(path: Path) -> Path:
    if not path.is_file():
        raise DataError(f"missing input {path}")
    return path


def set_deterministic(flag: bool) -> None:
    if flag:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


# -- generate ----------------------------------------------------------------


def split_users(user_ids, weights, seed: int) -> dict[str, list[int]]:
    """Random user-level split with sizes proportional to ``weights``."""
    ids = np.array(sorted(user_ids))
    perm = np.random.default_rng([seed, 0x5917]).permutation(len(ids))
    w = np.asarray(weights, dtype=float)
    bounds = np.floor(np.cumsum(w) / w.sum() * len(ids)).astype(int)
    parts = np.split(perm, bounds[:-1])
    return {name: sorted(ids[p].tolist()) for name, p in zip(SPLITS, parts)}


def run_generate(cfg: RunConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    cfg = cfg.resolved()
    world = World(cfg.world)
    world.validate()
    trajs, truth = simulate(world)
    keep = {t.user_id: t for t in trajs if len(t.events) > 1}
    parts = split_users(keep, cfg.split, cfg.seeds.world)
    stamp = {**cfg.stamp(), "world_digest": truth.digest}
    for name in SPLITS:
        write_dataset(out / f"{name}.events", [keep[u].events for u in parts[name]], {**stamp, "split": name})

    # oracle ITEs for the with-treatment test samples
    test_seqs = [keep[u].events for u in parts["test"]]
    items = treated_sample_items(test_seqs)
    if cfg.oracle.max_items is not None:
        items = items[:cfg.oracle.max_items]
    est = oracle_ites(world, [(keep[s.user_id], k) for s, k in items], cfg.effect.window,
                      cfg.oracle.rollouts, seed=cfg.seeds.oracle, eps_count=cfg.effect.eps_count)
    lookup = truth.lookup()
    for (s, k), e in zip(items, est):
        rec = lookup[(s.user_id, k)]
        rec.oracle_ite, rec.oracle_se = e.ite, e.se
    truth.meta = {**stamp, "oracle_rollouts": cfg.oracle.rollouts, "window": cfg.effect.window}
    truth.save(out / "truth.gt")

    manifest = {
        "format": MANIFEST_FORMAT,
        "stage": "generate",
        **stamp,
        "config": cfg.to_dict(),
        "counts": {
            "users_simulated": len(trajs),
            "users_dropped": len(trajs) - len(keep),
            **{name: len(parts[name]) for name in SPLITS},
            "oracle_items": len(items),
        },
        "files": {f: file_sha256(out / f) for f in [*(f"{n}.events" for n in SPLITS), "truth.gt"]},
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


# -- train -------------------------------------------------------------------


def _load_split(data: Path, name: str):
    seqs, header = read_dataset(_require(data / f"{name}.events"))
    return seqs, header


def run_train(cfg: RunConfig, data: Path, out: Path, progress: bool = False) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    cfg = cfg.resolved()
    tr, header = _load_split(data, "train")
    va, _ = _load_split(data, "val")
    if not tr:
        raise DataError("empty training split")
    stamp = {**cfg.stamp(), "world_digest": header.get("world_digest"), "adversarial": cfg.train.adversarial}
    try:
        res = train(tr, va, cfg.train, time_scale=cfg.world.horizon, progress=progress)
        model, store, history = res.model, res.store, res.history
        diverged = None
    except TrainingDiverged as exc:
        model, history, diverged = exc.model, exc.history, str(exc)
        store = ParamStore.from_module(model)
    ckpt_cfg = {"model": model.cfg.to_dict(), "model_seed": model.seed, "train": cfg.train.to_dict(), **stamp}
    extra = {"history": history}
    if diverged is None:
        extra.update(best_epoch=res.best_epoch, init_val_nll=res.init_val_nll, best_val_nll=res.best_val_nll)
    else:
        extra["diverged"] = diverged
    save_checkpoint(out / "checkpoint.json", store, ckpt_cfg, extra)
    with open(out / "train_log.tsv", "w") as fh:
        for k in sorted(stamp):
            fh.write(f"# {k}={json.dumps(stamp[k], sort_keys=True)}\n")
        cols = ["epoch", "train_outcome_nll", "train_treatment_nll", "val_outcome_nll", "gamma"]
        fh.write("\t".join(cols) + "\n")
        for rec in history:
            fh.write("\t".join("" if rec[c] is None else repr(rec[c]) for c in cols) + "\n")
    manifest = {
        "format": MANIFEST_FORMAT,
        "stage": "train",
        **stamp,
        "diverged": diverged,
        "files": {f: file_sha256(out / f) for f in ("checkpoint.json", "train_log.tsv")},
    }
    _write_json(out / "train_manifest.json", manifest)
    if diverged is not None:
        raise TrainingDiverged(diverged, model, history)
    return manifest


def load_model(path: Path | str) -> tuple[CntppModel, dict]:
    doc = read_checkpoint(_require(Path(path)))
    try:
        mcfg = ModelConfig.from_dict(doc["config"]["model"])
    except (KeyError, TypeError) as exc:
        raise CheckpointVersionError(f"{path}: checkpoint lacks a model config") from exc
    model = CntppModel(mcfg, seed=doc["config"].get("model_seed", 0))
    load_into(ParamStore.from_module(model), doc)
    model.eval()
    return model, doc


# -- estimate ----------------------------------------------------------------


def run_estimate(cfg: RunConfig, checkpoint: Path, data: Path, out: Path) -> tuple[EffectTable, NewsEffectTable]:
    out.mkdir(parents=True, exist_ok=True)
    cfg = cfg.resolved()
    model, doc = load_model(checkpoint)
    test, header = _load_split(data, "test")
    truth = GroundTruth.load(_require(data / "truth.gt"))
    if header.get("world_digest") != truth.digest:
        raise DataError("dataset and ground truth come from different worlds")
    ec = cfg.effect

    def estimate(items):
        if ec.mode == "rollout":
            return rollout_effects(model, items, ec.window, ec.rollouts, seed=cfg.seeds.model, eps_count=ec.eps_count)
        return predict_effects(model, items, ec.window, ec.step, ec.eps_count)

    stamp = {
        **cfg.stamp(),
        "world_digest": truth.digest,
        "checkpoint_sha256": file_sha256(checkpoint),
        "adversarial": doc["config"].get("adversarial"),
        "window": ec.window,
        "step": default_step(ec.window, ec.step),
        "mode": ec.mode,
    }
    lookup = truth.lookup()
    items = treated_sample_items(test)
    rows = []
    for (s, k), e in zip(items, estimate(items)):
        t = lookup.get((s.user_id, k))
        rows.append(EffectRow(s.user_id, s[k].news_id, s[k].t, e.ite,
                              None if t is None else t.oracle_ite, None if t is None else t.oracle_se))
    table = EffectTable(rows, stamp)
    write_effect_table(out / "effects.tsv", table)

    eng = engagement_items(test)
    ests = estimate(eng)
    by_news: dict[int, list] = {}
    for (s, k), e in zip(eng, ests):
        by_news.setdefault(s[k].news_id, []).append(e)
    ids, ates, truths, counts = [], [], [], []
    for nid in sorted(by_news):
        try:
            a = ate_from_estimates(nid, by_news[nid])
        except ValueError:
            continue
        ids.append(nid)
        ates.append(a.ate)
        truths.append(truth.news_avg_delta[nid])
        counts.append((a.n_used, a.n_undefined))
    news = NewsEffectTable(ids, np.array(ates), np.array(truths), stamp)
    write_news_table(out / "news_effects.tsv", news, counts)
    return table, news


# -- evaluate / report -------------------------------------------------------


def run_evaluate(effects: Path, news: Optional[Path], out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    table = read_effect_table(_require(effects))
    news_table = read_news_table(_require(news)) if news is not None else None
    report = {
        "header": {k: table.header[k] for k in sorted(table.header)},
        "metrics": metric_report(table, news_table),
    }
    _write_json(out / "metrics.json", report)
    return report


def principal_components(X: np.ndarray, k: int = 2) -> np.ndarray:
    """Scores on the top ``k`` eigenvectors of the covariance; signs fixed for reproducibility."""
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / max(len(X) - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    vecs = vecs[:, np.argsort(vals)[::-1][:k]]
    flip = np.sign(vecs[np.argmax(np.abs(vecs), axis=0), np.arange(vecs.shape[1])])
    return Xc @ (vecs * flip)


def _svg_scatter(pcs: np.ndarray, labels, title: str, table_csv: str) -> str:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "cntpp", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.scatter(pcs[:, 0], pcs[:, 1], c=np.asarray(labels) % 20, cmap="tab20", s=6)
        ax.set_xlabel("PC1")
        ax.set_ylabel("PC2")
        ax.set_title(title)
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)
    svg = buf.getvalue()
    data = table_csv.replace("&", "&amp;").replace("<", "&lt;")
    head, sep, rest = svg.partition("<defs>") if "<defs>" in svg else svg.partition("\n <g ")
    return f"{head}<desc id=\"data\">\n{data}</desc>\n{sep}{rest}"


def run_report(effects: Path, metrics: Path, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    table = read_effect_table(_require(effects))
    report = json.loads(_require(metrics).read_text())
    rows = [r for r in table.rows if r.predicted is not None]
    if len(rows) < 2:
        raise DataError("need at least two defined ITEs to plot")
    X = np.array([r.predicted for r in rows])
    pcs = principal_components(X)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["user_id", "news_id", "pc1", "pc2"])
    for r, p in zip(rows, pcs):
        w.writerow([r.user_id, r.news_id, repr(float(p[0])), repr(float(p[1]))])
    stamp = "".join(f"# {k}={json.dumps(table.header[k], sort_keys=True)}\n" for k in sorted(table.header))
    (out / "ite_pcs.csv").write_text(stamp + buf.getvalue())
    (out / "ite_scatter.svg").write_text(_svg_scatter(pcs, [r.news_id for r in rows], "Predicted ITE", buf.getvalue()))
    mbuf = io.StringIO()
    w = csv.writer(mbuf, lineterminator="\n")
    w.writerow(["metric", "value", "n_used", "n_excluded"])
    for name, m in report["metrics"].items():
        w.writerow([name, "" if m["value"] is None else repr(m["value"]), m["n_used"], m["n_excluded"]])
    (out / "metrics.csv").write_text(stamp + mbuf.getvalue())
