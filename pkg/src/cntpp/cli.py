"""Command-line entry point: ``cntpp {generate,train,estimate,evaluate,report}``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric divergence,
5 format/version mismatch.
"""

from __future__ import annotations

import functools
import logging
import sys
from dataclasses import replace
from pathlib import Path

import click

from .config import ConfigError, RunConfig
from .diffkit import CheckpointVersionError, NonFiniteGradient
from .events import FormatVersionError
from .pipeline import DataError, run_estimate, run_evaluate, run_generate, run_report, run_train, set_deterministic
from .training import TrainingDiverged
from .world import SimulationDiverged

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_VERSION = 2, 3, 4, 5


def _guard(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except (CheckpointVersionError, FormatVersionError) as exc:
            click.echo(f"version mismatch: {exc}", err=True)
            sys.exit(EXIT_VERSION)
        except (TrainingDiverged, SimulationDiverged, NonFiniteGradient) as exc:
            click.echo(f"numeric divergence: {exc}", err=True)
            sys.exit(EXIT_DIVERGED)
        except (DataError, FileNotFoundError, PermissionError, IsADirectoryError, NotADirectoryError) as exc:
            click.echo(f"data error: {exc}", err=True)
            sys.exit(EXIT_DATA)
        except (ValueError, KeyError) as exc:
            click.echo(f"data error: {exc}", err=True)
            sys.exit(EXIT_DATA)

    return wrapper


def _common(fn):
    fn = click.option("--deterministic", is_flag=True, help="Single-threaded, bit-exact execution.")(fn)
    fn = click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=Path("run"),
                      show_default=True, help="Output directory.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Override the stage's seed.")(fn)
    fn = click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
                      help="Run config (YAML).")(fn)
    return fn


def _load(config_path) -> RunConfig:
    return RunConfig.load(config_path) if config_path is not None else RunConfig()


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    """Counterfactual neural TPP pipeline."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@main.command()
@_common
@_guard
def generate(config_path, seed, out, deterministic):
    """Simulate a world, split users, and score oracle ITEs on the test split."""
    set_deterministic(deterministic)
    cfg = _load(config_path)
    if seed is not None:
        cfg.seeds = replace(cfg.seeds, world=seed)
    m = run_generate(cfg, out)
    click.echo(f"generate: {m['counts']} -> {out}")


@main.command(name="train")
@_common
@click.option("--data", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Directory with the generated splits (default: --out).")
@click.option("--adversarial", type=click.Choice(["on", "off"]), default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--batch", type=int, default=None)
@_guard
def train_cmd(config_path, seed, out, deterministic, data, adversarial, epochs, lr, batch):
    """Fit CNTPP (or the adversarial-off ablation)."""
    set_deterministic(deterministic)
    cfg = _load(config_path)
    t = cfg.train
    if adversarial is not None:
        t = replace(t, adversarial=adversarial == "on")
    if epochs is not None:
        t = replace(t, epochs=epochs)
    if lr is not None:
        t = replace(t, lr=lr)
    if batch is not None:
        t = replace(t, batch_size=batch)
    cfg.train = t
    if seed is not None:
        cfg.seeds = replace(cfg.seeds, model=seed)
    cfg.validate()
    run_train(cfg, data or out, out, progress=logging.getLogger().isEnabledFor(logging.INFO))
    click.echo(f"train: checkpoint -> {out / 'checkpoint.json'}")


@main.command()
@_common
@click.option("--data", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.option("--checkpoint", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--window", type=float, default=None)
@click.option("--step", type=float, default=None)
@click.option("--mode", type=click.Choice(["quadrature", "rollout"]), default=None)
@_guard
def estimate(config_path, seed, out, deterministic, data, checkpoint, window, step, mode):
    """Predict ITEs for every with-treatment test sample and per-news ATEs."""
    set_deterministic(deterministic)
    cfg = _load(config_path)
    e = cfg.effect
    if window is not None:
        e = replace(e, window=window)
    if step is not None:
        e = replace(e, step=step)
    if mode is not None:
        e = replace(e, mode=mode)
    cfg.effect = e
    if seed is not None:
        cfg.seeds = replace(cfg.seeds, model=seed)
    cfg.validate()
    table, news = run_estimate(cfg, checkpoint or out / "checkpoint.json", data or out, out)
    click.echo(f"estimate: {len(table.rows)} rows ({sum(r.predicted is None for r in table.rows)} undefined), "
               f"{len(news.news_ids)} news -> {out}")


@main.command()
@_common
@click.option("--effects", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--news", type=click.Path(dir_okay=False, path_type=Path), default=None)
@_guard
def evaluate(config_path, seed, out, deterministic, effects, news):
    """Compute all metrics from effect tables."""
    set_deterministic(deterministic)
    rep = run_evaluate(effects or out / "effects.tsv", news or out / "news_effects.tsv", out)
    for name, m in rep["metrics"].items():
        click.echo(f"{name}\t{m['value']}")


@main.command()
@_common
@click.option("--effects", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--metrics", type=click.Path(dir_okay=False, path_type=Path), default=None)
@_guard
def report(config_path, seed, out, deterministic, effects, metrics):
    """Write the ITE scatter (SVG) and metric CSVs."""
    set_deterministic(deterministic)
    run_report(effects or out / "effects.tsv", metrics or out / "metrics.json", out)
    click.echo(f"report: {out / 'ite_scatter.svg'}")


if __name__ == "__main__":
    main()
