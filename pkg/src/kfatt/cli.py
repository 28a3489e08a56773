"""Command-line entry point.

Subcommands, all driven by one YAML config (see config.example.yaml):

  generate   synthesize the dataset + sidecar
  train      fit the configured kernel, write checkpoint + loss log
  evaluate   score the held-out instances, write subset AUC table
  verify     certify the fusion closed forms against the numerical MAP
  bench      latency percentiles and MAC counts across history lengths

Exit codes: 0 success, 1 refused artifact mismatch or other runtime
failure, 2 invalid config, 3 oracle certification failure.
"""

from __future__ import annotations

import sys
from dataclasses import replace
from pathlib import Path

import click

from .config import ConfigError, RunConfig, load_config
from .datagen import generate, instances_from_rows, read_dataset, write_dataset
from .evalbench import bench_latency, evaluate_model, format_bench, format_metrics
from .model import init_params, load_checkpoint, save_checkpoint
from .model import train as train_model
from .oracle import run_certification

BENCH_LENGTHS = (25, 50, 100, 250)
BENCH_REPS = 200


def _config_options(fn):
    fn = click.option("--config", "config_path", required=True,
                      type=click.Path(), help="YAML config file.")(fn)
    fn = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                      help="Override a config key (dotted path), repeatable.")(fn)
    fn = click.option("--force", is_flag=True,
                      help="Skip config-digest consistency checks.")(fn)
    return fn


def _load(config_path: str, overrides: tuple[str, ...]) -> RunConfig:
    try:
        return load_config(config_path, overrides)
    except ConfigError as exc:
        for f in exc.fields:
            click.echo(f"config error: {f}", err=True)
        sys.exit(2)


def _ensure_parent(path: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)


def _check_digest(kind: str, found: str, expected: str, force: bool) -> None:
    if found != expected:
        if force:
            click.echo(f"warning: {kind} digest {found[:12]} != config {expected[:12]} (forced)",
                       err=True)
            return
        click.echo(f"{kind} was produced under config digest {found[:12]}, "
                   f"but this config has {expected[:12]}; rerun upstream or pass --force",
                   err=True)
        sys.exit(1)


def _model_config(cfg: RunConfig, meta: dict):
    return replace(cfg.model, n_queries=meta["n_queries"], n_items=meta["n_items"])


@click.group()
def main() -> None:
    """Interest-fusion CTR harness."""


@main.command(name="generate")
@_config_options
def generate_cmd(config_path, overrides, force):
    """Synthesize the dataset."""
    cfg = _load(config_path, overrides)
    rows, _ = generate(cfg.datagen)
    _ensure_parent(cfg.paths.dataset)
    write_dataset(cfg.paths.dataset, rows, cfg.datagen, cfg.digest)
    n_train = sum(1 for r in rows if r.split == "train")
    n_test = sum(1 for r in rows if r.split == "test")
    click.echo(f"wrote {len(rows)} rows ({n_train} train, {n_test} test) "
               f"to {cfg.paths.dataset} [config {cfg.digest[:12]}]")


@main.command()
@_config_options
def train(config_path, overrides, force):
    """Train the configured kernel on the generated dataset."""
    cfg = _load(config_path, overrides)
    rows, meta = read_dataset(cfg.paths.dataset)
    _check_digest("dataset", meta.get("config_digest", ""), cfg.digest, force)
    model_cfg = _model_config(cfg, meta)
    train_insts, _ = instances_from_rows(rows)
    if not train_insts:
        click.echo("dataset contains no training instances", err=True)
        sys.exit(1)
    params = init_params(model_cfg, cfg.seed)
    log = train_model(params, model_cfg, train_insts, epochs=cfg.train.epochs,
                      lr=cfg.train.lr, batch_size=cfg.train.batch_size, seed=cfg.seed)
    _ensure_parent(cfg.paths.checkpoint)
    save_checkpoint(cfg.paths.checkpoint, params, cfg.digest)
    _ensure_parent(cfg.paths.loss_log)
    with open(cfg.paths.loss_log, "w", encoding="utf-8") as fh:
        fh.write(f"# config_digest={cfg.digest}\nepoch\tloss\n")
        for epoch, loss in enumerate(log):
            fh.write(f"{epoch}\t{loss:.6f}\n")
    for epoch, loss in enumerate(log):
        click.echo(f"epoch {epoch}: loss {loss:.6f}")
    click.echo(f"saved checkpoint to {cfg.paths.checkpoint}")


@main.command()
@_config_options
def evaluate(config_path, overrides, force):
    """Report AUC on the held-out instances, sliced by subset."""
    cfg = _load(config_path, overrides)
    rows, meta = read_dataset(cfg.paths.dataset)
    _check_digest("dataset", meta.get("config_digest", ""), cfg.digest, force)
    params, manifest = load_checkpoint(cfg.paths.checkpoint)
    _check_digest("checkpoint", manifest.get("config_digest", ""), cfg.digest, force)
    model_cfg = _model_config(cfg, meta)
    _, test_insts = instances_from_rows(rows)
    if not test_insts:
        click.echo("dataset contains no test instances", err=True)
        sys.exit(1)
    _, metric_rows = evaluate_model(params, model_cfg, test_insts, name=cfg.model.kernel)
    text = f"# config_digest={cfg.digest}\n" + format_metrics(metric_rows)
    _ensure_parent(cfg.paths.metrics)
    Path(cfg.paths.metrics).write_text(text, encoding="utf-8")
    click.echo(text.rstrip("\n"))


@main.command()
@_config_options
def verify(config_path, overrides, force):
    """Certify the closed-form kernels against the numerical maximizer."""
    _load(config_path, overrides)  # config validated for uniformity; suite is fixed
    try:
        rows = run_certification()
    except RuntimeError as exc:
        click.echo(f"oracle failure: {exc}", err=True)
        sys.exit(3)
    failures = 0
    for row in rows:
        click.echo(row.format())
        failures += 0 if row.ok else 1
    click.echo(f"{failures} failures across {len(rows)} certification rows")
    if failures:
        sys.exit(3)


@main.command()
@_config_options
def bench(config_path, overrides, force):
    """Latency percentiles and MAC counts across history lengths."""
    cfg = _load(config_path, overrides)
    rows = bench_latency([cfg.model.kernel], BENCH_LENGTHS, reps=BENCH_REPS)
    text = f"# config_digest={cfg.digest}\n" + format_bench(rows)
    _ensure_parent(cfg.paths.bench)
    Path(cfg.paths.bench).write_text(text, encoding="utf-8")
    click.echo(text.rstrip("\n"))


if __name__ == "__main__":
    main()
