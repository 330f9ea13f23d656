# -*- coding: utf-8 -*-
"""
Expression spotting engine - command line

Core Features:
1. synth: write a synthetic corpus (manifest + feature files)
2. train: fit a model, write checkpoint and loss trace (optional held-out report)
3. spot: run a checkpoint over a corpus and write proposals
4. eval: score proposals against a manifest
5. loso: leave-one-subject-out training and pooled evaluation

Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3 data error.
"""

import functools
import json
import sys
from pathlib import Path
from typing import Optional

import click
import structlog
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from config import PRESETS, RunConfig, load_config, setup_logging
from dataio import MANIFEST_NAME, SynthSpec, load_corpus, read_manifest, synth_corpus, write_corpus
from errors import ConfigError, MCWESError
from metrics import EvalReport, evaluate
from spotting import read_proposals, write_proposals
from trainer import holdout_split, load_model, loso, save_model, spot_corpus, train, write_trace

logger = structlog.get_logger(__name__)
console = Console()


def handle_errors(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except MCWESError as e:
            logger.error("command_failed", kind=type(e).__name__, error=str(e))
            click.echo(f"Error: {e}", err=True)
            sys.exit(e.exit_code)
    return wrapper


def print_report(report: EvalReport, title: str = "Evaluation"):
    table = Table(title=title)
    table.add_column("Metric")
    table.add_column("Value", justify="right")
    for name, value in report.summary_rows():
        table.add_row(name, value)
    console.print(table)


def write_report(path: Path, report: EvalReport) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    return path


def _config(config_path: Optional[str], preset: Optional[str], **overrides) -> RunConfig:
    return load_config(config_path, preset, **{k: v for k, v in overrides.items() if v is not None})


def _manifest(data_dir: str) -> Path:
    return Path(data_dir) / MANIFEST_NAME


config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                             help="JSON run configuration")
preset_option = click.option("--preset", type=click.Choice(sorted(PRESETS)), default=None,
                             help="Dataset preset applied before the config file")


@click.group()
@click.option("--log-level", default="INFO", show_default=True)
@click.option("--log-file", type=click.Path(dir_okay=False), default=None)
def cli(log_level: str, log_file: Optional[str]):
    """Weakly-supervised micro-/macro-expression spotting"""
    try:
        setup_logging(log_level, log_file)
    except ConfigError as e:
        raise click.BadParameter(str(e), param_hint="--log-level")


@cli.command()
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--videos", type=int, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--d", "dim", type=int, default=64, show_default=True)
@click.option("--fps", type=float, default=30.0, show_default=True)
@click.option("--g", "snippet_len", type=int, default=8, show_default=True)
@click.option("--effect", type=float, default=2.0, show_default=True)
@click.option("--subjects", type=int, default=5, show_default=True)
@handle_errors
def synth(out_dir, videos, seed, dim, fps, snippet_len, effect, subjects):
    """Write a synthetic corpus with planted expression intervals"""
    try:
        spec = SynthSpec(d=dim, fps=fps, g=snippet_len, effect_size=effect, n_subjects=subjects)
    except ValidationError as e:
        raise ConfigError(f"invalid synthetic corpus settings: {e}") from e
    manifest = write_corpus(synth_corpus(videos, seed, spec), out_dir)
    click.echo(str(manifest))


@cli.command("train")
@click.option("--data", "data_dir", required=True, type=click.Path(file_okay=False, exists=True))
@config_option
@preset_option
@click.option("--out", "checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option("--trace", "trace_path", required=True, type=click.Path(dir_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--iterations", type=int, default=None)
@click.option("--holdout", type=float, default=None,
              help="Hold out this fraction of videos and report on them after training")
@handle_errors
def train_cmd(data_dir, config_path, preset, checkpoint, trace_path, seed, iterations, holdout):
    """Train on a corpus and write checkpoint plus loss trace"""
    config = _config(config_path, preset, seed=seed, iterations=iterations)
    corpus = load_corpus(_manifest(data_dir))
    held = None
    if holdout is not None:
        corpus, held = holdout_split(corpus, holdout, config.seed)

    result = train(corpus, config)
    save_model(checkpoint, result.params, config.model)
    write_trace(trace_path, result.trace)

    if held is not None:
        report = evaluate(spot_corpus(held, result.params, config), held.records)
        write_report(Path(checkpoint).with_suffix(".holdout.json"), report)
        print_report(report, title=f"Held-out ({len(held)} videos)")


@cli.command()
@click.option("--ckpt", "checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option("--data", "data_dir", required=True, type=click.Path(file_okay=False, exists=True))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@config_option
@preset_option
@handle_errors
def spot(checkpoint, data_dir, out_path, config_path, preset):
    """Write proposals for every video of a corpus"""
    config = _config(config_path, preset)
    params = load_model(checkpoint, config.model)
    proposals = spot_corpus(load_corpus(_manifest(data_dir)), params, config)
    write_proposals(out_path, proposals)
    click.echo(f"{len(proposals)} proposals -> {out_path}")


@cli.command("eval")
@click.option("--proposals", "proposals_path", required=True, type=click.Path(dir_okay=False))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(dir_okay=False))
@click.option("--k-eval", type=float, default=0.5, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None)
@handle_errors
def eval_cmd(proposals_path, manifest_path, k_eval, out_path):
    """Score proposals against the manifest's ground truth"""
    if not 0.0 < k_eval <= 1.0:
        raise ConfigError(f"--k-eval must lie in (0, 1], got {k_eval}")
    report = evaluate(read_proposals(proposals_path), read_manifest(manifest_path), k_eval)
    if out_path is not None:
        write_report(Path(out_path), report)
    print_report(report)


@cli.command("loso")
@click.option("--data", "data_dir", required=True, type=click.Path(file_okay=False, exists=True))
@config_option
@preset_option
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--workers", type=int, default=None, help="Folds trained concurrently")
@click.option("--k-eval", type=float, default=0.5, show_default=True)
@handle_errors
def loso_cmd(data_dir, config_path, preset, out_dir, workers, k_eval):
    """Leave-one-subject-out training with a pooled report"""
    config = _config(config_path, preset)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = loso(load_corpus(_manifest(data_dir)), config, out, workers=workers, k_eval=k_eval)
    write_proposals(out / "proposals.json", result.proposals)
    write_report(out / "report.json", result.report)
    print_report(result.report, title=f"LOSO ({len(result.folds)} folds)")


if __name__ == "__main__":
    cli()
