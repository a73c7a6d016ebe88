"""Command-line entry points: train, ablate, generalize, transmission.

Configuration comes from an optional JSON file of flat keys; every key
can be overridden by the flag of the same name.  All commands write
their outputs under --out and print a one-line summary.  Errors exit
nonzero with a single machine-parsable line on stderr.
"""

from __future__ import annotations

import functools
import json
import sys
import time
from pathlib import Path

import click

from . import experiments as exp
from .errors import FedoapError


def _fail(err: Exception) -> None:
    click.echo(f"error: {type(err).__name__}: {err}", err=True)
    sys.exit(1)


def _parse_seeds(_ctx, _param, value):
    if value is None:
        return None
    try:
        return tuple(int(part) for part in value.split(",") if part)
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {value!r}")


def common_options(fn):
    options = [
        click.option("--config", "config_path", type=click.Path(exists=True),
                     default=None, help="JSON config file with flat keys."),
        click.option("--seed", type=int, default=None,
                     help="Single seed (shorthand for --seeds SEED)."),
        click.option("--seeds", callback=_parse_seeds, default=None,
                     help="Comma-separated seeds, e.g. 42,43,44."),
        click.option("--strategy",
                     type=click.Choice(["fedoap", "fedavg-all", "local-only"]),
                     default=None),
        click.option("--no-dca", "use_dca", flag_value=False, default=None),
        click.option("--no-adapter", "use_adapter", flag_value=False, default=None),
        click.option("--no-pbl", "use_pbl", flag_value=False, default=None),
        click.option("--clients", type=int, default=None),
        click.option("--rounds", type=int, default=None),
        click.option("--local-epochs", type=int, default=None),
        click.option("--finetune-epochs", "fine_tune_epochs", type=int,
                     default=None),
        click.option("--samples-per-client", type=int, default=None),
        click.option("--image-size", type=int, default=None),
        click.option("--batch-size", type=int, default=None),
        click.option("--base-lr", type=float, default=None),
        click.option("--min-lr", type=float, default=None),
        click.option("--anchor-size", type=int, default=None),
        click.option("--tau", type=float, default=None),
        click.option("--lam", type=float, default=None),
        click.option("--out", "out_dir", type=click.Path(), default="out",
                     show_default=True, help="Output directory."),
    ]
    for option in reversed(options):
        fn = option(fn)
    return functools.wraps(fn)(fn)


def build_config(config_path, seed, seeds, **overrides) -> exp.ExperimentConfig:
    data = {}
    if config_path:
        try:
            data = json.loads(Path(config_path).read_text())
        except json.JSONDecodeError as err:
            raise click.ClickException(f"config file is not valid JSON: {err}")
    if seed is not None and seeds is not None:
        raise click.UsageError("--seed and --seeds are mutually exclusive")
    if seed is not None:
        data["seeds"] = [seed]
    if seeds is not None:
        data["seeds"] = list(seeds)
    for key, value in overrides.items():
        if value is not None:
            data[key] = value
    return exp.ExperimentConfig.from_mapping(data)


@click.group()
def main():
    """Deterministic federated segmentation experiments."""


@main.command()
@common_options
def train(config_path, seed, seeds, out_dir, **overrides):
    """Alignment + fine-tuning; writes report.json and metrics.csv."""
    try:
        config = build_config(config_path, seed, seeds, **overrides)
        started = time.time()
        report = exp.run_experiment(config)
        path = exp.write_report(report, out_dir)
        exp.write_metrics_csv(report, out_dir)
        summary = report["summary"]["mean_dice"]
        click.echo(f"mean test dice {summary['mean']:.4f} "
                   f"+/- {summary['std']:.4f} over {len(config.seeds)} seed(s) "
                   f"in {time.time() - started:.1f}s -> {path}")
    except FedoapError as err:
        _fail(err)


@main.command()
@common_options
def ablate(config_path, seed, seeds, out_dir, **overrides):
    """Mechanism grid (none / dca / dca+adapter / full); writes ablation.csv."""
    try:
        config = build_config(config_path, seed, seeds, **overrides)
        result = exp.run_ablation(config)
        exp.write_report(result, out_dir)
        path = exp.write_ablation_csv(result, out_dir)
        cells = ", ".join(f"{row['row']}={row['mean_dice']['mean']:.4f}"
                          for row in result["rows"])
        click.echo(f"{cells} -> {path}")
    except FedoapError as err:
        _fail(err)


@main.command()
@common_options
def generalize(config_path, seed, seeds, out_dir, **overrides):
    """Unseen-profile client: zero-shot vs two-epoch fine-tuned Dice."""
    try:
        config = build_config(config_path, seed, seeds, **overrides)
        result = exp.run_generalization(config)
        path = exp.write_report(result, out_dir)
        summary = result["summary"]
        click.echo(f"zero-shot {summary['zero_shot_dice']['mean']:.4f} -> "
                   f"fine-tuned {summary['fine_tuned_dice']['mean']:.4f} "
                   f"(gain {summary['gain']['mean']:+.4f}) -> {path}")
    except FedoapError as err:
        _fail(err)


@main.command()
@common_options
def transmission(config_path, seed, seeds, out_dir, **overrides):
    """Per-round byte accounting, closed-form vs measured; transmission.csv."""
    try:
        config = build_config(config_path, seed, seeds, **overrides)
        result = exp.run_transmission(config)
        exp.write_report(result, out_dir)
        path = exp.write_transmission_csv(result, out_dir)
        cells = ", ".join(f"{row['strategy']}@{row['scale']}="
                          f"{row['round_megabytes']:.3f}MB"
                          for row in result["rows"])
        click.echo(f"{cells} -> {path}")
    except FedoapError as err:
        _fail(err)


if __name__ == "__main__":
    main()
