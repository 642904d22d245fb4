# -*- coding: utf-8 -*-
"""
ClusterSlot - Cluster-driven slotting and picking-route experiments
Command-line entry point
"""

import logging
import sys
from pathlib import Path

import click
from dotenv import load_dotenv
from pydantic import ValidationError

from experiment_harness import (
    ExperimentConfig,
    ReplayError,
    replay,
    run_experiment,
    run_route_study,
    validate_invariants,
)
from warehouse_state import ConfigurationError

# Load environment variables
load_dotenv()

logger = logging.getLogger("clusterslot")


def _build_config(config_path, **flags) -> ExperimentConfig:
    """Flags override the config file, which overrides environment defaults"""
    if flags.get("experiments") == ():
        flags["experiments"] = None
    if flags.get("experiments") is not None:
        flags["experiments"] = list(flags["experiments"])
    try:
        if config_path:
            return ExperimentConfig.from_yaml(config_path, **flags)
        return ExperimentConfig(**{key: value for key, value in flags.items() if value is not None})
    except (ValidationError, ConfigurationError, ValueError, OSError) as e:
        raise click.ClickException(f"Invalid configuration: {e}")


def common_options(function):
    """Flags shared by every simulation subcommand"""
    options = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                     help="YAML file with ExperimentConfig fields"),
        click.option("--scale", type=click.Choice(["small", "large", "custom"]), default=None),
        click.option("--iterations", type=int, default=None),
        click.option("--runs", type=int, default=None),
        click.option("--seed-state", type=int, default=None),
        click.option("--seed-orders", type=int, default=None),
        click.option("--seed-kmeans", type=int, default=None),
        click.option("--k", type=int, default=None, help="Number of clusters K"),
        click.option("--features", type=click.Choice(["lines", "centroid"]), default=None,
                     help="Purchase-order features for K-means"),
        click.option("--out", type=click.Path(file_okay=False), default=None),
        click.option("--workers", type=int, default=None),
    ]
    for option in reversed(options):
        function = option(function)
    return function


@click.group()
@click.option("--log-level", type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
              default="INFO", show_default=True)
def cli(log_level):
    """Cluster-driven slotting simulations and picking-route studies."""
    logging.getLogger().setLevel(log_level.upper())


@cli.command()
@common_options
@click.option("--experiment", "experiments", type=click.IntRange(1, 3), multiple=True,
              help="Experiment tag (repeatable): 1 fixed order, 2 fixed-slot noise, 3 random-slot noise")
@click.option("--route-study/--no-route-study", default=None)
@click.option("--exhaustive-limit", type=int, default=None)
@click.option("--segment-capacity", type=int, default=None)
def experiment(config_path, **flags):
    """Run order-noise experiments and write the artifact directory."""
    config = _build_config(config_path, **flags)
    try:
        out = run_experiment(config)
    except (ConfigurationError, ValueError, OSError) as e:
        raise click.ClickException(str(e))
    click.echo(f"Artifacts written to {out}")
    click.echo((Path(out) / "stats.txt").read_text(encoding="utf-8"))


@cli.command("route-study")
@common_options
@click.option("--exhaustive-limit", type=int, default=None)
@click.option("--segment-capacity", type=int, default=None)
def route_study(config_path, **flags):
    """Compare optimal and cluster-decomposed routes for a recurring order."""
    config = _build_config(config_path, **flags)
    try:
        table = run_route_study(config)
    except (ConfigurationError, ValueError, OSError) as e:
        raise click.ClickException(str(e))
    click.echo(table.to_string(index=False))
    click.echo((Path(config.out) / "route_study.txt").read_text(encoding="utf-8"))


@cli.command("replay")
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default=None)
def replay_command(manifest, out):
    """Re-run a manifest and verify every file digest."""
    try:
        target = replay(manifest, out)
    except (ReplayError, ValidationError, ValueError, OSError) as e:
        raise click.ClickException(str(e))
    click.echo(f"Replay reproduced all files in {target}")


@cli.command("validate")
@common_options
@click.option("--experiment", "experiments", type=click.IntRange(1, 3), multiple=True)
def validate(config_path, **flags):
    """Run the invariant suite over short trajectories."""
    config = _build_config(config_path, **flags)
    report = validate_invariants(config)
    click.echo(report.format())
    if not report.ok:
        sys.exit(1)


if __name__ == "__main__":
    cli()
