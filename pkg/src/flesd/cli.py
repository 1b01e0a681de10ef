"""Command-line entry points.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import json
import sys

import click

from .data import load_csv_dataset, split_dataset
from .encoder import load_params
from .errors import ConfigError, DataFormatError, SimError
from .federation import comm_cost_check
from .probe import ProbeConfig, linear_probe
from .runner import partition_report, run_experiment


def _fail(exc: Exception) -> None:
    click.echo(f"error: {exc}", err=True)
    code = 2 if isinstance(exc, (ConfigError, DataFormatError)) else 1
    sys.exit(code)


@click.group()
def main():
    """Federated representation-learning simulator."""


@main.command("run")
@click.option("--config", "config_path", required=True,
              type=click.Path(), help="experiment config (JSON)")
@click.option("--seed", type=int, default=None,
              help="override the federation seed")
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="output directory (default: ./results)")
def run_cmd(config_path: str, seed: int | None, out_dir: str | None):
    """Run the full experiment grid and write metrics files."""
    try:
        info = run_experiment(config_path, seed_override=seed, out_dir=out_dir)
    except SimError as exc:
        _fail(exc)
    click.echo(json.dumps(info, indent=2, sort_keys=True))


@main.command("probe")
@click.option("--weights", "weights_path", required=True, type=click.Path(),
              help="encoder snapshot file")
@click.option("--data", "data_path", required=True, type=click.Path(),
              help="CSV dataset (features then label per row)")
@click.option("--labels-in-last-column", is_flag=True, default=True,
              help="confirm the CSV layout (features..., label)")
@click.option("--epochs", type=int, default=100)
@click.option("--train-fraction", type=float, default=0.8)
@click.option("--seed", type=int, default=0)
def probe_cmd(weights_path: str, data_path: str, labels_in_last_column: bool,
              epochs: int, train_fraction: float, seed: int):
    """Linear-probe a stored encoder on a CSV dataset."""
    try:
        if not labels_in_last_column:
            raise ConfigError("only the labels-in-last-column layout is "
                              "supported")
        params = load_params(weights_path)
        ds = load_csv_dataset(data_path)
        cfg = ProbeConfig(epochs=epochs, train_fraction=train_fraction,
                          seed=seed)
        train, test = split_dataset(ds, cfg.train_fraction, cfg.seed)
        acc = linear_probe(params, train, test, cfg)
    except FileNotFoundError as exc:
        _fail(ConfigError(str(exc)))
    except SimError as exc:
        _fail(exc)
    click.echo(json.dumps({"accuracy": acc}))


@main.command("partition-report")
@click.option("--config", "config_path", required=True, type=click.Path())
def partition_report_cmd(config_path: str):
    """Print per-shard class histograms without training."""
    try:
        report = partition_report(config_path)
    except SimError as exc:
        _fail(exc)
    click.echo(json.dumps(report, indent=2, sort_keys=True))


@main.command("comm-check")
@click.option("--n", "d_pub_size", required=True, type=int,
              help="public dataset size")
@click.option("--dim", required=True, type=int, help="representation dim")
@click.option("--params", "param_count", required=True, type=int,
              help="encoder parameter count")
@click.option("--omega", required=True, type=float,
              help="similarity-route communication frequency")
@click.option("--omega-prime", required=True, type=float,
              help="weight-route communication frequency")
def comm_check_cmd(d_pub_size: int, dim: int, param_count: int, omega: float,
                   omega_prime: float):
    """Compare per-client transfer volumes of the two aggregation routes."""
    try:
        result = comm_cost_check(omega, omega_prime, d_pub_size, dim,
                                 param_count)
    except SimError as exc:
        _fail(exc)
    click.echo(json.dumps(result, sort_keys=True))


if __name__ == "__main__":
    main()
