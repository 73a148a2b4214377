"""Command line entry point: ``run``, ``bench`` and ``gen``."""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click

from . import harness
from .corpus import generate_synthetic, write_logs


def _ints(value: str) -> list[int]:
    try:
        return [int(v) for v in value.replace(",", " ").split()]
    except ValueError as exc:
        raise click.BadParameter(f"expected integers, got {value!r}") from exc


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more detail (-v info, -vv debug).")
def main(verbose: int) -> None:
    """Collaborative predictive blacklisting experiments."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
def run(config_path: str) -> None:
    """Run the sweep described by a key = value config file."""
    try:
        config = harness.load_config(config_path)
        result = harness.run(config)
    except harness.ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    for idx, reason in result.skipped.items():
        click.echo(f"window {idx} skipped: {reason}", err=True)
    click.echo(f"{len(result.rows)} rows -> {result.results_path}")
    click.echo(f"{len(result.summary)} summary rows -> {result.summary_path}")


@main.command()
@click.option("--protocol", required=True, type=click.Choice(["psi_ca", "psi_dt", "server_aided"]))
@click.option("--sizes", required=True, help="Set sizes per org, e.g. '1000,2000'.")
@click.option("--orgs", required=True, help="Organization counts, e.g. '10,50,100'.")
@click.option("--repeats", default=3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--group", default=None, help="PSI group: x25519, ed25519 or modp2048.")
@click.option("--cluster-size", default=10, show_default=True, help="Server-aided sharing cluster size.")
@click.option("--out", default=None, type=click.Path(dir_okay=False), help="CSV path (stdout if omitted).")
def bench(protocol, sizes, orgs, repeats, seed, group, cluster_size, out) -> None:
    """Time and byte costs of the private protocols; medians over repeats."""
    try:
        rows = harness.bench(protocol, _ints(sizes), _ints(orgs), repeats, seed, group, cluster_size)
    except (harness.ConfigError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    text = harness.bench_csv(rows, out, seed)
    if out is None:
        click.echo(text, nl=False)


@main.command()
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def gen(spec_path: str, out: str) -> None:
    """Generate a synthetic log CSV from a key = value corpus spec."""
    try:
        spec = harness.spec_from_kv(harness.parse_kv(Path(spec_path).read_text()))
    except (harness.ConfigError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    with open(out, "w", newline="") as fh:
        fh.write("date,contributor_id,source_ip\n")
        n = write_logs(generate_synthetic(spec), fh)
    click.echo(f"{n} events -> {out}")


if __name__ == "__main__":
    main()
