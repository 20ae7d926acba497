import functools
import logging
import sys

import click
from termcolor import colored

from . import __version__
from .config import load_config
from .errors import ConfigError, DedetrError
from .formatter import format_epoch, format_json, format_summary, format_terminal
from .orchestrator import ExperimentOrchestrator
from .selftest import CHECKS, run_selftest

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def parse_seeds(text: str) -> list:
    """"1,2,3" -> [1, 2, 3]."""
    try:
        seeds = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"invalid seed list '{text}'") from exc
    if not seeds:
        raise ConfigError("seed list is empty")
    return seeds


def parse_sweep(text: str) -> list:
    """"start:stop:step" (inclusive stop) -> thresholds rounded to 2 decimals."""
    try:
        start, stop, step = (float(part) for part in text.split(":"))
    except ValueError as exc:
        raise ConfigError(f"invalid sweep '{text}', expected start:stop:step") from exc
    if step <= 0 or not 0.0 <= start <= stop <= 1.0:
        raise ConfigError(f"invalid sweep '{text}'")
    count = int(round((stop - start) / step)) + 1
    return [round(start + i * step, 2) for i in range(count) if start + i * step <= stop + 1e-9]


def handle_errors(fn):
    """Report DedetrError as "Error: ..." on stderr and exit with its code."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except DedetrError as exc:
            click.echo(f"Error: {exc}", err=True)
            sys.exit(exc.exit_code)
    return wrapper


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
@click.version_option(__version__, prog_name="dedetr")
def main(verbose):
    """dedetr: desk-scale detection transformer training and evaluation."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT,
                        stream=sys.stderr)


@main.command()
@click.option("--config", "config_path", type=click.Path(), help="JSON or YAML run config.")
@click.option("--out", "out_dir", type=click.Path(), help="Output directory.")
@handle_errors
def train(config_path, out_dir):
    """Train one model; writes metrics.csv, config.json and checkpoints."""
    config = load_config(config_path)
    outcome = ExperimentOrchestrator(config).train(out_dir)
    for row in outcome.rows:
        click.echo(format_epoch(row))
    click.echo(format_terminal(outcome.final, title=f"Final ({config.config_id})"))
    click.echo(f"checkpoints: {outcome.final_checkpoint}, {outcome.best_checkpoint}")


@main.command(name="eval")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(), required=True,
              help="Checkpoint to evaluate.")
@click.option("--config", "config_path", type=click.Path(),
              help="Run config (defaults to the one embedded in the checkpoint).")
@click.option("--out", "out_dir", type=click.Path(), help="Write eval.json / eval.csv here.")
@click.option("--nms-sweep", "sweep", help='Threshold sweep "start:stop:step", e.g. 0.3:0.9:0.1.')
@click.option("--output", type=click.Choice(["terminal", "json"]), default="terminal",
              help="Output format.")
@handle_errors
def evaluate(checkpoint_path, config_path, out_dir, sweep, output):
    """Evaluate a checkpoint on the held-out scenes."""
    config = load_config(config_path)
    orchestrator = ExperimentOrchestrator(config)
    embedded = config_path is None
    if sweep:
        results = orchestrator.nms_sweep(checkpoint_path, parse_sweep(sweep), out_dir, embedded)
        for threshold, result in results:
            label = "none" if threshold is None else f"{threshold:.2f}"
            click.echo(format_terminal(result, title=f"NMS {label}"))
        return
    result = orchestrator.evaluate_checkpoint(checkpoint_path, out_dir, embedded)
    if output == "json":
        click.echo(format_json(result))
    else:
        click.echo(format_terminal(result))


@main.command()
@click.option("--config", "config_path", type=click.Path(), help="Run config with ablation grid.")
@click.option("--seeds", help='Comma-separated seeds, e.g. "1,2,3".')
@click.option("--out", "out_dir", type=click.Path(), help="Output directory.")
@handle_errors
def ablate(config_path, seeds, out_dir):
    """Train and evaluate every (config, seed) cell of an ablation grid."""
    config = load_config(config_path)
    report = ExperimentOrchestrator(config).ablate(parse_seeds(seeds) if seeds else None, out_dir)
    click.echo(format_summary(report.summary))


@main.command()
@click.option("--check", "names", multiple=True, type=click.Choice(sorted(CHECKS)),
              help="Run only this check (repeatable).")
def selftest(names):
    """Run the oracle self-test suite."""
    results = run_selftest(names)
    for r in results:
        status = colored("PASS", "green") if r.passed else colored("FAIL", "red")
        click.echo(f"{status} {r.name:<24} {r.seconds:6.2f}s  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        click.echo(f"Error: failed properties: {', '.join(failed)}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    main()
