"""Command-line driver: ``pilotforge {gen-data,select,train,eval,report}``.

Exit codes: 0 success, 1 validation error, 2 runtime or numerical error.
"""

from __future__ import annotations

import json
import logging
import sys

import click

from . import experiment as ex
from . import nn as pfnn
from .config import ConfigError, load_config

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


def _config(config_path, seed, out):
    cfg = load_config(config_path)
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if out is not None:
        changes["out_dir"] = out
    return cfg.replace(**changes) if changes else cfg


def common(f):
    f = click.option("--out", "out", type=click.Path(file_okay=False), default=None,
                     help="Output directory (overrides out_dir).")(f)
    f = click.option("--seed", type=int, default=None, help="Seed (overrides the config).")(f)
    f = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                     help="Experiment config file.")(f)
    return f


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def main(verbose):
    """Learned pilot placement and deep channel estimation experiments."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format="%(levelname)s %(message)s")
    pfnn.configure_threads()


@main.command("gen-data")
@common
def gen_data(config_path, seed, out):
    """Generate train/val/test channel datasets."""
    m = ex.cmd_gen_data(_config(config_path, seed, out))
    click.echo(f"manifest sha256 {m['manifest_sha256']}")


@main.command()
@common
@click.option("--np", "np_", type=int, required=True, help="Number of pilots to select.")
def select(config_path, seed, out, np_):
    """Train the Concrete selector and write the pilot pattern."""
    r = ex.cmd_select(_config(config_path, seed, out), np_)
    click.echo(f"pattern {r['pattern']}  mean max probability {r['mean_max_prob']:.4f}  "
               f"distinct subcarriers {r['distinct_subcarriers']}")


@main.command()
@common
@click.option("--np", "np_", type=int, required=True)
@click.option("--pattern", "source", type=click.Choice(ex.PATTERN_SOURCES), default="cae", show_default=True)
@click.option("--snr-window", "window", type=click.Choice(ex.SNR_WINDOWS), default="full", show_default=True)
def train(config_path, seed, out, np_, source, window):
    """Train decoder + SRCNN + DnCNN-B for one pattern and SNR window."""
    r = ex.cmd_train(_config(config_path, seed, out), np_, source, window)
    click.echo(f"pipeline {r['pipeline']}  final train mse {r['history'][-1]['mse']:.5f}")


@main.command("eval")
@common
def eval_(config_path, seed, out):
    """Evaluate all methods on the test split and write the report CSV."""
    path = ex.cmd_eval(_config(config_path, seed, out))
    click.echo(str(path))


@main.command()
@common
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), default=None,
              help="Report CSV (default: <out>/reports/report.csv).")
def report(config_path, seed, out, csv_path):
    """Turn the report CSV into per-figure data files and pattern renders."""
    cfg = _config(config_path, seed, out)
    patterns = sorted((cfg.out / "patterns").glob("*.txt")) if (cfg.out / "patterns").exists() else []
    written = ex.cmd_report(csv_path or ex.report_path(cfg), cfg.out / "reports" / "figures",
                            cfg.sweep_snr_db, patterns)
    click.echo(json.dumps([str(p) for p in written], indent=1))


VALIDATION_ERRORS = (ConfigError, click.UsageError, ex.ReportFormatError, ex.MissingArtifactError, ValueError)
RUNTIME_ERRORS = (FloatingPointError, ArithmeticError, OSError, RuntimeError)


def run(argv=None) -> int:
    try:
        main.main(args=argv, prog_name="pilotforge", standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.Abort:
        return EXIT_RUNTIME
    except VALIDATION_ERRORS as e:
        click.echo(f"error: {e}", err=True)
        return EXIT_VALIDATION
    except RUNTIME_ERRORS as e:
        click.echo(f"error: {e}", err=True)
        return EXIT_RUNTIME
    return EXIT_OK


def entry():
    sys.exit(run())


if __name__ == "__main__":
    entry()
