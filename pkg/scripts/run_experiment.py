#!/usr/bin/env python3
"""Run gen-data -> select -> train -> eval -> report for every pilot count in a config.

    python scripts/run_experiment.py scripts/desk.cfg
    python scripts/run_experiment.py scripts/acceptance.cfg --out runs/acc
"""

import sys

import click

from pilotforge import cli
from pilotforge.config import load_config


@click.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", default=None, help="Output directory override.")
@click.option("--seed", type=int, default=None)
def main(config, out, seed):
    cfg = load_config(config)
    base = ["--config", config]
    if out:
        base += ["--out", out]
    if seed is not None:
        base += ["--seed", str(seed)]
    steps = [["gen-data"]]
    for n in sorted(set(cfg.np_list) | set(cfg.np_sweep)):
        steps.append(["select", "--np", str(n)])
        steps.append(["train", "--np", str(n), "--pattern", "cae"])
        steps.append(["train", "--np", str(n), "--pattern", "uniform"])
        if n in cfg.np_list:
            for window in ("low", "high"):
                steps.append(["train", "--np", str(n), "--pattern", "uniform", "--snr-window", window])
    steps += [["eval"], ["report"]]
    for step in steps:
        click.echo("$ pilotforge " + " ".join(step), err=True)
        code = cli.run([step[0], *base, *step[1:]])
        if code:
            sys.exit(code)


if __name__ == "__main__":
    main()
