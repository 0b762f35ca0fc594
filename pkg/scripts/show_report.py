#!/usr/bin/env python3
"""Print a report CSV as one MSE-vs-SNR table per pilot count."""

from collections import defaultdict

import click

from pilotforge.experiment import read_report


@click.command()
@click.argument("csv_path", type=click.Path(exists=True, dir_okay=False))
def main(csv_path):
    table = defaultdict(dict)
    for r in read_report(csv_path):
        table[r.np].setdefault(r.method, {})[r.snr_db] = r.mse_raw
    for np_, methods in sorted(table.items()):
        snrs = sorted({s for m in methods.values() for s in m})
        click.echo(f"\nnp = {np_}")
        click.echo(f"{'method':<20}" + "".join(f"{s:>9g}" for s in snrs))
        for name, row in sorted(methods.items()):
            click.echo(f"{name:<20}" + "".join(f"{row[s]:>9.4f}" if s in row else f"{'-':>9}" for s in snrs))


if __name__ == "__main__":
    main()
