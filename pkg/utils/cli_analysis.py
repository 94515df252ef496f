import os

import click
import pandas as pd

from utils.analysis import client_matrix, format_percent_table, runtime_exposed_share, table3, table3_monte_carlo
from utils.chronos import chronos_bound, n_table


def _emit(frame, out_dir, stem, title):
    """TSV on stdout, markdown after it; both copied to out_dir when given."""
    tsv = frame.to_csv(sep="\t", index=False)
    markdown = frame.to_markdown(index=False)
    click.echo(tsv, nl=False)
    click.echo()
    click.echo(markdown)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, f"{stem}.tsv"), "w", encoding="utf-8") as f:
            f.write(tsv)
        with open(os.path.join(out_dir, f"{stem}.md"), "w", encoding="utf-8") as f:
            f.write(f"# {title}\n\n{markdown}\n")


def run_table_probabilities(p_rate, trials=0, seed=0, out_dir=None, jobs=1):
    if trials:
        table = table3_monte_carlo(trials, seed, p_rate, jobs=jobs)
    else:
        table = table3(p_rate)
    _emit(format_percent_table(table.to_frame()), out_dir, "table_probabilities",
          f"Attack probabilities at p_rate={p_rate}")
    return 0


def run_chronos_bound(records, addrs, out_dir=None):
    bound = chronos_bound(records, addrs)
    click.echo(f"max_poison_round\t{bound}")
    _emit(pd.DataFrame(n_table(records, addrs)), out_dir, "chronos_bound",
          f"Pool poisoning with {records} records against {addrs} addresses per response (N <= {bound})")
    return 0


def run_clients(out_dir=None):
    _emit(client_matrix(), out_dir, "clients", "Client matrix")
    click.echo(f"\nrun_time_exposed_share\t{runtime_exposed_share():.3f}")
    return 0
