import logging
import os
import sys

import click

from utils.cli_analysis import run_chronos_bound, run_clients, run_table_probabilities
from utils.cli_probe import run_probe_scenario
from utils.cli_report import run_report
from utils.cli_run import run_attack_scenario
from utils.cli_sweep import run_sweep
from utils.analysis import P_RATE


# '''
# root _____________
#         |----------app.py
#         |__________utils
#             |------wirefmt.py          # packets, checksums, fragments
#             |------netsim.py           # hosts, links, event calendar, trace
#             |------dns.py              # resolver, nameserver, stub
#             |------ntp.py              # clients, servers, rate limiting
#             |------chronos.py          # pool generation and selection
#             |------attacker.py         # off-path attacker and probers
#             |------analysis.py         # probabilities, Monte Carlo
#             |------scenario.py         # scenario files
#             |------runner.py           # worlds, sweeps, probe harnesses
#             |------report.py           # trace timelines
#             |------cli_run.py / cli_sweep.py / cli_report.py
#             |------cli_analysis.py / cli_probe.py
# '''

EXIT_ERROR = 2
LOG_LEVELS = {
    "debug": logging.DEBUG,
    "info": logging.INFO,
    "warning": logging.WARNING,
    "error": logging.ERROR,
}


def configure_logging():
    """Log to stderr at the level named by NPL_LOG (default warning)."""
    level = LOG_LEVELS.get(os.environ.get("NPL_LOG", "warning").strip().lower(), logging.WARNING)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s", force=True)


def _finish(fn, *args, **kwargs):
    try:
        code = fn(*args, **kwargs)
    except click.UsageError:
        raise
    except Exception as e:
        logging.getLogger(__name__).debug("command failed", exc_info=True)
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_ERROR)
    sys.exit(code)


@click.group()
def main():
    """Simulate off-path NTP time-shifting attacks through DNS cache poisoning."""
    configure_logging()


@main.command()
@click.argument("scenario")
@click.option("--out", "out_dir", default="out", show_default=True, help="Directory for trace.jsonl and report.json.")
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
@click.option("--expect", type=click.Choice(["success", "failure"]), default=None, help="Override the expected outcome.")
@click.option("--trials", type=int, default=1, show_default=True)
@click.option("--jobs", type=int, default=1, show_default=True)
def run(scenario, out_dir, seed, expect, trials, jobs):
    """Run one attack scenario (file path or bundled name)."""
    _finish(run_attack_scenario, scenario, out_dir, seed, expect, trials, jobs)


@main.command()
@click.argument("scenario")
@click.option("--grid", "grid", multiple=True, help="key=v1,v2 or key=a..b; repeatable.")
@click.option("--trials", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", default=None)
@click.option("--jobs", type=int, default=1, show_default=True)
def sweep(scenario, grid, trials, seed, out_dir, jobs):
    """Sweep scenario parameters; analysis.* keys run the Monte Carlo model."""
    _finish(run_sweep, scenario, grid, trials, seed, out_dir, jobs)


@main.command()
@click.argument("trace", type=click.Path())
def report(trace):
    """Render the attack timeline of a trace.jsonl."""
    _finish(run_report, trace)


@main.command("table-probabilities")
@click.option("--p-rate", type=float, default=P_RATE, show_default=True)
@click.option("--trials", type=int, default=0, show_default=True, help="Monte Carlo trials per row; 0 for analytic only.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", default=None)
@click.option("--jobs", type=int, default=1, show_default=True)
def table_probabilities(p_rate, trials, seed, out_dir, jobs):
    """Probability that a client with m associations can be attacked."""
    _finish(run_table_probabilities, p_rate, trials, seed, out_dir, jobs)


@main.command("chronos-bound")
@click.option("--records", type=int, default=89, show_default=True)
@click.option("--addrs", type=int, default=4, show_default=True)
@click.option("--out", "out_dir", default=None)
def chronos_bound(records, addrs, out_dir):
    """Latest poisoning round that still captures a Chronos pool."""
    _finish(run_chronos_bound, records, addrs, out_dir)


@main.command()
@click.argument("scenario")
@click.option("--seed", type=int, default=None)
@click.option("--trials", type=int, default=None, help="Servers, trials or attempts, depending on the probe.")
@click.option("--out", "out_dir", default=None)
@click.option("--jobs", type=int, default=1, show_default=True)
def probe(scenario, seed, trials, out_dir, jobs):
    """Run a scenario's rate-limit, cache-snoop or blind-spoof probe."""
    _finish(run_probe_scenario, scenario, out_dir, seed, trials, jobs)


@main.command()
@click.option("--out", "out_dir", default=None)
def clients(out_dir):
    """Client variants, their exposure and the removals a run-time attack needs."""
    _finish(run_clients, out_dir)


if __name__ == "__main__":
    main()
