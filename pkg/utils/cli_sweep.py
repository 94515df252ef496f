import os

import click

from utils.runner import parse_grid, sweep, sweep_mode
from utils.scenario import load_scenario


def run_sweep(scenario, grid_specs, trials, seed=0, out_dir=None, jobs=1):
    """Print one TSV row per grid point; also writes sweep.tsv and sweep.md under out_dir."""
    if not grid_specs:
        raise click.UsageError("at least one --grid key=v1,v2 is required")
    config = load_scenario(scenario)
    grid = parse_grid(list(grid_specs))
    frame = sweep(config, grid, trials, seed, jobs)
    click.echo(frame.to_csv(sep="\t", index=False), nl=False)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        frame.to_csv(os.path.join(out_dir, "sweep.tsv"), sep="\t", index=False)
        with open(os.path.join(out_dir, "sweep.md"), "w", encoding="utf-8") as f:
            f.write(f"# {config.name} ({sweep_mode(grid)})\n\n")
            f.write(frame.to_markdown(index=False) + "\n")
    return 0
