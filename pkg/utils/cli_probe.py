import json
import os

import click

from utils.runner import run_probe
from utils.scenario import load_scenario, with_overrides


def run_probe_scenario(scenario, out_dir=None, seed=None, trials=None, jobs=1):
    """Run the scenario's probe harness; exit 0 when the harness met its target."""
    config = load_scenario(scenario)
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if trials is not None:
        key = {"ratelimit": "probe.servers", "snoop": "probe.trials", "blind_spoof": "probe.attempts"}
        overrides[key[config.probe["kind"]] if config.probe else "probe.trials"] = trials
    if overrides:
        config = with_overrides(config, overrides)
    result = run_probe(config, jobs)

    for key, value in result.summary.items():
        click.echo(f"{key}\t{value}")
    click.echo(f"passed\t{str(result.passed).lower()}")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        result.frame.to_csv(os.path.join(out_dir, f"probe_{result.kind}.tsv"), sep="\t", index=False)
        with open(os.path.join(out_dir, "probe_summary.json"), "w", encoding="utf-8") as f:
            json.dump({"kind": result.kind, "passed": result.passed, **result.summary}, f,
                      sort_keys=True, indent=2, default=str)
            f.write("\n")
    return 0 if result.passed else 1
