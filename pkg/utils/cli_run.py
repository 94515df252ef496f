import json
import os

import click
import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from utils.netsim import trace_to_jsonl
from utils.runner import run_scenario
from utils.scenario import load_scenario, with_overrides

EXIT_EXPECTED = 0
EXIT_UNEXPECTED = 1


def _trial(config, seed):
    report = run_scenario(with_overrides(config, {"seed": seed, "trace_packets": False})).report
    return {"seed": seed, "success": report.success, "cause": report.cause, "duration_ms": report.duration_ms}


def write_run_outputs(result, out_dir):
    """Write trace.jsonl and report.json for one run."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "trace.jsonl"), "w", encoding="utf-8") as f:
        f.write(trace_to_jsonl(result.trace))
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as f:
        json.dump(result.summary(), f, sort_keys=True, indent=2)
        f.write("\n")


def run_attack_scenario(scenario, out_dir, seed=None, expect=None, trials=1, jobs=1):
    """Run a scenario; the exit code says whether the outcome was the expected one."""
    config = load_scenario(scenario)
    if seed is not None:
        config = with_overrides(config, {"seed": seed})
    result = run_scenario(config)
    if expect is not None:
        result.expected = expect == "success"
    write_run_outputs(result, out_dir)

    report = result.report
    click.echo("scenario\tsuccess\tcause\tduration_s\texpected")
    duration = "" if report.duration_ms is None else f"{report.duration_ms / 1000:.1f}"
    expected = "" if result.expected is None else ("success" if result.expected else "failure")
    click.echo(f"{config.name}\t{str(report.success).lower()}\t{report.cause or ''}\t{duration}\t{expected}")
    matches = result.matches_expectation

    if trials > 1:
        children = np.random.SeedSequence(config.seed).spawn(trials - 1)
        seeds = [int(c.generate_state(1)[0]) for c in children]
        rows = [{"seed": config.seed, "success": report.success, "cause": report.cause,
                 "duration_ms": report.duration_ms}]
        rows += Parallel(n_jobs=jobs)(delayed(_trial)(config, s) for s in seeds)
        frame = pd.DataFrame(rows)
        frame.to_csv(os.path.join(out_dir, "trials.tsv"), sep="\t", index=False)
        click.echo(f"trials\t{len(frame)}\tsuccesses\t{int(frame['success'].sum())}")
        if result.expected is not None:
            matches = bool((frame["success"] == result.expected).all())

    return EXIT_EXPECTED if matches else EXIT_UNEXPECTED
