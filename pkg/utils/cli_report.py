import click

from utils.report import load_trace, render_report


def run_report(trace_path):
    click.echo(render_report(load_trace(trace_path)), nl=False)
    return 0
