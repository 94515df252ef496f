"""Attack timelines and packet counts from a trace.jsonl file."""
import json
import logging
from typing import Iterable, List

import pandas as pd

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["t", "kind", "actor", "detail"]
NO_EVENTS = "no events"


class TraceFormatError(ValueError):
    pass


def parse_trace(lines: Iterable[str]) -> pd.DataFrame:
    """One row per event; blank lines are skipped."""
    records = []
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise TraceFormatError(f"line {number}: {e.msg}") from e
        if not isinstance(record, dict) or any(c not in record for c in TRACE_COLUMNS):
            raise TraceFormatError(f"line {number}: expected keys {TRACE_COLUMNS}")
        if not isinstance(record["detail"], dict):
            raise TraceFormatError(f"line {number}: detail is not an object")
        records.append(record)
    return pd.DataFrame(records, columns=TRACE_COLUMNS)


def load_trace(path: str) -> pd.DataFrame:
    with open(path, encoding="utf-8") as f:
        return parse_trace(f)


def phase_timeline(trace: pd.DataFrame) -> pd.DataFrame:
    phases = trace[trace["kind"] == "attack_phase"]
    rows = []
    for _, event in phases.iterrows():
        detail = dict(event["detail"])
        phase = detail.pop("phase", "?")
        rows.append({
            "time_s": event["t"] / 1000,
            "phase": phase,
            "detail": ", ".join(f"{k}={detail[k]}" for k in sorted(detail)),
        })
    return pd.DataFrame(rows, columns=["time_s", "phase", "detail"])


def packet_counts(trace: pd.DataFrame) -> pd.DataFrame:
    """Packets sent per actor, split into genuine and spoofed."""
    sends = trace[trace["kind"] == "send"]
    if sends.empty:
        return pd.DataFrame(columns=["actor", "genuine", "spoofed"])
    spoofed = sends["detail"].map(lambda d: bool(d.get("spoofed")))
    frame = pd.DataFrame({"actor": sends["actor"], "spoofed": spoofed})
    counts = frame.groupby("actor")["spoofed"].agg(genuine=lambda s: int((~s).sum()), spoofed="sum")
    counts["spoofed"] = counts["spoofed"].astype(int)
    return counts.reset_index().sort_values("actor").reset_index(drop=True)


def kod_counts(trace: pd.DataFrame) -> pd.DataFrame:
    kods = trace[trace["kind"] == "kod_sent"]
    counts = kods.groupby("actor").size().rename("kod").reset_index()
    return counts.rename(columns={"actor": "server"}).sort_values("server").reset_index(drop=True)


def event_counts(trace: pd.DataFrame) -> pd.DataFrame:
    counts = trace.groupby("kind").size().rename("events").reset_index()
    return counts.sort_values("kind").reset_index(drop=True)


def render_report(trace: pd.DataFrame) -> str:
    """Markdown rendering; identical input gives identical text."""
    if trace.empty:
        return NO_EVENTS + "\n"
    sections: List[str] = []
    timeline = phase_timeline(trace)
    sections.append("## Attack timeline\n\n" + (
        timeline.to_markdown(index=False) if not timeline.empty else "no attack phases"))
    kods = kod_counts(trace)
    if not kods.empty:
        sections.append("## Kiss-o'-Death per server\n\n" + kods.to_markdown(index=False))
    packets = packet_counts(trace)
    if not packets.empty:
        sections.append("## Packets sent\n\n" + packets.to_markdown(index=False))
    sections.append("## Events\n\n" + event_counts(trace).to_markdown(index=False))
    end = trace["t"].max() / 1000
    sections.append(f"Trace spans {end:.3f} s with {len(trace)} events.")
    return "\n\n".join(sections) + "\n"
