import pytest

from utils.netsim import TraceEvent, trace_to_jsonl
from utils.report import (
    TraceFormatError,
    kod_counts,
    load_trace,
    packet_counts,
    parse_trace,
    phase_timeline,
    render_report,
)

EVENTS = [
    TraceEvent(0, "send", "attacker", {"spoofed": True, "dst": "192.0.2.10"}),
    TraceEvent(10, "send", "victim", {"spoofed": False, "dst": "192.0.2.10"}),
    TraceEvent(20, "send", "attacker", {"spoofed": False, "dst": "10.0.1.53"}),
    TraceEvent(500, "kod_sent", "ntp-1", {"dst": "10.0.0.123"}),
    TraceEvent(600, "kod_sent", "ntp-0", {"dst": "10.0.0.123"}),
    TraceEvent(700, "kod_sent", "ntp-1", {"dst": "10.0.0.123"}),
    TraceEvent(1500, "attack_phase", "attacker", {"phase": "silence", "server": "192.0.2.10", "outcome": "Silenced"}),
    TraceEvent(2000, "attack_phase", "attacker", {"phase": "poison", "name": "pool.ntp.org"}),
]


@pytest.fixture
def trace():
    return parse_trace(trace_to_jsonl(EVENTS).splitlines())


def test_empty_trace_reports_no_events():
    assert render_report(parse_trace(["", "   "])) == "no events\n"


def test_bad_lines_are_located():
    good = EVENTS[0].to_json()
    with pytest.raises(TraceFormatError, match="line 2"):
        parse_trace([good, "not json"])
    with pytest.raises(TraceFormatError, match="line 1"):
        parse_trace(['{"t": 1, "kind": "send"}'])
    with pytest.raises(TraceFormatError, match="detail"):
        parse_trace(['{"t": 1, "kind": "send", "actor": "a", "detail": 3}'])


def test_phase_timeline(trace):
    timeline = phase_timeline(trace)
    assert list(timeline["phase"]) == ["silence", "poison"]
    assert list(timeline["time_s"]) == [1.5, 2.0]
    assert timeline.iloc[0]["detail"] == "outcome=Silenced, server=192.0.2.10"


def test_kod_counts(trace):
    counts = kod_counts(trace)
    assert counts.to_dict("records") == [{"server": "ntp-0", "kod": 1}, {"server": "ntp-1", "kod": 2}]


def test_packet_counts(trace):
    counts = packet_counts(trace).set_index("actor")
    assert counts.loc["attacker", "genuine"] == 1 and counts.loc["attacker", "spoofed"] == 1
    assert counts.loc["victim", "genuine"] == 1 and counts.loc["victim", "spoofed"] == 0


def test_report_sections_are_stable(trace, tmp_path):
    text = render_report(trace)
    for heading in ("## Attack timeline", "## Kiss-o'-Death per server", "## Packets sent", "## Events"):
        assert heading in text
    assert text.endswith("Trace spans 2.000 s with 8 events.\n")
    path = tmp_path / "trace.jsonl"
    path.write_text(trace_to_jsonl(EVENTS), encoding="utf-8")
    assert render_report(load_trace(str(path))) == text
