"""Scenario files: TOML parsed, checked against a JSON schema, defaults filled."""
import copy
import ipaddress
import logging
import os
import re
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import jsonschema
import toml

from utils.ntp import ClientVariant

logger = logging.getLogger(__name__)

SCENARIO_DIR = os.path.join(os.path.dirname(__file__), '..', 'data', 'scenarios')
SCENARIO_SUFFIX = ".scenario"

ROLES = ["resolver", "nameserver", "ntp_client", "ntp_server", "attacker"]
CLIENT_VARIANTS = [v.value for v in ClientVariant] + ["chronos"]
OS_PROFILES = ["linux", "windows"]


class ScenarioError(ValueError):
    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        self.key = key
        self.line = line
        where = ""
        if key:
            where += f" at {key}"
        if line:
            where += f" (line {line})"
        super().__init__(f"{message}{where}")


class ScenarioParseError(ScenarioError):
    pass


class ScenarioValidationError(ScenarioError):
    pass


_NUMBER = {"type": "number", "minimum": 0}
_COUNT = {"type": "integer", "minimum": 0}
_PROBABILITY = {"type": "number", "minimum": 0, "maximum": 1}
_IP = {"type": "string", "pattern": r"^\d{1,3}(\.\d{1,3}){3}$"}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["hosts"],
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
        "duration": _NUMBER,
        "expect": {"enum": ["success", "failure"]},
        "trace_packets": {"type": "boolean"},
        "network": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "latency_ms": _COUNT,
                "loss": _PROBABILITY,
                "links": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["src", "dst"],
                        "properties": {"src": _IP, "dst": _IP, "latency_ms": _COUNT, "loss": _PROBABILITY,
                                       "symmetric": {"type": "boolean"}},
                    },
                },
            },
        },
        "hosts": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["role", "ip"],
                "properties": {
                    "role": {"enum": ROLES},
                    "name": {"type": "string"},
                    "ip": _IP,
                    "os": {"enum": OS_PROFILES},
                    "defrag_timeout_s": {"type": "integer", "minimum": 1},
                    "accept_fragments": {"type": "boolean"},
                    "variant": {"enum": CLIENT_VARIANTS},
                    "boot_s": _NUMBER,
                },
            },
        },
        "zone": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "name": {"type": "string"},
                "addresses": {"type": "array", "items": _IP},
                "count": _COUNT,
                "base": _IP,
                "ttl": {"type": "integer", "minimum": 1},
                "addresses_per_response": {"type": "integer", "minimum": 1},
            },
        },
        "servers": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "stratum": {"type": "integer", "minimum": 1, "maximum": 15},
                "rate_limit_enabled": {"type": "boolean"},
                "kod_before_silence": {"type": "boolean"},
                "control_exposed": {"type": "boolean"},
                "min_interarrival_s": _NUMBER,
                "burst": {"type": "integer", "minimum": 1},
                "penalty_s": _COUNT,
                "trickle_every": _COUNT,
                "upstream_base": _IP,
            },
        },
        "attack": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["boot_time", "run_time", "chronos", "none"]},
                "discovery": {"enum": ["control", "refid", "enumerate"]},
                "malicious_addresses": {"type": "array", "items": _IP},
                "malicious_count": _COUNT,
                "malicious_base": _IP,
                "attacker_offset_s": {"type": "integer"},
                "start_s": _NUMBER,
                "timeout_s": _NUMBER,
                "icmp_mtu": {"type": "integer", "minimum": 68, "maximum": 1500},
                "spoof_rate": {"type": "number", "exclusiveMinimum": 0},
                "malicious_ttl": {"type": "integer", "minimum": 1, "maximum": 2 ** 31 - 65537},
                "poison_round": {"type": "integer", "minimum": 0},
                "probes": {"type": "integer", "minimum": 2},
                "probe_spacing_ms": {"type": "integer", "minimum": 1},
                "slot_limit": {"type": "integer", "minimum": 1},
                "enumerate_queries": {"type": "integer", "minimum": 1},
            },
        },
        "population": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "randomize": {"type": "boolean"},
                "limiting_share": _PROBABILITY,
                "kod_share": _PROBABILITY,
                "control_exposed_share": _PROBABILITY,
            },
        },
        "analysis": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "p_rate": _PROBABILITY,
                "m": {"type": "integer", "minimum": 1},
                "n": {"type": "integer", "minimum": 0},
                "scenario": {"enum": [1, 2]},
            },
        },
        "probe": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["ratelimit", "snoop", "blind_spoof"]},
                "servers": {"type": "integer", "minimum": 1},
                "max_loss": _PROBABILITY,
                "queries": {"type": "integer", "minimum": 2},
                "kod_retries": {"type": "integer", "minimum": 0},
                "names": {"type": "array", "items": {"type": "string"}},
                "trials": {"type": "integer", "minimum": 1},
                "attempts": {"type": "integer", "minimum": 1},
                "per_query": {"type": "integer", "minimum": 1},
            },
        },
    },
}

ROLE_PARAMETERS = {
    "resolver": {"honor_rd", "answer_cap", "permissive_parsing", "externally_triggerable",
                 "query_timeout_ms", "max_retries", "served_suffixes"},
    "nameserver": {"ipid_step", "ipid_random", "cross_traffic_rate", "min_pmtu", "pmtu_expiry_s",
                   "probe_domain", "probe_address"},
    "ntp_client": {"variant", "boot_s", "control_exposed", "poll_interval_s", "unanswered_limit",
                   "min_clock", "max_clock", "pool_assoc", "chrony_sources", "cached_fallbacks",
                   "panic_threshold_s", "query_interval_s", "generation_queries", "sample_size",
                   "trim", "query_jitter_s"},
    "ntp_server": {"stratum", "upstream_ref", "offset_ms", "rate_limit_enabled", "min_interarrival_s",
                   "burst", "penalty_s", "trickle_every", "kod_before_silence", "control_exposed"},
    "attacker": set(),
}
COMMON_HOST_KEYS = {"role", "name", "ip", "os", "defrag_timeout_s", "accept_fragments"}

DEFAULTS = {
    "name": "unnamed",
    "description": "",
    "seed": 0,
    "duration": 3600,
    "trace_packets": True,
    "network": {"latency_ms": 10, "loss": 0.0, "links": []},
    "zone": {"name": "pool.ntp.org", "ttl": 150, "addresses_per_response": 4},
    "servers": {
        "stratum": 2, "rate_limit_enabled": True, "kod_before_silence": False, "control_exposed": False,
        "min_interarrival_s": 1.0, "burst": 1, "penalty_s": 300, "trickle_every": 0,
        "upstream_base": "198.51.100.1",
    },
    "attack": {
        "kind": "none", "discovery": "control", "attacker_offset_s": -500, "start_s": 0.0,
        "icmp_mtu": 68, "spoof_rate": 2.0, "malicious_ttl": 90000, "probes": 3,
        "probe_spacing_ms": 250, "slot_limit": 64, "enumerate_queries": 64,
        "malicious_base": "6.6.6.1",
    },
    "population": {"randomize": False, "limiting_share": 0.38, "kod_share": 0.33,
                   "control_exposed_share": 0.053},
    "analysis": {"p_rate": 0.38, "m": 6, "scenario": 2},
}


@dataclass
class HostSpec:
    role: str
    name: str
    ip: str
    os: str = "linux"
    defrag_timeout_s: Optional[int] = None
    accept_fragments: bool = True
    params: Dict[str, Any] = field(default_factory=dict)


@dataclass
class ScenarioConfig:
    name: str
    description: str
    seed: int
    duration_s: float
    expect: Optional[str]
    trace_packets: bool
    network: Dict[str, Any]
    hosts: List[HostSpec]
    zone: Dict[str, Any]
    servers: Dict[str, Any]
    attack: Dict[str, Any]
    population: Dict[str, Any]
    analysis: Dict[str, Any]
    probe: Optional[Dict[str, Any]]
    raw: Dict[str, Any] = field(repr=False, default_factory=dict)
    source: Optional[str] = None

    def role(self, role: str) -> Optional[HostSpec]:
        for host in self.hosts:
            if host.role == role:
                return host
        return None

    @property
    def client(self) -> Optional[HostSpec]:
        return self.role("ntp_client")

    @property
    def expects_success(self) -> Optional[bool]:
        return None if self.expect is None else self.expect == "success"


def _address_range(base: str, count: int) -> List[str]:
    start = ipaddress.IPv4Address(base)
    return [str(start + i) for i in range(count)]


def line_of(text: Optional[str], key_path: str) -> Optional[int]:
    """1-based line where the last key of a dotted path (`hosts[2].variant`) is written."""
    if not text:
        return None
    lines = text.splitlines()
    parts = [p for p in re.split(r"\.(?![^\[]*\])", key_path) if p]
    start, end = 0, len(lines)
    table = []
    for part in parts[:-1]:
        match = re.fullmatch(r"(\w+)\[(\d+)\]", part)
        name = match.group(1) if match else part
        table.append(name)
        header = re.compile(r"^\s*\[\[?\s*" + re.escape(".".join(table)) + r"\s*\]\]?\s*$")
        hits = [i for i in range(start, len(lines)) if header.match(lines[i])]
        if not hits:
            continue
        index = int(match.group(2)) if match else 0
        if index >= len(hits):
            return None
        start = hits[index] + 1
        following = [i for i in range(start, len(lines)) if re.match(r"^\s*\[", lines[i])]
        end = following[0] if following else len(lines)
    if not parts:
        return None
    last = re.sub(r"\[\d+\]$", "", parts[-1])
    if len(parts) == 1:
        first_header = [i for i, line in enumerate(lines) if re.match(r"^\s*\[", line)]
        end = first_header[0] if first_header else len(lines)
        table_header = re.compile(r"^\s*\[\[?\s*" + re.escape(last) + r"\s*\]\]?\s*$")
        for i, line in enumerate(lines):
            if table_header.match(line):
                return i + 1
    assignment = re.compile(r"^\s*" + re.escape(last) + r"\s*=")
    for i in range(start, end):
        if assignment.match(lines[i]):
            return i + 1
    return None


def _format_path(path) -> str:
    out = ""
    for part in path:
        out += f"[{part}]" if isinstance(part, int) else (f".{part}" if out else part)
    return out


def _merge(defaults: Dict, values: Dict) -> Dict:
    merged = copy.deepcopy(defaults)
    for key, value in values.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def validate(raw: Dict[str, Any], text: Optional[str] = None) -> None:
    """Schema and cross-field checks; raises ScenarioValidationError naming the key."""
    errors = sorted(jsonschema.Draft7Validator(SCHEMA).iter_errors(raw),
                    key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        error = errors[0]
        key = _format_path(error.absolute_path) or "(root)"
        raise ScenarioValidationError(error.message, key, line_of(text, key))

    for i, host in enumerate(raw["hosts"]):
        allowed = COMMON_HOST_KEYS | ROLE_PARAMETERS[host["role"]]
        for key in host:
            if key not in allowed:
                path = f"hosts[{i}].{key}"
                raise ScenarioValidationError(
                    f"{key!r} is not a parameter of a {host['role']} host", path, line_of(text, path))

    owners: Dict[str, str] = {}
    for i, host in enumerate(raw["hosts"]):
        label = host.get("name", f"{host['role']}#{i}")
        if host["ip"] in owners:
            path = f"hosts[{i}].ip"
            raise ScenarioValidationError(
                f"duplicate IP {host['ip']} used by {owners[host['ip']]} and {label}", path, line_of(text, path))
        owners[host["ip"]] = label

    for role in ("resolver", "nameserver", "attacker"):
        count = sum(h["role"] == role for h in raw["hosts"])
        if count != 1:
            raise ScenarioValidationError(f"exactly one {role} host required, found {count}", "hosts")
    if sum(h["role"] == "ntp_client" for h in raw["hosts"]) > 1:
        raise ScenarioValidationError("at most one ntp_client host supported", "hosts")

    attack = raw.get("attack", {})
    if attack.get("kind") == "chronos" and "poison_round" not in attack:
        raise ScenarioValidationError("a chronos attack needs poison_round", "attack.poison_round",
                                      line_of(text, "attack"))
    if attack.get("kind", "none") != "none" and not any(h["role"] == "ntp_client" for h in raw["hosts"]):
        raise ScenarioValidationError("an attack needs an ntp_client host", "attack.kind",
                                      line_of(text, "attack.kind"))
    population = raw.get("population", {})
    if population.get("kod_share", 0) > population.get("limiting_share", 1):
        raise ScenarioValidationError("kod_share exceeds limiting_share", "population.kod_share",
                                      line_of(text, "population.kod_share"))


def build_config(raw: Dict[str, Any], text: Optional[str] = None, source: Optional[str] = None) -> ScenarioConfig:
    """Validate a parsed scenario and resolve it into a ScenarioConfig."""
    validate(raw, text)
    values = _merge(DEFAULTS, raw)

    zone = values["zone"]
    if "addresses" not in zone:
        zone["addresses"] = _address_range(zone.get("base", "192.0.2.10"), zone.get("count", 6))
    attack = values["attack"]
    if "malicious_addresses" not in attack:
        attack["malicious_addresses"] = _address_range(attack["malicious_base"], attack.get("malicious_count", 4))

    hosts = []
    for i, host in enumerate(values["hosts"]):
        params = {k: v for k, v in host.items() if k not in COMMON_HOST_KEYS}
        if host["role"] == "ntp_client":
            params.setdefault("variant", "ntpd")
            params.setdefault("boot_s", 0.0)
        hosts.append(HostSpec(
            role=host["role"], name=host.get("name", f"{host['role']}-{i}"), ip=host["ip"],
            os=host.get("os", "linux"), defrag_timeout_s=host.get("defrag_timeout_s"),
            accept_fragments=host.get("accept_fragments", True), params=params,
        ))

    taken = {h.ip: h.name for h in hosts}
    for label, addresses in (("zone", zone["addresses"]), ("attack", attack["malicious_addresses"])):
        for address in addresses:
            if address in taken and taken[address] != label:
                raise ScenarioValidationError(
                    f"duplicate IP {address} used by {taken[address]} and the {label} addresses", label)
            taken[address] = label

    config = ScenarioConfig(
        name=values["name"], description=values["description"], seed=values["seed"],
        duration_s=values["duration"], expect=values.get("expect"), trace_packets=values["trace_packets"],
        network=values["network"], hosts=hosts, zone=zone, servers=values["servers"], attack=attack,
        population=values["population"], analysis=values["analysis"], probe=values.get("probe"),
        raw=raw, source=source,
    )
    logger.debug("scenario %s: %s hosts, %s zone addresses", config.name, len(hosts), len(zone["addresses"]))
    return config


def parse_scenario(text: str, source: Optional[str] = None) -> ScenarioConfig:
    try:
        raw = toml.loads(text)
    except toml.TomlDecodeError as e:
        raise ScenarioParseError(e.msg, line=e.lineno) from e
    return build_config(raw, text, source)


def load_scenario(path: str) -> ScenarioConfig:
    """Load a scenario by path, or by bundled name (`runtime-ntpd`)."""
    if not os.path.exists(path):
        bundled = os.path.join(SCENARIO_DIR, path if path.endswith(SCENARIO_SUFFIX) else path + SCENARIO_SUFFIX)
        if not os.path.exists(bundled):
            raise FileNotFoundError(f"No scenario file found at: {path}")
        path = bundled
    with open(path, encoding="utf-8") as f:
        text = f.read()
    return parse_scenario(text, source=path)


def parse_value(text: str) -> Any:
    """Grid value as TOML would read it; bare words stay strings."""
    try:
        return toml.loads(f"value = {text}")["value"]
    except toml.TomlDecodeError:
        return text


def with_overrides(config: ScenarioConfig, overrides: Dict[str, Any]) -> ScenarioConfig:
    """Copy of `config` with dotted keys replaced.

    `hosts.<role>.<key>` addresses the first host of that role; every other key
    is a table path such as `attack.poison_round` or a top-level key like `seed`.
    """
    raw = copy.deepcopy(config.raw)
    for key, value in overrides.items():
        parts = key.split(".")
        if parts[0] == "hosts" and len(parts) == 3:
            target = next((h for h in raw["hosts"] if h["role"] == parts[1]), None)
            if target is None:
                raise ScenarioValidationError(f"no {parts[1]} host to override", key)
            target[parts[2]] = value
            continue
        node = raw
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ScenarioValidationError("not a table", key)
        node[parts[-1]] = value
    return build_config(raw, source=config.source)


def bundled_scenarios() -> List[str]:
    return sorted(f[:-len(SCENARIO_SUFFIX)] for f in os.listdir(SCENARIO_DIR) if f.endswith(SCENARIO_SUFFIX))
