"""Builds simulated worlds from scenarios and runs attacks, sweeps and probe harnesses."""
import ipaddress
import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from utils.analysis import (
    binomial_consistent,
    monte_carlo_vulnerability,
    p1,
    p2,
    required_removals,
    summarize_trials,
)
from utils.attacker import (
    AttackMonitor,
    AttackPlan,
    AttackReport,
    KOD_RETRY_BURST,
    KOD_RETRY_SPACING_MS,
    KOD_RETRY_WAIT_MS,
    Attacker,
    Prober,
    blind_spoof,
    run_attack,
)
from utils.chronos import ChronosClient
from utils.dns import Nameserver, NameserverConfig, Resolver, ResolverConfig
from utils.netsim import Simulator, TraceEvent
from utils.ntp import ClientConfig, NtpClient, NtpServer, ServerConfig
from utils.scenario import SCHEMA, ScenarioConfig, ScenarioValidationError, parse_value, with_overrides

logger = logging.getLogger(__name__)

PROBE_SERVER_BASE = "10.128.0.1"
SNOOP_WARMUP_S = 5
RATE_LABELS = ["kod", "silent_limit", "none"]

CLIENT_PARAMETERS = ("control_exposed", "poll_interval_s", "unanswered_limit", "min_clock", "max_clock",
                     "pool_assoc", "chrony_sources", "cached_fallbacks", "panic_threshold_s")
CHRONOS_PARAMETERS = ("query_interval_s", "generation_queries", "sample_size", "trim", "query_jitter_s")
SERVER_FLAGS = ("stratum", "rate_limit_enabled", "min_interarrival_s", "burst", "penalty_s",
                "trickle_every", "kod_before_silence", "control_exposed")


@dataclass
class World:
    config: ScenarioConfig
    sim: Simulator
    resolver: Resolver
    nameserver: Nameserver
    attacker_host: Any
    victim: Any = None
    servers: Dict[str, NtpServer] = field(default_factory=dict)
    malicious_servers: List[NtpServer] = field(default_factory=list)


def _server_config(config: ScenarioConfig, upstream_ref: str, rng: Optional[np.random.Generator],
                   overrides: Optional[Dict] = None) -> ServerConfig:
    flags = {k: config.servers[k] for k in SERVER_FLAGS}
    if rng is not None:
        population = config.population
        limiting = rng.random() < population["limiting_share"]
        kod_given_limiting = population["kod_share"] / population["limiting_share"] \
            if population["limiting_share"] else 0.0
        flags["rate_limit_enabled"] = bool(limiting)
        flags["kod_before_silence"] = bool(limiting and rng.random() < kod_given_limiting)
        flags["control_exposed"] = bool(rng.random() < population["control_exposed_share"])
    flags.update(overrides or {})
    return ServerConfig(upstream_ref=upstream_ref, hostnames=[config.zone["name"]], **flags)


def build_world(config: ScenarioConfig) -> World:
    """Create every host of the scenario plus one server per zone and malicious address."""
    sim = Simulator(seed=config.seed, default_latency_ms=config.network["latency_ms"],
                    default_loss=config.network["loss"], trace_packets=config.trace_packets)
    for link in config.network["links"]:
        latency = link.get("latency_ms", config.network["latency_ms"])
        loss = link.get("loss", config.network["loss"])
        sim.set_link(link["src"], link["dst"], latency, loss)
        if link.get("symmetric", True):
            sim.set_link(link["dst"], link["src"], latency, loss)

    def add(spec, **kwargs):
        return sim.add_host(spec.name, spec.ip, spec.os, spec.defrag_timeout_s,
                            accept_fragments=spec.accept_fragments, **kwargs)

    resolver_spec = config.role("resolver")
    nameserver_spec = config.role("nameserver")
    attacker_spec = config.role("attacker")
    zone = config.zone

    ns_params = dict(nameserver_spec.params)
    nameserver = Nameserver(add(nameserver_spec), NameserverConfig(
        zone={zone["name"]: list(zone["addresses"])}, answer_ttl=zone["ttl"],
        addresses_per_response=zone["addresses_per_response"], **ns_params,
    ))
    resolver_params = dict(resolver_spec.params)
    if "served_suffixes" in resolver_params:
        resolver_params["served_suffixes"] = tuple(resolver_params["served_suffixes"])
    resolver = Resolver(add(resolver_spec), ResolverConfig(nameserver_ip=nameserver_spec.ip, **resolver_params))
    attacker_host = add(attacker_spec, can_spoof=True)
    world = World(config, sim, resolver, nameserver, attacker_host)

    population_rng = sim.rng("population") if config.population["randomize"] else None
    upstream = ipaddress.IPv4Address(config.servers["upstream_base"])
    declared = {h.ip: h for h in config.hosts if h.role == "ntp_server"}
    for i, address in enumerate(zone["addresses"]):
        spec = declared.pop(address, None)
        host = add(spec) if spec else sim.add_host(f"ntp-{i}", address)
        params = dict(spec.params) if spec else {}
        ref = params.pop("upstream_ref", str(upstream + i))
        world.servers[address] = NtpServer(host, _server_config(config, ref, population_rng, params))
    for spec in declared.values():
        params = dict(spec.params)
        ref = params.pop("upstream_ref", str(upstream + len(world.servers)))
        world.servers[spec.ip] = NtpServer(add(spec), _server_config(config, ref, population_rng, params))

    attack = config.attack
    for i, address in enumerate(attack["malicious_addresses"]):
        host = sim.add_host(f"evil-{i}", address)
        world.malicious_servers.append(NtpServer(host, ServerConfig(
            stratum=1, upstream_ref=attacker_spec.ip, offset_ms=attack["attacker_offset_s"] * 1000,
            rate_limit_enabled=False,
        )))

    client_spec = config.client
    if client_spec is not None:
        params = client_spec.params
        boot_ms = int(params["boot_s"] * 1000)
        host = add(client_spec)
        if params["variant"] == "chronos":
            world.victim = ChronosClient(
                host, resolver_spec.ip, hostname=zone["name"], malicious=set(attack["malicious_addresses"]),
                boot_at_ms=boot_ms, **{k: params[k] for k in CHRONOS_PARAMETERS if k in params},
            )
        else:
            client_config = ClientConfig(
                variant=params["variant"], resolver_ip=resolver_spec.ip, pool_hostnames=[zone["name"]],
                **{k: params[k] for k in CLIENT_PARAMETERS if k in params},
            )
            world.victim = NtpClient(host, client_config, boot_at_ms=boot_ms)
    return world


def make_plan(world: World) -> AttackPlan:
    config = world.config
    attack = config.attack
    victim = world.victim
    params = config.client.params
    if isinstance(victim, NtpClient):
        target = victim.config.association_target
        associations = target if target is not None else config.zone["addresses_per_response"]
        runtime_dns = victim.config.runtime_dns
        query_interval_s = 3600
    else:
        associations = 1
        runtime_dns = False
        query_interval_s = params.get("query_interval_s", 3600)
    start_s = attack["start_s"]
    return AttackPlan(
        kind=attack["kind"],
        resolver_ip=world.resolver.host.ip,
        nameserver_ip=world.nameserver.host.ip,
        client_ip=config.client.ip,
        malicious_addresses=list(attack["malicious_addresses"]),
        qname=config.zone["name"],
        discovery=attack["discovery"],
        attacker_offset_s=attack["attacker_offset_s"],
        start_s=start_s,
        timeout_s=attack.get("timeout_s", config.duration_s - start_s),
        icmp_mtu=attack["icmp_mtu"],
        spoof_rate=attack["spoof_rate"],
        malicious_ttl=attack["malicious_ttl"],
        honest_ttl=config.zone["ttl"],
        addresses_per_response=config.zone["addresses_per_response"],
        oversized_answers=world.resolver.config.permissive_parsing,
        victim_boot_s=params["boot_s"],
        victim_variant=params["variant"],
        victim_runtime_dns=runtime_dns,
        victim_associations=associations,
        poison_round=attack.get("poison_round"),
        query_interval_s=query_interval_s,
        probes=attack["probes"],
        probe_spacing_ms=attack["probe_spacing_ms"],
        slot_limit=attack["slot_limit"],
        defrag_timeout_s=world.resolver.host.os.defrag_timeout_s,
        enumerate_queries=attack["enumerate_queries"],
    )


@dataclass
class RunResult:
    scenario: str
    report: AttackReport
    trace: List[TraceEvent]
    expected: Optional[bool] = None

    @property
    def matches_expectation(self) -> bool:
        return self.expected is None or self.report.success == self.expected

    def summary(self) -> Dict:
        return {"scenario": self.scenario, "expected": self.expected,
                "matches_expectation": self.matches_expectation, **self.report.to_dict()}


def run_scenario(config: ScenarioConfig) -> RunResult:
    """Simulate one attack scenario to its duration or to capture."""
    if config.attack["kind"] == "none":
        raise ScenarioValidationError("scenario defines no attack to run", "attack.kind")
    world = build_world(config)
    plan = make_plan(world)
    attacker = Attacker(world.attacker_host, plan, world.resolver, world.malicious_servers)
    monitor = AttackMonitor(world.sim, attacker, world.victim, world.resolver.host.name)
    report = run_attack(world.sim, attacker, monitor, int(config.duration_s * 1000))
    logger.info("%s: success=%s cause=%s", config.name, report.success, report.cause)
    return RunResult(config.name, report, world.sim.trace, config.expects_success)


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

ANALYSIS_KEYS = set(SCHEMA["properties"]["analysis"]["properties"])


def qualify_key(key: str) -> str:
    """Bare analysis parameters (`m`, `p_rate`) stand for `analysis.<key>`."""
    if "." not in key and key in ANALYSIS_KEYS:
        return f"analysis.{key}"
    return key


def parse_grid(specs: List[str]) -> Dict[str, List[Any]]:
    """`key=v1,v2` or `key=a..b` (inclusive integer range) per entry, in the given order."""
    grid: Dict[str, List[Any]] = {}
    for spec in specs:
        key, sep, values = spec.partition("=")
        if not sep or not key or not values:
            raise ValueError(f"grid entry {spec!r} is not key=v1,v2,...")
        if ".." in values and "," not in values:
            low, _, high = values.partition("..")
            points = list(range(int(low), int(high) + 1))
        else:
            points = [parse_value(v.strip()) for v in values.split(",")]
        grid[qualify_key(key.strip())] = points
    return grid


def grid_points(grid: Dict[str, List[Any]]) -> List[Dict[str, Any]]:
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def sweep_mode(grid: Dict[str, List[Any]]) -> str:
    analysis = [k.startswith("analysis.") for k in grid]
    if analysis and all(analysis):
        return "monte_carlo"
    if any(analysis):
        raise ValueError("cannot mix analysis.* keys with simulation keys in one sweep")
    return "simulation"


def _simulate_trial(config: ScenarioConfig, seed: int) -> Tuple[bool, Optional[int]]:
    trial = with_overrides(config, {"seed": seed, "trace_packets": False})
    report = run_scenario(trial).report
    return report.success, report.duration_ms


def sweep(config: ScenarioConfig, grid: Dict[str, List[Any]], trials: int, seed: int = 0,
          jobs: int = 1) -> pd.DataFrame:
    """One row per grid point, in grid order."""
    points = grid_points(grid)
    children = np.random.SeedSequence(seed).spawn(len(points) * trials)
    seeds = [int(c.generate_state(1)[0]) for c in children]
    rows = []
    if sweep_mode(grid) == "monte_carlo":
        for i, point in enumerate(points):
            analysis = with_overrides(config, point).analysis
            m, scenario = analysis["m"], analysis["scenario"]
            n = analysis.get("n", required_removals(m))
            estimate = monte_carlo_vulnerability(scenario, m, trials, seeds[i * trials], analysis["p_rate"], n, jobs)
            exact = p1(n, analysis["p_rate"]) if scenario == 1 else p2(m, n, analysis["p_rate"])
            rows.append({**point, "n": n, "trials": trials, "successes": estimate.successes,
                         "rate": estimate.estimate, "ci_low": estimate.ci_low, "ci_high": estimate.ci_high,
                         "analytic": exact, "within_ci": estimate.contains(exact)})
        return pd.DataFrame(rows)

    configs = [with_overrides(config, point) for point in points]
    outcomes = Parallel(n_jobs=jobs)(
        delayed(_simulate_trial)(configs[i], seeds[i * trials + t])
        for i in range(len(points)) for t in range(trials)
    )
    for i, point in enumerate(points):
        batch = outcomes[i * trials:(i + 1) * trials]
        rows.append({**point, **summarize_trials([s for s, _ in batch], [d for _, d in batch])})
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# Probe harnesses
# ---------------------------------------------------------------------------

@dataclass
class ProbeResult:
    kind: str
    frame: pd.DataFrame
    summary: Dict[str, Any]
    passed: bool


def _collect(sim: Simulator, generator, sink: List, key: Any):
    def wrapper():
        result = yield from generator
        sink.append((key, result))
    sim.process(wrapper())


def probe_rate_limiting(config: ScenarioConfig) -> ProbeResult:
    """Probe a synthetic server population and score the classifier against its ground truth."""
    probe = config.probe
    count = probe.get("servers", 1000)
    queries = probe.get("queries", 64)
    max_loss = probe.get("max_loss", 0.0)
    world = build_world(with_overrides(config, {"trace_packets": False}))
    sim = world.sim
    prober = Prober(world.attacker_host)
    rng = sim.rng("probe-population")
    population = config.population
    kod_given_limiting = population["kod_share"] / population["limiting_share"] if population["limiting_share"] else 0

    truth: Dict[str, str] = {}
    base = ipaddress.IPv4Address(PROBE_SERVER_BASE)
    for i in range(count):
        address = str(base + i)
        limiting = bool(rng.random() < population["limiting_share"])
        kod = bool(limiting and rng.random() < kod_given_limiting)
        loss = float(rng.uniform(0, max_loss)) if max_loss else 0.0
        host = sim.add_host(f"probe-target-{i}", address)
        sim.set_link(prober.host.ip, address, config.network["latency_ms"], loss)
        sim.set_link(address, prober.host.ip, config.network["latency_ms"], loss)
        flags = {k: config.servers[k] for k in SERVER_FLAGS}
        flags.update(rate_limit_enabled=limiting, kod_before_silence=kod)
        NtpServer(host, ServerConfig(upstream_ref=str(ipaddress.IPv4Address(config.servers["upstream_base"]) + i),
                                     **flags))
        truth[address] = "kod" if kod else ("silent_limit" if limiting else "none")

    kod_retries = probe.get("kod_retries", 1)
    results: List = []
    for address in truth:
        _collect(sim, prober.detect_rate_limiting(address, queries=queries, kod_retries=kod_retries),
                 results, address)
    retry_ms = KOD_RETRY_WAIT_MS + KOD_RETRY_BURST * KOD_RETRY_SPACING_MS + 2000
    sim.run_until(int((queries + 10) * 1000) + kod_retries * retry_ms)

    rows = []
    for address, outcome in sorted(results, key=lambda r: ipaddress.IPv4Address(r[0])):
        rows.append({"server": address, "truth": truth[address], "classification": outcome.classification,
                     "r1": outcome.r1, "r2": outcome.r2, "kod": outcome.kod,
                     "correct": truth[address] == outcome.classification})
    frame = pd.DataFrame(rows)
    if frame.empty:
        return ProbeResult("ratelimit", frame, {"servers": 0, "accuracy": float("nan")}, False)
    confusion = pd.crosstab(frame["truth"], frame["classification"]).reindex(
        index=RATE_LABELS, columns=RATE_LABELS, fill_value=0)
    limiting_truth = frame["truth"] != "none"
    limiting_seen = frame["classification"] != "none"
    accuracy = float(frame["correct"].mean())
    summary = {
        "servers": len(frame),
        "accuracy": accuracy,
        "binary_accuracy": float((limiting_truth == limiting_seen).mean()),
        "true_limiting": int((limiting_truth & limiting_seen).sum()),
        "missed_limiting": int((limiting_truth & ~limiting_seen).sum()),
        "false_limiting": int((~limiting_truth & limiting_seen).sum()),
        "kod_detected": int(frame["kod"].sum()),
        "kod_as_silent": int(confusion.loc["kod", "silent_limit"]),
        "kod_retries": kod_retries,
    }
    return ProbeResult("ratelimit", frame, summary, accuracy >= 0.99)


def _snoop_trial(config: ScenarioConfig, seed: int, names: List[str]) -> Dict[str, Any]:
    world = build_world(with_overrides(config, {"seed": seed, "trace_packets": False}))
    prober = Prober(world.attacker_host)
    start_ms = 0
    if world.victim is not None:
        start_ms = int((config.client.params["boot_s"] + SNOOP_WARMUP_S) * 1000)
    results: List = []

    def delayed_snoop():
        yield world.sim.env.timeout(start_ms)
        return (yield from prober.cache_snoop(world.resolver.host.ip, names,
                                               world.nameserver.config.probe_domain or "probe.test"))

    _collect(world.sim, delayed_snoop(), results, seed)
    world.sim.run_until(start_ms + 60_000)
    return {name: (r.status, r.ttl) for name, r in results[0][1].items()} if results else {}


def probe_cache_snooping(config: ScenarioConfig, jobs: int = 1) -> ProbeResult:
    """Snoop the scenario's resolver over independent trials; cold resolvers must never read as cached."""
    probe = config.probe
    trials = probe.get("trials", 100)
    names = probe.get("names", [config.zone["name"]])
    seeds = [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(config.seed).spawn(trials)]
    outcomes = Parallel(n_jobs=jobs)(delayed(_snoop_trial)(config, s, names) for s in seeds)
    rows = []
    for trial, outcome in enumerate(outcomes):
        for name in names:
            status, ttl = outcome.get(name, ("untestable", None))
            rows.append({"trial": trial, "name": name, "status": status, "ttl": ttl})
    frame = pd.DataFrame(rows, columns=["trial", "name", "status", "ttl"])
    cached = int((frame["status"] == "cached").sum())
    warm = config.client is not None
    summary = {"trials": trials, "names": len(names), "cached": cached,
               "not_cached": int((frame["status"] == "not_cached").sum()),
               "untestable": int((frame["status"] == "untestable").sum()), "warm_resolver": warm}
    passed = cached == len(frame) if warm else cached == 0
    return ProbeResult("snoop", frame, summary, passed)


def probe_blind_spoof(config: ScenarioConfig) -> ProbeResult:
    """Guess the resolver's challenge with non-fragmented spoofed responses."""
    probe = config.probe
    attempts = probe.get("attempts", 100_000)
    per_query = probe.get("per_query", 1000)
    world = build_world(with_overrides(config, {"trace_packets": False}))
    plan = AttackPlan(
        kind="boot_time", resolver_ip=world.resolver.host.ip, nameserver_ip=world.nameserver.host.ip,
        client_ip=world.resolver.host.ip, malicious_addresses=list(config.attack["malicious_addresses"]),
        malicious_ttl=config.attack["malicious_ttl"],
    )
    attacker = Attacker(world.attacker_host, plan, world.resolver)
    results: List = []
    probe_domain = world.nameserver.config.probe_domain or "probe.test"
    _collect(world.sim, blind_spoof(attacker, world.resolver, attempts, per_query, probe_domain), results, 0)
    batches = -(-attempts // per_query)
    world.sim.run_until(batches * 3000 + 10_000)
    successes = results[0][1] if results else 0
    consistent, pvalue = binomial_consistent(successes, attempts, 2 ** -16)
    summary = {"attempts": attempts, "successes": int(successes), "rate": successes / attempts,
               "bound": 2 ** -16, "pvalue": pvalue, "consistent": bool(consistent)}
    return ProbeResult("blind_spoof", pd.DataFrame([summary]), summary, bool(consistent))


def run_probe(config: ScenarioConfig, jobs: int = 1) -> ProbeResult:
    if not config.probe:
        raise ScenarioValidationError("scenario defines no probe", "probe")
    kind = config.probe["kind"]
    if kind == "ratelimit":
        return probe_rate_limiting(config)
    if kind == "snoop":
        return probe_cache_snooping(config, jobs)
    return probe_blind_spoof(config)
