"""NTP actors: client variants with association management, and pool servers.

Clients resolve their pool hostnames through the victim resolver, poll every
association once per poll interval and evaluate the round one second later.
Servers answer mode-3 queries with their upstream's address as reference ID,
rate-limit per source, and optionally answer mode-6 control queries.
"""
import json
import logging
from collections import Counter, deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Deque, Dict, List, Optional, Tuple

import numpy as np

from utils.dns import StubResolver
from utils.netsim import Host
from utils.wirefmt import (
    KOD_RATE,
    NTP_MODE_CLIENT,
    NTP_MODE_CONTROL,
    NTP_MODE_SERVER,
    Malformed,
    NtpPacket,
    UdpDatagram,
    bytes_to_ip,
    ip_to_bytes,
    ms_to_ntp,
    ntp_to_ms,
)

logger = logging.getLogger(__name__)

NTP_PORT = 123
ROUND_EVALUATION_DELAY_MS = 1000
UNSYNCED_STRATUM = 16
REFID_INIT = b"INIT"


class NtpError(RuntimeError):
    pass


class BootNoServers(NtpError):
    pass


class ClientVariant(str, Enum):
    NTPD = "ntpd"
    CHRONY = "chrony"
    SYSTEMD_TIMESYNCD = "systemd_timesyncd"
    SNTP_ONESHOT = "sntp_oneshot"
    OPENNTPD = "openntpd"
    NTPCLIENT = "ntpclient"
    ANDROID_SNTP = "android_sntp"


@dataclass(frozen=True)
class VariantTraits:
    label: str
    runtime_dns: bool
    serves_ntp: bool
    usage_share: Optional[float]


# Usage shares among pool.ntp.org clients; systemd-timesyncd is not listed in the survey.
VARIANT_TRAITS: Dict[ClientVariant, VariantTraits] = {
    ClientVariant.NTPD: VariantTraits("NTPd", True, True, 0.264),
    ClientVariant.OPENNTPD: VariantTraits("openntpd", False, False, 0.044),
    ClientVariant.CHRONY: VariantTraits("chrony", True, False, 0.048),
    ClientVariant.SNTP_ONESHOT: VariantTraits("ntpdate", False, False, 0.200),
    ClientVariant.ANDROID_SNTP: VariantTraits("Android", True, False, 0.140),
    ClientVariant.NTPCLIENT: VariantTraits("ntpclient", False, False, 0.012),
    ClientVariant.SYSTEMD_TIMESYNCD: VariantTraits("systemd-timesyncd", True, False, None),
}


@dataclass
class ClientConfig:
    variant: ClientVariant
    resolver_ip: str
    pool_hostnames: List[str] = field(default_factory=lambda: ["pool.ntp.org"])
    poll_interval_s: int = 64
    unanswered_limit: int = 8
    min_clock: int = 3
    max_clock: int = 10
    pool_assoc: int = 4
    chrony_sources: int = 4
    cached_fallbacks: int = 3
    control_exposed: bool = False
    panic_threshold_s: int = 1000
    step_threshold_ms: int = 128
    dns_timeout_ms: int = 5000

    def __post_init__(self):
        self.variant = ClientVariant(self.variant)

    @property
    def traits(self) -> VariantTraits:
        return VARIANT_TRAITS[self.variant]

    @property
    def runtime_dns(self) -> bool:
        return self.traits.runtime_dns

    @property
    def association_target(self) -> Optional[int]:
        """Associations the client keeps; None means every address a lookup returns."""
        if self.variant == ClientVariant.NTPD:
            return self.max_clock - self.pool_assoc
        if self.variant == ClientVariant.CHRONY:
            return self.chrony_sources
        if self.variant == ClientVariant.OPENNTPD:
            return None
        return 1


@dataclass
class Association:
    server_ip: str
    origin: str = "pool_dns"
    unanswered: int = 0
    state: str = "active"
    last_poll: Optional[int] = None
    outstanding: Optional[int] = None
    kod_count: int = 0

    @property
    def active(self) -> bool:
        return self.state == "active"


@dataclass
class ClientClock:
    offset: int = 0
    step_threshold: int = 128
    ever_set: bool = False


def measured_offset(t1: int, t2: int, t3: int, t4: int) -> float:
    return ((t2 - t1) + (t3 - t4)) / 2


def _ip_sort_key(address: str) -> bytes:
    return ip_to_bytes(address)


class NtpClient:
    """One NTP client process; behaviour on failure depends on its variant."""

    def __init__(self, host: Host, config: ClientConfig, boot_at_ms: int = 0):
        self.host = host
        self.sim = host.sim
        self.config = config
        self.clock = ClientClock(step_threshold=config.step_threshold_ms)
        self.associations: List[Association] = []
        self.fallbacks: List[str] = []
        self.booted = False
        self.exited = False
        self.target_reached = False
        self.system_peer: Optional[str] = None
        self.system_stratum = UNSYNCED_STRATUM
        self.last_error: Optional[NtpError] = None
        self.stub = StubResolver(host, config.resolver_ip, config.dns_timeout_ms)
        self._round: Dict[str, Tuple[float, int]] = {}
        self.port = NTP_PORT if config.traits.serves_ntp else host.ephemeral_port()
        host.bind(self.port, self._on_datagram)
        self.sim.schedule(boot_at_ms, self.boot)

    @property
    def name(self) -> str:
        return self.host.name

    @property
    def active_associations(self) -> List[Association]:
        return [a for a in self.associations if a.active]

    def local_time(self) -> int:
        return self.sim.now + self.clock.offset

    # -- boot and polling -----------------------------------------------------

    def boot(self) -> None:
        """Resolve the configured hostnames and start the poll loop."""
        self.booted = True
        logger.info("%s: booting as %s", self.name, self.config.variant.value)
        self._resolve_all()
        self.sim.process(self._poll_loop())

    def _poll_loop(self):
        # first tick once the boot lookups had time to complete
        yield self.sim.env.timeout(2 * ROUND_EVALUATION_DELAY_MS)
        while not self.exited:
            self.poll_tick()
            yield self.sim.env.timeout(self.config.poll_interval_s * 1000)

    def poll_tick(self) -> None:
        if self.exited:
            return
        variant = self.config.variant
        if variant == ClientVariant.ANDROID_SNTP:
            self._resolve(self.config.pool_hostnames[0], self._on_android_answer)
        else:
            if not self.associations and self._dns_in_flight == 0:
                self._resolve_all()
            elif variant == ClientVariant.NTPD and not self.target_reached and self._dns_in_flight == 0:
                self._resolve_all()
            for assoc in self.active_associations:
                self._send_poll(assoc)
        self.sim.schedule(self.sim.now + ROUND_EVALUATION_DELAY_MS, self._evaluate_round)

    def _send_poll(self, assoc: Association) -> None:
        xmit = ms_to_ntp(self.local_time())
        assoc.outstanding = xmit
        assoc.last_poll = self.sim.now
        request = NtpPacket(mode=NTP_MODE_CLIENT, xmit_ts=xmit)
        self.host.send_udp(assoc.server_ip, self.port, NTP_PORT, request.encode())

    def _evaluate_round(self) -> None:
        responses, self._round = self._round, {}
        removed = 0
        for assoc in self.active_associations:
            if assoc.server_ip in responses or assoc.last_poll is None:
                continue
            assoc.unanswered += 1
            if assoc.unanswered >= self.config.unanswered_limit:
                assoc.state = "demobilized"
                assoc.outstanding = None
                removed += 1
                self.sim.emit("assoc_demobilized", self.name, server=assoc.server_ip,
                              unanswered=assoc.unanswered)
        if responses:
            self.clock_update(responses)
            if self.config.variant == ClientVariant.SNTP_ONESHOT:
                self.exited = True
                logger.info("%s: time set once, exiting", self.name)
                return
        if removed:
            self._replace(removed)
        elif (self.config.variant == ClientVariant.NTPD and self.target_reached
              and len(self.active_associations) < self.config.min_clock and self._dns_in_flight == 0):
            self._resolve_all()

    def _replace(self, removed: int) -> None:
        variant = self.config.variant
        active = len(self.active_associations)
        if variant == ClientVariant.NTPD:
            if active < self.config.min_clock and self._dns_in_flight == 0:
                self._resolve_all()
        elif variant == ClientVariant.CHRONY:
            self._resolve_all()
        elif variant == ClientVariant.SYSTEMD_TIMESYNCD:
            if active:
                return
            if self.fallbacks:
                self._mobilize([self.fallbacks.pop(0)], origin="configured")
            else:
                self._resolve_all()
        elif not self.config.runtime_dns and active == 0:
            logger.warning("%s: all servers unreachable and %s never re-resolves",
                           self.name, variant.value)

    # -- DNS ------------------------------------------------------------------

    def _resolve_all(self) -> None:
        for hostname in self.config.pool_hostnames:
            self._resolve(hostname, self._on_pool_answer)

    def _resolve(self, hostname: str, on_answer: Callable[[List[str]], None]) -> None:
        self.stub.query(hostname, on_answer)

    @property
    def dns_queries(self) -> int:
        return self.stub.queries

    @property
    def _dns_in_flight(self) -> int:
        return self.stub.in_flight

    def _on_pool_answer(self, addresses: List[str]) -> None:
        if not addresses:
            if not self.associations:
                self.last_error = BootNoServers(f"{self.name}: no addresses for {self.config.pool_hostnames}")
                logger.warning("%s", self.last_error)
            return
        if self.config.variant == ClientVariant.SYSTEMD_TIMESYNCD:
            if self.active_associations:
                return
            self._mobilize(addresses[:1])
            self.fallbacks = list(addresses[1:1 + self.config.cached_fallbacks])
            return
        self._mobilize(addresses)

    def _on_android_answer(self, addresses: List[str]) -> None:
        if not addresses:
            return
        current = self.active_associations
        if current and current[0].server_ip == addresses[0]:
            assoc = current[0]
        else:
            for old in current:
                old.state = "demobilized"
                old.outstanding = None
            assoc = self._mobilize(addresses[:1])[0]
        self._send_poll(assoc)

    def _mobilize(self, addresses: List[str], origin: str = "pool_dns") -> List[Association]:
        target = self.config.association_target
        in_use = {a.server_ip for a in self.active_associations}
        added = []
        for address in addresses:
            if target is not None and len(in_use) >= target:
                break
            if address in in_use:
                continue
            assoc = Association(address, origin=origin)
            self.associations.append(assoc)
            in_use.add(address)
            added.append(assoc)
            self.sim.emit("assoc_mobilized", self.name, server=address, origin=origin)
        if target is None or len(in_use) >= target:
            self.target_reached = True
        return added

    # -- time -----------------------------------------------------------------

    def clock_update(self, responses: Dict[str, Tuple[float, int]]) -> int:
        """Move the clock by the median offered offset; returns the new offset."""
        offsets = np.array([offset for offset, _ in responses.values()], dtype=float)
        median = float(np.median(offsets))
        peer = min(responses, key=lambda ip: (abs(responses[ip][0] - median), _ip_sort_key(ip)))
        self.system_peer = peer
        self.system_stratum = min(UNSYNCED_STRATUM, responses[peer][1] + 1)

        if self.clock.ever_set and abs(median) > self.config.panic_threshold_s * 1000:
            logger.warning("%s: offset %.0f ms exceeds panic threshold, ignored", self.name, median)
            return self.clock.offset
        before = self.clock.offset
        self.clock.offset = before + int(round(median))
        self.clock.ever_set = True
        if self.clock.offset != before:
            self.sim.emit("clock_step", self.name, offset_from=before, offset_to=self.clock.offset,
                          step=abs(self.clock.offset - before) > self.clock.step_threshold,
                          sources=len(responses), peer=peer)
        return self.clock.offset

    # -- packets --------------------------------------------------------------

    def _on_datagram(self, datagram: UdpDatagram, src_ip: str) -> None:
        try:
            packet = NtpPacket.decode(datagram.payload)
        except Malformed as e:
            self.sim.emit("drop", self.name, reason="malformed_ntp", error=str(e), src=src_ip)
            return
        if packet.mode == NTP_MODE_SERVER:
            self._on_response(packet, src_ip)
        elif packet.mode == NTP_MODE_CLIENT and self.config.traits.serves_ntp:
            reply = self._serve(packet)
            self.host.send_udp(src_ip, self.port, datagram.src_port, reply.encode())
        elif packet.mode == NTP_MODE_CONTROL and self.config.control_exposed:
            dump = {"hostnames": list(self.config.pool_hostnames),
                    "peers": [a.server_ip for a in self.active_associations]}
            reply = NtpPacket(mode=NTP_MODE_CONTROL, extension=json.dumps(dump, sort_keys=True).encode())
            self.host.send_udp(src_ip, self.port, datagram.src_port, reply.encode())

    def _on_response(self, packet: NtpPacket, src_ip: str) -> None:
        assoc = next((a for a in self.active_associations
                      if a.server_ip == src_ip and a.outstanding == packet.orig_ts), None)
        if assoc is None:
            self.sim.emit("drop", self.name, reason="unexpected_ntp_response", src=src_ip)
            return
        if packet.is_kod:
            assoc.kod_count += 1
            return
        t4 = self.local_time()
        offset = measured_offset(ntp_to_ms(packet.orig_ts), ntp_to_ms(packet.recv_ts),
                                 ntp_to_ms(packet.xmit_ts), t4)
        assoc.unanswered = 0
        assoc.outstanding = None
        self._round[src_ip] = (offset, packet.stratum)

    def _serve(self, request: NtpPacket) -> NtpPacket:
        now = ms_to_ntp(self.local_time())
        synced = self.system_peer is not None
        return NtpPacket(
            mode=NTP_MODE_SERVER,
            stratum=self.system_stratum if synced else UNSYNCED_STRATUM,
            reference_id=ip_to_bytes(self.system_peer) if synced else REFID_INIT,
            orig_ts=request.xmit_ts, recv_ts=now, xmit_ts=now,
        )


class RateVerdict(str, Enum):
    RESPOND = "respond"
    LIMIT_START = "limit_start"
    LIMITED = "limited"


@dataclass
class RateLimiter:
    """Sliding-window limiter per source address with a penalty period."""

    window_ms: int = 1000
    burst: int = 1
    penalty_ms: int = 300_000
    trickle_every: int = 0
    _history: Dict[str, Deque[int]] = field(default_factory=dict)
    _penalty_until: Dict[str, int] = field(default_factory=dict)
    _silenced: Counter = field(default_factory=Counter)

    def check(self, source: str, now_ms: int) -> RateVerdict:
        history = self._history.setdefault(source, deque())
        history.append(now_ms)
        while history and history[0] <= now_ms - self.window_ms:
            history.popleft()
        over = len(history) > self.burst
        in_penalty = self._penalty_until.get(source, -1) > now_ms
        if over:
            self._penalty_until[source] = now_ms + self.penalty_ms
        if not in_penalty:
            if not over:
                return RateVerdict.RESPOND
            self._silenced[source] = 0
            return RateVerdict.LIMIT_START
        self._silenced[source] += 1
        if self.trickle_every and self._silenced[source] % self.trickle_every == 0:
            return RateVerdict.RESPOND
        return RateVerdict.LIMITED

    def is_limiting(self, source: str, now_ms: int) -> bool:
        return self._penalty_until.get(source, -1) > now_ms


@dataclass
class ServerConfig:
    stratum: int = 2
    upstream_ref: str = "192.0.2.1"
    offset_ms: int = 0
    rate_limit_enabled: bool = True
    min_interarrival_s: float = 1.0
    burst: int = 1
    penalty_s: int = 300
    trickle_every: int = 0
    kod_before_silence: bool = False
    control_exposed: bool = False
    hostnames: List[str] = field(default_factory=list)


class NtpServer:
    """Pool server (or the attacker's time source) listening on port 123."""

    def __init__(self, host: Host, config: ServerConfig):
        self.host = host
        self.sim = host.sim
        self.config = config
        self.limiter: Optional[RateLimiter] = None
        if config.rate_limit_enabled:
            self.limiter = RateLimiter(
                window_ms=int(config.min_interarrival_s * 1000), burst=config.burst,
                penalty_ms=config.penalty_s * 1000, trickle_every=config.trickle_every,
            )
        self.requests_seen: Counter = Counter()
        self.observers: List[Callable[[str, NtpPacket], None]] = []
        host.bind(NTP_PORT, self._on_datagram)

    @property
    def name(self) -> str:
        return self.host.name

    def handle(self, packet: NtpPacket, src_ip: str) -> Optional[NtpPacket]:
        """Reply, KoD or None (silence) for one request from `src_ip`."""
        now = self.sim.now
        if packet.mode == NTP_MODE_CONTROL:
            if not self.config.control_exposed:
                return None
            dump = {"hostnames": list(self.config.hostnames), "peers": [self.config.upstream_ref]}
            return NtpPacket(mode=NTP_MODE_CONTROL, extension=json.dumps(dump, sort_keys=True).encode())
        if packet.mode != NTP_MODE_CLIENT:
            return None

        self.requests_seen[src_ip] += 1
        for observer in self.observers:
            observer(src_ip, packet)
        if self.limiter is not None:
            verdict = self.limiter.check(src_ip, now)
            if verdict == RateVerdict.LIMIT_START and self.config.kod_before_silence:
                self.sim.emit("kod_sent", self.name, dst=src_ip)
                return NtpPacket(mode=NTP_MODE_SERVER, stratum=0, reference_id=KOD_RATE,
                                 orig_ts=packet.xmit_ts)
            if verdict != RateVerdict.RESPOND:
                self.sim.emit("rate_limited", self.name, src=src_ip)
                return None

        timestamp = ms_to_ntp(now + self.config.offset_ms)
        return NtpPacket(
            mode=NTP_MODE_SERVER, stratum=self.config.stratum,
            reference_id=ip_to_bytes(self.config.upstream_ref),
            ref_ts=timestamp, orig_ts=packet.xmit_ts, recv_ts=timestamp, xmit_ts=timestamp,
        )

    def _on_datagram(self, datagram: UdpDatagram, src_ip: str) -> None:
        try:
            packet = NtpPacket.decode(datagram.payload)
        except Malformed as e:
            self.sim.emit("drop", self.name, reason="malformed_ntp", error=str(e), src=src_ip)
            return
        reply = self.handle(packet, src_ip)
        if reply is not None:
            self.host.send_udp(src_ip, NTP_PORT, datagram.src_port, reply.encode())


def reference_address(packet: NtpPacket) -> Optional[str]:
    """Upstream address leaked by a synced server's reply, None for KoD or unsynced replies."""
    if packet.is_kod or packet.stratum in (0, UNSYNCED_STRATUM) or packet.reference_id == REFID_INIT:
        return None
    return bytes_to_ip(packet.reference_id)
