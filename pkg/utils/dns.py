"""Victim recursive resolver and rotating pool nameserver."""
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from utils.netsim import Host
from utils.wirefmt import (
    DNS_TYPE_A,
    RCODE_NOERROR,
    RCODE_NXDOMAIN,
    RCODE_REFUSED,
    RCODE_SERVFAIL,
    DnsMessage,
    DnsQuestion,
    IcmpFragNeeded,
    Ipv4Packet,
    Malformed,
    ResourceRecord,
    UdpDatagram,
)

logger = logging.getLogger(__name__)

DNS_PORT = 53
DEFAULT_ANSWER_TTL = 150
DEFAULT_ADDRESSES_PER_RESPONSE = 4
DEFAULT_ANSWER_CAP = 89


@dataclass
class ResolverConfig:
    nameserver_ip: str
    honor_rd: bool = True
    answer_cap: int = DEFAULT_ANSWER_CAP
    served_suffixes: Optional[Tuple[str, ...]] = None
    query_timeout_ms: int = 2000
    max_retries: int = 2
    permissive_parsing: bool = False
    externally_triggerable: bool = False


@dataclass
class CacheEntry:
    records: Tuple[ResourceRecord, ...]
    expiry_ms: int

    def remaining_ttl(self, now_ms: int) -> int:
        return max(0, (self.expiry_ms - now_ms) // 1000)

    @property
    def addresses(self) -> List[str]:
        return [r.address for r in self.records if r.rtype == DNS_TYPE_A]


@dataclass
class Waiter:
    ip: str
    port: int
    txid: int
    rd: bool


@dataclass
class PendingQuery:
    qname: str
    qtype: int
    waiters: List[Waiter] = field(default_factory=list)
    src_port: int = 0
    txid: int = 0
    attempt: int = 0


def _name_in(name: str, suffix: str) -> bool:
    return name == suffix or name.endswith("." + suffix)


class Resolver:
    """Caching recursive resolver guarded only by source port and TXID randomisation."""

    def __init__(self, host: Host, config: ResolverConfig):
        self.host = host
        self.sim = host.sim
        self.config = config
        self.cache: Dict[Tuple[str, int], CacheEntry] = {}
        self.pending: Dict[Tuple[int, int], PendingQuery] = {}
        self._inflight: Dict[Tuple[str, int], PendingQuery] = {}
        self.port_rng = self.sim.rng(f"resolver-port:{host.name}")
        self.txid_rng = self.sim.rng(f"resolver-txid:{host.name}")
        if config.permissive_parsing:
            host.trim_udp = False
        host.bind(DNS_PORT, self._on_client_datagram)

    # -- cache ----------------------------------------------------------------

    def lookup(self, qname: str, qtype: int = DNS_TYPE_A) -> Optional[CacheEntry]:
        """Fresh cache entry for (qname, qtype); expired entries are dropped."""
        key = (qname.lower(), qtype)
        entry = self.cache.get(key)
        if entry is not None and entry.expiry_ms <= self.sim.now:
            del self.cache[key]
            return None
        return entry

    # -- client side ----------------------------------------------------------

    def _on_client_datagram(self, datagram: UdpDatagram, src_ip: str) -> None:
        try:
            query = DnsMessage.decode(datagram.payload)
        except Malformed as e:
            self.sim.emit("drop", self.host.name, reason="malformed_dns", error=str(e), src=src_ip)
            return
        self.handle_query(query, src_ip, datagram.src_port)

    def handle_query(self, query: DnsMessage, client_ip: str, client_port: int) -> None:
        if query.qr or query.question is None:
            self.sim.emit("drop", self.host.name, reason="not_a_query", src=client_ip)
            return
        question = query.question
        waiter = Waiter(client_ip, client_port, query.txid, query.rd)
        suffixes = self.config.served_suffixes
        if suffixes is not None and not any(_name_in(question.qname, s) for s in suffixes):
            self._answer(waiter, question, RCODE_REFUSED, ())
            return

        entry = self.lookup(question.qname, question.qtype)
        if entry is not None:
            self.sim.emit("cache_hit", self.host.name, name=question.qname, rd=query.rd,
                          ttl=entry.remaining_ttl(self.sim.now), addresses=entry.addresses)
            self._answer(waiter, question, RCODE_NOERROR, entry.records, entry)
        elif query.rd or not self.config.honor_rd:
            self._recurse(question, waiter)
        else:
            self._answer(waiter, question, RCODE_NOERROR, ())

    def trigger(self, qname: str, qtype: int = DNS_TYPE_A) -> bool:
        """Start a recursion on behalf of some other local service; False if already cached."""
        if self.lookup(qname, qtype) is not None:
            return False
        self._recurse(DnsQuestion(qname, qtype), None)
        return True

    def _answer(self, waiter: Optional[Waiter], question: DnsQuestion, rcode: int,
                records: Sequence[ResourceRecord], entry: Optional[CacheEntry] = None) -> None:
        if waiter is None:
            return
        if entry is not None:
            ttl = entry.remaining_ttl(self.sim.now)
            records = [replace(r, ttl=ttl) for r in records]
        response = DnsMessage(
            txid=waiter.txid, qr=True, rd=waiter.rd, ra=True, rcode=rcode,
            question=question, answers=tuple(records),
        )
        self.host.send_udp(waiter.ip, DNS_PORT, waiter.port, response.encode())

    # -- upstream side --------------------------------------------------------

    def _recurse(self, question: DnsQuestion, waiter: Optional[Waiter]) -> None:
        key = (question.qname, question.qtype)
        inflight = self._inflight.get(key)
        if inflight is not None:
            if waiter is not None:
                inflight.waiters.append(waiter)
            return
        pending = PendingQuery(question.qname, question.qtype, [waiter] if waiter else [])
        self._inflight[key] = pending
        self._send_upstream(pending)

    def _fresh_port(self) -> int:
        while True:
            port = int(self.port_rng.integers(1024, 1 << 16))
            if port not in self.host.bound_ports:
                return port

    def _send_upstream(self, pending: PendingQuery) -> None:
        pending.src_port = self._fresh_port()
        pending.txid = int(self.txid_rng.integers(0, 1 << 16))
        pending.attempt += 1
        challenge = (pending.src_port, pending.txid)
        self.pending[challenge] = pending
        self.host.bind(pending.src_port, self._on_upstream_datagram)

        query = DnsMessage(txid=pending.txid, question=DnsQuestion(pending.qname, pending.qtype))
        self.sim.emit("dns_lookup", self.host.name, name=pending.qname, upstream=self.config.nameserver_ip,
                      port=pending.src_port, txid=pending.txid, attempt=pending.attempt)
        self.host.send_udp(self.config.nameserver_ip, pending.src_port, DNS_PORT, query.encode())
        self.sim.schedule(self.sim.now + self.config.query_timeout_ms,
                          lambda: self._on_timeout(pending, challenge))

    def _close(self, pending: PendingQuery, challenge: Tuple[int, int]) -> None:
        del self.pending[challenge]
        self.host.unbind(challenge[0])
        self._inflight.pop((pending.qname, pending.qtype), None)

    def _on_timeout(self, pending: PendingQuery, challenge: Tuple[int, int]) -> None:
        if self.pending.get(challenge) is not pending:
            return
        del self.pending[challenge]
        self.host.unbind(challenge[0])
        if pending.attempt <= self.config.max_retries:
            logger.debug("%s: retrying %s (attempt %s)", self.host.name, pending.qname, pending.attempt + 1)
            self._send_upstream(pending)
            return
        self._inflight.pop((pending.qname, pending.qtype), None)
        question = DnsQuestion(pending.qname, pending.qtype)
        for waiter in pending.waiters:
            self._answer(waiter, question, RCODE_SERVFAIL, ())

    def _on_upstream_datagram(self, datagram: UdpDatagram, src_ip: str) -> None:
        self.accept_response(datagram, src_ip)

    def accept_response(self, datagram: UdpDatagram, src_ip: str) -> bool:
        """Cache the answer if it matches a pending (port, txid, qname, qtype); else drop."""
        try:
            message = DnsMessage.decode(datagram.payload, trailing_answers=self.config.permissive_parsing)
        except Malformed as e:
            self.sim.emit("drop", self.host.name, reason="malformed_dns", error=str(e), src=src_ip)
            return False
        challenge = (datagram.dst_port, message.txid)
        pending = self.pending.get(challenge)
        question = message.question
        if (pending is None or not message.qr or question is None
                or (question.qname, question.qtype) != (pending.qname, pending.qtype)):
            self.sim.emit("drop", self.host.name, reason="challenge_mismatch", src=src_ip,
                          port=datagram.dst_port, txid=message.txid)
            return False
        self._close(pending, challenge)

        if message.rcode != RCODE_NOERROR:
            for waiter in pending.waiters:
                self._answer(waiter, question, message.rcode, ())
            return True

        records = tuple(
            r for r in message.answers if r.name == pending.qname and r.rtype == pending.qtype
        )[:self.config.answer_cap]
        entry = None
        if records:
            ttl = min(r.ttl for r in records)
            entry = CacheEntry(records, self.sim.now + ttl * 1000)
            self.cache[(pending.qname, pending.qtype)] = entry
            self.sim.emit("cache_write", self.host.name, name=pending.qname, ttl=ttl,
                          expiry=entry.expiry_ms, addresses=entry.addresses)
        for waiter in pending.waiters:
            self._answer(waiter, question, RCODE_NOERROR, records, entry)
        return True


@dataclass
class NameserverConfig:
    zone: Dict[str, List[str]]
    answer_ttl: int = DEFAULT_ANSWER_TTL
    addresses_per_response: int = DEFAULT_ADDRESSES_PER_RESPONSE
    ipid_step: int = 1
    ipid_random: bool = False
    cross_traffic_rate: float = 0.0
    min_pmtu: int = 68
    pmtu_expiry_s: int = 600
    probe_domain: Optional[str] = "probe.test"
    probe_address: str = "203.0.113.1"


class Nameserver:
    """Authoritative server for the pool zone with a global IPID counter and PMTU cache."""

    def __init__(self, host: Host, config: NameserverConfig):
        self.host = host
        self.sim = host.sim
        self.config = config
        self.zone = {name.lower(): list(addresses) for name, addresses in config.zone.items()}
        self.rotation_cursor = 0
        self.pmtu: Dict[str, Tuple[int, int]] = {}
        host.ipid_step = config.ipid_step
        host.ipid_random = config.ipid_random
        host.icmp_handler = self.handle_icmp
        host.bind(DNS_PORT, self._on_datagram)
        if config.cross_traffic_rate > 0:
            self._traffic_rng = self.sim.rng(f"cross-traffic:{host.name}")
            self.sim.process(self._cross_traffic())

    @property
    def ipid_counter(self) -> int:
        return self.host.ipid_counter

    def handle_icmp(self, icmp: IcmpFragNeeded, src_ip: str) -> None:
        mtu = max(icmp.next_hop_mtu, self.config.min_pmtu)
        self.pmtu[icmp.original_dst] = (mtu, self.sim.now + self.config.pmtu_expiry_s * 1000)
        logger.debug("%s: PMTU for %s set to %s", self.host.name, icmp.original_dst, mtu)

    def path_mtu(self, dst: str) -> Optional[int]:
        entry = self.pmtu.get(dst)
        if entry is None:
            return None
        if entry[1] <= self.sim.now:
            del self.pmtu[dst]
            return None
        return entry[0]

    def _rotate(self, addresses: List[str]) -> List[str]:
        count = min(self.config.addresses_per_response, len(addresses))
        chosen = [addresses[(self.rotation_cursor + i) % len(addresses)] for i in range(count)]
        self.rotation_cursor = (self.rotation_cursor + count) % len(addresses)
        return chosen

    def answer_for(self, query: DnsMessage) -> DnsMessage:
        question = query.question
        probe_domain = self.config.probe_domain
        if probe_domain and _name_in(question.qname, probe_domain):
            answers = [ResourceRecord.a(question.qname, self.config.probe_address, self.config.answer_ttl)]
            rcode = RCODE_NOERROR
        elif question.qname in self.zone and question.qtype == DNS_TYPE_A:
            answers = [ResourceRecord.a(question.qname, address, self.config.answer_ttl)
                       for address in self._rotate(self.zone[question.qname])]
            rcode = RCODE_NOERROR
        elif question.qname in self.zone:
            answers, rcode = [], RCODE_NOERROR
        else:
            answers, rcode = [], RCODE_NXDOMAIN
        return DnsMessage(txid=query.txid, qr=True, aa=True, rd=query.rd, rcode=rcode,
                          question=question, answers=tuple(answers))

    def respond(self, query: DnsMessage, dst: str, dst_port: int) -> Tuple[DnsMessage, List[Ipv4Packet]]:
        response = self.answer_for(query)
        packets = self.host.send_udp(dst, DNS_PORT, dst_port, response.encode(), mtu=self.path_mtu(dst))
        return response, packets

    def _on_datagram(self, datagram: UdpDatagram, src_ip: str) -> None:
        try:
            query = DnsMessage.decode(datagram.payload)
        except Malformed as e:
            self.sim.emit("drop", self.host.name, reason="malformed_dns", error=str(e), src=src_ip)
            return
        if query.qr or query.question is None:
            return
        self.respond(query, src_ip, datagram.src_port)

    def _cross_traffic(self):
        mean_gap_ms = 1000.0 / self.config.cross_traffic_rate
        while True:
            yield self.sim.env.timeout(max(1, int(round(self._traffic_rng.exponential(mean_gap_ms)))))
            self.host.next_ipid()
            # foreign lookups are for the first configured zone
            if self.zone:
                self._rotate(next(iter(self.zone.values())))


class StubResolver:
    """Client-side lookups through a recursive resolver with rd=1."""

    def __init__(self, host: Host, resolver_ip: str, timeout_ms: int = 5000):
        self.host = host
        self.sim = host.sim
        self.resolver_ip = resolver_ip
        self.timeout_ms = timeout_ms
        self.in_flight = 0
        self.queries = 0
        self._txid_rng = self.sim.rng(f"stub-txid:{host.name}")

    def query(self, hostname: str, on_answer: Callable[[List[str]], None]) -> None:
        """Resolve `hostname`; `on_answer` receives the A addresses, empty on any failure."""
        port = self.host.ephemeral_port()
        txid = int(self._txid_rng.integers(0, 1 << 16))
        done = False

        def finish(addresses: List[str]) -> None:
            nonlocal done
            if done:
                return
            done = True
            self.in_flight -= 1
            self.host.unbind(port)
            on_answer(addresses)

        def on_response(datagram: UdpDatagram, src_ip: str) -> None:
            try:
                message = DnsMessage.decode(datagram.payload)
            except Malformed:
                return
            if message.txid != txid or not message.qr:
                return
            if message.rcode != RCODE_NOERROR:
                finish([])
            else:
                finish([r.address for r in message.answers if r.rtype == DNS_TYPE_A])

        self.host.bind(port, on_response)
        self.in_flight += 1
        self.queries += 1
        self.sim.emit("dns_lookup", self.host.name, name=hostname, resolver=self.resolver_ip)
        query = DnsMessage(txid=txid, rd=True, question=DnsQuestion(hostname))
        self.host.send_udp(self.resolver_ip, port, DNS_PORT, query.encode())
        self.sim.schedule(self.sim.now + self.timeout_ms, lambda: finish([]))
