"""Deterministic discrete-event network engine.

A `Simulator` owns the event calendar (a simpy environment with integer
millisecond time), the hosts, the links between them and the trace. Hosts
model an OS-profiled IPv4 defragmentation cache, verify UDP checksums and
dispatch datagrams to bound port handlers. Every random draw comes from a
substream derived from the scenario seed and a stable name, so adding a host
never perturbs the draws of another.
"""
import json
import logging
import zlib
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np
import simpy

from utils.wirefmt import (
    PROTO_ICMP,
    PROTO_UDP,
    ConflictingLength,
    FragmentMismatch,
    IcmpFragNeeded,
    IncompleteHole,
    Ipv4Packet,
    Malformed,
    UdpDatagram,
    fragment_packet,
    reassemble_fragments,
    verify_udp_checksum,
)

logger = logging.getLogger(__name__)

TRACE_KINDS = frozenset({
    "send", "deliver", "drop", "defrag_insert", "defrag_evict", "reassembled",
    "cache_write", "cache_hit", "assoc_demobilized", "assoc_mobilized", "kod_sent",
    "rate_limited", "attack_phase", "clock_step", "dns_lookup", "icmp",
})

DatagramHandler = Callable[[UdpDatagram, str], None]


class SimulationError(RuntimeError):
    pass


class SpoofingForbidden(SimulationError):
    pass


class UnknownHost(SimulationError):
    pass


@dataclass(frozen=True)
class OsProfile:
    name: str
    defrag_timeout_s: int
    max_pending_fragments_per_key: int


OS_PROFILES: Dict[str, OsProfile] = {
    "linux": OsProfile("linux", 30, 64),
    "windows": OsProfile("windows", 60, 100),
}


def os_profile(name: str, defrag_timeout_s: Optional[int] = None) -> OsProfile:
    try:
        profile = OS_PROFILES[name]
    except KeyError as e:
        raise ValueError(f"Unknown OS profile {name!r}; expected one of {sorted(OS_PROFILES)}") from e
    if defrag_timeout_s is not None:
        profile = replace(profile, defrag_timeout_s=defrag_timeout_s)
    return profile


@dataclass(frozen=True)
class TraceEvent:
    t: int
    kind: str
    actor: str
    detail: dict

    def to_json(self) -> str:
        detail = json.dumps(self.detail, sort_keys=True, separators=(",", ":"))
        return (f'{{"t":{self.t},"kind":{json.dumps(self.kind)},'
                f'"actor":{json.dumps(self.actor)},"detail":{detail}}}')


def trace_to_jsonl(events: Iterable[TraceEvent]) -> str:
    return "".join(event.to_json() + "\n" for event in events)


@dataclass
class Link:
    src: str
    dst: str
    latency_ms: int
    loss: float
    rng: np.random.Generator = field(repr=False)

    def __post_init__(self):
        if self.latency_ms < 0:
            raise ValueError(f"negative latency on link {self.src}->{self.dst}")
        if not 0.0 <= self.loss <= 1.0:
            raise ValueError(f"loss probability {self.loss} outside [0, 1]")


@dataclass
class DefragEntry:
    fragments: List[Ipv4Packet]
    deadline_ms: int


def _packet_detail(pkt: Ipv4Packet, with_bytes: bool = False) -> dict:
    detail = {
        "src": pkt.src, "dst": pkt.dst, "proto": pkt.protocol, "ipid": pkt.ipid,
        "mf": pkt.mf, "offset": pkt.frag_offset, "len": pkt.total_length,
    }
    if with_bytes:
        detail["bytes"] = pkt.encode().hex()
    return detail


class Host:
    """A single-homed endpoint with a defragmentation cache and bound UDP ports."""

    def __init__(self, sim: "Simulator", name: str, ip: str, os: OsProfile,
                 can_spoof: bool = False, accept_fragments: bool = True, trim_udp: bool = True):
        self.sim = sim
        self.name = name
        self.ip = ip
        self.os = os
        self.can_spoof = can_spoof
        self.accept_fragments = accept_fragments
        self.trim_udp = trim_udp
        self.rng = sim.rng(f"host:{name}")
        self.defrag_cache: Dict[Tuple[str, str, int, int], DefragEntry] = {}
        self._pending_per_flow: Counter = Counter()
        self.bound_ports: Dict[int, DatagramHandler] = {}
        self.sniffer: Optional[Callable[[Ipv4Packet], None]] = None
        self.icmp_handler: Optional[Callable[[IcmpFragNeeded, str], None]] = None
        self.ipid_step = 1
        self.ipid_random = False
        self.ipid_counter = int(self.rng.integers(0, 1 << 16))

    def __repr__(self):
        return f"Host({self.name!r}, {self.ip})"

    # -- ports and identifiers ---------------------------------------------

    def bind(self, port: int, handler: DatagramHandler) -> None:
        if port in self.bound_ports:
            raise SimulationError(f"{self.name}: port {port} already bound")
        self.bound_ports[port] = handler

    def unbind(self, port: int) -> None:
        self.bound_ports.pop(port, None)

    def ephemeral_port(self) -> int:
        while True:
            port = int(self.rng.integers(1024, 1 << 16))
            if port not in self.bound_ports:
                return port

    def next_ipid(self) -> int:
        if self.ipid_random:
            return int(self.rng.integers(0, 1 << 16))
        value = self.ipid_counter
        self.ipid_counter = (self.ipid_counter + self.ipid_step) % (1 << 16)
        return value

    # -- sending --------------------------------------------------------------

    def send_udp(self, dst: str, src_port: int, dst_port: int, payload: bytes,
                 mtu: Optional[int] = None) -> List[Ipv4Packet]:
        udp = UdpDatagram.build(self.ip, dst, src_port, dst_port, payload)
        pkt = Ipv4Packet(self.ip, dst, PROTO_UDP, udp.encode(), ipid=self.next_ipid())
        packets = fragment_packet(pkt, mtu) if mtu else [pkt]
        for packet in packets:
            self.sim.transmit(self, packet)
        return packets

    def send_spoofed_udp(self, forged_src: str, dst: str, src_port: int, dst_port: int,
                         payload: bytes) -> Optional[int]:
        udp = UdpDatagram.build(forged_src, dst, src_port, dst_port, payload)
        pkt = Ipv4Packet(forged_src, dst, PROTO_UDP, udp.encode(), ipid=self.next_ipid())
        return self.sim.send_spoofed(self, forged_src, pkt)

    # -- receiving ------------------------------------------------------------

    def receive(self, pkt: Ipv4Packet) -> Optional[UdpDatagram]:
        """Process an arriving packet; returns the datagram handed to an application."""
        sim = self.sim
        if sim.trace_packets:
            sim.emit("deliver", self.name, **_packet_detail(pkt))
        if self.sniffer is not None:
            self.sniffer(pkt)
        if pkt.dst != self.ip:
            sim.emit("drop", self.name, reason="misaddressed", **_packet_detail(pkt))
            return None
        if not pkt.is_fragment:
            return self._deliver(pkt)
        if not self.accept_fragments:
            sim.emit("drop", self.name, reason="fragments_filtered", **_packet_detail(pkt))
            return None
        return self._defragment(pkt)

    def _defragment(self, pkt: Ipv4Packet) -> Optional[UdpDatagram]:
        sim = self.sim
        key = pkt.key
        limit = self.os.max_pending_fragments_per_key
        entry = self.defrag_cache.get(key)
        if entry is None:
            flow = key[:3]
            if self._pending_per_flow[flow] >= limit:
                sim.emit("drop", self.name, reason="defrag_slots_full", **_packet_detail(pkt))
                return None
            entry = DefragEntry([], sim.now + self.os.defrag_timeout_s * 1000)
            self.defrag_cache[key] = entry
            self._pending_per_flow[flow] += 1
            sim.emit("defrag_insert", self.name, src=pkt.src, dst=pkt.dst, proto=pkt.protocol,
                     ipid=pkt.ipid, deadline=entry.deadline_ms)
            sim.schedule(entry.deadline_ms, lambda: self._expire(key, entry))
        elif len(entry.fragments) >= limit:
            sim.emit("drop", self.name, reason="defrag_fragments_full", **_packet_detail(pkt))
            return None

        entry.fragments.append(pkt)
        try:
            datagram = reassemble_fragments(entry.fragments)
        except IncompleteHole:
            return None
        except (ConflictingLength, FragmentMismatch) as e:
            self._release(key)
            sim.emit("defrag_evict", self.name, src=pkt.src, ipid=pkt.ipid, reason="conflict", error=str(e))
            return None

        self._release(key)
        sim.emit("reassembled", self.name, src=datagram.src, dst=datagram.dst,
                 ipid=datagram.ipid, fragments=len(entry.fragments), len=datagram.total_length)
        return self._deliver(datagram)

    def _release(self, key) -> None:
        del self.defrag_cache[key]
        self._pending_per_flow[key[:3]] -= 1

    def _expire(self, key, entry: DefragEntry) -> None:
        if self.defrag_cache.get(key) is not entry:
            return
        self._release(key)
        self.sim.emit("defrag_evict", self.name, src=key[0], ipid=key[3], reason="timeout",
                      fragments=len(entry.fragments))

    def _deliver(self, pkt: Ipv4Packet) -> Optional[UdpDatagram]:
        sim = self.sim
        if pkt.protocol == PROTO_ICMP:
            try:
                icmp = IcmpFragNeeded.decode(pkt.payload)
            except Malformed as e:
                sim.emit("drop", self.name, reason="malformed_icmp", error=str(e), src=pkt.src)
                return None
            sim.emit("icmp", self.name, src=pkt.src, mtu=icmp.next_hop_mtu, about=icmp.original_dst)
            if self.icmp_handler is not None:
                self.icmp_handler(icmp, pkt.src)
            return None
        if pkt.protocol != PROTO_UDP:
            sim.emit("drop", self.name, reason="unsupported_protocol", src=pkt.src, proto=pkt.protocol)
            return None

        try:
            datagram = UdpDatagram.decode(pkt.payload, trim=self.trim_udp)
        except Malformed as e:
            sim.emit("drop", self.name, reason="malformed_udp", error=str(e), src=pkt.src)
            return None
        segment = pkt.payload[:datagram.length] if self.trim_udp else pkt.payload
        if not verify_udp_checksum(pkt.src, pkt.dst, segment):
            sim.emit("drop", self.name, reason="bad_checksum", src=pkt.src, ipid=pkt.ipid)
            return None
        handler = self.bound_ports.get(datagram.dst_port)
        if handler is None:
            logger.debug("%s: no handler on port %s", self.name, datagram.dst_port)
            sim.emit("drop", self.name, reason="port_unreachable", src=pkt.src, port=datagram.dst_port)
            return None
        handler(datagram, pkt.src)
        return datagram


class Simulator:
    """Event calendar, hosts, links and trace for one scenario."""

    def __init__(self, seed: int = 0, default_latency_ms: int = 10, default_loss: float = 0.0,
                 trace_packets: bool = True):
        self.env = simpy.Environment()
        self.seed = seed
        self.default_latency_ms = default_latency_ms
        self.default_loss = default_loss
        self.trace_packets = trace_packets
        self.trace: List[TraceEvent] = []
        self.listeners: List[Callable[[TraceEvent], None]] = []
        self.hosts: Dict[str, Host] = {}
        self._links: Dict[Tuple[str, str], Link] = {}
        self._link_overrides: Dict[Tuple[str, str], Tuple[int, float]] = {}
        self._next_event_id = 0
        self._stopped = False

    @property
    def now(self) -> int:
        return int(self.env.now)

    def rng(self, name: str) -> np.random.Generator:
        seq = np.random.SeedSequence(self.seed, spawn_key=(zlib.crc32(name.encode()),))
        return np.random.default_rng(seq)

    # -- topology -------------------------------------------------------------

    def add_host(self, name: str, ip: str, os: str = "linux", defrag_timeout_s: Optional[int] = None,
                 **kwargs) -> Host:
        if ip in self.hosts:
            raise SimulationError(f"IP {ip} already assigned to {self.hosts[ip].name}")
        host = Host(self, name, ip, os_profile(os, defrag_timeout_s), **kwargs)
        self.hosts[ip] = host
        return host

    def host(self, ip: str) -> Host:
        try:
            return self.hosts[ip]
        except KeyError as e:
            raise UnknownHost(f"no host with IP {ip}") from e

    def set_link(self, src: str, dst: str, latency_ms: int, loss: float = 0.0) -> None:
        self._link_overrides[(src, dst)] = (latency_ms, loss)
        self._links.pop((src, dst), None)

    def link(self, src: str, dst: str) -> Link:
        link = self._links.get((src, dst))
        if link is None:
            latency, loss = self._link_overrides.get((src, dst), (self.default_latency_ms, self.default_loss))
            link = Link(src, dst, latency, loss, self.rng(f"link:{src}>{dst}"))
            self._links[(src, dst)] = link
        return link

    # -- event calendar -------------------------------------------------------

    def schedule(self, t: int, action: Callable[[], None]) -> int:
        """Run `action` at absolute time `t`; same-time actions run in scheduling order."""
        if t < self.now:
            raise ValueError(f"cannot schedule at {t} before now={self.now}")
        event = self.env.timeout(t - self.now)
        event.callbacks.append(lambda _event: action())
        self._next_event_id += 1
        return self._next_event_id

    def process(self, generator) -> simpy.Process:
        return self.env.process(generator)

    def stop(self) -> None:
        self._stopped = True

    def run_until(self, t_end: int) -> List[TraceEvent]:
        """Execute every event with time <= t_end; returns the events traced meanwhile."""
        start = len(self.trace)
        self._stopped = False
        while not self._stopped and self.env.peek() <= t_end:
            self.env.step()
        if not self._stopped and self.env.now < t_end:
            self.env.run(until=t_end)
        return self.trace[start:]

    def emit(self, kind: str, actor: str, **detail) -> TraceEvent:
        if kind not in TRACE_KINDS:
            raise ValueError(f"unknown trace kind {kind!r}")
        event = TraceEvent(self.now, kind, actor, detail)
        self.trace.append(event)
        for listener in self.listeners:
            listener(event)
        return event

    # -- packet movement ------------------------------------------------------

    def transmit(self, host: Host, pkt: Ipv4Packet, spoofed: bool = False) -> Optional[int]:
        link = self.link(host.ip, pkt.dst)
        if self.trace_packets:
            self.emit("send", host.name, spoofed=spoofed, **_packet_detail(pkt, with_bytes=True))
        if link.loss > 0 and link.rng.random() < link.loss:
            if self.trace_packets:
                self.emit("drop", host.name, reason="link_loss", **_packet_detail(pkt))
            return None
        receiver = self.hosts.get(pkt.dst)
        if receiver is None:
            self.emit("drop", host.name, reason="no_route", dst=pkt.dst)
            return None
        return self.schedule(self.now + link.latency_ms, lambda: receiver.receive(pkt))

    def send_spoofed(self, host: Host, forged_src: str, pkt: Ipv4Packet) -> Optional[int]:
        """Send `pkt` from `host` with its source rewritten to `forged_src`."""
        if not host.can_spoof:
            raise SpoofingForbidden(f"{host.name} is not allowed to spoof source addresses")
        pkt = replace(pkt, src=forged_src)
        if pkt.protocol == PROTO_UDP and not pkt.is_fragment:
            udp = UdpDatagram.decode(pkt.payload)
            rebuilt = UdpDatagram.build(forged_src, pkt.dst, udp.src_port, udp.dst_port, udp.payload)
            pkt = replace(pkt, payload=rebuilt.encode())
        return self.transmit(host, pkt, spoofed=True)
