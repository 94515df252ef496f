from dataclasses import dataclass, field
from typing import Dict, List, Optional

import pytest

from utils.dns import DNS_PORT, Nameserver, NameserverConfig, Resolver, ResolverConfig
from utils.netsim import Host, Simulator
from utils.ntp import NtpServer, ServerConfig
from utils.wirefmt import DnsMessage, UdpDatagram

RESOLVER_IP = "10.0.0.53"
NAMESERVER_IP = "10.0.1.53"
ATTACKER_IP = "10.66.0.1"
CLIENT_IP = "10.0.0.123"
POOL = "pool.ntp.org"
ZONE = [f"192.0.2.{10 + i}" for i in range(6)]
MALICIOUS = [f"6.6.6.{i}" for i in range(1, 5)]


@dataclass
class MiniWorld:
    sim: Simulator
    resolver: Resolver
    nameserver: Nameserver
    client_host: Host
    attacker_host: Host
    servers: Dict[str, NtpServer] = field(default_factory=dict)


def build_mini_world(seed: int = 1, zone: Optional[List[str]] = None, resolver: Optional[Dict] = None,
                     nameserver: Optional[Dict] = None, server: Optional[ServerConfig] = None,
                     with_servers: bool = True) -> MiniWorld:
    zone = list(ZONE if zone is None else zone)
    sim = Simulator(seed=seed)
    ns = Nameserver(sim.add_host("ns", NAMESERVER_IP), NameserverConfig(zone={POOL: zone}, **(nameserver or {})))
    res = Resolver(sim.add_host("resolver", RESOLVER_IP), ResolverConfig(nameserver_ip=NAMESERVER_IP, **(resolver or {})))
    client = sim.add_host("victim", CLIENT_IP)
    attacker = sim.add_host("attacker", ATTACKER_IP, can_spoof=True)
    world = MiniWorld(sim, res, ns, client, attacker)
    if with_servers:
        for i, address in enumerate(zone):
            config = server or ServerConfig(upstream_ref=f"198.51.100.{i + 1}")
            world.servers[address] = NtpServer(sim.add_host(f"ntp-{i}", address), config)
    return world


def ask_dns(host: Host, dst: str, query: DnsMessage) -> List[DnsMessage]:
    """Send `query` from `host` to `dst`; decoded replies are appended to the returned list."""
    replies: List[DnsMessage] = []
    port = host.ephemeral_port()
    host.bind(port, lambda datagram, src: replies.append(DnsMessage.decode(datagram.payload)))
    host.send_udp(dst, port, DNS_PORT, query.encode())
    return replies


def events(sim: Simulator, kind: str, actor: Optional[str] = None):
    return [e for e in sim.trace if e.kind == kind and (actor is None or e.actor == actor)]


@pytest.fixture
def make_world():
    return build_mini_world


@pytest.fixture
def world():
    return build_mini_world()


@pytest.fixture
def sim():
    return Simulator(seed=7)


@pytest.fixture
def udp_segment():
    def build(src, dst, payload=b"hello", sport=1000, dport=2000):
        return UdpDatagram.build(src, dst, sport, dport, payload).encode()
    return build
