import json

import pytest

from conftest import ATTACKER_IP, CLIENT_IP, RESOLVER_IP, ZONE, events
from utils.netsim import Simulator
from utils.ntp import (
    NTP_PORT,
    ClientConfig,
    ClientVariant,
    NtpClient,
    NtpServer,
    RateLimiter,
    RateVerdict,
    ServerConfig,
    reference_address,
)
from utils.wirefmt import NtpPacket, ms_to_ntp, ntp_to_ms

SOURCE = "10.0.0.9"


@pytest.mark.parametrize("variant,target", [
    ("ntpd", 6), ("chrony", 4), ("openntpd", None), ("systemd_timesyncd", 1),
    ("sntp_oneshot", 1), ("ntpclient", 1), ("android_sntp", 1),
])
def test_association_targets(variant, target):
    assert ClientConfig(variant=variant, resolver_ip=RESOLVER_IP).association_target == target


def test_only_some_variants_resolve_at_run_time():
    runtime = {v for v in ClientVariant if ClientConfig(variant=v, resolver_ip=RESOLVER_IP).runtime_dns}
    assert runtime == {ClientVariant.NTPD, ClientVariant.CHRONY, ClientVariant.ANDROID_SNTP,
                       ClientVariant.SYSTEMD_TIMESYNCD}


def test_rate_limiter_penalty_outlasts_window():
    limiter = RateLimiter(window_ms=1000, burst=1, penalty_ms=300_000)
    assert limiter.check(SOURCE, 0) == RateVerdict.RESPOND
    assert limiter.check(SOURCE, 500) == RateVerdict.LIMIT_START
    assert limiter.check("10.0.0.10", 600) == RateVerdict.RESPOND
    assert limiter.check(SOURCE, 64_000) == RateVerdict.LIMITED
    assert limiter.is_limiting(SOURCE, 64_000)
    assert limiter.check(SOURCE, 301_000) == RateVerdict.RESPOND


def test_rate_limiter_trickle():
    limiter = RateLimiter(window_ms=1000, burst=1, trickle_every=2)
    verdicts = [limiter.check(SOURCE, t) for t in (0, 100, 200, 300, 400)]
    assert verdicts == [RateVerdict.RESPOND, RateVerdict.LIMIT_START, RateVerdict.LIMITED,
                        RateVerdict.RESPOND, RateVerdict.LIMITED]


def _server(config):
    sim = Simulator(seed=1)
    return NtpServer(sim.add_host("pool-server", "192.0.2.10"), config)


def test_server_answers_then_kisses_then_goes_silent():
    server = _server(ServerConfig(kod_before_silence=True, offset_ms=5000))
    request = NtpPacket(mode=3, xmit_ts=ms_to_ntp(1))
    reply = server.handle(request, SOURCE)
    assert reply.stratum == 2 and reply.orig_ts == request.xmit_ts
    assert ntp_to_ms(reply.xmit_ts) == 5000
    assert reference_address(reply) == "192.0.2.1"

    kod = server.handle(request, SOURCE)
    assert kod.is_kod and kod.orig_ts == request.xmit_ts
    assert reference_address(kod) is None
    assert server.handle(request, SOURCE) is None
    assert len(events(server.sim, "kod_sent")) == 1
    assert len(events(server.sim, "rate_limited")) == 1
    assert server.requests_seen[SOURCE] == 3


def test_silent_server_never_sends_kod():
    server = _server(ServerConfig())
    request = NtpPacket(mode=3, xmit_ts=1)
    assert server.handle(request, SOURCE) is not None
    assert server.handle(request, SOURCE) is None
    assert events(server.sim, "kod_sent") == []


def test_control_queries_only_when_exposed():
    request = NtpPacket(mode=6)
    assert _server(ServerConfig()).handle(request, SOURCE) is None
    exposed = _server(ServerConfig(control_exposed=True, hostnames=["pool.ntp.org"], upstream_ref="198.51.100.3"))
    dump = json.loads(exposed.handle(request, SOURCE).extension)
    assert dump == {"hostnames": ["pool.ntp.org"], "peers": ["198.51.100.3"]}


def test_unsynchronised_replies_leak_no_reference():
    assert reference_address(NtpPacket(mode=4, stratum=16, reference_id=b"\x01\x02\x03\x04")) is None
    assert reference_address(NtpPacket(mode=4, stratum=3, reference_id=b"INIT")) is None


def _client(world, variant="ntpd", **kwargs):
    return NtpClient(world.client_host, ClientConfig(variant=variant, resolver_ip=RESOLVER_IP, **kwargs))


def test_ntpd_fills_its_associations_as_the_cache_turns_over(world):
    client = _client(world)
    world.sim.run_until(150_000)
    assert sorted(a.server_ip for a in client.active_associations) == ZONE[:4]
    world.sim.run_until(200_000)
    assert len(client.active_associations) == 6
    assert client.target_reached
    assert client.clock.offset == 0
    assert events(world.sim, "clock_step") == []
    assert client.system_peer in ZONE


def test_clock_follows_the_median_offset(make_world):
    world = make_world(server=ServerConfig(offset_ms=5000))
    client = _client(world)
    world.sim.run_until(10_000)
    assert client.clock.offset == 5000
    steps = events(world.sim, "clock_step", "victim")
    assert len(steps) == 1 and steps[0].detail["step"]


def test_panic_threshold_applies_once_the_clock_is_set(world):
    client = _client(world)
    assert client.clock_update({"192.0.2.10": (2_000_000.0, 2)}) == 2_000_000
    assert client.clock_update({"192.0.2.10": (2_000_000.0, 2)}) == 2_000_000
    majority = {f"6.6.6.{i}": (-500_000.0, 1) for i in range(1, 5)}
    majority.update({"192.0.2.10": (0.0, 2), "192.0.2.11": (0.0, 2)})
    assert client.clock_update(majority) == 1_500_000


def test_openntpd_never_re_resolves(make_world):
    world = make_world(with_servers=False)
    client = _client(world, "openntpd")
    world.sim.run_until(460_000)
    assert len(events(world.sim, "assoc_demobilized", "victim")) == 4
    assert client.active_associations == []
    assert client.dns_queries == 1


def test_ntpd_re_resolves_after_losing_its_servers(make_world):
    world = make_world(with_servers=False)
    _client(world)
    world.sim.run_until(460_000)
    first_loss = min(e.t for e in events(world.sim, "assoc_demobilized", "victim"))
    assert first_loss == 451_000
    assert any(e.t >= first_loss for e in events(world.sim, "dns_lookup", "victim"))


def test_sntp_sets_the_clock_once_and_exits(make_world):
    world = make_world(server=ServerConfig(offset_ms=2000))
    client = _client(world, "sntp_oneshot")
    world.sim.run_until(300_000)
    assert client.exited
    assert client.clock.offset == 2000
    assert sum(sum(s.requests_seen.values()) for s in world.servers.values()) == 1


def test_timesyncd_keeps_one_server_and_fallbacks(world):
    client = _client(world, "systemd_timesyncd")
    world.sim.run_until(10_000)
    assert [a.server_ip for a in client.active_associations] == ZONE[:1]
    assert client.fallbacks == ZONE[1:4]


def test_ntpd_exposes_peers_and_reference(make_world):
    world = make_world()
    client = _client(world, control_exposed=True)
    replies = []
    attacker = world.attacker_host
    attacker.bind(4000, lambda datagram, src: replies.append(NtpPacket.decode(datagram.payload)))
    world.sim.schedule(200_000, lambda: attacker.send_udp(CLIENT_IP, 4000, NTP_PORT, NtpPacket(mode=6).encode()))
    world.sim.schedule(200_500, lambda: attacker.send_udp(
        CLIENT_IP, 4000, NTP_PORT, NtpPacket(mode=3, xmit_ts=ms_to_ntp(200_500)).encode()))
    world.sim.run_until(201_000)
    dump = json.loads(replies[0].extension)
    assert dump["hostnames"] == ["pool.ntp.org"]
    assert sorted(dump["peers"]) == sorted(a.server_ip for a in client.active_associations)
    assert reference_address(replies[1]) == client.system_peer
    assert replies[1].stratum == 3
    assert ATTACKER_IP not in dump["peers"]
