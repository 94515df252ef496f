import pytest

from conftest import CLIENT_IP, MALICIOUS, NAMESERVER_IP, POOL, RESOLVER_IP, ZONE, events
from utils.attacker import (
    AttackError,
    AttackPlan,
    AttackReport,
    Attacker,
    ChecksumUnfixable,
    IpidPredictor,
    NonLinearIpid,
    Prober,
    SilenceOutcome,
    assemble_zone_order,
    blind_spoof,
    first_fragment_size,
    forge_tail,
    forged_addresses,
    malicious_segment,
    response_segment,
    tail_fragments,
)
from utils.dns import StubResolver
from utils.netsim import SpoofingForbidden
from utils.ntp import ClientConfig, NtpClient, ServerConfig
from utils.wirefmt import DnsMessage, DnsQuestion, ResourceRecord, UdpDatagram, verify_udp_checksum


def _plan(**kwargs):
    values = dict(kind="boot_time", resolver_ip=RESOLVER_IP, nameserver_ip=NAMESERVER_IP, client_ip=CLIENT_IP,
                  malicious_addresses=list(MALICIOUS))
    values.update(kwargs)
    return AttackPlan(**values)


def test_predictor_on_a_quiet_nameserver():
    predictor = IpidPredictor.fit([(0, 100), (250, 101), (500, 102)])
    assert predictor.estimated_step == 1
    assert predictor.estimated_rate == 0.0
    assert predictor.candidates(10_000) == [0]
    assert predictor.predict(10_000) == (103, [103])


def test_predictor_learns_step():
    predictor = IpidPredictor.fit([(0, 65534), (250, 0), (500, 2)])
    assert predictor.estimated_step == 2
    assert predictor.ipid_for(0) == 4


def test_predictor_window_under_background_traffic():
    predictor = IpidPredictor.fit([(0, 100), (1000, 111), (2000, 121)], slot_limit=5)
    assert predictor.estimated_rate == pytest.approx(9.5)
    assert predictor.candidates(3000) == [7, 8, 9, 10, 11]
    wide = IpidPredictor.fit([(0, 100), (1000, 111), (2000, 121)])
    assert wide.candidates(3000) == list(range(3, 17))


def test_predictor_rejects_unusable_samples():
    with pytest.raises(ValueError):
        IpidPredictor.fit([(0, 1)])
    with pytest.raises(NonLinearIpid):
        IpidPredictor.fit([(0, 5), (250, 5)])
    with pytest.raises(NonLinearIpid):
        IpidPredictor.fit([(0, 0), (1000, 1), (2000, 202), (3000, 203), (4000, 404)])


def _genuine(count=4):
    message = DnsMessage(txid=0x4321, qr=True, aa=True, question=DnsQuestion(POOL),
                         answers=tuple(ResourceRecord.a(POOL, a, 150) for a in ZONE[:count]))
    return UdpDatagram.build(NAMESERVER_IP, RESOLVER_IP, 53, 33333, message.encode()).encode()


def test_forged_tail_passes_the_udp_checksum():
    genuine = _genuine()
    split = first_fragment_size(68)
    forged, slack = malicious_segment(POOL, MALICIOUS, 90000)
    combined = genuine[:split] + forge_tail(genuine, forged, split, slack)
    assert len(combined) == len(genuine)
    assert verify_udp_checksum(NAMESERVER_IP, RESOLVER_IP, combined)
    message = DnsMessage.decode(combined[8:])
    assert message.txid == 0x4321
    assert [r.address for r in message.answers] == MALICIOUS
    assert [r.ttl for r in message.answers[:-1]] == [90000] * 3
    assert 131072 <= message.answers[-1].ttl < 196608


def test_oversized_forgery_needs_a_permissive_parser():
    genuine = _genuine()
    many = [f"6.6.{i // 256}.{i % 256 + 1}" for i in range(89)]
    forged, slack = malicious_segment(POOL, many, 90000)
    with pytest.raises(AttackError):
        forge_tail(genuine, forged, 48, slack)
    combined = genuine[:48] + forge_tail(genuine, forged, 48, slack, oversized=True)
    assert verify_udp_checksum(NAMESERVER_IP, RESOLVER_IP, combined)
    datagram = UdpDatagram.decode(combined, trim=False)
    assert len(DnsMessage.decode(datagram.payload, trailing_answers=True).answers) == 89


def test_forging_errors():
    forged, slack = malicious_segment(POOL, MALICIOUS, 90000)
    with pytest.raises(AttackError):
        forge_tail(_genuine()[:40], forged, 48, slack)
    with pytest.raises(ChecksumUnfixable):
        forge_tail(_genuine(), forged, 48, 10)
    with pytest.raises(ValueError):
        malicious_segment(POOL, [], 90000)
    short, short_slack = malicious_segment(POOL, MALICIOUS[:1], 90000)
    with pytest.raises(AttackError):
        forge_tail(_genuine(), short, 48, short_slack, oversized=True)


def test_forged_addresses_follow_the_genuine_count():
    assert forged_addresses(MALICIOUS[:1], 4) == [MALICIOUS[0]] * 4
    assert forged_addresses(MALICIOUS[:3], 4) == MALICIOUS[:3] + MALICIOUS[:1]
    assert forged_addresses(MALICIOUS, 2) == MALICIOUS[:2]
    assert forged_addresses(MALICIOUS, 2, oversized=True) == MALICIOUS
    with pytest.raises(ValueError):
        forged_addresses([], 4)


def test_response_segment_matches_the_nameserver_layout():
    assert response_segment(POOL, ZONE[:4], 150)[48:] == _genuine()[48:]


def test_tail_fragments_split_and_offsets():
    frags = tail_fragments(bytes(3000), 48, NAMESERVER_IP, RESOLVER_IP, ipid=77)
    assert [len(f.payload) for f in frags] == [1480, 1480, 40]
    assert [f.frag_offset for f in frags] == [6, 191, 376]
    assert [f.mf for f in frags] == [True, True, False]
    assert {f.ipid for f in frags} == {77}
    with pytest.raises(ValueError):
        tail_fragments(bytes(10), 50, NAMESERVER_IP, RESOLVER_IP, ipid=1)


def test_first_fragment_size():
    assert first_fragment_size(68) == 48
    assert first_fragment_size(576) == 552


def test_zone_order_from_consecutive_answers():
    assert assemble_zone_order([(10, ZONE[:4]), (11, ZONE[4:] + ZONE[:2])]) == ZONE
    assert assemble_zone_order([(10, ZONE[:4]), (12, ZONE[4:] + ZONE[:2])]) == []
    assert assemble_zone_order([(65535, ZONE[:4]), (0, ZONE[4:] + ZONE[:2])]) == ZONE


def test_plan_validation_and_removals():
    with pytest.raises(ValueError):
        _plan(kind="teleport")
    with pytest.raises(ValueError):
        _plan(discovery="guess")
    assert _plan(victim_associations=6).removals_needed == 4
    assert _plan(victim_associations=4).removals_needed == 3


def test_report_serialises():
    report = AttackReport(kind="run_time", success=True, cause=None, duration_ms=5000,
                          phases=[{"phase": "poison", "t": 1}, {"phase": "capture", "t": 2}],
                          packets_sent={"icmp": 1})
    assert report.phase_sequence == ["poison", "capture"]
    assert '"success": true' in report.to_json()


@pytest.mark.parametrize("malicious", [MALICIOUS, MALICIOUS[:1]])
def test_planted_fragment_poisons_the_next_lookup(world, malicious):
    sim = world.sim
    attacker = Attacker(world.attacker_host, _plan(malicious_addresses=list(malicious)), world.resolver)
    planted = []

    def attack():
        attacker.send_frag_needed()
        yield sim.env.timeout(50)
        order = yield from attacker.enumerate_zone()
        assert order == ZONE
        predictor = yield from attacker.probe_ipid()
        planted.append(attacker.forge_and_plant(predictor, sim.now + 1000))

    answers = []
    sim.process(attack())
    stub = StubResolver(world.client_host, RESOLVER_IP)
    sim.schedule(20_000, lambda: stub.query(POOL, answers.append))
    sim.run_until(25_000)
    assert planted == [1]
    assert answers == [forged_addresses(malicious, 4)]
    assert world.resolver.lookup(POOL).remaining_ttl(sim.now) > 80_000
    assert attacker.packets["icmp"] == 1 and attacker.packets["fragment"] == 1


def test_silencing_needs_a_rate_limiting_server(make_world):
    for config, expected in ((ServerConfig(), SilenceOutcome.SILENCED),
                             (ServerConfig(rate_limit_enabled=False), SilenceOutcome.INEFFECTIVE)):
        world = make_world(server=config)
        attacker = Attacker(world.attacker_host, _plan(kind="run_time"))
        outcomes = []

        def silence():
            outcomes.append((yield from attacker.silence_association(ZONE[0])))

        world.sim.process(silence())
        world.sim.run_until(10_000)
        assert outcomes == [expected]
        assert world.servers[ZONE[0]].requests_seen[CLIENT_IP] > 0
        assert events(world.sim, "attack_phase", "attacker")[-1].detail["outcome"] == expected.value


def test_control_discovery(make_world):
    world = make_world()
    client = NtpClient(world.client_host, ClientConfig(variant="ntpd", resolver_ip=RESOLVER_IP, control_exposed=True))
    attacker = Attacker(world.attacker_host, _plan(kind="run_time"))
    found = []

    def discover():
        found.append((yield from attacker.discover_upstream("control")))

    world.sim.schedule(200_000, lambda: world.sim.process(discover()))
    world.sim.run_until(205_000)
    assert sorted(found[0]) == sorted(a.server_ip for a in client.active_associations)
    assert attacker.hostnames == [POOL]


def test_rate_limit_probe_classifies_servers(make_world):
    world = make_world(server=ServerConfig(min_interarrival_s=32, burst=16))
    kod_world = make_world(server=ServerConfig(min_interarrival_s=32, burst=16, kod_before_silence=True))
    open_world = make_world(server=ServerConfig(rate_limit_enabled=False))
    results = {}
    for label, w in (("silent", world), ("kod", kod_world), ("open", open_world)):
        prober = Prober(w.attacker_host)

        def probe(p=prober, key=label):
            results[key] = yield from p.detect_rate_limiting(ZONE[0])

        w.sim.process(probe())
        w.sim.run_until(70_000)
    assert (results["silent"].r1, results["silent"].r2, results["silent"].classification) == (16, 0, "silent_limit")
    assert results["kod"].kod and results["kod"].classification == "kod"
    assert (results["open"].r1, results["open"].r2, results["open"].classification) == (32, 32, "none")


def test_cache_snooping(make_world):
    world = make_world()
    prober = Prober(world.attacker_host)
    results = []

    def snoop(at_ms):
        yield world.sim.env.timeout(at_ms)
        results.append((yield from prober.cache_snoop(RESOLVER_IP, [POOL])))

    world.sim.process(snoop(0))
    stub = StubResolver(world.client_host, RESOLVER_IP)
    world.sim.schedule(10_000, lambda: stub.query(POOL, lambda addresses: None))
    world.sim.process(snoop(20_000))
    world.sim.run_until(40_000)
    assert results[0][POOL].status == "not_cached"
    assert results[1][POOL].status == "cached"
    assert results[1][POOL].ttl <= 150


def test_snooping_a_resolver_that_ignores_rd(make_world):
    world = make_world(resolver={"honor_rd": False})
    prober = Prober(world.attacker_host)
    results = []

    def snoop():
        results.append((yield from prober.cache_snoop(RESOLVER_IP, [POOL])))

    world.sim.process(snoop())
    world.sim.run_until(20_000)
    assert results[0][POOL].status == "untestable"


def test_blind_spoofing_rarely_lands(make_world):
    world = make_world(with_servers=False)
    attacker = Attacker(world.attacker_host, _plan(), world.resolver)
    results = []

    def run():
        results.append((yield from blind_spoof(attacker, world.resolver, attempts=2000, per_query=1000)))

    world.sim.process(run())
    world.sim.run_until(10_000)
    assert results == [0]
    assert attacker.packets["spoofed_dns"] == 2000


def test_attacker_without_spoofing_rights_cannot_plant(make_world):
    world = make_world(with_servers=False)
    grounded = world.sim.add_host("grounded", "10.66.0.2")
    attacker = Attacker(grounded, _plan(), world.resolver)
    assert not grounded.can_spoof
    attacker.zone_order, attacker.cursor = list(ZONE), 0
    predictor = IpidPredictor.fit([(0, 100), (250, 101), (500, 102)])
    with pytest.raises(SpoofingForbidden):
        attacker.forge_and_plant(predictor, 1000)


def _drop_first_kod(server):
    handle = server.handle
    dropped = []

    def lossy(packet, src_ip):
        reply = handle(packet, src_ip)
        if reply is not None and reply.is_kod and not dropped:
            dropped.append(reply)
            return None
        return reply

    server.handle = lossy
    return dropped


@pytest.mark.parametrize("retries, expected", [(0, "silent_limit"), (1, "kod")])
def test_lost_kod_is_recovered_by_a_retry(make_world, retries, expected):
    world = make_world(server=ServerConfig(min_interarrival_s=32, burst=16, kod_before_silence=True))
    dropped = _drop_first_kod(world.servers[ZONE[0]])
    prober = Prober(world.attacker_host)
    results = []

    def classify():
        results.append((yield from prober.detect_rate_limiting(ZONE[0], kod_retries=retries)))

    world.sim.process(classify())
    world.sim.run_until(420_000)
    assert len(dropped) == 1
    assert (results[0].r1, results[0].r2) == (16, 0)
    assert results[0].classification == expected
