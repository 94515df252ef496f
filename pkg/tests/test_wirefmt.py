import struct

import numpy as np
import pytest

from utils.wirefmt import (
    MIN_MTU,
    PROTO_UDP,
    CannotFragment,
    ConflictingLength,
    DnsMessage,
    DnsQuestion,
    FragmentMismatch,
    IcmpFragNeeded,
    IncompleteHole,
    Ipv4Packet,
    Malformed,
    MtuTooSmall,
    NtpPacket,
    ResourceRecord,
    SlackInsufficient,
    UdpDatagram,
    fix_checksum,
    fragment_packet,
    internet_checksum,
    ms_to_ntp,
    ntp_to_ms,
    ones_complement_sum,
    reassemble_fragments,
    verify_udp_checksum,
)

SRC, DST = "10.0.1.53", "10.0.0.53"


def test_checksum_matches_reference_vector():
    data = bytes.fromhex("0001f203f4f5f6f7")
    assert ones_complement_sum(data) == 0xDDF2
    assert internet_checksum(data) == 0x220D


def test_odd_length_is_zero_padded():
    assert ones_complement_sum(b"\x12") == 0x1200


def test_ipv4_encode_decode_keeps_fields():
    pkt = Ipv4Packet(SRC, DST, PROTO_UDP, b"x" * 40, ipid=4242, mf=True, frag_offset=3, ttl=17)
    decoded = Ipv4Packet.decode(pkt.encode())
    assert decoded == pkt
    assert decoded.is_fragment


def test_ipv4_decode_rejects_bad_header_checksum():
    raw = bytearray(Ipv4Packet(SRC, DST, PROTO_UDP, b"abc").encode())
    raw[8] ^= 0x01
    with pytest.raises(Malformed):
        Ipv4Packet.decode(bytes(raw))


def test_ipid_outside_16_bits_rejected():
    with pytest.raises(ValueError):
        Ipv4Packet(SRC, DST, PROTO_UDP, ipid=1 << 16)


def test_packet_within_mtu_is_not_fragmented():
    pkt = Ipv4Packet(SRC, DST, PROTO_UDP, b"a" * 48)
    assert fragment_packet(pkt, 68) == [pkt]


def test_fragments_at_minimum_mtu_carry_48_bytes():
    pkt = Ipv4Packet(SRC, DST, PROTO_UDP, bytes(range(150)), ipid=7)
    frags = fragment_packet(pkt, MIN_MTU)
    assert [len(f.payload) for f in frags] == [48, 48, 48, 6]
    assert [f.frag_offset for f in frags] == [0, 6, 12, 18]
    assert [f.mf for f in frags] == [True, True, True, False]
    assert all(f.total_length <= MIN_MTU for f in frags)


def test_fragment_sizes_at_mtu_296():
    frags = fragment_packet(Ipv4Packet(SRC, DST, PROTO_UDP, bytes(528)), 296)
    assert [len(f.payload) for f in frags] == [272, 256]
    assert [f.frag_offset for f in frags] == [0, 34]


@pytest.mark.parametrize("mtu", [68, 296, 548, 1280, 1500])
def test_reassembly_restores_every_payload_size(mtu):
    rng = np.random.default_rng(mtu)
    data = rng.integers(0, 256, 2000, dtype=np.uint8).tobytes()
    for size in range(1, 2001):
        payload = data[:size]
        frags = fragment_packet(Ipv4Packet(SRC, DST, PROTO_UDP, payload, ipid=size), mtu)
        assert all(f.total_length <= mtu for f in frags)
        assert reassemble_fragments(frags).payload == payload
        assert reassemble_fragments(reversed(frags)).payload == payload


def test_fragmenting_needs_a_legal_mtu_and_no_df():
    pkt = Ipv4Packet(SRC, DST, PROTO_UDP, b"a" * 200)
    with pytest.raises(MtuTooSmall):
        fragment_packet(pkt, 67)
    with pytest.raises(CannotFragment):
        fragment_packet(Ipv4Packet(SRC, DST, PROTO_UDP, b"a" * 200, df=True), 68)


def test_overlapping_bytes_keep_first_arrival():
    first = Ipv4Packet(SRC, DST, PROTO_UDP, b"A" * 16, mf=True)
    planted = Ipv4Packet(SRC, DST, PROTO_UDP, b"E" * 16, frag_offset=1)
    genuine = Ipv4Packet(SRC, DST, PROTO_UDP, b"G" * 16, frag_offset=1)
    assert reassemble_fragments([planted, genuine, first]).payload == b"A" * 8 + b"E" * 16


def test_reassembly_errors():
    head = Ipv4Packet(SRC, DST, PROTO_UDP, b"a" * 8, mf=True)
    with pytest.raises(IncompleteHole):
        reassemble_fragments([head])
    with pytest.raises(IncompleteHole):
        reassemble_fragments([head, Ipv4Packet(SRC, DST, PROTO_UDP, b"b" * 8, frag_offset=2)])
    with pytest.raises(ConflictingLength):
        reassemble_fragments([head, Ipv4Packet(SRC, DST, PROTO_UDP, b"b" * 8, frag_offset=1),
                              Ipv4Packet(SRC, DST, PROTO_UDP, b"c" * 16, frag_offset=1)])
    with pytest.raises(FragmentMismatch):
        reassemble_fragments([head, Ipv4Packet(SRC, DST, PROTO_UDP, b"b" * 8, frag_offset=1, ipid=5)])


def test_udp_checksum_covers_pseudo_header_and_payload():
    segment = UdpDatagram.build(SRC, DST, 53, 40000, b"payload").encode()
    assert verify_udp_checksum(SRC, DST, segment)
    assert not verify_udp_checksum("10.0.0.1", DST, segment)
    corrupted = segment[:-1] + bytes([segment[-1] ^ 0xFF])
    assert not verify_udp_checksum(SRC, DST, corrupted)


def test_zero_udp_checksum_is_accepted():
    segment = struct.pack("!HHHH", 1, 2, 12, 0) + b"abcd"
    assert verify_udp_checksum(SRC, DST, segment)


def test_udp_decode_trim():
    segment = UdpDatagram.build(SRC, DST, 53, 40000, b"abcd").encode() + b"tail"
    assert UdpDatagram.decode(segment).payload == b"abcd"
    assert UdpDatagram.decode(segment, trim=False).payload == b"abcdtail"


def _check_fix(rng, length):
    original = rng.integers(0, 256, length, dtype=np.uint8).tobytes()
    modified = rng.integers(0, 256, length + int(rng.integers(0, 9)), dtype=np.uint8).tobytes()
    offset = int(rng.integers(0, len(modified) - 1))
    fixed = fix_checksum(original, modified, offset)
    assert (ones_complement_sum(fixed) - ones_complement_sum(original)) % 0xFFFF == 0
    if ones_complement_sum(original):
        assert ones_complement_sum(fixed) == ones_complement_sum(original)
    assert fixed[:offset] == modified[:offset]
    assert fixed[offset + 2:] == modified[offset + 2:]


def test_fixed_tail_sums_like_original():
    rng = np.random.default_rng(2024)
    for _ in range(500):
        _check_fix(rng, int(rng.integers(2, 200)))


@pytest.mark.slow
def test_fixed_tail_sums_like_original_exhaustive():
    rng = np.random.default_rng(7)
    for _ in range(10_000):
        _check_fix(rng, int(rng.integers(2, 1500)))


def test_fix_checksum_needs_slack_inside_tail():
    with pytest.raises(SlackInsufficient):
        fix_checksum(b"abcd", b"abce", 3)


def test_fixed_word_keeps_a_nonzero_sum():
    fixed = fix_checksum(b"\xff\xff\x00\x00", bytes(4), 2)
    assert fixed == b"\x00\x00\xff\xff"
    assert ones_complement_sum(fixed) == 0xFFFF
    odd = fix_checksum(b"\xff\xff\x00\x00", bytes(4), 1)
    assert ones_complement_sum(odd) == 0xFFFF


def _address(rng):
    return ".".join(str(int(b)) for b in rng.integers(1, 255, 4))


def _forge_fragmented_response(rng, mtu):
    split = (mtu - 20) // 8 * 8
    count = int(rng.integers(split // 28 + 1, split // 28 + 12))
    answers = [ResourceRecord.a("pool.ntp.org", _address(rng), int(rng.integers(1, 1 << 20))) for _ in range(count)]
    genuine = DnsMessage(txid=int(rng.integers(0, 1 << 16)), qr=True, aa=True,
                         question=DnsQuestion("pool.ntp.org"), answers=tuple(answers))
    # records starting inside the first fragment stay untouched
    eligible = [i for i in range(count) if 8 + 12 + 18 + 28 * i >= split]
    swapped = rng.choice(eligible, size=int(rng.integers(1, len(eligible) + 1)), replace=False)
    for i in swapped:
        answers[i] = ResourceRecord.a("pool.ntp.org", _address(rng), int(rng.integers(1, 1 << 20)))
    forged = DnsMessage(txid=genuine.txid, qr=True, aa=True, question=genuine.question, answers=tuple(answers))
    slack = 8 + forged.answer_ttl_offsets()[int(rng.choice(swapped))] + 2

    ipid = int(rng.integers(0, 1 << 16))
    segment = UdpDatagram.build(SRC, DST, 53, 33333, genuine.encode()).encode()
    forged_segment = UdpDatagram.build(SRC, DST, 53, 33333, forged.encode()).encode()
    first = fragment_packet(Ipv4Packet(SRC, DST, PROTO_UDP, segment, ipid=ipid), mtu)[0]
    assert len(first.payload) == split
    tail = fix_checksum(segment[split:], forged_segment[split:], slack - split)
    assert ones_complement_sum(tail) == ones_complement_sum(segment[split:])
    planted = Ipv4Packet(SRC, DST, PROTO_UDP, tail, ipid=ipid, frag_offset=split // 8)
    datagram = reassemble_fragments([planted, first])
    assert verify_udp_checksum(SRC, DST, datagram.payload)
    decoded = DnsMessage.decode(UdpDatagram.decode(datagram.payload).payload)
    assert decoded.txid == genuine.txid
    assert [r.address for r in decoded.answers] == [r.address for r in forged.answers]


@pytest.mark.parametrize("mtu", [68, 296, 548])
def test_forged_tails_reassemble_with_a_valid_checksum(mtu):
    rng = np.random.default_rng(mtu)
    for _ in range(300):
        _forge_fragmented_response(rng, mtu)


@pytest.mark.slow
def test_forged_tails_reassemble_with_a_valid_checksum_exhaustive():
    rng = np.random.default_rng(11)
    for _ in range(10_000):
        _forge_fragmented_response(rng, int(rng.choice([68, 296, 548])))


def test_icmp_frag_needed_round_trip():
    pkt = Ipv4Packet(SRC, DST, PROTO_UDP, bytes(8))
    icmp = IcmpFragNeeded.for_packet(pkt, 68)
    decoded = IcmpFragNeeded.decode(icmp.encode())
    assert decoded.next_hop_mtu == 68
    assert (decoded.original_src, decoded.original_dst) == (SRC, DST)


def test_icmp_rejects_mtu_below_minimum():
    with pytest.raises(MtuTooSmall):
        IcmpFragNeeded(67, bytes(28))


def _pool_response(ttl=150, count=4):
    return DnsMessage(
        txid=0x1234, qr=True, aa=True, question=DnsQuestion("pool.ntp.org"),
        answers=tuple(ResourceRecord.a("pool.ntp.org", f"192.0.2.{10 + i}", ttl) for i in range(count)),
    )


def test_dns_layout_without_compression():
    message = _pool_response()
    raw = message.encode()
    assert len(raw) == 12 + 18 + 4 * 28
    offsets = message.answer_ttl_offsets()
    assert offsets[0] == 12 + 18 + 14 + 4
    assert all(struct.unpack_from("!I", raw, o)[0] == 150 for o in offsets)
    assert DnsMessage.decode(raw) == message


def test_dns_names_are_case_insensitive():
    assert DnsQuestion("POOL.NTP.Org.").qname == "pool.ntp.org"


def test_dns_rejects_compression_pointer():
    raw = bytearray(_pool_response(count=1).encode())
    record_start = 12 + 18
    raw[record_start:record_start + 14] = b"\xc0\x0c" + bytes(12)
    with pytest.raises(Malformed):
        DnsMessage.decode(bytes(raw))


def test_trailing_records_only_read_when_permissive():
    header = _pool_response(count=1)
    extra = ResourceRecord.a("pool.ntp.org", "6.6.6.1", 90000).encode()
    raw = header.encode() + extra
    with pytest.raises(Malformed):
        DnsMessage.decode(raw)
    decoded = DnsMessage.decode(raw, trailing_answers=True)
    assert [r.address for r in decoded.answers] == ["192.0.2.10", "6.6.6.1"]


@pytest.mark.parametrize("ms", [0, 1, 999, 64_000, 123_456_789, -500_000])
def test_ntp_timestamps_keep_milliseconds(ms):
    assert ntp_to_ms(ms_to_ntp(ms)) == ms


def test_ntp_packet_round_trip_and_kod():
    packet = NtpPacket(mode=4, stratum=2, reference_id=bytes([198, 51, 100, 1]), xmit_ts=ms_to_ntp(5))
    raw = packet.encode()
    assert len(raw) == 48
    decoded = NtpPacket.decode(raw)
    assert decoded == packet
    assert decoded.reference_address == "198.51.100.1"
    assert not decoded.is_kod
    assert NtpPacket(mode=4, stratum=0, reference_id=b"RATE").is_kod


def test_only_control_packets_are_longer_than_48_bytes():
    with pytest.raises(Malformed):
        NtpPacket.decode(NtpPacket(mode=4).encode() + b"x")
    control = NtpPacket(mode=6, extension=b'{"peers": []}')
    assert NtpPacket.decode(control.encode()).extension == b'{"peers": []}'
