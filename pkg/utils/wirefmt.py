"""Byte-exact wire formats for the simulated network.

IPv4 (no options), UDP with the pseudo-header checksum, ICMP "fragmentation
needed", DNS without name compression and 48-byte NTP packets, plus the
fragmentation, reassembly and ones'-complement arithmetic the fragment
poisoning attack is built on. Everything here is a pure function on values.
"""
import ipaddress
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, List, Optional, Tuple

import numpy as np

PROTO_ICMP = 1
PROTO_UDP = 17

IPV4_HEADER_LEN = 20
UDP_HEADER_LEN = 8
ICMP_HEADER_LEN = 8
ICMP_EMBEDDED_LEN = 28
MIN_MTU = 68
MAX_IPV4_LEN = 65535

DNS_HEADER_LEN = 12
DNS_TYPE_A = 1
DNS_CLASS_IN = 1
RCODE_NOERROR = 0
RCODE_SERVFAIL = 2
RCODE_NXDOMAIN = 3
RCODE_REFUSED = 5
MAX_LABEL_LEN = 63
MAX_NAME_LEN = 255

NTP_PACKET_LEN = 48
NTP_MODE_CLIENT = 3
NTP_MODE_SERVER = 4
NTP_MODE_CONTROL = 6
KOD_RATE = b"RATE"
# NTP seconds at simulated t=0 (2024-01-01T00:00:00Z).
NTP_BASE_SECONDS = 3_913_056_000

_IPV4_HEADER = struct.Struct("!BBHHHBBH4s4s")
_UDP_HEADER = struct.Struct("!HHHH")
_ICMP_HEADER = struct.Struct("!BBHHH")
_DNS_HEADER = struct.Struct("!HHHHHH")
_RR_FIXED = struct.Struct("!HHIH")
_NTP_PACKET = struct.Struct("!BBbbII4sQQQQ")


class WireFormatError(ValueError):
    """Base class for encoding, decoding and fragmentation errors."""


class Malformed(WireFormatError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class MtuTooSmall(WireFormatError):
    pass


class CannotFragment(WireFormatError):
    pass


class IncompleteHole(WireFormatError):
    pass


class ConflictingLength(WireFormatError):
    pass


class FragmentMismatch(WireFormatError):
    pass


class SlackInsufficient(WireFormatError):
    pass


def ip_to_bytes(address: str) -> bytes:
    return ipaddress.IPv4Address(address).packed


def bytes_to_ip(raw: bytes) -> str:
    return str(ipaddress.IPv4Address(bytes(raw)))


# ---------------------------------------------------------------------------
# Ones'-complement arithmetic
# ---------------------------------------------------------------------------

def ones_complement_sum(data: bytes) -> int:
    """End-around-carry sum of all big-endian 16-bit words (odd input zero-padded)."""
    if len(data) % 2:
        data = bytes(data) + b"\x00"
    if not data:
        return 0
    total = int(np.frombuffer(data, dtype=">u2").sum(dtype=np.uint64))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return total


def internet_checksum(data: bytes) -> int:
    return ~ones_complement_sum(data) & 0xFFFF


def _swap16(word: int) -> int:
    return ((word & 0xFF) << 8) | (word >> 8)


def fix_checksum(original_tail: bytes, modified_tail: bytes, slack_offset: int) -> bytes:
    """Rewrite the 16-bit word at `slack_offset` so `modified_tail` sums like `original_tail`.

    The tail is assumed to start on an even offset of the datagram it belongs to
    (fragment payloads always do). An odd `slack_offset` straddles two aligned
    words, which contributes the byte-swapped value to the sum.
    """
    if slack_offset < 0 or slack_offset + 2 > len(modified_tail):
        raise SlackInsufficient(
            f"slack offset {slack_offset} outside a {len(modified_tail)}-byte tail"
        )
    target = ones_complement_sum(original_tail)
    current = ones_complement_sum(modified_tail)
    if current == target:
        return bytes(modified_tail)
    delta = (target - current) % 0xFFFF

    word = int.from_bytes(modified_tail[slack_offset:slack_offset + 2], "big")
    aligned = word if slack_offset % 2 == 0 else _swap16(word)
    adjusted = (aligned + delta) % 0xFFFF
    if adjusted == 0 and target:
        # same ones'-complement zero, but only 0xFFFF keeps a nonzero sum literal
        adjusted = 0xFFFF
    if slack_offset % 2:
        adjusted = _swap16(adjusted)

    fixed = bytearray(modified_tail)
    fixed[slack_offset:slack_offset + 2] = adjusted.to_bytes(2, "big")
    return bytes(fixed)


# ---------------------------------------------------------------------------
# IPv4
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Ipv4Packet:
    src: str
    dst: str
    protocol: int
    payload: bytes = b""
    ipid: int = 0
    df: bool = False
    mf: bool = False
    frag_offset: int = 0
    ttl: int = 64

    def __post_init__(self):
        if not 0 <= self.ipid <= 0xFFFF:
            raise WireFormatError(f"ipid {self.ipid} outside 16 bits")
        if not 0 <= self.frag_offset < (1 << 13):
            raise WireFormatError(f"fragment offset {self.frag_offset} outside 13 bits")
        if self.frag_offset * 8 + len(self.payload) > MAX_IPV4_LEN:
            raise WireFormatError("fragment ends beyond the 65535-byte datagram limit")
        if IPV4_HEADER_LEN + len(self.payload) > MAX_IPV4_LEN:
            raise WireFormatError("payload too large for one IPv4 packet")

    @property
    def total_length(self) -> int:
        return IPV4_HEADER_LEN + len(self.payload)

    @property
    def header_checksum(self) -> int:
        return internet_checksum(self._header(0))

    @property
    def is_fragment(self) -> bool:
        return self.mf or self.frag_offset > 0

    @property
    def key(self) -> Tuple[str, str, int, int]:
        return (self.src, self.dst, self.protocol, self.ipid)

    def _header(self, checksum: int) -> bytes:
        flags = (0x4000 if self.df else 0) | (0x2000 if self.mf else 0)
        return _IPV4_HEADER.pack(
            0x45, 0, self.total_length, self.ipid, flags | self.frag_offset,
            self.ttl, self.protocol, checksum, ip_to_bytes(self.src), ip_to_bytes(self.dst),
        )

    def encode(self) -> bytes:
        return self._header(self.header_checksum) + bytes(self.payload)

    @classmethod
    def decode(cls, data: bytes) -> "Ipv4Packet":
        if len(data) < IPV4_HEADER_LEN:
            raise Malformed("truncated IPv4 header", len(data))
        (ver_ihl, _tos, total_length, ipid, flags_frag, ttl, protocol, _checksum,
         src, dst) = _IPV4_HEADER.unpack_from(data)
        if ver_ihl != 0x45:
            raise Malformed("not an option-free IPv4 header", 0)
        if total_length < IPV4_HEADER_LEN or total_length > len(data):
            raise Malformed(f"total length {total_length} inconsistent with buffer", 2)
        if flags_frag & 0x8000:
            raise Malformed("reserved flag set", 6)
        if ones_complement_sum(data[:IPV4_HEADER_LEN]) != 0xFFFF:
            raise Malformed("bad header checksum", 10)
        return cls(
            src=bytes_to_ip(src),
            dst=bytes_to_ip(dst),
            protocol=protocol,
            payload=bytes(data[IPV4_HEADER_LEN:total_length]),
            ipid=ipid,
            df=bool(flags_frag & 0x4000),
            mf=bool(flags_frag & 0x2000),
            frag_offset=flags_frag & 0x1FFF,
            ttl=ttl,
        )


def fragment_packet(pkt: Ipv4Packet, mtu: int) -> List[Ipv4Packet]:
    """Split `pkt` into fragments of at most `mtu` bytes each."""
    if mtu < MIN_MTU:
        raise MtuTooSmall(f"mtu {mtu} below the IPv4 minimum of {MIN_MTU}")
    if pkt.df:
        raise CannotFragment("don't-fragment flag set")
    if pkt.is_fragment:
        raise CannotFragment("packet is already a fragment")
    if pkt.total_length <= mtu:
        return [pkt]

    chunk = (mtu - IPV4_HEADER_LEN) // 8 * 8
    payload = bytes(pkt.payload)
    fragments = []
    for start in range(0, len(payload), chunk):
        piece = payload[start:start + chunk]
        fragments.append(replace(
            pkt,
            payload=piece,
            mf=start + chunk < len(payload),
            frag_offset=start // 8,
        ))
    return fragments


def reassemble_fragments(frags: Iterable[Ipv4Packet]) -> Ipv4Packet:
    """Rebuild a datagram from fragments given in arrival order.

    Overlapping byte ranges keep the bytes of the fragment that arrived first.
    """
    frags = list(frags)
    if not frags:
        raise IncompleteHole("no fragments")
    key = frags[0].key
    if any(f.key != key for f in frags):
        raise FragmentMismatch("fragments do not share (src, dst, protocol, ipid)")

    terminal_ends = {f.frag_offset * 8 + len(f.payload) for f in frags if not f.mf}
    if not terminal_ends:
        raise IncompleteHole("missing terminal fragment")
    if len(terminal_ends) > 1:
        raise ConflictingLength(f"terminal fragments disagree on length: {sorted(terminal_ends)}")
    total = terminal_ends.pop()
    for f in frags:
        end = f.frag_offset * 8 + len(f.payload)
        if end > total:
            raise ConflictingLength(f"fragment ends at {end}, datagram length is {total}")

    buffer = np.zeros(total, dtype=np.uint8)
    covered = np.zeros(total, dtype=bool)
    for f in frags:
        start = f.frag_offset * 8
        end = start + len(f.payload)
        segment = np.frombuffer(f.payload, dtype=np.uint8)
        free = ~covered[start:end]
        buffer[start:end][free] = segment[free]
        covered[start:end] = True
    if not covered.all():
        raise IncompleteHole(f"gap at byte {int(np.argmin(covered))}")

    first = next(f for f in frags if f.frag_offset == 0)
    return replace(first, payload=buffer.tobytes(), mf=False, frag_offset=0)


# ---------------------------------------------------------------------------
# UDP
# ---------------------------------------------------------------------------

def udp_pseudo_header(src: str, dst: str, length: int) -> bytes:
    return struct.pack("!4s4sxBH", ip_to_bytes(src), ip_to_bytes(dst), PROTO_UDP, length)


def udp_checksum(src: str, dst: str, segment: bytes) -> int:
    """Checksum for a UDP segment whose checksum field is zero."""
    length = struct.unpack_from("!H", segment, 4)[0]
    value = internet_checksum(udp_pseudo_header(src, dst, length) + bytes(segment))
    return value or 0xFFFF


def verify_udp_checksum(src: str, dst: str, segment: bytes) -> bool:
    if len(segment) < UDP_HEADER_LEN:
        return False
    length, checksum = struct.unpack_from("!HH", segment, 4)
    if checksum == 0:
        return True
    return ones_complement_sum(udp_pseudo_header(src, dst, length) + bytes(segment)) == 0xFFFF


@dataclass(frozen=True)
class UdpDatagram:
    src_port: int
    dst_port: int
    length: int
    checksum: int
    payload: bytes = b""

    @classmethod
    def build(cls, src: str, dst: str, src_port: int, dst_port: int, payload: bytes) -> "UdpDatagram":
        length = UDP_HEADER_LEN + len(payload)
        blank = _UDP_HEADER.pack(src_port, dst_port, length, 0) + bytes(payload)
        return cls(src_port, dst_port, length, udp_checksum(src, dst, blank), bytes(payload))

    def encode(self) -> bytes:
        return _UDP_HEADER.pack(self.src_port, self.dst_port, self.length, self.checksum) + bytes(self.payload)

    @classmethod
    def decode(cls, data: bytes, trim: bool = True) -> "UdpDatagram":
        """Parse a segment; `trim=False` keeps bytes beyond the UDP length field."""
        if len(data) < UDP_HEADER_LEN:
            raise Malformed("truncated UDP header", len(data))
        src_port, dst_port, length, checksum = _UDP_HEADER.unpack_from(data)
        if length < UDP_HEADER_LEN or length > len(data):
            raise Malformed(f"UDP length {length} inconsistent with {len(data)}-byte segment", 4)
        end = length if trim else len(data)
        return cls(src_port, dst_port, length, checksum, bytes(data[UDP_HEADER_LEN:end]))


# ---------------------------------------------------------------------------
# ICMP fragmentation needed
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IcmpFragNeeded:
    next_hop_mtu: int
    embedded: bytes
    icmp_type: int = 3
    icmp_code: int = 4

    def __post_init__(self):
        if self.next_hop_mtu < MIN_MTU:
            raise MtuTooSmall(f"next-hop mtu {self.next_hop_mtu} below {MIN_MTU}")
        if len(self.embedded) != ICMP_EMBEDDED_LEN:
            raise WireFormatError(f"embedded header must be {ICMP_EMBEDDED_LEN} bytes")

    @classmethod
    def for_packet(cls, pkt: Ipv4Packet, mtu: int) -> "IcmpFragNeeded":
        raw = pkt.encode()[:ICMP_EMBEDDED_LEN]
        return cls(next_hop_mtu=mtu, embedded=raw.ljust(ICMP_EMBEDDED_LEN, b"\x00"))

    @property
    def original_src(self) -> str:
        return bytes_to_ip(self.embedded[12:16])

    @property
    def original_dst(self) -> str:
        return bytes_to_ip(self.embedded[16:20])

    def encode(self) -> bytes:
        blank = _ICMP_HEADER.pack(self.icmp_type, self.icmp_code, 0, 0, self.next_hop_mtu) + self.embedded
        checksum = internet_checksum(blank)
        return _ICMP_HEADER.pack(self.icmp_type, self.icmp_code, checksum, 0, self.next_hop_mtu) + self.embedded

    @classmethod
    def decode(cls, data: bytes) -> "IcmpFragNeeded":
        if len(data) < ICMP_HEADER_LEN + ICMP_EMBEDDED_LEN:
            raise Malformed("truncated ICMP message", len(data))
        icmp_type, icmp_code, _checksum, _unused, mtu = _ICMP_HEADER.unpack_from(data)
        if (icmp_type, icmp_code) != (3, 4):
            raise Malformed(f"not fragmentation-needed (type {icmp_type} code {icmp_code})", 0)
        if ones_complement_sum(data) != 0xFFFF:
            raise Malformed("bad ICMP checksum", 2)
        if mtu < MIN_MTU:
            raise Malformed(f"next-hop mtu {mtu} below {MIN_MTU}", 6)
        return cls(next_hop_mtu=mtu, embedded=bytes(data[ICMP_HEADER_LEN:ICMP_HEADER_LEN + ICMP_EMBEDDED_LEN]))


# ---------------------------------------------------------------------------
# DNS
# ---------------------------------------------------------------------------

def encode_name(name: str) -> bytes:
    if not name:
        return b"\x00"
    out = bytearray()
    for label in name.split("."):
        raw = label.encode("ascii")
        if not raw or len(raw) > MAX_LABEL_LEN:
            raise WireFormatError(f"invalid label {label!r} in {name!r}")
        out.append(len(raw))
        out += raw
    out.append(0)
    if len(out) > MAX_NAME_LEN:
        raise WireFormatError(f"name {name!r} longer than {MAX_NAME_LEN} bytes")
    return bytes(out)


def decode_name(data: bytes, offset: int) -> Tuple[str, int]:
    labels = []
    start = offset
    while True:
        if offset >= len(data):
            raise Malformed("truncated name", offset)
        length = data[offset]
        if length & 0xC0 == 0xC0:
            raise Malformed("compression pointer not supported", offset)
        if length & 0xC0:
            raise Malformed("unsupported label type", offset)
        offset += 1
        if length == 0:
            break
        if offset + length > len(data):
            raise Malformed("truncated label", offset)
        try:
            label = data[offset:offset + length].decode("ascii")
        except UnicodeDecodeError as e:
            raise Malformed("non-ASCII label", offset) from e
        if "." in label:
            raise Malformed("label contains a dot", offset)
        labels.append(label.lower())
        offset += length
        if offset - start > MAX_NAME_LEN:
            raise Malformed("name too long", start)
    return ".".join(labels), offset


@dataclass(frozen=True)
class DnsQuestion:
    qname: str
    qtype: int = DNS_TYPE_A
    qclass: int = DNS_CLASS_IN

    def __post_init__(self):
        object.__setattr__(self, "qname", self.qname.lower().rstrip("."))

    def encode(self) -> bytes:
        return encode_name(self.qname) + struct.pack("!HH", self.qtype, self.qclass)


@dataclass(frozen=True)
class ResourceRecord:
    name: str
    rtype: int
    rclass: int
    ttl: int
    rdata: bytes

    def __post_init__(self):
        object.__setattr__(self, "name", self.name.lower().rstrip("."))
        if not 0 <= self.ttl <= 0xFFFFFFFF:
            raise WireFormatError(f"ttl {self.ttl} outside 32 bits")
        if self.rtype == DNS_TYPE_A and len(self.rdata) != 4:
            raise WireFormatError("A record rdata must be exactly 4 bytes")

    @classmethod
    def a(cls, name: str, address: str, ttl: int) -> "ResourceRecord":
        return cls(name, DNS_TYPE_A, DNS_CLASS_IN, ttl, ip_to_bytes(address))

    @property
    def address(self) -> str:
        return bytes_to_ip(self.rdata)

    def encode(self) -> bytes:
        return encode_name(self.name) + _RR_FIXED.pack(self.rtype, self.rclass, self.ttl, len(self.rdata)) + self.rdata


def _decode_record(data: bytes, offset: int) -> Tuple[ResourceRecord, int]:
    name, offset = decode_name(data, offset)
    if offset + _RR_FIXED.size > len(data):
        raise Malformed("truncated resource record", offset)
    rtype, rclass, ttl, rdlength = _RR_FIXED.unpack_from(data, offset)
    offset += _RR_FIXED.size
    if offset + rdlength > len(data):
        raise Malformed("truncated rdata", offset)
    if rtype == DNS_TYPE_A and rdlength != 4:
        raise Malformed(f"A record with {rdlength}-byte rdata", offset - 2)
    rdata = bytes(data[offset:offset + rdlength])
    return ResourceRecord(name, rtype, rclass, ttl, rdata), offset + rdlength


@dataclass(frozen=True)
class DnsMessage:
    txid: int
    qr: bool = False
    aa: bool = False
    rd: bool = False
    ra: bool = False
    rcode: int = RCODE_NOERROR
    question: Optional[DnsQuestion] = None
    answers: Tuple[ResourceRecord, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "answers", tuple(self.answers))
        if not 0 <= self.txid <= 0xFFFF:
            raise WireFormatError(f"txid {self.txid} outside 16 bits")
        if not 0 <= self.rcode <= 0xF:
            raise WireFormatError(f"rcode {self.rcode} outside 4 bits")

    def _flags(self) -> int:
        return ((0x8000 if self.qr else 0) | (0x0400 if self.aa else 0)
                | (0x0100 if self.rd else 0) | (0x0080 if self.ra else 0) | self.rcode)

    def encode(self) -> bytes:
        out = bytearray(_DNS_HEADER.pack(
            self.txid, self._flags(), 1 if self.question else 0, len(self.answers), 0, 0))
        if self.question:
            out += self.question.encode()
        for record in self.answers:
            out += record.encode()
        return bytes(out)

    def answer_ttl_offsets(self) -> List[int]:
        """Byte offset of each answer record's TTL field within `encode()`."""
        offset = DNS_HEADER_LEN + (len(self.question.encode()) if self.question else 0)
        offsets = []
        for record in self.answers:
            offsets.append(offset + len(encode_name(record.name)) + 4)
            offset += len(record.encode())
        return offsets

    @classmethod
    def decode(cls, data: bytes, trailing_answers: bool = False) -> "DnsMessage":
        """Parse a message; `trailing_answers` reads records past the header counts."""
        if len(data) < DNS_HEADER_LEN:
            raise Malformed("truncated DNS header", len(data))
        txid, flags, qdcount, ancount, nscount, arcount = _DNS_HEADER.unpack_from(data)
        if flags & 0x7800:
            raise Malformed("unsupported opcode", 2)
        if flags & 0x0200:
            raise Malformed("truncated-response flag not supported", 2)
        if flags & 0x0070:
            raise Malformed("reserved header bits set", 3)
        if qdcount > 1:
            raise Malformed(f"{qdcount} questions", 4)
        if nscount or arcount:
            raise Malformed("authority/additional sections not supported", 8)

        offset = DNS_HEADER_LEN
        question = None
        if qdcount:
            qname, offset = decode_name(data, offset)
            if offset + 4 > len(data):
                raise Malformed("truncated question", offset)
            qtype, qclass = struct.unpack_from("!HH", data, offset)
            offset += 4
            question = DnsQuestion(qname, qtype, qclass)

        answers = []
        for _ in range(ancount):
            record, offset = _decode_record(data, offset)
            answers.append(record)
        if offset != len(data):
            if not trailing_answers:
                raise Malformed("trailing bytes after message", offset)
            while offset < len(data):
                record, offset = _decode_record(data, offset)
                answers.append(record)

        return cls(
            txid=txid,
            qr=bool(flags & 0x8000),
            aa=bool(flags & 0x0400),
            rd=bool(flags & 0x0100),
            ra=bool(flags & 0x0080),
            rcode=flags & 0x000F,
            question=question,
            answers=tuple(answers),
        )


# ---------------------------------------------------------------------------
# NTP
# ---------------------------------------------------------------------------

def ms_to_ntp(ms: int) -> int:
    """Simulated milliseconds to a 64-bit NTP timestamp."""
    return ((NTP_BASE_SECONDS * 1000 + ms) << 32) // 1000


def ntp_to_ms(timestamp: int) -> int:
    return ((timestamp * 1000 + (1 << 31)) >> 32) - NTP_BASE_SECONDS * 1000


@dataclass(frozen=True)
class NtpPacket:
    mode: int = NTP_MODE_CLIENT
    version: int = 3
    leap: int = 0
    stratum: int = 0
    poll: int = 0
    precision: int = 0
    root_delay: int = 0
    root_dispersion: int = 0
    reference_id: bytes = b"\x00\x00\x00\x00"
    ref_ts: int = 0
    orig_ts: int = 0
    recv_ts: int = 0
    xmit_ts: int = 0
    extension: bytes = b""

    def __post_init__(self):
        if len(self.reference_id) != 4:
            raise WireFormatError("reference_id must be 4 bytes")
        if self.extension and self.mode != NTP_MODE_CONTROL:
            raise WireFormatError("only control packets carry data beyond 48 bytes")

    @property
    def is_kod(self) -> bool:
        return self.stratum == 0 and self.reference_id == KOD_RATE

    @property
    def reference_address(self) -> str:
        return bytes_to_ip(self.reference_id)

    def encode(self) -> bytes:
        first = (self.leap << 6) | (self.version << 3) | self.mode
        return _NTP_PACKET.pack(
            first, self.stratum, self.poll, self.precision, self.root_delay,
            self.root_dispersion, self.reference_id, self.ref_ts, self.orig_ts,
            self.recv_ts, self.xmit_ts,
        ) + self.extension

    @classmethod
    def decode(cls, data: bytes) -> "NtpPacket":
        if len(data) < NTP_PACKET_LEN:
            raise Malformed("truncated NTP packet", len(data))
        (first, stratum, poll, precision, root_delay, root_dispersion, reference_id,
         ref_ts, orig_ts, recv_ts, xmit_ts) = _NTP_PACKET.unpack_from(data)
        mode = first & 0x07
        extension = bytes(data[NTP_PACKET_LEN:])
        if extension and mode != NTP_MODE_CONTROL:
            raise Malformed(f"mode {mode} packet longer than {NTP_PACKET_LEN} bytes", NTP_PACKET_LEN)
        return cls(
            mode=mode, version=(first >> 3) & 0x07, leap=first >> 6, stratum=stratum,
            poll=poll, precision=precision, root_delay=root_delay,
            root_dispersion=root_dispersion, reference_id=bytes(reference_id),
            ref_ts=ref_ts, orig_ts=orig_ts, recv_ts=recv_ts, xmit_ts=xmit_ts,
            extension=extension,
        )
