"""Chronos-style pool generation, sample-and-trim time selection and the pool-poisoning bound."""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Protocol, Sequence, Set, Tuple

import numpy as np
from scipy.stats import hypergeom

from utils.dns import StubResolver
from utils.netsim import Host
from utils.ntp import NTP_PORT, ClientClock, measured_offset
from utils.wirefmt import NTP_MODE_CLIENT, NTP_MODE_SERVER, Malformed, NtpPacket, UdpDatagram, ms_to_ntp, ntp_to_ms

logger = logging.getLogger(__name__)

HONEST = "honest"
MALICIOUS = "malicious"

GENERATION_QUERIES = 24
QUERY_INTERVAL_S = 3600
SAMPLE_SIZE = 15
TRIM = 4


class ChronosError(RuntimeError):
    pass


class InsufficientPool(ChronosError):
    pass


@dataclass
class ChronosPool:
    members: Dict[str, str] = field(default_factory=dict)
    queries_done: int = 0
    generation_queries: int = GENERATION_QUERIES

    @property
    def generation_complete(self) -> bool:
        return self.queries_done >= self.generation_queries

    @property
    def honest_count(self) -> int:
        return sum(1 for p in self.members.values() if p == HONEST)

    @property
    def malicious_count(self) -> int:
        return sum(1 for p in self.members.values() if p == MALICIOUS)

    def add_answer(self, answer: Iterable[Tuple[str, str]]) -> None:
        """Union one lookup's (address, provenance) pairs into the pool."""
        for address, provenance in answer:
            self.members.setdefault(address, provenance)
        self.queries_done += 1


class PoolSource(Protocol):
    def answer(self, query_index: int, t_s: float) -> List[Tuple[str, str]]:
        ...


@dataclass
class ZoneCacheModel:
    """Analytic resolver-plus-nameserver: a rotating honest zone behind a TTL cache.

    At `poison_round` the lookup is answered by the attacker's records, which
    are then served from cache until `malicious_ttl_s` runs out.
    """

    honest_addresses: Sequence[str]
    addresses_per_response: int = 4
    honest_ttl_s: int = 150
    poison_round: Optional[int] = None
    malicious_addresses: Sequence[str] = ()
    malicious_ttl_s: int = 90000
    _cursor: int = 0
    _cached: List[Tuple[str, str]] = field(default_factory=list)
    _cache_expiry_s: float = -1.0

    def answer(self, query_index: int, t_s: float) -> List[Tuple[str, str]]:
        if self._cached and t_s < self._cache_expiry_s:
            return list(self._cached)
        if query_index == self.poison_round:
            self._cached = [(a, MALICIOUS) for a in self.malicious_addresses]
            self._cache_expiry_s = t_s + self.malicious_ttl_s
            return list(self._cached)
        zone = self.honest_addresses
        count = min(self.addresses_per_response, len(zone))
        chosen = [(zone[(self._cursor + i) % len(zone)], HONEST) for i in range(count)]
        self._cursor = (self._cursor + count) % len(zone)
        self._cached = chosen
        self._cache_expiry_s = t_s + self.honest_ttl_s
        return list(chosen)


def pool_generate_step(pool: ChronosPool, source: PoolSource,
                       query_interval_s: float = QUERY_INTERVAL_S) -> ChronosPool:
    """Run the next hourly lookup against `source` and add its answer."""
    if pool.generation_complete:
        return pool
    index = pool.queries_done
    pool.add_answer(source.answer(index, index * query_interval_s))
    return pool


def generate_pool(source: PoolSource, queries: int = GENERATION_QUERIES) -> ChronosPool:
    pool = ChronosPool(generation_queries=queries)
    while not pool.generation_complete:
        pool_generate_step(pool, source)
    return pool


def attack_succeeds(pool: ChronosPool) -> bool:
    """True iff the attacker holds at least two thirds of the pool."""
    malicious = pool.malicious_count
    return malicious > 0 and 2 * len(pool.members) <= 3 * malicious


def chronos_bound(records_per_poison: int, addrs_per_honest_response: int) -> int:
    """Largest N with (2/3)(records + addrs*N) <= records."""
    if records_per_poison < 1 or addrs_per_honest_response < 1:
        raise ValueError("both counts must be at least 1")
    return records_per_poison // (2 * addrs_per_honest_response)


def poison_outcome(poison_round: int, records_per_poison: int = 89, addrs_per_response: int = 4,
                   zone_size: int = 2400, queries: int = GENERATION_QUERIES) -> Tuple[bool, ChronosPool]:
    """Pool and verdict for a single poisoning at `poison_round`, via the analytic zone model."""
    source = ZoneCacheModel(
        honest_addresses=[f"10.{i >> 16 & 255}.{i >> 8 & 255}.{i & 255}" for i in range(zone_size)],
        addresses_per_response=addrs_per_response,
        poison_round=poison_round,
        malicious_addresses=[f"6.6.{i >> 8 & 255}.{i & 255}" for i in range(records_per_poison)],
    )
    pool = generate_pool(source, queries)
    return attack_succeeds(pool), pool


def trimmed_mean(offsets: Sequence[float], trim: int) -> float:
    ordered = np.sort(np.asarray(offsets, dtype=float))
    kept = ordered[trim:len(ordered) - trim]
    return float(kept.mean())


@dataclass
class Selection:
    offset_ms: float
    malicious_fraction: float
    sampled: List[str]


def chronos_select_time(pool: ChronosPool, k: int = SAMPLE_SIZE, d: int = TRIM,
                        rng: Optional[np.random.Generator] = None, honest_offset_ms: float = 0.0,
                        malicious_offset_ms: float = -500_000.0, jitter_ms: float = 0.0) -> Selection:
    """Sample k members, drop the d highest and d lowest offsets, average the rest."""
    if 2 * d >= k:
        raise ValueError(f"trim {d} leaves nothing of a {k}-sample")
    members = list(pool.members)
    if k > len(members):
        raise InsufficientPool(f"sample of {k} from a pool of {len(members)}")
    rng = rng if rng is not None else np.random.default_rng()
    idx = rng.choice(len(members), size=k, replace=False)
    sampled = [members[i] for i in idx]
    malicious = np.array([pool.members[a] == MALICIOUS for a in sampled])
    offsets = np.where(malicious, malicious_offset_ms, honest_offset_ms)
    if jitter_ms:
        offsets = offsets + rng.normal(0.0, jitter_ms, size=k)
    order = np.argsort(offsets, kind="stable")[d:k - d]
    return Selection(
        offset_ms=float(offsets[order].mean()),
        malicious_fraction=float(malicious[order].mean()),
        sampled=sampled,
    )


def selection_majority_rate(pool: ChronosPool, trials: int, k: int = SAMPLE_SIZE, d: int = TRIM,
                            rng: Optional[np.random.Generator] = None) -> float:
    """Share of independent selections whose surviving set is attacker-majority."""
    n = len(pool.members)
    if k > n:
        raise InsufficientPool(f"sample of {k} from a pool of {n}")
    rng = rng if rng is not None else np.random.default_rng()
    malicious = np.array([p == MALICIOUS for p in pool.members.values()])
    picks = rng.random((trials, n)).argsort(axis=1)[:, :k]
    sampled = malicious[picks]
    # malicious servers all offer the lower offset, so trimming drops them from the low end first
    ordered = np.sort(~sampled, axis=1)[:, d:k - d]
    survivors_bad = (~ordered).sum(axis=1)
    return float(np.mean(2 * survivors_bad > k - 2 * d))


def majority_probability(members: int, malicious: int, k: int = SAMPLE_SIZE, d: int = TRIM) -> float:
    """Chance that k draws from `members` servers, trimmed by d, leave an attacker majority."""
    if k > members:
        raise InsufficientPool(f"sample of {k} from a pool of {members}")
    if 2 * d >= k:
        raise ValueError(f"trim {d} leaves nothing of a {k}-sample")
    bad = np.arange(k + 1)
    survivors_bad = bad - np.minimum(bad, d) - (d - np.minimum(k - bad, d))
    probabilities = hypergeom(members, malicious, k).pmf(bad)
    return float(probabilities[2 * survivors_bad > k - 2 * d].sum())


def selection_majority_exact(pool: ChronosPool, k: int = SAMPLE_SIZE, d: int = TRIM) -> float:
    """Closed form of `selection_majority_rate`; the malicious share of a sample is hypergeometric."""
    return majority_probability(len(pool.members), pool.malicious_count, k, d)


class ChronosClient:
    """Builds its pool from hourly lookups, then samples and trims once."""

    def __init__(self, host: Host, resolver_ip: str, hostname: str = "pool.ntp.org",
                 malicious: Optional[Set[str]] = None, boot_at_ms: int = 0,
                 query_interval_s: int = QUERY_INTERVAL_S, generation_queries: int = GENERATION_QUERIES,
                 sample_size: int = SAMPLE_SIZE, trim: int = TRIM, query_jitter_s: float = 0.0):
        self.host = host
        self.sim = host.sim
        self.hostname = hostname
        self.malicious = set(malicious or ())
        self.pool = ChronosPool(generation_queries=generation_queries)
        self.clock = ClientClock()
        self.query_interval_s = query_interval_s
        self.sample_size = sample_size
        self.trim = trim
        self.query_jitter_s = query_jitter_s
        self.selection: Optional[Selection] = None
        self.stub = StubResolver(host, resolver_ip)
        self.rng = self.sim.rng(f"chronos:{host.name}")
        self.boot_at_ms = boot_at_ms
        self._outstanding: Dict[str, int] = {}
        self._offsets: Dict[str, float] = {}
        self._sampled: List[str] = []
        self.port = host.ephemeral_port()
        host.bind(self.port, self._on_datagram)
        self.sim.process(self._generation())

    @property
    def name(self) -> str:
        return self.host.name

    def query_time_ms(self, index: int) -> int:
        """Scheduled time of the index-th pool lookup, before jitter."""
        return self.boot_at_ms + index * self.query_interval_s * 1000

    def _generation(self):
        yield self.sim.env.timeout(self.boot_at_ms)
        for index in range(self.pool.generation_queries):
            target = self.query_time_ms(index)
            if self.query_jitter_s:
                target += int(self.rng.uniform(0, self.query_jitter_s) * 1000)
            if target > self.sim.now:
                yield self.sim.env.timeout(target - self.sim.now)
            self.stub.query(self.hostname, self._on_answer)
        yield self.sim.env.timeout(self.query_interval_s * 1000)
        self._select()

    def _on_answer(self, addresses: List[str]) -> None:
        self.pool.add_answer(
            (a, MALICIOUS if a in self.malicious else HONEST) for a in addresses
        )
        logger.debug("%s: pool has %s members after %s lookups", self.name,
                     len(self.pool.members), self.pool.queries_done)

    def _select(self) -> None:
        members = list(self.pool.members)
        if self.sample_size > len(members):
            logger.warning("%s: %s", self.name, InsufficientPool(
                f"sample of {self.sample_size} from a pool of {len(members)}"))
            return
        idx = self.rng.choice(len(members), size=self.sample_size, replace=False)
        self._sampled = [members[i] for i in idx]
        for address in self._sampled:
            xmit = ms_to_ntp(self.sim.now + self.clock.offset)
            self._outstanding[address] = xmit
            self.host.send_udp(address, self.port, NTP_PORT, NtpPacket(mode=NTP_MODE_CLIENT, xmit_ts=xmit).encode())
        self.sim.schedule(self.sim.now + 1000, self._finish_selection)

    def _on_datagram(self, datagram: UdpDatagram, src_ip: str) -> None:
        try:
            packet = NtpPacket.decode(datagram.payload)
        except Malformed:
            return
        if packet.mode != NTP_MODE_SERVER or self._outstanding.get(src_ip) != packet.orig_ts or packet.is_kod:
            return
        del self._outstanding[src_ip]
        t4 = self.sim.now + self.clock.offset
        self._offsets[src_ip] = measured_offset(ntp_to_ms(packet.orig_ts), ntp_to_ms(packet.recv_ts),
                                                ntp_to_ms(packet.xmit_ts), t4)

    def _finish_selection(self) -> None:
        replies = self._offsets
        usable_trim = min(self.trim, max(0, (len(replies) - 1) // 2))
        if not replies:
            logger.warning("%s: no sampled server answered", self.name)
            return
        ordered = sorted(replies, key=lambda a: replies[a])
        survivors = ordered[usable_trim:len(ordered) - usable_trim]
        offset = trimmed_mean([replies[a] for a in ordered], usable_trim)
        self.selection = Selection(
            offset_ms=offset,
            malicious_fraction=sum(a in self.malicious for a in survivors) / len(survivors),
            sampled=list(self._sampled),
        )
        before = self.clock.offset
        self.clock.offset = before + int(round(offset))
        self.clock.ever_set = True
        if self.clock.offset != before:
            self.sim.emit("clock_step", self.name, offset_from=before, offset_to=self.clock.offset,
                          step=True, sources=len(replies), malicious_fraction=self.selection.malicious_fraction)


def n_table(records_per_poison: int, addrs_per_response: int, max_round: int = GENERATION_QUERIES) -> List[Dict]:
    """Pool composition and verdict for every poison round 0..max_round."""
    rows = []
    bound = chronos_bound(records_per_poison, addrs_per_response)
    for n in range(max_round + 1):
        honest = addrs_per_response * n
        total = honest + records_per_poison
        rows.append({
            "N": n,
            "honest": honest,
            "malicious": records_per_poison,
            "malicious_share": round(records_per_poison / total, 4),
            "succeeds": 2 * total <= 3 * records_per_poison,
            "selection_majority": round(majority_probability(total, records_per_poison), 4)
            if total >= SAMPLE_SIZE else None,
            "within_bound": n <= bound,
        })
    return rows