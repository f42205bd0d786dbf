#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
TCP-side generator models: the NetBSD ISN timer/counter, the NetBSD IPv6
flow-label PRNG and the BSD SYN cache (with the OpenBSD two-set variant).
"""

import math
import heapq
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from os_models import (
    FieldGenerator, FieldKind, FieldRequest, ModelError, SimClock,
    IPLike, ip_to_int, keyed_hash64,
)

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


class SynCacheError(ModelError):
    """Raised for malformed SYN cache operations."""


# ---------------------------------------------------------------------------
# NetBSD ISN
# ---------------------------------------------------------------------------

@dataclass
class NetbsdIsnState:
    conn_counter: int = 0
    timer_hz: int = 2

    def snapshot(self) -> Dict[str, Any]:
        return {"kind": "netbsd_isn", "conn_counter": self.conn_counter, "timer_hz": self.timer_hz}


def netbsd_isn_msb(state: NetbsdIsnState, clock: SimClock, register_connection: bool = False) -> int:
    """Top 8 bits of the ISN: the 2 Hz timer plus the connection counter, mod 256."""
    if register_connection:
        state.conn_counter += 1
    ticks = int(math.floor(clock.now * state.timer_hz + 1e-9))
    return (ticks + state.conn_counter) % 256


def netbsd_isn(state: NetbsdIsnState, clock: SimClock, rng: np.random.Generator) -> int:
    """Full 32-bit ISN for a new connection; the low 24 bits are random."""
    msb = netbsd_isn_msb(state, clock, register_connection=True)
    return (msb << 24) | int(rng.integers(0, 1 << 24))


class IsnGenerator(FieldGenerator):
    kind = FieldKind.ISN

    def __init__(self, state: Optional[NetbsdIsnState] = None):
        self.state = state or NetbsdIsnState()

    def emit(self, clock, req, rng):
        return netbsd_isn(self.state, clock, rng)

    def emit_train(self, clock, times, src_ip, dst_ips, proto, net_key, df, rng):
        times = np.asarray(times, dtype=float)
        n = times.size
        if n == 0:
            return np.empty(0, dtype=np.int64)
        ticks = np.floor(times * self.state.timer_hz + 1e-9).astype(np.int64)
        msb = (ticks + self.state.conn_counter + np.arange(1, n + 1)) % 256
        self.state.conn_counter += n
        clock.advance_to(float(times[-1]))
        return (msb << 24) | rng.integers(0, 1 << 24, size=n)

    def fork(self, rng):
        return IsnGenerator(NetbsdIsnState(timer_hz=self.state.timer_hz))

    def snapshot(self):
        return self.state.snapshot()


# ---------------------------------------------------------------------------
# NetBSD flow label PRNG
# ---------------------------------------------------------------------------

FL_M = 279936          # 2^7 * 3^7
FL_N = 524269          # prime
FL_LOW_BITS = 19
FL_LOW_MASK = (1 << FL_LOW_BITS) - 1
RESEED_SECONDS = 180.0
RESEED_STEPS = 200000


def lcg_affine_power(a: int, b: int, n: int, m: int) -> Tuple[int, int]:
    """(A, B) with x -> A*x + B equal to n applications of x -> a*x + b mod m."""
    result_a, result_b = 1, 0
    base_a, base_b = a % m, b % m
    while n > 0:
        if n & 1:
            result_a, result_b = (base_a * result_a) % m, (base_a * result_b + base_b) % m
        base_a, base_b = (base_a * base_a) % m, (base_a * base_b + base_b) % m
        n >>= 1
    return result_a, result_b


def lcg_jump(x: int, a: int, b: int, n: int, m: int = FL_M) -> int:
    big_a, big_b = lcg_affine_power(a, b, n, m)
    return (big_a * x + big_b) % m


@dataclass
class FlowLabelPrng:
    """State of the flow-label generator: LCG state, output mask and exponent, MSB."""
    x: int
    s1: int
    s2: int
    a: int
    b: int
    g: int
    e: int
    msb: int = 0
    steps_since_reseed: int = 0
    last_reseed: float = 0.0
    reseeds: int = 0
    synack_consumes_steps: bool = False
    reseed_log: List[Dict[str, Any]] = field(default_factory=list)

    @classmethod
    def create(cls, rng: np.random.Generator, now: float = 0.0, msb: int = 0,
               synack_consumes_steps: bool = False) -> 'FlowLabelPrng':
        prng = cls(x=0, s1=0, s2=0, a=1, b=1, g=2, e=1, msb=msb,
                   synack_consumes_steps=synack_consumes_steps)
        flowlabel_reseed(prng, rng, now, flip=False)
        return prng

    def snapshot(self) -> Dict[str, Any]:
        return {"kind": "flowlabel_prng", "x": self.x, "s1": self.s1, "s2": self.s2,
                "a": self.a, "b": self.b, "g": self.g, "msb": self.msb,
                "steps_since_reseed": self.steps_since_reseed,
                "last_reseed": self.last_reseed, "reseeds": self.reseeds}


def flowlabel_reseed(prng: FlowLabelPrng, rng: np.random.Generator, now: float, flip: bool = True) -> None:
    """Draw a fresh seed; a regular reseed also flips the MSB."""
    prng.x = int(rng.integers(0, FL_M))
    prng.s1 = int(rng.integers(0, 1 << FL_LOW_BITS))
    prng.s2 = int(rng.integers(0, FL_N - 1))
    prng.a = pow(7, 2 * int(rng.integers(0, 1 << FL_LOW_BITS)), FL_M)
    while True:
        b = int(rng.integers(1, FL_M))
        if math.gcd(b, FL_M) == 1:
            break
    while True:
        e = int(rng.integers(1, FL_N))
        if math.gcd(e, FL_N - 1) == 1:
            break
    prng.b = b
    prng.e = e
    prng.g = pow(2, e, FL_N)
    if flip:
        prng.msb ^= 1
        prng.reseeds += 1
        prng.reseed_log.append({"time": now, "steps": prng.steps_since_reseed})
        logger.debug(f"Flow label PRNG reseeded at {now:.3f}s after {prng.steps_since_reseed} steps")
    prng.steps_since_reseed = 0
    prng.last_reseed = now


def _reseed_due(prng: FlowLabelPrng, now: float) -> bool:
    return now - prng.last_reseed >= RESEED_SECONDS or prng.steps_since_reseed >= RESEED_STEPS


def flowlabel_invoke(prng: FlowLabelPrng, rng: np.random.Generator) -> int:
    """One PRNG invocation: 1 to 4 LCG steps. Returns the step count."""
    n = int(rng.integers(1, 5))
    for _ in range(n):
        prng.x = (prng.a * prng.x + prng.b) % FL_M
    prng.steps_since_reseed += n
    return n


def flowlabel_output(prng: FlowLabelPrng) -> int:
    return (prng.msb << FL_LOW_BITS) | (prng.s1 ^ pow(prng.g, prng.x + prng.s2, FL_N))


def flowlabel_generate(prng: FlowLabelPrng, rng: np.random.Generator, clock: SimClock) -> int:
    """Produce one 20-bit flow label (two invocations, the second one's output is used)."""
    if _reseed_due(prng, clock.now):
        flowlabel_reseed(prng, rng, clock.now)
    flowlabel_invoke(prng, rng)
    flowlabel_invoke(prng, rng)
    return flowlabel_output(prng)


def flowlabel_synack_label(prng: FlowLabelPrng, rng: np.random.Generator, clock: SimClock) -> int:
    """The SYN+ACK flow label is always 0; drawing steps for it is optional."""
    if prng.synack_consumes_steps:
        flowlabel_generate(prng, rng, clock)
    return 0


def flowlabel_advance_batch(prng: FlowLabelPrng, rng: np.random.Generator, times: np.ndarray) -> int:
    """
    Advance the PRNG over labels generated at the given (sorted) times
    without computing their outputs.

    Returns:
        Number of reseeds that happened inside the batch
    """
    times = np.asarray(times, dtype=float)
    count = times.size
    if count == 0:
        return 0
    steps = rng.integers(1, 5, size=(count, 2)).sum(axis=1)
    reseeds = 0
    k = 0
    while k < count:
        if _reseed_due(prng, float(times[k])):
            flowlabel_reseed(prng, rng, float(times[k]))
            reseeds += 1
        seg = steps[k:]
        before = prng.steps_since_reseed + np.concatenate(([0], np.cumsum(seg)[:-1]))
        due = (before >= RESEED_STEPS) | (times[k:] - prng.last_reseed >= RESEED_SECONDS)
        due[0] = False
        stop = int(np.argmax(due)) if due.any() else seg.size
        total = int(seg[:stop].sum())
        prng.x = lcg_jump(prng.x, prng.a, prng.b, total)
        prng.steps_since_reseed += total
        k += stop
    return reseeds


class FlowLabelGenerator(FieldGenerator):
    kind = FieldKind.FLOW_LABEL

    def __init__(self, prng: FlowLabelPrng):
        self.prng = prng

    def emit(self, clock, req, rng):
        return flowlabel_generate(self.prng, rng, clock)

    def advance_train(self, clock, times, src_ip, dst_ips, proto, net_key, df, rng):
        flowlabel_advance_batch(self.prng, rng, times)
        if len(times):
            clock.advance_to(float(times[-1]))

    def fork(self, rng):
        return FlowLabelGenerator(FlowLabelPrng.create(rng, synack_consumes_steps=self.prng.synack_consumes_steps))

    def snapshot(self):
        return self.prng.snapshot()


# ---------------------------------------------------------------------------
# SYN cache
# ---------------------------------------------------------------------------

SYN_BUCKETS = 293
SYN_BUCKET_LIMIT = 105
SYN_CACHE_LIMIT = 10255
RETRANSMIT_OFFSETS = (0.0, 3.0, 9.0, 21.0, 45.0)
OPENBSD_FREEZE_INSERTIONS = 100000


@dataclass(eq=False)
class SynEntry:
    src_ip: int
    src_port: int
    dst_port: int
    insert_time: float
    retransmit_schedule: Tuple[float, ...]
    bucket: int
    alive: bool = True

    @property
    def key(self) -> Tuple[int, int, int]:
        return (self.src_ip, self.src_port, self.dst_port)


class SynCache:
    """Keyed-hash table of half-open connections with bucket and global limits."""

    def __init__(self, hash_key: int, n_buckets: int = SYN_BUCKETS, bucket_limit: int = SYN_BUCKET_LIMIT,
                 global_cap: int = SYN_CACHE_LIMIT, retransmit_offsets: Tuple[float, ...] = RETRANSMIT_OFFSETS):
        self.hash_key = hash_key
        self.n_buckets = n_buckets
        self.bucket_limit = bucket_limit
        self.global_cap = global_cap
        self.retransmit_offsets = tuple(float(o) for o in retransmit_offsets)
        self.buckets: List[deque] = [deque() for _ in range(n_buckets)]
        self.index: Dict[Tuple[int, int, int], SynEntry] = {}
        self._expiry: List[Tuple[float, int, SynEntry]] = []
        self._seq = 0
        self.frozen = False
        self.insertions = 0
        self.evictions = 0
        self.expirations = 0
        self.resets = 0
        self.refused = 0

    @classmethod
    def create(cls, rng: np.random.Generator, **options) -> 'SynCache':
        return cls(hash_key=int(rng.integers(0, 1 << 62)), **options)

    @property
    def live(self) -> int:
        return len(self.index)

    def bucket_of(self, src_ip: int, src_port: int, dst_port: int) -> int:
        return keyed_hash64(self.hash_key, src_ip, src_port, dst_port) % self.n_buckets

    def _drop(self, entry: SynEntry) -> None:
        entry.alive = False
        self.index.pop(entry.key, None)

    def expire_due(self, now: float) -> int:
        """Drop entries whose final retransmission time has strictly passed."""
        expired = 0
        while self._expiry and self._expiry[0][0] < now:
            _, _, entry = heapq.heappop(self._expiry)
            if entry.alive:
                self.buckets[entry.bucket].remove(entry)
                self._drop(entry)
                self.expirations += 1
                expired += 1
        return expired

    def expire_entry(self, entry: SynEntry) -> bool:
        """Retire an entry after its last SYN+ACK went out."""
        if not entry.alive:
            return False
        self.buckets[entry.bucket].remove(entry)
        self._drop(entry)
        self.expirations += 1
        return True

    def insert(self, clock: SimClock, src_ip: IPLike, src_port: int, dst_port: int) -> Dict[str, Any]:
        now = clock.now
        self.expire_due(now)
        src = ip_to_int(src_ip)
        key = (src, int(src_port), int(dst_port))
        if key in self.index:
            return {"accepted": True, "evicted": None, "entry": self.index[key], "duplicate": True}

        evicted = None
        bucket = self.bucket_of(*key)
        if self.live >= self.global_cap:
            for step in range(self.n_buckets):
                candidate = self.buckets[(bucket + step) % self.n_buckets]
                if candidate:
                    evicted = candidate.popleft()
                    self._drop(evicted)
                    self.evictions += 1
                    break
        if len(self.buckets[bucket]) >= self.bucket_limit:
            self.refused += 1
            return {"accepted": False, "evicted": evicted, "entry": None, "duplicate": False}

        schedule = tuple(now + o for o in self.retransmit_offsets)
        entry = SynEntry(src, key[1], key[2], now, schedule, bucket)
        self.buckets[bucket].append(entry)
        self.index[key] = entry
        self._seq += 1
        heapq.heappush(self._expiry, (schedule[-1], self._seq, entry))
        self.insertions += 1
        return {"accepted": True, "evicted": evicted, "entry": entry, "duplicate": False}

    def reset(self, src_ip: IPLike, src_port: int, dst_port: int) -> bool:
        entry = self.index.get((ip_to_int(src_ip), int(src_port), int(dst_port)))
        if entry is None:
            return False
        self.buckets[entry.bucket].remove(entry)
        self._drop(entry)
        self.resets += 1
        return True

    def clear(self) -> int:
        """Drop everything, counting the entries as expired."""
        dropped = self.live
        for bucket in self.buckets:
            for entry in bucket:
                entry.alive = False
            bucket.clear()
        self.index.clear()
        self._expiry.clear()
        self.expirations += dropped
        return dropped

    def counters(self) -> Dict[str, int]:
        return {"insertions": self.insertions, "evictions": self.evictions,
                "expirations": self.expirations, "resets": self.resets,
                "refused": self.refused, "live": self.live}

    def snapshot(self) -> Dict[str, Any]:
        return {"kind": "syncache", "frozen": self.frozen, **self.counters(),
                "bucket_sizes": [len(b) for b in self.buckets]}


class OpenBsdSynCache:
    """Two-set SYN cache: the active set freezes after a fixed number of insertions."""

    def __init__(self, rng: np.random.Generator, freeze_after: int = OPENBSD_FREEZE_INSERTIONS, **options):
        self._rng = rng
        self.freeze_after = freeze_after
        self.options = options
        self.active = SynCache.create(rng, **options)
        self.frozen: Optional[SynCache] = None
        self.freeze_events: List[float] = []
        self._retired = {"insertions": 0, "evictions": 0, "expirations": 0, "resets": 0, "refused": 0}

    def _sets(self) -> List[SynCache]:
        return [c for c in (self.active, self.frozen) if c is not None]

    def _freeze(self, now: float) -> None:
        if self.frozen is not None:
            self.frozen.clear()
            for name in self._retired:
                self._retired[name] += getattr(self.frozen, name)
        self.frozen = self.active
        self.frozen.frozen = True
        self.active = SynCache.create(self._rng, **self.options)
        self.freeze_events.append(now)
        logger.debug(f"SYN cache set frozen at {now:.3f}s")

    @property
    def live(self) -> int:
        return sum(c.live for c in self._sets())

    def expire_due(self, now: float) -> int:
        return sum(c.expire_due(now) for c in self._sets())

    def expire_entry(self, entry: SynEntry) -> bool:
        for cache in self._sets():
            if cache.index.get(entry.key) is entry:
                return cache.expire_entry(entry)
        return False

    def insert(self, clock: SimClock, src_ip: IPLike, src_port: int, dst_port: int) -> Dict[str, Any]:
        self.expire_due(clock.now)
        if self.active.insertions >= self.freeze_after:
            self._freeze(clock.now)
        return self.active.insert(clock, src_ip, src_port, dst_port)

    def reset(self, src_ip: IPLike, src_port: int, dst_port: int) -> bool:
        return any(cache.reset(src_ip, src_port, dst_port) for cache in self._sets())

    def counters(self) -> Dict[str, int]:
        totals = dict(self._retired)
        for cache in self._sets():
            for name in totals:
                totals[name] += getattr(cache, name)
        totals["live"] = self.live
        return totals

    def snapshot(self) -> Dict[str, Any]:
        return {"kind": "openbsd_syncache", **self.counters(), "freeze_events": list(self.freeze_events),
                "active": self.active.snapshot(),
                "frozen": self.frozen.snapshot() if self.frozen is not None else None}


def syncache_insert(cache, clock: SimClock, src_ip: IPLike, src_port: int, dst_port: int,
                    strict: bool = False) -> Dict[str, Any]:
    """
    Insert a half-open connection.

    Returns:
        Dict with 'accepted', 'evicted' (the evicted entry or None), 'entry' and 'duplicate'

    Raises:
        SynCacheError: In strict mode, when the entry's bucket refuses it
    """
    result = cache.insert(clock, src_ip, src_port, dst_port)
    if strict and not result["accepted"]:
        raise SynCacheError(f"bucket full for {ip_to_int(src_ip)}:{src_port} -> {dst_port}")
    return result


def syncache_reset(cache, src_ip: IPLike, src_port: int, dst_port: int) -> bool:
    return cache.reset(src_ip, src_port, dst_port)


def syncache_conservation_ok(cache) -> bool:
    c = cache.counters()
    return c["insertions"] - c["evictions"] - c["expirations"] - c["resets"] == c["live"]
