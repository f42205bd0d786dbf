#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Reference models of connection-less protocol-field generators.

This module holds the simulation clock, the keyed bucket hash and seeded
random streams shared by every model, plus the IPv4 ID generators of Linux,
Windows and the exclusion-window family (macOS, OpenBSD), the macOS ICMP
rate limiter and the mitigation policies that wrap any field generator.
"""

import json
import math
import zlib
import logging
import ipaddress
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
ID_SPACE = 1 << 16
LINUX_BUCKETS = 2048

IPLike = Union[int, str, ipaddress.IPv4Address]


class ModelError(Exception):
    """Base error for generator models."""


class ClockRegressionError(ModelError):
    """Raised when a clock is asked to move backwards."""


class IncompatiblePolicyError(ModelError):
    """Raised when a mitigation policy cannot wrap a generator."""


# ---------------------------------------------------------------------------
# Clock, addresses, hashing, random streams
# ---------------------------------------------------------------------------

@dataclass
class SimClock:
    """Simulated time in seconds; never moves backwards."""
    now: float = 0.0

    def advance_to(self, t: float) -> None:
        if t < self.now - 1e-12:
            raise ClockRegressionError(f"clock at {self.now:.9f}s cannot move back to {t:.9f}s")
        if t > self.now:
            self.now = float(t)

    def jiffies(self, f: int) -> int:
        # the epsilon absorbs float error at exact tick boundaries
        return int(math.floor(self.now * f + 1e-9))


@lru_cache(maxsize=65536)
def _parse_ip(text: str) -> int:
    return int(ipaddress.IPv4Address(text))


def ip_to_int(ip: IPLike) -> int:
    """Convert a dotted quad, IPv4Address or int into a 32-bit integer."""
    if isinstance(ip, (int, np.integer)):
        return int(ip) & 0xFFFFFFFF
    if isinstance(ip, ipaddress.IPv4Address):
        return int(ip)
    return _parse_ip(str(ip))


def int_to_ip(value: int) -> str:
    return str(ipaddress.IPv4Address(int(value) & 0xFFFFFFFF))


def derive_rng(master_seed: int, *labels: Any) -> np.random.Generator:
    """
    Derive an independent, replayable random stream.

    Args:
        master_seed: Scenario master seed
        labels: Any number of stream labels (host role, purpose, trial index)

    Returns:
        A numpy Generator seeded from the master seed and the labels
    """
    words = [abs(int(master_seed))] + [zlib.crc32(str(label).encode('utf-8')) for label in labels]
    return np.random.default_rng(np.random.SeedSequence(words))


def _mix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def keyed_hash64(key: int, *fields: int) -> int:
    """Keyed 64-bit mixing hash over integer fields."""
    h = key & MASK64
    for value in fields:
        h = _mix64(h ^ (int(value) & MASK64))
    return h


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def keyed_hash64_array(key: int, *fields: Any) -> np.ndarray:
    """Vectorised keyed_hash64; fields may be scalars or broadcastable arrays."""
    shape = np.broadcast_shapes(*[np.shape(f) for f in fields]) if fields else ()
    with np.errstate(over='ignore'):
        h = np.full(shape, key & MASK64, dtype=np.uint64)
        for value in fields:
            h = _mix64_array(h ^ np.asarray(value, dtype=np.uint64))
    return h


# ---------------------------------------------------------------------------
# Linux: connection-less IPv4 ID
# ---------------------------------------------------------------------------

@dataclass
class LinuxIpidState:
    """The shared beta/tau counter table of a Linux kernel."""
    beta: np.ndarray
    tau: np.ndarray
    hash_key: int
    f: int = 250

    @classmethod
    def create(cls, rng: np.random.Generator, f: int = 250,
               hash_key: Optional[int] = None) -> 'LinuxIpidState':
        if hash_key is None:
            hash_key = int(rng.integers(0, 1 << 62))
        beta = rng.integers(0, ID_SPACE, size=LINUX_BUCKETS).astype(np.int64)
        tau = np.zeros(LINUX_BUCKETS, dtype=np.int64)
        return cls(beta=beta, tau=tau, hash_key=hash_key, f=f)

    def snapshot(self) -> Dict[str, Any]:
        return {
            "kind": "linux_ipid",
            "f": self.f,
            "hash_key": self.hash_key,
            "beta": self.beta.tolist(),
            "tau": self.tau.tolist(),
        }


def linux_bucket_index(src_ip: IPLike, dst_ip: IPLike, proto: int, net_key: int, hash_key: int) -> int:
    """Bucket of the beta table used for a packet from src_ip to dst_ip."""
    h = keyed_hash64(hash_key, ip_to_int(dst_ip), ip_to_int(src_ip), int(proto), int(net_key))
    return h % LINUX_BUCKETS


def linux_bucket_index_array(src_ip: Any, dst_ips: Any, proto: int, net_key: int, hash_key: int) -> np.ndarray:
    h = keyed_hash64_array(hash_key, np.asarray(dst_ips, dtype=np.uint64),
                           np.asarray(src_ip, dtype=np.uint64), int(proto), int(net_key))
    return (h % np.uint64(LINUX_BUCKETS)).astype(np.int64)


def linux_generate_ipid(state: LinuxIpidState, clock: SimClock, src_ip: IPLike, dst_ip: IPLike,
                        proto: int, net_key: int, rng: np.random.Generator) -> int:
    """
    Emit one IPv4 ID from the Linux counter table.

    The bucket counter advances by 1 plus a uniform draw over the jiffies the
    bucket was idle; exactly one uniform is consumed per packet.
    """
    i = linux_bucket_index(src_ip, dst_ip, proto, net_key, state.hash_key)
    t_now = clock.jiffies(state.f)
    span = t_now - int(state.tau[i])
    u = rng.random()
    hop = 1 + int(u * span) if span > 0 else 1
    value = (int(state.beta[i]) + hop) % ID_SPACE
    state.beta[i] = value
    state.tau[i] = t_now
    return value


def linux_generate_batch(state: LinuxIpidState, jiffies: np.ndarray, buckets: np.ndarray,
                         rng: np.random.Generator) -> np.ndarray:
    """
    Emit IDs for a time-ordered train of packets in one pass.

    Equal to calling linux_generate_ipid packet by packet with the same
    stream: jiffies must be non-decreasing in packet order.
    """
    jiffies = np.asarray(jiffies, dtype=np.int64)
    buckets = np.asarray(buckets, dtype=np.int64)
    n = buckets.size
    if n == 0:
        return np.empty(0, dtype=np.int64)
    u = rng.random(n)

    order = np.argsort(buckets, kind='stable')
    b = buckets[order]
    j = jiffies[order]
    uu = u[order]

    first = np.ones(n, dtype=bool)
    first[1:] = b[1:] != b[:-1]
    prev = np.empty(n, dtype=np.int64)
    prev[1:] = j[:-1]
    prev[first] = state.tau[b[first]]

    span = j - prev
    hop = np.where(span > 0, 1 + np.floor(uu * span).astype(np.int64), 1)

    # running sum of hops restarted at every bucket group
    csum = np.cumsum(hop)
    starts = np.flatnonzero(first)
    group = np.cumsum(first) - 1
    base = csum[starts] - hop[starts]
    within = csum - base[group]

    ids_sorted = (state.beta[b] + within) % ID_SPACE
    last = np.ones(n, dtype=bool)
    last[:-1] = first[1:]
    state.beta[b[last]] = ids_sorted[last]
    state.tau[b[last]] = j[last]

    out = np.empty(n, dtype=np.int64)
    out[order] = ids_sorted
    return out


# ---------------------------------------------------------------------------
# Windows: PathSet
# ---------------------------------------------------------------------------

@dataclass
class PathEntry:
    __slots__ = ("ipid", "last_access")
    ipid: int
    last_access: float


@dataclass
class PurgeCursor:
    start: float
    keys: List[Tuple[int, int]]
    position: int = 0
    second_pass: bool = False


@dataclass
class WindowsPathSet:
    """Windows per-(source, destination) Path objects and the purge machinery."""
    stale_ttl: float = 60.0
    purge_rate: float = 2000.0
    flood_threshold: int = 5000
    size_threshold: int = 32768
    flood_window_len: float = 0.5
    double_purge: bool = False
    paths: Dict[Tuple[int, int], PathEntry] = field(default_factory=dict)
    purge: Optional[PurgeCursor] = None
    flood_window: int = 0
    flood_window_index: int = 0
    purges_started: int = 0
    purged_total: int = 0
    created_total: int = 0
    min_purged_idle: float = math.inf
    purge_log: List[Dict[str, Any]] = field(default_factory=list)

    def snapshot(self) -> Dict[str, Any]:
        return {
            "kind": "windows_pathset",
            "size": len(self.paths),
            "paths": sorted([src, dst, p.ipid, round(p.last_access, 9)]
                            for (src, dst), p in self.paths.items()),
            "purge_active": self.purge is not None,
            "purges_started": self.purges_started,
            "purged_total": self.purged_total,
            "flood_window": self.flood_window,
        }


def _advance_purge(ps: WindowsPathSet, now: float) -> int:
    purged = 0
    while ps.purge is not None:
        cur = ps.purge
        while cur.position < len(cur.keys):
            visit = cur.start + cur.position / ps.purge_rate
            if visit > now:
                return purged
            key = cur.keys[cur.position]
            path = ps.paths.get(key)
            if path is not None:
                idle = visit - path.last_access
                if idle > ps.stale_ttl:
                    del ps.paths[key]
                    purged += 1
                    ps.purged_total += 1
                    ps.min_purged_idle = min(ps.min_purged_idle, idle)
            cur.position += 1
        finished = cur.start + len(cur.keys) / ps.purge_rate
        ps.purge_log.append({"start": cur.start, "end": finished, "visited": len(cur.keys)})
        ps.purge = None
        if ps.double_purge and not cur.second_pass:
            ps.purge = PurgeCursor(start=finished, keys=list(ps.paths.keys()), second_pass=True)
            ps.purges_started += 1
    return purged


def _maybe_start_purge(ps: WindowsPathSet, now: float) -> None:
    if ps.purge is not None:
        return
    if ps.flood_window >= ps.flood_threshold or len(ps.paths) >= ps.size_threshold:
        ps.purge = PurgeCursor(start=now, keys=list(ps.paths.keys()))
        ps.purges_started += 1
        logger.debug(f"Purge sequence started at {now:.3f}s over {len(ps.paths)} paths "
                     f"(flood_window={ps.flood_window})")


def windows_tick(pathset: WindowsPathSet, clock: SimClock) -> Dict[str, Any]:
    """Advance flood accounting and any active purge sequence to clock.now."""
    now = clock.now
    purged = _advance_purge(pathset, now)
    index = int(math.floor(now / pathset.flood_window_len + 1e-9))
    if index != pathset.flood_window_index:
        pathset.flood_window_index = index
        pathset.flood_window = 0
    _maybe_start_purge(pathset, now)
    return {"purged_count": purged, "sequence_active": pathset.purge is not None}


def windows_emit(pathset: WindowsPathSet, clock: SimClock, src_ip: IPLike, dst_ip: IPLike,
                 rng: np.random.Generator) -> int:
    """Emit the IPv4 ID for a packet on the (src, dst) Path, creating it if absent."""
    windows_tick(pathset, clock)
    key = (ip_to_int(src_ip), ip_to_int(dst_ip))
    path = pathset.paths.get(key)
    if path is None:
        path = PathEntry(int(rng.integers(0, ID_SPACE)), clock.now)
        pathset.paths[key] = path
        pathset.flood_window += 1
        pathset.created_total += 1
        _maybe_start_purge(pathset, clock.now)
    else:
        path.ipid = (path.ipid + 1) % ID_SPACE
        path.last_access = clock.now
    return path.ipid


def windows_non_disruption_violations(pathset: WindowsPathSet) -> int:
    """Purged Paths whose idle time at visit was within stale_ttl (always 0 for a sound model)."""
    if pathset.purged_total == 0:
        return 0
    return int(pathset.min_purged_idle <= pathset.stale_ttl)


# ---------------------------------------------------------------------------
# macOS / OpenBSD: exclusion window
# ---------------------------------------------------------------------------

MACOS_EXCLUSION = 4096
OPENBSD_EXCLUSION = 32768


@dataclass
class ExclusionWindowGen:
    """Random IDs excluding the m_cap most recent emissions."""
    m_cap: int
    window: deque = field(default_factory=deque)
    in_window: bytearray = field(default_factory=lambda: bytearray(ID_SPACE))
    emitted: int = 0

    def __post_init__(self):
        if not 0 < self.m_cap < ID_SPACE:
            raise ModelError(f"exclusion window must be in (0, {ID_SPACE}), got {self.m_cap}")

    def _push(self, value: int) -> None:
        if len(self.window) >= self.m_cap:
            self.in_window[self.window.popleft()] = 0
        self.window.append(value)
        self.in_window[value] = 1
        self.emitted += 1

    def snapshot(self) -> Dict[str, Any]:
        return {"kind": "exclusion_window", "m_cap": self.m_cap,
                "emitted": self.emitted, "window": list(self.window)}


def exclusion_generate(gen: ExclusionWindowGen, rng: np.random.Generator) -> int:
    """Draw a uniform ID outside the current window and push it."""
    while True:
        value = int(rng.integers(0, ID_SPACE))
        if not gen.in_window[value]:
            break
    gen._push(value)
    return value


def exclusion_generate_many(gen: ExclusionWindowGen, rng: np.random.Generator, count: int) -> np.ndarray:
    """Emit count IDs, drawing candidates in blocks."""
    out: List[int] = []
    in_window = gen.in_window
    window = gen.window
    m_cap = gen.m_cap
    while len(out) < count:
        block = rng.integers(0, ID_SPACE, size=max(64, 2 * (count - len(out)))).tolist()
        for value in block:
            if in_window[value]:
                continue
            if len(window) >= m_cap:
                in_window[window.popleft()] = 0
            window.append(value)
            in_window[value] = 1
            out.append(value)
            if len(out) == count:
                break
    gen.emitted += len(out)
    return np.asarray(out, dtype=np.int64)


# ---------------------------------------------------------------------------
# macOS: ICMP rate limiter
# ---------------------------------------------------------------------------

@dataclass
class MacIcmpRateLimiter:
    """Per-interval ICMP echo admission with a boot-time random limit."""
    r_limit: int
    interval_len: float = 1.0
    interval_index: int = -1
    interval_count: int = 0

    @classmethod
    def create(cls, rng: np.random.Generator, interval_len: float = 1.0) -> 'MacIcmpRateLimiter':
        return cls(r_limit=int(rng.integers(251, 501)), interval_len=interval_len)

    def snapshot(self) -> Dict[str, Any]:
        return {"kind": "mac_icmp_limiter", "r_limit": self.r_limit,
                "interval_len": self.interval_len, "interval_index": self.interval_index,
                "interval_count": self.interval_count}


def mac_icmp_admit(limiter: MacIcmpRateLimiter, clock: SimClock, rng: np.random.Generator) -> bool:
    """Decide whether an incoming echo request is answered."""
    index = int(math.floor(clock.now / limiter.interval_len + 1e-9))
    if index != limiter.interval_index:
        limiter.interval_index = index
        limiter.interval_count = 0
    seen = limiter.interval_count
    limiter.interval_count += 1
    if seen <= limiter.r_limit:
        return True
    return bool(rng.random() < 1.0 / (seen - limiter.r_limit))


# ---------------------------------------------------------------------------
# Field generators and mitigation
# ---------------------------------------------------------------------------

class FieldKind(str, Enum):
    IPV4_ID = "ipv4_id"
    ISN = "isn"
    FLOW_LABEL = "flow_label"


FIELD_SPACE = {FieldKind.IPV4_ID: ID_SPACE, FieldKind.ISN: 1 << 32, FieldKind.FLOW_LABEL: 1 << 20}


@dataclass(frozen=True)
class FieldRequest:
    """The packet context a generator sees when a field value is needed."""
    src_ip: int
    dst_ip: int
    proto: int
    net_key: int = 0
    df: bool = False


class FieldGenerator:
    """Common interface of every per-packet field generator."""
    kind: FieldKind = FieldKind.IPV4_ID

    def emit(self, clock: SimClock, req: FieldRequest, rng: np.random.Generator) -> int:
        raise NotImplementedError

    def emit_train(self, clock: SimClock, times: np.ndarray, src_ip: int, dst_ips: np.ndarray,
                   proto: int, net_key: int, df: bool, rng: np.random.Generator) -> np.ndarray:
        """Emit values for a time-ordered train; the default walks packet by packet."""
        out = np.empty(len(times), dtype=np.int64)
        for k, (t, dst) in enumerate(zip(np.asarray(times).tolist(), np.asarray(dst_ips).tolist())):
            clock.advance_to(t)
            out[k] = self.emit(clock, FieldRequest(src_ip, int(dst), proto, net_key, df), rng)
        return out

    def advance_train(self, clock: SimClock, times: np.ndarray, src_ip: int, dst_ips: np.ndarray,
                      proto: int, net_key: int, df: bool, rng: np.random.Generator) -> None:
        """Consume state for a train whose field values nobody observes."""
        self.emit_train(clock, times, src_ip, dst_ips, proto, net_key, df, rng)

    def fork(self, rng: np.random.Generator) -> 'FieldGenerator':
        """A fresh generator of the same kind with independent state."""
        raise NotImplementedError

    def random_value(self, rng: np.random.Generator, size: Optional[int] = None):
        return rng.integers(0, FIELD_SPACE[self.kind], size=size)

    def snapshot(self) -> Dict[str, Any]:
        raise NotImplementedError


class LinuxIpidGenerator(FieldGenerator):
    def __init__(self, state: LinuxIpidState):
        self.state = state

    def emit(self, clock, req, rng):
        return linux_generate_ipid(self.state, clock, req.src_ip, req.dst_ip, req.proto, req.net_key, rng)

    def emit_train(self, clock, times, src_ip, dst_ips, proto, net_key, df, rng):
        times = np.asarray(times, dtype=float)
        if times.size == 0:
            return np.empty(0, dtype=np.int64)
        jiffies = np.floor(times * self.state.f + 1e-9).astype(np.int64)
        buckets = linux_bucket_index_array(src_ip, dst_ips, proto, net_key, self.state.hash_key)
        ids = linux_generate_batch(self.state, jiffies, buckets, rng)
        clock.advance_to(float(times[-1]))
        return ids

    def fork(self, rng):
        return LinuxIpidGenerator(LinuxIpidState.create(rng, f=self.state.f))

    def snapshot(self):
        return self.state.snapshot()


class WindowsIpidGenerator(FieldGenerator):
    """One PathSet per network compartment (net_key)."""

    def __init__(self, pathset_options: Optional[Dict[str, Any]] = None):
        self.pathset_options = dict(pathset_options or {})
        self.compartments: Dict[int, WindowsPathSet] = {}

    def pathset(self, net_key: int) -> WindowsPathSet:
        ps = self.compartments.get(net_key)
        if ps is None:
            ps = WindowsPathSet(**self.pathset_options)
            self.compartments[net_key] = ps
        return ps

    def emit(self, clock, req, rng):
        return windows_emit(self.pathset(req.net_key), clock, req.src_ip, req.dst_ip, rng)

    def tick(self, clock: SimClock) -> None:
        for ps in self.compartments.values():
            windows_tick(ps, clock)

    def non_disruption_violations(self) -> int:
        return sum(windows_non_disruption_violations(ps) for ps in self.compartments.values())

    def fork(self, rng):
        return WindowsIpidGenerator(self.pathset_options)

    def snapshot(self):
        return {"kind": "windows_ipid",
                "compartments": {str(k): ps.snapshot() for k, ps in sorted(self.compartments.items())}}


class ExclusionIpidGenerator(FieldGenerator):
    def __init__(self, m_cap: int):
        self.gen = ExclusionWindowGen(m_cap)

    def emit(self, clock, req, rng):
        return exclusion_generate(self.gen, rng)

    def emit_train(self, clock, times, src_ip, dst_ips, proto, net_key, df, rng):
        if len(times):
            clock.advance_to(float(times[-1]))
        return exclusion_generate_many(self.gen, rng, len(times))

    def fork(self, rng):
        return ExclusionIpidGenerator(self.gen.m_cap)

    def snapshot(self):
        return self.gen.snapshot()


class RandomIpidGenerator(FieldGenerator):
    """Stateless uniformly random IPv4 IDs."""

    def emit(self, clock, req, rng):
        return int(rng.integers(0, ID_SPACE))

    def emit_train(self, clock, times, src_ip, dst_ips, proto, net_key, df, rng):
        if len(times):
            clock.advance_to(float(times[-1]))
        return rng.integers(0, ID_SPACE, size=len(times)).astype(np.int64)

    def fork(self, rng):
        return RandomIpidGenerator()

    def snapshot(self):
        return {"kind": "random_ipid"}


class MitigationMode(str, Enum):
    NONE = "none"
    ZERO_ID_WHEN_DF = "zero_id_when_df"
    FULL_RANDOM_ID = "full_random_id"
    PER_DESTINATION_CLASS = "per_destination_class"
    PER_CONTAINER = "per_container"


DEFAULT_PRIVATE_NETS = ("10.0.0.0/8", "172.16.0.0/12", "192.168.0.0/16")


@dataclass
class MitigationPolicy:
    """
    A hardening policy for a field generator.

    destination_classes maps a class name to CIDR blocks; destinations matching
    none of them fall into the 'other' class.
    """
    mode: MitigationMode = MitigationMode.NONE
    destination_classes: Dict[str, Sequence[str]] = field(
        default_factory=lambda: {"private": DEFAULT_PRIVATE_NETS})

    def __post_init__(self):
        self.mode = MitigationMode(self.mode)
        self._nets = [(name, [ipaddress.IPv4Network(c) for c in cidrs])
                      for name, cidrs in self.destination_classes.items()]

    def classify(self, dst_ip: int) -> str:
        address = ipaddress.IPv4Address(int(dst_ip))
        for name, nets in self._nets:
            if any(address in net for net in nets):
                return name
        return "other"

    def classify_array(self, dst_ips: np.ndarray) -> np.ndarray:
        dst = np.asarray(dst_ips, dtype=np.int64)
        labels = np.full(dst.shape, "other", dtype=object)
        for name, nets in reversed(self._nets):
            for net in nets:
                lo = int(net.network_address)
                hi = lo + net.num_addresses
                labels[(dst >= lo) & (dst < hi)] = name
        return labels


class MitigatedGenerator(FieldGenerator):
    """A field generator wrapped by a non-trivial mitigation policy."""

    def __init__(self, inner: FieldGenerator, policy: MitigationPolicy, rng: np.random.Generator):
        self.inner = inner
        self.policy = policy
        self.kind = inner.kind
        self._rng = rng
        self.forks: Dict[Any, FieldGenerator] = {}

    def _fork_for(self, key: Any) -> FieldGenerator:
        gen = self.forks.get(key)
        if gen is None:
            gen = self.inner.fork(self._rng)
            self.forks[key] = gen
        return gen

    def emit(self, clock, req, rng):
        mode = self.policy.mode
        if mode == MitigationMode.ZERO_ID_WHEN_DF:
            return 0 if req.df else self.inner.emit(clock, req, rng)
        if mode == MitigationMode.FULL_RANDOM_ID:
            return int(self.inner.random_value(rng))
        if mode == MitigationMode.PER_DESTINATION_CLASS:
            return self._fork_for(self.policy.classify(req.dst_ip)).emit(clock, req, rng)
        return self._fork_for(req.net_key).emit(clock, req, rng)

    def _train(self, clock, times, src_ip, dst_ips, proto, net_key, df, rng, observed: bool):
        mode = self.policy.mode
        n = len(times)

        def delegate(gen, c, t, d):
            if observed:
                return gen.emit_train(c, t, src_ip, d, proto, net_key, df, rng)
            gen.advance_train(c, t, src_ip, d, proto, net_key, df, rng)
            return np.zeros(len(t), dtype=np.int64)

        if mode == MitigationMode.ZERO_ID_WHEN_DF and df:
            if n:
                clock.advance_to(float(times[-1]))
            return np.zeros(n, dtype=np.int64)
        if mode == MitigationMode.ZERO_ID_WHEN_DF:
            return delegate(self.inner, clock, times, dst_ips)
        if mode == MitigationMode.FULL_RANDOM_ID:
            if n:
                clock.advance_to(float(times[-1]))
            if not observed:
                return np.zeros(n, dtype=np.int64)
            return np.asarray(self.inner.random_value(rng, size=n), dtype=np.int64)
        if mode == MitigationMode.PER_CONTAINER:
            return delegate(self._fork_for(net_key), clock, times, dst_ips)

        times = np.asarray(times, dtype=float)
        dst_ips = np.asarray(dst_ips)
        labels = self.policy.classify_array(dst_ips)
        out = np.empty(n, dtype=np.int64)
        end = clock.now if n == 0 else float(times[-1])
        for name in sorted(set(labels.tolist())):
            idx = np.flatnonzero(labels == name)
            out[idx] = delegate(self._fork_for(name), SimClock(clock.now), times[idx], dst_ips[idx])
        clock.advance_to(end)
        return out

    def emit_train(self, clock, times, src_ip, dst_ips, proto, net_key, df, rng):
        return self._train(clock, times, src_ip, dst_ips, proto, net_key, df, rng, observed=True)

    def advance_train(self, clock, times, src_ip, dst_ips, proto, net_key, df, rng):
        self._train(clock, times, src_ip, dst_ips, proto, net_key, df, rng, observed=False)

    def random_value(self, rng, size=None):
        return self.inner.random_value(rng, size)

    def fork(self, rng):
        return MitigatedGenerator(self.inner.fork(rng), self.policy, rng)

    def snapshot(self):
        return {"kind": "mitigated", "mode": self.policy.mode.value,
                "inner": self.inner.snapshot(),
                "forks": {str(k): g.snapshot() for k, g in sorted(self.forks.items(), key=lambda kv: str(kv[0]))}}


ID_ONLY_MODES = {MitigationMode.ZERO_ID_WHEN_DF}


def apply_mitigation(generator: Any, policy: MitigationPolicy,
                     rng: Optional[np.random.Generator] = None) -> Any:
    """
    Wrap a generator according to a mitigation policy.

    Args:
        generator: A FieldGenerator, or any other stateful model (SYN cache, rate limiter)
        policy: The mitigation policy
        rng: Stream used to seed forked per-class state

    Returns:
        The generator itself for mode none, otherwise a MitigatedGenerator

    Raises:
        IncompatiblePolicyError: If the policy does not apply to the generator
    """
    if policy.mode == MitigationMode.NONE:
        return generator
    if not isinstance(generator, FieldGenerator):
        raise IncompatiblePolicyError(
            f"{type(generator).__name__} has no per-packet field to harden with '{policy.mode.value}'")
    if policy.mode in ID_ONLY_MODES and generator.kind != FieldKind.IPV4_ID:
        raise IncompatiblePolicyError(f"'{policy.mode.value}' only applies to IPv4 ID generators")
    if rng is None:
        rng = np.random.default_rng(0)
    logger.debug(f"Applying mitigation {policy.mode.value} to {type(generator).__name__}")
    return MitigatedGenerator(generator, policy, rng)


# ---------------------------------------------------------------------------
# Snapshots
# ---------------------------------------------------------------------------

def snapshot_state(model: Any) -> Dict[str, Any]:
    """Structured, JSON-serialisable view of any generator model."""
    if not hasattr(model, "snapshot"):
        raise ModelError(f"{type(model).__name__} has no snapshot form")
    return model.snapshot()


def write_snapshot(model: Any, output_path: Union[str, Path]) -> str:
    """Write a model snapshot as sorted-key JSON, suitable for golden files."""
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    with open(output_path, 'w', encoding='utf-8') as f:
        json.dump(snapshot_state(model), f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"Snapshot written to {output_path}")
    return str(output_path)
