#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Covert channels over connection-less probes.

Every channel splits a bit into a slot. The sender perturbs a shared
generator of the target host; the receiver samples IPv4 IDs on its own path
and decodes the bit from them:

- LinuxChannel: bursts on a colliding bucket of the shared counter table
- WindowsChannel: a flood that makes the PathSet purge the receiver's Path
- ExclusionChannel: macOS/OpenBSD ID collisions across the exclusion window
- MacIcmpChannel: exhausting the macOS ICMP echo rate limiter

Slots are scheduled in each party's local time; packets are dispatched
RTT-compensated so they reach the target at the scheduled instant.
"""

import math
import logging
from dataclasses import dataclass, field, fields, asdict
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from os_models import ID_SPACE, MitigationMode
from net_sim import (
    Topology, Party, Endpoint, Proto, PacketTag, TopologyError, address_block,
)
from target_hosts import LinuxHost, WindowsHost, ExclusionHost, MacHost

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

# Spoofed sender pools start this far into the sender's network
SPOOF_INDEX = 5000
REQUEST_TAG = {Proto.ICMP: PacketTag.ECHO_REQUEST, Proto.UDP: PacketTag.UDP_REQUEST, Proto.TCP: PacketTag.SYN}


class ChannelError(Exception):
    """Base class for covert channel failures."""


class SlotInvalidError(ChannelError):
    """A slot produced no usable reading."""


class ChannelConfigError(ChannelError):
    """Channel parameters the topology or the target cannot honour."""


@dataclass
class ChannelParams:
    """Common fields; subclasses add the channel's own."""
    sender_proto: str = "UDP"
    receiver_proto: str = "UDP"
    guard: float = 0.1

    @classmethod
    def from_dict(cls, values: Optional[Dict[str, Any]] = None) -> 'ChannelParams':
        values = dict(values or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ChannelConfigError(f"unknown {cls.__name__} field(s): {', '.join(unknown)}")
        return cls(**values)

    def proto(self, which: str) -> Proto:
        name = getattr(self, f"{which}_proto")
        try:
            return Proto[str(name).upper()]
        except KeyError:
            raise ChannelConfigError(f"unknown protocol '{name}' for the {which}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class SlotRecord:
    """One transmitted bit: what was sent, what the receiver read, and the slot's cost."""
    index: int
    bit: int
    start: float
    end: float
    decoded: Optional[int] = None
    error: Optional[str] = None
    sender_packets: int = 0
    receiver_packets: int = 0
    details: Dict[str, Any] = field(default_factory=dict)

    @property
    def correct(self) -> bool:
        return self.error is None and self.decoded == self.bit

    def to_dict(self) -> Dict[str, Any]:
        return {"index": self.index, "bit": self.bit, "decoded": self.decoded,
                "start": round(self.start, 9), "end": round(self.end, 9),
                "sender_packets": self.sender_packets, "receiver_packets": self.receiver_packets,
                "error": self.error, "details": self.details}


class CovertChannel:
    """
    Sender and receiver logic of one channel over a topology.

    Subclasses implement schedule_bit (queue both parties' packets for a slot)
    and finish_bit (decode from what the receiver collected).
    """
    kind = "base"
    params_class = ChannelParams

    def __init__(self, topology: Topology, params: Optional[Any] = None):
        """
        Args:
            topology: Topology with 'sender' and 'receiver' parties
            params: Channel parameter block, or a dict of its fields
        """
        if params is None or isinstance(params, dict):
            params = self.params_class.from_dict(params)
        self.topology = topology
        self.params = params
        try:
            self.sender = topology.parties["sender"]
            self.receiver = topology.parties["receiver"]
        except KeyError as e:
            raise ChannelConfigError(f"topology lacks the {e.args[0]} party")
        self.sender_target = topology.target_endpoint("sender", params.proto("sender"))
        self.receiver_target = topology.target_endpoint("receiver", params.proto("receiver"))
        self.sender_role, self.sender_iface = topology.interface(self.sender_target.ip)
        self.receiver_role, self.receiver_iface = topology.interface(self.receiver_target.ip)
        self.sender_host = topology.hosts[self.sender_role]
        self.receiver_host = topology.hosts[self.receiver_role]
        self._next_port = 1024
        self.validate()

    # -- hooks ---------------------------------------------------------------

    def validate(self) -> None:
        pass

    def slot_length(self, bit: Optional[int] = None) -> float:
        raise NotImplementedError

    def prepare(self, start: float) -> float:
        """Channel set-up before the first slot; returns the first slot boundary."""
        return start

    def schedule_bit(self, index: int, bit: int, start: float) -> SlotRecord:
        raise NotImplementedError

    def finish_bit(self, record: SlotRecord) -> SlotRecord:
        raise NotImplementedError

    def run_bit(self, index: int, bit: int, start: float) -> SlotRecord:
        """Schedule, simulate and decode a single slot; the clock ends past the slot."""
        record = self.schedule_bit(index, bit, start)
        self.topology.run_until(max(self.topology.clock.now, record.end + self.topology.lead_time()))
        return self.finish(record)

    def finish(self, record: SlotRecord) -> SlotRecord:
        """finish_bit with slot-level failures captured on the record."""
        if record.decoded is not None or record.error is not None:
            return record
        try:
            self.finish_bit(record)
        except SlotInvalidError as e:
            record.error = str(e)
            logger.warning(f"{self.kind} slot {record.index} invalid: {e}")
        return record

    # -- helpers -------------------------------------------------------------

    def ports(self, count: int) -> np.ndarray:
        """Fresh source ports, cycling through the unprivileged range."""
        out = (self._next_port - 1024 + np.arange(count)) % (65536 - 1024) + 1024
        self._next_port = int(out[-1]) + 1 if count else self._next_port
        return out.astype(np.int64)

    def dispatch(self, party: Party, target: Endpoint, arrivals: np.ndarray) -> np.ndarray:
        """Global send times that land packets at the target at the party's local arrival times."""
        arrivals = np.asarray(arrivals, dtype=float)
        if arrivals.size == 0:
            return arrivals
        first = float(arrivals.min())
        advance = first - self.topology.rtt_compensated_dispatch(party.name, target, first)
        return party.to_global(arrivals - advance)

    def send(self, party: Party, target: Endpoint, arrivals: np.ndarray, token: str,
             src_ips: Optional[np.ndarray] = None, sports: Optional[np.ndarray] = None,
             tag: Optional[PacketTag] = None, expect_rst: bool = False,
             source_kind: str = "direct") -> Dict[str, int]:
        arrivals = np.asarray(arrivals, dtype=float)
        if arrivals.size == 0:
            return {"sent": 0, "in_flight": 0}
        if sports is None and target.proto == Proto.TCP:
            sports = self.ports(arrivals.size)
        tag = tag or REQUEST_TAG[target.proto]
        return self.topology.schedule_train(party.name, target, self.dispatch(party, target, arrivals), tag,
                                            src_ips=src_ips, sports=sports, token=token,
                                            collect=party.collect, expect_rst=expect_rst,
                                            source_kind=source_kind)

    def send_one(self, party: Party, target: Endpoint, arrival: float, token: str,
                 tag: Optional[PacketTag] = None) -> bool:
        """A single tracked packet, so the firewall knows its connection."""
        at = float(self.dispatch(party, target, np.array([arrival]))[0])
        sport = int(self.ports(1)[0]) if target.proto != Proto.ICMP else None
        return self.topology.schedule_send(party.name, target, at, tag or REQUEST_TAG[target.proto],
                                           sport=sport, token=token)

    def initial_ids(self, token: str, window: float = 1.0) -> np.ndarray:
        """IDs of the first response wave for a token; later retransmissions are dropped."""
        got = self.receiver.received(token)
        if got["arrival"].size == 0 or "ipid" not in got:
            return np.empty(0, dtype=np.int64)
        keep = got["arrival"] < got["arrival"][0] + window
        return got["ipid"][keep]


# ---------------------------------------------------------------------------
# Linux: shared counter-table buckets
# ---------------------------------------------------------------------------

@dataclass
class LinuxChannelParams(ChannelParams):
    delta_t: float = 0.010
    M: int = 6
    L: Optional[int] = None
    Lambda: int = 14148
    B: float = 17500.0
    n_receiver_ips: int = 1
    piercing: bool = False
    zero_mode: str = "decoy"
    decoy_addresses: int = 90
    use_collider: bool = False
    source_kind: str = "direct"
    sender_proto: str = "ICMP"
    receiver_proto: str = "ICMP"

    def __post_init__(self):
        if self.M < 1 or self.delta_t <= 0 or self.B <= 0:
            raise ChannelConfigError(f"invalid Linux channel parameters M={self.M}, "
                                     f"delta_t={self.delta_t}, B={self.B}")
        if self.zero_mode not in ("decoy", "silent"):
            raise ChannelConfigError(f"zero_mode must be 'decoy' or 'silent', got '{self.zero_mode}'")
        if self.source_kind not in ("direct", "download"):
            raise ChannelConfigError(f"unknown source_kind '{self.source_kind}'")
        if self.n_receiver_ips < 1:
            raise ChannelConfigError("n_receiver_ips must be positive")
        if self.piercing and self.n_receiver_ips == 1:
            self.n_receiver_ips = math.ceil(self.Lambda / 127)
        if self.L is None:
            self.L = 14000 if self.n_receiver_ips == 1 else math.ceil(self.Lambda / self.n_receiver_ips)
        if self.L < 1:
            raise ChannelConfigError("L must be positive")
        if self.piercing and self.L >= 128:
            raise ChannelConfigError(f"piercing mode needs fewer than 128 spoofed addresses, got L={self.L}")

    @property
    def burst(self) -> int:
        return 2 * self.M - 1


def linux_decode_bit(samples: Sequence[Any], params: Optional[LinuxChannelParams] = None) -> int:
    """
    Decode one Linux slot from the receiver's ID samples.

    Args:
        samples: (time, ID) pairs in receive order, or bare IDs
        params: Channel parameters (for M)

    Returns:
        1 iff any consecutive difference mod 2^16 reaches M+1

    Raises:
        SlotInvalidError: With fewer than 2 samples
    """
    M = (params or LinuxChannelParams()).M
    arr = np.asarray(samples, dtype=np.int64)
    ids = arr[:, 1] if arr.ndim == 2 else arr
    if ids.size < 2:
        raise SlotInvalidError(f"{ids.size} sample(s); at least 2 are needed")
    diffs = np.diff(ids) % ID_SPACE
    return int(bool((diffs >= M + 1).any()))


class LinuxChannel(CovertChannel):
    """
    The sender bursts 2M-1 packets from each spoofed address; one of them
    shares the receiver's bucket, whose counter then jumps by more than the
    receiver's sampling can explain.
    """
    kind = "linux"
    params_class = LinuxChannelParams

    def validate(self) -> None:
        p = self.params
        for host in (self.sender_host, self.receiver_host):
            if not isinstance(host, LinuxHost):
                raise ChannelConfigError(f"the Linux channel needs Linux targets, got {host.os_kind}")
        hz = self.receiver_host.hz
        if p.M < p.delta_t * hz:
            raise ChannelConfigError(f"M={p.M} is below delta_t*f={p.delta_t * hz:g}")
        if self.sender.rate_cap is not None and p.B > self.sender.rate_cap:
            raise ChannelConfigError(f"B={p.B:g} pkt/s exceeds the sender's cap of {self.sender.rate_cap:g}")
        if len(self.receiver.ips) < p.n_receiver_ips:
            raise ChannelConfigError(f"receiver has {len(self.receiver.ips)} address(es), "
                                     f"the channel needs {p.n_receiver_ips}")
        try:
            self.spoofed = address_block(self.sender.network, SPOOF_INDEX, p.L)
        except TopologyError as e:
            raise ChannelConfigError(str(e))
        self.collider: Optional[int] = None
        self.active_ips = np.asarray(self.receiver.ips[:p.n_receiver_ips], dtype=np.int64)
        self.decoys = np.empty(0, dtype=np.int64)
        self.has_collider = False

    def sender_buckets(self, addresses: np.ndarray) -> np.ndarray:
        return self.sender_host.buckets(addresses, self.sender_iface, self.sender_target.proto)

    def receiver_buckets(self, addresses: np.ndarray) -> np.ndarray:
        return self.receiver_host.buckets(addresses, self.receiver_iface, self.receiver_target.proto)

    def prepare(self, start: float) -> float:
        p = self.params
        rx_ips = np.asarray(self.receiver.ips[:p.n_receiver_ips], dtype=np.int64)
        rx_buckets = self.receiver_buckets(rx_ips)
        spoof_buckets = self.sender_buckets(self.spoofed)
        hit = np.isin(rx_buckets, spoof_buckets)
        self.has_collider = bool(hit.any()) and self.sender_host is self.receiver_host
        if hit.any():
            self.active_ips = rx_ips[hit]
        else:
            logger.warning(f"No spoofed address shares a bucket with the receiver's "
                           f"{rx_ips.size} address(es); '1' bits cannot be signalled")
            self.active_ips = rx_ips
        pool = address_block(self.sender.network, SPOOF_INDEX + p.L, max(4 * p.decoy_addresses, 1024))
        clear = pool[~np.isin(self.sender_buckets(pool), rx_buckets)]
        self.decoys = clear[:p.decoy_addresses]
        logger.info(f"Linux channel: L={p.L}, {self.active_ips.size} active receiver address(es), "
                    f"{self.decoys.size} decoys, slot {self.slot_length():.3f}s")
        if p.use_collider:
            self.collider, start = self.binary_search_collider(start)
        return start

    def slot_length(self, bit: Optional[int] = None) -> float:
        p = self.params
        count = 1 if self.collider is not None else p.L
        return max(2 * p.delta_t, p.burst * count / p.B) + 2 * p.guard

    def sources(self, bit: int) -> np.ndarray:
        p = self.params
        addresses = np.array([self.collider], dtype=np.int64) if self.collider is not None else self.spoofed
        if bit:
            return np.repeat(addresses, p.burst)
        if p.zero_mode == "silent" or self.decoys.size == 0:
            return np.empty(0, dtype=np.int64)
        return np.resize(np.repeat(self.decoys, p.burst), addresses.size * p.burst)

    def send_bit(self, index: int, bit: int, start: float, addresses: Optional[np.ndarray] = None) -> int:
        """Queue the sender's bursts for a slot; returns the number of packets emitted."""
        p = self.params
        src = self.sources(bit) if addresses is None else np.repeat(addresses, p.burst)
        arrivals = start + p.guard + np.arange(src.size) / p.B
        counts = self.send(self.sender, self.sender_target, arrivals, token=f"linux:{index}:tx",
                           src_ips=src, source_kind=p.source_kind)
        return int(counts["sent"])

    def sample(self, index: int, start: float, length: float) -> int:
        """Queue the receiver's Δt-spaced probes from every active address over the slot."""
        times = start + np.arange(int(math.floor(length / self.params.delta_t + 1e-9))) * self.params.delta_t
        k = self.active_ips.size
        self.send(self.receiver, self.receiver_target, np.repeat(times, k), token=f"linux:{index}:rx",
                  src_ips=np.tile(self.active_ips, times.size))
        return int(times.size * k)

    def schedule_bit(self, index: int, bit: int, start: float) -> SlotRecord:
        length = self.slot_length(bit)
        sent = self.send_bit(index, bit, start)
        sampled = self.sample(index, start, length)
        return SlotRecord(index, int(bit), start, start + length, sender_packets=sent, receiver_packets=sampled,
                          details={"colliding": self.has_collider})

    def decode_token(self, token: str) -> int:
        got = self.receiver.received(token)
        if "ipid" not in got:
            raise SlotInvalidError("no samples returned")
        readings = []
        for ip in self.active_ips.tolist():
            ids = got["ipid"][got["dst_ip"] == ip]
            if ids.size >= 2:
                readings.append(linux_decode_bit(ids, self.params))
        if not readings:
            raise SlotInvalidError("fewer than 2 samples on every receiver address")
        return int(any(readings))

    def finish_bit(self, record: SlotRecord) -> SlotRecord:
        record.decoded = self.decode_token(f"linux:{record.index}:rx")
        return record

    def binary_search_collider(self, start: float,
                               feedback: Optional[Callable[[int], int]] = None) -> Tuple[int, float]:
        """
        Halve the spoofed list until one address collides with the receiver.

        Each round bursts from the first half; the receiver reports back over
        the feedback channel whether its counter jumped.

        Returns:
            (colliding address, time after the search)

        Raises:
            ChannelError: If no spoofed address collides
        """
        if not self.has_collider:
            raise ChannelError("no collider among the spoofed addresses")
        feedback = feedback or (lambda bit: bit)
        p = self.params
        lead = self.topology.lead_time()
        candidates = self.spoofed
        t = start
        rounds = 0
        while candidates.size > 1:
            half = candidates[:candidates.size // 2]
            length = max(2 * p.delta_t, p.burst * half.size / p.B) + 2 * p.guard
            token = f"linux:search{rounds}"
            self.send_bit(-1, 1, t, addresses=half)
            times = t + np.arange(int(math.floor(length / p.delta_t + 1e-9))) * p.delta_t
            self.send(self.receiver, self.receiver_target, np.repeat(times, self.active_ips.size),
                      token=f"{token}:rx", src_ips=np.tile(self.active_ips, times.size))
            self.topology.run_until(t + length + lead)
            hit = feedback(self.decode_token(f"{token}:rx"))
            candidates = half if hit else candidates[half.size:]
            rounds += 1
            t = t + length + 2 * lead
        collider = int(candidates[0])
        bucket = int(self.sender_buckets(np.array([collider]))[0])
        matched = self.active_ips[self.receiver_buckets(self.active_ips) == bucket]
        if matched.size == 0:
            raise ChannelError(f"binary search ended on a non-colliding address after {rounds} rounds")
        self.active_ips = matched
        logger.info(f"Collider found after {rounds} rounds; per-bit cost now {p.burst} packets")
        return collider, t


def linux_send_bit(bit: int, params: LinuxChannelParams, topology: Topology, slot_start: float) -> int:
    """Queue one bit's sender traffic; returns the packets emitted."""
    channel = LinuxChannel(topology, params)
    channel.prepare(slot_start)
    return channel.send_bit(0, bit, slot_start)


def linux_binary_search_collider(params: LinuxChannelParams, topology: Topology,
                                 feedback_channel: Optional[Callable[[int], int]] = None) -> int:
    """Run the collider search from the next usable instant; returns the colliding address."""
    params = LinuxChannelParams.from_dict({**params.to_dict(), "use_collider": False})
    channel = LinuxChannel(topology, params)
    start = channel.prepare(topology.start_time())
    collider, _ = channel.binary_search_collider(start, feedback_channel)
    return collider


# ---------------------------------------------------------------------------
# Windows: PathSet purge
# ---------------------------------------------------------------------------

@dataclass
class WindowsChannelParams(ChannelParams):
    K: int = 6
    cycle_seconds: float = 76.0
    burst_tuples: int = 10000
    burst_window: float = 1.0
    irto: Optional[float] = None
    probe_spacing: float = 0.01

    def __post_init__(self):
        if self.cycle_seconds < 71:
            raise ChannelConfigError(f"cycle_seconds={self.cycle_seconds} is below the 71 s minimum")
        if self.K < 1 or self.burst_tuples < 1 or self.burst_window <= 0:
            raise ChannelConfigError("K, burst_tuples and burst_window must be positive")


def windows_decode_ids(ids: np.ndarray, K: int) -> Tuple[int, int]:
    """
    Decode the IDs seen between the first and the last sampling of a cycle.

    An undisturbed Path advances by one per packet; a fresh Path after a
    purge starts anywhere.

    Returns:
        (bit, ID distance)
    """
    ids = np.asarray(ids, dtype=np.int64)
    d = int((ids[-1] - ids[0]) % ID_SPACE)
    return int(d >= max(2 * K, int(ids.size))), d


def windows_tcp_timing(params: WindowsChannelParams) -> Dict[str, Any]:
    """
    Response schedule of a TCP probe and the resulting per-bit time.

    Returns:
        Dict with the (offset, tag) schedule, the last packet offset, the
        cycle length and the bit rate in bits/hour
    """
    irto = 3.0 if params.irto is None else float(params.irto)
    schedule = [(0.0, PacketTag.SYN_ACK.value), (irto, PacketTag.SYN_ACK.value),
                (3 * irto, PacketTag.SYN_ACK.value), (7 * irto, PacketTag.RST.value)]
    cycle = params.cycle_seconds + max(0.0, 7 * irto - 10.0)
    return {"schedule": schedule, "last_packet": 7 * irto, "cycle_seconds": cycle, "bit_rate": 3600.0 / cycle}


class WindowsChannel(CovertChannel):
    """
    The receiver samples its Path at both ends of a cycle. For a '1' the
    sender floods new Paths mid-cycle; the purge that follows deletes the
    receiver's now stale Path, and the second sampling starts from a fresh
    random ID.
    """
    kind = "windows"
    params_class = WindowsChannelParams

    def validate(self) -> None:
        p = self.params
        for host in (self.sender_host, self.receiver_host):
            if not isinstance(host, WindowsHost):
                raise ChannelConfigError(f"the Windows channel needs Windows targets, got {host.os_kind}")
        ps = self.receiver_host.windows_generator().pathset(self.receiver_iface.net_key)
        self.stale_ttl = ps.stale_ttl
        self.flood_len = ps.flood_window_len
        self.flood_threshold = ps.flood_threshold
        rate = p.burst_tuples / p.burst_window
        if rate < ps.flood_threshold / ps.flood_window_len:
            raise ChannelConfigError(f"sender burst rate {rate:g}/s is below "
                                     f"{ps.flood_threshold / ps.flood_window_len:g}/s; the flood never triggers")
        if p.burst_tuples < ps.flood_threshold:
            raise ChannelConfigError(f"{p.burst_tuples} tuples cannot reach the flood threshold")
        if p.irto is None:
            p.irto = self.receiver_host.irto
        self.pools = [address_block(self.sender.network, SPOOF_INDEX, p.burst_tuples),
                      address_block(self.sender.network, SPOOF_INDEX + p.burst_tuples, p.burst_tuples)]
        self.bursts = 0
        self.checks_purges = self.sender_host.policy.mode == MitigationMode.NONE

    def receiver_activity(self) -> float:
        """How long after a sampling its last response leaves the host."""
        return 7 * self.params.irto if self.receiver_target.proto == Proto.TCP else 0.0

    def slot_length(self, bit: Optional[int] = None) -> float:
        if self.receiver_target.proto == Proto.TCP:
            return windows_tcp_timing(self.params)["cycle_seconds"]
        return self.params.cycle_seconds

    def burst_start(self, start: float) -> float:
        """
        Aligned burst start whose flood begins the purge just after the
        receiver's Path has gone stale.
        """
        p = self.params
        trigger = self.flood_threshold * 0.8 * p.burst_window / p.burst_tuples
        last_access = start + p.guard + (p.K - 1) * p.probe_spacing + self.receiver_activity()
        earliest = last_access + self.stale_ttl + 2 * p.guard - trigger
        return math.ceil((earliest - 0.01) / self.flood_len) * self.flood_len + 0.01

    def purges(self) -> int:
        return self.sender_host.windows_generator().pathset(self.sender_iface.net_key).purges_started

    def schedule_bit(self, index: int, bit: int, start: float) -> SlotRecord:
        p = self.params
        length = self.slot_length(bit)
        probes = np.arange(p.K) * p.probe_spacing
        set1 = start + p.guard + probes
        set2 = start + length - p.guard - probes[::-1]
        self.send(self.receiver, self.receiver_target, set1, token=f"win:{index}:set1")
        self.send(self.receiver, self.receiver_target, set2, token=f"win:{index}:set2")
        sent = 0
        details: Dict[str, Any] = {"purges_before": self.purges()}
        if bit:
            pool = self.pools[self.bursts % 2]
            self.bursts += 1
            t0 = self.burst_start(start)
            arrivals = t0 + np.arange(pool.size) * (0.8 * p.burst_window / pool.size)
            if arrivals[-1] > set2[0] - p.guard:
                raise ChannelConfigError(f"burst at {t0 - start:.2f}s cannot finish before the second sampling")
            sent = int(self.send(self.sender, self.sender_target, arrivals, token=f"win:{index}:burst",
                                 src_ips=pool)["sent"])
            details["burst_offset"] = round(t0 - start, 6)
        return SlotRecord(index, int(bit), start, start + length, sender_packets=sent,
                          receiver_packets=2 * p.K, details=details)

    def finish_bit(self, record: SlotRecord) -> SlotRecord:
        p = self.params
        i = record.index
        set1 = self.receiver.received(f"win:{i}:set1")
        set2 = self.receiver.received(f"win:{i}:set2")
        if set1["arrival"].size == 0 or set2["arrival"].size == 0:
            raise SlotInvalidError("a sampling returned no responses")
        first = set1["arrival"][0]
        wave = min(1.0, p.irto / 2.0)
        last = set2["arrival"][set2["arrival"] < set2["arrival"][0] + wave][-1]
        got = self.receiver.received(f"win:{i - 1}:set2", f"win:{i}:set1", f"win:{i}:set2")
        inside = (got["arrival"] >= first) & (got["arrival"] <= last)
        ids = got["ipid"][inside]
        count = int(ids.size)
        record.decoded, d = windows_decode_ids(ids, p.K)
        record.details.update({"id_delta": d, "window_packets": count})
        if record.bit and self.checks_purges:
            purged = self.purges() > record.details.get("purges_before", 0)
            record.details["purge_started"] = purged
            if not purged:
                record.error = "the sender's flood started no purge"
        return record


def windows_run_bit(bit: int, params: WindowsChannelParams, topology: Topology,
                    start: Optional[float] = None) -> int:
    """One complete Windows cycle; returns the bit the receiver decoded."""
    channel = WindowsChannel(topology, params)
    start = channel.prepare(topology.start_time() if start is None else start)
    return _decoded(channel.run_bit(0, bit, start))


# ---------------------------------------------------------------------------
# macOS / OpenBSD: exclusion window
# ---------------------------------------------------------------------------

EXCLUSION_DEFAULTS = {"macos": {"sender_packets": 5000, "slot_seconds": 2.0},
                      "openbsd": {"sender_packets": 40000, "slot_seconds": 5.0}}


@dataclass
class ExclusionChannelParams(ChannelParams):
    K: int = 700
    m_cap: Optional[int] = None
    sender_packets: Optional[int] = None
    slot_seconds: Optional[float] = None
    probe_rate: float = 10000.0
    sender_rate: float = 20000.0
    source_kind: str = "direct"

    def __post_init__(self):
        if self.K < 1 or self.probe_rate <= 0 or self.sender_rate <= 0:
            raise ChannelConfigError("K, probe_rate and sender_rate must be positive")


class ExclusionChannel(CovertChannel):
    """
    The receiver collects K IDs, the sender pushes at least the exclusion
    window's worth of emissions through the generator (bit '1'), and the
    receiver collects K more. A repeated ID means the window rolled over.
    """
    kind = "exclusion"
    params_class = ExclusionChannelParams

    def validate(self) -> None:
        p = self.params
        for host in (self.sender_host, self.receiver_host):
            if not isinstance(host, ExclusionHost):
                raise ChannelConfigError(f"the exclusion channel needs macOS or OpenBSD targets, got {host.os_kind}")
        defaults = EXCLUSION_DEFAULTS.get(self.receiver_host.os_kind, EXCLUSION_DEFAULTS["macos"])
        if p.m_cap is None:
            p.m_cap = int(self.receiver_host.options.get("m_cap", self.receiver_host.m_cap))
        if p.sender_packets is None:
            p.sender_packets = defaults["sender_packets"]
        if p.slot_seconds is None:
            p.slot_seconds = defaults["slot_seconds"]
        if 2 * p.K >= p.m_cap:
            raise ChannelConfigError(f"2K={2 * p.K} must stay below the exclusion window {p.m_cap}")
        if p.K * p.K < 4 * ID_SPACE:
            logger.warning(f"K={p.K}: K^2 is not much larger than 65536; '1' bits will often be missed")
        if p.sender_packets < p.m_cap:
            raise ChannelConfigError(f"{p.sender_packets} sender packets cannot roll a window of {p.m_cap}")
        if isinstance(self.sender_host, MacHost) and self.sender_target.proto == Proto.ICMP:
            raise ChannelConfigError("the macOS echo limiter caps ICMP emissions; send over UDP or TCP")
        layout = self.layout(0.0)
        if layout["set2"][-1] + p.guard > p.slot_seconds:
            raise ChannelConfigError(f"target emission budget unmet within a {p.slot_seconds}s slot")

    def layout(self, start: float) -> Dict[str, np.ndarray]:
        p = self.params
        set1 = start + p.guard + np.arange(p.K) / p.probe_rate
        burst = set1[-1] + p.guard + np.arange(p.sender_packets) / p.sender_rate
        set2 = burst[-1] + p.guard + np.arange(p.K) / p.probe_rate
        return {"set1": set1, "burst": burst, "set2": set2}

    def slot_length(self, bit: Optional[int] = None) -> float:
        return float(self.params.slot_seconds)

    def schedule_bit(self, index: int, bit: int, start: float) -> SlotRecord:
        p = self.params
        layout = self.layout(start)
        self.send(self.receiver, self.receiver_target, layout["set1"], token=f"ex:{index}:set1")
        sent, delivered = 0, 0
        if bit:
            tcp = self.sender_target.proto == Proto.TCP
            counts = self.send(self.sender, self.sender_target, layout["burst"], token=f"ex:{index}:burst",
                               expect_rst=tcp, source_kind=p.source_kind)
            sent, delivered = int(counts["sent"]), int(counts["in_flight"])
        self.send(self.receiver, self.receiver_target, layout["set2"], token=f"ex:{index}:set2")
        return SlotRecord(index, int(bit), start, start + self.slot_length(bit), sender_packets=sent,
                          receiver_packets=2 * p.K, details={"sender_delivered": delivered})

    def finish_bit(self, record: SlotRecord) -> SlotRecord:
        set1 = self.initial_ids(f"ex:{record.index}:set1")
        set2 = self.initial_ids(f"ex:{record.index}:set2")
        if set1.size == 0 or set2.size == 0:
            raise SlotInvalidError("a probe set returned no IDs")
        shared = np.intersect1d(set1, set2)
        record.decoded = int(shared.size > 0)
        record.details["collisions"] = int(shared.size)
        if record.bit and record.details.get("sender_delivered", 0) < self.params.m_cap:
            record.error = "target emission budget unmet within slot"
        return record


def exclusion_run_bit(bit: int, params: ExclusionChannelParams, topology: Topology,
                      start: Optional[float] = None) -> int:
    channel = ExclusionChannel(topology, params)
    start = channel.prepare(topology.start_time() if start is None else start)
    return _decoded(channel.run_bit(0, bit, start))


# ---------------------------------------------------------------------------
# macOS: ICMP echo limiter
# ---------------------------------------------------------------------------

@dataclass
class MacIcmpChannelParams(ChannelParams):
    burst: int = 600
    burst_rate: float = 6000.0
    slot_seconds: float = 2.0
    sender_proto: str = "ICMP"
    receiver_proto: str = "ICMP"


class MacIcmpChannel(CovertChannel):
    """
    The sender exhausts the current limiter interval with echo requests;
    the receiver's probe near the end of the interval then goes unanswered.
    """
    kind = "mac_icmp"
    params_class = MacIcmpChannelParams

    def validate(self) -> None:
        p = self.params
        if not isinstance(self.receiver_host, MacHost) or self.receiver_host is not self.sender_host:
            raise ChannelConfigError("the ICMP limiter channel needs one macOS target for both parties")
        if self.sender_target.proto != Proto.ICMP or self.receiver_target.proto != Proto.ICMP:
            raise ChannelConfigError("the ICMP limiter channel runs over ICMP echo only")
        self.interval = self.receiver_host.limiter.interval_len
        if p.guard + p.burst / p.burst_rate > self.interval - 2 * p.guard:
            raise ChannelConfigError(f"a burst of {p.burst} at {p.burst_rate:g}/s overruns the limiter interval")
        if p.slot_seconds < self.interval:
            raise ChannelConfigError("the slot must span a whole limiter interval")

    def prepare(self, start: float) -> float:
        return math.ceil(start / self.interval - 1e-9) * self.interval

    def slot_length(self, bit: Optional[int] = None) -> float:
        return float(self.params.slot_seconds)

    def schedule_bit(self, index: int, bit: int, start: float) -> SlotRecord:
        p = self.params
        sent = 0
        if bit:
            arrivals = start + p.guard + np.arange(p.burst) / p.burst_rate
            sent = int(self.send(self.sender, self.sender_target, arrivals, token=f"mac:{index}:burst")["sent"])
        self.send(self.receiver, self.receiver_target, np.array([start + self.interval - 2 * p.guard]),
                  token=f"mac:{index}:probe")
        return SlotRecord(index, int(bit), start, start + self.slot_length(bit), sender_packets=sent,
                          receiver_packets=1)

    def finish_bit(self, record: SlotRecord) -> SlotRecord:
        answered = self.receiver.received(f"mac:{record.index}:probe")["arrival"].size > 0
        record.decoded = int(not answered)
        return record


def mac_icmp_run_bit(bit: int, params: MacIcmpChannelParams, topology: Topology,
                     start: Optional[float] = None) -> int:
    channel = MacIcmpChannel(topology, params)
    start = channel.prepare(topology.start_time() if start is None else start)
    return _decoded(channel.run_bit(0, bit, start))


def _decoded(record: SlotRecord) -> int:
    if record.decoded is None:
        raise SlotInvalidError(record.error or "slot produced no reading")
    return record.decoded
