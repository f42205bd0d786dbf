#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Covert channels over TCP state of NetBSD and OpenBSD targets.

- NetbsdIsnChannel: sender connections advance the ISN counter byte
- SynCacheChannel: a spoofed SYN flood evicts the receiver's half-open entries
- FlowLabelMsbChannel: 41000 connections force a step reseed that flips the label MSB
- FlowLabelPredictiveChannel: a recovered flow-label seed tells how many steps were consumed
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from os_models import IncompatiblePolicyError, MitigationMode
from tcp_models import FL_LOW_BITS, RESEED_SECONDS, RESEED_STEPS, SYN_CACHE_LIMIT, RETRANSMIT_OFFSETS
from net_sim import Topology, Proto, PacketTag, address_block
from target_hosts import NetBsdHost, SynCacheHost
from flowlabel_cryptanalysis import (
    RecoveredSeed, SampleSet, CryptanalysisError, LogTable, build_log_table, full_attack, predict_sequence,
)
from channels import (
    CovertChannel, ChannelParams, SlotRecord, ChannelError, ChannelConfigError, SlotInvalidError,
    SPOOF_INDEX, _decoded,
)

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

# Expected LCG steps per generated label (two invocations of 1..4 steps)
STEPS_PER_LABEL = 5


# ---------------------------------------------------------------------------
# NetBSD ISN counter
# ---------------------------------------------------------------------------

@dataclass
class NetbsdIsnParams(ChannelParams):
    delta_t: float = 0.2
    threshold: int = 3
    sender_connections: int = 4
    slot_seconds: float = 0.5
    sender_proto: str = "TCP"
    receiver_proto: str = "TCP"

    def __post_init__(self):
        if self.sender_connections < 2:
            raise ChannelConfigError("the ISN channel needs at least 2 sender connections")
        if self.sender_connections + 1 <= self.threshold:
            raise ChannelConfigError(f"{self.sender_connections} connections cannot exceed threshold {self.threshold}")
        if 2 * self.guard + self.delta_t > self.slot_seconds:
            raise ChannelConfigError("the probe pair does not fit in the slot")

    @property
    def formula_threshold(self) -> int:
        return 1 + int(np.ceil(2 * self.delta_t))


def isn_msb(isn: int) -> int:
    return (int(isn) >> 24) & 0xFF


class NetbsdIsnChannel(CovertChannel):
    """The receiver's two SYN probes bracket the sender's connections."""
    kind = "netbsd_isn"
    params_class = NetbsdIsnParams

    def validate(self) -> None:
        p = self.params
        if not isinstance(self.receiver_host, NetBsdHost) or self.receiver_host is not self.sender_host:
            raise ChannelConfigError("the ISN channel needs one NetBSD target for both parties")
        if p.threshold < p.formula_threshold:
            logger.warning(f"threshold {p.threshold} is below 1+ceil(2*delta_t)={p.formula_threshold}; "
                           f"idle slots may decode as '1'")

    def slot_length(self, bit: Optional[int] = None) -> float:
        return float(self.params.slot_seconds)

    def schedule_bit(self, index: int, bit: int, start: float) -> SlotRecord:
        p = self.params
        first = start + p.guard
        second = first + p.delta_t
        self.send_one(self.receiver, self.receiver_target, first, token=f"isn:{index}:m")
        sent = 0
        if bit:
            arrivals = np.linspace(first + 0.25 * p.delta_t, first + 0.75 * p.delta_t, p.sender_connections)
            sent = int(self.send(self.sender, self.sender_target, arrivals, token=f"isn:{index}:tx",
                                 tag=PacketTag.CONNECT)["sent"])
        self.send_one(self.receiver, self.receiver_target, second, token=f"isn:{index}:m2")
        return SlotRecord(index, int(bit), start, start + self.slot_length(bit), sender_packets=sent,
                          receiver_packets=2)

    def first_isn(self, token: str) -> int:
        got = self.receiver.received(token)
        if got["arrival"].size == 0 or "isn" not in got:
            raise SlotInvalidError(f"probe {token} got no SYN+ACK")
        return int(got["isn"][0])

    def finish_bit(self, record: SlotRecord) -> SlotRecord:
        m = isn_msb(self.first_isn(f"isn:{record.index}:m"))
        m2 = isn_msb(self.first_isn(f"isn:{record.index}:m2"))
        delta = (m2 - m) % 256
        record.decoded = int(delta > self.params.threshold)
        record.details["msb_delta"] = delta
        return record


def netbsd_isn_run_bit(bit: int, params: NetbsdIsnParams, topology: Topology,
                       start: Optional[float] = None) -> int:
    channel = NetbsdIsnChannel(topology, params)
    start = channel.prepare(topology.start_time() if start is None else start)
    return _decoded(channel.run_bit(0, bit, start))


# ---------------------------------------------------------------------------
# SYN cache overflow
# ---------------------------------------------------------------------------

@dataclass
class SynCacheParams(ChannelParams):
    K: int = 10
    mu: int = 1000
    survivor_threshold: int = 5
    flood_rate: float = 50000.0
    slot_seconds: float = 50.0
    cache_limit: int = SYN_CACHE_LIMIT
    sender_proto: str = "TCP"
    receiver_proto: str = "TCP"

    def __post_init__(self):
        if self.K < 1 or self.mu < 0 or self.flood_rate <= 0:
            raise ChannelConfigError("K and flood_rate must be positive, mu non-negative")
        if not 0 < self.survivor_threshold <= self.K:
            raise ChannelConfigError(f"survivor_threshold must lie in 1..K, got {self.survivor_threshold}")

    @property
    def flood_size(self) -> int:
        return self.cache_limit + self.mu


class SynCacheChannel(CovertChannel):
    """
    The receiver plants K half-open connections and watches their SYN+ACK
    retransmissions. A '1' floods the cache past its limit; the evicted
    entries never send their last retransmission.
    """
    kind = "syncache"
    params_class = SynCacheParams

    def validate(self) -> None:
        p = self.params
        if not isinstance(self.receiver_host, SynCacheHost) or self.receiver_host is not self.sender_host:
            raise ChannelConfigError("the SYN cache channel needs one NetBSD or OpenBSD target for both parties")
        if self.receiver_host.policy.mode != MitigationMode.NONE:
            raise IncompatiblePolicyError("ID mitigation policies do not apply to the SYN cache")
        if self.receiver.auto_rst:
            raise ChannelConfigError("the receiver must leave its planted connections half-open")
        self.final_offset = RETRANSMIT_OFFSETS[-1]
        span = p.guard + p.flood_size / p.flood_rate + self.final_offset + p.guard
        if span > p.slot_seconds:
            raise ChannelConfigError(f"slot of {p.slot_seconds}s is shorter than the {span:.1f}s retransmit window")
        self.pool = address_block(self.sender.network, SPOOF_INDEX, p.flood_size)

    def slot_length(self, bit: Optional[int] = None) -> float:
        return float(self.params.slot_seconds)

    def freeze_events(self) -> List[float]:
        cache = self.receiver_host.syncache
        return list(getattr(cache, "freeze_events", []))

    def schedule_bit(self, index: int, bit: int, start: float) -> SlotRecord:
        p = self.params
        plant = start + p.guard + np.arange(p.K) * 0.001
        self.send(self.receiver, self.receiver_target, plant, token=f"sc:{index}:plant")
        sent = 0
        if bit:
            arrivals = plant[-1] + 0.01 + np.arange(p.flood_size) / p.flood_rate
            sports = self.topology.rng.integers(1024, 65536, size=p.flood_size)
            sent = int(self.send(self.sender, self.sender_target, arrivals, token=f"sc:{index}:flood",
                                 src_ips=self.pool, sports=sports)["sent"])
        return SlotRecord(index, int(bit), start, start + self.slot_length(bit), sender_packets=sent,
                          receiver_packets=p.K, details={"freezes_before": len(self.freeze_events())})

    def finish_bit(self, record: SlotRecord) -> SlotRecord:
        freezes = len(self.freeze_events()) - record.details.pop("freezes_before", 0)
        got = self.receiver.received(f"sc:{record.index}:plant")
        if got["arrival"].size == 0:
            raise SlotInvalidError("no SYN+ACK for any planted connection")
        first = got["arrival"][0]
        late = got["arrival"] >= first + self.final_offset - 1.0
        survivors = int(np.unique(got["dport"][late]).size)
        record.decoded = int(survivors < self.params.survivor_threshold)
        record.details["survivors"] = survivors
        if freezes:
            record.details["freezes"] = freezes
            record.error = "SYN cache set frozen during the slot; reading unreliable"
        return record


def syncache_run_bit(bit: int, params: SynCacheParams, topology: Topology,
                     start: Optional[float] = None) -> int:
    channel = SynCacheChannel(topology, params)
    start = channel.prepare(topology.start_time() if start is None else start)
    return _decoded(channel.run_bit(0, bit, start))


# ---------------------------------------------------------------------------
# Flow-label channels
# ---------------------------------------------------------------------------

@dataclass
class Epoch:
    """Receiver-side view of one reseed period of the flow-label PRNG."""
    start_lo: float
    start_hi: float
    msb: int
    last_label: Optional[int] = None
    seed: Optional[RecoveredSeed] = None
    residual_steps: int = STEPS_PER_LABEL


class FlowLabelChannel(CovertChannel):
    """Shared probing logic: one receiver connection returns one flow label."""
    params_class = ChannelParams

    def validate(self) -> None:
        if not isinstance(self.receiver_host, NetBsdHost) or self.receiver_host is not self.sender_host:
            raise ChannelConfigError(f"the {self.kind} channel needs one NetBSD target for both parties")
        if self.receiver_target.proto != Proto.TCP or self.sender_target.proto != Proto.TCP:
            raise ChannelConfigError(f"the {self.kind} channel runs over TCP")
        self.epoch: Optional[Epoch] = None
        self._syncs = 0

    def probe_now(self, token: str, at: float, count: int = 1, spacing: float = 0.01) -> np.ndarray:
        """Open count connections from local time at and wait for their labels."""
        times = at + np.arange(count) * spacing
        ports = self.ports(count)
        self.send(self.receiver, self.receiver_target, times, token=token, sports=ports, tag=PacketTag.CONNECT)
        lead = self.topology.lead_time()
        self.topology.run_until(max(self.topology.clock.now, self.receiver.to_global(float(times[-1])) + 2 * lead))
        return self.labels(token, ports)

    def labels(self, token: str, ports: Optional[np.ndarray] = None) -> np.ndarray:
        """Labels for a token, in the order the connections were opened when their ports are given."""
        got = self.receiver.received(token)
        if "flow_label" not in got:
            return np.empty(0, dtype=np.int64)
        if ports is None:
            return got["flow_label"]
        by_port = dict(zip(got["dport"].tolist(), got["flow_label"].tolist()))
        return np.array([by_port[p] for p in ports.tolist() if p in by_port], dtype=np.int64)

    def after_probe(self, at: float) -> float:
        return at + 4 * self.topology.lead_time()

    def wait_for_flip(self, start: float, baseline: Optional[int] = None,
                      interval: float = 1.0, limit: int = 400) -> Tuple[float, int]:
        """
        Probe every interval until the label MSB changes.

        Returns:
            (local time of the probe that saw the flip, its label)
        """
        self._syncs += 1
        t = start
        for k in range(limit):
            got = self.probe_now(f"{self.kind}:sync{self._syncs}:{k}", t)
            if got.size:
                msb = int(got[0]) >> FL_LOW_BITS
                if baseline is not None and msb != baseline:
                    logger.debug(f"{self.kind}: MSB flip seen at {t:.3f}s after {k + 1} probe(s)")
                    return t, int(got[0])
                baseline = msb
            t += interval
        raise ChannelError(f"no flow-label MSB flip in {limit} probes")


@dataclass
class FlowLabelMsbParams(ChannelParams):
    n_connections: int = 41000
    connect_rate: float = 50000.0
    resync_margin: float = 1.0
    compensate_residual: bool = True
    sender_proto: str = "TCP"
    receiver_proto: str = "TCP"

    def __post_init__(self):
        if self.n_connections * STEPS_PER_LABEL < RESEED_STEPS:
            logger.warning(f"{self.n_connections} connections average fewer than {RESEED_STEPS} steps; "
                           f"most '1' bits will not flip the MSB")
        if self.connect_rate <= 0:
            raise ChannelConfigError("connect_rate must be positive")


class FlowLabelMsbChannel(FlowLabelChannel):
    """
    A '1' pushes the PRNG past its step budget so it reseeds and flips the
    label MSB; the receiver's one connection per slot reads the MSB. Slots
    that would meet the 180 s time reseed are replaced by a resync.
    """
    kind = "flowlabel_msb"
    params_class = FlowLabelMsbParams

    def slot_length(self, bit: Optional[int] = None) -> float:
        p = self.params
        return 3 * p.guard + p.n_connections / p.connect_rate

    def prepare(self, start: float) -> float:
        t, label = self.wait_for_flip(start)
        self.epoch = Epoch(t, t, label >> FL_LOW_BITS)
        logger.info(f"MSB channel synchronised: epoch starts at {t:.3f}s, MSB={self.epoch.msb}")
        return self.after_probe(t)

    def resync(self, start: float) -> float:
        """Let the time reseed happen on a receiver probe and start a new epoch there."""
        p = self.params
        t = max(start, self.epoch.start_hi + RESEED_SECONDS + p.resync_margin)
        t, label = self.wait_for_flip(t, baseline=self.epoch.msb)
        self.epoch = Epoch(t, t, label >> FL_LOW_BITS)
        return self.after_probe(t)

    def schedule_bit(self, index: int, bit: int, start: float) -> SlotRecord:
        p = self.params
        slot_start = start
        details: Dict[str, Any] = {}
        if start + self.slot_length() + p.resync_margin >= self.epoch.start_lo + RESEED_SECONDS:
            start = self.resync(start)
            details["resync"] = True
        epoch = self.epoch
        n_send = 0
        if bit:
            credit = round(epoch.residual_steps / STEPS_PER_LABEL) if p.compensate_residual else 0
            n_send = max(0, p.n_connections - credit)
        burst_start = start + p.guard
        probe_at = burst_start + p.n_connections / p.connect_rate + p.guard
        if n_send:
            self.send(self.sender, self.sender_target, burst_start + np.arange(n_send) / p.connect_rate,
                      token=f"msb:{index}:tx", tag=PacketTag.CONNECT)
            # the sender knows where its burst forced the reseed
            after = epoch.residual_steps + STEPS_PER_LABEL * n_send - RESEED_STEPS
            self.epoch = Epoch(burst_start, burst_start + n_send / p.connect_rate, 1 - epoch.msb,
                               residual_steps=max(0, after) + STEPS_PER_LABEL)
        else:
            epoch.residual_steps += STEPS_PER_LABEL
        self.send(self.receiver, self.receiver_target, np.array([probe_at]), token=f"msb:{index}:rx",
                  tag=PacketTag.CONNECT)
        details.update({"connections": n_send, "baseline": epoch, "next": self.epoch})
        return SlotRecord(index, int(bit), slot_start, start + self.slot_length(bit), sender_packets=n_send,
                          receiver_packets=1, details=details)

    def finish_bit(self, record: SlotRecord) -> SlotRecord:
        baseline = record.details.pop("baseline")
        following = record.details.pop("next")
        got = self.labels(f"msb:{record.index}:rx")
        if got.size == 0:
            raise SlotInvalidError("the receiver's connection returned no label")
        msb = int(got[0]) >> FL_LOW_BITS
        record.decoded = int(msb != baseline.msb)
        # next baseline is the receiver's own reading
        following.msb = msb
        record.details["msb"] = msb
        return record


def flowlabel_msb_run_bit(bit: int, params: FlowLabelMsbParams, topology: Topology,
                          start: Optional[float] = None) -> int:
    channel = FlowLabelMsbChannel(topology, params)
    start = channel.prepare(topology.start_time() if start is None else start)
    return _decoded(channel.run_bit(0, bit, start))


@dataclass
class FlowLabelPredictiveParams(ChannelParams):
    sender_connections: int = 4
    slot_seconds: float = 0.5
    attack_labels: int = 100
    max_steps: int = 48
    zero_positions: Tuple[int, int] = (2, 8)
    attack_attempts: int = 3
    resync_margin: float = 1.0
    sender_proto: str = "TCP"
    receiver_proto: str = "TCP"

    def __post_init__(self):
        self.zero_positions = tuple(self.zero_positions)
        if self.sender_connections < 1:
            raise ChannelConfigError("a '1' needs at least one sender connection")
        lo, hi = self.zero_positions
        if not 1 <= lo <= hi < self.max_steps:
            raise ChannelConfigError(f"invalid zero_positions {self.zero_positions} for max_steps={self.max_steps}")


def predictive_decode(observed: int, previous: int, seed: RecoveredSeed, max_steps: int = 48,
                      zero_positions: Tuple[int, int] = (2, 8), logtab: Optional[LogTable] = None) -> int:
    """
    Locate an observed label in the forward prediction list from the previous one.

    Returns:
        0 for a match within zero_positions (the receiver's own connection),
        1 for a later match (someone else consumed steps)

    Raises:
        SlotInvalidError: No match, or a match too early to be a whole connection
    """
    try:
        predicted = predict_sequence(previous, seed, max_steps, logtab)
    except CryptanalysisError as e:
        raise SlotInvalidError(f"previous label unusable: {e}")
    if observed not in predicted:
        raise SlotInvalidError("observed label not in the prediction list; a reseed intervened")
    position = predicted.index(observed) + 1
    lo, hi = zero_positions
    if position < lo:
        raise SlotInvalidError(f"label matched at position {position}, closer than one connection")
    return int(position > hi)


class FlowLabelPredictiveChannel(FlowLabelChannel):
    """
    With the epoch's seed recovered, each label tells exactly how many PRNG
    steps passed since the previous one: 2-8 is the receiver's own
    connection, more means the sender connected too.
    """
    kind = "flowlabel_predictive"
    params_class = FlowLabelPredictiveParams

    def __init__(self, topology: Topology, params: Optional[Any] = None,
                 seed: Optional[RecoveredSeed] = None, logtab: Optional[LogTable] = None):
        super().__init__(topology, params)
        self.given_seed = seed
        self.logtab = logtab or build_log_table()

    def slot_length(self, bit: Optional[int] = None) -> float:
        return float(self.params.slot_seconds)

    def attack(self, t: float) -> Tuple[Epoch, float]:
        """Collect consecutive labels from t and recover the epoch's seed."""
        p = self.params
        last_error: Optional[Exception] = None
        epoch = self.epoch
        for attempt in range(p.attack_attempts):
            labels = self.probe_now(f"{self.kind}:attack{self._syncs}:{attempt}", t, count=p.attack_labels)
            t = self.after_probe(t + p.attack_labels * 0.01)
            if labels.size < 2:
                last_error = ChannelError("no labels returned for the attack")
                continue
            try:
                seed = full_attack(SampleSet.from_labels(labels.tolist()), self.logtab)
            except CryptanalysisError as e:
                last_error = e
                logger.warning(f"Seed recovery attempt {attempt + 1} failed: {e}")
                continue
            epoch.seed = seed
            epoch.last_label = int(labels[-1])
            return epoch, t
        raise ChannelError(f"seed recovery failed after {p.attack_attempts} attempt(s): {last_error}")

    def prepare(self, start: float) -> float:
        if self.given_seed is not None:
            got = self.probe_now(f"{self.kind}:anchor", start)
            if got.size == 0:
                raise ChannelError("anchor connection returned no label")
            self.epoch = Epoch(start, start, int(got[0]) >> FL_LOW_BITS, last_label=int(got[0]),
                               seed=self.given_seed)
            return self.after_probe(start)
        t, label = self.wait_for_flip(start)
        self.epoch = Epoch(t, t, label >> FL_LOW_BITS)
        self.epoch, t = self.attack(self.after_probe(t))
        logger.info(f"Predictive channel ready: epoch from {self.epoch.start_lo:.3f}s, g={self.epoch.seed.g}")
        return t

    def schedule_bit(self, index: int, bit: int, start: float) -> SlotRecord:
        p = self.params
        slot_start = start
        details: Dict[str, Any] = {}
        if self.given_seed is None and \
                start + self.slot_length() + p.resync_margin >= self.epoch.start_lo + RESEED_SECONDS:
            t = max(start, self.epoch.start_hi + RESEED_SECONDS + p.resync_margin)
            t, label = self.wait_for_flip(t, baseline=self.epoch.msb)
            self.epoch = Epoch(t, t, label >> FL_LOW_BITS)
            self.epoch, start = self.attack(self.after_probe(t))
            details["reattack"] = True
        sent = 0
        if bit:
            arrivals = start + p.guard + np.arange(p.sender_connections) * 0.01
            sent = int(self.send(self.sender, self.sender_target, arrivals, token=f"pred:{index}:tx",
                                 tag=PacketTag.CONNECT)["sent"])
        self.send(self.receiver, self.receiver_target, np.array([start + p.slot_seconds - 2 * p.guard]),
                  token=f"pred:{index}:rx", tag=PacketTag.CONNECT)
        details["epoch"] = self.epoch
        return SlotRecord(index, int(bit), slot_start, start + self.slot_length(bit), sender_packets=sent,
                          receiver_packets=1, details=details)

    def finish_bit(self, record: SlotRecord) -> SlotRecord:
        p = self.params
        epoch = record.details.pop("epoch")
        got = self.labels(f"pred:{record.index}:rx")
        if got.size == 0:
            raise SlotInvalidError("the receiver's connection returned no label")
        observed = int(got[0])
        previous = epoch.last_label
        epoch.last_label = observed
        record.decoded = predictive_decode(observed, previous, epoch.seed, p.max_steps, p.zero_positions,
                                           self.logtab)
        return record


def flowlabel_predictive_run_bit(bit: int, recovered_seed: Optional[RecoveredSeed], topology: Topology,
                                 params: Optional[FlowLabelPredictiveParams] = None,
                                 start: Optional[float] = None) -> int:
    """One predictive slot; without a seed the channel first synchronises and runs the attack."""
    channel = FlowLabelPredictiveChannel(topology, params, seed=recovered_seed)
    start = channel.prepare(topology.start_time() if start is None else start)
    return _decoded(channel.run_bit(0, bit, start))
