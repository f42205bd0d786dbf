#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
End-to-end exfiltration runs and host alias resolution over any channel.

A run schedules one slot per bit, pipelined so the next slot is queued while
the previous one is still being answered, and decodes each slot once every
response for it can have arrived.
"""

import copy
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Deque, Dict, List, Optional, Sequence, Tuple, Type

import numpy as np

from os_models import derive_rng
from net_sim import Network, Topology, audit_event_log
from target_hosts import WindowsHost, build_topology
from channels import (
    CovertChannel, ChannelParams, SlotRecord, ChannelError, ChannelConfigError,
    LinuxChannel, WindowsChannel, ExclusionChannel, MacIcmpChannel,
)
from tcp_channels import (
    NetbsdIsnChannel, SynCacheChannel, FlowLabelMsbChannel, FlowLabelPredictiveChannel,
)

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

CHANNELS: Dict[str, Type[CovertChannel]] = {
    cls.kind: cls for cls in (LinuxChannel, WindowsChannel, ExclusionChannel, MacIcmpChannel,
                              NetbsdIsnChannel, SynCacheChannel, FlowLabelMsbChannel, FlowLabelPredictiveChannel)
}

ALIAS_TRIALS = 10


def channel_class(kind: str) -> Type[CovertChannel]:
    try:
        return CHANNELS[kind]
    except KeyError:
        raise ChannelConfigError(f"unknown channel kind '{kind}' (expected one of {', '.join(sorted(CHANNELS))})")


def channel_params(kind: str, values: Optional[Dict[str, Any]] = None) -> ChannelParams:
    """Parse a scenario's parameter block for a channel kind."""
    return channel_class(kind).params_class.from_dict(values)


def adapt_topology_spec(kind: str, params: ChannelParams, spec: Dict[str, Any]) -> Dict[str, Any]:
    """
    Party settings a channel depends on, filled into a copy of a topology block.

    The Linux receiver needs one address per sampled bucket; the SYN cache
    receiver must leave its planted connections open.
    """
    spec = copy.deepcopy(spec)
    parties = spec.setdefault("parties", {})
    receiver = parties.setdefault("receiver", {})
    if kind == "linux":
        receiver["n_ips"] = max(int(receiver.get("n_ips", 1)), params.n_receiver_ips)
    elif kind == "syncache":
        receiver["auto_rst"] = False
    return spec


def parse_message(message: Any, rng: Optional[np.random.Generator] = None) -> List[int]:
    """
    Bits from a scenario message block: {"bits": "0101"}, {"hex": "deadbeef"},
    {"random_bits": 128}, a bit string or a list of 0/1.
    """
    if isinstance(message, dict):
        if "bits" in message:
            return parse_message(message["bits"])
        if "hex" in message:
            text = str(message["hex"]).strip().lower()
            text = text[2:] if text.startswith("0x") else text
            try:
                return [int(b) for ch in text for b in format(int(ch, 16), "04b")]
            except ValueError:
                raise ValueError(f"message hex '{message['hex']}' is not hexadecimal")
        if "random_bits" in message:
            if rng is None:
                raise ValueError("random_bits needs a seeded generator")
            return rng.integers(0, 2, size=int(message["random_bits"])).tolist()
        raise ValueError(f"message block needs one of bits, hex, random_bits; got {sorted(message)}")
    if isinstance(message, str):
        text = message.replace(" ", "")
        if set(text) - {"0", "1"}:
            raise ValueError("bit string may only contain 0 and 1")
        return [int(c) for c in text]
    bits = [int(b) for b in message]
    if any(b not in (0, 1) for b in bits):
        raise ValueError("bits must be 0 or 1")
    return bits


@dataclass
class BitTranscript:
    """Per-bit records of one exfiltration run and the aggregates reported for it."""
    channel: str
    bits_sent: List[int]
    records: List[SlotRecord] = field(default_factory=list)
    start: float = 0.0
    end: float = 0.0
    setup_seconds: float = 0.0

    @property
    def bits_decoded(self) -> List[Optional[int]]:
        return [r.decoded for r in self.records]

    @property
    def successes(self) -> int:
        return sum(1 for r in self.records if r.decoded == r.bit)

    @property
    def invalid_slots(self) -> int:
        return sum(1 for r in self.records if r.error is not None)

    @property
    def ber(self) -> float:
        if not self.records:
            return 0.0
        return 1.0 - self.successes / len(self.records)

    @property
    def elapsed(self) -> float:
        return self.end - self.start

    @property
    def throughput(self) -> float:
        """Bits per hour over the slots, set-up excluded."""
        if not self.records or self.elapsed <= 0:
            return 0.0
        return 3600.0 * len(self.records) / self.elapsed

    def per_bit(self) -> List[Dict[str, Any]]:
        return [r.to_dict() for r in self.records]

    def summary_row(self, test_id: str = "", os_kind: str = "", scenario: str = "",
                    protocol: str = "") -> Dict[str, Any]:
        return {"test_id": test_id, "os": os_kind, "scenario": scenario, "protocol": protocol,
                "channel": self.channel, "bits": len(self.records), "successes": self.successes,
                "invalid": self.invalid_slots, "ber": round(self.ber, 6),
                "bit_rate_bph": round(self.throughput, 2), "elapsed_s": round(self.elapsed, 6)}

    def to_dict(self) -> Dict[str, Any]:
        return {"channel": self.channel, "bits_sent": list(self.bits_sent), "bits_decoded": self.bits_decoded,
                "start": self.start, "end": self.end, "setup_seconds": self.setup_seconds,
                "ber": self.ber, "throughput": self.throughput, "per_bit": self.per_bit()}


def _guess(record: SlotRecord, rng: np.random.Generator) -> None:
    """An unreadable slot still yields a bit: the receiver flips a coin."""
    if record.decoded is None:
        record.decoded = int(rng.integers(0, 2))
        record.details["guessed"] = True


def run_exfiltration(message: Sequence[int], kind: str, params: Any, topology: Topology,
                     start: Optional[float] = None, seed: int = 0) -> BitTranscript:
    """
    Transmit a message bit by bit over one channel.

    Args:
        message: Bits to send
        kind: Channel kind (see CHANNELS)
        params: Parameter block or dict for the channel
        topology: Topology with 'sender' and 'receiver' parties
        start: Local time of the first slot; defaults to the topology's start time
        seed: Seed for the receiver's guesses on unreadable slots

    Returns:
        BitTranscript with one record per bit; slot failures are recorded, not raised

    Raises:
        ChannelConfigError: If the channel cannot run on this topology at all
    """
    bits = [int(b) for b in message]
    channel = channel_class(kind)(topology, params)
    transcript = BitTranscript(kind, bits)
    if not bits:
        return transcript
    guesses = derive_rng(seed, "receiver-guess", kind)
    lead = topology.lead_time()
    begin = topology.start_time() if start is None else start

    try:
        t = channel.prepare(begin)
    except ChannelConfigError:
        raise
    except ChannelError as e:
        logger.warning(f"{kind} set-up failed, every slot is unreadable: {e}")
        t = begin
        for i, bit in enumerate(bits):
            record = SlotRecord(i, bit, t, t, error=f"set-up failed: {e}")
            _guess(record, guesses)
            transcript.records.append(record)
        transcript.start = transcript.end = t
        return transcript

    transcript.setup_seconds = t - begin
    transcript.start = t
    pending: Deque[SlotRecord] = deque()

    def settle() -> None:
        while pending and pending[0].end + lead <= topology.clock.now:
            record = channel.finish(pending.popleft())
            _guess(record, guesses)

    for i, bit in enumerate(bits):
        try:
            record = channel.schedule_bit(i, bit, t)
        except ChannelConfigError:
            raise
        except ChannelError as e:
            logger.warning(f"{kind} slot {i} could not be scheduled: {e}")
            record = SlotRecord(i, bit, t, max(t + channel.slot_length(bit),
                                               topology.clock.now + lead), error=str(e))
        transcript.records.append(record)
        pending.append(record)
        topology.run_until(max(topology.clock.now, record.end - lead))
        settle()
        t = record.end

    topology.run_until(max(topology.clock.now, t + lead))
    settle()
    transcript.end = t
    logger.info(f"{kind}: {transcript.successes}/{len(bits)} bits correct, "
                f"{transcript.invalid_slots} unreadable, {transcript.throughput:.2f} b/h")
    return transcript


@dataclass
class AliasVerdict:
    verdict: str
    readings: List[Optional[int]]
    errors: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {"verdict": self.verdict, "readings": self.readings, "errors": self.errors}


def alias_resolve(endpoint_a: Optional[Tuple[str, Any]], endpoint_b: Optional[Tuple[str, Any]], kind: str,
                  params: Any, topology: Topology, trials: int = ALIAS_TRIALS, seed: int = 0) -> AliasVerdict:
    """
    Decide whether two endpoints are served by one kernel.

    The sender's logic for a '1' runs against endpoint_a and the receiver's
    against endpoint_b, trials times. All ones means one host; all zeros
    means two.

    Args:
        endpoint_a: (host role, network) the sender attacks, or None for the topology's own
        endpoint_b: (host role, network) the receiver samples, or None for the topology's own
    """
    for party, endpoint in (("sender", endpoint_a), ("receiver", endpoint_b)):
        if endpoint is not None:
            role, network = endpoint
            topology.targets[party] = (role, Network(network))
    transcript = run_exfiltration([1] * trials, kind, params, topology, seed=seed)
    readings = [None if r.details.get("guessed") else r.decoded for r in transcript.records]
    errors = [r.error for r in transcript.records if r.error]
    if readings and all(r == 1 for r in readings):
        verdict = "same"
    elif readings and all(r == 0 for r in readings):
        verdict = "different"
    else:
        verdict = "inconclusive"
        logger.warning(f"alias resolution over {kind} inconclusive: {readings}")
    logger.info(f"alias verdict {verdict} ({sum(r == 1 for r in readings)}/{trials} ones)")
    return AliasVerdict(verdict, readings, errors)


def invariant_violations(topology: Topology) -> Dict[str, int]:
    """Event-log audit counts plus the Windows non-disruption check over every target."""
    audit = audit_event_log(topology.log)
    counts = {name: len(found) for name, found in audit.items()}
    counts["non_disruption"] = sum(host.windows_generator().non_disruption_violations()
                                   for host in topology.hosts.values() if isinstance(host, WindowsHost))
    return counts


def execute_scenario(scenario: Dict[str, Any], seed: int, repetition: int = 0,
                     max_events: int = 10_000_000) -> Dict[str, Any]:
    """
    One repetition of a scenario: build the topology, run the channel (or the
    alias resolution) and audit the run.

    Returns:
        Dict with 'summary', 'per_bit', 'violations', 'topology' and, for alias
        scenarios, 'alias'
    """
    channel_cfg = scenario["channel"]
    kind = channel_cfg["kind"]
    params = channel_params(kind, channel_cfg.get("params"))
    topo_spec = adapt_topology_spec(kind, params, scenario.get("topology", {}))
    topology = build_topology(topo_spec, seed, max_events=max_events)
    meta = {"test_id": scenario.get("test_id", ""), "os_kind": scenario.get("os", ""),
            "scenario": scenario.get("scenario", ""), "protocol": scenario.get("protocol", "")}

    result: Dict[str, Any] = {"topology": topology}
    if "alias" in scenario:
        trials = int(scenario["alias"].get("trials", ALIAS_TRIALS))
        verdict = alias_resolve(None, None, kind, params, topology, trials=trials, seed=seed)
        result["alias"] = verdict.to_dict()
        ones = sum(1 for r in verdict.readings if r == 1)
        expected = scenario["alias"].get("expect")
        summary = {**meta, "channel": kind, "bits": trials,
                   "successes": ones if expected != "different" else trials - ones,
                   "invalid": len(verdict.errors), "ber": None, "bit_rate_bph": None, "elapsed_s": None}
        result["per_bit"] = []
    else:
        bits = parse_message(scenario.get("message", {"random_bits": 128}), derive_rng(seed, "message"))
        transcript = run_exfiltration(bits, kind, params, topology, seed=seed)
        summary = transcript.summary_row(**meta)
        result["per_bit"] = transcript.per_bit()
        result["transcript"] = transcript
    summary.update({"repetition": repetition, "seed": seed})
    result["summary"] = summary
    result["violations"] = invariant_violations(topology)
    return result
