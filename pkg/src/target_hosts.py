#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Target host behaviour and topology construction.

A target host answers ICMP echo, UDP and TCP packets the way its operating
system does: which generator fills the IPv4 ID, when SYN+ACKs are
retransmitted, what a RST cancels. build_topology lays hosts and parties out
for one of the attack variants.
"""

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, List, Optional, Tuple

import numpy as np

from os_models import (
    SimClock, FieldGenerator, FieldRequest, MitigationPolicy, MitigationMode, apply_mitigation,
    LinuxIpidGenerator, LinuxIpidState, WindowsIpidGenerator, ExclusionIpidGenerator, RandomIpidGenerator,
    MacIcmpRateLimiter, mac_icmp_admit, MACOS_EXCLUSION, OPENBSD_EXCLUSION, derive_rng, ip_to_int,
    linux_bucket_index, linux_bucket_index_array,
)
from tcp_models import (
    IsnGenerator, FlowLabelGenerator, FlowLabelPrng, SynCache, OpenBsdSynCache,
    syncache_insert, syncache_reset, flowlabel_synack_label, flowlabel_advance_batch,
)
from net_sim import (
    Topology, Party, LinkModel, FirewallPolicy, FlowRule, Network, Proto, PacketTag, EventKind,
    SimPacket, PacketTrain, ResponseTrain, TopologyError, TAG_PROTO, address_in,
)

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

OS_KINDS = ("linux", "windows", "macos", "openbsd", "netbsd")
VARIANTS = ("piercing", "dmz_exfil", "containers", "alias")


@dataclass
class Interface:
    ip: int
    network: Network
    net_key: int = 0
    udp_ports: FrozenSet[int] = frozenset({53, 123})
    tcp_ports: FrozenSet[int] = frozenset({80, 443})
    echo: bool = True

    def __post_init__(self):
        self.ip = ip_to_int(self.ip)
        self.network = Network(self.network)
        self.udp_ports = frozenset(self.udp_ports)
        self.tcp_ports = frozenset(self.tcp_ports)

    def service_port(self, proto: Proto) -> Optional[int]:
        if proto == Proto.ICMP:
            return None
        ports = self.udp_ports if proto == Proto.UDP else self.tcp_ports
        if not ports:
            raise TopologyError(f"interface offers no {proto.name} service")
        return min(ports)

    def is_open(self, proto: Proto, port: Optional[int]) -> bool:
        if proto == Proto.ICMP:
            return self.echo
        ports = self.udp_ports if proto == Proto.UDP else self.tcp_ports
        return port in ports


class TargetHost:
    """
    An operating system answering probes on one or more interfaces.

    Subclasses choose the IPv4 ID generator and override the TCP hooks.
    """
    os_kind = "generic"

    def __init__(self, role: str, interfaces: List[Interface], rng: np.random.Generator,
                 policy: Optional[MitigationPolicy] = None, options: Optional[Dict[str, Any]] = None):
        self.role = role
        self.interfaces = interfaces
        self.rng = rng
        self._seed_root = int(rng.integers(0, 2 ** 62))
        self.options = dict(options or {})
        self.policy = policy or MitigationPolicy()
        self.clock = SimClock()
        self.counters = Counter()
        self.topology: Optional[Topology] = None
        self.ipid = apply_mitigation(self.build_ipid(), self.policy, self._fork_rng("mitigation"))

    def _fork_rng(self, label: str) -> np.random.Generator:
        return derive_rng(self._seed_root, self.role, label)

    def build_ipid(self) -> FieldGenerator:
        raise NotImplementedError

    def attach(self, topology: Topology) -> None:
        self.topology = topology

    def advance(self, t: float) -> None:
        self.clock.advance_to(t)

    def generators(self) -> Dict[str, Any]:
        return {"ipid": self.ipid}

    def snapshot(self) -> Dict[str, Any]:
        return {"role": self.role, "os": self.os_kind,
                **{name: gen.snapshot() for name, gen in self.generators().items()}}

    # -- single packets -----------------------------------------------------

    def _fields(self, iface: Interface, dst_ip: int, tag: PacketTag, df: bool) -> Dict[str, int]:
        req = FieldRequest(iface.ip, dst_ip, int(TAG_PROTO[tag]), iface.net_key, df)
        return {"ipid": int(self.ipid.emit(self.clock, req, self.rng))}

    def _reply(self, packet: SimPacket, iface: Interface, tag: PacketTag, df: bool,
               extra: Optional[Dict[str, int]] = None) -> SimPacket:
        fields = self._fields(iface, packet.src_ip, tag, df)
        fields.update(extra or {})
        self.counters[tag.value] += 1
        return SimPacket(src_ip=iface.ip, dst_ip=packet.src_ip, proto=TAG_PROTO[tag], tag=tag,
                         sport=packet.dport, dport=packet.sport, sent_at=self.clock.now, df=df,
                         fields=fields, token=packet.token, flow=packet.flow)

    def handle(self, packet: SimPacket, iface: Interface, now: float) -> List[SimPacket]:
        """Answer one delivered packet; returns the packets emitted right now."""
        self.clock.advance_to(now)
        tag = packet.tag
        if not iface.is_open(packet.proto, packet.dport):
            self.counters["closed"] += 1
            return []
        if tag == PacketTag.ECHO_REQUEST:
            if not self.admit_echo():
                self.counters["echo_limited"] += 1
                return []
            return [self._reply(packet, iface, PacketTag.ECHO_REPLY, df=False)]
        if tag == PacketTag.UDP_REQUEST:
            return [self._reply(packet, iface, PacketTag.UDP_RESPONSE, df=True)]
        if tag == PacketTag.SYN:
            return self.on_syn(packet, iface)
        if tag == PacketTag.CONNECT:
            return self.on_connect(packet, iface)
        if tag == PacketTag.RST:
            self.on_rst(packet, iface)
        return []

    def admit_echo(self) -> bool:
        return True

    def on_syn(self, packet: SimPacket, iface: Interface) -> List[SimPacket]:
        return [self._reply(packet, iface, PacketTag.SYN_ACK, df=True)]

    def on_connect(self, packet: SimPacket, iface: Interface) -> List[SimPacket]:
        return [self._reply(packet, iface, PacketTag.DATA, df=True)]

    def on_rst(self, packet: SimPacket, iface: Interface) -> None:
        self.counters["rst"] += 1

    # -- packet trains ------------------------------------------------------

    def _reply_train(self, train: PacketTrain, times: np.ndarray, dsts: np.ndarray, sports: np.ndarray,
                     iface: Interface, tag: PacketTag, df: bool, observed: Optional[np.ndarray],
                     extra: Optional[Dict[str, np.ndarray]] = None) -> ResponseTrain:
        proto = int(TAG_PROTO[tag])
        if observed is not None and observed.any():
            ids = self.ipid.emit_train(self.clock, times, iface.ip, dsts, proto, iface.net_key, df, self.rng)
        else:
            self.ipid.advance_train(self.clock, times, iface.ip, dsts, proto, iface.net_key, df, self.rng)
            ids = np.zeros(times.size, dtype=np.int64)
        self.counters[tag.value] += int(times.size)
        fields = {"ipid": np.asarray(ids, dtype=np.int64)}
        fields.update(extra or {})
        return ResponseTrain(src_ip=iface.ip, tag=tag, times=times, dst_ips=dsts,
                             sports=np.full(times.size, train.dport or 0, dtype=np.int64),
                             dports=sports, fields=fields, token=train.token)

    def handle_train(self, train: PacketTrain, start: int, stop: int, iface: Interface,
                     observed: Optional[np.ndarray]) -> Optional[ResponseTrain]:
        """Answer a chunk of a packet train in one call."""
        times = train.arrivals[start:stop]
        dsts = train.src_ips[start:stop]
        sports = train.sports[start:stop]
        if not iface.is_open(train.proto, train.dport):
            self.counters["closed"] += int(times.size)
            return None
        tag = train.tag
        if tag == PacketTag.ECHO_REQUEST:
            admitted = self.admit_echo_train(times)
            if not admitted.all():
                self.counters["echo_limited"] += int((~admitted).sum())
                times, dsts, sports = times[admitted], dsts[admitted], sports[admitted]
                observed = None if observed is None else observed[admitted]
            return self._reply_train(train, times, dsts, sports, iface, PacketTag.ECHO_REPLY, False, observed)
        if tag == PacketTag.UDP_REQUEST:
            return self._reply_train(train, times, dsts, sports, iface, PacketTag.UDP_RESPONSE, True, observed)
        if tag == PacketTag.SYN:
            return self.on_syn_train(train, times, dsts, sports, iface, observed)
        if tag == PacketTag.CONNECT:
            return self.on_connect_train(train, times, dsts, sports, iface, observed)
        return None

    def admit_echo_train(self, times: np.ndarray) -> np.ndarray:
        return np.ones(times.size, dtype=bool)

    def on_syn_train(self, train, times, dsts, sports, iface, observed) -> Optional[ResponseTrain]:
        return self._reply_train(train, times, dsts, sports, iface, PacketTag.SYN_ACK, True, observed)

    def on_connect_train(self, train, times, dsts, sports, iface, observed) -> Optional[ResponseTrain]:
        return self._reply_train(train, times, dsts, sports, iface, PacketTag.DATA, True, observed)


class LinuxHost(TargetHost):
    os_kind = "linux"

    def build_ipid(self) -> FieldGenerator:
        state = LinuxIpidState.create(self._fork_rng("linux"), f=int(self.options.get("hz", 250)))
        return LinuxIpidGenerator(state)

    @property
    def hz(self) -> int:
        return int(self.options.get("hz", 250))

    def _hash_key(self) -> int:
        gen = self.ipid
        while not isinstance(gen, LinuxIpidGenerator):
            gen = gen.inner
        return gen.state.hash_key

    def bucket(self, dst_ip: int, iface: Interface, proto: Proto) -> int:
        """Oracle bucket lookup, standing in for the receiver's bucket dedup procedure."""
        return linux_bucket_index(iface.ip, dst_ip, int(proto), iface.net_key, self._hash_key())

    def buckets(self, dst_ips: np.ndarray, iface: Interface, proto: Proto) -> np.ndarray:
        return linux_bucket_index_array(iface.ip, dst_ips, int(proto), iface.net_key, self._hash_key())


class WindowsHost(TargetHost):
    """Per-(src, dst) Path counters; SYN+ACK retransmission at IRTO and 3*IRTO, RST at 7*IRTO."""
    os_kind = "windows"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.irto = float(self.options.get("irto", 3.0))
        self._reset_flows: set = set()

    def build_ipid(self) -> FieldGenerator:
        keys = ("stale_ttl", "purge_rate", "flood_threshold", "size_threshold", "double_purge")
        return WindowsIpidGenerator({k: self.options[k] for k in keys if k in self.options})

    def windows_generator(self) -> WindowsIpidGenerator:
        gen = self.ipid
        while not isinstance(gen, WindowsIpidGenerator):
            gen = getattr(gen, "inner")
        return gen

    def advance(self, t: float) -> None:
        super().advance(t)
        gen = self.ipid
        if isinstance(gen, WindowsIpidGenerator):
            gen.tick(self.clock)

    def tcp_schedule(self) -> Tuple[Tuple[float, PacketTag], ...]:
        return ((self.irto, PacketTag.SYN_ACK), (3 * self.irto, PacketTag.SYN_ACK),
                (7 * self.irto, PacketTag.RST))

    def _schedule_followups(self, train: PacketTrain, times, dsts, sports, iface: Interface) -> None:
        for offset, tag in self.tcp_schedule():
            due = times + offset
            handler = (lambda i, j, due=due, tag=tag:
                       self._emit_followups(train, due, dsts, sports, iface, tag, i, j))
            kind = EventKind.RETRANSMIT if tag == PacketTag.SYN_ACK else EventKind.TIMER
            self.topology.defer(self.role, due, handler, kind=kind, label=f"{train.token}:{tag.value}")

    def _emit_followups(self, train, due, dsts, sports, iface, tag, i, j) -> None:
        keep = np.array([(int(d), int(s)) not in self._reset_flows
                         for d, s in zip(dsts[i:j].tolist(), sports[i:j].tolist())], dtype=bool)
        if not keep.any():
            return
        times, d, s = due[i:j][keep], dsts[i:j][keep], sports[i:j][keep]
        observed = self.topology.observed_mask(d) if train.collect else None
        response = self._reply_train(train, times, d, s, iface, tag, True, observed)
        self.topology.route_response(response)

    def on_syn(self, packet, iface):
        replies = super().on_syn(packet, iface)
        self._reset_flows.discard((packet.src_ip, packet.sport or 0))
        single = PacketTrain(party="", host_role=self.role, iface_ip=iface.ip, tag=packet.tag,
                             dport=packet.dport, send_times=np.array([packet.sent_at]),
                             src_ips=np.array([packet.src_ip], dtype=np.int64),
                             sports=np.array([packet.sport or 0], dtype=np.int64),
                             arrivals=np.array([self.clock.now]), token=packet.token, collect=True)
        self._schedule_followups(single, single.arrivals, single.src_ips, single.sports, iface)
        return replies

    def on_syn_train(self, train, times, dsts, sports, iface, observed):
        response = super().on_syn_train(train, times, dsts, sports, iface, observed)
        self._schedule_followups(train, times, dsts, sports, iface)
        return response

    def on_rst(self, packet, iface):
        super().on_rst(packet, iface)
        self._reset_flows.add((packet.src_ip, packet.sport or 0))


class ExclusionHost(TargetHost):
    m_cap = MACOS_EXCLUSION

    def build_ipid(self) -> FieldGenerator:
        return ExclusionIpidGenerator(int(self.options.get("m_cap", self.m_cap)))


class MacHost(ExclusionHost):
    """Exclusion-window IDs and the randomised ICMP echo rate limiter."""
    os_kind = "macos"
    m_cap = MACOS_EXCLUSION

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.limiter = MacIcmpRateLimiter.create(self._fork_rng("limiter"),
                                                 float(self.options.get("icmp_interval", 1.0)))

    def generators(self):
        return {"ipid": self.ipid, "icmp_limiter": self.limiter}

    def admit_echo(self) -> bool:
        return mac_icmp_admit(self.limiter, self.clock, self.rng)

    def admit_echo_train(self, times):
        admitted = np.empty(times.size, dtype=bool)
        limiter_clock = SimClock(self.clock.now)
        for k, t in enumerate(times.tolist()):
            limiter_clock.advance_to(t)
            admitted[k] = mac_icmp_admit(self.limiter, limiter_clock, self.rng)
        return admitted


class SynCacheHost(TargetHost):
    """Hosts whose half-open connections live in a SYN cache and are retransmitted from it."""

    def build_syncache(self):
        raise NotImplementedError

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.syncache = self.build_syncache()

    def generators(self):
        return {**super().generators(), "syncache": self.syncache}

    def synack_fields(self, iface: Interface, dst_ip: int) -> Dict[str, int]:
        return {}

    def _insert(self, src_ip: int, sport: int, dport: int, clock: Optional[SimClock] = None) -> Dict[str, Any]:
        return syncache_insert(self.syncache, clock or self.clock, src_ip, sport, dport)

    def on_syn(self, packet, iface):
        result = self._insert(packet.src_ip, packet.sport or 0, packet.dport or 0)
        if not result["accepted"] or result["duplicate"]:
            return []
        extra = self.synack_fields(iface, packet.src_ip)
        reply = self._reply(packet, iface, PacketTag.SYN_ACK, df=True, extra=extra)
        self._schedule_retransmits(result["entry"], packet, iface, extra)
        return [reply]

    def _schedule_retransmits(self, entry, packet: SimPacket, iface: Interface, extra: Dict[str, int]) -> None:
        """Retransmissions repeat the original SYN+ACK; only the IPv4 ID is fresh."""
        due = np.asarray(entry.retransmit_schedule[1:], dtype=float)
        if due.size == 0:
            return

        def handler(i, j):
            for k in range(i, j):
                if not entry.alive:
                    return
                self.clock.advance_to(float(due[k]))
                reply = self._reply(packet, iface, PacketTag.SYN_ACK, df=True, extra=extra)
                self.counters["retransmit"] += 1
                if k == due.size - 1:
                    self.syncache.expire_entry(entry)
                self.topology.route_response(ResponseTrain.single(reply, float(due[k])))

        self.topology.defer(self.role, due, handler, kind=EventKind.RETRANSMIT,
                            label=f"{packet.token}:retransmit")

    def on_syn_train(self, train, times, dsts, sports, iface, observed):
        accepted = np.zeros(times.size, dtype=bool)
        dport = train.dport or 0
        watched = []
        cache_clock = SimClock(self.clock.now)
        for k, (t, src, sport) in enumerate(zip(times.tolist(), dsts.tolist(), sports.tolist())):
            cache_clock.advance_to(t)
            result = self._insert(src, sport, dport, cache_clock)
            accepted[k] = result["accepted"] and not result["duplicate"]
            if not accepted[k]:
                continue
            if train.expect_rst:
                syncache_reset(self.syncache, src, sport, dport)
            elif observed is not None and observed[k]:
                watched.append((result["entry"], int(accepted[:k].sum())))
        if not accepted.any():
            return None
        obs = None if observed is None else observed[accepted]
        extra_fields = self.synack_train_fields(times[accepted], dsts[accepted], iface)
        response = self._reply_train(train, times[accepted], dsts[accepted], sports[accepted], iface,
                                     PacketTag.SYN_ACK, True, obs, extra=extra_fields)
        for entry, pos in watched:
            extra = {name: int(values[pos]) for name, values in response.fields.items() if name != "ipid"}
            probe = SimPacket(src_ip=entry.src_ip, dst_ip=iface.ip, proto=Proto.TCP, tag=PacketTag.SYN,
                              sport=entry.src_port, dport=entry.dst_port, sent_at=entry.insert_time,
                              token=train.token)
            probe.flow = probe.flow_id()
            self._schedule_retransmits(entry, probe, iface, extra)
        return response

    def synack_train_fields(self, times: np.ndarray, dsts: np.ndarray, iface: Interface) -> Dict[str, np.ndarray]:
        return {}

    def on_rst(self, packet, iface):
        super().on_rst(packet, iface)
        syncache_reset(self.syncache, packet.src_ip, packet.sport or 0, packet.dport or 0)

    def advance(self, t: float) -> None:
        super().advance(t)
        self.syncache.expire_due(t)


class OpenBsdHost(SynCacheHost, ExclusionHost):
    os_kind = "openbsd"
    m_cap = OPENBSD_EXCLUSION

    def build_syncache(self):
        return OpenBsdSynCache(self._fork_rng("syncache"),
                               freeze_after=int(self.options.get("freeze_after", 100000)))


class NetBsdHost(SynCacheHost):
    """Random IPv4 IDs; timer-plus-counter ISNs; the flow-label PRNG for IPv6 connections."""
    os_kind = "netbsd"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.isn = apply_mitigation(IsnGenerator(), self._tcp_policy(), self._fork_rng("isn-mitigation"))
        prng = FlowLabelPrng.create(self._fork_rng("flowlabel"), now=0.0,
                                    msb=int(self.options.get("flowlabel_msb", 0)),
                                    synack_consumes_steps=bool(self.options.get("synack_consumes_steps", False)))
        self.flowlabel = apply_mitigation(FlowLabelGenerator(prng), self._tcp_policy(),
                                          self._fork_rng("flowlabel-mitigation"))

    def _tcp_policy(self) -> MitigationPolicy:
        """IPv4-ID-only policies leave the TCP fields untouched."""
        if self.policy.mode == MitigationMode.ZERO_ID_WHEN_DF:
            return MitigationPolicy()
        return self.policy

    def build_ipid(self) -> FieldGenerator:
        return RandomIpidGenerator()

    def build_syncache(self):
        return SynCache.create(self._fork_rng("syncache"))

    def flowlabel_prng(self) -> FlowLabelPrng:
        gen = self.flowlabel
        return gen.prng if isinstance(gen, FlowLabelGenerator) else gen.inner.prng

    def generators(self):
        return {**super().generators(), "isn": self.isn, "flowlabel": self.flowlabel}

    def synack_fields(self, iface, dst_ip):
        label = 0
        if isinstance(self.flowlabel, FlowLabelGenerator):
            label = flowlabel_synack_label(self.flowlabel.prng, self.rng, self.clock)
        req = FieldRequest(iface.ip, dst_ip, int(Proto.TCP), iface.net_key, True)
        return {"isn": int(self.isn.emit(self.clock, req, self.rng)), "flow_label": label}

    def synack_train_fields(self, times, dsts, iface):
        if isinstance(self.flowlabel, FlowLabelGenerator) and self.flowlabel.prng.synack_consumes_steps:
            flowlabel_advance_batch(self.flowlabel.prng, self.rng, times)
        isn = self.isn.emit_train(SimClock(float(times[0])), times, iface.ip, dsts, int(Proto.TCP), iface.net_key,
                                  True, self.rng)
        return {"isn": isn, "flow_label": np.zeros(times.size, dtype=np.int64)}

    def on_connect(self, packet, iface):
        req = FieldRequest(iface.ip, packet.src_ip, int(Proto.TCP), iface.net_key, True)
        extra = {"isn": int(self.isn.emit(self.clock, req, self.rng)),
                 "flow_label": int(self.flowlabel.emit(self.clock, req, self.rng))}
        return [self._reply(packet, iface, PacketTag.DATA, df=True, extra=extra)]

    def on_connect_train(self, train, times, dsts, sports, iface, observed):
        args = (iface.ip, dsts, int(Proto.TCP), iface.net_key, True, self.rng)
        isn = self.isn.emit_train(SimClock(self.clock.now), times, *args)
        if observed is not None and observed.any():
            labels = self.flowlabel.emit_train(SimClock(self.clock.now), times, *args)
        else:
            self.flowlabel.advance_train(SimClock(self.clock.now), times, *args)
            labels = np.zeros(times.size, dtype=np.int64)
        return self._reply_train(train, times, dsts, sports, iface, PacketTag.DATA, True, observed,
                                 extra={"isn": isn, "flow_label": np.asarray(labels, dtype=np.int64)})


HOST_CLASSES = {"linux": LinuxHost, "windows": WindowsHost, "macos": MacHost,
                "openbsd": OpenBsdHost, "netbsd": NetBsdHost}


def build_host(os_kind: str, role: str, interfaces: List[Interface], rng: np.random.Generator,
               policy: Optional[MitigationPolicy] = None, options: Optional[Dict[str, Any]] = None) -> TargetHost:
    cls = HOST_CLASSES.get(os_kind)
    if cls is None:
        raise TopologyError(f"unknown OS kind '{os_kind}' (expected one of {', '.join(OS_KINDS)})")
    return cls(role, interfaces, rng, policy=policy, options=options)


# ---------------------------------------------------------------------------
# Variant layouts
# ---------------------------------------------------------------------------

def _rules_for(src_network: Network, role: str, iface: Interface) -> List[FlowRule]:
    rules = []
    if iface.echo:
        rules.append(FlowRule(src_network, role, iface.network, Proto.ICMP))
    rules += [FlowRule(src_network, role, iface.network, Proto.UDP, p) for p in sorted(iface.udp_ports)]
    rules += [FlowRule(src_network, role, iface.network, Proto.TCP, p) for p in sorted(iface.tcp_ports)]
    return rules


def _party(name: str, network: Network, first_index: int, cfg: Dict[str, Any]) -> Party:
    count = int(cfg.get("n_ips", 1))
    ips = [address_in(network, first_index + k) for k in range(count)]
    return Party(name=name, network=network, ips=ips, clock_offset=float(cfg.get("clock_offset", 0.0)),
                 rate_cap=cfg.get("rate_cap"), collect=bool(cfg.get("collect", name != "sender")),
                 auto_rst=bool(cfg.get("auto_rst", False)))


def build_topology(spec: Dict[str, Any], master_seed: int, max_events: int = 10_000_000) -> Topology:
    """
    Lay out hosts, parties, links and firewall rules for one attack variant.

    Args:
        spec: The scenario's topology block
        master_seed: Scenario master seed; every random stream derives from it

    Returns:
        A ready-to-run Topology with 'sender' and 'receiver' parties
    """
    variant = spec.get("variant", "dmz_exfil")
    if variant not in VARIANTS:
        raise TopologyError(f"unknown topology variant '{variant}'")
    target = spec.get("target", {})
    os_kind = target.get("os", "linux")
    options = dict(target.get("options", {}))
    mitigation = spec.get("mitigation", {})
    policy = MitigationPolicy(**mitigation) if mitigation else MitigationPolicy()
    fw_cfg = spec.get("firewall", {})
    firewall = FirewallPolicy(sav=bool(fw_cfg.get("sav", True)),
                              responds_to_icmp_echo=bool(fw_cfg.get("responds_to_icmp_echo", True)))
    links_cfg = spec.get("links", {})
    default_link = LinkModel(**links_cfg.get("default", {}))
    topology = Topology(variant, firewall, derive_rng(master_seed, "network"), default_link=default_link,
                        max_events=max_events)
    parties_cfg = spec.get("parties", {})
    sender_cfg = parties_cfg.get("sender", {})
    receiver_cfg = parties_cfg.get("receiver", {})

    def host(role: str, interfaces: List[Interface], os_name: str = os_kind) -> TargetHost:
        return build_host(os_name, role, interfaces, derive_rng(master_seed, "host", role), policy, options)

    if variant == "piercing":
        echo = firewall.responds_to_icmp_echo
        inner = Interface(address_in(Network.INTERNAL, 1), Network.INTERNAL, 0, frozenset(), frozenset(), echo)
        outer = Interface(address_in(Network.INTERNET, 1), Network.INTERNET, 0, frozenset(), frozenset(), echo)
        fw_host = host("firewall", [inner, outer])
        topology.add_host(fw_host)
        sender = _party("sender", Network.INTERNAL, 10, sender_cfg)
        receiver = _party("receiver", Network.INTERNET, 1000, receiver_cfg)
        firewall.allowed_flows += _rules_for(Network.INTERNAL, "firewall", inner)
        firewall.allowed_flows += _rules_for(Network.INTERNET, "firewall", outer)
        topology.targets = {"sender": ("firewall", Network.INTERNAL), "receiver": ("firewall", Network.INTERNET)}
    elif variant == "dmz_exfil":
        iface = Interface(address_in(Network.DMZ, 10), Network.DMZ)
        topology.add_host(host("dmz", [iface]))
        sender = _party("sender", Network.INTERNAL, 10, sender_cfg)
        receiver = _party("receiver", Network.INTERNET, 1000, receiver_cfg)
        firewall.allowed_flows += _rules_for(Network.INTERNAL, "dmz", iface)
        firewall.allowed_flows += _rules_for(Network.INTERNET, "dmz", iface)
        topology.targets = {"sender": ("dmz", Network.DMZ), "receiver": ("dmz", Network.DMZ)}
    elif variant == "containers":
        a = Interface(address_in(Network.CONTAINER_A, 10), Network.CONTAINER_A, net_key=1)
        b = Interface(address_in(Network.CONTAINER_B, 10), Network.CONTAINER_B, net_key=2)
        topology.add_host(host("docker", [a, b]))
        sender = _party("sender", Network.INTERNAL, 10, sender_cfg)
        receiver = _party("receiver", Network.INTERNET, 1000, receiver_cfg)
        firewall.allowed_flows += _rules_for(Network.INTERNAL, "docker", a)
        firewall.allowed_flows += _rules_for(Network.INTERNET, "docker", b)
        topology.targets = {"sender": ("docker", Network.CONTAINER_A), "receiver": ("docker", Network.CONTAINER_B)}
    else:
        mode = spec.get("alias_mode", "ports")
        sender = _party("sender", Network.INTERNET, 2000, sender_cfg)
        receiver = _party("receiver", Network.INTERNET, 1000, receiver_cfg)
        if mode == "ports":
            iface = Interface(address_in(Network.INTERNET, 10), Network.INTERNET)
            topology.add_host(host("target-a", [iface]))
            firewall.allowed_flows += _rules_for(Network.INTERNET, "target-a", iface)
            topology.targets = {"sender": ("target-a", Network.INTERNET),
                                "receiver": ("target-a", Network.INTERNET)}
        elif mode == "containers":
            a = Interface(address_in(Network.CONTAINER_A, 10), Network.CONTAINER_A, net_key=1)
            b = Interface(address_in(Network.CONTAINER_B, 10), Network.CONTAINER_B, net_key=2)
            topology.add_host(host("target-a", [a, b]))
            firewall.allowed_flows += _rules_for(Network.INTERNET, "target-a", a)
            firewall.allowed_flows += _rules_for(Network.INTERNET, "target-a", b)
            topology.targets = {"sender": ("target-a", Network.CONTAINER_A),
                                "receiver": ("target-a", Network.CONTAINER_B)}
        elif mode == "hosts":
            a = Interface(address_in(Network.INTERNET, 10), Network.INTERNET)
            b = Interface(address_in(Network.INTERNET, 20), Network.INTERNET)
            topology.add_host(host("target-a", [a]))
            topology.add_host(host("target-b", [b]))
            firewall.allowed_flows += _rules_for(Network.INTERNET, "target-a", a)
            firewall.allowed_flows += _rules_for(Network.INTERNET, "target-b", b)
            topology.targets = {"sender": ("target-a", Network.INTERNET),
                                "receiver": ("target-b", Network.INTERNET)}
        else:
            raise TopologyError(f"unknown alias_mode '{mode}'")

    topology.add_party(sender)
    topology.add_party(receiver)
    for network_name, link_cfg in links_cfg.items():
        if network_name == "default":
            continue
        party_network = Network(network_name)
        for host_obj in topology.hosts.values():
            for iface in host_obj.interfaces:
                topology.set_link(party_network, iface.network, LinkModel(**link_cfg))
    logger.info(f"Built {variant} topology: {os_kind} target, "
                f"{len(topology.hosts)} host(s), mitigation={policy.mode.value}")
    return topology
