#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Discrete-event network simulator for the attack topologies.

Parties (sender, receiver, probers) send packets across a stateful firewall
with source address validation to target hosts. Single packets travel as
heap events; large packet trains travel as one event whose arrivals are
processed in chunks between the other pending events.
"""

import json
import math
import heapq
import logging
import itertools
import ipaddress
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import networkx as nx

from os_models import SimClock, IPLike, ip_to_int, int_to_ip

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


class TopologyError(Exception):
    """Misconfigured topology or a flow the topology cannot even evaluate."""


class DispatchBeforeStartError(TopologyError):
    """An RTT-compensated send time falls before the scenario start."""

    def __init__(self, send_time: float):
        super().__init__(f"send time {send_time:.6f}s is before the scenario start; "
                         f"shift the start by at least {-send_time:.6f}s")
        self.shift = -send_time


class SimulationError(Exception):
    """Event loop failure: causality breach or bounded-step abort."""


class Network(str, Enum):
    INTERNAL = "internal"
    DMZ = "dmz"
    INTERNET = "internet"
    CONTAINER_A = "container-A"
    CONTAINER_B = "container-B"


class Proto(IntEnum):
    ICMP = 1
    TCP = 6
    UDP = 17


class PacketTag(str, Enum):
    ECHO_REQUEST = "echo_request"
    ECHO_REPLY = "echo_reply"
    UDP_REQUEST = "udp_request"
    UDP_RESPONSE = "udp_response"
    SYN = "syn"
    SYN_ACK = "syn_ack"
    RST = "rst"
    CONNECT = "connect"
    DATA = "data"
    ACK = "ack"


class EventKind(str, Enum):
    DELIVER = "deliver"
    TIMER = "timer"
    RETRANSMIT = "retransmit"


TAG_PROTO = {
    PacketTag.ECHO_REQUEST: Proto.ICMP, PacketTag.ECHO_REPLY: Proto.ICMP,
    PacketTag.UDP_REQUEST: Proto.UDP, PacketTag.UDP_RESPONSE: Proto.UDP,
    PacketTag.SYN: Proto.TCP, PacketTag.SYN_ACK: Proto.TCP, PacketTag.RST: Proto.TCP,
    PacketTag.CONNECT: Proto.TCP, PacketTag.DATA: Proto.TCP, PacketTag.ACK: Proto.TCP,
}
OPENING_TAGS = {PacketTag.SYN, PacketTag.CONNECT}
REQUEST_TAGS = {PacketTag.ECHO_REQUEST, PacketTag.UDP_REQUEST, PacketTag.SYN, PacketTag.CONNECT}
STATEFUL_TAGS = {PacketTag.RST, PacketTag.ACK, PacketTag.DATA}

NETWORK_RANGES: Dict[Network, ipaddress.IPv4Network] = {
    Network.INTERNAL: ipaddress.IPv4Network("10.0.0.0/16"),
    Network.DMZ: ipaddress.IPv4Network("172.16.0.0/24"),
    Network.CONTAINER_A: ipaddress.IPv4Network("10.1.0.0/24"),
    Network.CONTAINER_B: ipaddress.IPv4Network("10.2.0.0/24"),
}
INTERNET_POOL = ipaddress.IPv4Network("45.0.0.0/8")


def network_of(ip: IPLike) -> Network:
    address = ipaddress.IPv4Address(ip_to_int(ip))
    for network, block in NETWORK_RANGES.items():
        if address in block:
            return network
    return Network.INTERNET


def network_of_array(ips: np.ndarray) -> np.ndarray:
    """Vectorised network_of; returns an object array of Network members."""
    ips = np.asarray(ips, dtype=np.int64)
    # np.full would coerce the str-Enum fill value to a numpy string
    out = np.empty(ips.shape, dtype=object)
    out.fill(Network.INTERNET)
    for network, block in NETWORK_RANGES.items():
        lo = int(block.network_address)
        out[(ips >= lo) & (ips < lo + block.num_addresses)] = network
    return out


def address_in(network: Network, index: int) -> int:
    """The index-th host address of a simulated network."""
    block = INTERNET_POOL if network == Network.INTERNET else NETWORK_RANGES[network]
    if not 0 < index < block.num_addresses - 1:
        raise TopologyError(f"host index {index} outside {block}")
    return int(block.network_address) + index


def address_block(network: Network, first_index: int, count: int) -> np.ndarray:
    """count consecutive host addresses of a simulated network, as an int64 array."""
    block = INTERNET_POOL if network == Network.INTERNET else NETWORK_RANGES[network]
    if first_index < 1 or first_index + count > block.num_addresses - 1:
        raise TopologyError(f"{count} addresses from index {first_index} do not fit in {block}")
    return int(block.network_address) + first_index + np.arange(count, dtype=np.int64)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Endpoint:
    ip: int
    proto: Proto
    network: Network
    port: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "ip", ip_to_int(self.ip))
        object.__setattr__(self, "proto", Proto(self.proto))
        object.__setattr__(self, "network", Network(self.network))
        if self.proto == Proto.ICMP and self.port is not None:
            raise ValueError("ICMP endpoints carry no port")
        if self.proto != Proto.ICMP and self.port is None:
            raise ValueError(f"{self.proto.name} endpoints need a port")

    def __str__(self) -> str:
        port = "" if self.port is None else f":{self.port}"
        return f"{int_to_ip(self.ip)}{port}/{self.proto.name}"


@dataclass
class SimPacket:
    src_ip: int
    dst_ip: int
    proto: Proto
    tag: PacketTag
    sport: Optional[int] = None
    dport: Optional[int] = None
    sent_at: float = 0.0
    df: bool = False
    fields: Dict[str, int] = field(default_factory=dict)
    token: Optional[str] = None
    flow: Optional[str] = None

    def flow_id(self) -> str:
        return f"{self.proto.name}:{int_to_ip(self.src_ip)}:{self.sport}>{int_to_ip(self.dst_ip)}:{self.dport}"


@dataclass
class LinkModel:
    """Symmetric path between a party network and a host interface network."""
    rtt_mean: float = 0.0799
    rtt_sigma: float = 0.0003
    loss_rate: float = 0.0

    def __post_init__(self):
        if self.rtt_mean < 0 or self.rtt_sigma < 0 or not 0.0 <= self.loss_rate < 1.0:
            raise TopologyError(f"invalid link parameters {self}")

    def sample_delay(self, rng: np.random.Generator, size: Optional[int] = None):
        delay = self.rtt_mean / 2.0 + rng.normal(0.0, self.rtt_sigma / 2.0, size=size)
        return np.maximum(delay, 0.0) if size is not None else max(float(delay), 0.0)

    def sample_lost(self, rng: np.random.Generator, size: Optional[int] = None):
        if self.loss_rate == 0.0:
            return np.zeros(size, dtype=bool) if size is not None else False
        draw = rng.random(size)
        return draw < self.loss_rate


@dataclass(frozen=True)
class FlowRule:
    """Admit packets from src_network to a host interface for a protocol (and port)."""
    src_network: Network
    host_role: str
    iface_network: Network
    proto: Proto
    port: Optional[int] = None

    def matches(self, src_network: Network, host_role: str, iface_network: Network,
                proto: Proto, port: Optional[int]) -> bool:
        return (self.src_network == src_network and self.host_role == host_role
                and self.iface_network == iface_network and self.proto == proto
                and (self.port is None or self.port == port))


@dataclass
class FirewallPolicy:
    sav: bool = True
    invalid_packet_action: str = "drop"
    allowed_flows: List[FlowRule] = field(default_factory=list)
    responds_to_icmp_echo: bool = True
    established: set = field(default_factory=set)

    def __post_init__(self):
        if self.invalid_packet_action != "drop":
            raise TopologyError("invalid packets are always dropped")

    def rule_admits(self, src_network: Network, host_role: str, iface_network: Network,
                    proto: Proto, port: Optional[int]) -> bool:
        return any(r.matches(src_network, host_role, iface_network, proto, port) for r in self.allowed_flows)

    def evaluate(self, src_network: Network, host_role: str, iface_network: Network,
                 tag: PacketTag, port: Optional[int], flow: Optional[str], track: bool = True) -> Tuple[bool, str]:
        proto = TAG_PROTO[tag]
        if not self.rule_admits(src_network, host_role, iface_network, proto, port):
            return False, "policy"
        if tag in OPENING_TAGS:
            if track and flow is not None:
                self.established.add(flow)
            return True, "new"
        if tag in STATEFUL_TAGS:
            if flow in self.established:
                if tag == PacketTag.RST:
                    self.established.discard(flow)
                return True, "established"
            return False, "invalid"
        if tag not in REQUEST_TAGS:
            return False, "invalid"
        return True, "new"


@dataclass
class Party:
    """An attacker-side actor (sender, receiver or prober)."""
    name: str
    network: Network
    ips: List[int]
    clock_offset: float = 0.0
    rate_cap: Optional[float] = None
    collect: bool = True
    auto_rst: bool = False
    inbox: Dict[str, List['ResponseTrain']] = field(default_factory=dict)

    def __post_init__(self):
        self.network = Network(self.network)
        self.ips = [ip_to_int(ip) for ip in self.ips]
        for ip in self.ips:
            if network_of(ip) != self.network:
                raise TopologyError(f"party {self.name}: {int_to_ip(ip)} is not in {self.network.value}")
        if abs(self.clock_offset) > 0.1 + 1e-12:
            raise TopologyError(f"party {self.name}: clock offset {self.clock_offset}s exceeds 0.1s")

    @property
    def ip(self) -> int:
        return self.ips[0]

    def to_global(self, local_time: float) -> float:
        return local_time - self.clock_offset

    def received(self, *tokens: str) -> Dict[str, np.ndarray]:
        """All responses carrying any of the tokens, concatenated and sorted by arrival."""
        batches = [b for token in tokens for b in self.inbox.get(token, [])]
        if not batches:
            return {"arrival": np.empty(0), "src_ip": np.empty(0, dtype=np.int64),
                    "dst_ip": np.empty(0, dtype=np.int64), "sport": np.empty(0, dtype=np.int64),
                    "dport": np.empty(0, dtype=np.int64), "tag": np.empty(0, dtype=object)}
        keys = set(batches[0].fields)
        for batch in batches[1:]:
            keys &= set(batch.fields)
        out = {
            "arrival": np.concatenate([b.arrival for b in batches]),
            "src_ip": np.concatenate([np.full(b.size, b.src_ip, dtype=np.int64) for b in batches]),
            "dst_ip": np.concatenate([b.dst_ips for b in batches]),
            "sport": np.concatenate([b.sports for b in batches]),
            "dport": np.concatenate([b.dports for b in batches]),
            "tag": np.concatenate([np.full(b.size, b.tag.value, dtype=object) for b in batches]),
        }
        for key in sorted(keys):
            out[key] = np.concatenate([b.fields[key] for b in batches])
        order = np.argsort(out["arrival"], kind="stable")
        return {k: v[order] for k, v in out.items()}


@dataclass
class ResponseTrain:
    """Packets emitted by a host, possibly towards many destinations."""
    src_ip: int
    tag: PacketTag
    times: np.ndarray
    dst_ips: np.ndarray
    sports: np.ndarray
    dports: np.ndarray
    fields: Dict[str, np.ndarray] = field(default_factory=dict)
    token: Optional[str] = None
    reply_to: Optional[str] = None
    arrival: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return int(np.asarray(self.times).size)

    @classmethod
    def single(cls, packet: SimPacket, now: float) -> 'ResponseTrain':
        return cls(src_ip=packet.src_ip, tag=packet.tag, times=np.array([now]),
                   dst_ips=np.array([packet.dst_ip], dtype=np.int64),
                   sports=np.array([packet.sport or 0], dtype=np.int64),
                   dports=np.array([packet.dport or 0], dtype=np.int64),
                   fields={k: np.array([v], dtype=np.int64) for k, v in packet.fields.items()},
                   token=packet.token, reply_to=packet.flow)

    def subset(self, mask: np.ndarray) -> 'ResponseTrain':
        return ResponseTrain(src_ip=self.src_ip, tag=self.tag, times=self.times[mask],
                             dst_ips=self.dst_ips[mask], sports=self.sports[mask], dports=self.dports[mask],
                             fields={k: v[mask] for k, v in self.fields.items()},
                             token=self.token, reply_to=self.reply_to,
                             arrival=None if self.arrival is None else self.arrival[mask])


@dataclass
class PacketTrain:
    """A batch of same-kind packets from one party to one host interface."""
    party: str
    host_role: str
    iface_ip: int
    tag: PacketTag
    dport: Optional[int]
    send_times: np.ndarray
    src_ips: np.ndarray
    sports: np.ndarray
    arrivals: np.ndarray
    token: Optional[str] = None
    collect: bool = False
    expect_rst: bool = False
    source_kind: str = "direct"

    @property
    def proto(self) -> Proto:
        return TAG_PROTO[self.tag]


@dataclass
class TrainCursor:
    """Sorted arrival times consumed in chunks by a handler(start, stop)."""
    times: np.ndarray
    handler: Callable[[int, int], None]
    label: str
    position: int = 0


@dataclass(order=True)
class SimEvent:
    due: float
    seq: int
    kind: EventKind = field(compare=False)
    packet: Any = field(compare=False, default=None)
    host_role: Optional[str] = field(compare=False, default=None)
    sent_at: float = field(compare=False, default=0.0)


# ---------------------------------------------------------------------------
# Topology runtime
# ---------------------------------------------------------------------------

class Topology:
    """Hosts, parties, links and the firewall of one simulation run."""

    def __init__(self, variant: str, firewall: FirewallPolicy, rng: np.random.Generator,
                 default_link: Optional[LinkModel] = None, max_events: int = 10_000_000):
        self.variant = variant
        self.firewall = firewall
        self.rng = rng
        self.default_link = default_link or LinkModel()
        self.links: Dict[Tuple[Network, Network], LinkModel] = {}
        self.hosts: Dict[str, Any] = {}
        self.parties: Dict[str, Party] = {}
        self.graph = nx.Graph()
        self.clock = SimClock()
        self.max_events = max_events
        self.log: List[Dict[str, Any]] = []
        self.stats = {"delivered": 0, "dropped_sav": 0, "dropped_policy": 0, "dropped_invalid": 0,
                      "lost": 0, "responses": 0, "responses_unrouted": 0, "responses_lost": 0}
        self._heap: List[SimEvent] = []
        self._seq = itertools.count()
        self._iface_index: Dict[int, Tuple[str, Any]] = {}
        self._party_ip: Dict[int, str] = {}
        self._party_array = np.empty(0, dtype=np.int64)
        self._collecting_array = np.empty(0, dtype=np.int64)
        self.targets: Dict[str, Tuple[str, Network]] = {}
        self.graph.add_node("firewall", kind="firewall")

    # -- construction -------------------------------------------------------

    def add_host(self, host) -> None:
        if host.role in self.hosts:
            raise TopologyError(f"duplicate host role {host.role}")
        self.hosts[host.role] = host
        self.graph.add_node(host.role, kind="host", os=host.os_kind)
        for iface in host.interfaces:
            if iface.ip in self._iface_index or iface.ip in self._party_ip:
                raise TopologyError(f"address {int_to_ip(iface.ip)} assigned twice")
            self._iface_index[iface.ip] = (host.role, iface)
            net_node = f"net:{iface.network.value}"
            self.graph.add_edge(net_node, "firewall")
            self.graph.add_edge(host.role, net_node, iface=int_to_ip(iface.ip))
        host.attach(self)

    def add_party(self, party: Party) -> None:
        if party.name in self.parties:
            raise TopologyError(f"duplicate party {party.name}")
        self.parties[party.name] = party
        net_node = f"net:{party.network.value}"
        self.graph.add_edge(net_node, "firewall")
        self.graph.add_edge(party.name, net_node)
        for ip in party.ips:
            if ip in self._iface_index:
                raise TopologyError(f"address {int_to_ip(ip)} assigned twice")
            self._party_ip[ip] = party.name
        self._party_array = np.array(sorted(self._party_ip), dtype=np.int64)
        self._collecting_array = np.array(sorted(ip for ip, name in self._party_ip.items()
                                                 if self.parties[name].collect), dtype=np.int64)

    def set_link(self, party_network: Network, iface_network: Network, link: LinkModel) -> None:
        self.links[(Network(party_network), Network(iface_network))] = link

    def link_between(self, party_network: Network, iface_network: Network) -> LinkModel:
        return self.links.get((party_network, iface_network), self.default_link)

    def interface(self, ip: IPLike):
        entry = self._iface_index.get(ip_to_int(ip))
        if entry is None:
            raise TopologyError(f"no host interface at {int_to_ip(ip_to_int(ip))}")
        return entry

    def endpoint(self, host_role: str, proto: Proto, port: Optional[int] = None,
                 iface_network: Optional[Network] = None) -> Endpoint:
        host = self.hosts[host_role]
        for iface in host.interfaces:
            if iface_network is None or iface.network == Network(iface_network):
                return Endpoint(iface.ip, proto, iface.network, None if proto == Proto.ICMP else port)
        raise TopologyError(f"host {host_role} has no interface on {iface_network}")

    def target_endpoint(self, party_name: str, proto: Proto) -> Endpoint:
        """The endpoint a party talks to for a protocol, as laid out by the variant."""
        if party_name not in self.targets:
            raise TopologyError(f"variant {self.variant} assigns no target to {party_name}")
        role, iface_network = self.targets[party_name]
        host = self.hosts[role]
        proto = Proto(proto)
        for iface in host.interfaces:
            if iface.network == iface_network:
                return Endpoint(iface.ip, proto, iface.network, iface.service_port(proto))
        raise TopologyError(f"host {role} has no interface on {iface_network.value}")

    def _route(self, party_name: str, to: Endpoint) -> Tuple[Party, str, Any, LinkModel]:
        party = self.parties.get(party_name)
        if party is None:
            raise TopologyError(f"unknown party {party_name}")
        role, iface = self.interface(to.ip)
        if not nx.has_path(self.graph, party_name, role):
            raise TopologyError(f"{party_name} has no path to {role}")
        has_rule = any(r.src_network == party.network and r.host_role == role
                       for r in self.firewall.allowed_flows)
        if not has_rule:
            raise TopologyError(f"variant {self.variant} admits no flow from "
                                f"{party.network.value} to {role}")
        return party, role, iface, self.link_between(party.network, iface.network)

    def lead_time(self) -> float:
        """How long before a slot boundary any party may have to send: clock skew plus one-way delay."""
        links = list(self.links.values()) + [self.default_link]
        delay = max(l.rtt_mean / 2.0 + 1.5 * l.rtt_sigma for l in links)
        skew = max([abs(p.clock_offset) for p in self.parties.values()] or [0.0])
        return skew + delay + 0.001

    def start_time(self) -> float:
        """Earliest slot boundary at which the parties can still meet their arrival deadlines."""
        return self.clock.now + self.lead_time()

    # -- scheduling ---------------------------------------------------------

    def _push(self, due: float, kind: EventKind, payload: Any, host_role: Optional[str] = None,
              sent_at: Optional[float] = None) -> None:
        sent_at = self.clock.now if sent_at is None else sent_at
        if due < sent_at - 1e-12:
            raise SimulationError(f"event due {due} precedes its send time {sent_at}")
        heapq.heappush(self._heap, SimEvent(due, next(self._seq), kind, payload, host_role, sent_at))

    def rtt_compensated_dispatch(self, party_name: str, target: Endpoint, arrival_time: float) -> float:
        """Send time that makes a packet arrive at arrival_time on average."""
        party = self.parties[party_name]
        role, iface = self.interface(target.ip)
        link = self.link_between(party.network, iface.network)
        send_time = arrival_time - link.rtt_mean / 2.0
        if send_time < 0:
            raise DispatchBeforeStartError(send_time)
        return send_time

    def schedule_send(self, party_name: str, to: Endpoint, at: float, tag: PacketTag,
                      spoofed_src: Optional[IPLike] = None, sport: Optional[int] = None,
                      token: Optional[str] = None) -> bool:
        """
        Send one packet from a party; returns whether the firewall accepted it.

        Raises:
            TopologyError: If the variant admits no flow from the party to the host
            SimulationError: If at lies in the past
        """
        if at < self.clock.now - 1e-12:
            raise SimulationError(f"cannot send at {at}, simulation time is {self.clock.now}")
        tag = PacketTag(tag)
        if TAG_PROTO[tag] != to.proto:
            raise TopologyError(f"tag {tag.value} does not travel over {to.proto.name}")
        party, role, iface, link = self._route(party_name, to)
        src = ip_to_int(spoofed_src) if spoofed_src is not None else party.ip
        packet = SimPacket(src_ip=src, dst_ip=to.ip, proto=to.proto, tag=tag, sport=sport,
                           dport=to.port, sent_at=at, df=(tag != PacketTag.ECHO_REQUEST), token=token)
        packet.flow = packet.flow_id()
        src_net = network_of(src)
        base = {"time": at, "src": int_to_ip(src), "dst": int_to_ip(to.ip), "proto": to.proto.name,
                "tag": tag.value}

        if self.firewall.sav and src_net != party.network:
            self.stats["dropped_sav"] += 1
            self.log.append({**base, "event": "drop", "fields": {"reason": "sav", "ingress": party.network.value}})
            return False
        admitted, reason = self.firewall.evaluate(party.network, role, iface.network, tag, to.port, packet.flow)
        if not admitted:
            self.stats[f"dropped_{reason}"] += 1
            self.log.append({**base, "event": "drop", "fields": {"reason": reason}})
            return False
        if link.sample_lost(self.rng):
            self.stats["lost"] += 1
            self.log.append({**base, "event": "drop", "fields": {"reason": "loss"}})
            return True
        arrival = at + link.sample_delay(self.rng)
        self._push(arrival, EventKind.DELIVER, (party.name, packet), role, sent_at=at)
        return True

    def schedule_train(self, party_name: str, to: Endpoint, send_times: Sequence[float], tag: PacketTag,
                       src_ips: Optional[Sequence[int]] = None, sports: Optional[Sequence[int]] = None,
                       token: Optional[str] = None, collect: bool = False, expect_rst: bool = False,
                       source_kind: str = "direct") -> Dict[str, int]:
        """
        Send a batch of packets; SAV, loss and delay are applied per packet.

        Returns:
            Counts of sent, SAV-dropped, policy-dropped, lost and in-flight packets
        """
        tag = PacketTag(tag)
        party, role, iface, link = self._route(party_name, to)
        send_times = np.asarray(send_times, dtype=float)
        n = send_times.size
        counts = {"sent": n, "dropped_sav": 0, "dropped_policy": 0, "lost": 0, "in_flight": 0}
        if n == 0:
            return counts
        if send_times.min() < self.clock.now - 1e-12:
            raise SimulationError(f"train {token} starts before the current time {self.clock.now}")
        if party.rate_cap is not None and n > 1:
            span = float(send_times.max() - send_times.min())
            if (n - 1) > party.rate_cap * span * (1 + 1e-9) + 1:
                raise TopologyError(f"party {party.name} exceeds its rate cap of {party.rate_cap} pkt/s")
        src = np.full(n, party.ip, dtype=np.int64) if src_ips is None else np.asarray(src_ips, dtype=np.int64)
        if src.size != n:
            raise TopologyError("src_ips and send_times differ in length")
        ports = np.zeros(n, dtype=np.int64) if sports is None else np.asarray(sports, dtype=np.int64)

        keep = np.ones(n, dtype=bool)
        nets = network_of_array(src)
        if self.firewall.sav:
            sav_ok = nets == party.network
            counts["dropped_sav"] = int(n - sav_ok.sum())
            keep &= sav_ok
        admitted, reason = self.firewall.evaluate(party.network, role, iface.network, tag, to.port,
                                                  None, track=False)
        if not admitted:
            counts["dropped_policy"] = int(keep.sum())
            keep[:] = False
        lost = link.sample_lost(self.rng, size=n) & keep
        counts["lost"] = int(lost.sum())
        keep &= ~lost
        delays = link.sample_delay(self.rng, size=n)

        idx = np.flatnonzero(keep)
        arrivals = send_times[idx] + delays[idx]
        order = np.argsort(arrivals, kind="stable")
        idx = idx[order]
        train = PacketTrain(party=party.name, host_role=role, iface_ip=iface.ip, tag=tag, dport=to.port,
                            send_times=send_times[idx], src_ips=src[idx], sports=ports[idx],
                            arrivals=arrivals[order], token=token, collect=collect,
                            expect_rst=expect_rst, source_kind=source_kind)
        counts["in_flight"] = int(idx.size)
        self.stats["dropped_sav"] += counts["dropped_sav"]
        self.stats["dropped_policy"] += counts["dropped_policy"]
        self.stats["lost"] += counts["lost"]
        delivered_nets = sorted({net.value for net in nets[idx]}) if idx.size else []
        self.log.append({"time": float(send_times.min()), "event": "train", "src": party.name,
                         "dst": int_to_ip(iface.ip), "proto": TAG_PROTO[tag].name, "tag": tag.value,
                         "fields": {**counts, "token": token, "ingress": party.network.value,
                                    "src_networks": delivered_nets, "dport": to.port,
                                    "source_kind": source_kind, "sav": self.firewall.sav}})
        if idx.size:
            cursor = TrainCursor(train.arrivals, lambda i, j, t=train: self._deliver_train(t, i, j),
                                 label=token or tag.value)
            self._push(float(train.arrivals[0]), EventKind.DELIVER, cursor, role,
                       sent_at=float(send_times.min()))
        return counts

    def defer(self, host_role: str, times: np.ndarray, handler: Callable[[int, int], None],
              kind: EventKind = EventKind.TIMER, label: str = "timer") -> None:
        """Schedule host-side emissions at sorted future times."""
        times = np.asarray(times, dtype=float)
        if times.size == 0:
            return
        cursor = TrainCursor(times, handler, label=label)
        self._push(float(times[0]), kind, cursor, host_role)

    # -- delivery -----------------------------------------------------------

    def _deliver_packet(self, party_name: str, packet: SimPacket, role: str, now: float) -> None:
        host = self.hosts[role]
        _, iface = self.interface(packet.dst_ip)
        host.clock.advance_to(now)
        self.stats["delivered"] += 1
        self.log.append({"time": now, "event": "deliver", "src": int_to_ip(packet.src_ip),
                         "dst": int_to_ip(packet.dst_ip), "proto": packet.proto.name, "tag": packet.tag.value,
                         "fields": {"flow": packet.flow, "ingress": self.parties[party_name].network.value,
                                    "src_network": network_of(packet.src_ip).value,
                                    "sport": packet.sport, "dport": packet.dport}})
        for response in host.handle(packet, iface, now):
            self.route_response(ResponseTrain.single(response, now))

    def _deliver_train(self, train: PacketTrain, start: int, stop: int) -> None:
        host = self.hosts[train.host_role]
        _, iface = self.interface(train.iface_ip)
        self.stats["delivered"] += stop - start
        observed = self.observed_mask(train.src_ips[start:stop]) if train.collect else None
        response = host.handle_train(train, start, stop, iface, observed)
        if response is not None and response.size:
            self.route_response(response)

    def observed_mask(self, dst_ips: np.ndarray) -> np.ndarray:
        return np.isin(np.asarray(dst_ips, dtype=np.int64), self._collecting_array)

    def route_response(self, response: ResponseTrain) -> None:
        """Carry host emissions back to the parties that own their destinations."""
        n = response.size
        self.stats["responses"] += n
        routed = np.zeros(n, dtype=bool)
        to_party = np.isin(response.dst_ips, self._party_array)
        for ip in np.unique(response.dst_ips[to_party]).tolist():
            name = self._party_ip.get(int(ip))
            if name is None:
                continue
            party = self.parties[name]
            mask = response.dst_ips == ip
            routed |= mask
            _, iface = self.interface(response.src_ip)
            link = self.link_between(party.network, iface.network)
            m = int(mask.sum())
            lost = link.sample_lost(self.rng, size=m)
            delays = link.sample_delay(self.rng, size=m)
            self.stats["responses_lost"] += int(lost.sum())
            sub = response.subset(mask)
            arrival = sub.times + delays
            if party.auto_rst and response.tag == PacketTag.SYN_ACK:
                for k in np.flatnonzero(~lost).tolist():
                    rst = SimPacket(src_ip=int(sub.dst_ips[k]), dst_ip=response.src_ip, proto=Proto.TCP,
                                    tag=PacketTag.RST, sport=int(sub.dports[k]), dport=int(sub.sports[k]),
                                    sent_at=float(arrival[k]), df=True)
                    rst.flow = rst.flow_id()
                    admitted, _ = self.firewall.evaluate(party.network, self._iface_index[response.src_ip][0],
                                                         iface.network, PacketTag.RST, rst.dport, rst.flow)
                    if admitted:
                        self._push(float(arrival[k]) + link.sample_delay(self.rng), EventKind.DELIVER,
                                   (party.name, rst), self._iface_index[response.src_ip][0],
                                   sent_at=float(arrival[k]))
            if party.collect:
                sub = sub.subset(~lost)
                sub.arrival = arrival[~lost]
                if sub.size:
                    party.inbox.setdefault(sub.token or "", []).append(sub)
        self.stats["responses_unrouted"] += int(n - routed.sum())
        if n == 1 and response.reply_to is not None:
            self.log.append({"time": float(response.times[0]), "event": "respond",
                             "src": int_to_ip(response.src_ip), "dst": int_to_ip(int(response.dst_ips[0])),
                             "proto": TAG_PROTO[response.tag].name, "tag": response.tag.value,
                             "fields": {"reply_to": response.reply_to,
                                        **{k: int(v[0]) for k, v in response.fields.items()}}})

    # -- main loop ----------------------------------------------------------

    def run_until(self, t_end: float) -> List[Dict[str, Any]]:
        """
        Process every event due at or before t_end.

        Returns:
            The event log (the same list object across calls)

        Raises:
            SimulationError: If nothing can ever happen before an infinite t_end,
                or the event budget is exhausted
        """
        if t_end < self.clock.now - 1e-12:
            raise SimulationError(f"t_end {t_end} is before the current time {self.clock.now}")
        if math.isinf(t_end) and not self._heap:
            raise SimulationError("event starvation: no pending events and no finite end time")
        steps = 0
        while self._heap and self._heap[0].due <= t_end:
            steps += 1
            if steps > self.max_events:
                raise SimulationError(f"bounded-step abort after {self.max_events} events")
            event = heapq.heappop(self._heap)
            self.clock.advance_to(event.due)
            payload = event.packet
            if isinstance(payload, TrainCursor):
                horizon = min(self._heap[0].due if self._heap else math.inf, t_end)
                stop = int(np.searchsorted(payload.times, horizon, side="right"))
                stop = max(stop, payload.position + 1)
                start = payload.position
                payload.position = stop
                host = self.hosts.get(event.host_role)
                if host is not None:
                    host.clock.advance_to(float(payload.times[start]))
                payload.handler(start, stop)
                if payload.position < payload.times.size:
                    heapq.heappush(self._heap, SimEvent(float(payload.times[payload.position]),
                                                        next(self._seq), event.kind, payload,
                                                        event.host_role, event.sent_at))
            else:
                party_name, packet = payload
                self._deliver_packet(party_name, packet, event.host_role, event.due)
        if not math.isinf(t_end):
            self.clock.advance_to(t_end)
            for host in self.hosts.values():
                host.advance(t_end)
        return self.log

    def pending(self) -> int:
        return len(self._heap)


# ---------------------------------------------------------------------------
# Audit and export
# ---------------------------------------------------------------------------

def audit_event_log(records: Iterable[Dict[str, Any]]) -> Dict[str, List[Dict[str, Any]]]:
    """
    Check SAV soundness and stateful-drop behaviour over an event log.

    Returns:
        Dict with 'sav' and 'stateful' violation lists (both empty for a sound run)
    """
    violations = {"sav": [], "stateful": []}
    delivered_flows: Dict[str, str] = {}
    opened: set = set()
    for rec in records:
        event = rec.get("event")
        f = rec.get("fields", {})
        if event == "deliver":
            if f.get("src_network") != f.get("ingress"):
                violations["sav"].append(rec)
            tag = PacketTag(rec["tag"])
            flow = f.get("flow")
            if tag in OPENING_TAGS:
                opened.add(flow)
            elif tag in STATEFUL_TAGS and flow not in opened:
                violations["stateful"].append(rec)
            delivered_flows[flow] = rec["tag"]
        elif event == "train":
            if f.get("sav", True) and f.get("in_flight", 0) and \
                    any(net != f.get("ingress") for net in f.get("src_networks", [])):
                violations["sav"].append(rec)
            if f.get("in_flight", 0) and PacketTag(rec["tag"]) in STATEFUL_TAGS:
                violations["stateful"].append(rec)
        elif event == "respond":
            request = delivered_flows.get(f.get("reply_to"))
            if request is None or PacketTag(request) not in REQUEST_TAGS:
                violations["stateful"].append(rec)
    return violations


def event_log_lines(records: Iterable[Dict[str, Any]]) -> Iterable[str]:
    """Line-delimited JSON form of an event log; stable key order."""
    for rec in records:
        yield json.dumps(rec, sort_keys=True, default=_json_default)


def _json_default(value: Any):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, Enum):
        return value.value
    raise TypeError(f"cannot serialise {type(value).__name__}")
