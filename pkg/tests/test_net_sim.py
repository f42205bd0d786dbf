#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Tests for the event scheduler, the firewall and the event-log audit.
"""

import sys
import os
import json

import numpy as np
import pytest

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from net_sim import (
    DispatchBeforeStartError, LinkModel, Network, PacketTag, Party, Proto, SimulationError, TopologyError,
    address_in, address_block, audit_event_log, event_log_lines, network_of, network_of_array,
)
from target_hosts import build_topology


def _dmz(seed=1, **spec):
    return build_topology({"variant": "dmz_exfil", "target": {"os": "linux"}, **spec}, seed)


def test_network_classification():
    assert network_of("10.0.3.4") == Network.INTERNAL
    assert network_of("172.16.0.9") == Network.DMZ
    assert network_of("10.2.0.5") == Network.CONTAINER_B
    assert network_of("45.1.2.3") == Network.INTERNET
    nets = network_of_array(np.array([address_in(Network.DMZ, 3), address_in(Network.INTERNET, 3)]))
    assert nets.tolist() == [Network.DMZ, Network.INTERNET]
    assert all(isinstance(n, Network) for n in nets.tolist())
    assert nets[1].value == Network.INTERNET.value
    outside = network_of_array(address_block(Network.INTERNET, 10, 4))
    assert (outside == Network.INTERNET).all()
    assert address_block(Network.INTERNAL, 5, 3).tolist() == [address_in(Network.INTERNAL, k) for k in (5, 6, 7)]
    with pytest.raises(TopologyError):
        address_block(Network.DMZ, 250, 10)


def test_link_and_party_validation():
    with pytest.raises(TopologyError):
        LinkModel(loss_rate=1.5)
    with pytest.raises(TopologyError):
        Party("p", Network.INTERNAL, [address_in(Network.INTERNAL, 1)], clock_offset=0.2)
    with pytest.raises(TopologyError):
        Party("p", Network.INTERNAL, [address_in(Network.DMZ, 1)])


def test_echo_round_trip_reaches_receiver_inbox():
    topo = _dmz()
    ep = topo.target_endpoint("receiver", Proto.ICMP)
    assert topo.schedule_send("receiver", ep, 0.0, PacketTag.ECHO_REQUEST, token="probe")
    topo.run_until(1.0)
    rx = topo.parties["receiver"].received("probe")
    assert rx["arrival"].size == 1
    assert 0.07 < rx["arrival"][0] < 0.09
    assert rx["tag"][0] == PacketTag.ECHO_REPLY.value
    assert "ipid" in rx
    assert [r["event"] for r in topo.log] == ["deliver", "respond"]
    assert audit_event_log(topo.log) == {"sav": [], "stateful": []}


def test_spoofed_source_is_dropped_by_sav():
    topo = _dmz()
    ep = topo.target_endpoint("sender", Proto.UDP)
    accepted = topo.schedule_send("sender", ep, 0.0, PacketTag.UDP_REQUEST,
                                  spoofed_src=address_in(Network.INTERNET, 77), sport=5000)
    assert not accepted
    assert topo.stats["dropped_sav"] == 1
    assert topo.log[-1]["fields"]["reason"] == "sav"


def test_spoofing_inside_own_network_passes_sav():
    topo = _dmz()
    ep = topo.target_endpoint("sender", Proto.UDP)
    counts = topo.schedule_train("sender", ep, np.linspace(0.0, 0.01, 10), PacketTag.UDP_REQUEST,
                                 src_ips=address_block(Network.INTERNAL, 100, 10), sports=np.full(10, 5000))
    assert counts["in_flight"] == 10
    assert counts["dropped_sav"] == 0
    topo.run_until(1.0)
    assert audit_event_log(topo.log)["sav"] == []


def test_stateless_rst_is_invalid_until_flow_opens():
    topo = _dmz()
    ep = topo.target_endpoint("sender", Proto.TCP)
    assert not topo.schedule_send("sender", ep, 0.0, PacketTag.RST, sport=40000)
    assert topo.stats["dropped_invalid"] == 1
    assert topo.schedule_send("sender", ep, 0.0, PacketTag.SYN, sport=40000)
    assert topo.schedule_send("sender", ep, 0.5, PacketTag.RST, sport=40000)
    topo.run_until(2.0)
    assert audit_event_log(topo.log)["stateful"] == []


def test_cross_compartment_flow_is_policy_dropped():
    topo = build_topology({"variant": "containers", "target": {"os": "linux"}}, 1)
    other = topo.target_endpoint("receiver", Proto.ICMP)
    assert not topo.schedule_send("sender", other, 0.0, PacketTag.ECHO_REQUEST)
    assert topo.stats["dropped_policy"] == 1


def test_train_replies_arrive_sorted():
    topo = _dmz()
    ep = topo.target_endpoint("receiver", Proto.ICMP)
    counts = topo.schedule_train("receiver", ep, np.linspace(0.1, 0.2, 100), PacketTag.ECHO_REQUEST,
                                 token="train", collect=True)
    assert counts == {"sent": 100, "dropped_sav": 0, "dropped_policy": 0, "lost": 0, "in_flight": 100}
    topo.run_until(1.0)
    rx = topo.parties["receiver"].received("train")
    assert rx["arrival"].size == 100
    assert np.all(np.diff(rx["arrival"]) >= 0)
    assert len(set(rx["ipid"].tolist())) == 100


def test_rate_cap_is_enforced():
    topo = _dmz(parties={"sender": {"rate_cap": 100}})
    ep = topo.target_endpoint("sender", Proto.UDP)
    with pytest.raises(TopologyError):
        topo.schedule_train("sender", ep, np.linspace(0.0, 1.0, 1000), PacketTag.UDP_REQUEST)


def test_lossy_link_drops_packets():
    topo = _dmz(links={"default": {"loss_rate": 0.5}})
    ep = topo.target_endpoint("receiver", Proto.ICMP)
    counts = topo.schedule_train("receiver", ep, np.linspace(0.0, 1.0, 2000), PacketTag.ECHO_REQUEST)
    assert 800 < counts["lost"] < 1200


def test_scheduler_guards():
    topo = _dmz()
    ep = topo.target_endpoint("receiver", Proto.ICMP)
    topo.run_until(5.0)
    with pytest.raises(SimulationError):
        topo.schedule_send("receiver", ep, 1.0, PacketTag.ECHO_REQUEST)
    with pytest.raises(SimulationError):
        topo.run_until(4.0)
    with pytest.raises(SimulationError):
        topo.run_until(float("inf"))


def test_bounded_step_abort():
    topo = build_topology({"variant": "dmz_exfil", "target": {"os": "linux"}}, 1, max_events=2)
    ep = topo.target_endpoint("receiver", Proto.ICMP)
    for k in range(3):
        topo.schedule_send("receiver", ep, 0.1 * k, PacketTag.ECHO_REQUEST)
    with pytest.raises(SimulationError, match="bounded-step"):
        topo.run_until(10.0)


def test_dispatch_before_start():
    topo = _dmz()
    ep = topo.target_endpoint("receiver", Proto.ICMP)
    assert topo.rtt_compensated_dispatch("receiver", ep, 1.0) == pytest.approx(1.0 - 0.0799 / 2)
    with pytest.raises(DispatchBeforeStartError) as excinfo:
        topo.rtt_compensated_dispatch("receiver", ep, 0.01)
    assert excinfo.value.shift > 0


def test_lead_time_covers_delay_and_skew():
    topo = _dmz(parties={"receiver": {"clock_offset": 0.05}})
    assert topo.lead_time() > 0.05 + 0.0799 / 2
    assert topo.start_time() == pytest.approx(topo.lead_time())


def test_audit_flags_unsound_records():
    records = [
        {"event": "deliver", "tag": "udp_request", "fields": {"src_network": "internet", "ingress": "internal",
                                                              "flow": "f1"}},
        {"event": "deliver", "tag": "rst", "fields": {"src_network": "internal", "ingress": "internal",
                                                      "flow": "f2"}},
        {"event": "respond", "tag": "udp_response", "fields": {"reply_to": "f9"}},
    ]
    violations = audit_event_log(records)
    assert len(violations["sav"]) == 1
    assert len(violations["stateful"]) == 2


def test_event_log_lines_are_sorted_json():
    topo = _dmz()
    ep = topo.target_endpoint("receiver", Proto.ICMP)
    topo.schedule_send("receiver", ep, 0.0, PacketTag.ECHO_REQUEST)
    topo.run_until(1.0)
    lines = list(event_log_lines(topo.log))
    assert len(lines) == 2
    first = json.loads(lines[0])
    assert list(first) == sorted(first)
