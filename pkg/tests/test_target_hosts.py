#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Tests for target host behaviour and topology layouts.
"""

import sys
import os

import numpy as np
import pytest

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from os_models import ID_SPACE, MitigatedGenerator, LinuxIpidGenerator, ip_to_int
from tcp_models import FL_LOW_BITS
from net_sim import Network, PacketTag, Proto, TopologyError
from target_hosts import (
    LinuxHost, MacHost, NetBsdHost, OpenBsdHost, WindowsHost, build_topology,
)


def _topology(os_kind, variant="dmz_exfil", seed=3, **spec):
    return build_topology({"variant": variant, "target": {"os": os_kind, **spec.pop("target", {})}, **spec}, seed)


@pytest.mark.parametrize("os_kind, cls", [("linux", LinuxHost), ("windows", WindowsHost), ("macos", MacHost),
                                          ("openbsd", OpenBsdHost), ("netbsd", NetBsdHost)])
def test_dmz_layout_builds_every_os(os_kind, cls):
    topo = _topology(os_kind)
    assert isinstance(topo.hosts["dmz"], cls)
    assert set(topo.parties) == {"sender", "receiver"}
    assert topo.target_endpoint("sender", Proto.UDP).port == 53
    assert topo.target_endpoint("receiver", Proto.TCP).port == 80


@pytest.mark.parametrize("mode, hosts", [("ports", 1), ("containers", 1), ("hosts", 2)])
def test_alias_layouts(mode, hosts):
    topo = _topology("linux", variant="alias", alias_mode=mode)
    assert len(topo.hosts) == hosts
    assert topo.parties["sender"].network == Network.INTERNET


def test_piercing_layout_exposes_only_icmp():
    topo = _topology("linux", variant="piercing")
    assert topo.target_endpoint("sender", Proto.ICMP).network == Network.INTERNAL
    assert topo.target_endpoint("receiver", Proto.ICMP).network == Network.INTERNET
    with pytest.raises(TopologyError):
        topo.target_endpoint("sender", Proto.UDP)


def test_unknown_variant_and_os():
    with pytest.raises(TopologyError):
        build_topology({"variant": "mesh"}, 1)
    with pytest.raises(TopologyError):
        build_topology({"target": {"os": "plan9"}}, 1)
    with pytest.raises(TopologyError):
        build_topology({"variant": "alias", "alias_mode": "vlan"}, 1)


def test_same_seed_builds_same_host_state():
    a = _topology("linux", seed=11).hosts["dmz"].snapshot()
    b = _topology("linux", seed=11).hosts["dmz"].snapshot()
    c = _topology("linux", seed=12).hosts["dmz"].snapshot()
    assert a == b
    assert a != c


def test_linux_bucket_oracle_matches_array_form():
    topo = _topology("linux")
    host = topo.hosts["dmz"]
    iface = host.interfaces[0]
    dsts = np.arange(ip_to_int("45.0.0.1"), ip_to_int("45.0.0.1") + 20)
    assert host.buckets(dsts, iface, Proto.ICMP).tolist() == [host.bucket(int(d), iface, Proto.ICMP) for d in dsts]


def test_per_container_mitigation_wraps_linux_generator():
    topo = _topology("linux", variant="containers", mitigation={"mode": "per_container"})
    host = topo.hosts["docker"]
    assert isinstance(host.ipid, MitigatedGenerator)
    assert isinstance(host.ipid.inner, LinuxIpidGenerator)


def test_windows_syn_is_retransmitted_then_reset():
    topo = _topology("windows")
    ep = topo.target_endpoint("receiver", Proto.TCP)
    topo.schedule_send("receiver", ep, 0.0, PacketTag.SYN, sport=40000, token="syn")
    topo.run_until(30.0)
    rx = topo.parties["receiver"].received("syn")
    assert rx["tag"].tolist() == ["syn_ack", "syn_ack", "syn_ack", "rst"]
    assert rx["arrival"][1] == pytest.approx(3.0 + 0.0799, abs=0.01)
    assert rx["arrival"][3] == pytest.approx(21.0 + 0.0799, abs=0.01)
    ids = rx["ipid"].tolist()
    assert all((b - a) % ID_SPACE == 1 for a, b in zip(ids, ids[1:]))


def test_windows_rst_cancels_followups():
    topo = _topology("windows")
    ep = topo.target_endpoint("receiver", Proto.TCP)
    topo.schedule_send("receiver", ep, 0.0, PacketTag.SYN, sport=40000, token="syn")
    topo.schedule_send("receiver", ep, 1.0, PacketTag.RST, sport=40000)
    topo.run_until(30.0)
    assert topo.parties["receiver"].received("syn")["tag"].tolist() == ["syn_ack"]


def test_mac_echo_limiter_caps_a_burst():
    topo = _topology("macos")
    host = topo.hosts["dmz"]
    ep = topo.target_endpoint("receiver", Proto.ICMP)
    topo.schedule_train("receiver", ep, np.linspace(10.1, 10.6, 1500), PacketTag.ECHO_REQUEST,
                        token="burst", collect=True)
    topo.run_until(12.0)
    answered = topo.parties["receiver"].received("burst")["arrival"].size
    assert host.limiter.r_limit + 1 <= answered < host.limiter.r_limit + 40
    assert host.counters["echo_limited"] == 1500 - answered


def test_openbsd_window_option_and_default():
    assert _topology("openbsd").hosts["dmz"].ipid.gen.m_cap == 32768
    assert _topology("openbsd", target={"options": {"m_cap": 8192}}).hosts["dmz"].ipid.gen.m_cap == 8192
    assert _topology("macos").hosts["dmz"].ipid.gen.m_cap == 4096


def test_netbsd_connect_carries_isn_and_flow_label():
    topo = _topology("netbsd", target={"options": {"flowlabel_msb": 1}})
    ep = topo.target_endpoint("receiver", Proto.TCP)
    topo.schedule_send("receiver", ep, 2.0, PacketTag.CONNECT, sport=40000, token="c")
    topo.run_until(3.0)
    rx = topo.parties["receiver"].received("c")
    assert rx["tag"].tolist() == ["data"]
    assert rx["flow_label"][0] >> FL_LOW_BITS == 1
    assert rx["isn"][0] >> 24 == (4 + 1) % 256


def test_netbsd_syn_ack_flow_label_is_zero_and_rst_clears_cache():
    topo = _topology("netbsd")
    host = topo.hosts["dmz"]
    ep = topo.target_endpoint("receiver", Proto.TCP)
    topo.schedule_send("receiver", ep, 0.0, PacketTag.SYN, sport=40000, token="s")
    topo.run_until(0.5)
    assert host.syncache.live == 1
    topo.schedule_send("receiver", ep, 1.0, PacketTag.RST, sport=40000)
    topo.run_until(60.0)
    rx = topo.parties["receiver"].received("s")
    assert rx["tag"].tolist() == ["syn_ack"]
    assert rx["flow_label"].tolist() == [0]
    assert host.syncache.live == 0


def test_syncache_retransmits_until_expiry():
    topo = _topology("netbsd")
    host = topo.hosts["dmz"]
    ep = topo.target_endpoint("receiver", Proto.TCP)
    topo.schedule_send("receiver", ep, 0.0, PacketTag.SYN, sport=40000, token="s")
    topo.run_until(60.0)
    rx = topo.parties["receiver"].received("s")
    assert rx["arrival"].size == 5
    assert np.diff(rx["arrival"]) == pytest.approx([3.0, 6.0, 12.0, 24.0], abs=0.01)
    assert len(set(rx["isn"].tolist())) == 1
    assert host.syncache.live == 0


@pytest.mark.parametrize("consumes", [False, True])
def test_netbsd_syn_train_advances_prng_only_when_configured(consumes):
    topo = _topology("netbsd", target={"options": {"synack_consumes_steps": consumes}})
    host = topo.hosts["dmz"]
    ep = topo.target_endpoint("receiver", Proto.TCP)
    topo.schedule_train("receiver", ep, np.linspace(0.1, 0.2, 20), PacketTag.SYN,
                        sports=40000 + np.arange(20), token="t")
    topo.run_until(1.0)
    assert host.syncache.live == 20
    steps = host.flowlabel_prng().steps_since_reseed
    if consumes:
        assert 2 * 20 <= steps <= 8 * 20
    else:
        assert steps == 0
