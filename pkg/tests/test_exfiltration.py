#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Tests for message runs, alias resolution and whole-scenario execution.
"""

import sys
import os
import json

import pytest
from scipy import stats

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from os_models import derive_rng
from net_sim import event_log_lines
from target_hosts import build_topology
from channels import ChannelConfigError, LinuxChannelParams, SlotRecord
from exfiltration import (
    BitTranscript, adapt_topology_spec, alias_resolve, channel_class, channel_params,
    execute_scenario, parse_message, run_exfiltration,
)
from benchmark import set_field


def _topology(os_kind, seed=1, variant="dmz_exfil", **spec):
    return build_topology({"variant": variant, "target": {"os": os_kind}, **spec}, seed)


def _scenario(**overrides):
    scenario = {
        "test_id": "T-mac",
        "os": "macos",
        "scenario": "dmz_exfil",
        "protocol": "UDP",
        "master_seed": 77,
        "topology": {"variant": "dmz_exfil", "target": {"os": "macos"}},
        "channel": {"kind": "exclusion", "params": {"K": 700}},
        "message": "10110",
    }
    scenario.update(overrides)
    return scenario


# ---------------------------------------------------------------------------
# Messages and parameters
# ---------------------------------------------------------------------------

def test_parse_message_forms():
    assert parse_message("10 11") == [1, 0, 1, 1]
    assert parse_message([0, 1, True]) == [0, 1, 1]
    assert parse_message({"hex": "0xA5"}) == [1, 0, 1, 0, 0, 1, 0, 1]
    assert parse_message({"bits": "01"}) == [0, 1]
    random_bits = parse_message({"random_bits": 16}, derive_rng(1, "message"))
    assert random_bits == parse_message({"random_bits": 16}, derive_rng(1, "message"))
    assert len(random_bits) == 16


@pytest.mark.parametrize("message", ["1021", [0, 2], {"hex": "xyz"}, {"words": 3}, {"random_bits": 4}])
def test_parse_message_rejects(message):
    with pytest.raises(ValueError):
        parse_message(message)


def test_unknown_channel_kind():
    with pytest.raises(ChannelConfigError, match="unknown channel kind"):
        channel_class("morse")
    with pytest.raises(ChannelConfigError):
        channel_params("windows", {"K": 6, "slots": 3})


def test_adapt_topology_spec_sizes_linux_receiver():
    spec = {"variant": "piercing", "target": {"os": "linux"}}
    adapted = adapt_topology_spec("linux", LinuxChannelParams(piercing=True), spec)
    assert adapted["parties"]["receiver"]["n_ips"] == 112
    assert "parties" not in spec
    assert adapt_topology_spec("syncache", channel_params("syncache"), spec)["parties"]["receiver"]["auto_rst"] is False


# ---------------------------------------------------------------------------
# Transcripts
# ---------------------------------------------------------------------------

def test_transcript_aggregates():
    transcript = BitTranscript("exclusion", [1, 0, 1, 1], start=10.0, end=18.0)
    transcript.records = [SlotRecord(0, 1, 10.0, 12.0, decoded=1),
                          SlotRecord(1, 0, 12.0, 14.0, decoded=1),
                          SlotRecord(2, 1, 14.0, 16.0, decoded=1, error="late"),
                          SlotRecord(3, 1, 16.0, 18.0, decoded=1)]
    assert transcript.successes == 3
    assert transcript.invalid_slots == 1
    assert transcript.ber == pytest.approx(0.25)
    assert transcript.throughput == pytest.approx(1800.0)
    row = transcript.summary_row(test_id="X")
    assert row["bits"] == 4 and row["bit_rate_bph"] == 1800.0


def test_empty_message_yields_empty_transcript():
    transcript = run_exfiltration([], "exclusion", {}, _topology("macos"))
    assert transcript.records == []
    assert transcript.ber == 0.0 and transcript.throughput == 0.0


def test_exclusion_message_round_trip():
    message = [1, 0, 1, 1, 0, 0, 1]
    transcript = run_exfiltration(message, "exclusion", {}, _topology("macos", seed=3), seed=3)
    assert transcript.bits_decoded == message
    assert transcript.ber == 0.0
    assert transcript.throughput == pytest.approx(1800.0)
    assert all(r.start >= prev.end for prev, r in zip(transcript.records, transcript.records[1:]))


def test_isn_message_round_trip():
    message = [0, 1, 1, 0, 1, 0, 0, 1]
    transcript = run_exfiltration(message, "netbsd_isn", {}, _topology("netbsd", seed=4), seed=4)
    assert transcript.bits_decoded == message
    assert transcript.throughput == pytest.approx(7200.0)


def test_channel_config_errors_propagate():
    with pytest.raises(ChannelConfigError):
        run_exfiltration([1, 0], "linux", {}, _topology("windows"))


def test_unreadable_slots_are_guessed():
    """A silenced receiver still yields one bit per slot, each marked as a guess."""
    topo = _topology("macos", seed=5, links={"internet": {"loss_rate": 0.999999}})
    transcript = run_exfiltration([1, 0, 1], "exclusion", {}, topo, seed=5)
    assert len(transcript.records) == 3
    assert all(r.details.get("guessed") for r in transcript.records)
    assert all(r.decoded in (0, 1) and r.error for r in transcript.records)
    assert transcript.invalid_slots == 3


# ---------------------------------------------------------------------------
# Alias resolution
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("mode, verdict", [("ports", "same"), ("hosts", "different")])
def test_alias_resolution_over_exclusion(mode, verdict):
    topo = _topology("macos", seed=6, variant="alias", alias_mode=mode)
    result = alias_resolve(None, None, "exclusion", {}, topo, trials=3, seed=6)
    assert result.verdict == verdict
    assert len(result.readings) == 3
    assert result.to_dict()["verdict"] == verdict


def test_alias_resolution_with_explicit_endpoints():
    topo = _topology("macos", seed=7, variant="alias", alias_mode="hosts")
    role, network = topo.targets["sender"]
    result = alias_resolve((role, network.value), (role, network.value), "exclusion", {}, topo, trials=2, seed=7)
    assert result.verdict == "same"


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------

def test_execute_scenario_reports_a_clean_run():
    result = execute_scenario(_scenario(), seed=77)
    summary = result["summary"]
    assert summary["bits"] == 5 and summary["successes"] == 5
    assert summary["seed"] == 77 and summary["repetition"] == 0
    assert len(result["per_bit"]) == 5
    assert result["violations"] == {"sav": 0, "stateful": 0, "non_disruption": 0}


def test_execute_scenario_is_deterministic():
    first = execute_scenario(_scenario(message={"random_bits": 6}), seed=5)
    second = execute_scenario(_scenario(message={"random_bits": 6}), seed=5)
    assert first["per_bit"] == second["per_bit"]
    assert list(event_log_lines(first["topology"].log)) == list(event_log_lines(second["topology"].log))


def test_execute_alias_scenario_counts_expected_verdict():
    scenario = _scenario(topology={"variant": "alias", "alias_mode": "hosts", "target": {"os": "macos"}},
                         alias={"trials": 2, "expect": "different"})
    del scenario["message"]
    result = execute_scenario(scenario, seed=8)
    assert result["alias"]["verdict"] == "different"
    assert result["summary"]["successes"] == 2
    assert result["per_bit"] == []


SCENARIO_DIR = os.path.join(os.path.dirname(__file__), '..', 'data', 'scenarios')


def _bundled(test_id):
    with open(os.path.join(SCENARIO_DIR, f"{test_id}.json"), 'r', encoding='utf-8') as f:
        return json.load(f)


@pytest.mark.slow
@pytest.mark.parametrize("test_id", ["LE-1-desk", "LE-3-desk"])
@pytest.mark.parametrize("sigma", [0.0003, 0.0014])
def test_linux_channel_delivers_every_bit_under_jitter(test_id, sigma):
    scenario = _bundled(test_id)
    set_field(scenario, "topology.links.default.rtt_sigma", sigma)
    for rep in range(5):
        result = execute_scenario(scenario, scenario["master_seed"] + rep, rep)
        summary = result["summary"]
        assert summary["bits"] == 128
        assert summary["successes"] == 128, f"seed {scenario['master_seed'] + rep}"
        assert result["violations"]["sav"] == 0
        assert result["violations"]["stateful"] == 0


@pytest.mark.slow
@pytest.mark.parametrize("test_id", ["LE-1-mitigated", "WE-1-mitigated", "ME-1"])
@pytest.mark.parametrize("mode", ["full_random_id", "per_destination_class"])
def test_mitigations_reduce_channels_to_coin_flips(test_id, mode):
    scenario = _bundled(test_id)
    set_field(scenario, "topology.mitigation", {"mode": mode})
    scenario["message"] = {"random_bits": 1024}
    summary = execute_scenario(scenario, scenario["master_seed"])["summary"]
    assert summary["bits"] == 1024
    errors = summary["bits"] - summary["successes"]
    assert stats.binomtest(errors, summary["bits"], 0.5).pvalue > 1e-3
