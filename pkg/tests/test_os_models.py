#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Tests for the IPv4 ID generator models, the clock and the mitigation policies.
"""

import sys
import os
import json
import math

import numpy as np
import pytest

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from os_models import (
    ID_SPACE, ClockRegressionError, IncompatiblePolicyError, ModelError, SimClock,
    LinuxIpidState, LinuxIpidGenerator, linux_bucket_index, linux_bucket_index_array,
    linux_generate_ipid, linux_generate_batch,
    WindowsPathSet, windows_emit, windows_tick, windows_non_disruption_violations,
    ExclusionWindowGen, exclusion_generate, exclusion_generate_many,
    MacIcmpRateLimiter, mac_icmp_admit,
    FieldRequest, MitigationMode, MitigationPolicy, MitigatedGenerator, RandomIpidGenerator,
    apply_mitigation, derive_rng, ip_to_int, int_to_ip, write_snapshot,
)
from tcp_models import IsnGenerator, SynCache


def test_derive_rng_is_replayable():
    """Same seed and labels give the same stream; another label gives another."""
    a = derive_rng(42, "target", "linux").integers(0, 1 << 30, size=8)
    b = derive_rng(42, "target", "linux").integers(0, 1 << 30, size=8)
    c = derive_rng(42, "target", "windows").integers(0, 1 << 30, size=8)
    assert a.tolist() == b.tolist()
    assert a.tolist() != c.tolist()


def test_clock_never_moves_back():
    clock = SimClock()
    clock.advance_to(1.5)
    clock.advance_to(1.5)
    assert clock.now == 1.5
    with pytest.raises(ClockRegressionError):
        clock.advance_to(1.0)


def test_clock_jiffies_at_tick_boundary():
    clock = SimClock(0.012)
    assert clock.jiffies(250) == 3


def test_ip_conversions():
    assert ip_to_int("10.0.0.1") == 0x0A000001
    assert int_to_ip(0x0A000001) == "10.0.0.1"
    assert ip_to_int(np.int64(7)) == 7


# ---------------------------------------------------------------------------
# Linux
# ---------------------------------------------------------------------------

def _linux_state(seed=1):
    return LinuxIpidState.create(derive_rng(seed, "linux"))


def test_linux_same_jiffy_increments_by_one():
    """Packets inside one jiffy advance the bucket counter by exactly 1."""
    state = _linux_state()
    clock = SimClock(10.0)
    rng = derive_rng(1, "emit")
    first = linux_generate_ipid(state, clock, "10.0.0.5", "203.0.113.9", 1, 0, rng)
    second = linux_generate_ipid(state, clock, "10.0.0.5", "203.0.113.9", 1, 0, rng)
    assert second == (first + 1) % ID_SPACE


def test_linux_idle_hop_is_bounded_by_idle_jiffies():
    state = _linux_state()
    rng = derive_rng(2, "emit")
    clock = SimClock(1.0)
    for _ in range(50):
        before = linux_generate_ipid(state, clock, "10.0.0.5", "203.0.113.9", 1, 0, rng)
        clock.advance_to(clock.now + 0.04)   # 10 jiffies at 250 Hz
        after = linux_generate_ipid(state, clock, "10.0.0.5", "203.0.113.9", 1, 0, rng)
        assert 1 <= (after - before) % ID_SPACE <= 10


def test_linux_batch_matches_packet_by_packet():
    """The vectorised train emits what the scalar path emits from the same stream."""
    times = np.sort(derive_rng(3, "times").uniform(0.0, 2.0, size=400))
    dsts = derive_rng(3, "dsts").integers(0x0A000000, 0x0A000000 + 64, size=400)

    scalar_state = _linux_state(5)
    batch_state = _linux_state(5)
    scalar_rng = derive_rng(9, "ids")
    clock = SimClock()
    expected = []
    for t, dst in zip(times.tolist(), dsts.tolist()):
        clock.advance_to(t)
        expected.append(linux_generate_ipid(scalar_state, clock, "192.0.2.1", int(dst), 17, 0, scalar_rng))

    jiffies = np.floor(times * batch_state.f + 1e-9).astype(np.int64)
    buckets = linux_bucket_index_array(ip_to_int("192.0.2.1"), dsts, 17, 0, batch_state.hash_key)
    got = linux_generate_batch(batch_state, jiffies, buckets, derive_rng(9, "ids"))
    assert got.tolist() == expected
    assert batch_state.beta.tolist() == scalar_state.beta.tolist()
    assert batch_state.tau.tolist() == scalar_state.tau.tolist()


def test_linux_generator_matches_straight_line_counter_table():
    """Bucket i: hop = 1 + random{0..t_now - tau[i] - 1}, random of the empty set is 0."""
    steps = derive_rng(4, "gaps").choice([0.0, 0.001, 0.004, 0.05, 1.3], size=300)
    times = 0.5 + np.cumsum(steps)
    dsts = derive_rng(4, "dsts").integers(0x0A000000, 0x0A000000 + 6, size=300)

    state = _linux_state(8)
    beta = [int(v) for v in state.beta]
    tau = [0] * len(beta)
    clock = SimClock()
    rng = derive_rng(4, "ids")
    draws = derive_rng(4, "ids")
    for t, dst in zip(times.tolist(), dsts.tolist()):
        clock.advance_to(t)
        got = linux_generate_ipid(state, clock, "192.0.2.1", int(dst), 1, 0, rng)

        i = linux_bucket_index("192.0.2.1", int(dst), 1, 0, state.hash_key)
        t_now = int(math.floor(t * 250 + 1e-9))
        u = draws.random()
        idle = t_now - tau[i]
        hop = 1 + (int(u * idle) if idle > 0 else 0)
        beta[i] = (beta[i] + hop) % ID_SPACE
        tau[i] = t_now
        assert got == beta[i]
    assert state.beta.tolist() == beta


def test_linux_bucket_index_scalar_and_array_agree():
    state = _linux_state()
    dsts = np.arange(0x0A000000, 0x0A000010)
    arr = linux_bucket_index_array(ip_to_int("192.0.2.1"), dsts, 1, 3, state.hash_key)
    scalar = [linux_bucket_index("192.0.2.1", int(d), 1, 3, state.hash_key) for d in dsts]
    assert arr.tolist() == scalar


# ---------------------------------------------------------------------------
# Windows
# ---------------------------------------------------------------------------

def test_windows_path_is_per_pair_counter():
    ps = WindowsPathSet()
    clock = SimClock(1.0)
    rng = derive_rng(1, "win")
    first = windows_emit(ps, clock, "10.0.0.1", "10.0.0.2", rng)
    assert windows_emit(ps, clock, "10.0.0.1", "10.0.0.2", rng) == (first + 1) % ID_SPACE
    windows_emit(ps, clock, "10.0.0.1", "10.0.0.3", rng)
    assert len(ps.paths) == 2
    assert ps.created_total == 2


def test_windows_flood_purges_only_stale_paths():
    """A burst of new Paths starts a purge that only removes Paths idle past the TTL."""
    ps = WindowsPathSet()
    rng = derive_rng(2, "win")
    clock = SimClock(0.0)
    windows_emit(ps, clock, "10.0.0.1", "10.0.0.2", rng)   # goes stale
    windows_emit(ps, clock, "10.0.0.1", "10.0.0.3", rng)
    clock.advance_to(99.0)
    windows_emit(ps, clock, "10.0.0.1", "10.0.0.3", rng)   # refreshed
    clock.advance_to(100.0)
    for k in range(ps.flood_threshold):
        windows_emit(ps, clock, "10.0.1.1", 0x0B000000 + k, rng)
    assert ps.purge is not None

    clock.advance_to(104.0)
    status = windows_tick(ps, clock)
    assert not status["sequence_active"]
    assert ps.purged_total == 1
    assert (ip_to_int("10.0.0.1"), ip_to_int("10.0.0.2")) not in ps.paths
    assert (ip_to_int("10.0.0.1"), ip_to_int("10.0.0.3")) in ps.paths
    assert windows_non_disruption_violations(ps) == 0


# ---------------------------------------------------------------------------
# Exclusion window
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("m_cap", [4096, 32768])
def test_exclusion_never_repeats_inside_window(m_cap):
    gen = ExclusionWindowGen(m_cap)
    ids = exclusion_generate_many(gen, derive_rng(1, "excl", m_cap), 3 * m_cap)
    last_seen = {}
    for k, value in enumerate(ids.tolist()):
        if value in last_seen:
            assert k - last_seen[value] > m_cap
        last_seen[value] = k
    assert len(gen.window) == m_cap
    assert sum(gen.in_window) == m_cap


def test_exclusion_single_draw_outside_window():
    gen = ExclusionWindowGen(100)
    rng = derive_rng(3, "excl")
    recent = [exclusion_generate(gen, rng) for _ in range(100)]
    assert exclusion_generate(gen, rng) not in recent


def test_exclusion_rejects_bad_window():
    with pytest.raises(ModelError):
        ExclusionWindowGen(0)
    with pytest.raises(ModelError):
        ExclusionWindowGen(ID_SPACE)


# ---------------------------------------------------------------------------
# macOS ICMP limiter
# ---------------------------------------------------------------------------

def test_mac_icmp_limiter_budget_and_reset():
    rng = derive_rng(1, "limiter")
    limiter = MacIcmpRateLimiter.create(rng)
    assert 251 <= limiter.r_limit <= 500
    clock = SimClock(5.2)
    admitted = [mac_icmp_admit(limiter, clock, rng) for _ in range(limiter.r_limit + 1)]
    assert all(admitted)
    late = sum(mac_icmp_admit(limiter, clock, rng) for _ in range(2000))
    assert late < 100

    clock.advance_to(6.0)
    assert mac_icmp_admit(limiter, clock, rng)
    assert limiter.interval_count == 1


# ---------------------------------------------------------------------------
# Mitigation
# ---------------------------------------------------------------------------

def test_mitigation_none_returns_generator_itself():
    gen = LinuxIpidGenerator(_linux_state())
    assert apply_mitigation(gen, MitigationPolicy()) is gen


def test_zero_id_when_df():
    gen = apply_mitigation(LinuxIpidGenerator(_linux_state()), MitigationPolicy(MitigationMode.ZERO_ID_WHEN_DF))
    clock = SimClock(1.0)
    rng = derive_rng(1, "df")
    assert gen.emit(clock, FieldRequest(1, 2, 1, df=True), rng) == 0
    times = np.linspace(1.0, 1.1, 10)
    assert gen.emit_train(clock, times, 1, np.full(10, 2), 1, 0, True, rng).tolist() == [0] * 10


def test_per_destination_class_separates_state():
    """Private and public destinations draw from independent forks."""
    policy = MitigationPolicy(MitigationMode.PER_DESTINATION_CLASS)
    assert policy.classify(ip_to_int("10.1.2.3")) == "private"
    assert policy.classify(ip_to_int("198.51.100.7")) == "other"
    labels = policy.classify_array(np.array([ip_to_int("192.168.0.1"), ip_to_int("8.8.8.8")]))
    assert labels.tolist() == ["private", "other"]

    gen = apply_mitigation(LinuxIpidGenerator(_linux_state()), policy, derive_rng(1, "forks"))
    clock = SimClock(1.0)
    rng = derive_rng(1, "emit")
    gen.emit(clock, FieldRequest(ip_to_int("10.0.0.9"), ip_to_int("10.0.0.1"), 1), rng)
    gen.emit(clock, FieldRequest(ip_to_int("10.0.0.9"), ip_to_int("8.8.8.8"), 1), rng)
    assert set(gen.forks) == {"private", "other"}
    assert gen.forks["private"] is not gen.forks["other"]


def test_full_random_id_is_uniform():
    gen = apply_mitigation(RandomIpidGenerator(), MitigationPolicy(MitigationMode.FULL_RANDOM_ID))
    ids = gen.emit_train(SimClock(), np.linspace(0, 1, 5000), 1, np.full(5000, 2), 1, 0, False,
                         derive_rng(1, "random"))
    assert ids.min() >= 0 and ids.max() < ID_SPACE
    assert len(set(ids.tolist())) > 4500


def test_incompatible_policies_raise():
    with pytest.raises(IncompatiblePolicyError):
        apply_mitigation(SynCache(hash_key=1), MitigationPolicy(MitigationMode.PER_CONTAINER))
    with pytest.raises(IncompatiblePolicyError):
        apply_mitigation(IsnGenerator(), MitigationPolicy(MitigationMode.ZERO_ID_WHEN_DF))
    assert isinstance(apply_mitigation(IsnGenerator(), MitigationPolicy(MitigationMode.PER_CONTAINER)),
                      MitigatedGenerator)


def test_snapshot_is_sorted_json(tmp_path):
    gen = ExclusionWindowGen(8)
    exclusion_generate_many(gen, derive_rng(1, "snap"), 4)
    path = write_snapshot(gen, tmp_path / "snap" / "excl.json")
    with open(path, encoding='utf-8') as f:
        data = json.load(f)
    assert data["kind"] == "exclusion_window"
    assert data["emitted"] == 4
    assert len(data["window"]) == 4
