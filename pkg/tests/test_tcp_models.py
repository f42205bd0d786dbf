#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Tests for the NetBSD ISN counter, the flow-label PRNG and the SYN caches.
"""

import sys
import os

import numpy as np
import pytest

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from os_models import SimClock, derive_rng
from tcp_models import (
    FL_M, FL_N, FL_LOW_BITS, RESEED_SECONDS,
    NetbsdIsnState, IsnGenerator, netbsd_isn, netbsd_isn_msb,
    FlowLabelPrng, flowlabel_generate, flowlabel_advance_batch, flowlabel_synack_label,
    flowlabel_invoke, flowlabel_output,
    lcg_jump, lcg_affine_power,
    SynCache, SynCacheError, OpenBsdSynCache, syncache_insert, syncache_reset, syncache_conservation_ok,
)


# ---------------------------------------------------------------------------
# ISN
# ---------------------------------------------------------------------------

def test_isn_msb_follows_timer_and_connections():
    state = NetbsdIsnState()
    clock = SimClock(10.0)
    base = netbsd_isn_msb(state, clock)
    clock.advance_to(10.5)
    assert netbsd_isn_msb(state, clock) == (base + 1) % 256
    for _ in range(4):
        netbsd_isn_msb(state, clock, register_connection=True)
    assert netbsd_isn_msb(state, clock) == (base + 5) % 256


def test_isn_low_bits_random_top_bits_counter():
    state = NetbsdIsnState()
    clock = SimClock(3.0)
    isn = netbsd_isn(state, clock, derive_rng(1, "isn"))
    assert isn >> 24 == (6 + 1) % 256
    assert state.conn_counter == 1


def test_isn_train_matches_single_emits():
    times = np.array([0.1, 0.2, 0.6, 1.1])
    train = IsnGenerator()
    got = train.emit_train(SimClock(), times, 1, np.full(4, 2), 6, 0, False, derive_rng(1, "t"))
    single = IsnGenerator()
    clock = SimClock()
    msbs = []
    for t in times:
        clock.advance_to(float(t))
        msbs.append(netbsd_isn_msb(single.state, clock, register_connection=True))
    assert (got >> 24).tolist() == msbs
    assert train.state.conn_counter == 4


# ---------------------------------------------------------------------------
# Flow label
# ---------------------------------------------------------------------------

def test_lcg_jump_equals_repeated_steps():
    a, b, x = 7 ** 4 % FL_M, 5, 1234
    y = x
    for _ in range(37):
        y = (a * y + b) % FL_M
    assert lcg_jump(x, a, b, 37) == y
    assert lcg_affine_power(a, b, 0, FL_M) == (1, 0)


def test_flowlabel_generate_matches_straight_line_prng():
    """Two invocations of 1..4 LCG steps each, then s1 xor g^(x+s2) mod N under the MSB."""
    prng = FlowLabelPrng.create(derive_rng(6, "fl"), msb=1)
    x, s1, s2, a, b, g = prng.x, prng.s1, prng.s2, prng.a, prng.b, prng.g
    rng = derive_rng(6, "steps")
    draws = derive_rng(6, "steps")
    clock = SimClock(1.0)
    for _ in range(120):
        got = flowlabel_generate(prng, rng, clock)
        for _invocation in range(2):
            for _step in range(int(draws.integers(1, 5))):
                x = (a * x + b) % FL_M
        assert got == (1 << FL_LOW_BITS) | (s1 ^ pow(g, x + s2, FL_N))
    assert prng.x == x


def test_negated_seed_generates_the_same_labels():
    prng = FlowLabelPrng.create(derive_rng(8, "fl"))
    negated = FlowLabelPrng(x=(-prng.x) % FL_M, s1=prng.s1, s2=(-FL_M - prng.s2) % (FL_N - 1), a=prng.a,
                            b=(-prng.b) % FL_M, g=pow(prng.g, -1, FL_N), e=0, msb=prng.msb)
    rng = derive_rng(8, "steps")
    twin = derive_rng(8, "steps")
    compared = 0
    for _ in range(300):
        flowlabel_invoke(prng, rng)
        flowlabel_invoke(negated, twin)
        assert negated.x == (-prng.x) % FL_M
        # x = 0 maps onto itself, where the two exponents differ by M
        if prng.x == 0:
            continue
        assert flowlabel_output(negated) == flowlabel_output(prng)
        compared += 1
    assert compared >= 290


def test_flowlabel_output_range_and_msb():
    rng = derive_rng(1, "fl")
    prng = FlowLabelPrng.create(rng, msb=1)
    clock = SimClock(1.0)
    for _ in range(50):
        label = flowlabel_generate(prng, rng, clock)
        assert 0 <= label < 1 << 20
        assert label >> FL_LOW_BITS == 1
    assert 100 <= prng.steps_since_reseed <= 400
    assert 2 <= prng.g < FL_N


def test_flowlabel_reseeds_after_180_seconds():
    rng = derive_rng(2, "fl")
    prng = FlowLabelPrng.create(rng)
    clock = SimClock(RESEED_SECONDS - 1.0)
    flowlabel_generate(prng, rng, clock)
    assert prng.reseeds == 0
    clock.advance_to(RESEED_SECONDS)
    label = flowlabel_generate(prng, rng, clock)
    assert prng.reseeds == 1
    assert label >> FL_LOW_BITS == 1


def test_flowlabel_batch_reseeds_on_step_budget():
    """50000 labels at one instant always exceed the step budget once."""
    rng = derive_rng(3, "fl")
    prng = FlowLabelPrng.create(rng)
    reseeds = flowlabel_advance_batch(prng, rng, np.full(50000, 10.0))
    assert reseeds == 1
    assert prng.msb == 1
    assert prng.reseed_log[0]["steps"] >= 200000


def test_flowlabel_batch_reseeds_on_time():
    rng = derive_rng(4, "fl")
    prng = FlowLabelPrng.create(rng)
    reseeds = flowlabel_advance_batch(prng, rng, np.linspace(0.0, 200.0, 101))
    assert reseeds == 1
    assert prng.last_reseed == pytest.approx(180.0)


def test_synack_label_is_zero():
    rng = derive_rng(5, "fl")
    prng = FlowLabelPrng.create(rng, synack_consumes_steps=True)
    assert flowlabel_synack_label(prng, rng, SimClock(1.0)) == 0
    assert prng.steps_since_reseed >= 2


# ---------------------------------------------------------------------------
# SYN cache
# ---------------------------------------------------------------------------

def test_syncache_global_cap_evicts_oldest_in_bucket():
    cache = SynCache(hash_key=11, n_buckets=7, bucket_limit=100, global_cap=10)
    clock = SimClock(1.0)
    for port in range(11):
        result = syncache_insert(cache, clock, "198.51.100.1", 40000 + port, 80)
        assert result["accepted"]
    assert cache.live == 10
    assert cache.evictions == 1
    assert syncache_conservation_ok(cache)


def test_syncache_duplicate_and_reset():
    cache = SynCache(hash_key=3)
    clock = SimClock(1.0)
    syncache_insert(cache, clock, "198.51.100.1", 40000, 80)
    assert syncache_insert(cache, clock, "198.51.100.1", 40000, 80)["duplicate"]
    assert syncache_reset(cache, "198.51.100.1", 40000, 80)
    assert not syncache_reset(cache, "198.51.100.1", 40000, 80)
    assert cache.live == 0
    assert syncache_conservation_ok(cache)


def test_syncache_entries_expire_after_last_retransmission():
    cache = SynCache(hash_key=5)
    syncache_insert(cache, SimClock(0.0), "198.51.100.1", 40000, 80)
    assert cache.expire_due(45.0) == 0
    assert cache.expire_due(45.001) == 1
    assert cache.live == 0


def test_syncache_bucket_limit_refuses():
    cache = SynCache(hash_key=5, n_buckets=1, bucket_limit=3, global_cap=100)
    clock = SimClock(1.0)
    results = [syncache_insert(cache, clock, "198.51.100.1", 40000 + k, 80) for k in range(4)]
    assert [r["accepted"] for r in results] == [True, True, True, False]
    assert cache.refused == 1
    with pytest.raises(SynCacheError):
        syncache_insert(cache, clock, "198.51.100.1", 40009, 80, strict=True)


def test_openbsd_set_freezes_and_discards_previous():
    cache = OpenBsdSynCache(derive_rng(1, "obsd"), freeze_after=5)
    clock = SimClock(1.0)
    for k in range(5):
        syncache_insert(cache, clock, "198.51.100.1", 40000 + k, 80)
    assert cache.frozen is None
    syncache_insert(cache, clock, "198.51.100.1", 41000, 80)
    assert cache.freeze_events == [1.0]
    assert cache.live == 6

    clock.advance_to(2.0)
    for k in range(5):
        syncache_insert(cache, clock, "198.51.100.2", 42000 + k, 80)
    assert cache.freeze_events == [1.0, 2.0]
    assert cache.live == 6
    assert syncache_conservation_ok(cache)
