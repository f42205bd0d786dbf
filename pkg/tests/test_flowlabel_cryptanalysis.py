#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Tests for flow-label seed recovery and prediction.
"""

import sys
import os

import numpy as np
import pytest

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from os_models import derive_rng
from tcp_models import FL_M, FL_N, FlowLabelPrng
from flowlabel_cryptanalysis import (
    ORDER, CryptanalysisError, InsufficientDataError, SampleFormatError, SampleSet,
    RecoveredSeed, build_log_table, canonical_exponents, full_attack, oracle_labels,
    parse_sample_file, phase1_recover_s1, phase1_threshold, predict_next, predict_sequence,
    seed_equivalent, write_sample_file,
)


@pytest.fixture(scope="module")
def logtab():
    return build_log_table()


@pytest.fixture(scope="module")
def attacked():
    """A known PRNG, 100 consecutive labels from it and the recovered seed."""
    rng = derive_rng(2024, "oracle")
    prng = FlowLabelPrng.create(rng)
    truth = dict(s1=prng.s1, g=prng.g, s2=prng.s2, a=prng.a, b=prng.b)
    labels = oracle_labels(prng, rng, 101)
    seed = full_attack(SampleSet.from_labels(labels[:100]))
    return truth, labels, seed


def test_log_table_inverts_powers(logtab):
    for value in (1, 2, 3, 12345, FL_N - 1):
        n = logtab.log(value)
        assert pow(2, n, FL_N) == value
    assert logtab.pow2[:5].tolist() == [1, 2, 4, 8, 16]
    assert logtab.log12[3] == logtab.log(3) % 12
    with pytest.raises(CryptanalysisError):
        logtab.log(0)


def test_canonical_exponents_are_generators(logtab):
    exps, inverses = canonical_exponents()
    for e, inv in zip(exps[:20].tolist(), inverses[:20].tolist()):
        assert np.gcd(e, ORDER) == 1
        assert (e * inv) % ORDER == 1
        g = int(logtab.pow2[e])
        assert g < pow(g, -1, FL_N)


def test_samples_pair_only_consecutive_labels():
    samples = SampleSet.from_labels([(1 << 19) | 5, 6, None, 7, 8, 9])
    assert samples.values == [5, 6, 7, 8, 9]
    assert samples.pairs == [(5, 6), (7, 8), (8, 9)]
    assert samples.msb == 0
    with pytest.raises(SampleFormatError):
        SampleSet.from_labels([1 << 20])


def test_sample_file_round_trip_and_errors(tmp_path):
    path = write_sample_file([1, 2, None, 0x7FFFF], tmp_path / "labels.txt", comment="probe run")
    samples = parse_sample_file(path)
    assert samples.values == [1, 2, 0x7FFFF]
    assert samples.P == 1

    empty = tmp_path / "empty.txt"
    empty.write_text("# nothing\n\n", encoding="utf-8")
    with pytest.raises(SampleFormatError):
        parse_sample_file(empty)

    bad = tmp_path / "bad.txt"
    bad.write_text("12\nzz\n", encoding="utf-8")
    with pytest.raises(SampleFormatError, match=":2:"):
        parse_sample_file(bad)


def test_too_few_pairs_fail_phase_one(logtab):
    rng = derive_rng(3, "oracle")
    labels = oracle_labels(FlowLabelPrng.create(rng), rng, 40)
    with pytest.raises(InsufficientDataError) as excinfo:
        phase1_recover_s1(SampleSet.from_labels(labels), logtab)
    assert excinfo.value.phase == 1


def test_phase1_threshold_grows_with_pairs():
    assert phase1_threshold(99) > 7 * 99 / 12
    assert phase1_threshold(200) > phase1_threshold(99)


def test_predict_sequence_follows_known_seed(logtab):
    """A seed built from the true parameters predicts the true next label."""
    rng = derive_rng(5, "oracle")
    prng = FlowLabelPrng.create(rng)
    e = logtab.log(prng.g)
    seed = RecoveredSeed(s1=prng.s1, g=prng.g, e=e, s2=prng.s2, s2_range=(prng.s2, prng.s2),
                         a=prng.a, b=prng.b, I=1)
    labels = oracle_labels(prng, rng, 30)
    for current, following in zip(labels, labels[1:]):
        assert following in predict_next(current, seed, logtab)
    assert len(predict_sequence(labels[0], seed, 48, logtab)) == 48


@pytest.mark.slow
def test_full_attack_recovers_equivalent_seed(attacked):
    truth, labels, seed = attacked
    assert seed.s1 == truth["s1"]
    assert seed_equivalent(seed, **truth)
    assert seed.diagnostics["validation_ratio"] >= 0.5
    assert set(seed.diagnostics["timings"]) == {"phase1", "phase2", "phase3", "phase4"}


@pytest.mark.slow
def test_recovered_seed_predicts_unseen_label(attacked):
    _, labels, seed = attacked
    assert labels[100] in predict_next(labels[99], seed)



def test_seed_equivalent_accepts_shifted_seed():
    a, b, s2 = 7 ** 6 % FL_M, 35, 1000
    shifted = RecoveredSeed(s1=9, g=3, e=1, s2=s2 + 4, s2_range=(0, 0), a=a, b=(b + (a - 1) * 4) % FL_M, I=1)
    assert seed_equivalent(shifted, 9, 3, s2, a, b)
    assert not seed_equivalent(shifted, 10, 3, s2, a, b)


def test_seed_equivalent_accepts_negated_seed():
    a, b, s2, g = 7 ** 6 % FL_M, 35, 1000, 3
    g_inv = pow(g, -1, FL_N)
    negated = RecoveredSeed(s1=9, g=g_inv, e=1, s2=(-FL_M - s2) % ORDER, s2_range=(0, 0), a=a,
                            b=(-b) % FL_M, I=1)
    assert seed_equivalent(negated, 9, g, s2, a, b)
    shifted = RecoveredSeed(s1=9, g=g_inv, e=1, s2=(-FL_M - s2 + 6) % ORDER, s2_range=(0, 0), a=a,
                            b=(-b + (a - 1) * 6) % FL_M, I=1)
    assert seed_equivalent(shifted, 9, g, s2, a, b)
    assert not seed_equivalent(negated, 9, g, s2, (a * 49) % FL_M, b)


def test_phase1_threshold_meets_pair_count_at_boundary():
    assert phase1_threshold(77) == pytest.approx(77.0)
    assert phase1_threshold(76) > 76


@pytest.mark.slow
@pytest.mark.parametrize("seed", [11, 12, 13])
def test_full_attack_at_minimum_pair_count(seed, logtab):
    rng = derive_rng(seed, "oracle")
    prng = FlowLabelPrng.create(rng)
    truth = dict(s1=prng.s1, g=prng.g, s2=prng.s2, a=prng.a, b=prng.b)
    samples = SampleSet.from_labels(oracle_labels(prng, rng, 78))
    assert samples.P == 77
    recovered = full_attack(samples, logtab)
    assert recovered.s1 == truth["s1"]
    assert seed_equivalent(recovered, **truth)
