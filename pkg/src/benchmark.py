#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Parameter sweeps and Monte-Carlo property runs.

Sweeps vary scenario fields over a grid and run every point with its own
sub-seed. The Monte-Carlo helpers exercise the generator models directly,
one stochastic failure mode each, and compare against the closed forms.
"""

import copy
import itertools
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from tqdm import tqdm

from os_models import (
    ID_SPACE, SimClock, WindowsPathSet, ExclusionWindowGen, derive_rng, windows_emit, exclusion_generate_many,
)
from tcp_models import (
    NetbsdIsnState, FlowLabelPrng, SynCache, OpenBsdSynCache, RESEED_STEPS, SYN_BUCKETS, SYN_CACHE_LIMIT,
    netbsd_isn_msb, flowlabel_advance_batch, flowlabel_generate, syncache_insert,
)
from flowlabel_cryptanalysis import (
    SampleSet, CryptanalysisError, build_log_table, full_attack, oracle_labels, predict_next, seed_equivalent,
)
from channels import windows_decode_ids
from exfiltration import execute_scenario
from report_generator import SUMMARY_COLUMNS

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

VIOLATION_COLUMNS = ["sav", "stateful", "non_disruption"]
MC_COLUMNS = ["trials", "measured", "closed_form", "sigma", "consistent"]
CRYPTO_SUCCESS_FLOOR = 0.99
CRYPTO_SECONDS_BOUND = 5.0


class SweepError(Exception):
    """Malformed grid or a grid larger than the configured cap."""


# ---------------------------------------------------------------------------
# Monte-Carlo helpers
# ---------------------------------------------------------------------------

def windows_false_zero(trials: int, K: int = 6, flood: int = 8,
                       rng: Optional[np.random.Generator] = None) -> Dict[str, float]:
    """
    '1' bits read as '0': a flood starts a purge that removes the receiver's
    stale Path between its two samplings, and the fresh Path's random start
    lands close enough to look like an undisturbed counter.

    The flood threshold is lowered to `flood` new Paths per window so a
    trial stays small; the purge itself runs through the regular machinery.
    """
    rng = rng or np.random.default_rng(0)
    misses = 0
    purged = 0
    for _ in range(trials):
        ps = WindowsPathSet(flood_threshold=flood)
        clock = SimClock()
        ids = [windows_emit(ps, clock, 1, 2, rng) for _ in range(K)]
        clock.advance_to(ps.stale_ttl + 1.0)
        for k in range(flood):
            windows_emit(ps, clock, 1000 + k, 2, rng)
        clock.advance_to(ps.stale_ttl + 2.0)
        ids += [windows_emit(ps, clock, 1, 2, rng) for _ in range(K)]
        purged += ps.purged_total
        bit, _ = windows_decode_ids(np.asarray(ids), K)
        misses += int(bit == 0)
    result = _verdict(trials, misses, 2 * K / ID_SPACE)
    result["purged"] = purged
    return result


def exclusion_miss(trials: int, K: int = 700, m_cap: int = 4096, burst: Optional[int] = None,
                   rng: Optional[np.random.Generator] = None) -> Dict[str, float]:
    """
    '1' bits whose second probe set repeats none of the first set's IDs.

    The sender burst defaults to 2*m_cap, which separates every pair of
    probes by more than twice the window; such pairs collide with
    probability 1/65536 and the miss rate is e^(-K^2/65536). 'expected'
    averages the exact miss probability given the window each trial leaves
    in front of the second set.
    """
    rng = rng or np.random.default_rng(0)
    burst = 2 * m_cap if burst is None else burst
    misses = 0
    expected = 0.0
    for _ in tqdm(range(trials), desc=f"exclusion K={K}", disable=trials < 1000):
        gen = ExclusionWindowGen(m_cap)
        set1 = exclusion_generate_many(gen, rng, K)
        exclusion_generate_many(gen, rng, burst)
        expected += exclusion_miss_given_window(set1, gen, K)
        set2 = exclusion_generate_many(gen, rng, K)
        misses += int(np.intersect1d(set1, set2).size == 0)
    result = _verdict(trials, misses, exclusion_miss_closed_form(K))
    result["expected"] = expected / trials if trials else 0.0
    return result


def exclusion_miss_closed_form(K: int) -> float:
    return float(math.exp(-K * K / ID_SPACE))


def exclusion_miss_given_window(set1: np.ndarray, gen: ExclusionWindowGen, draws: int) -> float:
    """
    Probability that the next `draws` IDs avoid set1, given the window now.

    Before draw j the window has lost its oldest entries to the j earlier
    draws, none of which is in set1; the set1 IDs still blocked are those
    past the evicted prefix.
    """
    window = np.fromiter(gen.window, dtype=np.int64, count=len(gen.window))
    blocked_at = np.flatnonzero(np.isin(window, set1))
    j = np.arange(draws)
    evicted = np.maximum(0, window.size + j - gen.m_cap)
    blocked = blocked_at.size - np.searchsorted(blocked_at, evicted, side="left")
    free = ID_SPACE - np.minimum(gen.m_cap, window.size + j)
    return float(np.prod(1.0 - (set1.size - blocked) / free))


def exclusion_uniqueness(count: int, m_cap: int, rng: Optional[np.random.Generator] = None,
                         chunk: int = 1_000_000) -> int:
    """Number of IDs that repeat one of the previous m_cap emissions (0 for a sound generator)."""
    rng = rng or np.random.default_rng(0)
    gen = ExclusionWindowGen(m_cap)
    tail = np.empty(0, dtype=np.int64)
    repeats = 0
    done = 0
    while done < count:
        ids = exclusion_generate_many(gen, rng, min(chunk, count - done))
        stream = np.concatenate([tail, ids])
        last_seen: Dict[int, int] = {}
        for pos, value in enumerate(stream.tolist()):
            prev = last_seen.get(value)
            if prev is not None and pos - prev <= m_cap and pos >= tail.size:
                repeats += 1
            last_seen[value] = pos
        tail = stream[-m_cap:]
        done += ids.size
    return repeats


def _flood(cache, clock: SimClock, rng: np.random.Generator, count: int) -> None:
    ips = rng.integers(1, 1 << 32, size=count).tolist()
    ports = rng.integers(1024, 65536, size=count).tolist()
    for ip, port in zip(ips, ports):
        syncache_insert(cache, clock, ip, port, 80)


def syncache_survivors(trials: int, K: int = 10, mu: int = 1000,
                       rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Planted entries still alive after a '1' flood of limit+mu spoofed SYNs, per trial."""
    rng = rng or np.random.default_rng(0)
    out = np.empty(trials, dtype=np.int64)
    for t in tqdm(range(trials), desc="syncache", disable=trials < 100):
        cache = SynCache.create(rng)
        clock = SimClock()
        planted = [syncache_insert(cache, clock, 0x0A000001, 40000 + k, 80)["entry"] for k in range(K)]
        _flood(cache, clock, rng, SYN_CACHE_LIMIT + mu)
        out[t] = sum(1 for e in planted if e is not None and e.alive)
    return out


def openbsd_freeze_rate(bits: int, K: int = 10, mu: int = 1000, freeze_after: int = 100000,
                        slot_seconds: float = 50.0, rng: Optional[np.random.Generator] = None) -> Dict[str, float]:
    """Fraction of consecutive '1' bits during which the OpenBSD cache froze a set."""
    rng = rng or np.random.default_rng(0)
    cache = OpenBsdSynCache(rng, freeze_after=freeze_after)
    clock = SimClock()
    hit = 0
    for b in tqdm(range(bits), desc="openbsd freeze", disable=bits < 50):
        clock.advance_to(b * slot_seconds)
        before = len(cache.freeze_events)
        for k in range(K):
            syncache_insert(cache, clock, 0x0A000001, 40000 + k, 80)
        _flood(cache, clock, rng, SYN_CACHE_LIMIT + mu)
        hit += int(len(cache.freeze_events) > before)
    return _verdict(bits, hit, (K + SYN_CACHE_LIMIT + mu) / freeze_after)


def msb_flip_probability(n: int, trials: int, rng: Optional[np.random.Generator] = None) -> Dict[str, float]:
    """Fraction of bursts of n connections that push the flow-label PRNG past its step budget."""
    rng = rng or np.random.default_rng(0)
    flips = 0
    times = np.linspace(1.0, 1.8, n)
    for _ in tqdm(range(trials), desc=f"msb n={n}", disable=trials < 100):
        prng = FlowLabelPrng.create(rng)
        msb = prng.msb
        flowlabel_advance_batch(prng, rng, times)
        flowlabel_generate(prng, rng, SimClock(2.0))
        flips += int(prng.msb != msb)
    return _verdict(trials, flips, msb_flip_closed_form(n))


def msb_flip_closed_form(n: int) -> float:
    """Normal approximation: 2n invocations of 1..4 steps, mean 5 and variance 2.5 per label."""
    return float(stats.norm.cdf((5 * n - RESEED_STEPS) / math.sqrt(2.5 * n)))


def isn_idle_deltas(slots: int, delta_t: float = 0.2, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """(m' - m) mod 256 for idle slots: two receiver connections delta_t apart, nothing in between."""
    rng = rng or np.random.default_rng(0)
    state = NetbsdIsnState()
    starts = np.sort(rng.uniform(0, 10 * slots, size=slots))
    out = np.empty(slots, dtype=np.int64)
    for k, t in enumerate(starts.tolist()):
        m = netbsd_isn_msb(state, SimClock(t), register_connection=True)
        m2 = netbsd_isn_msb(state, SimClock(t + delta_t), register_connection=True)
        out[k] = (m2 - m) % 256
    return out


def syncache_survivor_closed_form(K: int = 10, mu: int = 1000) -> float:
    """Each of the K + mu evictions beyond the cap hits a planted entry's bucket with probability 1/293."""
    return float(K * math.exp(-(K + mu) / SYN_BUCKETS))


def syncache_survivor_run(trials: int, K: int = 10, mu: int = 1000,
                          rng: Optional[np.random.Generator] = None) -> Dict[str, Any]:
    survivors = syncache_survivors(trials, K=K, mu=mu, rng=rng)
    mean = float(survivors.mean()) if trials else 0.0
    p = syncache_survivor_closed_form(K, mu)
    # survivor counts are close to Poisson, so the per-trial sd is sqrt(mean)
    sigma = math.sqrt(p / trials) if trials else 0.0
    return {"trials": trials, "measured": mean, "closed_form": p, "sigma": sigma,
            "sd": float(survivors.std()) if trials else 0.0,
            "consistent": bool(trials == 0 or abs(mean - p) <= 3 * sigma)}


def exclusion_uniqueness_run(trials: int, m_cap: int = 4096,
                             rng: Optional[np.random.Generator] = None) -> Dict[str, Any]:
    """trials IDs from one generator; any repeat inside the window is a failure."""
    repeats = exclusion_uniqueness(trials, m_cap, rng=rng)
    return {"trials": trials, "hits": repeats, "measured": repeats / trials if trials else 0.0,
            "closed_form": 0.0, "sigma": 0.0, "consistent": repeats == 0}


def crypto_success_rate(trials: int, labels: int = 100, rng: Optional[np.random.Generator] = None,
                        logtab=None) -> Dict[str, Any]:
    """
    Full attacks on fresh PRNGs; success means the ground truth or its
    negation-equivalent is recovered. A recovered seed that is neither
    counts under 'wrong'.
    """
    rng = rng or np.random.default_rng(0)
    logtab = logtab or build_log_table()
    ok = 0
    wrong = 0
    worst = 0.0
    failures: Dict[str, int] = {}
    for _ in tqdm(range(trials), desc="full attack", disable=trials < 20):
        prng = FlowLabelPrng.create(rng)
        truth = (prng.s1, prng.g, prng.s2, prng.a, prng.b)
        samples = SampleSet.from_labels(oracle_labels(prng, rng, labels))
        start_time = time.time()
        try:
            seed = full_attack(samples, logtab)
        except CryptanalysisError as e:
            name = type(e).__name__
            failures[name] = failures.get(name, 0) + 1
            continue
        finally:
            worst = max(worst, time.time() - start_time)
        if seed_equivalent(seed, *truth):
            ok += 1
        else:
            wrong += 1
    measured = ok / trials if trials else 0.0
    return {"trials": trials, "measured": measured, "closed_form": CRYPTO_SUCCESS_FLOOR, "sigma": None,
            "failures": failures, "wrong": wrong, "worst_seconds": worst,
            "consistent": bool(measured >= CRYPTO_SUCCESS_FLOOR and wrong == 0
                               and worst <= CRYPTO_SECONDS_BOUND)}


def prediction_failure_rate(trials: int, labels: int = 100, rng: Optional[np.random.Generator] = None,
                            logtab=None) -> Dict[str, Any]:
    """After a recovery, how often the next oracle label is missing from the 7 candidates."""
    rng = rng or np.random.default_rng(0)
    logtab = logtab or build_log_table()
    misses = 0
    attempts = 0
    bound = 0.0
    for _ in tqdm(range(trials), desc="prediction", disable=trials < 20):
        prng = FlowLabelPrng.create(rng)
        observed = oracle_labels(prng, rng, labels + 1)
        samples = SampleSet.from_labels(observed[:-1])
        try:
            seed = full_attack(samples, logtab)
            candidates = predict_next(observed[-2], seed, logtab)
        except CryptanalysisError:
            continue
        attempts += 1
        bound = 4.0 / (samples.L_count + 1)
        misses += int(observed[-1] not in candidates)
    measured = misses / attempts if attempts else 0.0
    return {"trials": attempts, "hits": misses, "measured": measured, "closed_form": bound, "bound": bound,
            "sigma": None, "consistent": measured <= bound}


def _verdict(trials: int, hits: int, p: float) -> Dict[str, Any]:
    measured = hits / trials if trials else 0.0
    sigma = math.sqrt(p * (1 - p) / trials) if trials else 0.0
    consistent = bool(trials == 0 or stats.binomtest(hits, trials, p).pvalue > 1e-3)
    return {"trials": trials, "hits": hits, "measured": measured, "closed_form": p, "sigma": sigma,
            "consistent": consistent}


MONTE_CARLO: Dict[str, Callable[..., Dict[str, Any]]] = {
    "windows_false_zero": windows_false_zero,
    "exclusion_miss": exclusion_miss,
    "exclusion_uniqueness": exclusion_uniqueness_run,
    "syncache_survivors": syncache_survivor_run,
    "openbsd_freeze": lambda trials, rng=None, **kw: openbsd_freeze_rate(trials, rng=rng, **kw),
    "msb_flip": lambda trials, n=41000, rng=None: msb_flip_probability(n, trials, rng),
    "crypto_success": crypto_success_rate,
    "prediction_failure": prediction_failure_rate,
}


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

def set_field(document: Dict[str, Any], dotted: str, value: Any) -> None:
    """Assign document['a']['b']['c'] for 'a.b.c', creating intermediate blocks."""
    keys = dotted.split(".")
    node = document
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise SweepError(f"'{dotted}' crosses the non-object field '{key}'")
    node[keys[-1]] = value


def _run_point(args: Tuple[Dict[str, Any], int, int, int]) -> Dict[str, Any]:
    scenario, seed, repetition, max_events = args
    result = execute_scenario(scenario, seed, repetition, max_events=max_events)
    return {**result["summary"], **result["violations"]}


class ChannelBenchmark:
    """Grid sweeps over scenarios and over the Monte-Carlo helpers."""

    def __init__(self, output_dir: str = "output/benchmarks", max_grid_points: int = 256,
                 workers: int = 1, max_events: int = 10_000_000):
        """
        Args:
            output_dir: Directory for sweep outputs
            max_grid_points: Largest accepted grid (points times repetitions)
            workers: Process count for scenario sweeps; 1 runs in-process
        """
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.max_grid_points = max_grid_points
        self.workers = workers
        self.max_events = max_events
        logger.info(f"ChannelBenchmark initialized with output directory: {self.output_dir}")

    def expand_grid(self, grid: Dict[str, Sequence[Any]], repetitions: int = 1) -> List[Dict[str, Any]]:
        if not isinstance(grid, dict):
            raise SweepError("grid must map field names to value lists")
        if not grid:
            return []
        for name, values in grid.items():
            if not isinstance(values, (list, tuple)) or not values:
                raise SweepError(f"grid field '{name}' needs a non-empty list of values")
        size = math.prod(len(v) for v in grid.values()) * max(1, repetitions)
        if size > self.max_grid_points:
            raise SweepError(f"grid of {size} runs exceeds the cap of {self.max_grid_points}")
        names = list(grid)
        return [dict(zip(names, combo)) for combo in itertools.product(*(grid[n] for n in names))]

    @staticmethod
    def sub_seed(master_seed: int, point: int, repetition: int) -> int:
        return int(derive_rng(master_seed, "sweep", point, repetition).integers(0, 2 ** 63 - 1))

    def run_sweep(self, scenario: Dict[str, Any], grid: Dict[str, Sequence[Any]], master_seed: int,
                  repetitions: int = 1) -> Tuple[List[Dict[str, Any]], List[str]]:
        """
        One summary row per grid point and repetition.

        Returns:
            (rows, column names); an empty grid gives no rows
        """
        points = self.expand_grid(grid, repetitions)
        columns = list(grid) + SUMMARY_COLUMNS + VIOLATION_COLUMNS
        jobs = []
        for index, point in enumerate(points):
            variant = copy.deepcopy(scenario)
            for name, value in point.items():
                set_field(variant, name, value)
            for rep in range(repetitions):
                jobs.append((point, (variant, self.sub_seed(master_seed, index, rep), rep, self.max_events)))
        logger.info(f"Sweeping {len(points)} grid point(s) x {repetitions} repetition(s)")
        if self.workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=self.workers) as pool:
                results = list(tqdm(pool.map(_run_point, [job for _, job in jobs]), total=len(jobs), desc="sweep"))
        else:
            results = [_run_point(job) for _, job in tqdm(jobs, desc="sweep", disable=len(jobs) < 2)]
        rows = [{**point, **result} for (point, _), result in zip(jobs, results)]
        return rows, columns

    def run_monte_carlo(self, name: str, grid: Dict[str, Sequence[Any]], trials: int,
                        master_seed: int) -> Tuple[List[Dict[str, Any]], List[str]]:
        """One row per grid point: measured rate, closed form, sigma and a binomial consistency verdict."""
        try:
            helper = MONTE_CARLO[name]
        except KeyError:
            raise SweepError(f"unknown Monte-Carlo run '{name}' (expected one of {', '.join(sorted(MONTE_CARLO))})")
        points = self.expand_grid(grid) if grid else [{}]
        rows = []
        for index, point in enumerate(points):
            result = helper(trials, rng=derive_rng(master_seed, "monte-carlo", name, index), **point)
            rows.append({**point, **{k: result.get(k) for k in MC_COLUMNS}})
            if not result.get("consistent", True):
                logger.warning(f"{name} at {point}: measured {result['measured']:.3g} "
                               f"vs closed form {result['closed_form']:.3g}")
        return rows, list(grid) + MC_COLUMNS
