"""Closed-form completion-time and recovery-probability models.

All functions here are pure and unit-agnostic: durations may be seconds or
any other consistent unit.  The selective-repeat expectation is evaluated
exactly on the value lattice of the per-chunk completion times rather than
on an integer time grid, so there is no time-quantum artifact.
"""

from __future__ import annotations

import enum
import heapq
import math
from dataclasses import dataclass

import numpy as np

TRUNCATION = 1e-12


class EcCode(enum.Enum):
    XOR = "xor"
    MDS = "mds"


def t_inj(chunk_bytes: float, bandwidth_bits_per_sec: float) -> float:
    """Serialization time of one chunk at link bandwidth."""
    if chunk_bytes <= 0:
        raise ValueError("chunk_bytes must be positive")
    if bandwidth_bits_per_sec <= 0:
        raise ValueError("bandwidth must be positive")
    return chunk_bytes * 8 / bandwidth_bits_per_sec


def chunk_drop_prob(p_drop_packet: float, packets_per_chunk: int) -> float:
    """Probability that a chunk of N packets loses at least one packet."""
    if not 0.0 <= p_drop_packet <= 1.0:
        raise ValueError("p_drop_packet must be in [0, 1]")
    if packets_per_chunk < 1:
        raise ValueError("packets_per_chunk must be >= 1")
    return 1.0 - (1.0 - p_drop_packet) ** packets_per_chunk


@dataclass(frozen=True)
class SrModelParams:
    """Selective-repeat completion-time model inputs.

    Chunk i (1-indexed) finishes its first injection at t_start(i) = i*t_inj;
    every additional transmission of a chunk costs O = rto + t_inj.
    p_drop is the per-chunk drop probability.
    """

    chunks: int
    t_inj: float
    rtt: float
    rto: float
    p_drop: float

    def __post_init__(self) -> None:
        if self.chunks < 0:
            raise ValueError("chunks must be non-negative")
        if self.t_inj <= 0 or self.rto < 0 or self.rtt < 0:
            raise ValueError("durations must be non-negative (t_inj positive)")
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError("p_drop must be in [0, 1]")

    @property
    def overhead(self) -> float:
        return self.rto + self.t_inj

    def t_start(self, i: int) -> float:
        return i * self.t_inj

    def with_chunks(self, chunks: int) -> "SrModelParams":
        return SrModelParams(chunks, self.t_inj, self.rtt, self.rto, self.p_drop)

    @property
    def is_lower_bound_regime(self) -> bool:
        """True in the serialized large-message regime t_start(M) > rto,
        where the expectation below is only a lower bound."""
        return self.t_start(self.chunks) > self.rto


def e_t_sr_analytical(params: SrModelParams, truncation: float = TRUNCATION) -> float:
    """Expected selective-repeat completion time E[max_i X_i] + rtt.

    X_i = t_start(i) + O*(Y_i - 1) with Y_i geometric, so each X_i lives on
    the lattice {t_start(i) + O*j}.  The expectation of the max is integrated
    over the merged, sorted lattice: each gap between consecutive candidate
    values contributes gap * P(max >= candidate), until the survival
    probability drops below `truncation`.  chunks == 0 is defined as 0 so the
    erasure-coding retransmission term vanishes cleanly.
    """
    if params.p_drop >= 1.0:
        raise ValueError("p_drop = 1 gives a divergent expectation")
    m = params.chunks
    if m == 0:
        return 0.0
    dt, big_o, p = params.t_inj, params.overhead, params.p_drop
    t_start_m = m * dt
    if p == 0.0:
        return t_start_m + params.rtt
    if (m - 1) * dt <= big_o:
        total = _lattice_sum_pipelined(m, dt, big_o, p, truncation)
    else:
        total = _lattice_sum_merged(m, dt, big_o, p, truncation)
    return t_start_m + total + params.rtt


def _lattice_sum_pipelined(m: int, dt: float, big_o: float, p: float, truncation: float) -> float:
    """Vectorized lattice integration when (m-1)*t_inj <= O.

    In that regime the candidate values i*dt + j*O are totally ordered by
    (j, i): at candidate (i, j) chains before i sit at tail exponent j+1 and
    chains from i on at exponent j, so each level is one array pass.
    """
    before = np.arange(m, dtype=float)  # chains already past their level-j point
    total = 0.0
    gaps = np.full(m, dt)
    gaps[0] = big_o - (m - 1) * dt
    j = 1
    while True:
        lo_j = math.log1p(-(p**j))
        lo_j1 = math.log1p(-(p ** (j + 1)))
        log_surv = before * lo_j1 + (m - before) * lo_j
        s = -np.expm1(log_surv)
        total += float(np.dot(gaps, s))
        if s[-1] < truncation:
            break
        j += 1
    return total


def _lattice_sum_merged(m: int, dt: float, big_o: float, p: float, truncation: float) -> float:
    """Exact heap-merged lattice integration for the serialized regime
    (t_start spread wider than O, lattices interleave).

    Chains are bucketed by their current tail exponent; the survival is
    recomputed from the bucket counts at every candidate, which keeps the
    log-sum free of incremental rounding drift (the bucket count stays
    small: exponents span at most ceil(t_start(M)/O) + 1 levels).
    """
    log_p = math.log(p)
    # Per chain i, the first lattice value strictly above t_start(M) sits at
    # level j0 = floor((t_start(M) - t_start(i)) / O) + 1; the chain's tail
    # exponent equals j0 on the whole interval up to that value.
    heap: list[tuple[float, int, int]] = []
    counts: dict[int, int] = {}
    for i in range(1, m + 1):
        j0 = math.floor((m - i) * dt / big_o) + 1
        counts[j0] = counts.get(j0, 0) + 1
        heap.append((i * dt + j0 * big_o, i, j0))
    heapq.heapify(heap)

    log_terms: dict[int, float] = {}

    def log_term(j: int) -> float:
        lt = log_terms.get(j)
        if lt is None:
            lt = math.log1p(-math.exp(j * log_p))
            log_terms[j] = lt
        return lt

    total = 0.0
    prev = m * dt
    while heap:
        v, i, j = heapq.heappop(heap)
        log_surv = sum(n * log_term(lvl) for lvl, n in counts.items())
        s = -math.expm1(log_surv)  # P(max >= v), valid on (prev, v]
        total += (v - prev) * s
        prev = v
        if s < truncation:
            break
        counts[j] -= 1
        if counts[j] == 0:
            del counts[j]
        counts[j + 1] = counts.get(j + 1, 0) + 1
        heapq.heappush(heap, (i * dt + (j + 1) * big_o, i, j + 1))
    return total


def _binom_pmf(n: int, i: int, p: float) -> float:
    if n <= 64:
        return math.comb(n, i) * p**i * (1.0 - p) ** (n - i)
    # log domain to avoid overflow in the binomial coefficient
    log_c = math.lgamma(n + 1) - math.lgamma(i + 1) - math.lgamma(n - i + 1)
    if p == 0.0:
        return 1.0 if i == 0 else 0.0
    if p == 1.0:
        return 1.0 if i == n else 0.0
    return math.exp(log_c + i * math.log(p) + (n - i) * math.log1p(-p))


def p_ec_mds(k: int, m: int, p_drop: float) -> float:
    """Probability a data submessage is recoverable under an MDS code:
    at most m of its k+m blocks dropped."""
    if k < 1 or m < 1:
        raise ValueError("k and m must be >= 1")
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError("p_drop must be in [0, 1]")
    n = k + m
    return min(1.0, sum(_binom_pmf(n, i, p_drop) for i in range(m + 1)))


def p_ec_xor(k: int, m: int, p_drop: float) -> float:
    """Probability a data submessage is recoverable under the XOR
    modulo-group code: every group of n = k/m + 1 blocks misses at most one."""
    if k < 1 or m < 1:
        raise ValueError("k and m must be >= 1")
    if k % m != 0:
        raise ValueError("XOR code requires m to divide k")
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError("p_drop must be in [0, 1]")
    n = k // m + 1
    q = 1.0 - p_drop
    group_ok = q**n + n * p_drop * q ** (n - 1)
    return group_ok**m


@dataclass(frozen=True)
class EcModelParams:
    """Erasure-coding completion-time model inputs.

    The message of `chunks` chunks is split into L = ceil(chunks/k) data
    submessages, each coded with m parity chunks; p_drop is per chunk.
    Submessage recovery probabilities assume full-size submessages; a padded
    final submessage (k not dividing chunks) makes the derived quantities
    slightly conservative.
    """

    chunks: int
    k: int
    m: int
    code: EcCode
    p_drop: float
    beta: float
    rtt: float
    t_inj: float

    def __post_init__(self) -> None:
        if self.chunks < 1:
            raise ValueError("chunks must be >= 1")
        if self.k < 1 or self.m < 1:
            raise ValueError("k and m must be >= 1")
        if self.code is EcCode.XOR and self.k % self.m != 0:
            raise ValueError("XOR code requires m to divide k")
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError("p_drop must be in [0, 1]")

    @property
    def parity_ratio(self) -> float:
        return self.k / self.m

    @property
    def submessages(self) -> int:
        return -(-self.chunks // self.k)

    @property
    def parity_chunks(self) -> int:
        return math.ceil(self.chunks / self.parity_ratio)

    @property
    def p_ec(self) -> float:
        if self.code is EcCode.XOR:
            return p_ec_xor(self.k, self.m, self.p_drop)
        return p_ec_mds(self.k, self.m, self.p_drop)

    @property
    def e_failures(self) -> float:
        return self.submessages * (1.0 - self.p_ec)

    @property
    def p_fallback(self) -> float:
        if self.p_ec <= 0.0:
            return 1.0
        return max(0.0, -math.expm1(self.submessages * math.log(self.p_ec)))

    @property
    def fto(self) -> float:
        return (self.chunks + self.parity_chunks) * self.t_inj + self.beta * self.rtt

    def base_time(self) -> float:
        return (self.chunks + self.parity_chunks) * self.t_inj


def e_t_ec_lower(ec: EcModelParams, sr: SrModelParams) -> float:
    """Lower bound on the expected erasure-coded completion time.

    Three terms: initial data+parity injection, expected fallback timeout and
    NACK delivery, and the expected selective-repeat retransmission of the
    failed submessages.  The expected failure count times k is rounded up to
    whole chunks before the SR subcall.
    """
    retransmit_chunks = math.ceil(ec.e_failures * ec.k)
    sr_term = e_t_sr_analytical(sr.with_chunks(retransmit_chunks))
    return ec.base_time() + ec.p_fallback * (ec.rtt + ec.beta * ec.rtt) + sr_term


@dataclass(frozen=True)
class AllreduceParams:
    """Ring collective over N participants: 2N-2 dependent stages, each with
    lossless cost C and expected reliability delay mu_x."""

    n_datacenters: int
    lossless_step_cost: float
    mean_reliability_delay: float

    def __post_init__(self) -> None:
        if self.n_datacenters < 1:
            raise ValueError("need at least one datacenter")
        if self.lossless_step_cost < 0 or self.mean_reliability_delay < 0:
            raise ValueError("costs must be non-negative")


def allreduce_lower_bound(params: AllreduceParams) -> float:
    """(2N-2) * (C + mu_x): per-stage expected cost accumulates over the
    dependent ring stages."""
    stages = 2 * params.n_datacenters - 2
    return stages * (params.lossless_step_cost + params.mean_reliability_delay)
