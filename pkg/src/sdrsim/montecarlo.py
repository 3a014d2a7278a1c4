"""Stochastic completion-time sampler for the SR and EC schemes.

Draws mirror the analytical model exactly: per-chunk transmission counts are
geometric, erasure-coded submessage failures come from i.i.d. per-chunk
drops, and all sampling is vectorized with numpy.  Trials are independent;
derive per-trial or per-cell substreams with `simnet.make_rng(seed, index)`
for parallel execution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .models import EcCode, EcModelParams, SrModelParams
from .simnet import make_rng  # noqa: F401  (re-exported substream helper)

GEOM_TRUNCATION = 1e-15
_BATCH_CELLS = 1 << 22


@dataclass(frozen=True)
class CompletionStats:
    """Summary of sampled completion times (percentiles are nearest-rank,
    rounding up, so p999 of [1..1000] is 1000)."""

    n_samples: int
    mean: float
    p50: float
    p99: float
    p999: float
    min: float
    max: float
    seed: int

    def __post_init__(self) -> None:
        if not (self.min <= self.p50 <= self.p99 <= self.p999 <= self.max):
            raise ValueError("percentiles must be ordered")
        slack = 1e-9 * max(abs(self.min), abs(self.max))  # float summation noise
        if not self.min - slack <= self.mean <= self.max + slack:
            raise ValueError("mean must lie within [min, max]")


def summarize(samples, seed: int = 0) -> CompletionStats:
    """Nearest-rank (rounded-up) percentile summary of a sample set."""
    arr = np.asarray(samples, dtype=float)
    if arr.size == 0:
        raise ValueError("need at least one sample")
    p50, p99, p999 = (float(x) for x in np.percentile(arr, [50, 99, 99.9], method="higher"))
    lo, hi = float(arr.min()), float(arr.max())
    return CompletionStats(
        n_samples=int(arr.size),
        mean=min(max(float(arr.mean()), lo), hi),
        p50=p50,
        p99=p99,
        p999=p999,
        min=lo,
        max=hi,
        seed=seed,
    )


def geometric_transmissions(p_drop: float, rng: np.random.Generator, size) -> np.ndarray:
    """Number of transmissions until first success, Y ~ Geometric(1 - p_drop).

    Inverse-CDF draw ceil(ln U / ln p) with U guarded away from 0, truncated
    at survival 1e-15 to bound worst-case samples.
    """
    if not 0.0 <= p_drop < 1.0:
        raise ValueError("p_drop must be in [0, 1)")
    if p_drop == 0.0:
        return np.ones(size, dtype=np.int64)
    u = np.maximum(rng.random(size), 1e-300)
    y = np.ceil(np.log(u) / math.log(p_drop)).astype(np.int64)
    y_cap = max(1, math.ceil(math.log(GEOM_TRUNCATION) / math.log(p_drop)))
    return np.clip(y, 1, y_cap)


def sample_t_sr_many(params: SrModelParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """n independent draws of the SR completion time
    max_i(t_start(i) + O*(Y_i - 1)) + rtt."""
    if params.chunks == 0:
        return np.zeros(n)
    m = params.chunks
    starts = np.arange(1, m + 1, dtype=float) * params.t_inj
    out = np.empty(n)
    batch = max(1, _BATCH_CELLS // m)
    done = 0
    while done < n:
        b = min(batch, n - done)
        y = geometric_transmissions(params.p_drop, rng, (b, m))
        x = starts + params.overhead * (y - 1)
        out[done : done + b] = x.max(axis=1)
        done += b
    return out + params.rtt


def sample_t_sr(params: SrModelParams, rng: np.random.Generator) -> float:
    return float(sample_t_sr_many(params, 1, rng)[0])


def _xor_group_sizes(k: int, m: int, real_data: int) -> np.ndarray:
    """Transmitted block count per modulo group for a submessage carrying
    `real_data` data chunks (the rest is logical zero padding): the group's
    present data members plus its always-sent parity chunk."""
    groups = np.arange(m)
    data_members = (real_data - groups + m - 1) // m
    return np.maximum(data_members, 0) + 1


def sample_submessage_failures(
    ec: EcModelParams, n: int, rng: np.random.Generator
) -> np.ndarray:
    """Per-trial count of undecodable data submessages, from i.i.d. per-chunk
    drops evaluated with the code's recovery rule (XOR: at most one drop per
    modulo group; MDS: at most m drops per submessage)."""
    k, m, q = ec.k, ec.m, ec.p_drop
    n_sub = ec.submessages
    tail = ec.chunks - (n_sub - 1) * k  # data chunks in the final submessage
    full = n_sub - 1 if tail < k else n_sub

    failures = np.zeros(n, dtype=np.int64)
    if ec.code is EcCode.MDS:
        if full:
            drops = rng.binomial(k + m, q, size=(n, full))
            failures += (drops > m).sum(axis=1)
        if full < n_sub:
            failures += rng.binomial(tail + m, q, size=n) > m
    else:
        group_n = k // m + 1
        if full:
            drops = rng.binomial(group_n, q, size=(n, full * m))
            failures += (drops > 1).reshape(n, full, m).any(axis=2).sum(axis=1)
        if full < n_sub:
            sizes = _xor_group_sizes(k, m, tail)
            bad = np.zeros(n, dtype=bool)
            for g in range(m):
                bad |= rng.binomial(int(sizes[g]), q, size=n) > 1
            failures += bad
    return failures


def sample_t_ec_many(
    ec: EcModelParams, sr_sub: SrModelParams, n: int, rng: np.random.Generator
) -> np.ndarray:
    """n independent draws of the EC completion time.

    All submessages decodable: base injection plus an rtt-scale ACK return.
    Otherwise: fallback timeout, NACK delivery, and a selective-repeat
    retransmission of the failed submessages (k chunks each).
    """
    failures = sample_submessage_failures(ec, n, rng)
    out = np.full(n, ec.base_time() + ec.rtt)
    fallback_base = ec.fto + ec.rtt
    # Batch the SR subcall per distinct failure count to keep it vectorized.
    for f in np.unique(failures[failures > 0]):
        idx = np.flatnonzero(failures == f)
        sr = sr_sub.with_chunks(int(f) * ec.k)
        out[idx] = fallback_base + sample_t_sr_many(sr, idx.size, rng)
    return out


def sample_t_ec(ec: EcModelParams, sr_sub: SrModelParams, rng: np.random.Generator) -> float:
    return float(sample_t_ec_many(ec, sr_sub, 1, rng)[0])
