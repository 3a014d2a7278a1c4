"""Deterministic discrete-event engine and unreliable channel model.

Simulation time is integer nanoseconds ("ticks"); every duration coming from
the continuous-time world is rounded to the nearest tick so that event
ordering is exact and runs are bit-reproducible.  Randomness comes from
numpy's Philox counter-based generator, keyed by a 64-bit seed (plus optional
substream indices), so a seed fully determines the drop pattern and jitter.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

Tick = int

NS_PER_S = 1_000_000_000


def s_to_ticks(seconds: float) -> Tick:
    """Round a duration in seconds to the nearest integer nanosecond."""
    return round(seconds * NS_PER_S)


def ticks_to_s(ticks: Tick) -> float:
    return ticks / NS_PER_S


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Seeded counter-based generator; extra indices select an independent substream.

    The 128-bit Philox key is (seed, H(stream)) where H folds the substream
    indices with a splitmix-style polynomial hash, so (seed, i, j, ...)
    deterministically names a stream across runs and platforms.
    """
    sub = 0
    for s in stream:
        sub = (sub * 0x9E3779B97F4A7C15 + (s & 0xFFFFFFFFFFFFFFFF) + 0x85EBCA6B) & 0xFFFFFFFFFFFFFFFF
    return np.random.Generator(np.random.Philox(key=(seed & 0xFFFFFFFFFFFFFFFF, sub)))


class SimError(Exception):
    """Raised on event-queue misuse (e.g. scheduling into the past)."""


@dataclass(frozen=True)
class ChannelParams:
    """Long-haul channel environment.

    p_drop applies i.i.d. per transmitted packet.  alpha scales the
    retransmission timeout above one RTT (switch buffering on the forward
    path); beta plays the same role for the erasure-coding fallback timeout.
    reorder_jitter_s bounds a uniform random extra delay per packet,
    default 0 (in-order delivery).
    """

    bandwidth_bits_per_sec: float
    rtt_s: float
    p_drop: float = 0.0
    alpha: float = 2.0
    beta: float = 1.0
    reorder_jitter_s: float = 0.0

    def __post_init__(self) -> None:
        if self.bandwidth_bits_per_sec <= 0:
            raise ValueError("bandwidth must be positive")
        if self.rtt_s < 0:
            raise ValueError("rtt must be non-negative")
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError("p_drop must be in [0, 1]")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("buffering coefficients must be non-negative")
        if self.reorder_jitter_s < 0:
            raise ValueError("reorder_jitter must be non-negative")

    @property
    def rtt_ticks(self) -> Tick:
        return s_to_ticks(self.rtt_s)

    @property
    def one_way_ticks(self) -> Tick:
        # One-way latency is rtt/2; the model only specifies a full round trip.
        return s_to_ticks(self.rtt_s / 2.0)

    def serialization_ticks(self, nbytes: int) -> Tick:
        return s_to_ticks(nbytes * 8 / self.bandwidth_bits_per_sec)


@dataclass(frozen=True)
class Packet:
    """One MTU-or-less unreliable write on the wire."""

    payload: bytes
    immediate: int
    dest_offset_bytes: int
    channel_qp_index: int
    generation: int

    @property
    def payload_len_bytes(self) -> int:
        return len(self.payload)


class EventQueue:
    """Timestamp-ordered event loop; ties fire in insertion (FIFO) order."""

    def __init__(self) -> None:
        self._heap: list[tuple[Tick, int, int]] = []
        self._callbacks: dict[int, Callable[[], None]] = {}
        self._next_id = 0
        self._seq = 0
        self.now: Tick = 0

    def schedule(self, at: Tick, fn: Callable[[], None]) -> int:
        if at < self.now:
            raise SimError(f"cannot schedule at t={at} before now={self.now}")
        eid = self._next_id
        self._next_id += 1
        self._seq += 1
        heapq.heappush(self._heap, (at, self._seq, eid))
        self._callbacks[eid] = fn
        return eid

    def schedule_in(self, delay: Tick, fn: Callable[[], None]) -> int:
        return self.schedule(self.now + delay, fn)

    def cancel(self, eid: int) -> bool:
        """True iff the event was still pending; fired or cancelled ids return False."""
        return self._callbacks.pop(eid, None) is not None

    def pending(self) -> int:
        return len(self._callbacks)

    def step(self) -> bool:
        """Fire the next pending event; False when the queue is drained."""
        while self._heap:
            at, _, eid = heapq.heappop(self._heap)
            fn = self._callbacks.pop(eid, None)
            if fn is None:
                continue  # cancelled tombstone
            self.now = at
            fn()
            return True
        return False

    def run(self, until: Optional[Tick] = None, max_events: int = 50_000_000) -> None:
        fired = 0
        while self._heap:
            if until is not None:
                at = self._peek_time()
                if at is None or at > until:
                    break
            if not self.step():
                break
            fired += 1
            if fired >= max_events:
                raise SimError("event budget exhausted; simulation is likely stuck")
        if until is not None and until > self.now:
            self.now = until

    def _peek_time(self) -> Optional[Tick]:
        while self._heap:
            at, _, eid = self._heap[0]
            if eid in self._callbacks:
                return at
            heapq.heappop(self._heap)
        return None


@dataclass
class Transmission:
    """Outcome of handing one packet to the channel."""

    inject_end: Tick
    arrival: Optional[Tick]  # None when the packet was dropped

    @property
    def dropped(self) -> bool:
        return self.arrival is None


@dataclass
class Channel:
    """Unidirectional lossy link with serialized injection.

    Successive packets queue behind each other at the sender: a packet's
    serialization starts no earlier than the previous one finished,
    regardless of channel QP striping (all QPs share the physical link).
    Drops consume the payload's serialization slot but never arrive.
    """

    params: ChannelParams
    rng: np.random.Generator
    force_drop_indices: frozenset[int] = frozenset()
    _busy_until: Tick = 0
    tx_count: int = 0
    drop_count: int = 0

    def transmit(self, pkt: Packet, now: Tick) -> Transmission:
        start = max(now, self._busy_until)
        inject_end = start + self.params.serialization_ticks(pkt.payload_len_bytes)
        self._busy_until = inject_end
        idx = self.tx_count
        self.tx_count += 1

        dropped = idx in self.force_drop_indices
        if not dropped and self.params.p_drop > 0.0:
            dropped = self.rng.random() < self.params.p_drop
        if dropped:
            self.drop_count += 1
            return Transmission(inject_end, None)

        arrival = inject_end + self.params.one_way_ticks
        if self.params.reorder_jitter_s > 0.0:
            arrival += int(self.rng.integers(0, s_to_ticks(self.params.reorder_jitter_s) + 1))
        return Transmission(inject_end, arrival)
