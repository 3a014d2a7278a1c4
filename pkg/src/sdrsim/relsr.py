"""Selective-repeat reliability over the bitmap messaging layer.

The sender streams message chunks and arms a per-chunk retransmission timer
at each chunk's injection end; the receiver acknowledges with a cumulative
sequence number plus a selective bitmap window.  Acknowledgments are emitted
on every chunk completion (the busy-polling receiver of the reference
protocol) and additionally at a configurable poll period.  The NACK variant
is modelled as the same machinery with the timeout lowered to one RTT.

Timers fire strictly after their deadline (one tick later), so an ACK that
arrives exactly at the timeout still cancels the retransmission.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

from .sdrcore import Bitmap, ProtocolError, QpConfig, RecvHandle, SdrLink, SendHandle
from .simnet import ChannelParams, EventQueue, Tick, s_to_ticks


class SrVariant(enum.Enum):
    RTO = "rto"
    NACK = "nack"


@dataclass(frozen=True)
class SrConfig:
    """Selective-repeat tuning.

    rto defaults to rtt + alpha*rtt; the NACK variant approximates
    negative-acknowledgment signalling by dropping the timeout to one rtt.
    The poll period keeps ACK overhead and completion noise well under an
    RTT: max(rtt/8, 4 chunk injection times).
    """

    rto_ticks: Tick
    ack_poll_period_ticks: Tick
    variant: SrVariant = SrVariant.RTO
    selective_window_bytes: int = 64
    eager_ack: bool = True

    def __post_init__(self) -> None:
        if self.rto_ticks <= 0 or self.ack_poll_period_ticks <= 0:
            raise ValueError("rto and ack poll period must be positive")
        if self.selective_window_bytes < 1:
            raise ValueError("selective window must hold at least one byte")

    @property
    def window_chunks(self) -> int:
        return self.selective_window_bytes * 8

    @classmethod
    def for_channel(cls, params: ChannelParams, chunk_bytes: int,
                    variant: SrVariant = SrVariant.RTO, **kwargs) -> "SrConfig":
        rtt = params.rtt_ticks
        rto = rtt if variant is SrVariant.NACK else rtt + s_to_ticks(params.alpha * params.rtt_s)
        poll = max(rtt // 8, 4 * params.serialization_ticks(chunk_bytes), 1)
        return cls(rto_ticks=max(rto, 1), ack_poll_period_ticks=poll, variant=variant, **kwargs)


@dataclass(frozen=True)
class SrAck:
    """Cumulative + selective acknowledgment.

    cumulative is the highest chunk sequence number for which all previous
    chunks were received (-1 when chunk 0 is still missing); selective lists
    received chunks after it, limited to the encoded window.
    """

    cumulative: int
    selective: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        if self.cumulative < -1:
            raise ValueError("cumulative below the -1 sentinel")
        if any(c <= self.cumulative for c in self.selective):
            raise ValueError("selective chunks must lie beyond the cumulative range")


def encode_ack(ack: SrAck, window_bytes: int = 64) -> bytes:
    """Wire format: 32-bit little-endian two's-complement cumulative followed
    by window_bytes of selective bitmap (bit b = chunk cumulative+1+b,
    LSB-first within each byte)."""
    window = bytearray(window_bytes)
    for c in ack.selective:
        b = c - ack.cumulative - 1
        if b >= window_bytes * 8:
            raise ValueError("selective chunk outside the encodable window")
        window[b // 8] |= 1 << (b % 8)
    return struct.pack("<i", ack.cumulative) + bytes(window)


def decode_ack(data: bytes) -> SrAck:
    if len(data) < 4:
        raise ValueError("ack payload too short")
    (cumulative,) = struct.unpack_from("<i", data)
    selective = set()
    for b in range((len(data) - 4) * 8):
        if data[4 + b // 8] & (1 << (b % 8)):
            selective.add(cumulative + 1 + b)
    return SrAck(cumulative, frozenset(selective))


def ack_from_bitmap(bitmap: Bitmap, window_chunks: int) -> SrAck:
    """Compress a chunk bitmap into cumulative + selective form."""
    cumulative = -1
    n = len(bitmap)
    while cumulative + 1 < n and bitmap[cumulative + 1]:
        cumulative += 1
    selective = frozenset(
        c for c in range(cumulative + 1, min(n, cumulative + 1 + window_chunks)) if bitmap[c]
    )
    return SrAck(cumulative, selective)


def sr_receiver_tick(handle: RecvHandle, cfg: SrConfig) -> Optional[SrAck]:
    """One receiver poll: the current bitmap as an ACK, or None once the
    handle is no longer posted."""
    from .sdrcore import MessageState

    if handle.state is not MessageState.POSTED:
        return None
    return ack_from_bitmap(handle.bitmap(), cfg.window_chunks)


class SrSenderCore:
    """Retransmission engine over an abstract chunk space.

    `inject(chunk)` performs one (re)transmission and returns its injection
    end tick; the core arms a timer per outstanding chunk and dequeues on
    acknowledgments.  Used both for whole-message selective repeat and for
    the erasure-coding fallback phase.
    """

    def __init__(self, sim: EventQueue, cfg: SrConfig, n_chunks: int,
                 inject: Callable[[int], Tick],
                 on_complete: Optional[Callable[[], None]] = None):
        self.sim = sim
        self.cfg = cfg
        self.n_chunks = n_chunks
        self._inject = inject
        self._on_complete = on_complete
        self.outstanding: set[int] = set(range(n_chunks))
        self._timers: dict[int, int] = {}
        self.retransmissions = 0
        self.start_tick: Optional[Tick] = None
        self.completion_tick: Optional[Tick] = None
        self.max_cumulative_seen = -1

    def start(self) -> None:
        self.start_tick = self.sim.now
        for c in range(self.n_chunks):
            self._send(c, first=True)

    def _send(self, chunk: int, first: bool) -> None:
        inject_end = self._inject(chunk)
        if not first:
            self.retransmissions += 1
        # strictly-after semantics: fire one tick past the deadline
        self._timers[chunk] = self.sim.schedule(
            inject_end + self.cfg.rto_ticks + 1, lambda c=chunk: self._on_rto(c))

    def _on_rto(self, chunk: int) -> None:
        if chunk not in self.outstanding:
            return
        self._send(chunk, first=False)

    def on_ack(self, ack: SrAck) -> None:
        """Dequeue everything the ACK covers; stale or repeated ACKs are
        harmless no-ops."""
        self.max_cumulative_seen = max(self.max_cumulative_seen, ack.cumulative)
        covered = [c for c in self.outstanding if c <= ack.cumulative or c in ack.selective]
        for c in covered:
            self.outstanding.discard(c)
            timer = self._timers.pop(c, None)
            if timer is not None:
                self.sim.cancel(timer)
        if not self.outstanding and self.completion_tick is None:
            self.completion_tick = self.sim.now
            if self._on_complete:
                self._on_complete()

    @property
    def completion_time(self) -> Optional[Tick]:
        if self.completion_tick is None or self.start_tick is None:
            return None
        return self.completion_tick - self.start_tick


class SrReceiverCore:
    """Acknowledgment engine over an abstract chunk space: emits cumulative +
    selective ACKs on chunk completions (busy-poll) and on a periodic tick."""

    def __init__(self, sim: EventQueue, cfg: SrConfig, n_chunks: int,
                 chunk_received: Callable[[int], bool],
                 send_ack: Callable[[SrAck], None],
                 on_complete: Optional[Callable[[], None]] = None):
        self.sim = sim
        self.cfg = cfg
        self.n_chunks = n_chunks
        self._chunk_received = chunk_received
        self._send_ack = send_ack
        self._on_complete = on_complete
        self._cumulative = -1
        self.done = False
        self.acks_sent = 0
        self._poll_timer: Optional[int] = None

    def start(self) -> None:
        self._schedule_poll()

    def _schedule_poll(self) -> None:
        self._poll_timer = self.sim.schedule_in(self.cfg.ack_poll_period_ticks, self._poll)

    def _poll(self) -> None:
        if self.done:
            return
        self.emit_ack()
        self._schedule_poll()

    def current_ack(self) -> SrAck:
        while self._cumulative + 1 < self.n_chunks and self._chunk_received(self._cumulative + 1):
            self._cumulative += 1
        hi = min(self.n_chunks, self._cumulative + 1 + self.cfg.window_chunks)
        selective = frozenset(
            c for c in range(self._cumulative + 1, hi) if self._chunk_received(c))
        return SrAck(self._cumulative, selective)

    def emit_ack(self) -> None:
        ack = self.current_ack()
        self.acks_sent += 1
        self._send_ack(ack)
        if ack.cumulative == self.n_chunks - 1 and not self.done:
            self.done = True
            if self._poll_timer is not None:
                self.sim.cancel(self._poll_timer)
            if self._on_complete:
                self._on_complete()

    def on_chunks_arrived(self) -> None:
        if not self.done and self.cfg.eager_ack:
            self.emit_ack()


@dataclass
class SrResult:
    completion_ticks: Tick
    retransmissions: int
    acks_sent: int
    received_data: bytes
    chunks_injected: int
    trace_lines: list[str] = field(default_factory=list)


def split_chunks(message: bytes, chunk_bytes: int) -> list[bytes]:
    if not message:
        raise ValueError("message must not be empty")
    return [message[i : i + chunk_bytes] for i in range(0, len(message), chunk_bytes)]


class SrTransfer:
    """End-to-end selective-repeat transfer of one message over a link."""

    def __init__(self, link: SdrLink, cfg: SrConfig, message: bytes):
        self.link = link
        self.cfg = cfg
        self.message = message
        self.chunk_bytes = link.config.chunk_bytes
        self.chunks = split_chunks(message, self.chunk_bytes)
        self.stream: Optional[SendHandle] = None
        self.sender_core: Optional[SrSenderCore] = None
        self.handle: Optional[RecvHandle] = None
        self.receiver_core: Optional[SrReceiverCore] = None
        self.chunks_injected = 0
        link.sender.on_cts = self._on_cts
        link.receiver.on_chunk_delta = self._on_delta

    def post_receive(self) -> None:
        self.handle = self.link.receiver.recv_post(len(self.message))
        self.receiver_core = SrReceiverCore(
            self.link.sim, self.cfg, len(self.chunks),
            chunk_received=lambda c: self.handle.desc.chunk_bitmap[c],
            send_ack=self._ack_to_sender,
            on_complete=self._receiver_done,
        )
        self.receiver_core.start()

    def _on_cts(self, _cts) -> None:
        self.stream = self.link.sender.send_stream_start()
        self.sender_core = SrSenderCore(
            self.link.sim, self.cfg, len(self.chunks), inject=self._inject_chunk)
        self.sender_core.start()

    def _inject_chunk(self, c: int) -> Tick:
        self.chunks_injected += 1
        return self.link.sender.send_stream_continue(
            self.stream, c * self.chunk_bytes, self.chunks[c])

    def _on_delta(self, desc, _delta) -> None:
        if self.receiver_core is not None and desc is self.handle.desc:
            self.receiver_core.on_chunks_arrived()

    def _ack_to_sender(self, ack: SrAck) -> None:
        payload = encode_ack(ack, self.cfg.selective_window_bytes)
        self.link.send_ctrl(lambda: self.sender_core.on_ack(decode_ack(payload)))

    def _receiver_done(self) -> None:
        self.handle.complete()

    def run(self, max_events: int = 50_000_000) -> SrResult:
        self.post_receive()
        self.link.sim.run(max_events=max_events)
        if self.sender_core is None or self.sender_core.completion_time is None:
            raise ProtocolError("transfer did not complete")
        if self.stream.stream_open:
            self.link.sender.send_stream_end(self.stream)
        return SrResult(
            completion_ticks=self.sender_core.completion_time,
            retransmissions=self.sender_core.retransmissions,
            acks_sent=self.receiver_core.acks_sent,
            received_data=self.handle.data,
            chunks_injected=self.chunks_injected,
            trace_lines=self.link.trace_lines() if self.link.trace is not None else [],
        )


def sr_send(message: bytes, cfg: SrConfig, link: SdrLink) -> SrResult:
    """Deliver one message with selective repeat; returns the sender-side
    completion time (first injection to the ACK covering the last chunk)."""
    return SrTransfer(link, cfg, message).run()


def run_sr_transfer(message: bytes, params: ChannelParams, qp_config: QpConfig,
                    cfg: Optional[SrConfig] = None, variant: SrVariant = SrVariant.RTO,
                    seed: int = 0, force_drops: frozenset[int] = frozenset(),
                    ctrl_p_drop: float = 0.0, collect_trace: bool = False) -> SrResult:
    """Build a fresh simulation, link, and config, then run one transfer."""
    sim = EventQueue()
    link = SdrLink(sim, qp_config, params, seed=seed, ctrl_p_drop=ctrl_p_drop,
                   collect_trace=collect_trace)
    if force_drops:
        link.data_channel.force_drop_indices = frozenset(force_drops)
    if cfg is None:
        cfg = SrConfig.for_channel(params, qp_config.chunk_bytes, variant)
    return sr_send(message, cfg, link)
