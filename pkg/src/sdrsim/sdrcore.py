"""Bitmap-based messaging state machine over the unreliable channel.

Send side packetizes messages into single-packet unreliable writes carrying a
32-bit transport immediate (message id, packet offset in MTU units, and a
fragment of the optional user immediate).  The receive side keeps a
per-packet bitmap per message and coalesces it into the chunk bitmap exposed
to reliability layers.  Message-id slots are reused in sequential order;
per-slot generations discard packets that arrive after their message was
completed, and the wire only carries the generation modulo the configured
generation count (late packets older than generations-1 reuses would alias,
exactly like the limited set of internal QPs they model).
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from .simnet import Channel, ChannelParams, EventQueue, Packet, Tick, make_rng


class ProtocolError(Exception):
    """Misuse of the messaging API (matching, framing, state violations)."""


class BackpressureError(ProtocolError):
    """No free message slot for recv_post; the caller should retry later."""


@dataclass(frozen=True)
class ImmSplit:
    """Field widths of the 32-bit transport immediate."""

    msg_id_bits: int = 10
    offset_bits: int = 18
    frag_bits: int = 4

    def __post_init__(self) -> None:
        if self.msg_id_bits + self.offset_bits + self.frag_bits != 32:
            raise ValueError("immediate field widths must sum to 32")
        if min(self.msg_id_bits, self.offset_bits, self.frag_bits) < 1:
            raise ValueError("immediate fields must be at least one bit wide")
        if 32 % self.frag_bits != 0:
            raise ValueError("frag_bits must divide 32 for immediate reconstruction")

    @property
    def frag_count(self) -> int:
        return 32 // self.frag_bits


DEFAULT_SPLIT = ImmSplit()


def encode_immediate(msg_id: int, packet_offset: int, imm_frag: int, split: ImmSplit = DEFAULT_SPLIT) -> int:
    """Pack (msg_id, packet offset in MTUs, immediate fragment) into 32 bits;
    msg_id occupies the high bits, the fragment the low bits."""
    if not 0 <= msg_id < (1 << split.msg_id_bits):
        raise ValueError(f"msg_id {msg_id} does not fit {split.msg_id_bits} bits")
    if not 0 <= packet_offset < (1 << split.offset_bits):
        raise ValueError(f"packet_offset {packet_offset} does not fit {split.offset_bits} bits")
    if not 0 <= imm_frag < (1 << split.frag_bits):
        raise ValueError(f"imm_frag {imm_frag} does not fit {split.frag_bits} bits")
    return (msg_id << (split.offset_bits + split.frag_bits)) | (packet_offset << split.frag_bits) | imm_frag


def decode_immediate(word: int, split: ImmSplit = DEFAULT_SPLIT) -> tuple[int, int, int]:
    if not 0 <= word < (1 << 32):
        raise ValueError("immediate must be a 32-bit word")
    frag = word & ((1 << split.frag_bits) - 1)
    offset = (word >> split.frag_bits) & ((1 << split.offset_bits) - 1)
    msg_id = word >> (split.offset_bits + split.frag_bits)
    return msg_id, offset, frag


@dataclass(frozen=True)
class QpConfig:
    mtu_bytes: int = 4096
    chunk_size_packets: int = 16
    max_msg_size_bytes: int = 1 << 30
    generations: int = 4
    imm_split: ImmSplit = DEFAULT_SPLIT
    num_channels: int = 1

    def __post_init__(self) -> None:
        if self.mtu_bytes < 1 or self.chunk_size_packets < 1:
            raise ValueError("mtu and chunk size must be positive")
        if self.generations < 1 or self.num_channels < 1:
            raise ValueError("generations and num_channels must be positive")
        if self.max_msg_size_bytes > (1 << self.imm_split.offset_bits) * self.mtu_bytes:
            raise ValueError("max_msg_size exceeds what the packet-offset field can address")

    @property
    def max_inflight(self) -> int:
        return 1 << self.imm_split.msg_id_bits

    @property
    def chunk_bytes(self) -> int:
        return self.mtu_bytes * self.chunk_size_packets

    def packets_for(self, nbytes: int) -> int:
        return -(-nbytes // self.mtu_bytes)

    def chunks_for(self, nbytes: int) -> int:
        return -(-self.packets_for(nbytes) // self.chunk_size_packets)


def plan_packets(msg_len: int, mtu: int) -> list[tuple[int, int]]:
    """(offset_mtus, payload_len) per packet of a message; the final packet
    may be short, all others are full MTUs."""
    if msg_len < 1:
        raise ValueError("message must not be empty")
    full, rem = divmod(msg_len, mtu)
    plan = [(i, mtu) for i in range(full)]
    if rem:
        plan.append((full, rem))
    return plan


class Bitmap:
    """Fixed-length bit array with cheap snapshot semantics."""

    __slots__ = ("_bits", "_n")

    def __init__(self, n: int, bits: int = 0):
        self._n = n
        self._bits = bits

    def __len__(self) -> int:
        return self._n

    def __getitem__(self, i: int) -> bool:
        if not 0 <= i < self._n:
            raise IndexError(i)
        return bool((self._bits >> i) & 1)

    def set(self, i: int) -> bool:
        """Set bit i; True iff it was previously clear."""
        if not 0 <= i < self._n:
            raise IndexError(i)
        mask = 1 << i
        if self._bits & mask:
            return False
        self._bits |= mask
        return True

    def count(self) -> int:
        return self._bits.bit_count()

    def all_set(self) -> bool:
        return self._bits == (1 << self._n) - 1 if self._n else True

    def missing(self) -> list[int]:
        return [i for i in range(self._n) if not (self._bits >> i) & 1]

    def copy(self) -> "Bitmap":
        return Bitmap(self._n, self._bits)

    def to_bools(self) -> list[bool]:
        return [bool((self._bits >> i) & 1) for i in range(self._n)]

    def __eq__(self, other) -> bool:
        return isinstance(other, Bitmap) and self._n == other._n and self._bits == other._bits

    def __repr__(self) -> str:
        return "Bitmap<" + "".join("1" if b else "0" for b in self.to_bools()) + ">"


class MessageState(enum.Enum):
    POSTED = "posted"
    COMPLETED = "completed"
    NULLED = "nulled"


class MessageDescriptor:
    """Receive-side per-message state: buffer, bitmaps, immediate fragments."""

    def __init__(self, msg_id: int, generation: int, length: int, config: QpConfig, expects_imm: bool):
        self.msg_id = msg_id
        self.generation = generation
        self.length = length
        self.config = config
        self.total_packets = config.packets_for(length)
        self.total_chunks = config.chunks_for(length)
        self.packet_bitmap = Bitmap(self.total_packets)
        self.chunk_bitmap = Bitmap(self.total_chunks)
        self.buffer = bytearray(length)
        self.expects_imm = expects_imm
        self.imm_frags: list[Optional[int]] = [None] * config.imm_split.frag_count
        self.state = MessageState.POSTED
        # countdown of packets still missing per chunk; the final partial
        # chunk covers only the remainder
        self._chunk_missing = [
            min((c + 1) * config.chunk_size_packets, self.total_packets) - c * config.chunk_size_packets
            for c in range(self.total_chunks)
        ]

    def chunk_of(self, packet_index: int) -> int:
        return packet_index // self.config.chunk_size_packets

    def user_immediate(self) -> Optional[int]:
        if any(f is None for f in self.imm_frags):
            return None
        word = 0
        for pos, frag in enumerate(self.imm_frags):
            word |= frag << (pos * self.config.imm_split.frag_bits)
        return word


class RecvHandle:
    """Caller-side view of a posted receive; stays readable after completion."""

    def __init__(self, receiver: "ReceiverQp", desc: MessageDescriptor):
        self._receiver = receiver
        self.desc = desc

    @property
    def msg_id(self) -> int:
        return self.desc.msg_id

    @property
    def generation(self) -> int:
        return self.desc.generation

    @property
    def state(self) -> MessageState:
        return self.desc.state

    def bitmap(self) -> Bitmap:
        """Consistent snapshot of the chunk bitmap; the per-packet bitmap is
        never exposed."""
        if self.desc.state is MessageState.NULLED:
            raise ProtocolError("handle was nulled")
        return self.desc.chunk_bitmap.copy()

    def imm(self) -> Optional[int]:
        if not self.desc.expects_imm:
            raise ProtocolError("receive was not posted with a user immediate")
        return self.desc.user_immediate()

    @property
    def data(self) -> bytes:
        return bytes(self.desc.buffer)

    def complete(self) -> None:
        self._receiver.recv_complete(self)


TraceFn = Callable[[str, int, int, int, str], None]


@dataclass
class RxStats:
    packets_received: int = 0
    duplicate_packets: int = 0
    stale_discards: int = 0
    nulled_discards: int = 0
    chunks_completed: int = 0


class _Slot:
    __slots__ = ("generation", "desc")

    def __init__(self) -> None:
        self.generation = 0
        self.desc: Optional[MessageDescriptor] = None


class ReceiverQp:
    """Receive half of the messaging protocol: message table, bitmaps,
    generation filtering."""

    def __init__(self, config: QpConfig, on_cts: Optional[Callable[["CtsInfo"], None]] = None,
                 trace: Optional[TraceFn] = None):
        self.config = config
        self.on_cts = on_cts
        self.trace = trace
        self.slots = [_Slot() for _ in range(config.max_inflight)]
        self.stats = RxStats()
        self._next_seq = 0
        # reliability layers subscribe to chunk completions (busy-poll model)
        self.on_chunk_delta: Optional[Callable[[MessageDescriptor, list[int]], None]] = None

    def recv_post(self, length: int, expect_imm: bool = False) -> RecvHandle:
        """Allocate the next sequential message slot and announce clear-to-send.

        Order-based matching requires slots to be consumed in sequence, so a
        still-posted sequential slot means backpressure even if other slots
        are free.
        """
        if length < 1:
            raise ValueError("receive buffer must not be empty")
        if length > self.config.max_msg_size_bytes:
            raise ProtocolError("receive exceeds the maximum message size")
        msg_id = self._next_seq % self.config.max_inflight
        slot = self.slots[msg_id]
        if slot.desc is not None:
            raise BackpressureError(f"message slot {msg_id} is still posted")
        desc = MessageDescriptor(msg_id, slot.generation, length, self.config, expect_imm)
        slot.desc = desc
        self._next_seq += 1
        if self.trace:
            self.trace("recv_post", msg_id, desc.generation, 0, f"len={length}")
        if self.on_cts:
            self.on_cts(CtsInfo(msg_id, desc.generation, length, expect_imm))
        return RecvHandle(self, desc)

    def on_packet_arrival(self, pkt: Packet) -> list[int]:
        """Apply one arrived packet; returns the chunk indices newly completed
        (empty for duplicates and discards)."""
        msg_id, pkt_index, frag = decode_immediate(pkt.immediate, self.config.imm_split)
        slot = self.slots[msg_id]
        gens = self.config.generations
        if pkt.generation % gens != slot.generation % gens:
            self.stats.stale_discards += 1
            if self.trace:
                self.trace("packet_stale", msg_id, pkt.generation, pkt_index, "generation_mismatch")
            return []
        desc = slot.desc
        if desc is None:
            # NULL-key stage: payload discarded, completion entry still counted
            self.stats.nulled_discards += 1
            if self.trace:
                self.trace("packet_nulled", msg_id, pkt.generation, pkt_index, "slot_free")
            return []
        if pkt_index >= desc.total_packets:
            raise ProtocolError(f"packet offset {pkt_index} outside message of {desc.total_packets} packets")
        if not desc.packet_bitmap.set(pkt_index):
            self.stats.duplicate_packets += 1
            if self.trace:
                self.trace("packet_dup", msg_id, pkt.generation, pkt_index, "duplicate")
            return []
        off = pkt.dest_offset_bytes
        desc.buffer[off : off + len(pkt.payload)] = pkt.payload
        self.stats.packets_received += 1
        if desc.expects_imm and pkt_index < len(desc.imm_frags):
            desc.imm_frags[pkt_index] = frag
        delta: list[int] = []
        c = desc.chunk_of(pkt_index)
        desc._chunk_missing[c] -= 1
        if desc._chunk_missing[c] == 0:
            desc.chunk_bitmap.set(c)
            self.stats.chunks_completed += 1
            delta.append(c)
            if self.trace:
                self.trace("chunk_complete", msg_id, pkt.generation, pkt_index, f"chunk={c}")
        elif self.trace:
            self.trace("packet_rx", msg_id, pkt.generation, pkt_index, "ok")
        if delta and self.on_chunk_delta:
            self.on_chunk_delta(desc, delta)
        return delta

    def recv_complete(self, handle: RecvHandle) -> None:
        """Freeze the handle's bitmaps, bump the slot generation, and return
        the slot to the free pool; later packets for the old generation are
        discarded."""
        desc = handle.desc
        if desc.state is not MessageState.POSTED:
            raise ProtocolError("receive already completed")
        slot = self.slots[desc.msg_id]
        if slot.desc is not desc:
            raise ProtocolError("handle does not own its slot")
        desc.state = MessageState.COMPLETED
        slot.desc = None
        slot.generation += 1
        if self.trace:
            self.trace("recv_complete", desc.msg_id, desc.generation, 0, f"chunks={desc.chunk_bitmap.count()}")


@dataclass(frozen=True)
class CtsInfo:
    """Out-of-band clear-to-send: a receive buffer is posted and matched."""

    msg_id: int
    generation: int
    buffer_len: int
    expects_imm: bool


class SendMode(enum.Enum):
    ONE_SHOT = "one_shot"
    STREAMING = "streaming"


class SendHandle:
    def __init__(self, mode: SendMode, match: CtsInfo):
        self.mode = mode
        self.match = match
        self.injected_packets = 0
        self.stream_open = mode is SendMode.STREAMING
        self.inject_end: Tick = 0

    @property
    def msg_id(self) -> int:
        return self.match.msg_id


@dataclass
class TxStats:
    packets_sent: int = 0
    bytes_sent: int = 0


class SenderQp:
    """Send half: order-based matching against announced receives and
    packetized emission striped round-robin across channel QPs."""

    def __init__(self, config: QpConfig, emit: Callable[[Packet], Tick],
                 trace: Optional[TraceFn] = None):
        self.config = config
        self._emit = emit  # returns the packet's injection-end tick
        self.trace = trace
        self._cts_queue: deque[CtsInfo] = deque()
        self.stats = TxStats()
        self.on_cts: Optional[Callable[[CtsInfo], None]] = None

    def cts_arrived(self, cts: CtsInfo) -> None:
        self._cts_queue.append(cts)
        if self.trace:
            self.trace("cts", cts.msg_id, cts.generation, 0, f"len={cts.buffer_len}")
        if self.on_cts:
            self.on_cts(cts)

    def pending_cts(self) -> int:
        return len(self._cts_queue)

    def _match(self, nbytes: int) -> CtsInfo:
        if nbytes > self.config.max_msg_size_bytes:
            raise ProtocolError("message exceeds the maximum message size")
        if not self._cts_queue:
            raise ProtocolError("no clear-to-send for the order-matched receive")
        cts = self._cts_queue[0]
        if nbytes > cts.buffer_len:
            raise ProtocolError("message larger than the matched receive buffer")
        return cts

    def send_one_shot(self, data: bytes, user_imm: Optional[int] = None) -> SendHandle:
        """Packetize and inject a whole message; the context closes once all
        packets are handed to the channel."""
        cts = self._match(len(data))
        frag_count = self.config.imm_split.frag_count
        if user_imm is not None:
            if not 0 <= user_imm < (1 << 32):
                raise ValueError("user immediate must be a 32-bit word")
            if self.config.packets_for(len(data)) < frag_count:
                raise ProtocolError(
                    f"messages with a user immediate must span at least {frag_count} packets")
        self._cts_queue.popleft()
        handle = SendHandle(SendMode.ONE_SHOT, cts)
        self._inject(handle, 0, data, user_imm)
        return handle

    def send_stream_start(self) -> SendHandle:
        """Open a streaming context against the next matched receive; chunks
        are added with send_stream_continue (also the retransmission path)."""
        if not self._cts_queue:
            raise ProtocolError("no clear-to-send for the order-matched receive")
        return SendHandle(SendMode.STREAMING, self._cts_queue.popleft())

    def send_stream_continue(self, handle: SendHandle, remote_offset: int, data: bytes) -> Tick:
        if not handle.stream_open:
            raise ProtocolError("stream is closed")
        if remote_offset % self.config.mtu_bytes != 0:
            raise ProtocolError("stream offset must be MTU-aligned")
        if remote_offset + len(data) > handle.match.buffer_len:
            raise ProtocolError("stream write beyond the matched receive buffer")
        return self._inject(handle, remote_offset, data, None)

    def send_stream_end(self, handle: SendHandle) -> None:
        if not handle.stream_open:
            raise ProtocolError("stream is closed")
        handle.stream_open = False

    def retransmit(self, handle: SendHandle, remote_offset: int, data: bytes) -> Tick:
        """Re-inject a byte range of an already matched message (same wire
        behaviour as a streaming continue at that offset)."""
        if remote_offset % self.config.mtu_bytes != 0:
            raise ProtocolError("retransmit offset must be MTU-aligned")
        if remote_offset + len(data) > handle.match.buffer_len:
            raise ProtocolError("retransmit beyond the matched receive buffer")
        return self._inject(handle, remote_offset, data, None)

    def _inject(self, handle: SendHandle, base_offset: int, data: bytes, user_imm: Optional[int]) -> Tick:
        if len(data) < 1:
            raise ProtocolError("empty injection")
        mtu = self.config.mtu_bytes
        split = self.config.imm_split
        base_index = base_offset // mtu
        view = memoryview(data)
        inject_end: Tick = 0
        for i, (rel_index, plen) in enumerate(plan_packets(len(data), mtu)):
            index = base_index + rel_index
            frag = 0
            if user_imm is not None and index < split.frag_count:
                frag = (user_imm >> (index * split.frag_bits)) & ((1 << split.frag_bits) - 1)
            pkt = Packet(
                payload=bytes(view[rel_index * mtu : rel_index * mtu + plen]),
                immediate=encode_immediate(handle.msg_id, index, frag, split),
                dest_offset_bytes=index * mtu,
                channel_qp_index=(handle.injected_packets + i) % self.config.num_channels,
                generation=handle.match.generation,
            )
            inject_end = self._emit(pkt)
            self.stats.packets_sent += 1
            self.stats.bytes_sent += plen
            if self.trace:
                self.trace("packet_tx", handle.msg_id, pkt.generation, index, f"len={plen}")
        handle.injected_packets += len(plan_packets(len(data), mtu))
        handle.inject_end = max(handle.inject_end, inject_end)
        return inject_end


class SdrLink:
    """One sender QP wired to one receiver QP over a lossy data channel and a
    low-rate control path (clear-to-send is loss-free; acknowledgment traffic
    may be given its own drop probability)."""

    def __init__(self, sim: EventQueue, config: QpConfig, params: ChannelParams,
                 seed: int = 0, ctrl_p_drop: float = 0.0, collect_trace: bool = False):
        self.sim = sim
        self.config = config
        self.params = params
        self.trace: Optional[list[tuple[int, str, int, int, int, str]]] = [] if collect_trace else None
        trace_fn = self._record if collect_trace else None
        self.data_channel = Channel(params, make_rng(seed, 0))
        self._ctrl_rng = make_rng(seed, 1)
        self.ctrl_p_drop = ctrl_p_drop
        self.sender = SenderQp(config, self._transmit, trace_fn)
        self.receiver = ReceiverQp(config, self._send_cts, trace_fn)

    def _record(self, event: str, msg_id: int, generation: int, packet_offset: int, action: str) -> None:
        assert self.trace is not None
        self.trace.append((self.sim.now, event, msg_id, generation, packet_offset, action))

    def trace_lines(self) -> list[str]:
        """Newline-ready `time,event,msg_id,generation,packet_offset,action` records."""
        if self.trace is None:
            raise ProtocolError("link was created without trace collection")
        return [f"{t},{e},{m},{g},{o},{a}" for (t, e, m, g, o, a) in self.trace]

    def _transmit(self, pkt: Packet) -> Tick:
        res = self.data_channel.transmit(pkt, self.sim.now)
        if res.arrival is None:
            if self.trace is not None:
                msg_id, index, _ = decode_immediate(pkt.immediate, self.config.imm_split)
                self._record("packet_drop", msg_id, pkt.generation, index, "lost")
        else:
            self.sim.schedule(res.arrival, lambda p=pkt: self.receiver.on_packet_arrival(p))
        return res.inject_end

    def _send_cts(self, cts: CtsInfo) -> None:
        # out-of-band and loss-free by design
        self.sim.schedule(self.sim.now + self.params.one_way_ticks,
                          lambda c=cts: self.sender.cts_arrived(c))

    def send_ctrl(self, deliver: Callable[[], None]) -> None:
        """Control-path message (ACK/NACK): one-way rtt/2, optional loss."""
        if self.ctrl_p_drop > 0.0 and self._ctrl_rng.random() < self.ctrl_p_drop:
            return
        self.sim.schedule(self.sim.now + self.params.one_way_ticks, deliver)
