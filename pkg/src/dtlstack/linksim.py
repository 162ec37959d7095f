"""Simulated constrained radio link.

Models an 802.15.4-style link: small fixed MTU, per-frame MAC overhead,
fragmentation of larger datagrams with first/subsequent fragment headers,
seeded random loss and fixed latency.  Header compression is abstracted into
the constant ``mac_overhead``; the interesting observable is the step shape of
frames-per-datagram as payloads grow, not bit-exact encodings.

All timing uses a discrete-event :class:`SimClock`; a given seed yields an
identical delivery trace regardless of host scheduling.
"""

from __future__ import annotations

import heapq
import itertools
import random
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional

MAX_DATAGRAM = 65535


class LinkError(Exception):
    pass


class DatagramTooLarge(LinkError):
    pass


class ReassemblyTimeout(LinkError):
    pass


class OverlapMismatch(LinkError):
    pass


# ---------------------------------------------------------------------------
# simulated clock


class SimClock:
    """Discrete-event clock: a heap of (time, callback) events."""

    def __init__(self):
        self._now = 0.0
        self._heap: list = []
        self._counter = itertools.count()

    @property
    def now(self) -> float:
        return self._now

    def call_at(self, when: float, fn: Callable, *args):
        heapq.heappush(self._heap, (max(when, self._now),
                                    next(self._counter), fn, args))

    def call_later(self, delay: float, fn: Callable, *args):
        self.call_at(self._now + delay, fn, *args)

    def peek(self) -> Optional[float]:
        return self._heap[0][0] if self._heap else None

    def step(self) -> bool:
        """Run the earliest event; returns False if none are pending."""
        if not self._heap:
            return False
        when, _, fn, args = heapq.heappop(self._heap)
        self._now = when
        fn(*args)
        return True

    def run_until_idle(self):
        while self.step():
            pass

    def advance_until(self, deadline: float):
        """Run all events due up to ``deadline``, then set now = deadline."""
        while self._heap and self._heap[0][0] <= deadline:
            self.step()
        if deadline > self._now:
            self._now = deadline


# ---------------------------------------------------------------------------
# configuration


@dataclass
class LinkConfig:
    link_mtu: int = 127            # bytes per frame, 802.15.4-sized
    mac_overhead: int = 21         # MAC + compressed adaptation headers
    frag1_hdr: int = 4             # first-fragment header bytes
    fragn_hdr: int = 5             # subsequent-fragment header bytes
    loss_rate: float = 0.0
    latency: float = 2.0           # milliseconds per frame
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ValueError("loss_rate must be within [0, 1]")
        if self.link_mtu <= self.mac_overhead + self.fragn_hdr:
            raise ValueError("link_mtu too small for headers")

    @property
    def plain_capacity(self) -> int:
        """Payload bytes an unfragmented frame can carry."""
        return self.link_mtu - self.mac_overhead

    @property
    def frag1_capacity(self) -> int:
        return (self.plain_capacity - self.frag1_hdr) // 8 * 8

    @property
    def fragn_capacity(self) -> int:
        return (self.plain_capacity - self.fragn_hdr) // 8 * 8

    _INT_KEYS = ("link_mtu", "mac_overhead", "frag1_hdr", "fragn_hdr",
                 "rng_seed")

    @classmethod
    def from_file(cls, path) -> "LinkConfig":
        """Parse a plain ``key=value`` config file (# starts a comment)."""
        values = {}
        with open(path) as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError("%s:%d: expected key=value" % (path, lineno))
                key, _, text = line.partition("=")
                key, text = key.strip(), text.strip()
                if key in cls._INT_KEYS:
                    values[key] = int(text, 10)
                elif key in ("loss_rate", "latency"):
                    values[key] = float(text)
                else:
                    raise ValueError("%s:%d: unknown key %r" % (path, lineno, key))
        return cls(**values)


# ---------------------------------------------------------------------------
# frames and fragmentation


@dataclass
class FragmentHeader:
    datagram_size: int
    datagram_tag: int
    offset: int          # in units of 8 bytes
    is_first: bool


@dataclass
class Frame:
    src: int
    dst: int
    payload: bytes
    frag: Optional[FragmentHeader] = None

    def wire_size(self, cfg: LinkConfig) -> int:
        hdr = 0
        if self.frag is not None:
            hdr = cfg.frag1_hdr if self.frag.is_first else cfg.fragn_hdr
        return len(self.payload) + cfg.mac_overhead + hdr


def fragment_datagram(data: bytes, cfg: LinkConfig, src: int = 0,
                      dst: int = 0, tag: int = 0) -> list[Frame]:
    """Split a datagram into link frames.

    Datagrams that fit in one frame are sent unfragmented.  Otherwise the
    first fragment carries ``frag1_capacity`` bytes and each subsequent one up
    to ``fragn_capacity`` bytes, both rounded down to a multiple of 8 so that
    offsets stay expressible in 8-byte units.
    """
    if not data:
        raise ValueError("empty datagram")
    if len(data) > MAX_DATAGRAM:
        raise DatagramTooLarge(len(data))
    if len(data) <= cfg.plain_capacity:
        return [Frame(src, dst, bytes(data))]
    size = len(data)
    frames = [Frame(src, dst, bytes(data[:cfg.frag1_capacity]),
                    FragmentHeader(size, tag, 0, True))]
    pos = cfg.frag1_capacity
    while pos < size:
        chunk = bytes(data[pos:pos + cfg.fragn_capacity])
        frames.append(Frame(src, dst, chunk,
                            FragmentHeader(size, tag, pos // 8, False)))
        pos += len(chunk)
    return frames


def frame_count(length: int, cfg: LinkConfig) -> int:
    """Closed-form number of frames for a datagram of ``length`` bytes."""
    if length <= 0:
        raise ValueError("length must be positive")
    if length <= cfg.plain_capacity:
        return 1
    rest = length - cfg.frag1_capacity
    return 1 + -(-rest // cfg.fragn_capacity)


def step_thresholds(cfg: LinkConfig, max_length: int) -> list[int]:
    """Datagram lengths at which the frame count increases, up to max_length."""
    out = []
    for n in range(2, max_length + 2):
        if n > max_length:
            break
        if frame_count(n, cfg) > frame_count(n - 1, cfg):
            out.append(n)
    return out


# ---------------------------------------------------------------------------
# reassembly


@dataclass
class _Partial:
    size: int
    started: float
    chunks: dict = field(default_factory=dict)   # byte offset -> bytes

    def total(self) -> int:
        return sum(len(c) for c in self.chunks.values())


class Reassembler:
    """Per-(src, tag) datagram reassembly with timeout and bounded buffers.

    Fragments may arrive out of order or duplicated; a datagram is yielded
    exactly once when every byte is covered.  Conflicting bytes at the same
    offset raise :class:`OverlapMismatch`.
    """

    def __init__(self, timeout: float = 5.0, max_per_peer: int = 4):
        self.timeout = timeout
        self.max_per_peer = max_per_peer
        self._partial: dict[tuple[int, int], _Partial] = {}
        self.timed_out = 0
        self.dropped_overflow = 0

    def feed(self, frame: Frame, now: float = 0.0) -> list[tuple[int, bytes]]:
        """Add one frame; returns completed ``(src, datagram)`` pairs."""
        self.expire(now)
        if frame.frag is None:
            return [(frame.src, frame.payload)]
        hdr = frame.frag
        key = (frame.src, hdr.datagram_tag)
        part = self._partial.get(key)
        if part is None:
            if self._peer_count(frame.src) >= self.max_per_peer:
                self.dropped_overflow += 1
                return []
            part = _Partial(hdr.datagram_size, now)
            self._partial[key] = part
        offset = hdr.offset * 8
        existing = part.chunks.get(offset)
        if existing is not None:
            if existing != frame.payload:
                raise OverlapMismatch((frame.src, hdr.datagram_tag, offset))
            return []
        part.chunks[offset] = frame.payload
        if part.total() < part.size:
            return []
        data = self._assemble(key, part)
        del self._partial[key]
        return [(frame.src, data)]

    def expire(self, now: float) -> list[tuple[int, int]]:
        """Discard partial datagrams older than the timeout."""
        stale = [k for k, p in self._partial.items()
                 if now - p.started >= self.timeout]
        for k in stale:
            del self._partial[k]
            self.timed_out += 1
        return stale

    def pending(self) -> int:
        return len(self._partial)

    def _peer_count(self, src: int) -> int:
        return sum(1 for (s, _) in self._partial if s == src)

    @staticmethod
    def _assemble(key, part: _Partial) -> bytes:
        out = bytearray()
        for offset in sorted(part.chunks):
            if offset != len(out):
                raise OverlapMismatch(key + (offset,))
            out += part.chunks[offset]
        if len(out) != part.size:
            raise OverlapMismatch(key + (len(out),))
        return bytes(out)


def reassemble(frames: Iterable[Frame],
               timeout: float = 5.0) -> dict[tuple[int, int], bytes]:
    """Strict one-shot reassembly of a finite frame stream.

    Raises :class:`ReassemblyTimeout` if any datagram is left incomplete once
    the stream ends.  Unfragmented frames are keyed with tag ``-1``.
    """
    reasm = Reassembler(timeout=timeout)
    done: dict[tuple[int, int], bytes] = {}
    for frame in frames:
        tag = frame.frag.datagram_tag if frame.frag else -1
        for src, data in reasm.feed(frame):
            done[(src, tag)] = data
    if reasm.pending():
        raise ReassemblyTimeout("incomplete datagrams: %d" % reasm.pending())
    return done


# ---------------------------------------------------------------------------
# the link itself


@dataclass
class TraceEntry:
    time: float
    frame: Frame
    wire_size: int
    delivered: bool


class LinkSim:
    """Shared medium connecting simulated nodes.

    ``transmit`` drops frames with probability ``loss_rate`` (seeded RNG) and
    otherwise schedules delivery at the destination after ``latency``.
    """

    def __init__(self, cfg: LinkConfig, clock: SimClock):
        self.cfg = cfg
        self.clock = clock
        self.rng = random.Random(cfg.rng_seed)
        self._nodes: dict[int, Callable[[Frame], None]] = {}
        self.trace: list[TraceEntry] = []
        self.lost = 0
        self.tracing = True

    def attach(self, node_id: int, deliver: Callable[[Frame], None]):
        if node_id in self._nodes:
            raise ValueError("node %r already attached" % (node_id,))
        self._nodes[node_id] = deliver

    def transmit(self, frame: Frame):
        wire = frame.wire_size(self.cfg)
        if wire > self.cfg.link_mtu:
            raise LinkError("frame exceeds MTU: %d > %d"
                            % (wire, self.cfg.link_mtu))
        delivered = self.rng.random() >= self.cfg.loss_rate
        deliver = self._nodes.get(frame.dst)
        if deliver is None:
            delivered = False
        if self.tracing:
            self.trace.append(TraceEntry(self.clock.now, frame, wire, delivered))
        if not delivered:
            self.lost += 1
            return
        self.clock.call_later(self.cfg.latency / 1000.0, deliver, frame)
