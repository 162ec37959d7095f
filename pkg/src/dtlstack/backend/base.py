"""Interface every transport-security backend implements.

A backend supplies three things:

* a client handshake machine (one per session attempt),
* a stateless listener that turns valid first contacts into server machines,
* per-session record protection, produced by a finished machine.

Machines are pure-ish state machines: time is passed in, randomness comes
from an injected RNG, and output is a list of datagrams to transmit.  This
keeps them testable single-threaded and makes runs reproducible.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum, auto
from typing import Callable, Optional, Tuple


class FailReason(Enum):
    BAD_COOKIE = auto()
    UNKNOWN_PSK_IDENTITY = auto()
    TIMEOUT = auto()
    DECODE_ERROR = auto()
    AUTH = auto()


class HandshakeFailed(Exception):
    def __init__(self, reason: FailReason, detail: str = ""):
        super().__init__("%s %s" % (reason.name, detail))
        self.reason = reason


class Phase(Enum):
    IDLE = auto()
    HELLO_SENT = auto()
    COOKIE_RECEIVED = auto()
    KEY_EXCHANGE = auto()
    FINISHED = auto()


@dataclass
class RetxConfig:
    """Flight retransmission: doubling backoff, bounded attempts."""
    initial: float = 1.0
    cap: float = 60.0
    max_retx: int = 7


class HandshakeMachine(ABC):
    """Driven with datagrams and time; emits datagrams to send."""

    role: str
    phase: Phase
    done: bool
    failed: Optional[FailReason]
    crypto: object            # record protection, set when done
    recv_window: object       # pre-seeded replay window, set when done
    next_send_seq: int        # first free application seq, set when done
    credential_used: Optional[tuple]
    next_timeout: Optional[float]

    @abstractmethod
    def start(self, now: float) -> list[bytes]:
        """Client only: produce the initial flight."""

    @abstractmethod
    def handle_datagram(self, data: bytes, now: float) -> list[bytes]:
        """Feed one received datagram; returns datagrams to transmit."""

    @abstractmethod
    def poll(self, now: float) -> list[bytes]:
        """Retransmit the last flight if its timer expired."""


class _RetxMixin:
    """Shared flight buffering and backoff for handshake machines."""

    def _retx_init(self, retx: RetxConfig):
        self._retx_cfg = retx
        self._rto = retx.initial
        self.retx_count = 0
        self.last_flight: Optional[list[bytes]] = None
        self.next_timeout: Optional[float] = None

    def _set_flight(self, flight: list[bytes], now: float):
        self.last_flight = flight
        self._rto = self._retx_cfg.initial
        self.retx_count = 0
        self.next_timeout = now + self._rto

    def _disarm(self):
        self.next_timeout = None

    def poll(self, now: float) -> list[bytes]:
        if (self.done or self.failed is not None
                or self.next_timeout is None or now < self.next_timeout):
            return []
        if self.retx_count >= self._retx_cfg.max_retx:
            self.failed = FailReason.TIMEOUT
            self.next_timeout = None
            return []
        self.retx_count += 1
        self._rto = min(self._rto * 2, self._retx_cfg.cap)
        self.next_timeout = now + self._rto
        return list(self.last_flight or [])


class Listener(ABC):
    """Server-side first contact handler.

    Must allocate no per-client state until the peer has proven address
    ownership (echoed cookie or equivalent); returns a machine only then.
    """

    @abstractmethod
    def handle_datagram(self, data: bytes, peer_key: bytes, now: float
                        ) -> Tuple[list[bytes], Optional[HandshakeMachine]]:
        ...


# lookup(identity) -> (psk bytes, credential key) or None
IdentityLookup = Callable[[bytes], Optional[Tuple[bytes, tuple]]]


class Backend(ABC):
    name: str
    record_overhead: int      # bytes added to each protected application record

    @abstractmethod
    def make_client(self, identity: bytes, psk: bytes, rng,
                    retx: RetxConfig, credential) -> HandshakeMachine:
        ...

    @abstractmethod
    def make_listener(self, lookup: IdentityLookup, rng,
                      retx: RetxConfig) -> Listener:
        ...
