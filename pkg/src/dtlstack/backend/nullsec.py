"""No-op security backend.

One hello round trip, record framing without confidentiality.  Exists for
backend-swap tests and as the zero-crypto baseline in benchmarks.
"""

from __future__ import annotations

from typing import Optional

from .base import (Backend, FailReason, HandshakeMachine, Listener, Phase,
                   RetxConfig, _RetxMixin)
from .records import (CT_HANDSHAKE, DecodeError, NullRecordCrypto,
                      ReplayWindow, iter_records, plain_record)

HELLO = b"NSEC-HELLO"
HELLO_ACK = b"NSEC-ACK"


class _NullMachine(_RetxMixin, HandshakeMachine):
    def __init__(self, retx: RetxConfig, credential=None):
        self.phase = Phase.IDLE
        self.done = False
        self.failed: Optional[FailReason] = None
        self.crypto = NullRecordCrypto()
        self.recv_window: Optional[ReplayWindow] = None
        self.next_send_seq = 0
        self.credential_used = credential
        self._retx_init(retx)

    def _finish(self):
        self.done = True
        self.phase = Phase.FINISHED
        self.recv_window = ReplayWindow()
        self._disarm()


class NullClientMachine(_NullMachine):
    role = "client"

    def start(self, now: float) -> list[bytes]:
        flight = [plain_record(CT_HANDSHAKE, 0, HELLO)]
        self._set_flight(flight, now)
        self.phase = Phase.HELLO_SENT
        return list(flight)

    def handle_datagram(self, data: bytes, now: float) -> list[bytes]:
        if self.failed is not None or self.done:
            return []
        try:
            for ctype, _epoch, _seq, body in iter_records(data):
                if ctype == CT_HANDSHAKE and body == HELLO_ACK:
                    self._finish()
        except DecodeError:
            pass
        return []


class NullServerMachine(_NullMachine):
    role = "server"

    def __init__(self, retx: RetxConfig):
        super().__init__(retx)
        self._ack = [plain_record(CT_HANDSHAKE, 0, HELLO_ACK)]
        self.last_flight = self._ack
        self._finish()

    def start(self, now: float) -> list[bytes]:
        raise RuntimeError("server machines are created by the listener")

    def handle_datagram(self, data: bytes, now: float) -> list[bytes]:
        try:
            for ctype, _epoch, _seq, body in iter_records(data):
                if ctype == CT_HANDSHAKE and body == HELLO:
                    return list(self._ack)       # client missed our ack
        except DecodeError:
            pass
        return []


class NullListener(Listener):
    def __init__(self, retx: RetxConfig):
        self.retx = retx

    def handle_datagram(self, data: bytes, peer_key: bytes, now: float):
        try:
            for ctype, _epoch, _seq, body in iter_records(data):
                if ctype == CT_HANDSHAKE and body == HELLO:
                    machine = NullServerMachine(self.retx)
                    return list(machine._ack), machine
        except DecodeError:
            pass
        return [], None


class NullSecBackend(Backend):
    name = "nullsec"
    record_overhead = NullRecordCrypto.overhead

    def make_client(self, identity, psk, rng, retx, credential=None):
        return NullClientMachine(retx, credential)

    def make_listener(self, lookup, rng, retx):
        return NullListener(retx)
