"""Built-in PSK transport-security backend ("mini-dtls").

A deliberately small DTLS-1.2-flavoured PSK profile covering exactly what the
socket abstraction needs: a stateless cookie exchange against spoofed-source
floods, reliable flights with doubling retransmission backoff, key derivation
from the PSK, and AEAD-protected application records.

Message flow (three round trips):

    C -> S  ClientHello (no cookie)
    S -> C  HelloVerifyRequest (cookie)            [stateless]
    C -> S  ClientHello (cookie)
    S -> C  ServerHello + ServerHelloDone
    C -> S  ClientKeyExchange + CCS + Finished
    S -> C  CCS + Finished

Handshake messages are never fragmented; each is capped at 512 bytes and a
whole flight fits one datagram.  The wire format is NOT interoperable with
real DTLS peers.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Optional, Tuple

from .base import (Backend, FailReason, HandshakeMachine, IdentityLookup,
                   Listener, Phase, RetxConfig, _RetxMixin)
from .crypto import derive_keys, hmac_sha256, prf
from .records import (ALERT_HANDSHAKE_FAILURE, CT_ALERT, CT_CCS, CT_HANDSHAKE,
                      AuthFailed, DecodeError, MiniRecordCrypto, ReplayWindow,
                      iter_records, plain_record)

MSG_CLIENT_HELLO = 1
MSG_SERVER_HELLO = 2
MSG_HELLO_VERIFY = 3
MSG_SERVER_HELLO_DONE = 14
MSG_CLIENT_KEY_EXCHANGE = 16
MSG_FINISHED = 20

MAX_HS_MESSAGE = 512
COOKIE_LEN = 16
VERIFY_LEN = 12

def encode_hs(msg_type: int, body: bytes) -> bytes:
    msg = struct.pack("!BH", msg_type, len(body)) + body
    if len(msg) > MAX_HS_MESSAGE:
        raise DecodeError("handshake message exceeds %d bytes" % MAX_HS_MESSAGE)
    return msg


def decode_hs(data: bytes) -> Tuple[int, bytes]:
    if len(data) < 3 or len(data) > MAX_HS_MESSAGE:
        raise DecodeError("bad handshake message size")
    msg_type, length = struct.unpack_from("!BH", data)
    if len(data) != 3 + length:
        raise DecodeError("handshake length mismatch")
    return msg_type, data[3:]


def make_cookie(secret: bytes, peer_key: bytes, client_random: bytes) -> bytes:
    return hmac_sha256(secret, peer_key + client_random)[:COOKIE_LEN]


def _transcript_hash(messages: list[bytes]) -> bytes:
    return hashlib.sha256(b"".join(messages)).digest()


def _rebuild_record(ctype: int, epoch: int, seq: int, body: bytes) -> bytes:
    # iter_records splits header from body; the AEAD needs the full record
    from .records import pack_header
    return pack_header(ctype, epoch, seq, len(body)) + body


class _MiniMachine(_RetxMixin, HandshakeMachine):
    """State shared by both roles."""

    def __init__(self, rng, retx: RetxConfig):
        self.rng = rng
        self.phase = Phase.IDLE
        self.done = False
        self.failed: Optional[FailReason] = None
        self.crypto: Optional[MiniRecordCrypto] = None
        self.recv_window: Optional[ReplayWindow] = None
        self.next_send_seq = 0
        self.credential_used = None
        self.transcript: list[bytes] = []
        self._seq0 = 0          # epoch-0 record sequence counter
        self._saw_ccs = False
        self._retx_init(retx)

    def _plain(self, ctype: int, body: bytes) -> bytes:
        rec = plain_record(ctype, self._seq0, body)
        self._seq0 += 1
        return rec

    def _fail(self, reason: FailReason) -> list[bytes]:
        self.failed = reason
        self._disarm()
        return [self._plain(CT_ALERT, ALERT_HANDSHAKE_FAILURE)]

    def _finish(self):
        self.done = True
        self.phase = Phase.FINISHED
        self.recv_window = ReplayWindow()
        # the peer's Finished consumed epoch-1 sequence number 0
        self.recv_window.check_and_update((1 << 48) | 0)
        self.next_send_seq = 1

    def handle_datagram(self, data: bytes, now: float) -> list[bytes]:
        if self.failed is not None:
            return []
        out: list[bytes] = []
        try:
            records = list(iter_records(data))
        except DecodeError:
            return []
        for ctype, epoch, seq, body in records:
            if self.done and ctype != CT_HANDSHAKE:
                continue
            if ctype == CT_ALERT:
                self.failed = FailReason.AUTH
                self._disarm()
                return []
            if ctype == CT_CCS:
                self._saw_ccs = True
                continue
            if ctype != CT_HANDSHAKE:
                continue
            out.extend(self._handle_handshake(epoch, seq, body, now))
            if self.failed is not None:
                break
        # a duplicated flight may trigger several identical resends
        seen = set()
        unique = []
        for dgram in out:
            if dgram not in seen:
                seen.add(dgram)
                unique.append(dgram)
        return unique

    def _handle_handshake(self, epoch, seq, body, now) -> list[bytes]:
        raise NotImplementedError


class ClientMachine(_MiniMachine):
    role = "client"

    def __init__(self, identity: bytes, psk: bytes, rng, retx: RetxConfig,
                 credential=None):
        super().__init__(rng, retx)
        self.identity = identity
        self.psk = psk
        self.credential = credential
        self.client_random = rng.randbytes(32)
        self.server_random: Optional[bytes] = None
        self.keys = None

    def start(self, now: float) -> list[bytes]:
        hello = encode_hs(MSG_CLIENT_HELLO, self.client_random + b"\x00")
        flight = [self._plain(CT_HANDSHAKE, hello)]
        self._set_flight([b"".join(flight)], now)
        self.phase = Phase.HELLO_SENT
        return list(self.last_flight)

    def _handle_handshake(self, epoch, seq, body, now) -> list[bytes]:
        if epoch == 1:
            return self._handle_server_finished(epoch, seq, body, now)
        try:
            msg_type, mbody = decode_hs(body)
        except DecodeError:
            return []
        if msg_type == MSG_HELLO_VERIFY:
            return self._on_hello_verify(mbody, now)
        if msg_type == MSG_SERVER_HELLO:
            if self.phase is Phase.COOKIE_RECEIVED and self.server_random is None:
                if len(mbody) != 32:
                    return self._fail(FailReason.DECODE_ERROR)
                self.server_random = mbody
                self.transcript.append(encode_hs(MSG_SERVER_HELLO, mbody))
            return []
        if msg_type == MSG_SERVER_HELLO_DONE:
            if self.phase is Phase.COOKIE_RECEIVED and self.server_random is not None:
                return self._send_key_exchange(now)
            if self.phase is Phase.KEY_EXCHANGE:
                # server repeated its flight: ours was lost
                return list(self.last_flight or [])
            return []
        return []

    def _on_hello_verify(self, mbody: bytes, now: float) -> list[bytes]:
        if not mbody or len(mbody) != 1 + mbody[0]:
            return self._fail(FailReason.DECODE_ERROR)
        cookie = mbody[1:]
        if self.phase is Phase.HELLO_SENT:
            hello = encode_hs(MSG_CLIENT_HELLO,
                              self.client_random + bytes([len(cookie)]) + cookie)
            self.transcript = [hello]
            flight = [self._plain(CT_HANDSHAKE, hello)]
            self._set_flight([b"".join(flight)], now)
            self.phase = Phase.COOKIE_RECEIVED
            return list(self.last_flight)
        if self.phase is Phase.COOKIE_RECEIVED:
            return list(self.last_flight or [])
        return []

    def _send_key_exchange(self, now: float) -> list[bytes]:
        self.transcript.append(encode_hs(MSG_SERVER_HELLO_DONE, b""))
        cke = encode_hs(MSG_CLIENT_KEY_EXCHANGE,
                        struct.pack("!H", len(self.identity)) + self.identity)
        self.transcript.append(cke)
        self.keys = derive_keys(self.psk, self.client_random, self.server_random)
        self.crypto = MiniRecordCrypto(self.keys, "client")
        verify = prf(self.keys.master_secret, b"client finished",
                     _transcript_hash(self.transcript), VERIFY_LEN)
        fin = encode_hs(MSG_FINISHED, verify)
        self.transcript.append(fin)
        records = [self._plain(CT_HANDSHAKE, cke),
                   self._plain(CT_CCS, b"\x01"),
                   self.crypto.protect(1, 0, fin, ctype=CT_HANDSHAKE)]
        self._set_flight([b"".join(records)], now)
        self.phase = Phase.KEY_EXCHANGE
        self.credential_used = self.credential
        return list(self.last_flight)

    def _handle_server_finished(self, epoch, seq, body, now) -> list[bytes]:
        if self.phase is not Phase.KEY_EXCHANGE or not self._saw_ccs:
            return []
        try:
            _, _, _, plaintext = self.crypto.unprotect(
                _rebuild_record(CT_HANDSHAKE, epoch, seq, body))
            msg_type, verify = decode_hs(plaintext)
        except (AuthFailed, DecodeError):
            return self._fail(FailReason.AUTH)
        if msg_type != MSG_FINISHED:
            return []
        expected = prf(self.keys.master_secret, b"server finished",
                       _transcript_hash(self.transcript), VERIFY_LEN)
        if verify != expected:
            return self._fail(FailReason.AUTH)
        self._disarm()
        self._finish()
        return []


class ServerMachine(_MiniMachine):
    role = "server"

    def __init__(self, lookup: IdentityLookup, rng, retx: RetxConfig):
        super().__init__(rng, retx)
        self.lookup = lookup
        self.server_random = rng.randbytes(32)
        self.client_random: Optional[bytes] = None
        self.keys = None
        self._client_fin: Optional[bytes] = None

    def start(self, now: float) -> list[bytes]:
        raise RuntimeError("server machines are created by the listener")

    def _handle_handshake(self, epoch, seq, body, now) -> list[bytes]:
        if epoch == 1:
            return self._handle_client_finished(epoch, seq, body, now)
        try:
            msg_type, mbody = decode_hs(body)
        except DecodeError:
            return []
        if msg_type == MSG_CLIENT_HELLO:
            return self._on_client_hello(body, mbody, now)
        if msg_type == MSG_CLIENT_KEY_EXCHANGE:
            return self._on_key_exchange(body, mbody, now)
        return []

    def _on_client_hello(self, raw: bytes, mbody: bytes, now) -> list[bytes]:
        if self.done or self.phase in (Phase.COOKIE_RECEIVED,
                                       Phase.KEY_EXCHANGE):
            # duplicate hello: our ServerHello flight was lost
            return list(self.last_flight or [])
        if len(mbody) < 33:
            return self._fail(FailReason.DECODE_ERROR)
        self.client_random = mbody[:32]
        self.transcript.append(raw)
        sh = encode_hs(MSG_SERVER_HELLO, self.server_random)
        shd = encode_hs(MSG_SERVER_HELLO_DONE, b"")
        self.transcript += [sh, shd]
        flight = [self._plain(CT_HANDSHAKE, sh), self._plain(CT_HANDSHAKE, shd)]
        self._set_flight([b"".join(flight)], now)
        self.phase = Phase.COOKIE_RECEIVED
        return list(self.last_flight)

    def _on_key_exchange(self, raw: bytes, mbody: bytes, now) -> list[bytes]:
        if self.done:
            return list(self.last_flight or [])
        if self.phase is not Phase.COOKIE_RECEIVED:
            return []
        if len(mbody) < 2:
            return self._fail(FailReason.DECODE_ERROR)
        (id_len,) = struct.unpack_from("!H", mbody)
        if len(mbody) != 2 + id_len:
            return self._fail(FailReason.DECODE_ERROR)
        identity = mbody[2:]
        found = self.lookup(identity)
        if found is None:
            return self._fail(FailReason.UNKNOWN_PSK_IDENTITY)
        psk, credential = found
        self.transcript.append(raw)
        self.keys = derive_keys(psk, self.client_random, self.server_random)
        self.crypto = MiniRecordCrypto(self.keys, "server")
        self.credential_used = credential
        self.phase = Phase.KEY_EXCHANGE
        return []

    def _handle_client_finished(self, epoch, seq, body, now) -> list[bytes]:
        if self.done:
            return list(self.last_flight or [])
        if self.phase is not Phase.KEY_EXCHANGE or not self._saw_ccs:
            return []
        try:
            _, _, _, plaintext = self.crypto.unprotect(
                _rebuild_record(CT_HANDSHAKE, epoch, seq, body))
            msg_type, verify = decode_hs(plaintext)
        except (AuthFailed, DecodeError):
            return self._fail(FailReason.AUTH)
        if msg_type != MSG_FINISHED:
            return []
        expected = prf(self.keys.master_secret, b"client finished",
                       _transcript_hash(self.transcript), VERIFY_LEN)
        if verify != expected:
            return self._fail(FailReason.AUTH)
        self._client_fin = plaintext
        self.transcript.append(plaintext)
        server_verify = prf(self.keys.master_secret, b"server finished",
                            _transcript_hash(self.transcript), VERIFY_LEN)
        fin = encode_hs(MSG_FINISHED, server_verify)
        records = [self._plain(CT_CCS, b"\x01"),
                   self.crypto.protect(1, 0, fin, ctype=CT_HANDSHAKE)]
        flight = [b"".join(records)]
        self.last_flight = flight       # kept for duplicate-flight replies
        self._disarm()
        self._finish()
        return list(flight)


class MiniDtlsListener(Listener):
    """Stateless until the echoed cookie verifies."""

    def __init__(self, lookup: IdentityLookup, rng, retx: RetxConfig):
        self.lookup = lookup
        self.rng = rng
        self.retx = retx
        self.cookie_secret = rng.randbytes(16)
        self._hvr_seq = 0

    def handle_datagram(self, data: bytes, peer_key: bytes, now: float):
        try:
            records = list(iter_records(data))
            if not records:
                return [], None
            ctype, epoch, _seq, body = records[0]
            if ctype != CT_HANDSHAKE or epoch != 0:
                return [], None
            msg_type, mbody = decode_hs(body)
        except DecodeError:
            return [], None
        if msg_type != MSG_CLIENT_HELLO or len(mbody) < 33:
            return [], None
        client_random = mbody[:32]
        cookie_len = mbody[32]
        cookie = mbody[33:33 + cookie_len]
        expected = make_cookie(self.cookie_secret, peer_key, client_random)
        if cookie != expected:
            hvr = encode_hs(MSG_HELLO_VERIFY,
                            bytes([len(expected)]) + expected)
            rec = plain_record(CT_HANDSHAKE, self._hvr_seq, hvr)
            self._hvr_seq += 1
            return [rec], None
        machine = ServerMachine(self.lookup, self.rng, self.retx)
        out = machine.handle_datagram(data, now)
        return out, machine


class MiniDtlsBackend(Backend):
    name = "minidtls"
    record_overhead = MiniRecordCrypto.overhead

    def make_client(self, identity, psk, rng, retx, credential=None):
        return ClientMachine(identity, psk, rng, retx, credential)

    def make_listener(self, lookup, rng, retx):
        return MiniDtlsListener(lookup, rng, retx)
