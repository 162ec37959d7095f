"""Record layer: wire format, AEAD protection, anti-replay window.

Wire format (13-byte header, not interoperable with real DTLS peers):

    type:1  version:2 (0xFEFD)  epoch:2  seq:6  length:2

Epoch 0 records are plaintext (handshake in the clear); epoch >= 1 records
are AES-128-CCM with an 8-byte tag, nonce = write_iv || epoch || seq, and the
header as additional authenticated data.
"""

from __future__ import annotations

import struct
from typing import Iterator, Optional, Tuple

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESCCM

from .crypto import RecordKeys

RECORD_VERSION = 0xFEFD
HEADER_LEN = 13
TAG_LEN = 8
MAX_SEQ = (1 << 48) - 1

CT_CCS = 20
CT_ALERT = 21
CT_HANDSHAKE = 22
CT_APPDATA = 23

ALERT_CLOSE_NOTIFY = b"\x01\x00"
ALERT_HANDSHAKE_FAILURE = b"\x02\x28"

_HDR_HEAD = struct.Struct("!BHH")   # type, version, epoch


class RecordError(Exception):
    pass


class DecodeError(RecordError):
    pass


class AuthFailed(RecordError):
    pass


class ReplayDetected(RecordError):
    pass


class SeqExhausted(RecordError):
    pass


def pack_header(ctype: int, epoch: int, seq: int, length: int) -> bytes:
    if seq > MAX_SEQ:
        raise SeqExhausted(seq)
    return (_HDR_HEAD.pack(ctype, RECORD_VERSION, epoch)
            + seq.to_bytes(6, "big") + length.to_bytes(2, "big"))


def parse_header(data: bytes, offset: int = 0) -> Tuple[int, int, int, int]:
    """Returns (type, epoch, seq, length); raises DecodeError on garbage."""
    if len(data) - offset < HEADER_LEN:
        raise DecodeError("short record header")
    ctype, version, epoch = _HDR_HEAD.unpack_from(data, offset)
    if version != RECORD_VERSION:
        raise DecodeError("bad record version 0x%04x" % version)
    seq = int.from_bytes(data[offset + 5:offset + 11], "big")
    length = int.from_bytes(data[offset + 11:offset + 13], "big")
    return ctype, epoch, seq, length


def iter_records(datagram: bytes) -> Iterator[Tuple[int, int, int, bytes]]:
    """Split a datagram into (type, epoch, seq, body) records."""
    offset = 0
    while offset < len(datagram):
        ctype, epoch, seq, length = parse_header(datagram, offset)
        start = offset + HEADER_LEN
        if start + length > len(datagram):
            raise DecodeError("record body truncated")
        yield ctype, epoch, seq, datagram[start:start + length]
        offset = start + length


def iter_raw_records(datagram: bytes) -> Iterator[bytes]:
    """Split a datagram into raw record slices (header included)."""
    offset = 0
    while offset < len(datagram):
        _, _, _, length = parse_header(datagram, offset)
        end = offset + HEADER_LEN + length
        if end > len(datagram):
            raise DecodeError("record body truncated")
        yield datagram[offset:end]
        offset = end


def plain_record(ctype: int, seq: int, body: bytes, epoch: int = 0) -> bytes:
    return pack_header(ctype, epoch, seq, len(body)) + body


class ReplayWindow:
    """64-entry sliding bitmask; each sequence number is accepted at most once."""

    __slots__ = ("highest", "mask")
    SIZE = 64

    def __init__(self):
        self.highest = -1
        self.mask = 0

    def check_and_update(self, seq: int) -> bool:
        if seq > self.highest:
            shift = seq - self.highest
            self.mask = ((self.mask << shift) | 1) & ((1 << self.SIZE) - 1) \
                if self.highest >= 0 else 1
            self.highest = seq
            return True
        offset = self.highest - seq
        if offset >= self.SIZE:
            return False
        bit = 1 << offset
        if self.mask & bit:
            return False
        self.mask |= bit
        return True


class MiniRecordCrypto:
    """AEAD record protection bound to one session's keys and role."""

    __slots__ = ("keys", "role", "_send_aead", "_recv_aead",
                 "_send_iv", "_recv_iv")

    overhead = HEADER_LEN + TAG_LEN

    def __init__(self, keys: RecordKeys, role: str):
        self.keys = keys
        self.role = role
        if role == "client":
            send_key, recv_key = keys.client_write_key, keys.server_write_key
            self._send_iv, self._recv_iv = keys.client_iv, keys.server_iv
        elif role == "server":
            send_key, recv_key = keys.server_write_key, keys.client_write_key
            self._send_iv, self._recv_iv = keys.server_iv, keys.client_iv
        else:
            raise ValueError(role)
        self._send_aead = AESCCM(send_key, tag_length=TAG_LEN)
        self._recv_aead = AESCCM(recv_key, tag_length=TAG_LEN)

    def protect(self, epoch: int, seq: int, plaintext: bytes,
                ctype: int = CT_APPDATA) -> bytes:
        header = pack_header(ctype, epoch, seq, len(plaintext) + TAG_LEN)
        nonce = (self._send_iv + epoch.to_bytes(2, "big")
                 + seq.to_bytes(6, "big"))
        return header + self._send_aead.encrypt(nonce, plaintext, header)

    def unprotect(self, record: bytes,
                  window: Optional[ReplayWindow] = None
                  ) -> Tuple[int, int, int, bytes]:
        """Verify and decrypt one full record; returns (type, epoch, seq, pt).

        AEAD verification runs first; the replay check (when a window is
        given) marks the sequence number only after authentication passed.
        """
        ctype, epoch, seq, length = parse_header(record)
        body = record[HEADER_LEN:HEADER_LEN + length]
        if len(body) != length or length < TAG_LEN:
            raise DecodeError("record body truncated")
        nonce = (self._recv_iv + epoch.to_bytes(2, "big")
                 + seq.to_bytes(6, "big"))
        header = record[:HEADER_LEN]
        try:
            plaintext = self._recv_aead.decrypt(nonce, body, header)
        except InvalidTag as exc:
            raise AuthFailed() from exc
        if window is not None and not window.check_and_update(
                (epoch << 48) | seq):
            raise ReplayDetected(seq)
        return ctype, epoch, seq, plaintext


class NullRecordCrypto:
    """Pass-through record framing: header only, no confidentiality."""

    __slots__ = ()

    overhead = HEADER_LEN

    def protect(self, epoch: int, seq: int, plaintext: bytes,
                ctype: int = CT_APPDATA) -> bytes:
        return pack_header(ctype, epoch, seq, len(plaintext)) + plaintext

    def unprotect(self, record: bytes,
                  window: Optional[ReplayWindow] = None
                  ) -> Tuple[int, int, int, bytes]:
        ctype, epoch, seq, length = parse_header(record)
        body = record[HEADER_LEN:HEADER_LEN + length]
        if len(body) != length:
            raise DecodeError("record body truncated")
        if window is not None and not window.check_and_update(
                (epoch << 48) | seq):
            raise ReplayDetected(seq)
        return ctype, epoch, seq, body
