"""Key derivation for the PSK cipher profile.

HMAC-SHA-256 in the TLS-1.2 P_hash expansion pattern; the premaster secret is
the standard plain-PSK construction (length-prefixed zeros || length-prefixed
key).  Everything here is deterministic in its inputs.
"""

from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass

MASTER_SECRET_LEN = 48
KEY_LEN = 16
IV_LEN = 4


class EmptyPsk(ValueError):
    pass


def hmac_sha256(key: bytes, msg: bytes) -> bytes:
    return hmac.new(key, msg, hashlib.sha256).digest()


def p_hash(secret: bytes, seed: bytes, length: int) -> bytes:
    out = b""
    a = seed
    while len(out) < length:
        a = hmac_sha256(secret, a)
        out += hmac_sha256(secret, a + seed)
    return out[:length]


def prf(secret: bytes, label: bytes, seed: bytes, length: int) -> bytes:
    return p_hash(secret, label + seed, length)


def psk_premaster(psk: bytes) -> bytes:
    n = len(psk)
    return struct.pack("!H", n) + b"\x00" * n + struct.pack("!H", n) + psk


@dataclass(slots=True, frozen=True)
class RecordKeys:
    master_secret: bytes
    client_write_key: bytes
    server_write_key: bytes
    client_iv: bytes
    server_iv: bytes


def derive_keys(psk: bytes, client_random: bytes,
                server_random: bytes) -> RecordKeys:
    if not psk:
        raise EmptyPsk()
    if len(client_random) != 32 or len(server_random) != 32:
        raise ValueError("randoms must be 32 bytes")
    master = prf(psk_premaster(psk), b"master secret",
                 client_random + server_random, MASTER_SECRET_LEN)
    block = prf(master, b"key expansion", server_random + client_random,
                2 * KEY_LEN + 2 * IV_LEN)
    return RecordKeys(
        master_secret=master,
        client_write_key=block[0:16],
        server_write_key=block[16:32],
        client_iv=block[32:36],
        server_iv=block[36:40],
    )
