"""Credential registry.

Entries are identified by the (tag, type) tuple.  The registry never owns a
copy of the key material: a :class:`Credential` holds a :class:`SecretRef`
pointing into a caller-owned :class:`SecretStore`.  Dropping the store while
a credential still references it makes dereferencing fail loudly with
:class:`StaleSecret` (instead of silently reading freed memory, which is what
the equivalent C contract would risk).
"""

from __future__ import annotations

import binascii
import itertools
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

CREDMAN_MAX = 8
MAX_IDENTITY = 32


class CredmanError(Exception):
    pass


class RegistryFull(CredmanError):
    pass


class Exists(CredmanError):
    pass


class NotFound(CredmanError):
    pass


class InvalidCredential(CredmanError):
    pass


class StaleSecret(CredmanError):
    pass


class CredentialType(Enum):
    PSK = "psk"
    RAW_PUBLIC_KEY = "rpk"


class SecretStore:
    """Caller-owned key material, addressed by (buffer id, offset, length)."""

    def __init__(self):
        self._bufs: dict[int, bytes] = {}
        self._ids = itertools.count(1)
        self._open = True

    def put(self, secret: bytes) -> "SecretRef":
        if not self._open:
            raise StaleSecret("store closed")
        buf_id = next(self._ids)
        self._bufs[buf_id] = bytes(secret)
        return SecretRef(self, buf_id, 0, len(secret))

    def read(self, buf_id: int, offset: int, length: int) -> bytes:
        if not self._open:
            raise StaleSecret("store closed")
        buf = self._bufs.get(buf_id)
        if buf is None or offset + length > len(buf):
            raise StaleSecret("invalid secret location")
        return buf[offset:offset + length]

    def close(self):
        self._open = False
        self._bufs.clear()


@dataclass(slots=True, frozen=True)
class SecretRef:
    """Location of a secret: (store, buffer, offset, length).  Never the bytes."""
    store: SecretStore
    buf_id: int
    offset: int
    length: int

    def read(self) -> bytes:
        return self.store.read(self.buf_id, self.offset, self.length)


@dataclass(slots=True, frozen=True)
class Credential:
    tag: int
    ctype: CredentialType
    identity: bytes
    secret: SecretRef


class Registry:
    """Fixed-capacity map of (tag, type) -> credential descriptor."""

    def __init__(self, capacity: int = CREDMAN_MAX):
        self.capacity = capacity
        self._entries: dict[Tuple[int, CredentialType], Credential] = {}

    def add(self, cred: Credential):
        if cred.tag == 0:
            raise InvalidCredential("tag 0 is reserved")
        if cred.secret.length == 0:
            raise InvalidCredential("empty secret")
        if len(cred.identity) > MAX_IDENTITY:
            raise InvalidCredential("identity longer than %d" % MAX_IDENTITY)
        key = (cred.tag, cred.ctype)
        if key in self._entries:
            raise Exists(key)
        if len(self._entries) >= self.capacity:
            raise RegistryFull(self.capacity)
        self._entries[key] = cred

    def get(self, tag: int, ctype: CredentialType) -> Credential:
        try:
            return self._entries[(tag, ctype)]
        except KeyError:
            raise NotFound((tag, ctype)) from None

    def delete(self, tag: int, ctype: CredentialType):
        # deleting an absent entry is a no-op
        self._entries.pop((tag, ctype), None)

    def __len__(self):
        return len(self._entries)


def load_credentials(path, store: SecretStore,
                     registry: Optional[Registry] = None) -> list[Credential]:
    """Parse a credentials file into ``store`` (and ``registry`` if given).

    Line format: ``tag=<int> type=psk identity=<utf8> key=<hex>``.
    """
    creds = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = {}
            for token in line.split():
                if "=" not in token:
                    raise ValueError("%s:%d: bad token %r" % (path, lineno, token))
                k, _, v = token.partition("=")
                fields[k] = v
            missing = {"tag", "type", "identity", "key"} - set(fields)
            if missing:
                raise ValueError("%s:%d: missing %s"
                                 % (path, lineno, ", ".join(sorted(missing))))
            if len(fields["key"]) % 2:
                raise ValueError("%s:%d: odd-length hex key" % (path, lineno))
            try:
                secret = binascii.unhexlify(fields["key"])
            except binascii.Error as exc:
                raise ValueError("%s:%d: bad hex key" % (path, lineno)) from exc
            cred = Credential(
                tag=int(fields["tag"], 10),
                ctype=CredentialType(fields["type"]),
                identity=fields["identity"].encode(),
                secret=store.put(secret),
            )
            if registry is not None:
                registry.add(cred)
            creds.append(cred)
    return creds
