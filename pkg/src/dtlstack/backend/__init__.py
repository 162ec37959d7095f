"""Transport-security backends and their selection.

The secure socket is written purely against :mod:`dtlstack.backend.base`;
concrete backends are resolved here by name, so swapping implementations is a
configuration change, never an application change.
"""

from __future__ import annotations

from enum import Enum
from typing import Union

from .base import (Backend, FailReason, HandshakeFailed, HandshakeMachine,
                   Listener, RetxConfig)


class UnknownBackend(Exception):
    pass


class BackendId(Enum):
    MINI_DTLS = "minidtls"
    NULL_SEC = "nullsec"


def backend_select(name: Union[str, BackendId]) -> Backend:
    """Return a backend instance for a configured name."""
    if isinstance(name, BackendId):
        name = name.value
    if name == "minidtls":
        from .minidtls import MiniDtlsBackend
        return MiniDtlsBackend()
    if name == "nullsec":
        from .nullsec import NullSecBackend
        return NullSecBackend()
    raise UnknownBackend(name)
