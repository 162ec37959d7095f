"""Backend-independent secure datagram socket.

Wraps a bound :class:`~dtlstack.sock_udp.UdpSock` and a credential registry;
the transport-security backend is chosen by name at creation and everything
else is identical between backends.  Server lifecycle: create, register
credential tags, ``init_server``, then ``recv`` pumps handshakes and data.
Client lifecycle: create, register tags, ``establish_session``, then
``send``/``recv``.

A sock is driven by one thread at a time; external serialization is the
caller's job.

This module deliberately imports no concrete backend implementation, only
the backend interface and the shared record wire format.
"""

from __future__ import annotations

import random
from collections import deque
from typing import Optional, Tuple

from . import sock_udp
from .backend import BackendId, UnknownBackend, backend_select
from .backend.base import FailReason, HandshakeFailed, RetxConfig
from .backend.records import (ALERT_CLOSE_NOTIFY, CT_ALERT, CT_APPDATA,
                              AuthFailed, DecodeError, RecordError,
                              ReplayDetected, SeqExhausted, iter_raw_records,
                              parse_header)
from .credman import CredentialType, NotFound, Registry
from .sock_udp import (MAX_PAYLOAD, Endpoint, PayloadTooLarge, SockError,
                       Timeout, UdpSock, UdpSockInUse)

MAX_SESSIONS = 4
MAX_TAGS = 4


class NotServer(SockError):
    pass


class NotClient(SockError):
    pass


class NoCredentials(SockError):
    pass


class TooManyTags(SockError):
    pass


class EmptyTagList(SockError):
    pass


class SessionClosed(SockError):
    pass


class SessionTableFull(SockError):
    pass


class _ClosedCrypto:
    """Installed on a session by close; every use fails loudly."""

    __slots__ = ()

    def protect(self, *args, **kwargs):
        raise SessionClosed()

    def unprotect(self, *args, **kwargs):
        raise SessionClosed()


_CLOSED = _ClosedCrypto()


class DtlsSession:
    """An established peer association."""

    __slots__ = ("remote", "crypto", "epoch", "next_send_seq", "recv_window",
                 "credential_used", "closed")

    def __init__(self, remote: Endpoint, crypto, next_send_seq: int,
                 recv_window, credential_used):
        self.remote = remote
        self.crypto = crypto
        self.epoch = 1
        self.next_send_seq = next_send_seq
        self.recv_window = recv_window
        self.credential_used = credential_used
        self.closed = False


class DtlsSock:
    def __init__(self, udp: UdpSock, backend, role: str, registry: Registry,
                 rng: Optional[random.Random] = None,
                 retx: Optional[RetxConfig] = None,
                 max_sessions: int = MAX_SESSIONS):
        if role not in ("client", "server"):
            raise ValueError("role must be 'client' or 'server'")
        self._backend = backend_select(backend)   # raises UnknownBackend
        if udp.owner is not None:
            raise UdpSockInUse(udp.local)
        udp.owner = self
        self._udp = udp
        self.role = role
        self.registry = registry
        self.max_sessions = max_sessions
        self._rng = rng if rng is not None else random.Random()
        self._retx = retx if retx is not None else RetxConfig()
        self._tags: list[Tuple[int, CredentialType]] = []
        self._server_ready = False
        self._listener = None
        self._machines: dict[Endpoint, object] = {}
        self._timer_marks: dict[Endpoint, float] = {}
        self._sessions: dict[Endpoint, DtlsSession] = {}
        self._app_queue: deque = deque()
        self.dropped = 0          # auth/replay/undeliverable records
        self._max_payload = MAX_PAYLOAD - self._backend.record_overhead
        if udp.is_sim:
            udp.deliver_hook = self._on_datagram
            self._clock = udp._node.clock
        else:
            self._clock = None

    # -- lifecycle ---------------------------------------------------------

    def register_credential_tags(self, tags):
        tags = list(tags)
        if not tags:
            raise EmptyTagList()
        if len(self._tags) + len(tags) > MAX_TAGS:
            raise TooManyTags(len(self._tags) + len(tags))
        self._tags.extend(tags)

    def init_server(self):
        if self.role != "server":
            raise NotServer(self.role)
        if not self._tags:
            raise NoCredentials()
        self._listener = self._backend.make_listener(
            self._lookup_identity, self._rng, self._retx)
        self._server_ready = True

    def establish_session(self, remote: Endpoint,
                          timeout: Optional[float] = None) -> DtlsSession:
        if self.role != "client":
            raise NotClient(self.role)
        if not self._tags:
            raise NoCredentials()
        if len(self._sessions) >= self.max_sessions:
            raise SessionTableFull(self.max_sessions)
        tag, ctype, cred = self._client_credential()
        psk = cred.secret.read()
        machine = self._backend.make_client(
            cred.identity, psk, self._rng, self._retx, (tag, ctype))
        self._machines[remote] = machine
        try:
            now = self._udp.now()
            deadline = None if timeout is None else now + timeout
            for dgram in machine.start(now):
                self._udp.send(remote, dgram)
            while not machine.done:
                if machine.failed is not None:
                    self._raise_failed(machine.failed)
                now = self._udp.now()
                if deadline is not None and now >= deadline:
                    raise Timeout()
                wake = machine.next_timeout
                if deadline is not None:
                    wake = deadline if wake is None else min(wake, deadline)
                self._wait_for_input(wake)
                for dgram in machine.poll(self._udp.now()):
                    self._udp.send(remote, dgram)
        finally:
            self._machines.pop(remote, None)
        session = DtlsSession(remote, machine.crypto, machine.next_send_seq,
                              machine.recv_window, machine.credential_used)
        self._sessions[remote] = session
        return session

    @staticmethod
    def _raise_failed(reason: FailReason):
        if reason is FailReason.TIMEOUT:
            raise Timeout()
        raise HandshakeFailed(reason)

    # -- data path ---------------------------------------------------------

    def send(self, session: DtlsSession, data: bytes) -> int:
        # deliberately branch-free: a closed session carries a crypto object
        # that raises SessionClosed, and an oversized record fails the UDP
        # payload cap (2048 B) at exactly max_payload() + record overhead
        seq = session.next_send_seq
        session.next_send_seq = seq + 1
        return self._udp.send(
            session.remote,
            session.crypto.protect(session.epoch, seq, data))

    def max_payload(self) -> int:
        return self._max_payload

    def recv(self, timeout: Optional[float] = None
             ) -> Tuple[DtlsSession, bytes]:
        if self._clock is not None:
            return self._recv_sim(timeout)
        return self._recv_loopback(timeout)

    def _recv_sim(self, timeout):
        clock = self._clock
        deadline = None if timeout is None else clock.now + timeout
        while not self._app_queue:
            nxt = clock.peek()
            if nxt is None or (deadline is not None and nxt > deadline):
                if deadline is not None:
                    clock.advance_until(deadline)
                raise Timeout()
            clock.step()
        return self._app_queue.popleft()

    def _recv_loopback(self, timeout):
        import time as _time
        deadline = None if timeout is None else _time.monotonic() + timeout
        while True:
            if self._app_queue:
                return self._app_queue.popleft()
            now = _time.monotonic()
            if deadline is not None and now >= deadline:
                raise Timeout()
            wake = self._earliest_timer()
            if deadline is not None:
                wake = deadline if wake is None else min(wake, deadline)
            slice_ = None if wake is None else max(0.0, wake - now)
            try:
                src, data = self._udp._recv_raw(timeout=slice_)
            except Timeout:
                pass
            else:
                self._process_datagram(src, data)
            self._service_timers()

    def close_session(self, session: DtlsSession):
        if not session.closed:
            try:
                seq = session.next_send_seq
                session.next_send_seq = seq + 1
                self._udp.send(session.remote, session.crypto.protect(
                    session.epoch, seq, ALERT_CLOSE_NOTIFY, ctype=CT_ALERT))
            except (SockError, RecordError):
                pass        # close-notify is best effort
            session.closed = True
            session.crypto = _CLOSED
        self._sessions.pop(session.remote, None)
        self._machines.pop(session.remote, None)
        self._timer_marks.pop(session.remote, None)

    def destroy(self):
        for session in list(self._sessions.values()):
            self.close_session(session)
        self._machines.clear()
        self._timer_marks.clear()
        self._server_ready = False
        self._udp.deliver_hook = None
        self._udp.owner = None
        self._udp.close()

    # -- internals ---------------------------------------------------------

    def _client_credential(self):
        for tag, ctype in self._tags:
            if ctype is CredentialType.PSK:
                try:
                    return tag, ctype, self.registry.get(tag, ctype)
                except NotFound:
                    continue
        raise NoCredentials("no resolvable PSK tag")

    def _lookup_identity(self, identity: bytes):
        for tag, ctype in self._tags:
            if ctype is not CredentialType.PSK:
                continue
            try:
                cred = self.registry.get(tag, ctype)
            except NotFound:
                continue
            if cred.identity == identity:
                return cred.secret.read(), (tag, ctype)
        return None

    def _wait_for_input(self, wake: Optional[float]):
        """Block until something arrived or ``wake`` passed."""
        if self._clock is not None:
            clock = self._clock
            nxt = clock.peek()
            if nxt is not None and (wake is None or nxt <= wake):
                clock.step()
            elif wake is not None:
                clock.advance_until(wake)
            else:
                raise Timeout("idle simulation with no pending timers")
            return
        import time as _time
        slice_ = None if wake is None else max(0.0, wake - _time.monotonic())
        try:
            src, data = self._udp._recv_raw(timeout=slice_)
        except Timeout:
            return
        self._process_datagram(src, data)

    def _on_datagram(self, src: Endpoint, data: bytes):
        self._process_datagram(src, data)
        self._schedule_timers()

    def _process_datagram(self, src: Endpoint, data: bytes):
        try:
            ctype, epoch, _seq, _length = parse_header(data)
        except DecodeError:
            self.dropped += 1
            return
        session = self._sessions.get(src)
        if epoch >= 1 and ctype in (CT_APPDATA, CT_ALERT) and session is not None:
            self._process_app_records(session, data)
            return
        self._process_handshake(src, data)

    def _process_app_records(self, session: DtlsSession, data: bytes):
        try:
            raw_records = list(iter_raw_records(data))
        except DecodeError:
            self.dropped += 1
            return
        for raw in raw_records:
            try:
                ctype, _epoch, _seq, plaintext = session.crypto.unprotect(
                    raw, session.recv_window)
            except (AuthFailed, ReplayDetected, DecodeError):
                self.dropped += 1
                continue
            if ctype == CT_ALERT:
                if plaintext == ALERT_CLOSE_NOTIFY:
                    session.closed = True
                    session.crypto = _CLOSED
                    self._sessions.pop(session.remote, None)
                continue
            if ctype == CT_APPDATA:
                self._app_queue.append((session, plaintext))

    def _process_handshake(self, src: Endpoint, data: bytes):
        now = self._udp.now()
        machine = self._machines.get(src)
        if machine is not None:
            for dgram in machine.handle_datagram(data, now):
                self._udp.send(src, dgram)
            if machine.failed is not None and machine.role == "server":
                self._machines.pop(src, None)
                self._timer_marks.pop(src, None)
            elif machine.done and machine.role == "server" \
                    and src not in self._sessions:
                self._promote(src, machine)
            return
        if self.role == "server" and self._server_ready:
            # a finished machine and its session share one endpoint; count
            # distinct peers against the table limit
            peers = set(self._sessions) | set(self._machines)
            if len(peers) >= self.max_sessions:
                self.dropped += 1       # table full: initiator will time out
                return
            peer_key = repr(src).encode()
            outs, machine = self._listener.handle_datagram(data, peer_key, now)
            for dgram in outs:
                self._udp.send(src, dgram)
            if machine is not None:
                self._machines[src] = machine
                if machine.done:
                    self._promote(src, machine)
            return
        self.dropped += 1       # not ready / unexpected: silently dropped

    def _promote(self, src: Endpoint, machine):
        self._sessions[src] = DtlsSession(
            src, machine.crypto, machine.next_send_seq,
            machine.recv_window, machine.credential_used)
        self._timer_marks.pop(src, None)

    # server-side flight retransmission timers (sim mode uses clock events,
    # loopback mode services them between recv slices)

    def _earliest_timer(self):
        times = [m.next_timeout for m in self._machines.values()
                 if m.next_timeout is not None and not m.done
                 and m.failed is None]
        return min(times) if times else None

    def _service_timers(self):
        now = self._udp.now()
        for src, machine in list(self._machines.items()):
            if machine.done or machine.failed is not None:
                continue
            for dgram in machine.poll(now):
                self._udp.send(src, dgram)
            if machine.failed is not None:
                self._machines.pop(src, None)
                self._timer_marks.pop(src, None)

    def _schedule_timers(self):
        if self._clock is None or self.role != "server":
            return
        for src, machine in list(self._machines.items()):
            nt = machine.next_timeout
            if nt is None or machine.done or machine.failed is not None:
                continue
            if self._timer_marks.get(src) != nt:
                self._timer_marks[src] = nt
                self._clock.call_at(nt, self._timer_fire, src, nt)

    def _timer_fire(self, src: Endpoint, expected: float):
        machine = self._machines.get(src)
        if machine is None or self._timer_marks.get(src) != expected:
            return
        for dgram in machine.poll(self._udp.now()):
            self._udp.send(src, dgram)
        if machine.failed is not None:
            self._machines.pop(src, None)
            self._timer_marks.pop(src, None)
            return
        self._schedule_timers()
