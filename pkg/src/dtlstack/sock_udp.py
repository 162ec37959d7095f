"""Plain datagram sockets.

One API, two transports:

* ``sim`` — bound to a :class:`~dtlstack.simnet.SimNode`; datagrams travel
  the simulated stack and link.
* ``loopback`` — a real UDP socket on 127.0.0.1, for the echo demos.

Higher layers (the secure socket included) never look at the transport.
"""

from __future__ import annotations

import errno
import socket as _socket
import time
from collections import deque
from dataclasses import dataclass
from typing import Optional, Tuple, Union

from .simnet import Datagram, SimNode

MAX_PAYLOAD = 2048
RECV_QUEUE_DEPTH = 8


class SockError(Exception):
    pass


class AddrInUse(SockError):
    pass


class InvalidArgument(SockError):
    pass


class PayloadTooLarge(SockError):
    pass


class Timeout(SockError):
    pass


class UdpSockInUse(SockError):
    pass


@dataclass(frozen=True)
class Endpoint:
    node: Union[int, str]   # node id in sim mode, host address in loopback
    port: int


class UdpSock:
    """A bound datagram socket; create with :meth:`sim` or :meth:`loopback`."""

    def __init__(self):
        self.local: Optional[Endpoint] = None
        self.owner = None        # set by a wrapping secure socket
        self.overflow_drops = 0
        self._queue: deque = deque()
        self._node: Optional[SimNode] = None
        self._sock: Optional[_socket.socket] = None
        self._closed = False
        # sim mode: invoked for each arriving datagram instead of queueing
        self.deliver_hook = None

    # -- constructors ------------------------------------------------------

    @classmethod
    def sim(cls, node: SimNode, port: int) -> "UdpSock":
        if port == 0:
            raise InvalidArgument("port 0 is not bindable")
        self = cls()
        if port in node.udp_layer.ports:
            raise AddrInUse(port)
        node.udp_layer.ports[port] = self._sim_deliver
        self._node = node
        self.local = Endpoint(node.node_id, port)
        return self

    @classmethod
    def loopback(cls, port: int, host: str = "127.0.0.1") -> "UdpSock":
        if port == 0:
            raise InvalidArgument("port 0 is not bindable")
        self = cls()
        sock = _socket.socket(_socket.AF_INET, _socket.SOCK_DGRAM)
        try:
            sock.bind((host, port))
        except OSError as exc:
            sock.close()
            if exc.errno == errno.EADDRINUSE:
                raise AddrInUse(port) from exc
            raise
        self._sock = sock
        self.local = Endpoint(host, port)
        return self

    @property
    def is_sim(self) -> bool:
        return self._node is not None

    def now(self) -> float:
        return self._node.clock.now if self.is_sim else time.monotonic()

    # -- data path ---------------------------------------------------------

    def send(self, remote: Endpoint, data: bytes) -> int:
        if self._closed:
            raise SockError("socket closed")
        if len(data) > MAX_PAYLOAD:
            raise PayloadTooLarge(len(data))
        if self.is_sim:
            self._node.send_datagram(Datagram(
                self.local.node, self.local.port,
                remote.node, remote.port, bytes(data)))
        else:
            self._sock.sendto(data, (remote.node, remote.port))
        return len(data)

    def recv(self, timeout: Optional[float] = None) -> Tuple[Endpoint, bytes]:
        if self.owner is not None:
            raise UdpSockInUse("socket is owned by a secure socket")
        return self._recv_raw(timeout)

    def _recv_raw(self, timeout=None):
        if self._closed:
            raise SockError("socket closed")
        if self.is_sim:
            return self._recv_sim(timeout)
        return self._recv_loopback(timeout)

    def _recv_sim(self, timeout):
        clock = self._node.clock
        deadline = None if timeout is None else clock.now + timeout
        while not self._queue:
            nxt = clock.peek()
            if nxt is None or (deadline is not None and nxt > deadline):
                if deadline is not None:
                    clock.advance_until(deadline)
                raise Timeout()
            clock.step()
        return self._queue.popleft()

    def _recv_loopback(self, timeout):
        self._sock.settimeout(timeout)
        try:
            data, (host, port) = self._sock.recvfrom(65535)
        except _socket.timeout as exc:
            raise Timeout() from exc
        return Endpoint(host, port), data

    def _sim_deliver(self, dgram: Datagram):
        sender = Endpoint(dgram.src_node, dgram.src_port)
        if self.deliver_hook is not None:
            self.deliver_hook(sender, dgram.payload)
            return
        if len(self._queue) >= RECV_QUEUE_DEPTH:
            self.overflow_drops += 1        # newest dropped
            return
        self._queue.append((sender, dgram.payload))

    def close(self):
        if self._closed:
            return
        self._closed = True
        if self.is_sim:
            self._node.udp_layer.ports.pop(self.local.port, None)
        else:
            self._sock.close()
