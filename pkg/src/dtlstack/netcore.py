"""Layer-composition core.

A protocol stack is a vertical chain of layers.  Each layer is an
independently scheduled actor with a private bounded inbox; layers only ever
talk to their direct neighbors through typed messages:

* ``SND`` / ``RCV`` are asynchronous and carry a packet down / up the chain.
* ``GET`` / ``SET`` are synchronous option requests; each one is answered by
  exactly one ``ACK``.

Scheduling is cooperative and deterministic: callers drive the stack with
:meth:`Stack.run_until_idle`, which processes inboxes in registration order
until no messages remain.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field
from enum import Enum, auto
from typing import Any, NamedTuple, Optional


class StackError(Exception):
    pass


class DuplicateName(StackError):
    pass


class UnknownNeighbor(StackError):
    pass


class NoNeighbor(StackError):
    pass


class AckTimeout(StackError):
    pass


class MsgKind(Enum):
    SND = auto()
    RCV = auto()
    GET = auto()
    SET = auto()
    ACK = auto()


class OptStatus(Enum):
    OK = 0
    UNKNOWN_KEY = 1
    ERROR = 2


class LayerId(NamedTuple):
    id: int
    name: str


@dataclass
class OptionRequest:
    key: str
    value: Any = None


@dataclass
class Ack:
    key: str
    status: OptStatus
    value: Any = None


# reply_to == CALLER marks an option round-trip issued from outside the stack
CALLER = -1


@dataclass
class NetMessage:
    kind: MsgKind
    payload: Any
    reply_to: Optional[int] = None
    req_id: Optional[int] = None


class UnknownOption(KeyError):
    """Raised by a layer's get/set handler for keys it does not implement."""


class Layer:
    """Base class for stack layers.

    Subclasses override :meth:`handle_snd` / :meth:`handle_rcv` for packet
    processing and :meth:`handle_get` / :meth:`handle_set` for options.  The
    defaults forward packets unchanged and know no option keys.
    """

    def __init__(self, name: str, inbox_limit: int = 64):
        self.name = name
        self.layer_id: Optional[LayerId] = None
        self.stack: Optional["Stack"] = None
        self.inbox: deque = deque()
        self.inbox_limit = inbox_limit
        self.dropped = 0

    # -- overridables ------------------------------------------------------

    def handle_snd(self, packet):
        self.send_down(packet)

    def handle_rcv(self, packet):
        self.send_up(packet)

    def handle_get(self, key: str):
        raise UnknownOption(key)

    def handle_set(self, key: str, value):
        raise UnknownOption(key)

    # -- helpers -----------------------------------------------------------

    def send_down(self, packet):
        self.stack.send_msg(self.layer_id, NetMessage(MsgKind.SND, packet))

    def send_up(self, packet):
        self.stack.send_msg(self.layer_id, NetMessage(MsgKind.RCV, packet))


class Stack:
    """A chain of layers, bottom first."""

    def __init__(self):
        self._layers: list[Layer] = []
        self._by_id: dict[int, Layer] = {}
        self._ids = itertools.count(1)
        self._req_ids = itertools.count(1)
        self._pending_acks: dict[int, Ack] = {}
        self._pumping = False
        # (layer name, MsgKind) per dispatched message, for routing assertions
        self.trace: list[tuple[str, MsgKind]] = []

    # -- topology ----------------------------------------------------------

    def register_layer(self, layer: Layer, above: Optional[LayerId] = None) -> LayerId:
        if any(l.name == layer.name for l in self._layers):
            raise DuplicateName(layer.name)
        if above is None:
            if self._layers:
                raise UnknownNeighbor(
                    "stack is non-empty; pass above= to place the new layer")
            index = 0
        else:
            if above.id not in self._by_id:
                raise UnknownNeighbor(str(above))
            index = self._layers.index(self._by_id[above.id]) + 1
        lid = LayerId(next(self._ids), layer.name)
        layer.layer_id = lid
        layer.stack = self
        self._layers.insert(index, layer)
        self._by_id[lid.id] = layer
        return lid

    def layer(self, lid: LayerId) -> Layer:
        return self._by_id[lid.id]

    def _index(self, lid: LayerId) -> int:
        return self._layers.index(self._by_id[lid.id])

    def top(self) -> Layer:
        return self._layers[-1]

    def bottom(self) -> Layer:
        return self._layers[0]

    # -- messaging ---------------------------------------------------------

    def send_msg(self, from_id: LayerId, msg: NetMessage):
        if from_id.id not in self._by_id:
            raise UnknownNeighbor(str(from_id))
        i = self._index(from_id)
        if msg.kind is MsgKind.SND:
            if i == 0:
                raise NoNeighbor("no layer below %s" % from_id.name)
            target = self._layers[i - 1]
        elif msg.kind is MsgKind.RCV:
            if i == len(self._layers) - 1:
                raise NoNeighbor("no layer above %s" % from_id.name)
            target = self._layers[i + 1]
        else:
            raise ValueError("use get_option/set_option for %s" % msg.kind)
        self._enqueue(target, msg)

    def _enqueue(self, target: Layer, msg: NetMessage):
        if len(target.inbox) >= target.inbox_limit:
            target.dropped += 1
            return
        target.inbox.append(msg)

    def get_option(self, target: LayerId, key: str) -> Ack:
        return self._option_roundtrip(target, MsgKind.GET, OptionRequest(key))

    def set_option(self, target: LayerId, key: str, value) -> Ack:
        return self._option_roundtrip(
            target, MsgKind.SET, OptionRequest(key, value))

    def _option_roundtrip(self, target: LayerId, kind: MsgKind,
                          req: OptionRequest) -> Ack:
        if target.id not in self._by_id:
            raise UnknownNeighbor(str(target))
        req_id = next(self._req_ids)
        msg = NetMessage(kind, req, reply_to=CALLER, req_id=req_id)
        self._enqueue(self._by_id[target.id], msg)
        self.run_until_idle()
        ack = self._pending_acks.pop(req_id, None)
        if ack is None:
            # the request was dropped (full inbox) or never answered
            raise AckTimeout(req.key)
        return ack

    # -- scheduling --------------------------------------------------------

    def run_until_idle(self):
        """Dispatch queued messages until every inbox is empty.

        Reentrant calls (a handler sending while a pump is active) return
        immediately; the outer pump drains whatever they enqueued.
        """
        if self._pumping:
            return
        self._pumping = True
        try:
            progress = True
            while progress:
                progress = False
                for layer in list(self._layers):
                    while layer.inbox:
                        self._dispatch(layer, layer.inbox.popleft())
                        progress = True
        finally:
            self._pumping = False

    def _dispatch(self, layer: Layer, msg: NetMessage):
        self.trace.append((layer.name, msg.kind))
        if msg.kind is MsgKind.SND:
            layer.handle_snd(msg.payload)
        elif msg.kind is MsgKind.RCV:
            layer.handle_rcv(msg.payload)
        elif msg.kind in (MsgKind.GET, MsgKind.SET):
            req: OptionRequest = msg.payload
            try:
                if msg.kind is MsgKind.GET:
                    value = layer.handle_get(req.key)
                else:
                    value = layer.handle_set(req.key, req.value)
                ack = Ack(req.key, OptStatus.OK, value)
            except UnknownOption:
                ack = Ack(req.key, OptStatus.UNKNOWN_KEY)
            except Exception:
                ack = Ack(req.key, OptStatus.ERROR)
            self._deliver_ack(msg, ack)
        elif msg.kind is MsgKind.ACK:
            self._pending_acks[msg.req_id] = msg.payload

    def _deliver_ack(self, request: NetMessage, ack: Ack):
        if request.reply_to == CALLER:
            self._pending_acks[request.req_id] = ack
        elif request.reply_to is not None:
            target = self._by_id.get(request.reply_to)
            if target is not None:
                self._enqueue(target, NetMessage(
                    MsgKind.ACK, ack, req_id=request.req_id))
