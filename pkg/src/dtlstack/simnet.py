"""Assembly of simulated nodes.

Each node owns a three-layer stack: a link layer doing fragmentation and
radio access, a thin network layer, and a UDP layer demultiplexing datagrams
to bound sockets.  All nodes share one :class:`~dtlstack.linksim.LinkSim`
medium and one :class:`~dtlstack.linksim.SimClock`.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, replace
from typing import Callable, Optional

from . import netcore
from .linksim import (Frame, LinkConfig, LinkSim, Reassembler, SimClock,
                      fragment_datagram)

# src node, src port, dst node, dst port
DGRAM_HEADER = struct.Struct("!HHHH")


@dataclass
class Datagram:
    src_node: int
    src_port: int
    dst_node: int
    dst_port: int
    payload: bytes

    def encode(self) -> bytes:
        return DGRAM_HEADER.pack(self.src_node, self.src_port,
                                 self.dst_node, self.dst_port) + self.payload

    @classmethod
    def decode(cls, raw: bytes) -> "Datagram":
        if len(raw) < DGRAM_HEADER.size:
            raise ValueError("short datagram")
        fields = DGRAM_HEADER.unpack_from(raw)
        return cls(*fields, payload=raw[DGRAM_HEADER.size:])


class LinkLayer(netcore.Layer):
    """Bottom layer: fragments outgoing datagrams, reassembles incoming."""

    def __init__(self, node_id: int, link: LinkSim, clock: SimClock,
                 name: str = "link"):
        super().__init__(name)
        self.node_id = node_id
        self.link = link
        self.clock = clock
        self.reasm = Reassembler()
        self._tags = itertools.count(1)

    def handle_snd(self, dgram: Datagram):
        raw = dgram.encode()
        tag = next(self._tags) & 0xFFFF
        for frame in fragment_datagram(raw, self.link.cfg, src=self.node_id,
                                       dst=dgram.dst_node, tag=tag):
            self.link.transmit(frame)

    def deliver(self, frame: Frame):
        """Entry point for the link; runs inside a clock event."""
        for _src, raw in self.reasm.feed(frame, self.clock.now):
            self.send_up(Datagram.decode(raw))
        self.stack.run_until_idle()

    def handle_get(self, key: str):
        cfg = self.link.cfg
        if key == "MTU":
            return cfg.link_mtu
        if key == "LOSS_RATE":
            return cfg.loss_rate
        if key == "LATENCY":
            return cfg.latency
        if key == "ADDRESS":
            return self.node_id
        raise netcore.UnknownOption(key)

    def handle_set(self, key: str, value):
        cfg = self.link.cfg
        if key == "MTU":
            cfg.link_mtu = int(value)
        elif key == "LOSS_RATE":
            cfg.loss_rate = float(value)
        elif key == "LATENCY":
            cfg.latency = float(value)
        else:
            raise netcore.UnknownOption(key)
        return value


class NetLayer(netcore.Layer):
    """Pass-through network layer; owns the node address option."""

    def __init__(self, node_id: int, name: str = "net"):
        super().__init__(name)
        self.node_id = node_id

    def handle_get(self, key: str):
        if key == "ADDRESS":
            return self.node_id
        raise netcore.UnknownOption(key)


class UdpLayer(netcore.Layer):
    """Demultiplexes received datagrams to bound ports."""

    def __init__(self, name: str = "udp"):
        super().__init__(name)
        self.ports: dict[int, Callable] = {}
        self.unbound_drops = 0

    def handle_rcv(self, dgram: Datagram):
        deliver = self.ports.get(dgram.dst_port)
        if deliver is None:
            self.unbound_drops += 1
            return
        deliver(dgram)


class SimNode:
    """One simulated host: a stack attached to the shared link."""

    def __init__(self, net: "SimNet", node_id: int):
        self.net = net
        self.node_id = node_id
        self.stack = netcore.Stack()
        self.link_layer = LinkLayer(node_id, net.link, net.clock)
        self.link_id = self.stack.register_layer(self.link_layer)
        self.net_layer = NetLayer(node_id)
        self.net_id = self.stack.register_layer(self.net_layer, above=self.link_id)
        self.udp_layer = UdpLayer()
        self.udp_id = self.stack.register_layer(self.udp_layer, above=self.net_id)
        net.link.attach(node_id, self.link_layer.deliver)

    @property
    def clock(self) -> SimClock:
        return self.net.clock

    def send_datagram(self, dgram: Datagram):
        """Hand a datagram to the top of the stack and push it to the link."""
        self.stack.send_msg(self.udp_id, netcore.NetMessage(
            netcore.MsgKind.SND, dgram))
        self.stack.run_until_idle()


class SimNet:
    """A clock, a link, and the nodes attached to it."""

    def __init__(self, cfg: Optional[LinkConfig] = None,
                 seed: Optional[int] = None):
        if cfg is None:
            cfg = LinkConfig()
        if seed is not None:
            cfg = replace(cfg, rng_seed=seed)
        self.cfg = cfg
        self.clock = SimClock()
        self.link = LinkSim(cfg, self.clock)
        self.nodes: dict[int, SimNode] = {}

    def add_node(self, node_id: int) -> SimNode:
        node = SimNode(self, node_id)
        self.nodes[node_id] = node
        return node

    def run(self):
        self.clock.run_until_idle()
