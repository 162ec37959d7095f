"""Layer-composition core: registration, routing, options, inboxes."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtlstack.netcore import (Ack, AckTimeout, DuplicateName, Layer, MsgKind,
                              NetMessage, NoNeighbor, OptStatus, Stack,
                              UnknownNeighbor, UnknownOption)


class Recorder(Layer):
    """Forwards packets and keeps a log of what it handled."""

    def __init__(self, name):
        super().__init__(name)
        self.seen = []

    def handle_snd(self, packet):
        self.seen.append(("snd", packet))
        if self.stack._layers[0] is not self:
            self.send_down(packet)

    def handle_rcv(self, packet):
        self.seen.append(("rcv", packet))
        if self.stack._layers[-1] is not self:
            self.send_up(packet)


class OptionLayer(Layer):
    def __init__(self, name):
        super().__init__(name)
        self.options = {"MTU": 127}

    def handle_snd(self, packet):
        pass                        # bottom-layer sink

    def handle_get(self, key):
        try:
            return self.options[key]
        except KeyError:
            raise UnknownOption(key) from None

    def handle_set(self, key, value):
        if key not in self.options:
            raise UnknownOption(key)
        self.options[key] = value
        return value


def chain(*names):
    stack = Stack()
    ids = []
    prev = None
    for name in names:
        lid = stack.register_layer(Recorder(name), above=prev)
        ids.append(lid)
        prev = lid
    return stack, ids


# -- registration ------------------------------------------------------------


def test_register_builds_chain():
    stack, ids = chain("link", "ip", "udp")
    assert [l.name for l in stack._layers] == ["link", "ip", "udp"]
    assert stack.bottom().name == "link"
    assert stack.top().name == "udp"
    assert len({lid.id for lid in ids}) == 3


def test_register_duplicate_name():
    stack, ids = chain("link", "udp")
    with pytest.raises(DuplicateName):
        stack.register_layer(Recorder("udp"), above=ids[0])


def test_register_unknown_neighbor():
    stack, ids = chain("link")
    ghost = type(ids[0])(id=999, name="ghost")
    with pytest.raises(UnknownNeighbor):
        stack.register_layer(Recorder("udp"), above=ghost)


def test_register_splices_between_layers():
    stack, ids = chain("link", "udp")
    stack.register_layer(Recorder("ip"), above=ids[0])
    assert [l.name for l in stack._layers] == ["link", "ip", "udp"]


# -- routing -----------------------------------------------------------------


def test_snd_traverses_three_hops_down():
    stack, ids = chain("link", "sixlowpan", "ip", "udp")
    stack.send_msg(ids[3], NetMessage(MsgKind.SND, b"pkt"))
    stack.run_until_idle()
    hops = [(name, kind) for name, kind in stack.trace if kind is MsgKind.SND]
    assert hops == [("ip", MsgKind.SND), ("sixlowpan", MsgKind.SND),
                    ("link", MsgKind.SND)]
    assert stack.bottom().seen == [("snd", b"pkt")]


def test_rcv_travels_up():
    stack, ids = chain("link", "ip", "udp")
    stack.send_msg(ids[0], NetMessage(MsgKind.RCV, b"pkt"))
    stack.run_until_idle()
    assert stack.top().seen == [("rcv", b"pkt")]


def test_snd_from_bottom_is_no_neighbor():
    stack, ids = chain("link", "udp")
    with pytest.raises(NoNeighbor):
        stack.send_msg(ids[0], NetMessage(MsgKind.SND, b"pkt"))


def test_rcv_from_top_is_no_neighbor():
    stack, ids = chain("link", "udp")
    with pytest.raises(NoNeighbor):
        stack.send_msg(ids[1], NetMessage(MsgKind.RCV, b"pkt"))


def test_messages_only_reach_adjacent_layers():
    stack, ids = chain("link", "ip", "udp")
    stack.send_msg(ids[2], NetMessage(MsgKind.SND, b"p"))
    stack.run_until_idle()
    # the middle layer saw it; nothing skipped a hop
    assert stack.layer(ids[1]).seen == [("snd", b"p")]


def test_fifo_between_adjacent_layers():
    stack, ids = chain("link", "udp")
    for i in range(10):
        stack.send_msg(ids[1], NetMessage(MsgKind.SND, i))
    stack.run_until_idle()
    assert stack.bottom().seen == [("snd", i) for i in range(10)]


# -- options -----------------------------------------------------------------


def test_get_known_option():
    stack = Stack()
    lid = stack.register_layer(OptionLayer("link"))
    ack = stack.get_option(lid, "MTU")
    assert ack == Ack("MTU", OptStatus.OK, 127)


def test_set_then_get_reads_the_write():
    stack = Stack()
    lid = stack.register_layer(OptionLayer("link"))
    assert stack.set_option(lid, "MTU", 100).status is OptStatus.OK
    assert stack.get_option(lid, "MTU").value == 100


def test_unknown_key_status():
    stack = Stack()
    lid = stack.register_layer(OptionLayer("link"))
    assert stack.get_option(lid, "BOGUS").status is OptStatus.UNKNOWN_KEY
    assert stack.set_option(lid, "BOGUS", 1).status is OptStatus.UNKNOWN_KEY


def test_handler_exception_becomes_error_status():
    class Exploder(Layer):
        def handle_get(self, key):
            raise RuntimeError("boom")

    stack = Stack()
    lid = stack.register_layer(Exploder("bad"))
    assert stack.get_option(lid, "MTU").status is OptStatus.ERROR


def test_option_request_to_full_inbox_times_out():
    stack = Stack()
    layer = OptionLayer("link")
    lid = stack.register_layer(layer)
    layer.inbox_limit = 0           # every enqueue drops
    with pytest.raises(AckTimeout):
        stack.get_option(lid, "MTU")


# -- inbox bounds ------------------------------------------------------------


def test_inbox_overflow_drops_and_counts():
    stack, ids = chain("link", "udp")
    bottom = stack.bottom()
    bottom.inbox_limit = 4
    for i in range(10):
        stack.send_msg(ids[1], NetMessage(MsgKind.SND, i))
    assert bottom.dropped == 6
    stack.run_until_idle()
    assert [p for _, p in bottom.seen] == [0, 1, 2, 3]


@given(st.lists(st.sampled_from(["get", "set", "snd"]), max_size=40),
       st.randoms(use_true_random=False))
@settings(max_examples=100, deadline=None)
def test_every_option_request_gets_exactly_one_ack(ops, rnd):
    """Randomized interleavings: each GET/SET yields exactly one Ack."""
    stack = Stack()
    link = OptionLayer("link")
    link_id = stack.register_layer(link)
    top_id = stack.register_layer(Recorder("udp"), above=link_id)
    acks = 0
    for op in ops:
        if op == "snd":
            stack.send_msg(top_id, NetMessage(MsgKind.SND, b"x"))
            if rnd.random() < 0.5:
                stack.run_until_idle()
        else:
            target = link_id
            if op == "get":
                ack = stack.get_option(target, "MTU")
            else:
                ack = stack.set_option(target, "MTU", 127)
            assert isinstance(ack, Ack) and ack.status is OptStatus.OK
            acks += 1
    stack.run_until_idle()
    assert not stack._pending_acks     # nothing orphaned or duplicated
    assert acks == sum(1 for op in ops if op != "snd")
