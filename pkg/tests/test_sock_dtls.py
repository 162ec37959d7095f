"""Secure socket over the simulated stack, parameterized over both backends."""

import random

import pytest

from dtlstack.backend import UnknownBackend
from dtlstack.backend.base import HandshakeFailed, RetxConfig
from dtlstack.backend.records import CT_APPDATA, parse_header
from dtlstack.credman import Credential, CredentialType, Registry, SecretStore
from dtlstack.simnet import DGRAM_HEADER, SimNet
from dtlstack.sock_dtls import (MAX_TAGS, DtlsSock, EmptyTagList, NotClient,
                                NotServer, SessionClosed, SessionTableFull,
                                TooManyTags, UdpSockInUse)
from dtlstack.sock_udp import Endpoint, Timeout, UdpSock

BACKENDS = ["minidtls", "nullsec"]
PSK_TAG = (1, CredentialType.PSK)
SERVER_PORT = 20220


def make_registry(entries=((1, b"Client_identity", b"\x01" * 16),)):
    store = SecretStore()
    registry = Registry()
    for tag, identity, secret in entries:
        registry.add(Credential(tag, CredentialType.PSK, identity,
                                store.put(secret)))
    return registry, store


class Rig:
    """One server and one client node over a loss-free simulated link."""

    def __init__(self, backend, registry=None, loss_rate=0.0, seed=0,
                 retx=None, init_server=True):
        if registry is None:
            registry, self._store = make_registry()
        self.registry = registry
        self.net = SimNet(seed=seed)
        if loss_rate:
            self.net.cfg.loss_rate = loss_rate
        self.server_node = self.net.add_node(1)
        self.client_node = self.net.add_node(2)
        self.server_udp = UdpSock.sim(self.server_node, SERVER_PORT)
        self.client_udp = UdpSock.sim(self.client_node, SERVER_PORT + 1)
        self.server_ep = Endpoint(1, SERVER_PORT)
        self.server = DtlsSock(self.server_udp, backend, "server", registry,
                               rng=random.Random(seed + 1), retx=retx)
        self.server.register_credential_tags([PSK_TAG])
        if init_server:
            self.server.init_server()
        self.client = DtlsSock(self.client_udp, backend, "client", registry,
                               rng=random.Random(seed + 2), retx=retx)
        self.client.register_credential_tags([PSK_TAG])

    def connect(self, timeout=300.0):
        return self.client.establish_session(self.server_ep, timeout=timeout)


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


# -- creation and registration ----------------------------------------------


def test_create_both_roles(backend):
    Rig(backend)


def test_unknown_backend():
    net = SimNet()
    udp = UdpSock.sim(net.add_node(1), 5684)
    registry, _ = make_registry()
    with pytest.raises(UnknownBackend):
        DtlsSock(udp, "tinfoil", "client", registry)


def test_udp_sock_claimed_exclusively(backend):
    rig = Rig(backend)
    with pytest.raises(UdpSockInUse):
        DtlsSock(rig.client_udp, backend, "client", rig.registry)
    with pytest.raises(UdpSockInUse):
        rig.client_udp.recv(timeout=0)      # raw recv blocked while owned


def test_empty_tag_list(backend):
    rig = Rig(backend)
    with pytest.raises(EmptyTagList):
        rig.client.register_credential_tags([])


def test_too_many_tags(backend):
    rig = Rig(backend)
    extra = [(t, CredentialType.PSK) for t in range(2, 2 + MAX_TAGS)]
    with pytest.raises(TooManyTags):
        rig.client.register_credential_tags(extra)


def test_init_server_role_checks(backend):
    rig = Rig(backend)
    with pytest.raises(NotServer):
        rig.client.init_server()
    with pytest.raises(NotClient):
        rig.server.establish_session(rig.server_ep)


def test_hello_before_init_server_times_out(backend):
    rig = Rig(backend, init_server=False,
              retx=RetxConfig(initial=0.5, cap=2.0, max_retx=3))
    with pytest.raises(Timeout):
        rig.connect(timeout=60.0)
    assert rig.server.dropped > 0           # hellos silently discarded


# -- handshake ---------------------------------------------------------------


def test_establish_session(backend):
    rig = Rig(backend)
    session = rig.connect()
    assert session.remote == rig.server_ep
    assert session.credential_used == PSK_TAG
    assert rig.server._sessions      # server promoted its side too


def test_minidtls_takes_three_round_trips():
    rig = Rig("minidtls")
    rig.net.link.trace.clear()
    rig.connect()
    assert len(rig.net.link.trace) == 6     # each flight fits one frame


def test_nullsec_takes_one_round_trip():
    rig = Rig("nullsec")
    rig.net.link.trace.clear()
    rig.connect()
    assert len(rig.net.link.trace) == 2


def test_total_loss_times_out(backend):
    rig = Rig(backend, loss_rate=1.0,
              retx=RetxConfig(initial=0.5, cap=2.0, max_retx=3))
    with pytest.raises(Timeout):
        rig.connect(timeout=120.0)


def test_wrong_psk_fails_handshake():
    rig = Rig("minidtls")
    # same identity but a different key on the server side
    server_reg, _store = make_registry([(1, b"Client_identity", b"\x02" * 16)])
    rig.server.registry = server_reg
    with pytest.raises(HandshakeFailed):
        rig.connect(timeout=60.0)


def test_handshake_at_ten_percent_loss(backend):
    ok = 0
    for seed in range(10):
        rig = Rig(backend, loss_rate=0.1, seed=seed)
        try:
            rig.connect(timeout=600.0)
            ok += 1
        except Timeout:
            pass
    assert ok >= 9


# -- data transfer -----------------------------------------------------------


def test_echo_roundtrip(backend):
    rig = Rig(backend)
    session = rig.connect()
    rig.client.send(session, b"hello")
    srv_session, data = rig.server.recv(timeout=10.0)
    assert data == b"hello"
    assert srv_session.remote == rig.client_udp.local
    rig.server.send(srv_session, data)
    echo_session, echoed = rig.client.recv(timeout=10.0)
    assert echoed == b"hello"
    assert echo_session is session


def test_recv_timeout(backend):
    rig = Rig(backend)
    rig.connect()
    with pytest.raises(Timeout):
        rig.server.recv(timeout=0.05)


def test_wire_datagram_sizes():
    # 25 B payload: +21 record overhead (minidtls) / +13 (nullsec), +8 header
    for backend, expected in (("minidtls", 46 + 8), ("nullsec", 38 + 8)):
        rig = Rig(backend)
        session = rig.connect()
        rig.net.link.trace.clear()
        rig.client.send(session, bytes(25))
        assert [len(e.frame.payload) for e in rig.net.link.trace] == [expected]


def test_max_payload(backend):
    rig = Rig(backend)
    session = rig.connect()
    cap = rig.client.max_payload()
    assert cap == 2048 - rig.client._backend.record_overhead
    rig.client.send(session, bytes(cap))
    assert rig.server.recv(timeout=60.0)[1] == bytes(cap)
    from dtlstack.sock_udp import PayloadTooLarge
    with pytest.raises(PayloadTooLarge):
        rig.client.send(session, bytes(cap + 1))


def test_sequence_numbers_strictly_increase(backend):
    rig = Rig(backend)
    session = rig.connect()
    rig.net.link.trace.clear()
    for i in range(10):
        rig.client.send(session, bytes([i]))
    seqs = []
    for entry in rig.net.link.trace:
        record = entry.frame.payload[DGRAM_HEADER.size:]
        ctype, epoch, seq, _ = parse_header(record)
        assert (ctype, epoch) == (CT_APPDATA, 1)
        seqs.append(seq)
    assert seqs == sorted(seqs)
    assert len(set(seqs)) == len(seqs) == 10


def test_no_plaintext_on_wire_minidtls():
    rig = Rig("minidtls")
    session = rig.connect()
    payload = random.Random(99).randbytes(32)
    rig.net.link.trace.clear()
    rig.client.send(session, payload)
    rig.server.recv(timeout=10.0)
    for entry in rig.net.link.trace:
        assert payload not in entry.frame.payload


def test_replayed_record_dropped_not_surfaced():
    rig = Rig("minidtls")
    session = rig.connect()
    rig.net.link.trace.clear()
    rig.client.send(session, b"once")
    assert rig.server.recv(timeout=10.0)[1] == b"once"
    captured = rig.net.link.trace[0].frame.payload[DGRAM_HEADER.size:]
    dropped_before = rig.server.dropped
    # attacker re-injects the captured record from the same source
    rig.client_udp.send(rig.server_ep, captured)
    with pytest.raises(Timeout):
        rig.server.recv(timeout=1.0)
    assert rig.server.dropped == dropped_before + 1


def test_corrupted_record_dropped():
    rig = Rig("minidtls")
    session = rig.connect()
    record = session.crypto.protect(1, session.next_send_seq, b"data")
    bad = bytearray(record)
    bad[-1] ^= 1
    rig.client_udp.send(rig.server_ep, bytes(bad))
    with pytest.raises(Timeout):
        rig.server.recv(timeout=1.0)
    assert rig.server.dropped >= 1


# -- multiple peers & credential selection -----------------------------------


def test_two_clients_distinct_credentials():
    registry, _store = make_registry([
        (1, b"node-a", b"\x0a" * 16),
        (2, b"node-b", b"\x0b" * 16),
    ])
    net = SimNet(seed=5)
    server_udp = UdpSock.sim(net.add_node(1), SERVER_PORT)
    server = DtlsSock(server_udp, "minidtls", "server", registry,
                      rng=random.Random(1))
    server.register_credential_tags([(1, CredentialType.PSK),
                                     (2, CredentialType.PSK)])
    server.init_server()
    clients = {}
    for node_id, tag in ((2, 1), (3, 2)):
        udp = UdpSock.sim(net.add_node(node_id), SERVER_PORT + node_id)
        sock = DtlsSock(udp, "minidtls", "client", registry,
                        rng=random.Random(10 + node_id))
        sock.register_credential_tags([(tag, CredentialType.PSK)])
        clients[node_id] = (sock, sock.establish_session(
            Endpoint(1, SERVER_PORT), timeout=300.0))
    # the server picked the credential matching each client's identity
    by_remote = {ep.node: s for ep, s in server._sessions.items()}
    assert by_remote[2].credential_used == (1, CredentialType.PSK)
    assert by_remote[3].credential_used == (2, CredentialType.PSK)
    # interleaved traffic stays attributed to the right session
    clients[2][0].send(clients[2][1], b"from a")
    clients[3][0].send(clients[3][1], b"from b")
    got = {}
    for _ in range(2):
        sess, data = server.recv(timeout=10.0)
        got[sess.remote.node] = data
    assert got == {2: b"from a", 3: b"from b"}


# -- lifecycle ---------------------------------------------------------------


def test_close_then_send(backend):
    rig = Rig(backend)
    session = rig.connect()
    rig.client.close_session(session)
    with pytest.raises(SessionClosed):
        rig.client.send(session, b"late")


def test_close_notify_reaches_peer(backend):
    rig = Rig(backend)
    session = rig.connect()
    assert rig.server._sessions
    rig.client.close_session(session)
    rig.net.clock.run_until_idle()
    assert not rig.server._sessions         # peer dropped its side


def test_close_frees_session_slot(backend):
    registry, _store = make_registry()
    net = SimNet(seed=5)
    server_udp = UdpSock.sim(net.add_node(1), SERVER_PORT)
    server = DtlsSock(server_udp, backend, "server", registry,
                      rng=random.Random(1))
    server.register_credential_tags([PSK_TAG])
    server.init_server()
    socks = []
    for node_id in range(2, 6):             # fill all 4 server slots
        udp = UdpSock.sim(net.add_node(node_id), SERVER_PORT + node_id)
        sock = DtlsSock(udp, backend, "client", registry,
                        rng=random.Random(10 + node_id))
        sock.register_credential_tags([PSK_TAG])
        socks.append((sock,
                      sock.establish_session(Endpoint(1, SERVER_PORT),
                                             timeout=300.0)))
    assert len(server._sessions) == 4
    server.close_session(server._sessions[socks[0][0]._udp.local])
    assert len(server._sessions) == 3
    udp = UdpSock.sim(net.add_node(9), SERVER_PORT + 9)
    fifth = DtlsSock(udp, backend, "client", registry,
                     rng=random.Random(77))
    fifth.register_credential_tags([PSK_TAG])
    fifth.establish_session(Endpoint(1, SERVER_PORT), timeout=300.0)
    assert len(server._sessions) == 4


def test_client_session_table_full(backend):
    rig = Rig(backend)
    rig.client.max_sessions = 0
    with pytest.raises(SessionTableFull):
        rig.connect()


def test_destroy_releases_port(backend):
    rig = Rig(backend)
    rig.connect()
    rig.client.destroy()
    UdpSock.sim(rig.client_node, SERVER_PORT + 1)   # port free again


# -- sock_udp parity ---------------------------------------------------------


def _scripted_transcript(send_a, recv_a, send_b, recv_b):
    """Fixed scenario: A sends three payloads, B echoes each."""
    transcript = []
    for i, payload in enumerate([b"alpha", b"", b"gamma" * 20]):
        send_a(payload)
        got = recv_b()
        transcript.append(("b<-a", got))
        send_b(got)
        transcript.append(("a<-b", recv_a()))
    return transcript


def test_transcript_parity_with_sock_udp(backend):
    # plain UDP run
    net = SimNet(seed=11)
    ua = UdpSock.sim(net.add_node(1), 1000)
    ub = UdpSock.sim(net.add_node(2), 2000)
    udp_log = _scripted_transcript(
        lambda p: ua.send(ub.local, p), lambda: ua.recv(timeout=10.0)[1],
        lambda p: ub.send(ua.local, p), lambda: ub.recv(timeout=10.0)[1])

    # same scenario over the secure socket
    rig = Rig(backend)
    session = rig.connect()
    holder = {}

    def srv_recv():
        s, data = rig.server.recv(timeout=10.0)
        holder["s"] = s
        return data

    dtls_log = _scripted_transcript(
        lambda p: rig.client.send(session, p),
        lambda: rig.client.recv(timeout=10.0)[1],
        lambda p: rig.server.send(holder["s"], p),
        srv_recv)
    assert dtls_log == udp_log
