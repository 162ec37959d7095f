"""Handshake machines driven directly (no sockets): flights, cookies,
retransmission, key agreement."""

import random

import pytest

from dtlstack.backend.base import FailReason, RetxConfig
from dtlstack.backend.minidtls import (COOKIE_LEN, MSG_CLIENT_HELLO,
                                       MSG_HELLO_VERIFY, ClientMachine,
                                       MiniDtlsBackend, MiniDtlsListener,
                                       decode_hs, encode_hs, make_cookie)
from dtlstack.backend.nullsec import (HELLO, HELLO_ACK, NullClientMachine,
                                      NullSecBackend)
from dtlstack.backend.records import (CT_HANDSHAKE, DecodeError, iter_records,
                                      plain_record)

IDENTITY = b"Client_identity"
PSK = b"\x01" * 16
PEER = b"peer-1"
RETX = RetxConfig(initial=1.0, cap=60.0, max_retx=7)


def lookup(identity):
    if identity == IDENTITY:
        return PSK, (1, "psk")
    return None


def run_lossfree(backend, loss=None, seed=0):
    """Drive client machine against listener/server; returns both machines
    and the datagram log [(direction, datagram)]."""
    rng = random.Random(seed)
    drop = loss if loss is not None else (lambda d: False)
    client = backend.make_client(IDENTITY, PSK, random.Random(seed + 1), RETX)
    listener = backend.make_listener(lookup, random.Random(seed + 2), RETX)
    server = None
    now = 0.0
    log = []
    to_server = list(client.start(now))
    for _ in range(200):
        if client.done and server is not None and server.done:
            break
        to_client = []
        for dgram in to_server:
            log.append(("c2s", dgram))
            if drop(dgram):
                continue
            if server is None:
                outs, server = listener.handle_datagram(dgram, PEER, now)
                to_client.extend(outs)
            else:
                to_client.extend(server.handle_datagram(dgram, now))
        to_server = []
        for dgram in to_client:
            log.append(("s2c", dgram))
            if drop(dgram):
                continue
            to_server.extend(client.handle_datagram(dgram, now))
        if not to_server and not (client.done and server and server.done):
            now += 1.0
            to_server.extend(client.poll(now))
            if server is not None:
                for dgram in server.poll(now):
                    log.append(("s2c", dgram))
                    if not drop(dgram):
                        to_server.extend(client.handle_datagram(dgram, now))
        if client.failed is not None:
            break
    return client, server, log


def test_minidtls_lossfree_key_agreement():
    client, server, _ = run_lossfree(MiniDtlsBackend())
    assert client.done and server.done
    assert client.keys == server.keys
    assert client.keys.master_secret != b"\x00" * 48
    assert client.credential_used is None       # none passed to make_client
    assert server.credential_used == (1, "psk")


def test_minidtls_lossfree_datagram_count():
    # 3 round trips: CH, HVR, CH(cookie), SH+SHD, CKE+CCS+FIN, CCS+FIN
    _, _, log = run_lossfree(MiniDtlsBackend())
    assert len(log) == 6
    assert [d for d, _ in log] == ["c2s", "s2c", "c2s", "s2c", "c2s", "s2c"]


def test_nullsec_lossfree_one_round_trip():
    client, server, log = run_lossfree(NullSecBackend())
    assert client.done and server.done
    assert len(log) == 2


def test_sessions_start_with_seeded_state():
    client, server, _ = run_lossfree(MiniDtlsBackend())
    for machine in (client, server):
        assert machine.next_send_seq == 1       # seq 0 spent on Finished
        assert machine.recv_window is not None
        assert not machine.recv_window.check_and_update((1 << 48) | 0)


def test_listener_is_stateless_before_cookie():
    listener = MiniDtlsListener(lookup, random.Random(0), RETX)
    client = ClientMachine(IDENTITY, PSK, random.Random(1), RETX)
    hello = client.start(0.0)[0]
    outs, machine = listener.handle_datagram(hello, PEER, 0.0)
    assert machine is None                      # no per-client state allocated
    assert len(outs) == 1
    _, _, _, body = next(iter_records(outs[0]))
    msg_type, mbody = decode_hs(body)
    assert msg_type == MSG_HELLO_VERIFY
    assert mbody[0] == COOKIE_LEN


def test_wrong_cookie_gets_another_hvr_and_no_state():
    listener = MiniDtlsListener(lookup, random.Random(0), RETX)
    random_32 = random.Random(2).randbytes(32)
    bogus = encode_hs(MSG_CLIENT_HELLO,
                      random_32 + bytes([COOKIE_LEN]) + b"\x00" * COOKIE_LEN)
    outs, machine = listener.handle_datagram(
        plain_record(CT_HANDSHAKE, 0, bogus), PEER, 0.0)
    assert machine is None
    assert len(outs) == 1


def test_cookie_is_stateless_hmac():
    secret = b"s" * 16
    cr = b"\x07" * 32
    assert make_cookie(secret, PEER, cr) == make_cookie(secret, PEER, cr)
    assert make_cookie(secret, b"other", cr) != make_cookie(secret, PEER, cr)
    assert len(make_cookie(secret, PEER, cr)) == COOKIE_LEN


def test_wrong_psk_fails_auth():
    backend = MiniDtlsBackend()
    client = backend.make_client(IDENTITY, b"\x02" * 16, random.Random(1), RETX)
    listener = backend.make_listener(lookup, random.Random(2), RETX)
    server = None
    to_server = client.start(0.0)
    for _ in range(20):
        to_client = []
        for dgram in to_server:
            if server is None:
                outs, server = listener.handle_datagram(dgram, PEER, 0.0)
                to_client.extend(outs)
            else:
                to_client.extend(server.handle_datagram(dgram, 0.0))
        to_server = []
        for dgram in to_client:
            to_server.extend(client.handle_datagram(dgram, 0.0))
        if client.failed or (server is not None and server.failed):
            break
    assert server.failed is FailReason.AUTH     # client Finished won't verify
    assert not client.done


def test_unknown_identity_fails():
    backend = MiniDtlsBackend()
    client = backend.make_client(b"stranger", PSK, random.Random(1), RETX)
    listener = backend.make_listener(lookup, random.Random(2), RETX)
    server = None
    to_server = client.start(0.0)
    for _ in range(20):
        to_client = []
        for dgram in to_server:
            if server is None:
                outs, server = listener.handle_datagram(dgram, PEER, 0.0)
                to_client.extend(outs)
            else:
                to_client.extend(server.handle_datagram(dgram, 0.0))
        to_server = []
        for dgram in to_client:
            to_server.extend(client.handle_datagram(dgram, 0.0))
        if (server is not None and server.failed) or client.failed:
            break
    assert server.failed is FailReason.UNKNOWN_PSK_IDENTITY
    assert client.failed is FailReason.AUTH     # alert received


def test_duplicate_flight_never_advances_peer():
    backend = MiniDtlsBackend()
    client, server, log = run_lossfree(backend)
    # replay every client datagram against the finished server
    for direction, dgram in log:
        if direction != "c2s":
            continue
        outs = server.handle_datagram(dgram, 99.0)
        assert server.done and server.failed is None
        for out in outs:        # only resends of the final flight
            assert out == server.last_flight[0]


def test_retransmission_backoff_doubles_and_caps():
    client = ClientMachine(IDENTITY, PSK, random.Random(1),
                           RetxConfig(initial=1.0, cap=4.0, max_retx=7))
    flight = client.start(0.0)
    now, gaps = 0.0, []
    prev = 0.0
    for _ in range(7):
        now = client.next_timeout
        out = client.poll(now)
        assert out == flight
        gaps.append(now - prev)
        prev = now
    assert gaps == [1.0, 2.0, 4.0, 4.0, 4.0, 4.0, 4.0]   # doubling, capped
    assert client.poll(client.next_timeout) == []
    assert client.failed is FailReason.TIMEOUT


def test_poll_before_timeout_is_quiet():
    client = ClientMachine(IDENTITY, PSK, random.Random(1), RETX)
    client.start(5.0)
    assert client.poll(5.5) == []
    assert client.retx_count == 0


def test_handshake_message_size_cap():
    with pytest.raises(DecodeError):
        encode_hs(MSG_CLIENT_HELLO, bytes(512))
    with pytest.raises(DecodeError):
        decode_hs(b"\x01")


def test_nullsec_duplicate_hello_reacked():
    listener = NullSecBackend().make_listener(None, None, RETX)
    hello = plain_record(CT_HANDSHAKE, 0, HELLO)
    outs, machine = listener.handle_datagram(hello, PEER, 0.0)
    assert machine.done
    again = machine.handle_datagram(hello, 1.0)
    assert again == outs == [plain_record(CT_HANDSHAKE, 0, HELLO_ACK)]


@pytest.mark.parametrize("backend_cls", [MiniDtlsBackend, NullSecBackend])
def test_handshake_survives_10pct_loss_machine_level(backend_cls):
    ok = 0
    for seed in range(30):
        rng = random.Random(1000 + seed)
        client, server, _ = run_lossfree(
            backend_cls(), loss=lambda d: rng.random() < 0.1, seed=seed)
        if client.done and server is not None and server.done:
            ok += 1
    assert ok >= 28
