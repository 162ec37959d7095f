"""Command line entry points: benchmark sweep and echo demos."""

from __future__ import annotations

import argparse
import binascii
import random
import sys

from . import bench
from .credman import CredentialType, Registry, SecretStore, load_credentials
from .simnet import SimNet
from .sock_dtls import DtlsSock
from .sock_udp import Endpoint, Timeout, UdpSock

DEFAULT_PORT = 20220
DEFAULT_PAYLOAD = b"hello over dtls"


# ---------------------------------------------------------------------------
# bench


def bench_main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dtls-bench",
        description="Payload sweep over the simulated stack; writes CSV and "
                    "verifies shape/trend properties (exit 2 on violation).")
    parser.add_argument("--min", type=int, default=25)
    parser.add_argument("--max", type=int, default=300)
    parser.add_argument("--step", type=int, default=25)
    parser.add_argument("--reps", type=int, default=5000)
    parser.add_argument("--warmup", type=int, default=100)
    parser.add_argument("--variants", default="udp,minidtls,nullsec",
                        help="comma-separated subset of udp,minidtls,nullsec")
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--loss", type=float, default=0.0)
    parser.add_argument("--out", default="results.csv")
    args = parser.parse_args(argv)

    cfg = bench.SweepConfig(
        payload_min=args.min, payload_max=args.max, payload_step=args.step,
        reps=args.reps, warmup=args.warmup,
        variants=tuple(args.variants.split(",")),
        seed=args.seed, loss_rate=args.loss)
    records = bench.run_sweep(cfg)
    bench.emit_csv(records, args.out)
    print("wrote %d records to %s" % (len(records), args.out))
    problems = bench.check_all(records)
    for p in problems:
        print("PROPERTY VIOLATION: %s" % p, file=sys.stderr)
    return 2 if problems else 0


# ---------------------------------------------------------------------------
# echo demos


def _add_echo_args(parser):
    parser.add_argument("--backend", choices=["minidtls", "nullsec"],
                        default="minidtls")
    parser.add_argument("--creds", default=None,
                        help="credentials file (tag= type= identity= key=)")
    parser.add_argument("--transport", choices=["sim", "loopback"],
                        default="sim")
    parser.add_argument("--port", type=int, default=DEFAULT_PORT)
    parser.add_argument("--payload-hex", default=DEFAULT_PAYLOAD.hex())
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--count", type=int, default=1,
                        help="packets to echo before exiting (loopback server)")


def _load_registry(path):
    store = SecretStore()
    registry = Registry()
    if path:
        load_credentials(path, store, registry)
    else:
        bench.default_credentials(registry, store)
    return registry, store


def _echo_sim(args, out=None) -> int:
    """Both roles in one process over the simulated link."""
    if out is None:
        out = sys.stdout
    payload = binascii.unhexlify(args.payload_hex)
    registry, _store = _load_registry(args.creds)
    net = SimNet(seed=args.port)
    server_node, client_node = net.add_node(1), net.add_node(2)
    server_udp = UdpSock.sim(server_node, args.port)
    client_udp = UdpSock.sim(client_node, args.port + 1)
    tags = [(1, CredentialType.PSK)]

    server = DtlsSock(server_udp, args.backend, "server", registry,
                      rng=random.Random(1))
    server.register_credential_tags(tags)
    server.init_server()
    client = DtlsSock(client_udp, args.backend, "client", registry,
                      rng=random.Random(2))
    client.register_credential_tags(tags)

    session = client.establish_session(Endpoint(1, args.port), timeout=30.0)
    print("client: session established", file=out)
    client.send(session, payload)
    print("client: sent %s" % payload.hex(), file=out)
    srv_session, received = server.recv(timeout=10.0)
    print("server: received %s" % received.hex(), file=out)
    server.send(srv_session, received)
    print("server: echoed", file=out)
    _, echoed = client.recv(timeout=10.0)
    print("client: received %s" % echoed.hex(), file=out)
    ok = echoed == payload
    print("echo %s" % ("ok" if ok else "MISMATCH"), file=out)
    return 0 if ok else 1


def echo_server_main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dtls-echo-server",
        description="Echo server; with --transport sim runs a complete "
                    "in-process client+server demo.")
    _add_echo_args(parser)
    args = parser.parse_args(argv)
    if args.transport == "sim":
        return _echo_sim(args)
    registry, _store = _load_registry(args.creds)
    udp = UdpSock.loopback(args.port, host=args.host)
    sock = DtlsSock(udp, args.backend, "server", registry)
    sock.register_credential_tags([(1, CredentialType.PSK)])
    sock.init_server()
    print("server: listening on %s:%d (%s)"
          % (args.host, args.port, args.backend))
    echoed = 0
    try:
        while args.count <= 0 or echoed < args.count:
            try:
                session, data = sock.recv(timeout=1.0)
            except Timeout:
                continue
            print("server: received %s" % data.hex())
            sock.send(session, data)
            echoed += 1
    except KeyboardInterrupt:
        pass
    finally:
        sock.destroy()
    return 0


def echo_client_main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dtls-echo-client",
        description="Echo client; with --transport sim runs a complete "
                    "in-process client+server demo.")
    _add_echo_args(parser)
    parser.add_argument("--local-port", type=int, default=0,
                        help="loopback source port (default: port+1)")
    args = parser.parse_args(argv)
    if args.transport == "sim":
        return _echo_sim(args)
    payload = binascii.unhexlify(args.payload_hex)
    registry, _store = _load_registry(args.creds)
    local = args.local_port or args.port + 1
    udp = UdpSock.loopback(local, host=args.host)
    sock = DtlsSock(udp, args.backend, "client", registry)
    sock.register_credential_tags([(1, CredentialType.PSK)])
    session = sock.establish_session(Endpoint(args.host, args.port),
                                     timeout=10.0)
    print("client: session established")
    sock.send(session, payload)
    print("client: sent %s" % payload.hex())
    _, echoed = sock.recv(timeout=10.0)
    print("client: received %s" % echoed.hex())
    sock.destroy()
    return 0 if echoed == payload else 1
