"""Payload-sweep benchmark.

Measures per-packet client-side processing cost at two boundaries:

* ``t_full`` — from the user send call until the last frame was handed to
  the link (simulated link latency never burns CPU, so this is stack
  processing only);
* ``t_dtls`` — from the secure-socket send entry until the moment the
  protected record enters the UDP send path.

Both use the host's monotonic high-resolution clock.  Absolute numbers are
host-specific; everything the suite asserts is relative (shapes, ratios,
monotonic trends).  Reported means use median-of-means over fixed-size
batches when enough samples exist, which damps host-OS jitter; the reported
std is then the std of the batch means.
"""

from __future__ import annotations

import csv
import gc
import math
import random
import statistics
import time
from dataclasses import dataclass, field, replace
from typing import Optional

from .credman import Credential, CredentialType, Registry, SecretStore
from .linksim import LinkConfig, frame_count
from .simnet import DGRAM_HEADER, SimNet
from .sock_dtls import DtlsSock
from .sock_udp import Endpoint, UdpSock

VARIANTS = ("udp", "minidtls", "nullsec")
SERVER_PORT = 20220
CLIENT_PORT = 20221
BATCH = 50


class BenchError(Exception):
    pass


@dataclass
class SweepConfig:
    payload_min: int = 25
    payload_max: int = 300
    payload_step: int = 25
    reps: int = 5000
    warmup: int = 100
    variants: tuple = VARIANTS
    seed: int = 42
    loss_rate: float = 0.0

    def __post_init__(self):
        if self.payload_min > self.payload_max:
            raise ValueError("payload_min > payload_max")
        if self.payload_step <= 0:
            raise ValueError("payload_step must be positive")
        if self.reps <= 1:
            raise ValueError("reps must be > 1")
        unknown = set(self.variants) - set(VARIANTS)
        if unknown:
            raise ValueError("unknown variants: %s" % ", ".join(sorted(unknown)))

    @property
    def payloads(self) -> list[int]:
        return list(range(self.payload_min, self.payload_max + 1,
                          self.payload_step))


@dataclass
class BenchRecord:
    variant: str
    payload: int
    t_full_mean: float       # microseconds
    t_full_std: float
    t_dtls_mean: float       # 0 for the plain-UDP baseline
    t_dtls_std: float
    goodput_mean: float      # kbit/s
    frames: int


def _stats(samples: list[float], batch: int = BATCH) -> tuple[float, float]:
    """(mean, std) robust against host-OS scheduling spikes.

    With enough samples the mean is the median of fixed-size batch means and
    the std is the interquartile range of those batch means scaled to std
    units; between-batch drift is what actually moves a reported mean, so
    that is the spread the std must describe.  Spike-contaminated batches
    land outside the quartiles and are shrugged off.  Small sample sets fall
    back to the plain estimators.
    """
    if len(samples) >= 4 * batch:
        means = [statistics.fmean(samples[i:i + batch])
                 for i in range(0, len(samples) - batch + 1, batch)]
        center = statistics.median(means)
        mad = statistics.median(abs(m - center) for m in means)
        return center, mad * 1.4826
    return statistics.fmean(samples), statistics.stdev(samples)


def default_credentials(registry: Registry, store: SecretStore) -> Credential:
    cred = Credential(1, CredentialType.PSK, b"Client_identity",
                      store.put(bytes(range(16))))
    registry.add(cred)
    return cred


class Scenario:
    """Two simulated nodes with an established channel for one variant."""

    def __init__(self, variant: str, seed: int = 42, loss_rate: float = 0.0,
                 cfg: Optional[LinkConfig] = None):
        if variant not in VARIANTS:
            raise ValueError(variant)
        self.variant = variant
        base = cfg if cfg is not None else LinkConfig()
        self.net = SimNet(replace(base, loss_rate=loss_rate), seed=seed)
        self.client_node = self.net.add_node(1)
        self.server_node = self.net.add_node(2)
        self.server_ep = Endpoint(2, SERVER_PORT)
        self.client_udp = UdpSock.sim(self.client_node, CLIENT_PORT)
        self.server_udp = UdpSock.sim(self.server_node, SERVER_PORT)
        self.store = SecretStore()
        self.registry = Registry()
        default_credentials(self.registry, self.store)
        self.session = None
        self.server = None
        self.client = None
        if variant != "udp":
            rng = random.Random(seed)
            self.server = DtlsSock(self.server_udp, variant, "server",
                                   self.registry, rng=random.Random(seed + 1))
            self.server.register_credential_tags([(1, CredentialType.PSK)])
            self.server.init_server()
            self.client = DtlsSock(self.client_udp, variant, "client",
                                   self.registry, rng=rng)
            self.client.register_credential_tags([(1, CredentialType.PSK)])
            self.session = self.client.establish_session(self.server_ep)
        # datagram bytes added below the payload on the wire
        self.wire_overhead = DGRAM_HEADER.size + (
            0 if variant == "udp" else self.client._backend.record_overhead)

    def send(self, payload: bytes) -> int:
        if self.variant == "udp":
            return self.client_udp.send(self.server_ep, payload)
        return self.client.send(self.session, payload)

    def drain(self):
        """Deliver in-flight frames and flush the server, untimed."""
        self.net.clock.run_until_idle()
        if self.variant == "udp":
            self.server_udp._queue.clear()
        else:
            self.server._app_queue.clear()

    def expected_frames(self, payload: int) -> int:
        return frame_count(payload + self.wire_overhead, self.net.cfg)


class DirectSender:
    """Reference path: record protection invoked without the socket layer.

    Mirrors what an application using the backend directly would do per
    packet: advance its own sequence number, protect, hand to UDP.
    """

    __slots__ = ("udp", "remote", "crypto", "seq")

    def __init__(self, udp, remote, crypto, seq: int):
        self.udp = udp
        self.remote = remote
        self.crypto = crypto
        self.seq = seq

    def send(self, payload: bytes) -> int:
        seq = self.seq
        self.seq = seq + 1
        return self.udp.send(self.remote, self.crypto.protect(1, seq, payload))


class _UdpProbe:
    """Stands in for the UDP sock; timestamps entry into its send path."""

    __slots__ = ("inner", "t_entry")

    def __init__(self, inner):
        self.inner = inner
        self.t_entry = 0.0

    def send(self, remote, data):
        self.t_entry = time.perf_counter()
        return self.inner.send(remote, data)


def _measure(scenario: Scenario, payload_len: int, reps: int, warmup: int,
             rng: random.Random, sender=None):
    """Collect (t_full, t_dtls) second-valued samples for one sweep point."""
    send = sender.send if sender is not None else scenario.send
    probe = None
    if scenario.variant != "udp":
        probe = _UdpProbe(scenario.client_udp)
        if sender is not None:
            sender.udp = probe
        else:
            scenario.client._udp = probe
    payload = bytes(rng.randrange(256) for _ in range(payload_len))
    samples_full: list[float] = []
    samples_dtls: list[float] = []
    failures = 0
    perf = time.perf_counter
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for i in range(warmup + reps):
            try:
                t0 = perf()
                send(payload)
                t1 = perf()
            except Exception:
                failures += 1
                if failures > max(1, (warmup + reps) // 100):
                    raise BenchError("too many send failures")
                continue
            if i >= warmup:
                samples_full.append(t1 - t0)
                if probe is not None:
                    samples_dtls.append(probe.t_entry - t0)
            scenario.drain()
    finally:
        if gc_was_enabled:
            gc.enable()
        if probe is not None:
            if sender is not None:
                sender.udp = probe.inner
            else:
                scenario.client._udp = scenario.client_udp
    return samples_full, samples_dtls


def measure_packet(scenario: Scenario, payload_len: int, reps: int = 200,
                   warmup: int = 100, seed: int = 0):
    """One sweep point: ((t_full_mean, t_full_std), (t_dtls_mean, t_dtls_std))
    in microseconds, plus frames per packet."""
    rng = random.Random(seed ^ payload_len)
    full_s, dtls_s = _measure(scenario, payload_len, reps, warmup, rng)
    trace_before = len(scenario.net.link.trace)
    scenario.send(bytes(payload_len))
    frames = len(scenario.net.link.trace) - trace_before
    scenario.drain()
    full = _stats([s * 1e6 for s in full_s])
    dtls = _stats([s * 1e6 for s in dtls_s]) if dtls_s else (0.0, 0.0)
    return full, dtls, frames


def run_sweep(cfg: SweepConfig) -> list[BenchRecord]:
    """Run the payload sweep for every configured variant.

    All (variant, payload) points are visited round-robin in batch-sized
    passes, so a transient host-noise burst dilutes evenly across the whole
    sweep instead of poisoning one point or one variant.
    """
    payloads = cfg.payloads
    rng = random.Random(cfg.seed)
    blobs = {p: bytes(rng.randrange(256) for _ in range(p)) for p in payloads}
    scenarios = {v: Scenario(v, seed=cfg.seed, loss_rate=cfg.loss_rate)
                 for v in cfg.variants}
    probes = {}
    for variant, scenario in scenarios.items():
        if variant != "udp":
            probes[variant] = _UdpProbe(scenario.client_udp)
            scenario.client._udp = probes[variant]
    samples = {v: {p: ([], []) for p in payloads} for v in cfg.variants}
    perf = time.perf_counter
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for variant, scenario in scenarios.items():      # warmup, untimed
            for p in payloads:
                for _ in range(min(cfg.warmup, BATCH) or 1):
                    scenario.send(blobs[p])
                    scenario.drain()
        passes = -(-cfg.reps // BATCH)
        for i in range(passes):
            chunk = min(BATCH, cfg.reps - i * BATCH)
            for variant, scenario in scenarios.items():
                probe = probes.get(variant)
                send = scenario.send
                drain = scenario.drain
                for p in payloads:
                    blob = blobs[p]
                    full_s, dtls_s = samples[variant][p]
                    for _ in range(2):      # re-warm caches after the switch
                        send(blob)
                        drain()
                    for _ in range(chunk):
                        t0 = perf()
                        send(blob)
                        t1 = perf()
                        full_s.append(t1 - t0)
                        if probe is not None:
                            dtls_s.append(probe.t_entry - t0)
                        drain()
    finally:
        if gc_was_enabled:
            gc.enable()
        for variant, probe in probes.items():
            scenarios[variant].client._udp = probe.inner

    records: list[BenchRecord] = []
    for variant in cfg.variants:
        scenario = scenarios[variant]
        for payload in payloads:
            full_s, dtls_s = samples[variant][payload]
            full = _stats([s * 1e6 for s in full_s])
            dtls = _stats([s * 1e6 for s in dtls_s]) if dtls_s else (0.0, 0.0)
            trace_before = len(scenario.net.link.trace)
            scenario.send(bytes(payload))
            frames = len(scenario.net.link.trace) - trace_before
            scenario.drain()
            goodput = payload * 8 / full[0] * 1000.0 if full[0] > 0 else 0.0
            records.append(BenchRecord(
                variant=variant, payload=payload,
                t_full_mean=full[0], t_full_std=full[1],
                t_dtls_mean=dtls[0], t_dtls_std=dtls[1],
                goodput_mean=goodput, frames=frames))
    return records


def measure_direct(variant: str, payloads: list[int], reps: int,
                   warmup: int = 100, seed: int = 42) -> dict[int, float]:
    """Mean DTLS-boundary time (us) per payload for the direct backend path."""
    scenario = Scenario(variant, seed=seed)
    sender = DirectSender(scenario.client_udp, scenario.server_ep,
                          scenario.session.crypto,
                          scenario.session.next_send_seq)
    out = {}
    for payload in payloads:
        rng = random.Random(seed ^ payload)
        _, dtls_s = _measure(scenario, payload, reps, warmup, rng,
                             sender=sender)
        out[payload] = _stats([s * 1e6 for s in dtls_s])[0]
        # keep the shared session's counter ahead of what we consumed
        scenario.session.next_send_seq = sender.seq
    return out


def compare_overhead(variant: str, payloads: list[int], reps: int = 1000,
                     seed: int = 42, batch: int = BATCH) -> dict[int, float]:
    """Abstraction cost: (secure-socket DTLS time) / (direct-path DTLS time).

    The two paths share one scenario and alternate send for send, so host
    clock-frequency drift and noise bursts hit both sides equally; the
    ratio of per-payload medians is returned.
    """
    scenario = Scenario(variant, seed=seed)
    probe = _UdpProbe(scenario.client_udp)
    scenario.client._udp = probe
    # keep direct-path sequence numbers ahead of the session's so the
    # server-side replay window stays monotone per path
    sender = DirectSender(probe, scenario.server_ep, scenario.session.crypto,
                          1 << 30)
    perf = time.perf_counter
    send_sock = scenario.client.send
    drain = scenario.drain
    session = scenario.session
    ratios: dict[int, float] = {}
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for payload_len in payloads:
            data = bytes(payload_len)
            for _ in range(batch):      # warmup both paths
                send_sock(session, data)
                sender.send(data)
                drain()
            sock_s: list[float] = []
            dir_s: list[float] = []
            for _ in range(reps):
                t0 = perf()
                send_sock(session, data)
                sock_s.append(probe.t_entry - t0)
                drain()
                t0 = perf()
                sender.send(data)
                dir_s.append(probe.t_entry - t0)
                drain()
            ratios[payload_len] = (statistics.median(sock_s)
                                   / statistics.median(dir_s))
    finally:
        if gc_was_enabled:
            gc.enable()
        scenario.client._udp = scenario.client_udp
    return ratios


# ---------------------------------------------------------------------------
# CSV


CSV_HEADER = ["variant", "payload", "t_full_mean", "t_full_std",
              "t_dtls_mean", "t_dtls_std", "goodput_mean", "frames"]


def emit_csv(records: list[BenchRecord], path):
    if not records:
        raise ValueError("no records to emit")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow([r.variant, r.payload,
                             "%.6f" % r.t_full_mean, "%.6f" % r.t_full_std,
                             "%.6f" % r.t_dtls_mean, "%.6f" % r.t_dtls_std,
                             "%.6f" % r.goodput_mean, r.frames])


def parse_csv(path) -> list[BenchRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError("unexpected CSV header: %r" % (reader.fieldnames,))
        for row in reader:
            out.append(BenchRecord(
                variant=row["variant"], payload=int(row["payload"]),
                t_full_mean=float(row["t_full_mean"]),
                t_full_std=float(row["t_full_std"]),
                t_dtls_mean=float(row["t_dtls_mean"]),
                t_dtls_std=float(row["t_dtls_std"]),
                goodput_mean=float(row["goodput_mean"]),
                frames=int(row["frames"])))
    return out


# ---------------------------------------------------------------------------
# shape / trend checks (exit-code material for the CLI)


def by_variant(records: list[BenchRecord], variant: str) -> list[BenchRecord]:
    out = sorted((r for r in records if r.variant == variant),
                 key=lambda r: r.payload)
    if not out:
        raise ValueError("no records for variant %r" % variant)
    return out


def check_goodput_trend(records: list[BenchRecord]) -> list[str]:
    problems = []
    variants = sorted({r.variant for r in records})
    for variant in variants:
        rows = by_variant(records, variant)
        if rows[-1].goodput_mean <= rows[0].goodput_mean:
            problems.append(
                "%s: goodput(%d) <= goodput(%d)"
                % (variant, rows[-1].payload, rows[0].payload))
    if "udp" in variants and "minidtls" in variants:
        udp = {r.payload: r.goodput_mean for r in by_variant(records, "udp")}
        for r in by_variant(records, "minidtls"):
            if r.payload in udp and r.goodput_mean > udp[r.payload]:
                problems.append(
                    "minidtls goodput exceeds udp baseline at %d B" % r.payload)
    return problems


def check_dtls_monotone(records: list[BenchRecord],
                        variant: str = "minidtls") -> list[str]:
    """t_dtls should not decrease with payload, single dips within 1 std OK."""
    rows = by_variant(records, variant)
    problems = []
    for prev, cur in zip(rows, rows[1:]):
        drop = prev.t_dtls_mean - cur.t_dtls_mean
        tolerance = max(prev.t_dtls_std, cur.t_dtls_std)
        if drop > tolerance:
            problems.append(
                "%s t_dtls drops by %.3f us (> 1 std %.3f) at %d B"
                % (variant, drop, tolerance, cur.payload))
    return problems


def frag_thresholds(records: list[BenchRecord], variant: str) -> list[int]:
    """Sweep payloads where the measured frame count increased."""
    rows = by_variant(records, variant)
    return [cur.payload for prev, cur in zip(rows, rows[1:])
            if cur.frames > prev.frames]


def check_step_shape(records: list[BenchRecord],
                     variant: str = "minidtls") -> list[str]:
    """Full-stack time must jump at >=1 fragmentation threshold; the
    DTLS-only time must stay smooth there.

    Both curves carry a genuine linear slope (more bytes, more work), so a
    threshold "jump" is judged in excess of the median step between
    non-threshold neighbors of the same curve.
    """
    rows = by_variant(records, variant)
    thresholds = set(frag_thresholds(records, variant))
    if not thresholds:
        return ["no fragmentation threshold inside the sweep range"]

    def baseline(attr):
        diffs = [getattr(c, attr) - getattr(p, attr)
                 for p, c in zip(rows, rows[1:])
                 if c.payload not in thresholds]
        return statistics.median(diffs) if diffs else 0.0

    base_full = baseline("t_full_mean")
    base_dtls = baseline("t_dtls_mean")
    # a single contaminated point can carry an arbitrarily large std, so
    # judge jumps against the typical (median) spread across the curve
    full_std = statistics.median(r.t_full_std for r in rows)
    index = {r.payload: i for i, r in enumerate(rows)}
    jumps = []
    for t in sorted(thresholds):
        prev, cur = rows[index[t] - 1], rows[index[t]]
        full_jump = cur.t_full_mean - prev.t_full_mean - base_full
        full_tol = 2 * full_std
        dtls_jump = cur.t_dtls_mean - prev.t_dtls_mean - base_dtls
        # flat means: within noise, or a small fraction of the step the
        # full-stack curve shows at the same payload (shared-CPU cache
        # coupling leaves a fractional-us echo in t_dtls)
        dtls_tol = max(2 * max(prev.t_dtls_std, cur.t_dtls_std),
                       0.25 * full_jump)
        jumps.append((t, full_jump > full_tol, dtls_jump <= dtls_tol))
    if not any(full and dtls for _, full, dtls in jumps):
        return ["no threshold with a full-stack jump > 2 std while "
                "t_dtls stays flat: %r" % (jumps,)]
    return []


def check_all(records: list[BenchRecord]) -> list[str]:
    problems = check_goodput_trend(records)
    variants = {r.variant for r in records}
    if "minidtls" in variants:
        problems += check_dtls_monotone(records)
        problems += check_step_shape(records)
    return problems
