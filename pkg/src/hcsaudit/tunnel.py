"""Two-channel covert exfiltration scenario across a NAT boundary.

Topology (one-way delays in brackets)::

    qgen*/rgen*/alice --[lanDelay]-- router --[linkDelay, lossAlice]-- resolver / server
                                                                          |
                                                                  [bobLinkDelay, lossBob]
                                                                          |
                                                                         bob

Background generators send DNS queries to the resolver and HTTPS requests
to the server, which answer directly. Alice sends each file as chunks; a
chunk goes out as a ``DNSQuery`` through the resolver or as an
``HTTPSRequest`` through the server, and the relay forwards it to Bob. Bob
acknowledges each chunk back along the same path. The router is the
adversary's observation point.

Times are in milliseconds by default (``unitsPerSecond = 1000``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Any

from .actors import Actor, Context, Hooks, Link, Message, Simulation
from .adversary import CORPORATE, PUBLIC, ObservableTrace, observe
from .properties import HCS, ORDINARY, WORLDS, RunRecord
from .simcore import (
    Constant,
    ConfigurationError,
    Distribution,
    NormalTruncatedAtZero,
    distribution_from_dict,
)

ROUTER, RESOLVER, SERVER, ALICE, BOB = "router", "resolver", "server", "alice", "bob"
RESPONSE_KIND = {"DNSQuery": "DNSResponse", "HTTPSRequest": "HTTPSResponse"}
RELAY_FOR_KIND = {"DNSQuery": RESOLVER, "HTTPSRequest": SERVER}
SIZES = {"DNSQuery": 80, "DNSResponse": 160, "HTTPSRequest": 600, "HTTPSResponse": 1500}
ACK_SIZE = 64


def chunk_sizes(file_size: int, chunk_size: int) -> list[int]:
    """Split a file into ``ceil(file_size / chunk_size)`` chunks."""
    if file_size <= 0:
        return []
    n = -(-file_size // chunk_size)
    return [chunk_size] * (n - 1) + [file_size - chunk_size * (n - 1)]


def split_bytes(total: int, num_files: int) -> list[int]:
    """Even split, remainder to the last file."""
    if num_files == 0:
        return []
    base = total // num_files
    return [base] * (num_files - 1) + [total - base * (num_files - 1)]


def chunk_channel(g: int, fraction: float) -> str:
    """Kind for the ``g``-th chunk overall: HTTPS for a ``fraction`` of
    chunks, spread evenly (Bresenham style), DNS otherwise."""
    return "HTTPSRequest" if math.floor((g + 1) * fraction) > math.floor(g * fraction) else "DNSQuery"


# -- actors -------------------------------------------------------------------


class TrafficGenerator(Actor):
    """Two-state background process: wait (timer) then act (one message)."""

    def __init__(self, name: str, kind: str, wait: Distribution, stop_time: float = math.inf):
        super().__init__(name)
        if kind not in RELAY_FOR_KIND:
            raise ConfigurationError(f"generator kind must be DNSQuery or HTTPSRequest, got {kind}", ["kind"])
        self.kind = kind
        self.actor_class = "QueryGen" if kind == "DNSQuery" else "RequestGen"
        self.wait = wait
        self.stop_time = stop_time
        self.state = "wait"
        self.emitted = 0

    def start(self, ctx: Context):
        self.arm("act", ctx.clock + self.wait.sample(ctx.stream))

    def on_timer(self, key, ctx: Context):
        if key != "act":
            super().on_timer(key, ctx)
        self.state = "act"
        dst = RELAY_FOR_KIND[self.kind]
        ctx.send(Message(self.kind, self.name, ROUTER, self.name, dst, SIZES[self.kind]))
        self.emitted += 1
        self.state = "wait"
        nxt = ctx.clock + self.wait.sample(ctx.stream)
        if nxt <= self.stop_time:
            self.arm("act", nxt)


class Router(Actor):
    """NAT box: relays by end-to-end destination. Purely an observation point."""

    actor_class = "Router"
    message_rules = {"*": "forward"}

    def __init__(self, name: str, corporate: set[str]):
        super().__init__(name)
        self.corporate = corporate

    def forward(self, msg: Message, ctx: Context):
        if msg.dst in self.corporate:
            ctx.send(msg.forward(self.name, msg.dst))
        else:
            ctx.send(msg.forward(self.name, msg.payload.get("via", msg.dst)))


class PublicServer(Actor):
    """DNS resolver or HTTPS server. Answers background traffic and relays
    covert chunks to Bob and Bob's acks back toward the router."""

    message_rules = {"*": "on_message"}

    def __init__(self, name: str, serves: str):
        super().__init__(name)
        self.serves = serves
        self.actor_class = "Resolver" if serves == "DNSQuery" else "WebServer"
        self.answered = 0

    def on_message(self, msg: Message, ctx: Context):
        if msg.sender == BOB:
            ctx.send(msg.forward(self.name, ROUTER))
        elif msg.dst == BOB:
            ctx.send(msg.forward(self.name, BOB))
        elif msg.dst == self.name and msg.kind == self.serves:
            rk = RESPONSE_KIND[msg.kind]
            self.answered += 1
            ctx.send(Message(rk, self.name, ROUTER, self.name, msg.src, SIZES[rk]))


class Alice(Actor):
    """Covert sender: chunked files, paced sends, per-chunk retransmission
    and stop-and-wait between files."""

    actor_class = "Alice"
    message_rules = {"DNSResponse": "on_ack", "HTTPSResponse": "on_ack"}

    def __init__(self, name: str, files: list[int], chunk_size: int, post_wait: Distribution,
                 start_time: float, timeout: float, cap: int, data_fraction: float):
        super().__init__(name)
        self.files = list(files)
        self.chunk_size = chunk_size
        self.post_wait = post_wait
        self.start_time = start_time
        self.timeout = timeout
        self.cap = cap
        self.data_fraction = data_fraction
        self.current_file = 0
        self.next_chunk = 0
        self.chunks_sent = 0  # distinct chunks, across files
        self.in_flight: dict[tuple[int, int], list] = {}  # (file, chunk) -> [bytes, kind, sends]
        self.awaiting_ack = False
        self.failed = False
        self.done = not self.files
        self.acked_bytes = 0
        self.retransmissions = 0
        self._chunks = [chunk_sizes(f, chunk_size) for f in self.files]

    def start(self, ctx: Context):
        if self.files:
            self.arm("post", self.start_time)

    def _emit(self, key: tuple[int, int], ctx: Context):
        nbytes, kind, sends = self.in_flight[key]
        f, c = key
        ctx.send(Message(kind, self.name, ROUTER, self.name, BOB, nbytes,
                         {"via": RELAY_FOR_KIND[kind], "file": f, "chunk": c, "nchunks": len(self._chunks[f])}))
        self.in_flight[key][2] = sends + 1
        ctx.record("chunkSent", file=f, chunk=c, kind=kind, attempt=sends + 1, bytes=nbytes)
        self.arm(("rtx", f, c), ctx.clock + self.timeout)

    def on_timer(self, key, ctx: Context):
        if self.failed or self.done:
            return
        if key == "post":
            f, c = self.current_file, self.next_chunk
            if self.chunks_sent == 0:
                ctx.record("exfilStart")
            kind = chunk_channel(self.chunks_sent, self.data_fraction)
            self.in_flight[(f, c)] = [self._chunks[f][c], kind, 0]
            self.chunks_sent += 1
            self.next_chunk += 1
            self._emit((f, c), ctx)
            if self.next_chunk < len(self._chunks[f]):
                self.arm("post", ctx.clock + self.post_wait.sample(ctx.stream))
            else:
                self.awaiting_ack = True
        elif isinstance(key, tuple) and key[0] == "rtx":
            ck = key[1:]
            if ck not in self.in_flight:
                return
            if self.in_flight[ck][2] > self.cap:
                self.failed = True
                for k in list(self.timers):
                    self.disarm(k)
                ctx.record("failedDelivery", file=ck[0], chunk=ck[1])
                return
            self.retransmissions += 1
            ctx.record("retransmit", file=ck[0], chunk=ck[1])
            self._emit(ck, ctx)
        else:
            super().on_timer(key, ctx)

    def on_ack(self, msg: Message, ctx: Context):
        p = msg.payload
        if "file" not in p or self.failed or self.done:
            return
        key = (p["file"], p["chunk"])
        if key in self.in_flight:
            del self.in_flight[key]
            self.disarm(("rtx",) + key)
        f = p["file"]
        if p.get("fileDone") and f == self.current_file and self.awaiting_ack:
            for k in [k for k in self.in_flight if k[0] == f]:
                del self.in_flight[k]
                self.disarm(("rtx",) + k)
            self.acked_bytes += self.files[f]
            ctx.record("fileAcked", file=f, bytes=self.files[f])
            self.current_file += 1
            self.next_chunk = 0
            self.awaiting_ack = False
            if self.current_file == len(self.files):
                self.done = True
                ctx.record("exfilDone", bytes=self.acked_bytes)
            else:
                self.arm("post", ctx.clock + self.post_wait.sample(ctx.stream))


class Bob(Actor):
    actor_class = "Bob"
    message_rules = {"DNSQuery": "on_chunk", "HTTPSRequest": "on_chunk"}

    def __init__(self, name: str):
        super().__init__(name)
        self.received: dict[int, set[int]] = {}
        self.acked_files: set[int] = set()

    def on_chunk(self, msg: Message, ctx: Context):
        p = msg.payload
        f = p["file"]
        got = self.received.setdefault(f, set())
        got.add(p["chunk"])
        if len(got) == p["nchunks"] and f not in self.acked_files:
            self.acked_files.add(f)
            ctx.record("bobFileComplete", file=f)
        rk = RESPONSE_KIND[msg.kind]
        ctx.send(Message(rk, self.name, msg.sender, self.name, msg.src, ACK_SIZE,
                         {"file": f, "chunk": p["chunk"], "fileDone": f in self.acked_files}))


class TunnelHooks(Hooks):
    """Feed boundary-crossing hops to the observer as
    :class:`~hcsaudit.adversary.ObservableEvent` records."""

    def __init__(self, zones: dict[str, str]):
        self.zones = zones

    def on_send(self, sim, time, msg):
        if msg.sender == ROUTER:
            ev = observe(msg, time, self.zones)
            if ev is not None:
                sim.observer.add(time, ev)

    def on_arrival(self, sim, time, msg):
        if msg.receiver == ROUTER:
            ev = observe(msg, time, self.zones)
            if ev is not None:
                sim.observer.add(time, ev)

    def on_final(self, sim):
        alice = sim.actors.get(ALICE)
        sim.observer.finalize(
            numFiles=len(alice.files) if alice else 0,
            ackedBytes=alice.acked_bytes if alice else 0,
            retransmissions=alice.retransmissions if alice else 0,
            failedDelivery=bool(alice and alice.failed),
            events=len(sim.observer.sent),
        )


# -- configuration ------------------------------------------------------------

_DIST_FIELDS = ("linkDelay", "bobLinkDelay", "lanDelay")


@dataclass
class ScenarioConfig:
    """Scenario parameters. JSON keys are the camelCase field names.

    ``fileSizes`` overrides the even split of ``totalBytes``;
    ``bobLinkDelay`` and ``lanDelay`` default to zero so ``linkDelay`` is the
    whole one-way path delay.
    """

    name: str = "custom"
    lossAlice: float = 0.0
    lossBob: float = 0.0
    numFiles: int = 1
    totalBytes: int = 1600
    fileSizes: list[int] | None = None
    numGenerators: int = 16
    chunkSize: int = 100
    meanWait: float = 2000.0
    sdWait: float = 500.0
    bgMeanWait: float = 10_000.0
    bgSdWait: float = 2_000.0
    linkDelay: Distribution = field(default_factory=lambda: NormalTruncatedAtZero(50.0, 10.0))
    bobLinkDelay: Distribution = field(default_factory=lambda: Constant(0.0))
    lanDelay: Distribution = field(default_factory=lambda: Constant(0.0))
    exfilStart: float = 5_000.0
    stopTime: float = 1_800_000.0
    observationHorizon: float | None = None
    backgroundStop: float | None = None
    dataChannelFraction: float = 0.5
    retransmitTimeout: float | None = None
    retransmitCap: int = 50
    unitsPerSecond: float = 1000.0
    seed: int = 1

    def __post_init__(self):
        for f in _DIST_FIELDS:
            v = getattr(self, f)
            if not isinstance(v, Distribution):
                setattr(self, f, distribution_from_dict(v))
        bad = []

        def check(name, ok):
            if not ok:
                bad.append(name)

        check("lossAlice", 0.0 <= self.lossAlice <= 1.0)
        check("lossBob", 0.0 <= self.lossBob <= 1.0)
        check("numFiles", isinstance(self.numFiles, int) and self.numFiles >= 0)
        check("numGenerators", isinstance(self.numGenerators, int) and self.numGenerators >= 0)
        check("chunkSize", isinstance(self.chunkSize, int) and self.chunkSize >= 1)
        check("meanWait", self.meanWait > 0)
        check("sdWait", self.sdWait > 0)
        check("bgMeanWait", self.bgMeanWait > 0)
        check("bgSdWait", self.bgSdWait > 0)
        check("stopTime", self.stopTime > 0)
        check("exfilStart", self.exfilStart >= 0)
        check("dataChannelFraction", 0.0 <= self.dataChannelFraction <= 1.0)
        check("retransmitCap", isinstance(self.retransmitCap, int) and self.retransmitCap >= 0)
        check("unitsPerSecond", self.unitsPerSecond > 0)
        if self.retransmitTimeout is not None:
            check("retransmitTimeout", self.retransmitTimeout > 0)
        if self.observationHorizon is not None:
            check("observationHorizon", 0 < self.observationHorizon <= self.stopTime)
        if self.fileSizes is not None:
            check("fileSizes", len(self.fileSizes) == self.numFiles and all(s >= 1 for s in self.fileSizes)
                  and sum(self.fileSizes) == self.totalBytes)
        else:
            check("totalBytes", self.totalBytes >= self.numFiles)
        if bad:
            raise ConfigurationError(f"invalid scenario fields: {', '.join(bad)}", bad)

    @property
    def files(self) -> list[int]:
        return list(self.fileSizes) if self.fileSizes is not None else split_bytes(self.totalBytes, self.numFiles)

    @property
    def horizon(self) -> float:
        return self.observationHorizon if self.observationHorizon is not None else self.stopTime

    @property
    def timeout(self) -> float:
        if self.retransmitTimeout is not None:
            return self.retransmitTimeout
        one_way = self.lanDelay.mean() + self.linkDelay.mean() + self.bobLinkDelay.mean()
        return 4.0 * one_way if one_way > 0 else 1.0

    def replace(self, **changes) -> "ScenarioConfig":
        return replace(self, **changes)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known - {"type"})
        if unknown:
            raise ConfigurationError(f"unknown scenario fields: {', '.join(unknown)}", unknown)
        kw = {k: v for k, v in d.items() if k in known}
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"type": "tunnel"}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.to_dict() if isinstance(v, Distribution) else v
        return out


def generator_names(sc: ScenarioConfig) -> list[tuple[str, str]]:
    """``(name, kind)`` per generator: first half query-type, rest request-type."""
    nq = sc.numGenerators - sc.numGenerators // 2
    out = [(f"qgen{i:03d}", "DNSQuery") for i in range(nq)]
    out += [(f"rgen{i:03d}", "HTTPSRequest") for i in range(sc.numGenerators - nq)]
    return out


def build_world(sc: ScenarioConfig, world: str, seed: int, alice_files: list[int] | None = None) -> Simulation:
    """Initial configuration for one run.

    Both worlds use the same actor names and hence the same generator and
    LAN-link random streams; the HCS world adds Alice and Bob.
    """
    if world not in WORLDS:
        raise ConfigurationError(f"world must be one of {WORLDS}, got {world!r}", ["world"])
    gens = generator_names(sc)
    corporate = {n for n, _ in gens}
    if world == HCS:
        corporate.add(ALICE)
    zones = {n: CORPORATE for n in corporate}
    zones.update({RESOLVER: PUBLIC, SERVER: PUBLIC, BOB: PUBLIC, ROUTER: "router"})
    sim = Simulation(seed, TunnelHooks(zones))
    bg_wait = NormalTruncatedAtZero(sc.bgMeanWait, sc.bgSdWait)
    bg_stop = sc.backgroundStop if sc.backgroundStop is not None else math.inf
    for name, kind in gens:
        sim.add_actor(TrafficGenerator(name, kind, bg_wait, bg_stop))
    sim.add_actor(Router(ROUTER, corporate))
    sim.add_actor(PublicServer(RESOLVER, "DNSQuery"))
    sim.add_actor(PublicServer(SERVER, "HTTPSRequest"))
    for host in sorted(corporate):
        sim.add_link(Link(host, ROUTER, sc.lanDelay), bidirectional=True)
    for pub in (RESOLVER, SERVER):
        sim.add_link(Link(ROUTER, pub, sc.linkDelay, sc.lossAlice), bidirectional=True)
    if world == HCS:
        files = sc.files if alice_files is None else alice_files
        sim.add_actor(Alice(ALICE, files, sc.chunkSize, NormalTruncatedAtZero(sc.meanWait, sc.sdWait),
                            sc.exfilStart, sc.timeout, sc.retransmitCap, sc.dataChannelFraction))
        sim.add_actor(Bob(BOB))
        for relay in (RESOLVER, SERVER):
            sim.add_link(Link(relay, BOB, sc.bobLinkDelay, sc.lossBob), bidirectional=True)
    return sim


def run_scenario(sc: ScenarioConfig, world: str, seed: int, run_index: int = -1) -> RunRecord:
    """Simulate one run to ``stopTime`` and package it as a RunRecord."""
    sim = build_world(sc, world, seed)
    # Alice's run ends early once she is done or failed and background stops;
    # the horizon is the full stop time either way
    sim.run(until=sc.stopTime)
    trace = ObservableTrace(tuple(e for _, e in sim.observer.sent), sc.stopTime)
    return RunRecord(
        world=world,
        seed=seed,
        trace=trace,
        monitor=list(sim.monitor.events),
        summary=dict(sim.observer.summary),
        failed_delivery=bool(sim.observer.summary.get("failedDelivery")),
        observation_horizon=sc.horizon,
        units_per_second=sc.unitsPerSecond,
        run_index=run_index,
    )
