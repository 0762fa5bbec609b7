"""Round-trip-time protocol (RTT) and its covert variant (WRTT).

In WRTT the responder replaces the low byte of its reply timestamp with
``byte XOR keystream(j)``; the requester recovers the byte with the same
counter-indexed keystream. Only the responder timestamp is touched, so the
round-trip times computed from the requester timestamp are unchanged.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .actors import Actor, Context, Hooks, Link, Message, Simulation
from .simcore import (
    INFINITY,
    ConfigurationError,
    Distribution,
    NormalTruncatedAtZero,
    RandomStream,
    SimulationError,
    distribution_from_dict,
)

SENDER = "A"
RECEIVER = "B"
OBSERVED_KINDS = ("rttResp",)


@dataclass(frozen=True)
class ClockModel:
    """Digital clock used by ``t2ts``.

    A reading is ``floor(T * ticks_per_unit)`` truncated to multiples of
    ``resolution`` ticks, plus a reading jitter drawn uniformly from
    ``[0, jitter_max]`` ticks. With the defaults the low byte of a reading is
    pure jitter and is not uniform over all 256 values.
    """

    ticks_per_unit: int = 1000
    resolution: int = 256
    jitter_max: int = 159

    def __post_init__(self):
        if self.ticks_per_unit < 1 or self.resolution < 1 or self.jitter_max < 0:
            raise ConfigurationError("clock model parameters must be positive",
                                     ["ticks_per_unit", "resolution", "jitter_max"])

    def t2ts(self, T: float, stream: RandomStream) -> int:
        base = (math.floor(T * self.ticks_per_unit) // self.resolution) * self.resolution
        return base + (stream.randint(0, self.jitter_max) if self.jitter_max else 0)

    def to_seconds(self, ts: int) -> float:
        return ts / self.ticks_per_unit


def compute_rtt(now: float, request_ts: int, clock: ClockModel = ClockModel()) -> float:
    """Clock reading ``now`` minus the time encoded by ``request_ts``."""
    rtt = now - clock.to_seconds(request_ts)
    if rtt < 0:
        raise SimulationError(f"negative round trip {rtt} (now={now}, ts={request_ts})")
    return rtt


def keystream_byte(j: int, shared_seed: int) -> int:
    """Counter-mode keystream: first byte of BLAKE2b(seed || j)."""
    h = hashlib.blake2b(struct.pack("<QQ", shared_seed % (1 << 64), j % (1 << 64)), digest_size=8)
    return h.digest()[0]


def embed(ts: int, j: int, b: int, shared_seed: int) -> int:
    if not 0 <= b <= 255:
        raise ValueError(f"byte out of range: {b}")
    return (ts & ~0xFF) | (b ^ keystream_byte(j, shared_seed))


def extract(ts: int, j: int, shared_seed: int) -> int:
    return (ts & 0xFF) ^ keystream_byte(j, shared_seed)


def low8(ts: int) -> int:
    return ts & 0xFF


class RttSender(Actor):
    actor_class = "Snd"
    message_rules = {"rttResp": "on_rtt_resp"}

    def __init__(self, name: str, peer: str, start_time: float, stop_time: float, period: float,
                 clock: ClockModel, covert: bool = False, shared_seed: int = 0):
        super().__init__(name)
        self.peer = peer
        self.start_time = start_time
        self.stop_time = stop_time
        self.period = period
        self.clock_model = clock
        self.covert = covert
        self.shared_seed = shared_seed
        self.tsq: list[int] = []
        self.rttq: list[float] = []
        self.ctr = 0
        self.byte_list: list[int] = []
        self.actor_class = "bWSnd" if covert else "Snd"

    def start(self, ctx):
        self.arm("req", self.start_time, self.period)

    def on_timer(self, key, ctx: Context):
        if key != "req":
            super().on_timer(key, ctx)
        T = ctx.clock
        ts = self.clock_model.t2ts(T, ctx.stream)
        self.tsq.append(ts)
        self.arm("req", INFINITY if T >= self.stop_time else T + self.period, self.period)
        ctx.send(Message("rttReq", self.name, self.peer, self.name, self.peer, 16, {"ts": ts}))

    def on_rtt_resp(self, msg: Message, ctx: Context):
        ts0, ts1 = msg.payload["ts"], msg.payload["ts1"]
        try:
            self.tsq.remove(ts0)
        except ValueError:
            raise SimulationError(f"response for unknown request timestamp {ts0}") from None
        self.rttq.append(compute_rtt(ctx.clock, ts0, self.clock_model))
        if self.covert:
            self.byte_list.append(extract(ts1, self.ctr, self.shared_seed))
            self.ctr += 1


class RttReceiver(Actor):
    actor_class = "Rcv"
    message_rules = {"rttReq": "on_rtt_req"}

    def __init__(self, name: str, peer: str, clock: ClockModel, covert: bool = False, shared_seed: int = 0):
        super().__init__(name)
        self.peer = peer
        self.clock_model = clock
        self.covert = covert
        self.shared_seed = shared_seed
        self.bctr = 0
        self.ctr = 0
        self.byte_list: list[int] = []
        self._byte_source: RandomStream | None = None
        self.actor_class = "bWRcv" if covert else "Rcv"

    def on_rtt_req(self, msg: Message, ctx: Context):
        ts0 = msg.payload["ts"]
        ts1 = self.clock_model.t2ts(ctx.clock, ctx.stream)
        if self.covert:
            # byte source is a separate sub-stream so the clock jitter draws
            # match the overt protocol exactly
            if self._byte_source is None:
                self._byte_source = ctx.stream.child("bytes")
            byte = self._byte_source.randint(0, 255)
            ts1 = embed(ts1, self.ctr, byte, self.shared_seed)
            self.bctr += 1
            self.ctr += 1
            self.byte_list.append(byte)
        ctx.send(Message("rttResp", self.name, self.peer, self.name, self.peer, 32, {"ts": ts0, "ts1": ts1}))


def binary_entropy(p: float) -> float:
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return -(p * math.log2(p) + (1 - p) * math.log2(1 - p))


def per_bit_entropies(low_bytes) -> list[float]:
    arr = np.asarray(low_bytes, dtype=np.int64)
    return [binary_entropy(float(((arr >> b) & 1).mean())) for b in range(8)]


def byte_histogram_entropy(low_bytes) -> list[float]:
    """Alternative estimator: plug-in entropy of the byte histogram, in
    units of 8 bits, as a one-element list."""
    _, counts = np.unique(np.asarray(low_bytes), return_counts=True)
    p = counts / counts.sum()
    return [float(-(p * np.log2(p)).sum() / 8.0)]


ENTROPY_ESTIMATORS = {"per-bit": per_bit_entropies, "byte": byte_histogram_entropy}


@dataclass
class EntropyObservables:
    en_list: list[float]
    en_av: float | None
    rtt_av: float | None


def entropy_observables(sent, rttq=(), estimator: str = "per-bit") -> EntropyObservables:
    """Entropy of the responder timestamps' low byte over observed responses.

    ``sent`` is the observer's ``(time, rttResp message)`` list. An empty
    list gives ``en_av = None`` rather than NaN.
    """
    lows = []
    for _, m in sent:
        if m.kind != "rttResp":
            raise ValueError(f"unexpected observed message {m.kind}")
        lows.append(low8(m.payload["ts1"]))
    rtt_av = float(np.mean(rttq)) if len(rttq) else None
    if not lows:
        return EntropyObservables([], None, rtt_av)
    en = ENTROPY_ESTIMATORS[estimator](lows)
    return EntropyObservables(en, float(np.mean(en)), rtt_av)


class RttHooks(Hooks):
    def __init__(self, estimator: str = "per-bit"):
        self.estimator = estimator

    def on_arrival(self, sim, time, msg):
        if msg.kind in OBSERVED_KINDS:
            sim.observer.add(time, msg)

    def on_final(self, sim):
        snd = sim.actors[SENDER]
        obs = entropy_observables(sim.observer.sent, snd.rttq, self.estimator)
        sim.observer.finalize(enList=obs.en_list, enAv=obs.en_av, rttAv=obs.rtt_av)


@dataclass
class RttConfig:
    start_time: float = 999.0
    stop_time: float = 10999.0
    period: float = 500.0
    delay: Distribution = field(default_factory=lambda: NormalTruncatedAtZero(50.0, 10.0))
    loss: float = 0.0
    covert: bool = False
    shared_seed: int = 0x5EED
    clock: ClockModel = field(default_factory=ClockModel)
    estimator: str = "per-bit"

    def __post_init__(self):
        bad = []
        if self.period <= 0:
            bad.append("period")
        if self.stop_time < self.start_time:
            bad.append("stopTime")
        if not 0 <= self.loss <= 1:
            bad.append("loss")
        if self.estimator not in ENTROPY_ESTIMATORS:
            bad.append("estimator")
        if bad:
            raise ConfigurationError(f"invalid RTT configuration fields: {', '.join(bad)}", bad)

    @property
    def rounds(self) -> int:
        return int(math.floor((self.stop_time - self.start_time) / self.period)) + 1

    def with_rounds(self, n: int) -> "RttConfig":
        from dataclasses import replace

        return replace(self, stop_time=self.start_time + (n - 1) * self.period)

    @classmethod
    def from_dict(cls, d: dict) -> "RttConfig":
        kw = {}
        names = {"startTime": "start_time", "stopTime": "stop_time", "period": "period",
                 "loss": "loss", "covert": "covert", "sharedSeed": "shared_seed", "estimator": "estimator"}
        for k, attr in names.items():
            if k in d:
                kw[attr] = d[k]
        if "delay" in d:
            kw["delay"] = distribution_from_dict(d["delay"])
        if "clock" in d:
            c = d["clock"]
            kw["clock"] = ClockModel(c.get("ticksPerUnit", 1000), c.get("resolution", 256), c.get("jitterMax", 159))
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "type": "rtt",
            "startTime": self.start_time,
            "stopTime": self.stop_time,
            "period": self.period,
            "delay": self.delay.to_dict(),
            "loss": self.loss,
            "covert": self.covert,
            "sharedSeed": self.shared_seed,
            "estimator": self.estimator,
            "clock": {"ticksPerUnit": self.clock.ticks_per_unit, "resolution": self.clock.resolution,
                      "jitterMax": self.clock.jitter_max},
        }


def build_rtt(cfg: RttConfig, seed: int, covert: bool | None = None) -> Simulation:
    covert = cfg.covert if covert is None else covert
    sim = Simulation(seed, RttHooks(cfg.estimator))
    sim.add_actor(RttSender(SENDER, RECEIVER, cfg.start_time, cfg.stop_time, cfg.period,
                            cfg.clock, covert, cfg.shared_seed))
    sim.add_actor(RttReceiver(RECEIVER, SENDER, cfg.clock, covert, cfg.shared_seed))
    sim.add_link(Link(SENDER, RECEIVER, cfg.delay, cfg.loss))
    sim.add_link(Link(RECEIVER, SENDER, cfg.delay, cfg.loss))
    return sim


def run_rtt(cfg: RttConfig, seed: int, covert: bool | None = None) -> Simulation:
    return build_rtt(cfg, seed, covert).run()
