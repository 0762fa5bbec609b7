"""Seeded discrete-event machinery: virtual time, random streams,
delay distributions and the pending-message queue.

Time is a plain ``float``; :data:`INFINITY` (``math.inf``) marks a disarmed
timer or an exhausted run. Comparisons in tests use :data:`TIME_EPS`.
"""
from __future__ import annotations

import hashlib
import heapq
import math
import random
import struct
from dataclasses import dataclass, field
from typing import Any, Iterator, Sequence

INFINITY = math.inf
TIME_EPS = 1e-9


class ConfigurationError(ValueError):
    """Raised for malformed model parameters.

    ``fields`` lists the offending field names so front ends can report them.
    """

    def __init__(self, message: str, fields: Sequence[str] = ()):
        super().__init__(message)
        self.fields = list(fields)


class SimulationError(RuntimeError):
    """Internal invariant violation (e.g. time running backward)."""


def derive_seed(root_seed: int, *path: int | str) -> int:
    """Map ``(root_seed, path...)`` to a 64-bit seed with a stable hash.

    Strings in the path are hashed by their UTF-8 bytes, so actor and link
    names can be used directly as stream identifiers.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<Q", int(root_seed) % (1 << 64)))
    for part in path:
        if isinstance(part, str):
            data = part.encode("utf-8")
            h.update(b"s" + struct.pack("<I", len(data)) + data)
        else:
            h.update(b"i" + struct.pack("<Q", int(part) % (1 << 64)))
    return int.from_bytes(h.digest(), "little")


class RandomStream:
    """A reproducible random sample sequence identified by
    ``(root_seed, stream_path)``.

    Backed by :class:`random.Random` seeded from :func:`derive_seed`; scalar
    draws from the stdlib generator are much cheaper than numpy's in an
    event loop.
    """

    __slots__ = ("root_seed", "stream_path", "_rng", "draws")

    def __init__(self, root_seed: int, stream_path: Sequence[int | str] = ()):
        self.root_seed = int(root_seed)
        self.stream_path = tuple(stream_path)
        self._rng = random.Random(derive_seed(self.root_seed, *self.stream_path))
        self.draws = 0

    def child(self, *path: int | str) -> "RandomStream":
        return RandomStream(self.root_seed, self.stream_path + tuple(path))

    def uniform(self) -> float:
        self.draws += 1
        return self._rng.random()

    def gauss(self, mean: float, sd: float) -> float:
        self.draws += 1
        return self._rng.gauss(mean, sd)

    def randint(self, lo: int, hi: int) -> int:
        self.draws += 1
        return self._rng.randint(lo, hi)

    def __repr__(self) -> str:
        return f"RandomStream(root_seed={self.root_seed}, stream_path={self.stream_path})"


# -- distributions ---------------------------------------------------------


class Distribution:
    """Base class; subclasses implement :meth:`sample` and :meth:`mean`."""

    kind: str = ""

    def sample(self, stream: RandomStream) -> float:
        raise NotImplementedError

    def mean(self) -> float:
        raise NotImplementedError

    def to_dict(self) -> dict[str, Any]:
        raise NotImplementedError


@dataclass(frozen=True)
class Constant(Distribution):
    value: float
    kind = "constant"

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ConfigurationError(f"constant value must be finite, got {self.value}", ["value"])

    def sample(self, stream: RandomStream) -> float:
        return float(self.value)

    def mean(self) -> float:
        return float(self.value)

    def to_dict(self):
        return {"kind": self.kind, "value": self.value}


@dataclass(frozen=True)
class NormalTruncatedAtZero(Distribution):
    """Normal(mean, sd) conditioned on being non-negative.

    Sampling is by rejection, so there is no probability atom at zero.
    """

    mu: float
    sd: float
    kind = "normal"

    def __post_init__(self):
        if not (self.sd > 0 and math.isfinite(self.sd)):
            raise ConfigurationError(f"normal sd must be > 0, got {self.sd}", ["sd"])
        if not math.isfinite(self.mu):
            raise ConfigurationError(f"normal mean must be finite, got {self.mu}", ["mean"])
        if self.mu < -6 * self.sd:
            # acceptance probability below ~1e-9; rejection would stall
            raise ConfigurationError("normal mean too far below zero for truncation", ["mean"])

    def sample(self, stream: RandomStream) -> float:
        while True:
            x = stream.gauss(self.mu, self.sd)
            if x >= 0.0:
                return x

    def mean(self) -> float:
        a = -self.mu / self.sd
        # E[X | X >= 0] for X ~ N(mu, sd)
        pdf = math.exp(-0.5 * a * a) / math.sqrt(2 * math.pi)
        tail = 0.5 * math.erfc(a / math.sqrt(2))
        return self.mu + self.sd * pdf / tail

    def to_dict(self):
        return {"kind": self.kind, "mean": self.mu, "sd": self.sd}


@dataclass(frozen=True)
class UniformInt(Distribution):
    lo: int
    hi: int
    kind = "uniform_int"

    def __post_init__(self):
        if int(self.lo) != self.lo or int(self.hi) != self.hi:
            raise ConfigurationError("uniform bounds must be integers", ["lo", "hi"])
        if self.lo > self.hi:
            raise ConfigurationError(f"uniform lo > hi ({self.lo} > {self.hi})", ["lo", "hi"])

    def sample(self, stream: RandomStream) -> float:
        return stream.randint(int(self.lo), int(self.hi))

    def mean(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def to_dict(self):
        return {"kind": self.kind, "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class Bernoulli(Distribution):
    p: float
    kind = "bernoulli"

    def __post_init__(self):
        if not (0.0 <= self.p <= 1.0):
            raise ConfigurationError(f"bernoulli p must lie in [0, 1], got {self.p}", ["p"])

    def sample(self, stream: RandomStream) -> float:
        # always consume one draw so a p=0/p=1 link keeps stream alignment
        return 1 if stream.uniform() < self.p else 0

    def mean(self) -> float:
        return float(self.p)

    def to_dict(self):
        return {"kind": self.kind, "p": self.p}


def sample(dist: Distribution, stream: RandomStream) -> float:
    """Draw one value from ``dist`` using ``stream``."""
    return dist.sample(stream)


def distribution_from_dict(d: dict[str, Any] | float | int) -> Distribution:
    """Parse ``{"kind": ..., ...}``; a bare number means :class:`Constant`."""
    if isinstance(d, (int, float)):
        return Constant(float(d))
    if isinstance(d, Distribution):
        return d
    try:
        kind = d["kind"]
        if kind == "constant":
            return Constant(float(d["value"]))
        if kind == "normal":
            return NormalTruncatedAtZero(float(d["mean"]), float(d["sd"]))
        if kind == "uniform_int":
            return UniformInt(int(d["lo"]), int(d["hi"]))
        if kind == "bernoulli":
            return Bernoulli(float(d["p"]))
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"malformed distribution {d!r}: {exc}", ["kind"]) from exc
    raise ConfigurationError(f"unknown distribution kind {d.get('kind')!r}", ["kind"])


# -- event queue -----------------------------------------------------------


@dataclass(order=True)
class _Entry:
    time: float
    seq: int
    item: Any = field(compare=False)


class EventQueue:
    """Time-ordered pending set with FIFO tie-breaking on insertion order."""

    def __init__(self):
        self._heap: list[_Entry] = []
        self._seq = 0

    def push(self, time: float, item: Any, clock: float = 0.0) -> None:
        if time < clock:
            raise SimulationError(f"cannot schedule at {time} before clock {clock}")
        heapq.heappush(self._heap, _Entry(time, self._seq, item))
        self._seq += 1

    def peek_time(self) -> float:
        return self._heap[0].time if self._heap else INFINITY

    def pop(self) -> tuple[float, Any]:
        e = heapq.heappop(self._heap)
        return e.time, e.item

    def __len__(self) -> int:
        return len(self._heap)

    def __iter__(self) -> Iterator[tuple[float, Any]]:
        for e in sorted(self._heap):
            yield e.time, e.item


@dataclass
class DelayedMessage:
    payload: Any
    sender: str
    receiver: str
    deliver_at: float


def schedule(queue: EventQueue, msg: DelayedMessage, clock: float = 0.0) -> EventQueue:
    queue.push(msg.deliver_at, msg, clock)
    return queue
