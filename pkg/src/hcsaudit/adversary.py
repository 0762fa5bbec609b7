"""Passive observation at the NAT boundary and the detector families.

Detectors are pure functions of an :class:`ObservableTrace`:

* :class:`CumulativeCount` alarms at the first event whose running count of
  matching events strictly exceeds ``threshold``.
* :class:`MovingAverageRate` bins the timeline and alarms at the end of the
  ``consecutive``-th consecutive bin whose trailing-window average rate
  strictly exceeds ``k * base_rate``.

Any callable ``trace -> Verdict`` can stand in for a detector.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import IO, Any, Callable, Iterable, Sequence

import numpy as np

from .simcore import ConfigurationError

KINDS = ("DNSQuery", "DNSResponse", "HTTPSRequest", "HTTPSResponse")
EGRESS, INGRESS = "egress", "ingress"
CORPORATE, PUBLIC = "corporate", "public"

# ties between a windowed count and k*R*window are decided as "not exceeding"
# when closer than this, so float rounding in k*R cannot flip a strict test
COUNT_TIE_EPS = 1e-9


@dataclass(frozen=True, slots=True)
class ObservableEvent:
    time: float
    kind: str
    direction: str
    size: int
    source_class: str

    def to_dict(self) -> dict:
        return {"time": self.time, "kind": self.kind, "direction": self.direction, "size": self.size,
                "sourceClass": self.source_class}

    @classmethod
    def from_dict(cls, d: dict) -> "ObservableEvent":
        return cls(float(d["time"]), d["kind"], d["direction"], int(d["size"]), d.get("sourceClass", CORPORATE))


@dataclass(frozen=True)
class ObservableTrace:
    events: tuple[ObservableEvent, ...]
    horizon: float

    def __post_init__(self):
        times = [e.time for e in self.events]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("trace events must be time ordered")
        if times and times[-1] > self.horizon:
            raise ValueError(f"event at {times[-1]} beyond horizon {self.horizon}")

    def __len__(self):
        return len(self.events)

    def prefix(self, t: float) -> "ObservableTrace":
        if t >= self.horizon:
            return self
        return ObservableTrace(tuple(e for e in self.events if e.time <= t), t)

    def times(self, kind: str | None = None, direction: str | None = None) -> np.ndarray:
        return np.fromiter(
            (e.time for e in self.events
             if (kind is None or e.kind == kind) and (direction is None or e.direction == direction)),
            dtype=float,
        )

    def to_dict(self) -> dict:
        return {"horizon": self.horizon, "events": [[e.time, e.kind, e.direction, e.size, e.source_class]
                                                    for e in self.events]}

    @classmethod
    def from_dict(cls, d: dict) -> "ObservableTrace":
        return cls(tuple(ObservableEvent(float(t), k, dr, int(s), sc) for t, k, dr, s, sc in d["events"]),
                   float(d["horizon"]))


def write_ndjson(trace: ObservableTrace, fh: IO[str]) -> None:
    """One JSON record per event: time, kind, direction, size."""
    for e in trace.events:
        fh.write(json.dumps({"time": e.time, "kind": e.kind, "direction": e.direction, "size": e.size}) + "\n")


def read_ndjson(fh: IO[str], horizon: float | None = None) -> ObservableTrace:
    events = [ObservableEvent(float(r["time"]), r["kind"], r["direction"], int(r["size"]),
                              r.get("sourceClass", CORPORATE))
              for r in map(json.loads, filter(str.strip, fh))]
    h = horizon if horizon is not None else (events[-1].time if events else 0.0)
    return ObservableTrace(tuple(events), h)


def observe(msg, at: float, zones: dict[str, str], router: str = "router") -> ObservableEvent | None:
    """Adversary view of one message hop, or ``None`` if the hop does not
    cross the NAT boundary.

    Only hops between the router and a public-zone actor are visible; the
    payload is never inspected.
    """
    if msg.sender == router and zones.get(msg.receiver) == PUBLIC:
        return ObservableEvent(at, msg.kind, EGRESS, msg.size, CORPORATE)
    if msg.receiver == router and zones.get(msg.sender) == PUBLIC:
        return ObservableEvent(at, msg.kind, INGRESS, msg.size, PUBLIC)
    return None


@dataclass(frozen=True)
class Verdict:
    alarmed: bool
    alarm_time: float | None = None

    def __post_init__(self):
        if self.alarmed != (self.alarm_time is not None):
            raise ValueError("alarm_time must be present iff alarmed")


NO_ALARM = Verdict(False)


@dataclass(frozen=True)
class CumulativeCount:
    kind: str
    threshold: int
    direction: str | None = EGRESS
    name: str = ""

    def __post_init__(self):
        if self.threshold < 1 or int(self.threshold) != self.threshold:
            raise ConfigurationError(f"cumulative threshold must be a natural >= 1, got {self.threshold}",
                                     ["threshold"])

    def __call__(self, trace: ObservableTrace) -> Verdict:
        times = trace.times(self.kind, self.direction)
        n = int(self.threshold)
        if len(times) > n:
            return Verdict(True, float(times[n]))
        return NO_ALARM

    def with_threshold(self, n: int) -> "CumulativeCount":
        return CumulativeCount(self.kind, int(n), self.direction, self.name)

    def to_dict(self) -> dict:
        return {"name": self.name, "type": "cumulative", "kind": self.kind, "threshold": int(self.threshold),
                "direction": self.direction}


@dataclass(frozen=True)
class MovingAverageRate:
    """Windowed-rate detector.

    ``window`` and ``bin_size`` are in trace time units; ``base_rate`` is in
    events per second with ``units_per_second`` time units per second. When
    ``warmup`` is set the window starts pre-filled with baseline events
    spread over ``[-window, 0)``.
    """

    kind: str
    k: float
    base_rate: float
    window: float = 60_000.0
    bin_size: float = 10_000.0
    consecutive: int = 1
    units_per_second: float = 1000.0
    warmup: bool = True
    direction: str | None = EGRESS
    name: str = ""

    def __post_init__(self):
        bad = [f for f, ok in (("window", self.window > 0), ("binSize", self.bin_size > 0), ("k", self.k > 0),
                               ("consecutiveBins", self.consecutive >= 1), ("baseRate", self.base_rate >= 0),
                               ("unitsPerSecond", self.units_per_second > 0)) if not ok]
        if bad:
            raise ConfigurationError(f"invalid moving-average detector fields: {', '.join(bad)}", bad)

    def bin_ends(self, horizon: float) -> np.ndarray:
        nbins = int(math.floor(horizon / self.bin_size + 1e-9))
        return self.bin_size * np.arange(1, nbins + 1, dtype=float)

    def window_counts(self, trace: ObservableTrace) -> tuple[np.ndarray, np.ndarray]:
        """Bin end times and the (possibly fractional) event count in
        ``[end - window, end)`` for each bin."""
        times = trace.times(self.kind, self.direction)
        ends = self.bin_ends(trace.horizon)
        counts = (np.searchsorted(times, ends, side="left")
                  - np.searchsorted(times, ends - self.window, side="left")).astype(float)
        if self.warmup:
            counts += self.base_rate * np.clip(self.window - ends, 0.0, None) / self.units_per_second
        return ends, counts

    @property
    def count_threshold(self) -> float:
        return self.k * self.base_rate * self.window / self.units_per_second

    def __call__(self, trace: ObservableTrace) -> Verdict:
        ends, counts = self.window_counts(trace)
        hot = counts > self.count_threshold + COUNT_TIE_EPS
        run = 0
        for i, h in enumerate(hot):
            run = run + 1 if h else 0
            if run >= self.consecutive:
                return Verdict(True, float(ends[i]))
        return NO_ALARM

    def with_k(self, k: float) -> "MovingAverageRate":
        from dataclasses import replace

        return replace(self, k=float(k))

    def with_base_rate(self, r: float) -> "MovingAverageRate":
        from dataclasses import replace

        return replace(self, base_rate=float(r))

    def to_dict(self) -> dict:
        return {"name": self.name, "type": "moving_average", "kind": self.kind, "k": self.k,
                "baseRate": self.base_rate, "window": self.window, "binSize": self.bin_size,
                "consecutiveBins": self.consecutive, "unitsPerSecond": self.units_per_second,
                "warmup": self.warmup, "direction": self.direction}


@dataclass(frozen=True)
class AlwaysAlarm:
    """Degenerate detector alarming at time 0 on every trace."""

    name: str = "always"

    def __call__(self, trace: ObservableTrace) -> Verdict:
        return Verdict(True, 0.0)

    def to_dict(self) -> dict:
        return {"name": self.name, "type": "always"}


Detector = Callable[[ObservableTrace], Verdict]


def run_detector(d: Detector, trace: ObservableTrace) -> Verdict:
    return d(trace)


def detector_from_dict(d: dict[str, Any]) -> Detector:
    """Build a detector from its config record.

    Calibration placeholders (``"threshold": "calibrate"`` or a missing
    ``baseRate``) must be resolved before this call; see
    :func:`hcsaudit.smc.resolve_detectors`.
    """
    typ = d.get("type")
    name = d.get("name", "")
    direction = d.get("direction", EGRESS)
    try:
        if typ == "cumulative":
            return CumulativeCount(d["kind"], int(d["threshold"]), direction, name)
        if typ == "moving_average":
            return MovingAverageRate(
                d["kind"], float(d["k"]), float(d["baseRate"]), float(d.get("window", 60_000.0)),
                float(d.get("binSize", 10_000.0)), int(d.get("consecutiveBins", 1)),
                float(d.get("unitsPerSecond", 1000.0)), bool(d.get("warmup", True)), direction, name)
        if typ == "always":
            return AlwaysAlarm(name or "always")
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"detector {name or typ!r}: missing or malformed field {exc}",
                                 [f"detectors.{name}"]) from exc
    raise ConfigurationError(f"unknown detector type {typ!r}", ["detectors.type"])


def needs_calibration(d: dict[str, Any]) -> bool:
    if d.get("type") == "cumulative":
        return not isinstance(d.get("threshold"), int)
    if d.get("type") == "moving_average":
        return not isinstance(d.get("baseRate"), (int, float))
    return False


# -- calibration from ordinary-world traces -------------------------------


def calibrate_cumulative_threshold(traces: Sequence[ObservableTrace], kind: str, fp_budget: float,
                                   direction: str | None = EGRESS) -> int:
    """Smallest ``N >= 1`` whose empirical false-alarm rate over ``traces``
    is at most ``fp_budget``."""
    if not traces:
        raise ValueError("calibration needs at least one trace")
    counts = np.sort([len(t.times(kind, direction)) for t in traces])
    allowed = int(math.floor(fp_budget * len(counts) + 1e-12))
    # alarms are counts > N; at most `allowed` traces may exceed N
    n = int(counts[len(counts) - 1 - allowed]) if allowed < len(counts) else 0
    return max(1, n)


def calibrate_base_rate(traces: Sequence[ObservableTrace], kind: str, units_per_second: float = 1000.0,
                        direction: str | None = EGRESS) -> float:
    """Mean matching-event rate (events per second) over the traces."""
    total = sum(len(t.times(kind, direction)) for t in traces)
    span = sum(t.horizon for t in traces) / units_per_second
    return total / span if span > 0 else 0.0


def alarm_times(detector: Detector, traces: Iterable[ObservableTrace]) -> list[Verdict]:
    return [detector(t) for t in traces]
