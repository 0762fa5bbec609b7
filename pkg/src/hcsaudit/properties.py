"""Per-run quantitative properties with discard semantics.

A property returns either a float or :data:`DISCARD`. Discarded runs are
left out of both the sum and the count of an estimate and are tallied
separately.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Union

from .adversary import Detector, ObservableTrace
from .simcore import SimulationError

ORDINARY, HCS = "ordinary", "hcs"
WORLDS = (ORDINARY, HCS)


class _Discard:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "DISCARD"

    def __reduce__(self):
        return (_Discard, ())


DISCARD = _Discard()
PropertyValue = Union[float, _Discard]


def is_discard(v) -> bool:
    return v is DISCARD


@dataclass
class RunRecord:
    """Everything a property needs from one finished run."""

    world: str
    seed: int
    trace: ObservableTrace
    monitor: list[tuple[float, str, dict]] = field(default_factory=list)
    summary: dict[str, Any] = field(default_factory=dict)
    failed_delivery: bool = False
    observation_horizon: float | None = None
    units_per_second: float = 1000.0
    run_index: int = -1

    def observed(self) -> ObservableTrace:
        """Trace prefix visible to the detectors."""
        if self.observation_horizon is None:
            return self.trace
        return self.trace.prefix(self.observation_horizon)

    def first(self, tag: str) -> float | None:
        for t, g, _ in self.monitor:
            if g == tag:
                return t
        return None

    def to_dict(self) -> dict:
        return {
            "world": self.world,
            "seed": self.seed,
            "runIndex": self.run_index,
            "trace": self.trace.to_dict(),
            "monitor": [[t, g, p] for t, g, p in self.monitor],
            "summary": self.summary,
            "failedDelivery": self.failed_delivery,
            "observationHorizon": self.observation_horizon,
            "unitsPerSecond": self.units_per_second,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(d["world"], int(d["seed"]), ObservableTrace.from_dict(d["trace"]),
                   [(float(t), g, p) for t, g, p in d["monitor"]], d.get("summary", {}),
                   bool(d.get("failedDelivery", False)), d.get("observationHorizon"),
                   float(d.get("unitsPerSecond", 1000.0)), int(d.get("runIndex", -1)))


def save_archive(records: Iterable[RunRecord], directory: str | Path) -> Path:
    """Write one JSON file per run under ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for r in records:
        name = f"{r.world}-{r.run_index:06d}.json" if r.run_index >= 0 else f"{r.world}-seed{r.seed}.json"
        (d / name).write_text(json.dumps(r.to_dict(), sort_keys=True))
    return d


def load_archive(directory: str | Path) -> list[RunRecord]:
    return [RunRecord.from_dict(json.loads(p.read_text())) for p in sorted(Path(directory).glob("*.json"))]


def _require_hcs(run: RunRecord, name: str) -> None:
    if run.world != HCS:
        raise ValueError(f"{name} is defined for the hcs world only, got {run.world!r}")


def latency(run: RunRecord) -> PropertyValue:
    """Time from Alice's first chunk to the ack of her last file."""
    _require_hcs(run, "latency")
    if run.failed_delivery or not run.summary.get("numFiles"):
        return DISCARD
    start = run.first("exfilStart")
    if start is None:
        raise SimulationError("file-bearing run has no exfilStart monitor event")
    done = run.first("exfilDone")
    if done is None:
        return DISCARD  # unfinished at the horizon
    return done - start


def goodput(run: RunRecord) -> PropertyValue:
    """Acked covert bytes per second of latency."""
    lat = latency(run)
    if lat is DISCARD or lat <= 0:
        return DISCARD
    acked = sum(p.get("bytes", 0) for _, g, p in run.monitor if g == "fileAcked")
    return acked / (lat / run.units_per_second)


def op_duration(run: RunRecord, detector: Detector, origin: str = "exfil") -> PropertyValue:
    """Alarm time minus exfiltration start; discarded when no alarm fires.

    ``origin="experiment"`` measures from time zero instead.
    """
    _require_hcs(run, "op_duration")
    v = detector(run.observed())
    if not v.alarmed:
        return DISCARD
    if origin == "experiment":
        return v.alarm_time
    start = run.first("exfilStart")
    if start is None:
        return DISCARD
    return v.alarm_time - start


def alarm_indicator(run: RunRecord, detector: Detector) -> float:
    return 1.0 if detector(run.observed()).alarmed else 0.0


def summary_value(key: str) -> Callable[[RunRecord], PropertyValue]:
    """Property reading a numeric observer-summary entry (e.g. ``rttAv``)."""

    def prop(run: RunRecord) -> PropertyValue:
        v = run.summary.get(key)
        return DISCARD if v is None else float(v)

    prop.__name__ = key
    return prop
