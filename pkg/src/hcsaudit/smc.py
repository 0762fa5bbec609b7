"""Monte-Carlo estimation with confidence guarantees.

Real-valued properties get a Student-t confidence radius and sequential
stopping once the radius reaches ``delta / 2``. Detector alarm rates use a
fixed number of runs and exact Clopper-Pearson intervals.

Run ``i`` of a world always uses seed ``derive_seed(root, tag, i)`` and the
stopping rule is checked in run-index order, so results do not depend on the
number of workers.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .adversary import (
    Detector,
    ObservableTrace,
    calibrate_base_rate,
    calibrate_cumulative_threshold,
    detector_from_dict,
    needs_calibration,
)
from .properties import DISCARD, HCS, ORDINARY, RunRecord, alarm_indicator
from .rtt import RttConfig, run_rtt
from .simcore import ConfigurationError, derive_seed
from .tunnel import ScenarioConfig, run_scenario


class EstimationImpossible(RuntimeError):
    """Every run was discarded, so there is no sample to average."""

    def __init__(self, message: str, n_discarded: int):
        super().__init__(message)
        self.n_discarded = n_discarded


@dataclass(frozen=True)
class SmcParams:
    alpha: float = 0.05
    delta: float = 1.0
    min_runs: int = 30
    max_runs: int = 2000
    workers: int = 1
    batch: int = 64

    def __post_init__(self):
        bad = [n for n, ok in (("alpha", 0 < self.alpha < 1), ("delta", self.delta > 0),
                               ("minRuns", self.min_runs >= 2), ("maxRuns", self.max_runs >= self.min_runs),
                               ("workers", self.workers >= 1), ("batch", self.batch >= 1)) if not ok]
        if bad:
            raise ConfigurationError(f"invalid SMC parameters: {', '.join(bad)}", bad)

    def fixed(self, n: int) -> "SmcParams":
        """Parameters forcing exactly ``n`` runs."""
        from dataclasses import replace

        return replace(self, min_runs=max(2, n), max_runs=max(2, n), delta=1e-300)


@dataclass(frozen=True)
class Estimate:
    mean: float | None
    radius: float | None
    confidence: float
    n_used: int
    n_discarded: int
    status: str  # "converged", "maxRuns", "fixed" or "impossible"

    @property
    def n_total(self) -> int:
        return self.n_used + self.n_discarded

    def to_dict(self) -> dict:
        return {"mean": self.mean, "radius": self.radius, "confidence": self.confidence,
                "nUsed": self.n_used, "nDiscarded": self.n_discarded, "status": self.status}


@dataclass(frozen=True)
class RateEstimate:
    successes: int
    trials: int
    lower: float
    upper: float
    coverage: float

    @property
    def point(self) -> float:
        return self.successes / self.trials

    def to_dict(self) -> dict:
        return {"successes": self.successes, "trials": self.trials, "point": self.point,
                "lower": self.lower, "upper": self.upper, "coverage": self.coverage}


# -- interval arithmetic --------------------------------------------------------


def clopper_pearson(successes: int, trials: int, coverage: float = 0.95) -> RateEstimate:
    """Exact two-sided binomial interval with equal tail mass."""
    if trials < 1 or not 0 <= successes <= trials:
        raise ValueError(f"need 0 <= successes <= trials, trials >= 1; got {successes}/{trials}")
    if not 0 < coverage < 1:
        raise ValueError(f"coverage must lie in (0, 1), got {coverage}")
    a = 1.0 - coverage
    k, n = successes, trials
    lo = 0.0 if k == 0 else float(stats.beta.ppf(a / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(stats.beta.ppf(1 - a / 2, k + 1, n - k))
    return RateEstimate(k, n, lo, hi, coverage)


def per_interval_coverage(joint: float, intervals: int = 2) -> float:
    """Union-bound split: each of ``intervals`` intervals at ``1 - (1-joint)/intervals``."""
    return 1.0 - (1.0 - joint) / intervals


def t_radius(values: Sequence[float], alpha: float) -> float:
    n = len(values)
    if n < 2:
        return math.inf
    sd = float(np.std(values, ddof=1))
    if sd == 0.0:
        return 0.0
    return float(stats.t.ppf(1 - alpha / 2, n - 1)) * sd / math.sqrt(n)


class _Accumulator:
    __slots__ = ("n", "mean", "m2", "discarded", "delta")

    # Welford updates keep the running radius O(1) per sample

    def __init__(self, delta: float):
        self.n, self.mean, self.m2, self.discarded = 0, 0.0, 0.0, 0
        self.delta = delta

    def add(self, v) -> None:
        if v is DISCARD:
            self.discarded += 1
            return
        v = float(v)
        self.n += 1
        d = v - self.mean
        self.mean += d / self.n
        self.m2 += d * (v - self.mean)

    def radius(self, alpha: float) -> float:
        if self.n < 2:
            return math.inf
        var = self.m2 / (self.n - 1)
        if var <= 1e-300:
            return 0.0
        return float(stats.t.ppf(1 - alpha / 2, self.n - 1)) * math.sqrt(var / self.n)

    def converged(self, p: SmcParams) -> bool:
        return self.n >= p.min_runs and self.radius(p.alpha) <= self.delta / 2

    def estimate(self, p: SmcParams, status: str) -> Estimate:
        if self.n == 0:
            return Estimate(None, None, 1 - p.alpha, 0, self.discarded, "impossible")
        r = self.radius(p.alpha)
        return Estimate(self.mean, None if math.isinf(r) else r, 1 - p.alpha, self.n, self.discarded, status)


# -- runners ---------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioRunner:
    """Picklable ``i -> RunRecord`` for one world of a tunnel scenario."""

    scenario: ScenarioConfig
    world: str
    root_seed: int
    tag: str | None = None

    def seed(self, i: int) -> int:
        return derive_seed(self.root_seed, self.tag or self.world, i)

    def __call__(self, i: int) -> RunRecord:
        return run_scenario(self.scenario, self.world, self.seed(i), i)


@dataclass(frozen=True)
class RttRunner:
    """Picklable ``i -> RunRecord`` for the RTT/WRTT model; the summary holds
    ``rttAv``, ``enAv`` and ``enList``."""

    cfg: RttConfig
    root_seed: int
    covert: bool | None = None

    @property
    def world(self) -> str:
        return HCS if (self.cfg.covert if self.covert is None else self.covert) else ORDINARY

    def seed(self, i: int) -> int:
        return derive_seed(self.root_seed, "rtt", i)

    def __call__(self, i: int) -> RunRecord:
        s = self.seed(i)
        sim = run_rtt(self.cfg, s, self.covert)
        return RunRecord(self.world, s, ObservableTrace((), sim.end_time), list(sim.monitor.events),
                         dict(sim.observer.summary), False, None, 1000.0, i)


def map_runs(run_fn: Callable[[int], Any], indices: Sequence[int], workers: int = 1,
             pool: ProcessPoolExecutor | None = None) -> list:
    """Evaluate ``run_fn`` over ``indices``; output order follows ``indices``."""
    if pool is None or workers <= 1 or len(indices) < 2:
        return [run_fn(i) for i in indices]
    chunk = max(1, len(indices) // (4 * workers))
    return list(pool.map(run_fn, indices, chunksize=chunk))


class _Pool:
    def __init__(self, workers: int):
        self.workers = workers
        self.pool = ProcessPoolExecutor(workers) if workers > 1 else None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        if self.pool is not None:
            self.pool.shutdown()

    def map(self, fn, indices):
        return map_runs(fn, list(indices), self.workers, self.pool)


# -- estimation ------------------------------------------------------------


def estimate_expectations(run_fn: Callable[[int], Any], props: Mapping[str, Callable[[Any], Any]],
                          params: SmcParams, keep: Callable[[Any], None] | None = None,
                          deltas: Mapping[str, float] | None = None) -> dict[str, Estimate]:
    """Sequentially estimate several properties from the same runs.

    Stops at the first run index after which every property has at least
    ``min_runs`` non-discarded values and a radius of at most half its
    target width (``deltas[name]``, default ``params.delta``), or at
    ``max_runs``. ``keep`` receives each consumed run record (e.g. to archive
    it).
    """
    deltas = dict(deltas or {})
    accs = {name: _Accumulator(deltas.get(name, params.delta)) for name in props}
    i = 0
    with _Pool(params.workers) as pool:
        while i < params.max_runs:
            hi = min(i + max(params.batch, params.workers * 8), params.max_runs)
            for idx, rec in zip(range(i, hi), pool.map(run_fn, range(i, hi))):
                for name, prop in props.items():
                    accs[name].add(prop(rec))
                if keep is not None:
                    keep(rec)
                i = idx + 1
                if all(a.converged(params) for a in accs.values()):
                    return {n: a.estimate(params, "converged") for n, a in accs.items()}
    return {n: a.estimate(params, "maxRuns") for n, a in accs.items()}


def fixed_estimate(values: Iterable[Any], alpha: float = 0.05) -> Estimate:
    """Estimate over a fixed sample (no stopping rule)."""
    acc = _Accumulator(math.inf)
    for v in values:
        acc.add(v)
    return acc.estimate(SmcParams(alpha=alpha), "fixed")


def estimate_mean(sample_fn: Callable[[int], Any], params: SmcParams) -> Estimate:
    """Single-property form: ``sample_fn(i)`` returns the value (or DISCARD)
    of run ``i`` directly."""
    est = estimate_expectations(sample_fn, {"value": lambda v: v}, params)["value"]
    if est.status == "impossible":
        raise EstimationImpossible(f"all {est.n_discarded} runs discarded", est.n_discarded)
    return est


def run_records(run_fn: Callable[[int], RunRecord], n: int, workers: int = 1) -> list[RunRecord]:
    with _Pool(workers) as pool:
        return pool.map(run_fn, range(n))


def rates_from_records(detector: Detector, hcs_runs: Sequence[RunRecord], ordinary_runs: Sequence[RunRecord],
                       joint_coverage: float = 0.95) -> tuple[RateEstimate, RateEstimate]:
    """TPR interval from HCS alarm indicators and FPR from ordinary ones."""
    cov = per_interval_coverage(joint_coverage)
    k_t = int(sum(alarm_indicator(r, detector) for r in hcs_runs))
    k_f = int(sum(alarm_indicator(r, detector) for r in ordinary_runs))
    return clopper_pearson(k_t, len(hcs_runs), cov), clopper_pearson(k_f, len(ordinary_runs), cov)


def world_runners(sc: ScenarioConfig, root_seed: int, paired: bool = False) -> tuple[ScenarioRunner, ScenarioRunner]:
    """HCS and ordinary runners. Paired mode gives run ``i`` of both worlds
    the same seed; independent mode (default) uses per-world seed streams."""
    if paired:
        return ScenarioRunner(sc, HCS, root_seed, "paired"), ScenarioRunner(sc, ORDINARY, root_seed, "paired")
    return ScenarioRunner(sc, HCS, root_seed), ScenarioRunner(sc, ORDINARY, root_seed)


def estimate_rates(detectors: Sequence[Detector], sc: ScenarioConfig, n: int, joint_coverage: float = 0.95,
                   root_seed: int = 1, workers: int = 1, paired: bool = False
                   ) -> list[tuple[RateEstimate, RateEstimate]]:
    """Fixed-``n`` TPR/FPR intervals for each detector over the same run sets."""
    if n < 1:
        raise ValueError("n must be >= 1")
    h, o = world_runners(sc, root_seed, paired)
    hcs_runs, ord_runs = run_records(h, n, workers), run_records(o, n, workers)
    return [rates_from_records(d, hcs_runs, ord_runs, joint_coverage) for d in detectors]


# -- calibration -----------------------------------------------------------

CALIBRATION_TAG = "calibration"


def calibration_traces(sc: ScenarioConfig, runs: int, root_seed: int, workers: int = 1) -> list[ObservableTrace]:
    """Observed prefixes of ordinary-world runs on a seed stream disjoint
    from the estimation runs."""
    runner = ScenarioRunner(sc, ORDINARY, root_seed, CALIBRATION_TAG)
    return [r.observed() for r in run_records(runner, runs, workers)]


def resolve_detectors(specs: Iterable[dict], sc: ScenarioConfig, root_seed: int, runs: int = 100,
                      workers: int = 1, traces: list[ObservableTrace] | None = None
                      ) -> tuple[list[Detector], list[dict]]:
    """Turn config records into detectors, calibrating placeholders.

    A cumulative record with ``"threshold": {"fpBudget": b}`` gets the
    smallest N with empirical ordinary-world alarm rate at most ``b``; a
    moving-average record without a numeric ``baseRate`` gets the mean
    ordinary-world rate. Returns the detectors and their resolved records.
    """
    specs = list(specs)
    if traces is None and any(needs_calibration(s) for s in specs):
        traces = calibration_traces(sc, runs, root_seed, workers)
    out, resolved = [], []
    for s in specs:
        s = dict(s)
        direction = s.get("direction", "egress")
        if s.get("type") == "cumulative" and needs_calibration(s):
            th = s.get("threshold")
            budget = th.get("fpBudget", 0.05) if isinstance(th, dict) else 0.05
            s["threshold"] = calibrate_cumulative_threshold(traces, s["kind"], budget, direction)
            s["calibratedFrom"] = {"fpBudget": budget, "runs": len(traces)}
        elif s.get("type") == "moving_average" and needs_calibration(s):
            s["baseRate"] = calibrate_base_rate(traces, s["kind"], s.get("unitsPerSecond", sc.unitsPerSecond),
                                                direction)
            s["calibratedFrom"] = {"runs": len(traces)}
        if s.get("type") == "moving_average":
            s.setdefault("unitsPerSecond", sc.unitsPerSecond)
        out.append(detector_from_dict(s))
        resolved.append(s)
    return out, resolved
