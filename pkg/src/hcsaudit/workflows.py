"""Orchestration behind the command line: simulate, audit, sweep,
calibrate and replay. Each returns a JSON-ready report dict.

Reports contain no wall-clock data, so repeating a call with the same seed
reproduces them exactly.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .adversary import Detector, needs_calibration
from .config import Experiment, SweepSpec, apply_axis, ordinary_key, smc_from_dict
from .kl import audit_claim, certified_lower_bound, posterior_odds
from .properties import (
    HCS,
    ORDINARY,
    RunRecord,
    goodput,
    latency,
    load_archive,
    op_duration,
    save_archive,
    summary_value,
)
from .simcore import ConfigurationError
from .smc import (
    RttRunner,
    ScenarioRunner,
    SmcParams,
    calibration_traces,
    estimate_expectations,
    fixed_estimate,
    rates_from_records,
    resolve_detectors,
    run_records,
    world_runners,
)


def egress_count(kind: str):
    def prop(run: RunRecord) -> float:
        return float(len(run.observed().times(kind, "egress")))

    prop.__name__ = f"egress{kind}"
    return prop


def tunnel_properties(world: str) -> dict:
    props = {"egressDNSQuery": egress_count("DNSQuery"), "egressHTTPSRequest": egress_count("HTTPSRequest")}
    if world == HCS:
        props = {"latency": latency, "goodput": goodput, **props}
    return props


def clean(obj: Any) -> Any:
    """Replace non-finite floats by ``None`` so the output is strict JSON."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    return obj


def dumps(report: dict) -> str:
    return json.dumps(clean(report), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _header(command: str, exp: Experiment, seed: int) -> dict:
    return {"command": command, "tool": f"hcsaudit {__version__}", "seed": seed, "config": exp.to_dict(),
            "instantiation": {"model": exp.kind, "scenario": exp.name,
                              "note": "results hold for this instantiated model, adversary and environment only"}}


# -- simulate -----------------------------------------------------------------


def simulate(exp: Experiment, world: str, seed: int, workers: int = 1, runs: int | None = None,
             alpha: float | None = None, delta: float | None = None, archive: str | Path | None = None) -> dict:
    """Estimate the world's properties with the SMC stopping rule, or over
    exactly ``runs`` runs when given."""
    smc = dict(exp.smc)
    if alpha is not None:
        smc["alpha"] = alpha
    if delta is not None:
        smc["delta"] = delta
    params, deltas = smc_from_dict(smc, workers)
    if runs is not None:
        params, deltas = params.fixed(runs), {}
    if exp.kind == "rtt":
        runner = RttRunner(exp.rtt, seed, covert=(world == HCS))
        props = {"rttAv": summary_value("rttAv"), "enAv": summary_value("enAv")}
    else:
        runner = ScenarioRunner(exp.scenario, world, seed)
        props = tunnel_properties(world)
    kept: list[RunRecord] = []
    est = estimate_expectations(runner, props, params, kept.append if archive else None, deltas)
    if archive:
        save_archive(kept, archive)
    rep = _header("simulate", exp, seed)
    rep.update({"world": world,
                "smc": {"alpha": params.alpha, "minRuns": params.min_runs, "maxRuns": params.max_runs,
                        "delta": {n: deltas.get(n, params.delta) for n in props} if runs is None else None,
                        "fixedRuns": runs},
                "estimates": {n: e.to_dict() for n, e in est.items()},
                "impossible": sorted(n for n, e in est.items() if e.status == "impossible")})
    return rep


# -- audit ------------------------------------------------------------------


@dataclass
class RunSets:
    hcs: list[RunRecord]
    ordinary: list[RunRecord]


def detector_rows(detectors: Sequence[Detector], specs: Sequence[dict], runs: RunSets, exp: Experiment,
                  joint: float, alpha: float, claims=None) -> list[dict]:
    claims = exp.audit.claims if claims is None else claims
    out = []
    for det, spec in zip(detectors, specs):
        tpr, fpr = rates_from_records(det, runs.hcs, runs.ordinary, joint)
        res = certified_lower_bound(tpr, fpr)
        op = fixed_estimate((op_duration(r, det, exp.audit.op_origin) for r in runs.hcs), alpha)
        post = posterior_odds(exp.audit.prior, res.bound) if math.isfinite(res.bound) else None
        out.append({
            "detector": spec,
            "nPerWorld": {"hcs": len(runs.hcs), "ordinary": len(runs.ordinary)},
            "kl": res.to_dict(),
            "infiniteBoundCaveat": (f"bound is infinite because an interval endpoint is exactly 0 or 1; "
                                    f"evidence is one-sided over n={tpr.trials}/{fpr.trials}") if res.infinite
            else None,
            "opDuration": op.to_dict(),
            "posterior": None if post is None else {"prior": exp.audit.prior, "priorOdds": post.prior_odds,
                                                    "posteriorOdds": post.posterior_odds,
                                                    "posteriorProb": post.posterior_prob},
            "claims": [_claim_row(res, c) for c in claims],
        })
    return out


def _claim_row(res, claim) -> dict:
    v = audit_claim(res, claim)
    return {"d": claim.d, "measure": claim.measure, "horizon": claim.horizon, "verdict": v.verdict, "text": v.text}


def _resolve(exp: Experiment, seed: int, workers: int):
    return resolve_detectors(exp.detectors, exp.scenario, seed, exp.audit.calibration_runs, workers)


def _require_tunnel(exp: Experiment, what: str) -> None:
    if exp.kind != "tunnel":
        raise ConfigurationError(f"{what} needs a tunnel experiment (got {exp.kind})", ["type"])


def audit(exp: Experiment, seed: int, workers: int = 1, runs: int | None = None, alpha: float | None = None,
          archive: str | Path | None = None) -> dict:
    """Rates, certified bound and claim verdicts for every detector."""
    _require_tunnel(exp, "audit")
    if not exp.detectors:
        raise ConfigurationError("audit needs at least one detector", ["detectors"])
    n = runs or exp.audit.runs
    joint = 1.0 - alpha if alpha is not None else exp.audit.joint_coverage
    est_alpha = float(exp.smc.get("alpha", 0.05)) if alpha is None else alpha
    detectors, specs = _resolve(exp, seed, workers)
    h, o = world_runners(exp.scenario, seed, exp.audit.paired)
    sets = RunSets(run_records(h, n, workers), run_records(o, n, workers))
    if archive:
        save_archive(sets.hcs + sets.ordinary, archive)
        (Path(archive) / "detectors.resolved").write_text(json.dumps(specs, sort_keys=True, indent=2))
    rep = _header("audit", exp, seed)
    rep.update({
        "runsPerWorld": n,
        "jointCoverage": joint,
        "seedStreams": "paired" if exp.audit.paired else "independent",
        "performance": {"latency": fixed_estimate(map(latency, sets.hcs), est_alpha).to_dict(),
                        "goodput": fixed_estimate(map(goodput, sets.hcs), est_alpha).to_dict()},
        "detectors": detector_rows(detectors, specs, sets, exp, joint, est_alpha),
    })
    return rep


# -- calibrate ----------------------------------------------------------------


def calibrate(exp: Experiment, seed: int, workers: int = 1, runs: int | None = None) -> dict:
    _require_tunnel(exp, "calibrate")
    n = runs or exp.audit.calibration_runs
    _, specs = resolve_detectors(exp.detectors, exp.scenario, seed, n, workers)
    rep = _header("calibrate", exp, seed)
    rep.update({"calibrationRuns": n, "detectors": specs})
    return rep


# -- sweep ------------------------------------------------------------------

CSV_BASE = ["axis", "value", "n",
            "goodput_mean", "goodput_radius", "goodput_n", "goodput_discarded",
            "latency_mean", "latency_radius", "latency_n", "latency_discarded"]
CSV_DETECTOR = ["tpr", "tpr_lo", "tpr_hi", "fpr", "fpr_lo", "fpr_hi", "coverage", "kl_nats", "kl_bits", "case",
                "op_mean", "op_radius", "op_n", "op_discarded", "verdict"]


def csv_columns(detector_names: Sequence[str]) -> list[str]:
    return CSV_BASE + [f"{d}_{c}" for d in detector_names for c in CSV_DETECTOR] + ["error"]


def _flatten(axis: str, value: float, row: dict | None, names: Sequence[str], error: str = "") -> dict:
    out = {c: "" for c in csv_columns(names)}
    out.update(axis=axis, value=value, error=error)
    if row is None:
        return out
    out["n"] = row["runsPerWorld"]
    for p in ("goodput", "latency"):
        e = row["performance"][p]
        out.update({f"{p}_mean": e["mean"], f"{p}_radius": e["radius"], f"{p}_n": e["nUsed"],
                    f"{p}_discarded": e["nDiscarded"]})
    for d in row["detectors"]:
        nm, kl = d["detector"]["name"], d["kl"]
        out.update({
            f"{nm}_tpr": kl["tpr"]["point"], f"{nm}_tpr_lo": kl["tpr"]["lower"], f"{nm}_tpr_hi": kl["tpr"]["upper"],
            f"{nm}_fpr": kl["fpr"]["point"], f"{nm}_fpr_lo": kl["fpr"]["lower"], f"{nm}_fpr_hi": kl["fpr"]["upper"],
            f"{nm}_coverage": kl["jointCoverage"],
            f"{nm}_kl_nats": "inf" if kl["infiniteBound"] else kl["boundNats"],
            f"{nm}_kl_bits": "inf" if kl["infiniteBound"] else kl["boundBits"],
            f"{nm}_case": kl["case"],
            f"{nm}_op_mean": d["opDuration"]["mean"], f"{nm}_op_radius": d["opDuration"]["radius"],
            f"{nm}_op_n": d["opDuration"]["nUsed"], f"{nm}_op_discarded": d["opDuration"]["nDiscarded"],
            f"{nm}_verdict": ";".join(c["verdict"] for c in d["claims"]),
        })
    return {k: ("" if v is None else v) for k, v in out.items()}


def to_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


class _RunCache:
    """Run sets and calibrations keyed by the configuration they depend on,
    so a sweep point never recomputes what an earlier point already has.
    Keys include everything that determines the result, so cached values
    equal fresh ones exactly."""

    def __init__(self, seed: int, workers: int):
        self.seed, self.workers = seed, workers
        self.runs: dict[tuple, list[RunRecord]] = {}
        self.calib: dict[tuple, list] = {}

    def world(self, exp: Experiment, world: str, n: int) -> list[RunRecord]:
        sc = exp.scenario
        key_sc = ordinary_key(sc) if world == ORDINARY else json.dumps(sc.to_dict(), sort_keys=True)
        key = (world, key_sc, n, exp.audit.paired)
        if key not in self.runs:
            h, o = world_runners(sc, self.seed, exp.audit.paired)
            self.runs[key] = run_records(h if world == HCS else o, n, self.workers)
        return self.runs[key]

    def traces(self, exp: Experiment):
        key = (ordinary_key(exp.scenario), exp.audit.calibration_runs)
        if key not in self.calib:
            self.calib[key] = calibration_traces(exp.scenario, exp.audit.calibration_runs, self.seed, self.workers)
        return self.calib[key]


def sweep_point(exp: Experiment, cache: _RunCache, n: int, joint: float, alpha: float, claims) -> dict:
    detectors, specs = resolve_detectors(exp.detectors, exp.scenario, cache.seed, exp.audit.calibration_runs,
                                         cache.workers, cache.traces(exp))
    sets = RunSets(cache.world(exp, HCS, n), cache.world(exp, ORDINARY, n))
    return {"runsPerWorld": n,
            "scenario": exp.scenario.to_dict(),
            "performance": {"latency": fixed_estimate(map(latency, sets.hcs), alpha).to_dict(),
                            "goodput": fixed_estimate(map(goodput, sets.hcs), alpha).to_dict()},
            "detectors": detector_rows(detectors, specs, sets, exp, joint, alpha, claims)}


def sweep(spec: SweepSpec, seed: int, workers: int = 1, runs: int | None = None,
          alpha: float | None = None) -> tuple[dict, str]:
    """One row per axis value (ascending). A failing point is recorded in
    its row's ``error`` column and the sweep continues."""
    base = spec.base
    n = runs or base.audit.runs
    joint = 1.0 - alpha if alpha is not None else base.audit.joint_coverage
    est_alpha = float(base.smc.get("alpha", 0.05)) if alpha is None else alpha
    names = [d["name"] for d in base.detectors]
    cache = _RunCache(seed, workers)
    rows, flat = [], []
    for v in spec.values:
        try:
            row = sweep_point(apply_axis(base, spec.axis, v), cache, n, joint, est_alpha, spec.claims)
            rows.append({"value": v, **row})
            flat.append(_flatten(spec.axis, v, row, names))
        except (ConfigurationError, ValueError, RuntimeError) as exc:
            rows.append({"value": v, "error": f"{type(exc).__name__}: {exc}"})
            flat.append(_flatten(spec.axis, v, None, names, f"{type(exc).__name__}: {exc}"))
    rep = _header("sweep", base, seed)
    rep.update({"sweep": spec.name, "axis": spec.axis, "values": spec.values, "runsPerWorld": n,
                "jointCoverage": joint, "rows": rows})
    return rep, to_csv(flat, csv_columns(names))


# -- replay -----------------------------------------------------------------


def replay(archive: str | Path, exp: Experiment, seed: int, axis: str | None = None,
           values: Sequence[float] | None = None, workers: int = 1, alpha: float | None = None
           ) -> tuple[dict, str]:
    """Re-evaluate detectors over archived run records without
    re-simulating. With ``axis`` (a detector axis) each value gives one row
    over the same fixed run set."""
    _require_tunnel(exp, "replay")
    records = load_archive(archive)
    sets = RunSets([r for r in records if r.world == HCS], [r for r in records if r.world == ORDINARY])
    if not sets.hcs or not sets.ordinary:
        raise ConfigurationError(f"archive {archive} needs runs of both worlds", ["archive"])
    if axis not in (None, "maMultiplierK", "cumulativeThresholdN"):
        raise ConfigurationError("replay can only vary detector axes", ["axis"])
    joint = 1.0 - alpha if alpha is not None else exp.audit.joint_coverage
    est_alpha = float(exp.smc.get("alpha", 0.05)) if alpha is None else alpha
    points = [None] if axis is None else sorted(float(v) for v in values or [])
    resolved = Path(archive) / "detectors.resolved"
    base_specs = exp.detectors
    if resolved.exists():
        base_specs = merge_resolved(base_specs, json.loads(resolved.read_text()))
    names = [d["name"] for d in base_specs]
    base = Experiment(exp.kind, exp.name, exp.scenario, None, base_specs, exp.smc, exp.audit)
    traces = None
    rows, flat = [], []
    for v in points:
        specs = base_specs if v is None else apply_axis(base, axis, v).detectors
        if traces is None and any(needs_calibration(s) for s in specs):
            traces = calibration_traces(exp.scenario, exp.audit.calibration_runs, seed, workers)
        detectors, specs = resolve_detectors(specs, exp.scenario, seed, exp.audit.calibration_runs, workers, traces)
        row = {"runsPerWorld": len(sets.hcs),
               "performance": {"latency": fixed_estimate(map(latency, sets.hcs), est_alpha).to_dict(),
                               "goodput": fixed_estimate(map(goodput, sets.hcs), est_alpha).to_dict()},
               "detectors": detector_rows(detectors, specs, sets, exp, joint, est_alpha)}
        rows.append({"value": v, **row})
        flat.append(_flatten(axis or "none", "" if v is None else v, row, names))
    rep = _header("replay", exp, seed)
    rep.update({"archive": str(Path(archive).name), "axis": axis, "values": points,
                "nPerWorld": {"hcs": len(sets.hcs), "ordinary": len(sets.ordinary)}, "rows": rows})
    return rep, to_csv(flat, csv_columns(names))


def _is_placeholder(d: dict, key: str) -> bool:
    v = d.get(key)
    if key == "threshold":
        return not isinstance(v, int)
    return not isinstance(v, (int, float)) or isinstance(v, bool)


def merge_resolved(specs: Sequence[dict], resolved: Sequence[dict]) -> list[dict]:
    """Fill calibration placeholders in ``specs`` from same-named resolved
    records (as written next to an archive)."""
    known = {d.get("name"): d for d in resolved}
    out = []
    for d in specs:
        d = dict(d)
        r = known.get(d.get("name"))
        if r is not None and r.get("type") == d.get("type"):
            for key in ("threshold", "baseRate"):
                if key in r and _is_placeholder(d, key):
                    d[key] = r[key]
                    if "calibratedFrom" in r:
                        d["calibratedFrom"] = r["calibratedFrom"]
        out.append(d)
    return out
