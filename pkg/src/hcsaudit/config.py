"""Experiment and sweep configuration files.

A config is one JSON document validated against
``schema/config.schema.json``. ``type`` selects the model: ``tunnel``
(scenario + detectors), ``rtt`` (the timestamp protocol) or ``sweep`` (a
tunnel experiment with one axis varied). Shipped presets can be named
instead of a path.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
from jsonschema.exceptions import best_match

from .kl import UndetectabilityClaim
from .rtt import RttConfig
from .simcore import ConfigurationError
from .smc import SmcParams
from .tunnel import ScenarioConfig

SWEEP_AXES = ("meanWait", "maMultiplierK", "cumulativeThresholdN", "loss", "numGenerators", "numFiles")
# scenario fields that only affect the covert sender/receiver; the ordinary
# world is identical across values of these
COVERT_ONLY_FIELDS = ("meanWait", "sdWait", "numFiles", "totalBytes", "fileSizes", "chunkSize", "exfilStart",
                      "dataChannelFraction", "retransmitTimeout", "retransmitCap", "lossBob", "bobLinkDelay")


def _schema() -> dict:
    return json.loads(resources.files("hcsaudit").joinpath("schema/config.schema.json").read_text())


def preset_names() -> list[str]:
    d = resources.files("hcsaudit").joinpath("presets")
    return sorted(p.name[:-5] for p in d.iterdir() if p.name.endswith(".json"))


def read_config_source(name_or_path: str | Path) -> dict:
    """Load JSON from a path, or from a shipped preset of that name."""
    p = Path(name_or_path)
    if p.suffix == ".json" or p.exists():
        try:
            return json.loads(p.read_text())
        except FileNotFoundError as exc:
            raise ConfigurationError(f"config file not found: {p}", ["config"]) from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{p}: invalid JSON: {exc}", ["config"]) from exc
    res = resources.files("hcsaudit").joinpath(f"presets/{name_or_path}.json")
    if not res.is_file():
        raise ConfigurationError(f"no config file or preset named {name_or_path!r}; presets: "
                                 f"{', '.join(preset_names())}", ["config"])
    return json.loads(res.read_text())


def validate(doc: dict) -> None:
    """Schema validation; raises ConfigurationError naming every offending field."""
    schema = _schema()
    if isinstance(doc, dict) and doc.get("type") in ("tunnel", "rtt", "sweep"):
        # validate against the one branch ``type`` selects so errors name the real cause
        branch = "sweep" if doc["type"] == "sweep" else "experiment"
        schema = {k: v for k, v in schema.items() if k != "oneOf"}
        schema["$ref"] = f"#/definitions/{branch}"
    v = jsonschema.Draft7Validator(schema)
    errors = sorted(v.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if not errors:
        return
    fields_, msgs = [], []
    for e in errors:
        # a failed oneOf hides the actual cause in its sub-errors
        leaf = best_match(e.context) if e.context else e
        path = [str(x) for x in e.absolute_path] + ([str(x) for x in leaf.relative_path] if leaf is not e else [])
        fields_.append(path[-1] if path else "<root>")
        msgs.append(f"{'.'.join(path) or '<root>'}: {leaf.message}")
    raise ConfigurationError("invalid config: " + "; ".join(dict.fromkeys(msgs)), list(dict.fromkeys(fields_)))


@dataclass(frozen=True)
class AuditSpec:
    runs: int = 200
    joint_coverage: float = 0.95
    paired: bool = False
    claims: tuple[UndetectabilityClaim, ...] = ()
    calibration_runs: int = 100
    op_origin: str = "exfil"
    prior: float = 0.01

    @classmethod
    def from_dict(cls, d: dict) -> "AuditSpec":
        return cls(int(d.get("runs", 200)), float(d.get("jointCoverage", 0.95)), bool(d.get("paired", False)),
                   tuple(UndetectabilityClaim(float(c["d"]), c.get("horizon")) for c in d.get("claims", [])),
                   int(d.get("calibrationRuns", 100)), d.get("opDurationOrigin", "exfil"),
                   float(d.get("prior", 0.01)))

    def to_dict(self) -> dict:
        return {"runs": self.runs, "jointCoverage": self.joint_coverage, "paired": self.paired,
                "claims": [{"d": c.d, "measure": c.measure, "horizon": c.horizon} for c in self.claims],
                "calibrationRuns": self.calibration_runs, "opDurationOrigin": self.op_origin,
                "prior": self.prior}


def smc_from_dict(d: dict, workers: int = 1) -> tuple[SmcParams, dict[str, float]]:
    """SMC parameters plus per-property radius targets.

    ``delta`` may be a number (used for every property) or a mapping from
    property name to target width.
    """
    delta = d.get("delta", 1.0)
    per = dict(delta) if isinstance(delta, dict) else {}
    base = float(delta) if not isinstance(delta, dict) else 1.0
    p = SmcParams(alpha=float(d.get("alpha", 0.05)), delta=base, min_runs=int(d.get("minRuns", 30)),
                  max_runs=int(d.get("maxRuns", 2000)), workers=workers)
    return p, per


@dataclass
class Experiment:
    kind: str
    name: str
    scenario: ScenarioConfig | None = None
    rtt: RttConfig | None = None
    detectors: list[dict] = field(default_factory=list)
    smc: dict = field(default_factory=dict)
    audit: AuditSpec = field(default_factory=AuditSpec)

    @property
    def seed(self) -> int:
        return self.scenario.seed if self.scenario is not None else 1

    @classmethod
    def from_dict(cls, d: dict) -> "Experiment":
        validate(d)
        if d["type"] == "sweep":
            raise ConfigurationError("expected an experiment config, got a sweep", ["type"])
        kind = d["type"]
        name = d.get("name", kind)
        audit = AuditSpec.from_dict(d.get("audit", {}))
        if kind == "tunnel":
            sc = ScenarioConfig.from_dict({"name": name, **d.get("scenario", {})})
            return cls(kind, name, scenario=sc, detectors=copy.deepcopy(d.get("detectors", [])),
                       smc=dict(d.get("smc", {})), audit=audit)
        return cls(kind, name, rtt=RttConfig.from_dict(d.get("model", {})), smc=dict(d.get("smc", {})), audit=audit)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"type": self.kind, "name": self.name}
        if self.scenario is not None:
            sc = self.scenario.to_dict()
            sc.pop("type")
            out["scenario"] = sc
            out["detectors"] = copy.deepcopy(self.detectors)
        if self.rtt is not None:
            m = self.rtt.to_dict()
            m.pop("type")
            out["model"] = m
        if self.smc:
            out["smc"] = dict(self.smc)
        out["audit"] = self.audit.to_dict()
        return out

    def with_scenario(self, **changes) -> "Experiment":
        return replace(self, scenario=self.scenario.replace(**changes))


def load_experiment(name_or_path: str | Path) -> Experiment:
    return Experiment.from_dict(read_config_source(name_or_path))


@dataclass
class SweepSpec:
    name: str
    base: Experiment
    axis: str
    values: list[float]
    claims: tuple[UndetectabilityClaim, ...] = ()

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        validate(d)
        if d.get("type") != "sweep":
            raise ConfigurationError("expected a sweep config", ["type"])
        base_doc = read_config_source(d["base"]) if isinstance(d["base"], str) else copy.deepcopy(d["base"])
        for key in ("detectors", "smc"):
            if key in d:
                base_doc[key] = copy.deepcopy(d[key])
        if "audit" in d:
            base_doc["audit"] = {**base_doc.get("audit", {}), **d["audit"]}
        base = Experiment.from_dict(base_doc)
        if base.kind != "tunnel":
            raise ConfigurationError("sweeps vary tunnel experiments only", ["base"])
        claims = tuple(UndetectabilityClaim(float(c["d"]), c.get("horizon")) for c in d.get("claims", [])) \
            or base.audit.claims
        values = sorted(float(v) for v in d["values"])
        return cls(d.get("name", f"{base.name}-{d['axis']}"), base, d["axis"], values, claims)


def load_sweep(name_or_path: str | Path) -> SweepSpec:
    return SweepSpec.from_dict(read_config_source(name_or_path))


def load_any(name_or_path: str | Path) -> Experiment | SweepSpec:
    doc = read_config_source(name_or_path)
    return SweepSpec.from_dict(doc) if doc.get("type") == "sweep" else Experiment.from_dict(doc)


def apply_axis(exp: Experiment, axis: str, value: float) -> Experiment:
    """Experiment for one sweep point."""
    if axis == "meanWait":
        return exp.with_scenario(meanWait=float(value))
    if axis == "loss":
        return exp.with_scenario(lossAlice=float(value), lossBob=float(value))
    if axis in ("numGenerators", "numFiles"):
        if int(value) != value:
            raise ConfigurationError(f"{axis} values must be integers", [axis])
        return exp.with_scenario(**{axis: int(value)})
    if axis in ("maMultiplierK", "cumulativeThresholdN"):
        typ, key = ("moving_average", "k") if axis == "maMultiplierK" else ("cumulative", "threshold")
        dets = copy.deepcopy(exp.detectors)
        hit = False
        for d in dets:
            if d.get("type") == typ:
                d[key] = float(value) if key == "k" else int(value)
                hit = True
        if not hit:
            raise ConfigurationError(f"axis {axis} needs a {typ} detector", ["axis"])
        return replace(exp, detectors=dets)
    raise ConfigurationError(f"unknown sweep axis {axis!r}", ["axis"])


def ordinary_key(sc: ScenarioConfig) -> str:
    """Canonical key of everything the ordinary world depends on."""
    d = sc.to_dict()
    for f in COVERT_ONLY_FIELDS + ("name",):
        d.pop(f, None)
    return json.dumps(d, sort_keys=True)
