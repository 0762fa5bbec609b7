import csv
import io
import json

import pytest

from hcsaudit.cli import EXIT_CONFIG, EXIT_IMPOSSIBLE, EXIT_OK, main
from hcsaudit.config import (
    Experiment,
    SweepSpec,
    apply_axis,
    load_any,
    load_experiment,
    ordinary_key,
    preset_names,
    read_config_source,
    validate,
)
from hcsaudit.simcore import ConfigurationError, Constant
from hcsaudit.workflows import csv_columns

SMALL = {
    "type": "tunnel",
    "name": "small",
    "scenario": {"numFiles": 1, "totalBytes": 600, "numGenerators": 4, "meanWait": 300, "sdWait": 50,
                 "bgMeanWait": 1000, "bgSdWait": 300, "linkDelay": {"kind": "constant", "value": 20},
                 "exfilStart": 500, "stopTime": 30000, "observationHorizon": 6000},
    "detectors": [
        {"name": "C2", "type": "cumulative", "kind": "DNSQuery", "threshold": {"fpBudget": 0.1}},
        {"name": "MA1", "type": "moving_average", "kind": "DNSQuery", "k": 1.2, "baseRate": "calibrate",
         "window": 2000, "binSize": 500, "consecutiveBins": 2},
    ],
    "smc": {"delta": {"latency": 5000, "goodput": 50}, "minRuns": 5, "maxRuns": 20},
    "audit": {"runs": 20, "calibrationRuns": 20, "claims": [{"d": 0.01}]},
}


@pytest.fixture
def small(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(SMALL))
    return p


def test_every_preset_parses_and_round_trips():
    names = preset_names()
    assert {"desk", "desk-null", "desk-meanwait-sweep", "desk-k-sweep", "rtt-appendix", "wrtt-appendix"} <= set(names)
    assert {f"scenario{i}" for i in range(1, 10)} <= set(names)
    for n in names:
        cfg = load_any(n)
        if isinstance(cfg, Experiment):
            again = Experiment.from_dict(json.loads(json.dumps(cfg.to_dict())))
            assert again == cfg
        else:
            assert isinstance(cfg, SweepSpec) and cfg.values == sorted(cfg.values)


def test_table_row_one():
    exp = load_experiment("scenario1")
    assert exp.scenario.numGenerators == 16 and exp.scenario.numFiles == 10
    assert exp.scenario.lossAlice == exp.scenario.lossBob == 0.0
    assert [d["name"] for d in exp.detectors] == ["C2", "C8", "MA1"]


def test_validation_names_offending_field():
    doc = json.loads(json.dumps(SMALL))
    doc["scenario"]["lossAlice"] = 1.5
    with pytest.raises(ConfigurationError) as ei:
        Experiment.from_dict(doc)
    assert "lossAlice" in ei.value.fields
    with pytest.raises(ConfigurationError):
        validate({"type": "nonsense"})
    with pytest.raises(ConfigurationError) as ei:
        read_config_source("no-such-preset")
    assert "desk" in str(ei.value)


def test_apply_axis():
    exp = Experiment.from_dict(SMALL)
    assert apply_axis(exp, "loss", 0.1).scenario.lossBob == 0.1
    assert apply_axis(exp, "maMultiplierK", 2.0).detectors[1]["k"] == 2.0
    assert apply_axis(exp, "cumulativeThresholdN", 7).detectors[0]["threshold"] == 7
    # covert-only changes leave the ordinary world untouched
    assert ordinary_key(apply_axis(exp, "meanWait", 50).scenario) == ordinary_key(exp.scenario)
    assert ordinary_key(apply_axis(exp, "numGenerators", 2).scenario) != ordinary_key(exp.scenario)
    with pytest.raises(ConfigurationError):
        apply_axis(exp, "numFiles", 1.5)


def run_cli(capsys, *argv):
    rc = main(list(argv))
    out = capsys.readouterr()
    return rc, out.out, out.err


def test_cli_exit_codes(capsys, small, tmp_path):
    rc, out, _ = run_cli(capsys, "simulate", "--config", str(small), "--world", "hcs")
    assert rc == EXIT_OK
    rep = json.loads(out)
    assert rep["estimates"]["latency"]["nUsed"] >= 5
    bad = json.loads(json.dumps(SMALL))
    bad["scenario"]["lossAlice"] = 1.5
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    rc, _, err = run_cli(capsys, "simulate", "--config", str(tmp_path / "bad.json"))
    assert rc == EXIT_CONFIG and "lossAlice" in err
    none = json.loads(json.dumps(SMALL))
    none["scenario"].update(numFiles=0, totalBytes=0)
    (tmp_path / "none.json").write_text(json.dumps(none))
    rc, _, err = run_cli(capsys, "simulate", "--config", str(tmp_path / "none.json"), "--world", "hcs")
    assert rc == EXIT_IMPOSSIBLE and "latency" in err
    rc, out, _ = run_cli(capsys, "presets")
    assert rc == EXIT_OK and "desk" in out.split()


def test_cli_audit_report(capsys, small):
    rc, out, _ = run_cli(capsys, "audit", "--config", str(small))
    assert rc == EXIT_OK
    rep = json.loads(out)
    assert rep["runsPerWorld"] == 20 and rep["jointCoverage"] == 0.95
    for d in rep["detectors"]:
        assert d["kl"]["case"] in ("Overlap", "TprAbove", "TprBelow")
        assert d["claims"][0]["verdict"] in ("Falsified", "Consistent")
    assert isinstance(rep["detectors"][0]["detector"]["threshold"], int)


def test_cli_calibrate(capsys, small):
    rc, out, _ = run_cli(capsys, "calibrate", "--config", str(small), "--runs", "10")
    rep = json.loads(out)
    assert rc == EXIT_OK and rep["calibrationRuns"] == 10
    assert rep["detectors"][1]["baseRate"] > 0


def test_cli_sweep_and_replay(capsys, small, tmp_path):
    sweep = {"type": "sweep", "name": "s", "base": json.loads(small.read_text()), "axis": "meanWait",
             "values": [600, 200], "audit": {"runs": 10}}
    sp = tmp_path / "sweep.json"
    sp.write_text(json.dumps(sweep))
    out_csv = tmp_path / "out" / "sweep.csv"
    assert main(["sweep", "--config", str(sp), "--out", str(out_csv)]) == EXIT_OK
    rows = list(csv.DictReader(io.StringIO(out_csv.read_text())))
    assert [float(r["value"]) for r in rows] == [200.0, 600.0]
    assert list(rows[0]) == csv_columns(["C2", "MA1"])
    assert json.loads(out_csv.with_suffix(".json").read_text())["axis"] == "meanWait"

    arch = tmp_path / "arch"
    assert main(["audit", "--config", str(small), "--runs", "10", "--archive", str(arch), "--out",
                 str(tmp_path / "a.json")]) == EXIT_OK
    assert (arch / "detectors.resolved").exists()
    rc = main(["replay", "--config", str(small), "--archive", str(arch), "--axis", "maMultiplierK",
               "--values", "1.0,1.5,3.0", "--out", str(tmp_path / "r.csv")])
    assert rc == EXIT_OK
    rows = list(csv.DictReader(io.StringIO((tmp_path / "r.csv").read_text())))
    tprs = [float(r["MA1_tpr"]) for r in rows]
    assert tprs == sorted(tprs, reverse=True)
    capsys.readouterr()
    assert main(["replay", "--config", str(small), "--archive", str(arch), "--axis", "maMultiplierK"]) == EXIT_CONFIG


def test_cli_rejects_bad_flags(capsys, small):
    assert main(["audit", "--config", str(small), "--workers", "0"]) == EXIT_CONFIG
    assert main(["audit", "--config", str(small), "--alpha", "2"]) == EXIT_CONFIG
    assert main(["audit", "--config", "rtt-appendix"]) == EXIT_CONFIG
