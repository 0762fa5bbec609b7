"""Acceptance criteria, one test each; the terminal summary prints a
pass/fail line per criterion."""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from hcsaudit.adversary import CumulativeCount, MovingAverageRate, ObservableEvent, ObservableTrace
from hcsaudit.cli import main
from hcsaudit.config import load_experiment, load_sweep
from hcsaudit.kl import OVERLAP, TPR_ABOVE, TPR_BELOW, bern_kl, kl_discrete, lower_bound_from_intervals, posterior_odds
from hcsaudit.rtt import run_rtt
from hcsaudit.smc import RttRunner, SmcParams, clopper_pearson, estimate_mean
from hcsaudit.tunnel import ScenarioConfig, run_scenario
from hcsaudit import workflows

from oracles import alarm_mass, grid_min_kl, naive_cumulative, naive_moving_average

README = Path(__file__).resolve().parents[1] / "README.md"


class Budget:
    def __init__(self, seconds):
        self.seconds = seconds

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        elapsed = time.perf_counter() - self.t0
        if exc[0] is None:
            assert elapsed < self.seconds, f"runtime {elapsed:.1f} s exceeds {self.seconds} s"


def random_pair(rng, case):
    """Interval pair in the requested relative position, endpoints in (0, 1)."""
    if case == OVERLAP:
        a, b = np.sort(rng.uniform(0.001, 0.999, 2))
        c = rng.uniform(0.001, b)
        d = rng.uniform(max(a, c), 0.999)
        return a, b, c, d
    lo = np.sort(rng.uniform(0.001, 0.999, 4))
    if case == TPR_ABOVE:
        return lo[2], lo[3], lo[0], lo[1]
    return lo[0], lo[1], lo[2], lo[3]


@pytest.mark.criterion(1, "KL bound matches grid-minimisation oracle within 1e-6 on 1000 interval pairs")
def test_kl_bound_matches_grid_oracle():
    rng = np.random.default_rng(2024)
    seen = {OVERLAP: 0, TPR_ABOVE: 0, TPR_BELOW: 0}
    worst = 0.0
    with Budget(10):
        for i in range(1000):
            case = (OVERLAP, TPR_ABOVE, TPR_BELOW)[i % 3]
            t_lo, t_hi, f_lo, f_hi = random_pair(rng, case)
            b, c = lower_bound_from_intervals(t_lo, t_hi, f_lo, f_hi)
            assert c == case
            seen[c] += 1
            err = abs(b - grid_min_kl(t_lo, t_hi, f_lo, f_hi))
            worst = max(worst, err)
            assert err <= 1e-6, (t_lo, t_hi, f_lo, f_hi, b)
    assert min(seen.values()) >= 333
    print(f"max |closed form - grid| = {worst:.2e}")


@pytest.mark.criterion(2, "data-processing inequality holds on 1000 random instances")
def test_dpi_soundness():
    rng = np.random.default_rng(77)
    with Budget(30):
        for _ in range(1000):
            n = int(rng.integers(2, 9))
            q = rng.dirichlet(np.full(n, rng.uniform(0.2, 3)))
            p = rng.dirichlet(np.full(n, rng.uniform(0.2, 3)))
            mask = rng.random(n) < 0.5
            tpr, fpr = alarm_mass(q, mask), alarm_mass(p, mask)
            assert bern_kl(tpr, fpr) <= kl_discrete(q, p) + 1e-12


@pytest.mark.criterion(3, "posterior probability 0.027 +- 0.001 at prior 0.01 and one nat")
def test_posterior_odds_reproduction():
    assert posterior_odds(0.01, 1.0).posterior_prob == pytest.approx(0.027, abs=0.001)


@pytest.mark.criterion(4, "RTT and WRTT produce identical rttq lists for 8 seeds")
def test_wrtt_timing_invariance():
    cfg = load_experiment("wrtt-appendix").rtt
    with Budget(5):
        for seed in range(8):
            a = run_rtt(cfg, seed, covert=False).actors["A"].rttq
            b = run_rtt(cfg, seed, covert=True).actors["A"].rttq
            assert len(a) == cfg.rounds and a == b


@pytest.mark.criterion(5, "WRTT byte recovery over 100 loss-free runs of 20 rounds")
def test_wrtt_byte_recovery():
    cfg = load_experiment("wrtt-appendix").rtt.with_rounds(20)
    assert cfg.loss == 0.0 and cfg.rounds == 20
    for seed in range(100):
        sim = run_rtt(cfg, seed)
        sent, got = sim.actors["A"].byte_list, sim.actors["B"].byte_list
        assert len(got) == 20 and sent == got


@pytest.mark.criterion(6, "SMC estimate of rttAv lies in [97, 103] at alpha 0.05, delta 2")
def test_rtt_round_trip_statistics():
    exp = load_experiment("rtt-appendix")
    with Budget(60):
        runner = RttRunner(exp.rtt, exp.seed)
        est = estimate_mean(lambda i: runner(i).summary["rttAv"], SmcParams(alpha=0.05, delta=2.0))
    assert est.status == "converged" and est.radius <= 1.0
    assert 97.0 <= est.mean <= 103.0
    print(f"rttAv = {est.mean:.3f} +- {est.radius:.3f} over {est.n_used} runs")


@pytest.mark.criterion(7, "WRTT enAv has smaller spread and no smaller mean than RTT over 200 seeds")
def test_entropy_contrast():
    cfg = load_experiment("rtt-appendix").rtt
    rtt = np.array([run_rtt(cfg, s, covert=False).observer.summary["enAv"] for s in range(200)])
    wrtt = np.array([run_rtt(cfg, s, covert=True).observer.summary["enAv"] for s in range(200)])
    print(f"RTT enAv {rtt.mean():.4f} sd {rtt.std(ddof=1):.4f}; WRTT {wrtt.mean():.4f} sd {wrtt.std(ddof=1):.4f}")
    assert wrtt.std(ddof=1) < rtt.std(ddof=1)
    assert wrtt.mean() >= rtt.mean()


def synthetic_trace(rng):
    n = int(rng.integers(0, 1001))
    horizon = float(rng.uniform(60, 600))
    t = rng.uniform(0, horizon, n)
    if n and rng.random() < 0.5:
        c = rng.uniform(0, horizon)
        t[: n // 3] = np.clip(c + rng.normal(0, 8, n // 3), 0, horizon)
    if n and rng.random() < 0.3:
        t = np.floor(t)  # exact ties with bin edges
    t.sort()
    kinds = rng.choice(["DNSQuery", "HTTPSRequest", "DNSResponse"], size=n, p=[0.6, 0.3, 0.1])
    dirs = rng.choice(["egress", "ingress"], size=n, p=[0.85, 0.15])
    return ObservableTrace(tuple(ObservableEvent(float(a), str(k), str(d), 80, "corporate")
                                 for a, k, d in zip(t, kinds, dirs)), horizon)


@pytest.mark.criterion(8, "detectors match the re-scan oracle on 1000 traces plus the hand example")
def test_detector_oracle_equivalence():
    hand = ObservableTrace(tuple(ObservableEvent(float(t), "DNSQuery", "egress", 80, "corporate")
                                 for t in [1, 4, 7] + [30 + 0.5 * i for i in range(12)]), 100.0)
    ma = MovingAverageRate("DNSQuery", 2.0, 0.1, 60.0, 10.0, 2, 1.0, warmup=False)
    assert ma(hand).alarm_time == 50.0
    four = ObservableTrace(tuple(ObservableEvent(float(t), "DNSQuery", "egress", 80, "corporate")
                                 for t in (1, 2, 3, 4)), 5.0)
    assert CumulativeCount("DNSQuery", 3)(four).alarm_time == 4.0
    assert not CumulativeCount("DNSQuery", 3)(ObservableTrace(four.events[:3], 5.0)).alarmed
    rng = np.random.default_rng(8)
    fired = 0
    with Budget(30):
        for _ in range(1000):
            tr = synthetic_trace(rng)
            for kind in ("DNSQuery", "HTTPSRequest"):
                n = int(rng.integers(1, 400))
                assert CumulativeCount(kind, n)(tr).alarm_time == naive_cumulative(tr.events, kind, n)
            m = MovingAverageRate("DNSQuery", float(rng.uniform(0.5, 3)), float(rng.choice([0.5, 1.0, 1.5, 2.0])),
                                  float(rng.choice([30.0, 45.0, 60.0])), float(rng.choice([5.0, 10.0, 15.0])),
                                  int(rng.integers(1, 4)), 1.0, bool(rng.random() < 0.5))
            got = m(tr).alarm_time
            assert got == naive_moving_average(tr.events, tr.horizon, "DNSQuery", m.window, m.bin_size, m.k,
                                               m.base_rate, m.consecutive, 1.0, m.warmup)
            fired += got is not None
    assert 50 < fired < 950  # both outcomes exercised


@pytest.mark.criterion(9, "a 1600 B file with 100 B chunks emits exactly 16 chunk queries")
def test_chunking_arithmetic():
    sc = ScenarioConfig(numFiles=1, totalBytes=1600, chunkSize=100, numGenerators=4, stopTime=200_000.0)
    rec = run_scenario(sc, "hcs", 1)
    sends = [p for _, g, p in rec.monitor if g == "chunkSent"]
    assert len(sends) == 16 and rec.summary["retransmissions"] == 0
    assert sorted(p["chunk"] for p in sends) == list(range(16))


@pytest.mark.criterion(10, "exact binomial intervals cover in at least 94% of 10000 replications")
def test_interval_coverage():
    rng = np.random.default_rng(10)
    with Budget(60):
        for n in (50, 200):
            for p in (0.01, 0.1, 0.5, 0.9):
                ks = rng.binomial(n, p, size=10_000)
                table = {k: clopper_pearson(int(k), n, 0.95) for k in np.unique(ks)}
                covered = np.mean([table[k].lower <= p <= table[k].upper for k in ks])
                print(f"n={n} p={p}: coverage {covered:.4f}")
                assert covered >= 0.94


@pytest.mark.criterion(11, "meanWait sweep: goodput strictly decreasing, KL bound rank-correlates with goodput")
def test_tradeoff_trend():
    spec = load_sweep("desk-meanwait-sweep")
    assert len(spec.values) == 4 and spec.base.audit.runs == 200
    with Budget(600):
        rep, _ = workflows.sweep(spec, spec.base.seed)
    rows = rep["rows"]
    assert all("error" not in r for r in rows)
    good = [r["performance"]["goodput"]["mean"] for r in rows]
    c8 = [next(d for d in r["detectors"] if d["detector"]["name"] == "C8") for r in rows]
    kl = [math.inf if d["kl"]["infiniteBound"] else d["kl"]["boundNats"] for d in c8]
    assert len({d["detector"]["threshold"] for d in c8}) == 1  # one calibrated threshold for every point
    print("meanWait", spec.values, "goodput", [round(g, 2) for g in good], "KL", [round(k, 4) for k in kl])
    assert all(a > b for a, b in zip(good, good[1:]))
    rho = stats.spearmanr(kl, good).statistic
    assert rho > 0


@pytest.mark.criterion(12, "null audit: every detector's intervals overlap and the bound is 0 at n=200")
def test_null_audit():
    exp = load_experiment("desk-null")
    with Budget(300):
        rep = workflows.audit(exp, exp.seed, runs=200)
    assert rep["runsPerWorld"] == 200
    assert [d["detector"]["name"] for d in rep["detectors"]] == ["C2", "C8", "MA1"]
    for d in rep["detectors"]:
        assert d["kl"]["case"] == OVERLAP and d["kl"]["boundNats"] == 0.0
        assert d["kl"]["tpr"]["point"] == d["kl"]["fpr"]["point"]


@pytest.mark.criterion(13, "replayed k sweep gives non-increasing alarm rates on a fixed run set")
def test_threshold_monotonicity(tmp_path):
    exp = load_experiment("desk")
    ks = load_sweep("desk-k-sweep").values
    assert len(ks) == 5
    workflows.audit(exp, exp.seed, runs=200, archive=tmp_path)
    rep, _ = workflows.replay(tmp_path, exp, exp.seed, "maMultiplierK", ks)
    ma = [next(d for d in r["detectors"] if d["detector"]["name"] == "MA1") for r in rep["rows"]]
    tpr = [d["kl"]["tpr"]["point"] for d in ma]
    fpr = [d["kl"]["fpr"]["point"] for d in ma]
    print("k", ks, "tpr", tpr, "fpr", fpr)
    assert all(a >= b for a, b in zip(tpr, tpr[1:]))
    assert all(a >= b for a, b in zip(fpr, fpr[1:]))
    assert tpr[0] > tpr[-1] or fpr[0] > fpr[-1]  # the sweep actually moves


@pytest.mark.criterion(14, "repeated simulate, audit and sweep invocations give byte-identical reports")
def test_reproducibility(tmp_path):
    jobs = {
        "simulate": ["simulate", "--config", "desk", "--world", "hcs", "--runs", "20"],
        "simulate-rtt": ["simulate", "--config", "wrtt-appendix", "--runs", "20"],
        "audit": ["audit", "--config", "desk", "--runs", "20"],
        "sweep": ["sweep", "--config", "desk-meanwait-sweep", "--runs", "10"],
    }
    for name, argv in jobs.items():
        outs = []
        for rep in (1, 2):
            out = tmp_path / f"{name}-{rep}.out"
            assert main(argv + ["--seed", "5", "--out", str(out)]) == 0
            outs.append(out)
        assert outs[0].read_bytes() == outs[1].read_bytes(), name
        if name == "sweep":
            assert outs[0].with_suffix(".json").read_bytes() == outs[1].with_suffix(".json").read_bytes()
    par = tmp_path / "audit-par.out"
    assert main(jobs["audit"] + ["--seed", "5", "--workers", "2", "--out", str(par)]) == 0
    assert par.read_bytes() == (tmp_path / "audit-1.out").read_bytes()


@pytest.mark.criterion(15, "README documents what is not reproduced at desk scale")
def test_readme_non_reproducibility_section():
    text = README.read_text()
    assert "## What is not reproduced" in text
    section = text.split("## What is not reproduced", 1)[1].split("\n## ", 1)[0].lower()
    for phrase in ("testbed", "operating duration", "alignment", "property-based substitute"):
        assert phrase in section
