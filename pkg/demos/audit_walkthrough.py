"""One audit, step by step: calibrate detectors on ordinary runs, estimate
alarm rates in both worlds, bound the divergence and check a claim."""
from hcsaudit.config import load_experiment
from hcsaudit.kl import UndetectabilityClaim, audit_claim, certified_lower_bound, posterior_odds
from hcsaudit.properties import goodput, latency
from hcsaudit.smc import fixed_estimate, rates_from_records, resolve_detectors, run_records, world_runners

N = 100
exp = load_experiment("desk")
sc = exp.scenario

detectors, specs = resolve_detectors(exp.detectors, sc, root_seed=1, runs=100)
for s in specs:
    print("calibrated", s["name"], {k: s[k] for k in ("threshold", "baseRate") if k in s})

hcs_runner, ord_runner = world_runners(sc, root_seed=1)
hcs, ordinary = run_records(hcs_runner, N), run_records(ord_runner, N)

lat, gp = fixed_estimate(map(latency, hcs)), fixed_estimate(map(goodput, hcs))
print(f"latency {lat.mean / 1000:.1f} s +- {lat.radius / 1000:.1f}; goodput {gp.mean:.1f} B/s +- {gp.radius:.1f}")

claim = UndetectabilityClaim(0.01)
for det, s in zip(detectors, specs):
    tpr, fpr = rates_from_records(det, hcs, ordinary, joint_coverage=0.95)
    res = certified_lower_bound(tpr, fpr)
    verdict = audit_claim(res, claim)
    odds = posterior_odds(0.01, res.bound) if not res.infinite else None
    print(f"{s['name']:4s} TPR {tpr.point:.2f} [{tpr.lower:.3f}, {tpr.upper:.3f}]  "
          f"FPR {fpr.point:.2f} [{fpr.lower:.3f}, {fpr.upper:.3f}]  {res.case:9s} "
          f"bound {res.bound:.4f} nats -> {verdict.verdict}"
          + (f"; posterior at prior 0.01: {odds.posterior_prob:.3f}" if odds else ""))
