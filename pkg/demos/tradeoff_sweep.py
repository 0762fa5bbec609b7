"""Slower senders are harder to see: sweep Alice's pacing and watch goodput
and the certified bound fall together."""
from scipy import stats

from hcsaudit.config import load_sweep
from hcsaudit.workflows import sweep

spec = load_sweep("desk-meanwait-sweep")
report, table = sweep(spec, seed=1, runs=100)

good, bound = [], []
for row in report["rows"]:
    c8 = row["detectors"][0]
    good.append(row["performance"]["goodput"]["mean"])
    bound.append(c8["kl"]["boundNats"] if c8["kl"]["boundNats"] is not None else float("inf"))
    print(f"meanWait {row['value']:6.0f} ms  goodput {good[-1]:7.1f} B/s  TPR {c8['kl']['tpr']['point']:.2f}  "
          f"bound {bound[-1]:.3f} nats  {c8['claims'][0]['verdict']}")
print("Spearman(bound, goodput) =", round(stats.spearmanr(bound, good).statistic, 3))
