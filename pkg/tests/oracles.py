"""Brute-force reference implementations used only by the tests."""
import math

import numpy as np
from scipy import optimize, stats


def naive_cumulative(events, kind, threshold, direction="egress"):
    count = 0
    for e in events:
        if e.kind == kind and (direction is None or e.direction == direction):
            count += 1
            if count > threshold:
                return e.time
    return None


def naive_moving_average(events, horizon, kind, window, bin_size, k, base_rate, consecutive,
                         units_per_second=1000.0, warmup=True, direction="egress"):
    """Re-count the whole trace at every bin end; compare the rate in events/s."""
    t = np.array([e.time for e in events if e.kind == kind and (direction is None or e.direction == direction)])
    run = 0
    m = 1
    seconds = window / units_per_second
    while m * bin_size <= horizon + 1e-9 * bin_size:
        end = m * bin_size
        count = float(np.count_nonzero((t >= end - window) & (t < end)))
        if warmup and end < window:
            count += base_rate * (window - end) / units_per_second
        rate = count / seconds
        hot = rate > k * base_rate and not math.isclose(rate, k * base_rate, rel_tol=1e-12, abs_tol=1e-15)
        run = run + 1 if hot else 0
        if run >= consecutive:
            return end
        m += 1
    return None


def _kl(q, p):
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        a = np.where(q > 0, q * np.log(q / p), 0.0)
        b = np.where(q < 1, (1 - q) * np.log((1 - q) / (1 - p)), 0.0)
    return a + b


def grid_min_kl(t_lo, t_hi, f_lo, f_hi, size=200):
    """Grid minimum of Bernoulli KL over the rectangle, refined by a bounded
    local solve from the best grid point (the objective is jointly convex)."""
    q = np.linspace(t_lo, t_hi, size)
    p = np.linspace(f_lo, f_hi, size)
    Q, P = np.meshgrid(q, p, indexing="ij")
    vals = _kl(Q, P)
    i, j = np.unravel_index(np.argmin(vals), vals.shape)
    best = float(vals[i, j])
    eps = 1e-12
    clip = lambda x: min(max(x, eps), 1 - eps)
    lo_q, hi_q = clip(t_lo), clip(t_hi)
    lo_p, hi_p = clip(f_lo), clip(f_hi)
    if lo_q < hi_q or lo_p < hi_p:
        x0 = [min(max(q[i], lo_q), hi_q), min(max(p[j], lo_p), hi_p)]
        res = optimize.minimize(lambda x: float(_kl(np.array(x[0]), np.array(x[1]))), x0, method="L-BFGS-B",
                                bounds=[(lo_q, hi_q), (lo_p, hi_p)], options={"ftol": 1e-15, "gtol": 1e-12})
        best = min(best, float(res.fun))
    return max(best, 0.0)


def tail_inversion_interval(k, n, coverage):
    """Clopper-Pearson by root-finding on binomial tails."""
    a = (1 - coverage) / 2
    lo = 0.0 if k == 0 else optimize.brentq(lambda p: stats.binom.sf(k - 1, n, p) - a, 1e-15, 1 - 1e-15, xtol=1e-14)
    hi = 1.0 if k == n else optimize.brentq(lambda p: stats.binom.cdf(k, n, p) - a, 1e-15, 1 - 1e-15, xtol=1e-14)
    return lo, hi


def alarm_mass(dist, mask):
    """Probability of the alarm region; a constant classifier gets exactly 0 or 1."""
    if mask.all() or not mask.any():
        return float(mask.all())
    return min(1.0, math.fsum(dist[mask]))
