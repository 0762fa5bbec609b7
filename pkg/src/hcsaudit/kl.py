"""Certified KL lower bounds from detector rate intervals.

A binary detector maps traces to alarms, so by the data-processing
inequality ``KL(Bern(TPR) || Bern(FPR)) <= KL(Q || P)`` for the HCS trace
law ``Q`` and the ordinary law ``P``. Minimising the Bernoulli KL over the
confidence rectangle gives a bound that holds with the rectangle's joint
coverage. All divergences are in nats.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .smc import RateEstimate

OVERLAP, TPR_ABOVE, TPR_BELOW = "Overlap", "TprAbove", "TprBelow"
FALSIFIED, CONSISTENT = "Falsified", "Consistent"
NATS_TO_BITS = 1.0 / math.log(2.0)


def _check_prob(x: float, name: str) -> None:
    if not 0.0 <= x <= 1.0 or math.isnan(x):
        raise ValueError(f"{name} must lie in [0, 1], got {x}")


def _term(a: float, b: float) -> float:
    # a * ln(a / b) with 0 ln 0 = 0 and a > 0, b = 0 -> inf
    if a == 0.0:
        return 0.0
    if b == 0.0:
        return math.inf
    return a * math.log(a / b)


def bern_kl(q: float, p: float) -> float:
    """``KL(Bern(q) || Bern(p))`` in nats."""
    _check_prob(q, "q")
    _check_prob(p, "p")
    if q == p:
        return 0.0
    return max(0.0, _term(q, p) + _term(1.0 - q, 1.0 - p))


def bern_kl_array(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Vectorised :func:`bern_kl` for arrays strictly inside (0, 1)."""
    q, p = np.asarray(q, float), np.asarray(p, float)
    return q * np.log(q / p) + (1 - q) * np.log((1 - q) / (1 - p))


def kl_discrete(qs, ps) -> float:
    """Exact ``KL(Q || P)`` for finite distributions by summation."""
    return float(sum(_term(float(q), float(p)) for q, p in zip(qs, ps)))


@dataclass(frozen=True)
class KlAuditResult:
    bound: float
    case: str
    tpr: RateEstimate
    fpr: RateEstimate
    joint_coverage: float

    @property
    def bound_bits(self) -> float:
        return self.bound * NATS_TO_BITS

    @property
    def infinite(self) -> bool:
        return math.isinf(self.bound)

    def to_dict(self) -> dict:
        return {
            "boundNats": None if self.infinite else self.bound,
            "boundBits": None if self.infinite else self.bound_bits,
            "infiniteBound": self.infinite,
            "case": self.case,
            "tpr": self.tpr.to_dict(),
            "fpr": self.fpr.to_dict(),
            "jointCoverage": self.joint_coverage,
        }


def case_of(t_lo: float, t_hi: float, f_lo: float, f_hi: float) -> str:
    """Touching intervals count as overlapping."""
    if t_lo > f_hi:
        return TPR_ABOVE
    if t_hi < f_lo:
        return TPR_BELOW
    return OVERLAP


def lower_bound_from_intervals(t_lo: float, t_hi: float, f_lo: float, f_hi: float) -> tuple[float, str]:
    """Minimum of :func:`bern_kl` over ``[t_lo, t_hi] x [f_lo, f_hi]``."""
    if not (t_lo <= t_hi and f_lo <= f_hi):
        raise ValueError("interval endpoints out of order")
    case = case_of(t_lo, t_hi, f_lo, f_hi)
    if case == TPR_ABOVE:
        return bern_kl(t_lo, f_hi), case
    if case == TPR_BELOW:
        return bern_kl(t_hi, f_lo), case
    return 0.0, case


def certified_lower_bound(tpr: RateEstimate, fpr: RateEstimate) -> KlAuditResult:
    bound, case = lower_bound_from_intervals(tpr.lower, tpr.upper, fpr.lower, fpr.upper)
    # each interval fails with probability at most 1 - coverage
    joint = max(0.0, 1.0 - (1.0 - tpr.coverage) - (1.0 - fpr.coverage))
    return KlAuditResult(bound, case, tpr, fpr, joint)


@dataclass(frozen=True)
class UndetectabilityClaim:
    d: float
    horizon: float | None = None
    scenario: str = ""
    measure: str = "KL"

    def __post_init__(self):
        if self.measure != "KL":
            raise ValueError(f"unsupported divergence measure {self.measure!r}; only KL is supported")
        if not self.d >= 0:
            raise ValueError(f"claimed divergence must be >= 0, got {self.d}")


@dataclass(frozen=True)
class AuditVerdict:
    verdict: str
    text: str


def audit_claim(result: KlAuditResult, claim: UndetectabilityClaim) -> AuditVerdict:
    """Strict exceedance falsifies; anything else is consistent, never a proof."""
    if claim.measure != "KL":
        raise ValueError(f"unsupported divergence measure {claim.measure!r}")
    cov = f"{result.joint_coverage:.4g}"
    if result.bound > claim.d:
        return AuditVerdict(FALSIFIED, f"falsified: certified KL lower bound {result.bound:.6g} nats exceeds "
                                       f"claimed d={claim.d:g} (joint coverage {cov}) for this instantiated model")
    return AuditVerdict(CONSISTENT, f"consistent, not proven: certified KL lower bound {result.bound:.6g} nats "
                                    f"does not exceed claimed d={claim.d:g}; this audit gives no upper bound on "
                                    f"the divergence")


@dataclass(frozen=True)
class PosteriorOdds:
    prior_odds: float
    posterior_odds: float
    posterior_prob: float


def posterior_odds(prior: float, epsilon: float) -> PosteriorOdds:
    """Expected posterior after ``epsilon`` nats of evidence: odds times ``e**epsilon``."""
    if not 0.0 < prior < 1.0:
        raise ValueError(f"prior must lie strictly in (0, 1), got {prior}")
    if not epsilon >= 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    o = prior / (1.0 - prior)
    post = o * math.exp(epsilon)
    return PosteriorOdds(o, post, post / (1.0 + post) if math.isfinite(post) else 1.0)
