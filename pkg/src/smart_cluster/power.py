"""Closed-form cluster counts and detectable effect sizes for between-DTR comparisons.

The comparisons covered are two embedded regimens that start with different
first-stage treatments.  The required number of clusters is the product of

* ``base``: ``4 (z_beta + z_{alpha/2})^2 / (m delta^2)``, the two-arm
  individually-randomized count per cluster member,
* ``vif``: ``1 + (m - 1) rho``, the cluster design effect,
* ``rerand``: inflation from re-randomizing non-responders,
  ``1 + (1 - p1)/2`` for ADEPT and ``1 + ((1 - p1) + (1 - p_neg1))/2`` for the
  prototypical design,
* ``cov_reduction``: ``1 - Cor^2(Y, X)`` when a cluster-level covariate is
  adjusted for (``rho`` is then the conditional ICC).

Normal quantiles come from ``scipy.stats.norm.ppf`` (accurate to roughly
1e-15 over the range used here).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

from scipy import stats

from smart_cluster.design import ADEPT, DesignKind, parse_design

ROUNDING_MODES = ("nearest", "ceiling")


@dataclass(frozen=True)
class SampleSizeInputs:
    design: DesignKind
    m: int
    delta: float
    rho: float
    p1: float
    p_neg1: Optional[float] = None
    alpha: float = 0.05
    power: float = 0.8
    cor2_yx: Optional[float] = None
    rounding: str = "nearest"

    def __post_init__(self):
        object.__setattr__(self, "design", parse_design(self.design))
        if self.m < 1 or int(self.m) != self.m:
            raise ValueError(f"cluster size m must be a positive integer, got {self.m}")
        if not self.delta > 0:
            raise ValueError(f"effect size delta must be > 0, got {self.delta}")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError(f"ICC rho must lie in [0, 1), got {self.rho}")
        if not 0.0 < self.p1 <= 1.0:
            raise ValueError(f"response probability p1 must lie in (0, 1], got {self.p1}")
        if self.design is not ADEPT:
            if self.p_neg1 is None:
                raise ValueError("the prototypical design needs p_neg1")
            if not 0.0 < self.p_neg1 <= 1.0:
                raise ValueError(f"response probability p_neg1 must lie in (0, 1], got {self.p_neg1}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0.0 < self.power < 1.0:
            raise ValueError(f"power must lie in (0, 1), got {self.power}")
        if self.cor2_yx is not None and not 0.0 <= self.cor2_yx < 1.0:
            raise ValueError(f"Cor^2(Y, X) must lie in [0, 1), got {self.cor2_yx}")
        if self.rounding not in ROUNDING_MODES:
            raise ValueError(f"rounding must be one of {ROUNDING_MODES}")


@dataclass(frozen=True)
class CellMoments:
    """Responder and non-responder moments for one regimen."""

    mu_r: float
    mu_nr: float
    var_r: float
    var_nr: float
    icc_r: float
    icc_nr: float
    p_response: float

    def __post_init__(self):
        if self.var_r <= 0 or self.var_nr <= 0:
            raise ValueError("cell variances must be positive")
        if not 0.0 < self.p_response < 1.0:
            raise ValueError("p_response must lie in (0, 1)")


def z_quantile(upper_tail: float) -> float:
    """``z`` with ``P(Z > z) = upper_tail`` for a standard normal ``Z``."""
    if not 0.0 < upper_tail < 1.0:
        raise ValueError(f"tail probability must lie in (0, 1), got {upper_tail}")
    return float(stats.norm.isf(upper_tail))


def _round(n: float, mode: str) -> int:
    if mode == "ceiling":
        # guard against 88.0000000001 from floating-point noise
        return int(math.ceil(n - 1e-9))
    return int(math.floor(n + 0.5))


def size_terms(inputs: SampleSizeInputs) -> dict[str, float]:
    """The multiplicative factors whose product is the unrounded cluster count."""
    z = z_quantile(1 - inputs.power) + z_quantile(inputs.alpha / 2)
    base = 4.0 * z**2 / (inputs.m * inputs.delta**2)
    return {"base": base, **_design_terms(inputs)}


def _design_terms(inputs: SampleSizeInputs) -> dict[str, float]:
    vif = 1.0 + (inputs.m - 1) * inputs.rho
    if inputs.design is ADEPT:
        rerand = 1.0 + (1.0 - inputs.p1) / 2.0
    else:
        rerand = 1.0 + ((1.0 - inputs.p1) + (1.0 - inputs.p_neg1)) / 2.0
    cov = 1.0 - (inputs.cor2_yx or 0.0)
    return {"vif": vif, "rerand": rerand, "cov_reduction": cov}


def formula_name(inputs: SampleSizeInputs) -> str:
    name = f"{inputs.design.value}"
    return name + ("-covariate" if inputs.cor2_yx is not None else "")


def required_clusters_exact(inputs: SampleSizeInputs) -> float:
    terms = size_terms(inputs)
    return terms["base"] * terms["vif"] * terms["rerand"] * terms["cov_reduction"]


def required_clusters(inputs: SampleSizeInputs) -> int:
    """Total clusters needed, rounded per ``inputs.rounding``."""
    return _round(required_clusters_exact(inputs), inputs.rounding)


def size_report(inputs: SampleSizeInputs) -> dict:
    return {
        "n": required_clusters(inputs),
        "n_exact": required_clusters_exact(inputs),
        "formula": formula_name(inputs),
        "terms": size_terms(inputs),
    }


def detectable_effect_size(inputs: SampleSizeInputs, n: int) -> float:
    """Standardized effect detectable with ``n`` clusters (``inputs.delta`` ignored)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    z = z_quantile(1 - inputs.power) + z_quantile(inputs.alpha / 2)
    t = _design_terms(inputs)
    return math.sqrt(4.0 * z**2 * t["vif"] * t["rerand"] * t["cov_reduction"] / (inputs.m * n))


def mde_report(inputs: SampleSizeInputs, n: int) -> dict:
    return {
        "delta": detectable_effect_size(inputs, n),
        "n": n,
        "formula": formula_name(inputs),
        "terms": _design_terms(inputs),
    }


def min_cluster_size(sizes: Sequence[int]) -> int:
    """Conservative common cluster size for unequal clusters: the smallest one."""
    sizes = list(sizes)
    if not sizes or min(sizes) < 1:
        raise ValueError("cluster sizes must be a non-empty list of positive integers")
    return int(min(sizes))


def with_unequal_sizes(inputs: SampleSizeInputs, sizes: Sequence[int]) -> SampleSizeInputs:
    return replace(inputs, m=min_cluster_size(sizes))


def rho_conditional(rho: float, cor2: float) -> float:
    """ICC left after adjusting for a cluster-level covariate."""
    if not 0.0 <= cor2 < 1.0:
        raise ValueError(f"Cor^2 must lie in [0, 1), got {cor2}")
    return (rho - cor2) / (1.0 - cor2)


def rho_unconditional(rho_star: float, cor2: float) -> float:
    """Inverse of :func:`rho_conditional`."""
    if not 0.0 <= cor2 < 1.0:
        raise ValueError(f"Cor^2 must lie in [0, 1), got {cor2}")
    return rho_star * (1.0 - cor2) + cor2


def tau2_bound(sigma2: float, rho: float, m: int, p_response: float, rerandomized: bool) -> float:
    """Upper bound on ``Var(sqrt(N) * mean estimate)`` for one regimen.

    Re-randomized regimens get the factor ``2 (2 - p)``; regimens whose
    non-responders are not re-randomized get exactly 2.
    """
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    if m < 1:
        raise ValueError("m must be >= 1")
    if m > 1 and not -1.0 / (m - 1) < rho < 1.0:
        raise ValueError(f"rho={rho} is not a valid ICC for m={m}")
    if not 0.0 <= p_response <= 1.0:
        raise ValueError("p_response must lie in [0, 1]")
    factor = 2.0 * (2.0 - p_response) if rerandomized else 2.0
    return factor * sigma2 * (1.0 + (m - 1) * rho) / m


def required_clusters_from_tau(
    tau2_a: float,
    tau2_b: float,
    delta: float,
    sigma2_pooled: float,
    alpha: float = 0.05,
    power: float = 0.8,
    rounding: str = "nearest",
) -> int:
    """Cluster count from per-regimen variance bounds and a pooled outcome variance."""
    if not delta > 0:
        raise ValueError("delta must be > 0")
    if min(tau2_a, tau2_b, sigma2_pooled) <= 0:
        raise ValueError("variances must be positive")
    if rounding not in ROUNDING_MODES:
        raise ValueError(f"rounding must be one of {ROUNDING_MODES}")
    z = z_quantile(1 - power) + z_quantile(alpha / 2)
    return _round(z**2 * (tau2_a + tau2_b) / (delta**2 * sigma2_pooled), rounding)


@dataclass(frozen=True)
class Assumption2Check:
    holds: bool
    lhs: float
    rhs: float


def check_assumption2(cells: CellMoments) -> Assumption2Check:
    """Scalar form of the non-responder covariance condition for one regimen."""
    p = cells.p_response
    gap = (cells.mu_r - cells.mu_nr) ** 2 * p * (1.0 - 2.0 * p)
    lhs = abs((cells.var_r * cells.icc_r - cells.var_nr * cells.icc_nr) * p + gap)
    rhs = (cells.var_r - cells.var_nr) * p + gap
    return Assumption2Check(lhs <= rhs + 1e-12 * max(1.0, abs(rhs)), lhs, rhs)
