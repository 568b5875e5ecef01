"""Weighted-and-replicated estimating equations for embedded cluster-level DTRs.

Each cluster is replicated once per embedded regimen it is consistent with,
weighted by its known inverse-probability weight, and given that regimen's
regressor rows.  The marginal mean is linear in ``theta = (beta, eta)`` so the
estimating equations reduce to weighted normal equations that are solved
exactly.  Exchangeable working covariances are applied through their closed
form inverse.
"""

from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import stats

from smart_cluster.data import TrialDataset, validate
from smart_cluster.design import (
    ADEPT,
    DesignKind,
    EmbeddedDtr,
    PROTOTYPICAL,
    check_dtr,
    embedded_dtrs,
    parse_design,
)

RHO_MARGIN = 1e-6


class EstimationError(RuntimeError):
    """The estimating equations cannot be solved for this dataset."""


class WorkingCovarianceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class MarginalMeanSpec:
    """Marginal mean model for a design with ``p`` covariates.

    ADEPT rows are ``(1, a1, a2*I{a1=1}, x)``; prototypical rows are
    ``(1, a1, a2, a1*a2, x)``.
    """

    design: DesignKind
    p: int = 0

    def __post_init__(self):
        object.__setattr__(self, "design", parse_design(self.design))
        if self.p < 0:
            raise ValueError("p must be non-negative")

    @property
    def q(self) -> int:
        return 4 if self.design is PROTOTYPICAL else 3

    @property
    def dim(self) -> int:
        return self.q + self.p

    @property
    def dtrs(self) -> list[EmbeddedDtr]:
        return embedded_dtrs(self.design)

    def beta_row(self, dtr: EmbeddedDtr) -> np.ndarray:
        check_dtr(dtr, self.design)
        a1 = dtr.a1
        if self.design is PROTOTYPICAL:
            a2 = dtr.a2
            return np.array([1.0, a1, a2, a1 * a2])
        a2 = dtr.a2 if a1 == 1 else 0
        return np.array([1.0, a1, a2])

    def names(self) -> list[str]:
        return [f"beta{j}" for j in range(self.q)] + [f"eta{j + 1}" for j in range(self.p)]


def regressor_row(dtr: EmbeddedDtr, x, spec: MarginalMeanSpec) -> np.ndarray:
    x = np.zeros(spec.p) if x is None else np.asarray(x, dtype=float).reshape(-1)
    if len(x) != spec.p:
        raise ValueError(f"covariate vector has length {len(x)}, model expects {spec.p}")
    return np.concatenate([spec.beta_row(dtr), x])


@dataclass(frozen=True)
class WorkingCovariance:
    """Per-regimen ``(sigma2, rho)`` for ``V = sigma2 * Exch_m(rho)``."""

    sigma2: tuple[float, ...]
    rho: tuple[float, ...]
    shared: bool = False

    @classmethod
    def identity(cls, spec: MarginalMeanSpec) -> "WorkingCovariance":
        k = len(spec.dtrs)
        return cls((1.0,) * k, (0.0,) * k)

    @classmethod
    def exchangeable(cls, spec: MarginalMeanSpec, sigma2: float, rho: float) -> "WorkingCovariance":
        k = len(spec.dtrs)
        return cls((float(sigma2),) * k, (float(rho),) * k, shared=True)

    def to_dict(self, spec: MarginalMeanSpec) -> dict:
        if self.shared:
            return {"shared": {"sigma2": self.sigma2[0], "rho": self.rho[0]}}
        return {d.label: {"sigma2": s, "rho": r} for d, s, r in zip(spec.dtrs, self.sigma2, self.rho)}


def exch_inverse(m: int, sigma2: float, rho: float) -> np.ndarray:
    """Dense inverse of ``sigma2 * Exch_m(rho)`` from its closed form."""
    c = rho / (1.0 + (m - 1) * rho)
    return (np.eye(m) - c * np.ones((m, m))) / (sigma2 * (1.0 - rho))


def _cluster_sums(values: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    return np.add.reduceat(values, offsets, axis=0)


class _Layout:
    """Stacked arrays shared by the solver, residuals and the sandwich."""

    def __init__(self, dataset: TrialDataset, spec: MarginalMeanSpec):
        if dataset.design is not spec.design:
            raise ValueError(f"dataset design {dataset.design} does not match model design {spec.design}")
        if dataset.p != spec.p:
            raise ValueError(f"dataset has p={dataset.p} covariates, model expects p={spec.p}")
        self.spec = spec
        self.m = dataset.sizes.astype(float)
        self.offsets = dataset.offsets
        self.owner = np.repeat(np.arange(dataset.n_clusters), dataset.sizes)
        self.y = dataset.y
        self.x = dataset.x
        self.ybar = _cluster_sums(self.y, self.offsets) / self.m
        self.xbar = _cluster_sums(self.x, self.offsets) / self.m[:, None] if spec.p else np.zeros((dataset.n_clusters, 0))
        # deviations from cluster means carry the within-cluster information
        self.yc = self.y - self.ybar[self.owner]
        self.xc = self.x - self.xbar[self.owner]
        self.wi = dataset.weights[:, None] * dataset.indicators  # (N, K)
        self.betas = [spec.beta_row(d) for d in spec.dtrs]

    def rows(self, k: int) -> np.ndarray:
        b = np.broadcast_to(self.betas[k], (len(self.y), self.spec.q))
        return np.hstack([b, self.x])

    def mean_rows(self, k: int) -> np.ndarray:
        return np.hstack([np.broadcast_to(self.betas[k], (len(self.m), self.spec.q)), self.xbar])

    def scales(self, V: WorkingCovariance, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-cluster weights on the within- and between-cluster parts of ``V^-1``.

        ``Exch(rho)^-1 = (I - J/m) / (1 - rho) + (J/m) / (1 + (m-1) rho)``, so
        the within part gets ``I*W / (sigma2 (1-rho))`` and the cluster mean
        gets ``I*W*m / (sigma2 (1 + (m-1) rho))``.  Keeping the two apart avoids
        cancellation as ``rho`` approaches 1.
        """
        s2, rho = V.sigma2[k], V.rho[k]
        within = self.wi[:, k] / (s2 * (1.0 - rho))
        between = self.wi[:, k] * self.m / (s2 * (1.0 + (self.m - 1.0) * rho))
        return within, between


def _deficiency(dataset: TrialDataset, spec: MarginalMeanSpec) -> str:
    counts = dataset.indicators.sum(axis=0)
    problems = [f"no clusters consistent with DTR {d.label}" for d, n in zip(spec.dtrs, counts) if n == 0]
    problems += validate(dataset).warnings
    if not problems:
        return "normal equations are singular; check for collinear or constant covariates"
    return "normal equations are singular: " + "; ".join(problems)


def _normal_equations(layout: _Layout, V: WorkingCovariance) -> tuple[np.ndarray, np.ndarray]:
    dim = layout.spec.dim
    lhs = np.zeros((dim, dim))
    rhs = np.zeros(dim)
    q = layout.spec.q
    for k in range(len(layout.betas)):
        within, between = layout.scales(V, k)
        if not np.any(within):
            continue
        Dbar = layout.mean_rows(k)
        lhs += Dbar.T @ (between[:, None] * Dbar)
        rhs += Dbar.T @ (between * layout.ybar)
        if layout.spec.p:
            w_ind = within[layout.owner]
            lhs[q:, q:] += layout.xc.T @ (w_ind[:, None] * layout.xc)
            rhs[q:] += layout.xc.T @ (w_ind * layout.yc)
    return lhs, rhs


def solve_weighted_ee(
    dataset: TrialDataset, spec: MarginalMeanSpec, V: Optional[WorkingCovariance] = None
) -> np.ndarray:
    """Root of the weighted estimating equations for a fixed working covariance.

    Empty design cells are tolerated as long as the system stays solvable;
    when it is singular the error names the regimens and cells lacking data.
    """
    layout = _Layout(dataset, spec)
    V = WorkingCovariance.identity(spec) if V is None else V
    lhs, rhs = _normal_equations(layout, V)
    lhs = (lhs + lhs.T) / 2
    if np.linalg.matrix_rank(lhs) < spec.dim:
        raise EstimationError(_deficiency(dataset, spec))
    return np.linalg.solve(lhs, rhs)


def residuals(dataset: TrialDataset, spec: MarginalMeanSpec, theta) -> np.ndarray:
    """``(n_individuals, K)`` residuals ``y - mu(x, a1, a2)`` for every regimen."""
    layout = _Layout(dataset, spec)
    theta = np.asarray(theta, dtype=float)
    return np.column_stack([layout.y - layout.rows(k) @ theta for k in range(len(layout.betas))])


def _clamp_rho(rho: float, m_max: int) -> float:
    upper = 1.0 - RHO_MARGIN
    lower = -1.0 / (m_max - 1) + RHO_MARGIN if m_max > 1 else -upper
    return min(max(rho, lower), upper)


def estimate_working_cov(dataset: TrialDataset, resid: np.ndarray, shared: bool = False) -> WorkingCovariance:
    """Weighted moment estimates of each regimen's variance and ICC.

    Sums run over clusters consistent with the regimen, weighted by the known
    weights; the ICC uses within-cluster pairs ``j != k``.  Estimates are
    clamped so every ``Exch_m(rho)`` stays positive definite.
    """
    resid = np.asarray(resid, dtype=float)
    offsets = dataset.offsets
    m = dataset.sizes.astype(float)
    wi = dataset.weights[:, None] * dataset.indicators
    sq = _cluster_sums(resid**2, offsets)
    tot = _cluster_sums(resid, offsets)
    pairs = tot**2 - sq  # sum_{j != k} e_j e_k
    m_max = int(dataset.sizes.max())

    sigma2, rho = [], []
    for k, dtr in enumerate(embedded_dtrs(dataset.design)):
        w = wi[:, k]
        if not np.any(w):
            raise EstimationError(f"no clusters consistent with DTR {dtr.label}")
        s2 = float(np.sum(w * sq[:, k]) / np.sum(w * m))
        pair_weight = float(np.sum(w * m * (m - 1)))
        if s2 <= 0.0:
            warnings.warn(
                f"zero residual variance for DTR {dtr.label}; using identity working covariance",
                WorkingCovarianceWarning,
                stacklevel=2,
            )
            s2, r = 1.0, 0.0
        elif pair_weight == 0.0:
            warnings.warn(
                f"all clusters consistent with DTR {dtr.label} have size 1; ICC set to 0",
                WorkingCovarianceWarning,
                stacklevel=2,
            )
            r = 0.0
        else:
            r = float(np.sum(w * pairs[:, k]) / (s2 * pair_weight))
        sigma2.append(s2)
        rho.append(r)

    if shared:
        sigma2 = [float(np.mean(sigma2))] * len(sigma2)
        rho = [float(np.mean(rho))] * len(rho)
    clamped = [_clamp_rho(r, m_max) for r in rho]
    if any(abs(a - b) > 0 for a, b in zip(clamped, rho)):
        warnings.warn("working ICC estimate clamped to keep V positive definite", WorkingCovarianceWarning, stacklevel=2)
    return WorkingCovariance(tuple(sigma2), tuple(clamped), shared=shared)


def cluster_scores(dataset: TrialDataset, spec: MarginalMeanSpec, theta, V: WorkingCovariance) -> np.ndarray:
    """``(N, q+p)`` matrix whose rows are the per-cluster estimating functions."""
    layout = _Layout(dataset, spec)
    theta = np.asarray(theta, dtype=float)
    U = np.zeros((dataset.n_clusters, spec.dim))
    q = spec.q
    eta = theta[q:]
    for k in range(len(layout.betas)):
        within, between = layout.scales(V, k)
        if not np.any(within):
            continue
        Dbar = layout.mean_rows(k)
        ebar = layout.ybar - Dbar @ theta
        U += (between * ebar)[:, None] * Dbar
        if spec.p:
            ec = layout.yc - layout.xc @ eta
            U[:, q:] += within[:, None] * _cluster_sums(layout.xc * ec[:, None], layout.offsets)
    return U


def sandwich_covariance(dataset: TrialDataset, spec: MarginalMeanSpec, theta, V: WorkingCovariance) -> np.ndarray:
    """Plug-in robust variance of ``theta_hat`` (the sandwich divided by N)."""
    n = dataset.n_clusters
    layout = _Layout(dataset, spec)
    J, _ = _normal_equations(layout, V)
    J = (J + J.T) / (2 * n)
    if np.linalg.matrix_rank(J) < spec.dim:
        raise EstimationError("bread matrix is singular")
    U = cluster_scores(dataset, spec, theta, V)
    A = U.T @ U / n
    J_inv = np.linalg.inv(J)
    sigma = J_inv @ A @ J_inv
    sigma = (sigma + sigma.T) / 2
    return sigma / n


@dataclass(frozen=True)
class ContrastResult:
    c: np.ndarray
    estimate: float
    std_error: float
    z: float
    p_value: float
    alpha: float = 0.05
    label: str = ""

    @property
    def reject(self) -> bool:
        return self.p_value < self.alpha

    def to_dict(self) -> dict:
        out = {
            "c": [float(v) for v in self.c],
            "estimate": self.estimate,
            "se": self.std_error,
            "z": self.z,
            "p": self.p_value,
            "alpha": self.alpha,
            "reject": self.reject,
        }
        if self.label:
            out["label"] = self.label
        return out


@dataclass(frozen=True, eq=False)
class FitResult:
    spec: MarginalMeanSpec
    theta: np.ndarray
    sigma_theta: np.ndarray
    working: WorkingCovariance
    n_clusters: int
    iterations: int

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.sigma_theta), 0.0, None))

    def to_dict(self, contrasts: Iterable[ContrastResult] = ()) -> dict:
        return {
            "design": self.spec.design.value,
            "names": self.spec.names(),
            "theta": [float(v) for v in self.theta],
            "se": [float(v) for v in self.std_errors],
            "cov": self.sigma_theta.tolist(),
            "working": self.working.to_dict(self.spec),
            "n_clusters": self.n_clusters,
            "iterations": self.iterations,
            "contrasts": [c.to_dict() for c in contrasts],
        }


def fit(
    dataset: TrialDataset,
    spec: Optional[MarginalMeanSpec] = None,
    shared_cov: bool = False,
    iterations: int = 2,
) -> FitResult:
    """Identity-covariance solve followed by ``iterations`` working-covariance updates."""
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    spec = MarginalMeanSpec(dataset.design, dataset.p) if spec is None else spec
    V = WorkingCovariance.identity(spec)
    theta = solve_weighted_ee(dataset, spec, V)
    for _ in range(iterations):
        V = estimate_working_cov(dataset, residuals(dataset, spec, theta), shared=shared_cov)
        theta = solve_weighted_ee(dataset, spec, V)
    sigma = sandwich_covariance(dataset, spec, theta, V)
    return FitResult(spec, theta, sigma, V, dataset.n_clusters, iterations)


def wald_test(result: FitResult, c, alpha: float = 0.05, label: str = "") -> ContrastResult:
    c = np.asarray(c, dtype=float).reshape(-1)
    if len(c) != result.spec.dim:
        raise ValueError(f"contrast has length {len(c)}, model has {result.spec.dim} parameters")
    var = float(c @ result.sigma_theta @ c)
    if not var > 0.0:
        raise EstimationError("contrast has zero estimated variance")
    est = float(c @ result.theta)
    se = math.sqrt(var)
    z = est / se
    p = float(2.0 * stats.norm.sf(abs(z)))
    return ContrastResult(c, est, se, z, p, alpha, label)


def dtr_means(result: FitResult, x=None) -> dict[EmbeddedDtr, tuple[float, float]]:
    """Estimated marginal mean and standard error for each embedded regimen at ``x``."""
    out = {}
    for dtr in result.spec.dtrs:
        row = regressor_row(dtr, x, result.spec)
        mean = float(row @ result.theta)
        out[dtr] = (mean, math.sqrt(max(float(row @ result.sigma_theta @ row), 0.0)))
    return out


def _group_row(spec: MarginalMeanSpec, dtrs: Sequence[EmbeddedDtr]) -> np.ndarray:
    rows = [np.concatenate([spec.beta_row(d), np.zeros(spec.p)]) for d in dtrs]
    return np.mean(rows, axis=0)


def contrast_vector(spec: MarginalMeanSpec, first, second) -> np.ndarray:
    """Coefficient vector for mean(first regimens) minus mean(second regimens)."""
    first = [first] if isinstance(first, EmbeddedDtr) else list(first)
    second = [second] if isinstance(second, EmbeddedDtr) else list(second)
    return _group_row(spec, first) - _group_row(spec, second)


_NUMBER_LIST = re.compile(r"^\s*\[?\s*-?[\d.eE+-]+(\s*,\s*-?[\d.eE+-]+)*\s*\]?\s*$")


_AIMS = {
    "aim-i": {ADEPT: "first-stage", PROTOTYPICAL: "first-stage"},
    "aim-ii": {ADEPT: "second-stage", PROTOTYPICAL: "second-stage"},
    "aim-iii": {ADEPT: "(1,1)-vs-(1,-1)", PROTOTYPICAL: "(1,1)-vs-(1,-1)"},
    "aim-iv": {ADEPT: "(1,1)-vs-(-1,.)", PROTOTYPICAL: "(1,1)-vs-(-1,-1)"},
}


def parse_contrast(spec: MarginalMeanSpec, text: str) -> tuple[np.ndarray, str]:
    """Turn a contrast description into ``(c, label)``.

    Accepts ``"(1,1)-vs-(-1,.)"``, grouped regimens joined by ``+`` on either
    side (averaged), the names ``first-stage`` and ``second-stage``, or an
    explicit comma-separated vector.  A leading ``"adept:"`` or
    ``"prototypical:"`` must match the design.  ``aim-i`` to ``aim-iv`` name
    the usual primary aims: first-stage options, second-stage options, two
    regimens sharing the first stage, and two regimens that differ in it.
    """
    name = text.strip().lower()
    if ":" in name:
        prefix, name = (part.strip() for part in name.split(":", 1))
        if parse_design(prefix) is not spec.design:
            raise ValueError(f"contrast {text!r} is for the {prefix} design, not {spec.design}")
    dtrs = spec.dtrs
    name = _AIMS.get(name, {}).get(spec.design, name)
    if name in ("first-stage", "stage1"):
        pos = [d for d in dtrs if d.a1 == 1]
        neg = [d for d in dtrs if d.a1 == -1]
        return contrast_vector(spec, pos, neg), "first-stage"
    if name in ("second-stage", "stage2"):
        if spec.design is not PROTOTYPICAL:
            raise ValueError("second-stage contrast needs second-stage options under both first-stage arms")
        pos = [d for d in dtrs if d.a2 == 1]
        neg = [d for d in dtrs if d.a2 == -1]
        return contrast_vector(spec, pos, neg), "second-stage"
    if "-vs-" in name:
        left, right = name.split("-vs-", 1)
        groups = []
        for side in (left, right):
            groups.append([check_dtr(EmbeddedDtr.parse(t), spec.design) for t in side.split("+")])
        label = "-vs-".join("+".join(d.label for d in g) for g in groups)
        return contrast_vector(spec, groups[0], groups[1]), label
    if _NUMBER_LIST.match(name):
        values = [float(v) for v in name.strip("[] ").split(",")]
        if len(values) == spec.q and spec.p:
            values += [0.0] * spec.p
        if len(values) != spec.dim:
            raise ValueError(f"contrast has {len(values)} entries, model has {spec.dim} parameters")
        return np.array(values), text.strip()
    raise ValueError(f"cannot parse contrast {text!r}")
