"""Cell-level data-generating models and a Monte Carlo power harness.

Each design cell ``(A1, R, A2)`` carries a mean, a (conditional) variance and a
(conditional) ICC.  Outcomes within a cluster are exchangeable normal; an
optional standard-normal cluster-level covariate enters the mean linearly or
through the clipped transform ``f_k``.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, NamedTuple, Optional

import numpy as np
from scipy import stats

from smart_cluster.data import ClusterRecord, TrialDataset
from smart_cluster.design import (
    ADEPT,
    DesignKind,
    EmbeddedDtr,
    TreatmentPath,
    check_dtr,
    design_cells,
    embedded_dtrs,
    parse_design,
    rerandomized,
)
from smart_cluster.estimation import EstimationError, MarginalMeanSpec, fit, wald_test

CellKey = tuple  # (a1, r, a2 or None)


class CellParams(NamedTuple):
    mu: float
    var: float
    icc: float


@dataclass(frozen=True)
class MarginalMoments:
    mean: float
    variance: float
    icc: float

    @property
    def covariance(self) -> float:
        return self.icc * self.variance


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    """Generative parameters for one simulated trial configuration.

    ``k`` set means the covariate enters the mean through ``clip_fk(X, k)``;
    the analysis model still uses the raw ``X``.
    """

    design: DesignKind
    p1: float
    p_neg1: float
    cells: Mapping[CellKey, CellParams]
    eta: float = 0.0
    k: Optional[float] = None
    covariate: bool = False
    name: str = ""

    def __post_init__(self):
        design = parse_design(self.design)
        object.__setattr__(self, "design", design)
        cells = {tuple(key): CellParams(*map(float, val)) for key, val in dict(self.cells).items()}
        object.__setattr__(self, "cells", cells)
        expected = set(design_cells(design))
        if set(cells) != expected:
            missing = sorted(map(str, expected - set(cells)))
            extra = sorted(map(str, set(cells) - expected))
            raise ScenarioError(f"scenario cells do not match the {design} design (missing {missing}, extra {extra})")
        for key, cp in cells.items():
            if not cp.var > 0:
                raise ScenarioError(f"cell {key}: variance must be positive")
            if not 0.0 <= cp.icc < 1.0:
                raise ScenarioError(f"cell {key}: ICC must lie in [0, 1)")
        for name in ("p1", "p_neg1"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ScenarioError(f"{name} must lie in (0, 1)")
        if self.k is not None and not self.k > 0:
            raise ScenarioError("clip threshold k must be positive")

    def p_response(self, a1: int) -> float:
        return self.p1 if a1 == 1 else self.p_neg1

    @property
    def var_x(self) -> float:
        """Variance of the covariate term that multiplies ``eta``."""
        if not self.covariate:
            return 0.0
        return 1.0 if self.k is None else var_clipped_normal(self.k)

    @property
    def cov_x(self) -> float:
        """``Cov(f_k(X), X)``; equals ``var_x`` for a linear covariate."""
        if not self.covariate:
            return 0.0
        return 1.0 if self.k is None else cov_clipped_normal(self.k)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "design": self.design.value,
            "p1": self.p1,
            "p_neg1": self.p_neg1,
            "eta": self.eta,
            "k": self.k,
            "covariate": self.covariate,
            "cells": [
                {"a1": a1, "r": r, "a2": a2, "mu": cp.mu, "var": cp.var, "icc": cp.icc}
                for (a1, r, a2), cp in self.cells.items()
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Scenario":
        try:
            cells = {
                (int(c["a1"]), int(c["r"]), None if c.get("a2") is None else int(c["a2"])): (c["mu"], c["var"], c["icc"])
                for c in data["cells"]
            }
            return cls(
                design=data["design"],
                p1=float(data["p1"]),
                p_neg1=float(data["p_neg1"]),
                cells=cells,
                eta=float(data.get("eta", 0.0) or 0.0),
                k=None if data.get("k") is None else float(data["k"]),
                covariate=bool(data.get("covariate", False)),
                name=str(data.get("name", "")),
            )
        except (KeyError, TypeError) as exc:
            raise ScenarioError(f"malformed scenario: {exc}") from None

    @classmethod
    def from_json(cls, path) -> "Scenario":
        with open(path, encoding="utf-8") as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ScenarioError(f"scenario file is not valid JSON: {exc}") from None


def clip_fk(x, k: float):
    """``x`` clipped to ``[-k, k]``."""
    if not k > 0:
        raise ValueError("k must be positive")
    out = np.clip(x, -k, k)
    return float(out) if np.ndim(out) == 0 else out


def var_clipped_normal(k: float) -> float:
    """``Var(clip_fk(X, k))`` for standard normal ``X``.

    By symmetry the mean is 0, so the variance is
    ``E[X^2; |X| <= k] + 2 k^2 P(X > k)``.
    """
    if not k > 0:
        raise ValueError("k must be positive")
    tail = stats.norm.sf(k)
    inner = (1.0 - 2.0 * tail) - 2.0 * k * stats.norm.pdf(k)
    return float(inner + 2.0 * k * k * tail)


def cov_clipped_normal(k: float) -> float:
    """``Cov(clip_fk(X, k), X)`` for standard normal ``X``, i.e. ``P(|X| <= k)``."""
    if not k > 0:
        raise ValueError("k must be positive")
    return float(1.0 - 2.0 * stats.norm.sf(k))


def _dtr_cells(scenario: Scenario, dtr: EmbeddedDtr) -> tuple[CellParams, CellParams, float]:
    check_dtr(dtr, scenario.design)
    a1 = dtr.a1
    resp = scenario.cells[(a1, 1, None)]
    a2 = dtr.a2 if rerandomized(scenario.design, a1, 0) else None
    nonresp = scenario.cells[(a1, 0, a2)]
    return resp, nonresp, scenario.p_response(a1)


def mixture_moments(scenario: Scenario, dtr: EmbeddedDtr) -> MarginalMoments:
    """Regimen-level moments from its responder and non-responder cells.

    For covariate scenarios these are conditional on ``X``.
    """
    resp, nonresp, p = _dtr_cells(scenario, dtr)
    return _mix(resp, nonresp, p)


def _mix(resp: CellParams, nonresp: CellParams, p: float) -> MarginalMoments:
    spread = p * (1.0 - p) * (resp.mu - nonresp.mu) ** 2
    mean = p * resp.mu + (1.0 - p) * nonresp.mu
    var = p * resp.var + (1.0 - p) * nonresp.var + spread
    cov = p * resp.var * resp.icc + (1.0 - p) * nonresp.var * nonresp.icc + spread
    return MarginalMoments(mean, var, cov / var)


def unconditional_moments(cond: MarginalMoments, eta: float, var_x: float) -> tuple[MarginalMoments, float]:
    """Add a cluster-level covariate's contribution; returns moments and implied ``Cor^2(Y, X)``."""
    if var_x < 0:
        raise ValueError("var_x must be non-negative")
    extra = eta * eta * var_x
    var = cond.variance + extra
    cov = cond.covariance + extra
    return MarginalMoments(cond.mean, var, cov / var), extra / var


def scenario_moments(scenario: Scenario) -> dict[EmbeddedDtr, dict]:
    """Conditional and unconditional moments for every embedded regimen.

    ``cor2`` is the squared correlation of ``Y`` with the covariate term
    ``f_k(X)``; ``cor2_x`` is the one with the raw ``X`` the analysis uses.
    The two agree for a linear covariate.
    """
    out = {}
    for dtr in embedded_dtrs(scenario.design):
        cond = mixture_moments(scenario, dtr)
        entry = {"conditional": cond}
        if scenario.covariate:
            entry["unconditional"], entry["cor2"] = unconditional_moments(cond, scenario.eta, scenario.var_x)
            entry["cor2_x"] = (scenario.eta * scenario.cov_x) ** 2 / entry["unconditional"].variance
        else:
            entry["unconditional"], entry["cor2"] = cond, 0.0
            entry["cor2_x"] = 0.0
        out[dtr] = entry
    return out


def generate_trial(
    scenario: Scenario,
    n: int,
    m: int,
    seed=None,
    force_dtr: Optional[EmbeddedDtr] = None,
) -> TrialDataset:
    """Simulate ``n`` clusters of size ``m``.

    ``seed`` may be an int or a ``numpy.random.SeedSequence``.  ``force_dtr``
    replaces both randomizations with the regimen's choices, which is useful
    for checking regimen-level moments; response status stays random.
    """
    if n < 1 or m < 1:
        raise ValueError("n and m must be positive")
    design = scenario.design
    rng = np.random.default_rng(seed)
    if force_dtr is not None:
        check_dtr(force_dtr, design)
        a1 = np.full(n, force_dtr.a1)
    else:
        a1 = np.where(rng.random(n) < 0.5, 1, -1)
    p_resp = np.where(a1 == 1, scenario.p1, scenario.p_neg1)
    r = (rng.random(n) < p_resp).astype(int)
    coin = np.where(rng.random(n) < 0.5, 1, -1)
    if force_dtr is not None and force_dtr.a2 is not None:
        coin = np.full(n, force_dtr.a2)
    x = rng.standard_normal(n) if scenario.covariate else None
    z_cluster = rng.standard_normal(n)
    z_ind = rng.standard_normal((n, m))

    clusters = []
    width = len(str(n))
    for i in range(n):
        ai, ri = int(a1[i]), int(r[i])
        a2 = int(coin[i]) if rerandomized(design, ai, ri) else None
        cp = scenario.cells[(ai, ri, a2)]
        eps = math.sqrt(cp.var) * (math.sqrt(cp.icc) * z_cluster[i] + math.sqrt(1.0 - cp.icc) * z_ind[i])
        y = cp.mu + eps
        if scenario.covariate:
            signal = x[i] if scenario.k is None else clip_fk(x[i], scenario.k)
            y = y + scenario.eta * signal
            cov = np.full((m, 1), x[i])
        else:
            cov = np.zeros((m, 0))
        clusters.append(ClusterRecord(f"c{i + 1:0{width}d}", TreatmentPath(ai, ri, a2), y, cov))
    p = 1 if scenario.covariate else 0
    return TrialDataset(design, tuple(clusters), p, cluster_covariates=(0,) if p else ())


@dataclass
class PowerResult:
    power: float
    mc_se: float
    rejections: int
    successes: int
    failures: int
    reps: int
    failure_messages: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "power": self.power,
            "mc_se": self.mc_se,
            "rejections": self.rejections,
            "successes": self.successes,
            "failures": self.failures,
            "reps": self.reps,
            "failure_messages": self.failure_messages[:10],
        }


def _one_rep(args) -> tuple[Optional[bool], str]:
    scenario, n, m, contrast, alpha, seed, shared_cov, iterations = args
    data = generate_trial(scenario, n, m, seed)
    try:
        result = fit(data, shared_cov=shared_cov, iterations=iterations)
        test = wald_test(result, contrast, alpha)
    except (EstimationError, np.linalg.LinAlgError) as exc:
        return None, str(exc)
    return bool(test.reject), ""


def mc_power(
    scenario: Scenario,
    n: int,
    m: int,
    contrast,
    reps: int = 1000,
    alpha: float = 0.05,
    master_seed: int = 0,
    shared_cov: bool = False,
    iterations: int = 2,
    workers: int = 1,
) -> PowerResult:
    """Rejection rate of the Wald test over ``reps`` simulated trials.

    Replication ``i`` uses the ``i``-th child of ``SeedSequence(master_seed)``,
    so results do not depend on ``workers``.  Replications whose fit fails
    are counted in ``failures`` and excluded from the power denominator.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    spec = MarginalMeanSpec(scenario.design, 1 if scenario.covariate else 0)
    contrast = np.asarray(contrast, dtype=float)
    if len(contrast) == spec.q and spec.p:
        contrast = np.concatenate([contrast, np.zeros(spec.p)])
    if len(contrast) != spec.dim:
        raise ValueError(f"contrast has length {len(contrast)}, model has {spec.dim} parameters")
    seeds = np.random.SeedSequence(master_seed).spawn(reps)
    jobs = [(scenario, n, m, contrast, alpha, s, shared_cov, iterations) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_one_rep, jobs, chunksize=max(1, reps // (4 * workers))))
    else:
        outcomes = [_one_rep(j) for j in jobs]
    rejected = [o for o, _ in outcomes if o is not None]
    messages = [msg for o, msg in outcomes if o is None]
    ok = len(rejected)
    hits = int(sum(rejected))
    power = hits / ok if ok else float("nan")
    se = math.sqrt(power * (1.0 - power) / ok) if ok else float("nan")
    return PowerResult(power, se, hits, ok, reps - ok, reps, messages)


# ---------------------------------------------------------------------------
# Built-in scenarios

_ROW1_NEG = {(-1, 1, None): (32.7, 63.39, 0.0006), (-1, 0, None): (31.0, 63.39, 0.0006)}
_ROW1_C = {(1, 0, -1): (28.0, 60.0, 0.0)}

_REFERENCE = {
    # no covariate: assumptions hold / variance ratio 1.5 across regimens / noisy non-responders
    "table5-row1": dict(
        cells={(1, 1, None): (34.71, 63.36, 0.0), (1, 0, 1): (32.71, 63.36, 0.0), **_ROW1_C, **_ROW1_NEG},
    ),
    "table5-row2": dict(
        cells={
            (1, 1, None): (34.71, 63.36, 0.0),
            (1, 0, 1): (32.71, 63.36, 0.0),
            **_ROW1_C,
            (-1, 1, None): (32.14, 43.0, 0.0076),
            (-1, 0, None): (31.44, 43.0, 0.0076),
        },
    ),
    "table5-row3": dict(
        cells={(1, 1, None): (33.36, 1.0, 0.9), (1, 0, 1): (33.05, 79.73, 0.007), **_ROW1_C, **_ROW1_NEG},
    ),
    # cluster-level covariate: linear / clipped at k = 2 / clipped at k = 1
    "table6-row1": dict(
        eta=4.47,
        covariate=True,
        cells={(1, 1, None): (34.94, 63.36, 0.0), (1, 0, 1): (32.94, 63.36, 0.0), **_ROW1_C, **_ROW1_NEG},
    ),
    "table6-row2": dict(
        eta=4.69,
        k=2.0,
        covariate=True,
        cells={(1, 1, None): (34.95, 63.36, 0.0), (1, 0, 1): (32.95, 63.36, 0.0), **_ROW1_C, **_ROW1_NEG},
    ),
    "table6-row3": dict(
        eta=6.66,
        k=1.0,
        covariate=True,
        cells={(1, 1, None): (34.98, 63.36, 0.0), (1, 0, 1): (32.98, 63.36, 0.0), **_ROW1_C, **_ROW1_NEG},
    ),
}

# (rho, delta, m) rows of the no-covariate power table and
# (rho*, delta, m, Cor^2) rows of the covariate power table
TABLE3_ROWS = [
    (0.01, 0.2, 5), (0.01, 0.2, 20), (0.01, 0.5, 5), (0.01, 0.5, 10),
    (0.1, 0.2, 5), (0.1, 0.2, 20), (0.1, 0.5, 5), (0.1, 0.5, 20),
]
TABLE4_ROWS = [
    (0.01, 0.2, 5, 0.238), (0.01, 0.2, 20, 0.238), (0.01, 0.5, 5, 0.043), (0.01, 0.5, 10, 0.066),
    (0.1, 0.2, 5, 0.243), (0.1, 0.2, 20, 0.243), (0.1, 0.5, 5, 0.043), (0.1, 0.5, 20, 0.043),
]


def adept_scenario(
    delta: float,
    rho: float,
    cor2: Optional[float] = None,
    k: Optional[float] = None,
    p1: float = 0.2,
    p_neg1: float = 0.3,
    name: str = "",
) -> Scenario:
    """ADEPT scenario hitting a target effect size and (conditional) ICC.

    Starts from the reference no-covariate configuration: responder and
    non-responder cells of (1,1) are two points apart with variance 63.36,
    the (-1,.) cells sit at 32.7 and 31 with variance 63.39.  Cell ICCs are
    solved so both compared regimens have ICC ``rho``, then the (1,1) cells are
    shifted so the standardized difference against (-1,.) equals ``delta``.
    With ``cor2`` the ICC is conditional on X and ``eta`` is set so the
    squared correlation of (1,1) outcomes with the raw X equals ``cor2``, also
    when the mean uses the clipped ``f_k(X)``.  ``delta`` is on the
    unconditional scale.
    """
    var_pos, var_neg = 63.36, 63.39
    mu_d, mu_e = 32.7, 31.0
    gap_pos = 2.0

    def cell_icc(var, p, gap, target):
        spread = p * (1 - p) * gap**2
        total = var + spread
        icc = (target * total - spread) / var
        if icc < -1e-12:
            raise ScenarioError(f"ICC {target} is unreachable with these cell means")
        return max(icc, 0.0)

    icc_neg = cell_icc(var_neg, p_neg1, mu_d - mu_e, rho)
    icc_pos = cell_icc(var_pos, p1, gap_pos, rho)
    neg = _mix(CellParams(mu_d, var_neg, icc_neg), CellParams(mu_e, var_neg, icc_neg), p_neg1)
    pos_var = var_pos + p1 * (1 - p1) * gap_pos**2

    eta, extra = 0.0, 0.0
    covariate = cor2 is not None
    if covariate:
        var_x = 1.0 if k is None else var_clipped_normal(k)
        cov_x = 1.0 if k is None else cov_clipped_normal(k)
        # (eta cov_x)^2 / (pos_var + eta^2 var_x) = cor2
        denom = cov_x**2 - cor2 * var_x
        if not denom > 0:
            raise ScenarioError(f"Cor^2 {cor2} is unreachable with clip threshold k={k}")
        eta = math.sqrt(cor2 * pos_var / denom)
        extra = eta * eta * var_x
    sd = math.sqrt((pos_var + neg.variance) / 2.0 + extra)
    mu_pos = neg.mean + delta * sd
    mu_b = mu_pos - p1 * gap_pos
    cells = {
        (1, 1, None): (mu_b + gap_pos, var_pos, icc_pos),
        (1, 0, 1): (mu_b, var_pos, icc_pos),
        **_ROW1_C,
        (-1, 1, None): (mu_d, var_neg, icc_neg),
        (-1, 0, None): (mu_e, var_neg, icc_neg),
    }
    return Scenario(ADEPT, p1, p_neg1, cells, eta=eta, k=k, covariate=covariate, name=name)


def _build_presets() -> dict[str, Scenario]:
    presets = {}
    for key, kw in _REFERENCE.items():
        presets[key] = Scenario(ADEPT, 0.2, 0.3, name=key, **kw)
    presets["table3-row1"] = replace(presets["table5-row1"], name="table3-row1")
    presets["table3-row1-viol1"] = replace(presets["table5-row2"], name="table3-row1-viol1")
    presets["table3-row1-viol2"] = replace(presets["table5-row3"], name="table3-row1-viol2")
    presets["table4-row1"] = replace(presets["table6-row1"], name="table4-row1")
    presets["table4-row1-k2"] = replace(presets["table6-row2"], name="table4-row1-k2")
    presets["table4-row1-k1"] = replace(presets["table6-row3"], name="table4-row1-k1")
    for i, (rho, delta, _m) in enumerate(TABLE3_ROWS, start=1):
        if i > 1:
            presets[f"table3-row{i}"] = adept_scenario(delta, rho, name=f"table3-row{i}")
    for i, (rho, delta, _m, cor2) in enumerate(TABLE4_ROWS, start=1):
        if i > 1:
            presets[f"table4-row{i}"] = adept_scenario(delta, rho, cor2=cor2, name=f"table4-row{i}")
        for kk in (2.0, 1.0):
            if i > 1:
                presets[f"table4-row{i}-k{int(kk)}"] = adept_scenario(
                    delta, rho, cor2=cor2, k=kk, name=f"table4-row{i}-k{int(kk)}"
                )
    presets["null"] = adept_scenario(0.0, 0.01, name="null")
    presets["null-covariate"] = adept_scenario(0.0, 0.01, cor2=0.238, name="null-covariate")
    return presets


PRESETS = _build_presets()

# design targets behind each power-table preset: m, rho (conditional when
# cor2 is set), delta and cor2; the required N follows from the formulas
PRESET_TARGETS: dict[str, dict] = {}
for _i, (_rho, _delta, _m) in enumerate(TABLE3_ROWS, start=1):
    for _suffix in ("", "-viol1", "-viol2") if _i == 1 else ("",):
        PRESET_TARGETS[f"table3-row{_i}{_suffix}"] = dict(m=_m, rho=_rho, delta=_delta, cor2=None)
for _i, (_rho, _delta, _m, _cor2) in enumerate(TABLE4_ROWS, start=1):
    for _suffix in ("", "-k2", "-k1"):
        PRESET_TARGETS[f"table4-row{_i}{_suffix}"] = dict(m=_m, rho=_rho, delta=_delta, cor2=_cor2)


def preset(name: str) -> Scenario:
    try:
        return PRESETS[name.strip().lower()]
    except KeyError:
        raise ScenarioError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}") from None
