import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from smart_cluster.data import ClusterRecord, TrialDataset
from smart_cluster.design import ADEPT, PROTOTYPICAL, EmbeddedDtr, TreatmentPath, embedded_dtrs
from smart_cluster.estimation import (
    EstimationError,
    FitResult,
    MarginalMeanSpec,
    WorkingCovariance,
    WorkingCovarianceWarning,
    cluster_scores,
    contrast_vector,
    dtr_means,
    estimate_working_cov,
    exch_inverse,
    fit,
    parse_contrast,
    regressor_row,
    residuals,
    sandwich_covariance,
    solve_weighted_ee,
    wald_test,
)

from conftest import beta_part, brute_force_theta, random_dataset


def with_y(ds, fn):
    clusters = tuple(ClusterRecord(c.id, c.path, fn(c.y), c.x) for c in ds.clusters)
    return TrialDataset(ds.design, clusters, ds.p, ds.cluster_covariates)


# ---------------------------------------------------------------- regressors

def test_regressor_rows():
    adept0 = MarginalMeanSpec(ADEPT, 0)
    np.testing.assert_array_equal(regressor_row(EmbeddedDtr(-1), None, adept0), [1, -1, 0])
    proto = MarginalMeanSpec(PROTOTYPICAL, 0)
    np.testing.assert_array_equal(regressor_row(EmbeddedDtr(1, -1), [], proto), [1, 1, -1, -1])
    adept1 = MarginalMeanSpec(ADEPT, 1)
    np.testing.assert_array_equal(regressor_row(EmbeddedDtr(1, 1), [0.5], adept1), [1, 1, 1, 0.5])
    with pytest.raises(ValueError):
        regressor_row(EmbeddedDtr(1, 1), [0.5, 1.0], adept1)


def test_regressor_length(design):
    for p in range(3):
        spec = MarginalMeanSpec(design, p)
        for d in spec.dtrs:
            assert len(regressor_row(d, np.zeros(p), spec)) == spec.q + p


def test_exch_inverse_closed_form():
    for m, rho in [(1, 0.3), (4, 0.2), (6, -0.15), (3, 0.95)]:
        V = 2.5 * ((1 - rho) * np.eye(m) + rho * np.ones((m, m)))
        np.testing.assert_allclose(exch_inverse(m, 2.5, rho), np.linalg.inv(V), rtol=1e-10, atol=1e-12)


# ---------------------------------------------------------------- solver

@pytest.mark.parametrize("p", [0, 1, 2])
def test_constant_outcome(rng, design, p):
    ds = with_y(random_dataset(rng, design, 25, p=p), lambda y: np.full_like(y, 7.25))
    theta = solve_weighted_ee(ds, MarginalMeanSpec(design, p))
    expected = np.zeros(MarginalMeanSpec(design, p).dim)
    expected[0] = 7.25
    np.testing.assert_allclose(theta, expected, atol=1e-10)


@pytest.mark.parametrize("p", [0, 1, 2])
def test_matches_brute_force_identity(rng, design, p):
    ds = random_dataset(rng, design, 30, p=p)
    theta = solve_weighted_ee(ds, MarginalMeanSpec(design, p))
    np.testing.assert_allclose(theta, brute_force_theta(ds), rtol=1e-10)


@pytest.mark.parametrize("p", [0, 2])
def test_matches_brute_force_exchangeable(rng, design, p):
    ds = random_dataset(rng, design, 30, p=p)
    K = len(embedded_dtrs(design))
    sigma2 = list(rng.uniform(0.5, 3.0, K))
    rho = list(rng.uniform(-0.1, 0.6, K))
    V = WorkingCovariance(tuple(sigma2), tuple(rho))
    theta = solve_weighted_ee(ds, MarginalMeanSpec(design, p), V)
    np.testing.assert_allclose(theta, brute_force_theta(ds, sigma2, rho), rtol=1e-9)


def test_adept_dtr_means_are_weighted_cluster_averages(rng):
    ds = random_dataset(rng, ADEPT, 40, m_range=(4, 4))
    theta = solve_weighted_ee(ds, MarginalMeanSpec(ADEPT))
    spec = MarginalMeanSpec(ADEPT)
    for k, dtr in enumerate(spec.dtrs):
        num = den = 0.0
        for c, ind, w in zip(ds.clusters, ds.indicators[:, k], ds.weights):
            if ind:
                num += w * c.y.mean()
                den += w
        assert spec.beta_row(dtr) @ theta == pytest.approx(num / den, rel=1e-10)
    # responder clusters in cell A carry weight 2, re-randomized ones 4
    assert set(ds.weights) == {2.0, 4.0}


def test_singleton_clusters_reduce_to_weighted_ols(rng, design):
    ds = random_dataset(rng, design, 30, m_range=(1, 1))
    rows, ys, ws = [], [], []
    for c, w, ind in zip(ds.clusters, ds.weights, ds.indicators):
        for k, d in enumerate(embedded_dtrs(design)):
            if ind[k]:
                rows.append(beta_part(design, d))
                ys.append(c.y[0])
                ws.append(w)
    sw = np.sqrt(ws)
    expected, *_ = np.linalg.lstsq(np.array(rows) * sw[:, None], np.array(ys) * sw, rcond=None)
    np.testing.assert_allclose(solve_weighted_ee(ds, MarginalMeanSpec(design)), expected, rtol=1e-10)


def test_location_shift(rng, design):
    ds = random_dataset(rng, design, 30, p=1)
    spec = MarginalMeanSpec(design, 1)
    base = fit(ds, spec)
    shifted = fit(with_y(ds, lambda y: y + 3.5), spec)
    np.testing.assert_allclose(shifted.theta[0], base.theta[0] + 3.5, rtol=1e-10)
    np.testing.assert_allclose(shifted.theta[1:], base.theta[1:], atol=1e-9)
    np.testing.assert_allclose(shifted.sigma_theta, base.sigma_theta, rtol=1e-7, atol=1e-12)


def test_missing_regimen_is_singular():
    # no (1,1)-consistent clusters: cells A and B empty
    clusters = [
        ClusterRecord(f"c{i}", path, [float(i), float(i) + 1], np.zeros((2, 0)))
        for i, path in enumerate([TreatmentPath(1, 0, -1), TreatmentPath(1, 0, -1), TreatmentPath(-1, 0), TreatmentPath(-1, 1)])
    ]
    ds = TrialDataset(ADEPT, tuple(clusters), 0)
    with pytest.raises(EstimationError, match=r"DTR \(1,1\)"):
        fit(ds)


def test_collinear_covariates_are_singular(rng):
    ds = random_dataset(rng, ADEPT, 20, p=1)
    clusters = tuple(ClusterRecord(c.id, c.path, c.y, np.ones((c.size, 1))) for c in ds.clusters)
    with pytest.raises(EstimationError, match="collinear"):
        solve_weighted_ee(TrialDataset(ADEPT, clusters, 1), MarginalMeanSpec(ADEPT, 1))


def test_exchangeable_equal_sizes_matches_identity(rng, design):
    ds = random_dataset(rng, design, 40, m_range=(5, 5))
    spec = MarginalMeanSpec(design)
    ident = solve_weighted_ee(ds, spec)
    exch = solve_weighted_ee(ds, spec, WorkingCovariance.exchangeable(spec, 4.0, 0.3))
    np.testing.assert_allclose(exch, ident, rtol=1e-8)


def test_iterations_irrelevant_for_equal_sizes_without_covariates(rng):
    from smart_cluster.simulation import generate_trial, preset

    ds = generate_trial(preset("null"), 120, 5, seed=3)
    one = fit(ds, iterations=1)
    two = fit(ds, iterations=2)
    np.testing.assert_allclose(two.theta, one.theta, atol=1e-6)


# ---------------------------------------------------------------- working covariance

def literal_working_cov(clusters, weights, indicators, resid_by_cluster):
    """Direct transcription of the weighted moment sums for each regimen."""
    K = indicators.shape[1]
    out = []
    for k in range(K):
        num_s = den_s = num_r = den_r = 0.0
        for i, c in enumerate(clusters):
            wi = weights[i] * indicators[i, k]
            e = resid_by_cluster[i][:, k]
            m = len(e)
            num_s += wi * sum(e[j] ** 2 for j in range(m))
            den_s += wi * m
            num_r += wi * sum(e[j] * e[l] for j in range(m) for l in range(m) if l != j)
            den_r += wi * m * (m - 1)
        s2 = num_s / den_s
        out.append((s2, num_r / (s2 * den_r)))
    return out


def small_fixture(design):
    if design is ADEPT:
        paths = [TreatmentPath(1, 1), TreatmentPath(1, 0, -1), TreatmentPath(-1, 0)]
    else:
        paths = [TreatmentPath(1, 1), TreatmentPath(-1, 0, 1), TreatmentPath(-1, 1), TreatmentPath(1, 0, -1)]
    ys = [[1.0, 2.5, 0.5], [3.0, -1.0], [2.0, 2.2, 1.9, 4.0], [0.7, 1.4]]
    clusters = tuple(ClusterRecord(f"h{i}", p, y, np.zeros((len(y), 0))) for i, (p, y) in enumerate(zip(paths, ys)))
    return TrialDataset(design, clusters, 0)


def test_working_cov_matches_literal_sums():
    for design in (ADEPT, PROTOTYPICAL):
        ds = small_fixture(design)
        K = len(embedded_dtrs(design))
        resid = np.column_stack([ds.y - 0.3 * k - 1.1 for k in range(K)])
        got = estimate_working_cov(ds, resid)
        per_cluster = np.split(resid, np.cumsum(ds.sizes)[:-1])
        expected = literal_working_cov(ds.clusters, ds.weights, ds.indicators, per_cluster)
        for k in range(K):
            s2, r = expected[k]
            assert got.sigma2[k] == pytest.approx(s2, rel=1e-12)
            m_max = ds.sizes.max()
            clamped = min(max(r, -1 / (m_max - 1) + 1e-6), 1 - 1e-6)
            assert got.rho[k] == pytest.approx(clamped, rel=1e-12, abs=1e-15)


def test_working_cov_shared_is_average(rng):
    ds = random_dataset(rng, PROTOTYPICAL, 40, m_range=(2, 6))
    spec = MarginalMeanSpec(PROTOTYPICAL)
    res = residuals(ds, spec, solve_weighted_ee(ds, spec))
    per = estimate_working_cov(ds, res)
    shared = estimate_working_cov(ds, res, shared=True)
    assert shared.shared
    np.testing.assert_allclose(shared.sigma2, np.mean(per.sigma2), rtol=1e-12)
    np.testing.assert_allclose(shared.rho, np.mean(per.rho), rtol=1e-12)


def test_perfect_within_cluster_agreement_clamps_to_one(rng):
    ds = random_dataset(rng, ADEPT, 20, m_range=(3, 5))
    K = 3
    per_cluster = rng.normal(size=ds.n_clusters)
    resid = np.repeat(per_cluster, ds.sizes)[:, None] * np.ones((1, K))
    with pytest.warns(WorkingCovarianceWarning, match="clamped"):
        V = estimate_working_cov(ds, resid)
    assert all(r == pytest.approx(1 - 1e-6) for r in V.rho)


def test_independent_residuals_give_near_zero_icc():
    rng = np.random.default_rng(11)
    ds = random_dataset(rng, ADEPT, 2000, m_range=(5, 5))
    resid = rng.normal(size=(len(ds.y), 3))
    V = estimate_working_cov(ds, resid)
    assert all(abs(r) < 0.02 for r in V.rho)


def test_singleton_clusters_icc_zero_with_warning(rng):
    ds = random_dataset(rng, ADEPT, 20, m_range=(1, 1))
    with pytest.warns(WorkingCovarianceWarning, match="size 1"):
        V = estimate_working_cov(ds, rng.normal(size=(len(ds.y), 3)))
    assert V.rho == (0.0, 0.0, 0.0)


def test_regimen_without_clusters_errors():
    clusters = tuple(
        ClusterRecord(f"c{i}", p, [1.0, 2.0], np.zeros((2, 0)))
        for i, p in enumerate([TreatmentPath(1, 1), TreatmentPath(1, 0, 1), TreatmentPath(1, 0, -1)])
    )
    ds = TrialDataset(ADEPT, clusters, 0)
    with pytest.raises(EstimationError, match=r"\(-1,\.\)"):
        estimate_working_cov(ds, np.zeros((6, 3)))


# ---------------------------------------------------------------- sandwich

def literal_sandwich(ds, spec, theta, V):
    """Bread and meat with dense per-cluster matrices."""
    n = ds.n_clusters
    dim = spec.dim
    J = np.zeros((dim, dim))
    U = np.zeros((n, dim))
    for i, c in enumerate(ds.clusters):
        for k, d in enumerate(spec.dtrs):
            if not ds.indicators[i, k]:
                continue
            D = np.hstack([np.tile(spec.beta_row(d), (c.size, 1)), c.x])
            Vinv = np.linalg.inv(V.sigma2[k] * ((1 - V.rho[k]) * np.eye(c.size) + V.rho[k]))
            J += ds.weights[i] * D.T @ Vinv @ D / n
            U[i] += ds.weights[i] * D.T @ Vinv @ (c.y - D @ theta)
    A = U.T @ U / n
    Ji = np.linalg.inv(J)
    return Ji @ A @ Ji / n


def test_sandwich_matches_dense_formula(rng, design):
    ds = random_dataset(rng, design, 35, m_range=(1, 6), p=1)
    result = fit(ds)
    expected = literal_sandwich(ds, result.spec, result.theta, result.working)
    np.testing.assert_allclose(result.sigma_theta, expected, rtol=1e-9)


def test_scores_sum_to_zero_at_root(rng, design):
    ds = random_dataset(rng, design, 30, p=2)
    result = fit(ds)
    U = cluster_scores(ds, result.spec, result.theta, result.working)
    np.testing.assert_allclose(U.sum(axis=0), 0.0, atol=1e-8)


def test_sandwich_zero_residuals(rng, design):
    ds = random_dataset(rng, design, 20)
    spec = MarginalMeanSpec(design)
    theta = np.arange(spec.dim, dtype=float)
    clusters = tuple(
        ClusterRecord(c.id, c.path, np.full(c.size, spec.beta_row(next(d for d in spec.dtrs if ind[spec.dtrs.index(d)])) @ theta), c.x)
        for c, ind in zip(ds.clusters, ds.indicators)
    )
    # only meaningful when every consistent regimen gives the same mean: use
    # theta with zero coefficients on a2 terms so responders fit both regimens
    theta[2:] = 0.0
    clusters = tuple(
        ClusterRecord(c.id, c.path, np.full(c.size, theta[0] + theta[1] * c.path.a1), c.x) for c in ds.clusters
    )
    zero = TrialDataset(design, clusters, 0)
    cov = sandwich_covariance(zero, spec, theta, WorkingCovariance.identity(spec))
    np.testing.assert_allclose(cov, 0.0, atol=1e-20)


def test_sandwich_scale_equivariance(rng, design):
    ds = random_dataset(rng, design, 30, p=1)
    base = fit(ds)
    scaled = fit(with_y(ds, lambda y: 2.5 * y))
    np.testing.assert_allclose(scaled.theta, 2.5 * base.theta, rtol=1e-9)
    np.testing.assert_allclose(scaled.sigma_theta, 6.25 * base.sigma_theta, rtol=1e-7, atol=1e-14)
    c = np.zeros(base.spec.dim)
    c[1] = 2.0
    c[2] = 1.0
    assert wald_test(scaled, c).z == pytest.approx(wald_test(base, c).z, rel=1e-8)


def test_permutation_invariance(rng, design):
    ds = random_dataset(rng, design, 30, m_range=(2, 6), p=1)
    base = fit(ds)
    order = rng.permutation(ds.n_clusters)
    shuffled = []
    for i in order:
        c = ds.clusters[i]
        j = rng.permutation(c.size)
        shuffled.append(ClusterRecord(c.id, c.path, c.y[j], c.x[j]))
    other = fit(TrialDataset(design, tuple(shuffled), ds.p))
    np.testing.assert_allclose(other.theta, base.theta, rtol=1e-10)
    np.testing.assert_allclose(other.sigma_theta, base.sigma_theta, rtol=1e-8)


def test_sigma_theta_psd(rng, design):
    for _ in range(5):
        ds = random_dataset(rng, design, int(rng.integers(12, 60)), p=int(rng.integers(0, 3)))
        cov = fit(ds).sigma_theta
        np.testing.assert_array_equal(cov, cov.T)
        assert np.linalg.eigvalsh(cov).min() > -1e-12 * np.abs(cov).max()
        assert np.all(np.diag(cov) >= 0)


# ---------------------------------------------------------------- Wald tests and contrasts

def test_wald_statistic(rng):
    ds = random_dataset(rng, ADEPT, 40, m_range=(2, 5))
    result = fit(ds)
    c = [0, 2, 1]
    t = wald_test(result, c, 0.05)
    est = float(np.dot(c, result.theta))
    se = math.sqrt(np.dot(c, result.sigma_theta @ c))
    assert t.estimate == pytest.approx(est)
    assert t.std_error == pytest.approx(se)
    assert t.z == pytest.approx(est / se)
    assert t.p_value == pytest.approx(2 * stats.norm.sf(abs(est / se)))
    assert 0 <= t.p_value <= 1
    assert t.reject == (abs(t.z) > stats.norm.isf(0.025))


def test_wald_zero_variance():
    spec = MarginalMeanSpec(ADEPT)
    result = FitResult(spec, np.ones(3), np.zeros((3, 3)), WorkingCovariance.identity(spec), 10, 2)
    with pytest.raises(EstimationError):
        wald_test(result, [0, 2, 1])
    with pytest.raises(ValueError):
        wald_test(result, [0, 2])


def test_contrast_vectors():
    adept = MarginalMeanSpec(ADEPT, 1)
    np.testing.assert_array_equal(parse_contrast(adept, "(1,1)-vs-(-1,.)")[0], [0, 2, 1, 0])
    np.testing.assert_array_equal(parse_contrast(adept, "(1,-1)-vs-(-1,.)")[0], [0, 2, -1, 0])
    np.testing.assert_array_equal(parse_contrast(adept, "(1,1)-vs-(1,-1)")[0], [0, 0, 2, 0])
    np.testing.assert_array_equal(parse_contrast(adept, "first-stage")[0], [0, 2, 0, 0])
    np.testing.assert_array_equal(parse_contrast(adept, "(1,1)+(1,-1)-vs-(-1,.)")[0], [0, 2, 0, 0])
    np.testing.assert_array_equal(parse_contrast(adept, "0,2,1")[0], [0, 2, 1, 0])
    proto = MarginalMeanSpec(PROTOTYPICAL)
    np.testing.assert_array_equal(parse_contrast(proto, "(1,1)-vs-(-1,-1)")[0], [0, 2, 2, 0])
    np.testing.assert_array_equal(parse_contrast(proto, "second-stage")[0], [0, 0, 2, 0])
    np.testing.assert_array_equal(
        contrast_vector(proto, EmbeddedDtr(1, -1), EmbeddedDtr(-1, 1)), [0, 2, -2, 0]
    )
    np.testing.assert_array_equal(parse_contrast(adept, "adept:(1,1)-vs-(-1,.)")[0], [0, 2, 1, 0])
    np.testing.assert_array_equal(parse_contrast(adept, "aim-iii")[0], [0, 0, 2, 0])
    np.testing.assert_array_equal(parse_contrast(adept, "aim-iv")[0], [0, 2, 1, 0])
    np.testing.assert_array_equal(parse_contrast(proto, "aim-ii")[0], [0, 0, 2, 0])
    np.testing.assert_array_equal(parse_contrast(proto, "prototypical:aim-iv")[0], [0, 2, 2, 0])
    with pytest.raises(ValueError):
        parse_contrast(adept, "prototypical:aim-iv")
    with pytest.raises(ValueError):
        parse_contrast(adept, "aim-ii")
    with pytest.raises(ValueError):
        parse_contrast(adept, "second-stage")
    with pytest.raises(ValueError):
        parse_contrast(adept, "0,2,1,0,0")


def test_dtr_means(rng):
    ds = random_dataset(rng, ADEPT, 40, m_range=(2, 5))
    result = fit(ds)
    b = result.theta
    means = dtr_means(result)
    assert means[EmbeddedDtr(1, 1)][0] == pytest.approx(b[0] + b[1] + b[2])
    assert means[EmbeddedDtr(-1)][0] == pytest.approx(b[0] - b[1])
    diff = means[EmbeddedDtr(1, 1)][0] - means[EmbeddedDtr(-1)][0]
    assert diff == pytest.approx(wald_test(result, [0, 2, 1]).estimate)


def test_fit_result_json_shape(rng):
    ds = random_dataset(rng, ADEPT, 30, m_range=(2, 5))
    result = fit(ds, shared_cov=True)
    out = result.to_dict([wald_test(result, [0, 2, 1])])
    assert set(out) >= {"theta", "se", "cov", "working", "contrasts"}
    assert list(out["working"]) == ["shared"]
    assert set(out["contrasts"][0]) >= {"c", "estimate", "se", "z", "p"}
    per = fit(ds).to_dict()
    assert list(per["working"]) == ["(1,1)", "(1,-1)", "(-1,.)"]


# ---------------------------------------------------------------- properties

@st.composite
def datasets(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    design = draw(st.sampled_from([ADEPT, PROTOTYPICAL]))
    n = draw(st.integers(12, 40))
    p = draw(st.integers(0, 2))
    return random_dataset(np.random.default_rng(seed), design, n, m_range=(1, 6), p=p)


@settings(max_examples=25, deadline=None)
@given(datasets(), st.floats(-50, 50), st.floats(0.1, 20))
def test_equivariance_properties(ds, shift, scale):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", WorkingCovarianceWarning)
        base = fit(ds)
        moved = fit(with_y(ds, lambda y: scale * y + shift))
    expected = scale * base.theta
    expected[0] += shift
    np.testing.assert_allclose(moved.theta, expected, rtol=1e-6, atol=1e-6 * (1 + abs(shift)))
    c = np.zeros(base.spec.dim)
    c[1] = 1.0
    assert wald_test(moved, c).z == pytest.approx(wald_test(base, c).z, rel=1e-5)


@settings(max_examples=25, deadline=None)
@given(datasets())
def test_brute_force_property(ds):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", WorkingCovarianceWarning)
        result = fit(ds)
    V = result.working
    expected = brute_force_theta(ds, list(V.sigma2), list(V.rho))
    np.testing.assert_allclose(result.theta, expected, rtol=1e-8)
