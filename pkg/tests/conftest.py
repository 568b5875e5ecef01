import sys

import numpy as np
import pytest
from scipy.linalg import cholesky, solve_triangular

from smart_cluster.data import ClusterRecord, TrialDataset
from smart_cluster.design import ADEPT, PROTOTYPICAL, TreatmentPath, design_cells, embedded_dtrs


def random_dataset(rng, design, n, m_range=(1, 8), p=0, all_cells=True, cluster_level=False):
    """Random trial with cluster sizes drawn from ``m_range`` (inclusive)."""
    cells = list(design_cells(design))
    keys = list(cells) if all_cells else []
    while len(keys) < n:
        keys.append(cells[rng.integers(len(cells))])
    rng.shuffle(keys)
    clusters = []
    for i, (a1, r, a2) in enumerate(keys[:n]):
        m = int(rng.integers(m_range[0], m_range[1] + 1))
        shift = rng.normal()
        y = 10 + 2 * a1 + (a2 or 0) + shift + rng.normal(size=m)
        if cluster_level:
            x = np.repeat(rng.normal(size=(1, p)), m, axis=0)
        else:
            x = rng.normal(size=(m, p))
        y = y + x.sum(axis=1)
        clusters.append(ClusterRecord(f"k{i}", TreatmentPath(a1, r, a2), y, x))
    return TrialDataset(design, tuple(clusters), p)


def beta_part(design, dtr):
    a1, a2 = dtr.a1, dtr.a2
    if design is PROTOTYPICAL:
        return np.array([1.0, a1, a2, a1 * a2])
    return np.array([1.0, a1, a2 if a1 == 1 else 0.0])


def brute_force_theta(dataset, sigma2=None, rho=None):
    """Generic weighted least squares on explicitly replicated rows.

    Every (cluster, consistent regimen) pair becomes a block of rows carrying
    weight ``W`` and covariance ``sigma2 * Exch(rho)``.  Blocks are whitened
    with a dense Cholesky factor of that covariance and the stacked system is
    solved by least squares.
    """
    dtrs = embedded_dtrs(dataset.design)
    K = len(dtrs)
    sigma2 = [1.0] * K if sigma2 is None else sigma2
    rho = [0.0] * K if rho is None else rho
    rows_d, rows_y = [], []
    for c in dataset.clusters:
        a1, r, a2 = c.path.key
        w = 1.0 / (c.path.rand_prob_stage1 * (c.path.rand_prob_stage2 if a2 is not None else 1.0))
        for k, d in enumerate(dtrs):
            if d.a1 != a1 or (a2 is not None and d.a2 != a2):
                continue
            beta = beta_part(dataset.design, d)
            D = np.hstack([np.tile(beta, (c.size, 1)), c.x])
            V = sigma2[k] * ((1 - rho[k]) * np.eye(c.size) + rho[k] * np.ones((c.size, c.size)))
            L = cholesky(V, lower=True)
            rows_d.append(np.sqrt(w) * solve_triangular(L, D, lower=True))
            rows_y.append(np.sqrt(w) * solve_triangular(L, c.y, lower=True))
    theta, *_ = np.linalg.lstsq(np.vstack(rows_d), np.concatenate(rows_y), rcond=None)
    return theta


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(params=[ADEPT, PROTOTYPICAL], ids=["adept", "prototypical"])
def design(request):
    return request.param


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
