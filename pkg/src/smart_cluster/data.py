"""Individual-level trial data nested in clusters, with CSV ingest and export.

CSV layout (header required, one row per individual)::

    cluster_id,a1,r,a2,y,x1,...,xp[,p1_prob,p2_prob]

``a2`` is left empty where the design does not re-randomize. ``p1_prob`` and
``p2_prob`` optionally override the default 0.5 randomization probabilities.
"""

from __future__ import annotations

import csv
import io
import math
import os
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from smart_cluster.design import (
    DesignError,
    DesignKind,
    TreatmentPath,
    check_path,
    consistent_dtrs,
    design_cells,
    embedded_dtrs,
    is_consistent,
    known_weight,
    parse_design,
)


class DataValidationError(ValueError):
    """Raised when trial data violate the schema or the design."""


@dataclass(frozen=True, eq=False)
class ClusterRecord:
    """One randomized cluster: its treatment path and its members' data.

    ``y`` has shape ``(m,)`` and ``x`` has shape ``(m, p)``.
    """

    id: str
    path: TreatmentPath
    y: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(len(y), -1) if len(y) else x.reshape(0, 0)
        if len(y) < 1:
            raise DataValidationError(f"cluster {self.id!r} has no individuals")
        if x.shape[0] != len(y):
            raise DataValidationError(f"cluster {self.id!r}: {x.shape[0]} covariate rows for {len(y)} outcomes")
        if not np.all(np.isfinite(y)):
            raise DataValidationError(f"cluster {self.id!r}: non-finite outcome")
        if not np.all(np.isfinite(x)):
            raise DataValidationError(f"cluster {self.id!r}: non-finite covariate")
        y.setflags(write=False)
        x.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)

    @property
    def size(self) -> int:
        return len(self.y)


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """All clusters of a trial under one design.

    ``cluster_covariates`` lists covariate columns (0-based) that must be
    constant within each cluster.
    """

    design: DesignKind
    clusters: tuple[ClusterRecord, ...]
    p: int
    cluster_covariates: tuple[int, ...] = field(default=())

    def __post_init__(self):
        design = parse_design(self.design)
        object.__setattr__(self, "design", design)
        object.__setattr__(self, "clusters", tuple(self.clusters))
        ids = [c.id for c in self.clusters]
        if len(set(ids)) != len(ids):
            raise DataValidationError("cluster ids are not unique")
        n_dtr = len(embedded_dtrs(design))
        if len(self.clusters) < n_dtr:
            raise DataValidationError(
                f"{len(self.clusters)} clusters; the {design} design needs at least {n_dtr}"
            )
        for c in self.clusters:
            try:
                check_path(c.path, design)
            except DesignError as exc:
                raise DataValidationError(f"cluster {c.id!r}: {exc}") from None
            if c.x.shape[1] != self.p:
                raise DataValidationError(f"cluster {c.id!r}: {c.x.shape[1]} covariates, expected {self.p}")
            for col in self.cluster_covariates:
                if not np.all(c.x[:, col] == c.x[0, col]):
                    raise DataValidationError(f"cluster {c.id!r}: cluster-level covariate x{col + 1} varies")

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @cached_property
    def sizes(self) -> np.ndarray:
        return np.array([c.size for c in self.clusters], dtype=int)

    @cached_property
    def offsets(self) -> np.ndarray:
        """Start index of each cluster in the stacked individual arrays."""
        return np.concatenate([[0], np.cumsum(self.sizes)[:-1]]).astype(int)

    @cached_property
    def y(self) -> np.ndarray:
        return np.concatenate([c.y for c in self.clusters])

    @cached_property
    def x(self) -> np.ndarray:
        return np.vstack([c.x for c in self.clusters]) if self.p else np.zeros((int(self.sizes.sum()), 0))

    @cached_property
    def weights(self) -> np.ndarray:
        return np.array([known_weight(c.path, self.design) for c in self.clusters])

    @cached_property
    def indicators(self) -> np.ndarray:
        """``(N, K)`` 0/1 matrix: cluster i consistent with embedded regimen k."""
        dtrs = embedded_dtrs(self.design)
        return np.array(
            [[is_consistent(c.path, d, self.design) for d in dtrs] for c in self.clusters], dtype=float
        )

    def subset(self, index: Sequence[int]) -> "TrialDataset":
        """Dataset built from the listed clusters (repeats get fresh ids)."""
        seen: dict[str, int] = {}
        picked = []
        for i in index:
            c = self.clusters[i]
            n = seen.get(c.id, 0)
            seen[c.id] = n + 1
            picked.append(c if n == 0 else ClusterRecord(f"{c.id}#{n}", c.path, c.y, c.x))
        return TrialDataset(self.design, tuple(picked), self.p, self.cluster_covariates)


@dataclass
class ValidationReport:
    n_clusters: int
    cell_counts: dict[str, int]
    min_size: int
    max_size: int
    warnings: list[str]
    notes: list[str]

    @property
    def ok(self) -> bool:
        return not self.warnings


_X_COL = re.compile(r"^x(\d+)$")


def _parse_int(value: str, name: str, allowed: tuple, row: int) -> Optional[int]:
    value = (value or "").strip()
    if value == "" and None in allowed:
        return None
    try:
        out = int(float(value))
    except ValueError:
        raise DataValidationError(f"row {row}: {name}={value!r} is not numeric") from None
    if out not in allowed or float(value) != out:
        raise DataValidationError(f"row {row}: {name}={value!r} not one of {[a for a in allowed if a is not None]}")
    return out


def _parse_float(value: str, name: str, row: int) -> float:
    value = (value or "").strip()
    if value == "":
        raise DataValidationError(f"row {row}: missing {name}")
    try:
        out = float(value)
    except ValueError:
        raise DataValidationError(f"row {row}: {name}={value!r} is not numeric") from None
    if not math.isfinite(out):
        raise DataValidationError(f"row {row}: {name} is not finite")
    return out


def parse_dataset(rows: Iterable[Mapping[str, str]], design: DesignKind | str) -> TrialDataset:
    """Group individual-level rows into clusters and validate against ``design``."""
    design = parse_design(design)
    rows = list(rows)
    if not rows:
        raise DataValidationError("no data rows")
    columns = list(rows[0].keys())
    for required in ("cluster_id", "a1", "r", "a2", "y"):
        if required not in columns:
            raise DataValidationError(f"missing column {required!r}")
    xcols = sorted((c for c in columns if _X_COL.match(c or "")), key=lambda c: int(_X_COL.match(c).group(1)))
    expected = [f"x{j + 1}" for j in range(len(xcols))]
    if xcols != expected:
        raise DataValidationError(f"covariate columns must be x1..xp, got {xcols}")

    groups: dict[str, dict] = {}
    for n, row in enumerate(rows, start=2):
        cid = (row.get("cluster_id") or "").strip()
        if not cid:
            raise DataValidationError(f"row {n}: empty cluster_id")
        a1 = _parse_int(row["a1"], "a1", (-1, 1), n)
        r = _parse_int(row["r"], "r", (0, 1), n)
        a2 = _parse_int(row["a2"], "a2", (-1, 1, None), n)
        p1 = row.get("p1_prob")
        p2 = row.get("p2_prob")
        p1 = 0.5 if p1 is None or not p1.strip() else _parse_float(p1, "p1_prob", n)
        p2 = None if p2 is None or not p2.strip() else _parse_float(p2, "p2_prob", n)
        if a2 is None:
            p2 = None
        elif p2 is None:
            p2 = 0.5
        path_fields = (a1, r, a2, p1, p2)
        g = groups.setdefault(cid, {"path": path_fields, "y": [], "x": [], "row": n})
        if g["path"] != path_fields:
            raise DataValidationError(
                f"row {n}: cluster {cid!r} has conflicting path values {path_fields} vs {g['path']} (row {g['row']})"
            )
        g["y"].append(_parse_float(row["y"], "y", n))
        g["x"].append([_parse_float(row[c], c, n) for c in xcols])

    clusters = []
    for cid, g in groups.items():
        a1, r, a2, p1, p2 = g["path"]
        try:
            path = check_path(TreatmentPath(a1, r, a2, p1, p2), design)
        except DesignError as exc:
            raise DataValidationError(f"cluster {cid!r} (row {g['row']}): {exc}") from None
        x = np.array(g["x"], dtype=float).reshape(len(g["y"]), len(xcols))
        clusters.append(ClusterRecord(cid, path, np.array(g["y"]), x))
    return TrialDataset(design, tuple(clusters), len(xcols))


def read_csv(source, design: DesignKind | str) -> TrialDataset:
    """Read a dataset from a path or an open text stream."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, newline="", encoding="utf-8") as fh:
            return parse_dataset(csv.DictReader(fh), design)
    return parse_dataset(csv.DictReader(source), design)


def write_csv(dataset: TrialDataset, dest=None) -> Optional[str]:
    """Write ``dataset`` in the long CSV layout; returns the text if ``dest`` is None."""
    default_probs = all(
        c.path.rand_prob_stage1 == 0.5 and c.path.rand_prob_stage2 in (None, 0.5) for c in dataset.clusters
    )
    header = ["cluster_id", "a1", "r", "a2", "y"] + [f"x{j + 1}" for j in range(dataset.p)]
    if not default_probs:
        header += ["p1_prob", "p2_prob"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for c in dataset.clusters:
        path = c.path
        a2 = "" if path.a2 is None else str(path.a2)
        extra = []
        if not default_probs:
            extra = [repr(path.rand_prob_stage1), "" if path.rand_prob_stage2 is None else repr(path.rand_prob_stage2)]
        for j in range(c.size):
            writer.writerow([c.id, path.a1, path.r, a2, repr(float(c.y[j]))] + [repr(float(v)) for v in c.x[j]] + extra)
    text = buf.getvalue()
    if dest is None:
        return text
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)
    else:
        dest.write(text)
    return None


def _describe_cell(key, design: DesignKind) -> str:
    a1, r, a2 = key
    path = TreatmentPath(a1, r, a2)
    labels = ", ".join(d.label for d in consistent_dtrs(path, design))
    status = "responder" if r == 1 else "non-responder"
    return f"DTR {labels} {status} cell"


def validate(dataset: TrialDataset) -> ValidationReport:
    """Summarize per-cell cluster counts and flag empty cells; never mutates."""
    cells = design_cells(dataset.design)
    counts = {letter: 0 for letter in cells.values()}
    for c in dataset.clusters:
        counts[cells[c.path.key]] += 1
    warnings = []
    for key, letter in cells.items():
        if counts[letter] == 0:
            warnings.append(f"{_describe_cell(key, dataset.design)} empty (cell {letter})")
    notes = []
    n_single = int(np.sum(dataset.sizes == 1))
    if n_single:
        notes.append(
            f"{n_single} cluster(s) of size 1 contribute nothing to the within-cluster correlation pair sums"
        )
    return ValidationReport(
        n_clusters=dataset.n_clusters,
        cell_counts=counts,
        min_size=int(dataset.sizes.min()),
        max_size=int(dataset.sizes.max()),
        warnings=warnings,
        notes=notes,
    )
