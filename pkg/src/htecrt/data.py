"""Cluster-randomized trial data, outcome families and design matrices.

A :class:`Dataset` stores one row per subject in columnar numpy arrays.
:func:`build_design` turns it into the fixed-effects matrix for the
treatment-by-subgroup interaction model

    g(mu) = b0 + trt * b_trt + gr' b_gr + (trt * gr)' b_mod [+ covariates]

together with the random-effects design used by the mixed-model fitters.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, NamedTuple, Sequence

import numpy as np
from scipy import linalg

LOGIT_CLAMP = 30.0

RANDOM_EFFECTS = ("none", "cluster_intercept", "subgroup_within_cluster")


class DataError(ValueError):
    """Raised for invalid or unparseable trial data."""


class RankDeficientError(DataError):
    """Raised when the fixed-effects design does not have full column rank."""


# ---------------------------------------------------------------------------
# Families
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Family:
    """Exponential family with its canonical link.

    ``kind`` is one of ``"gaussian"`` (identity link), ``"poisson"`` (log
    link) or ``"bernoulli"`` (logit link).
    """

    kind: str

    def __post_init__(self):
        if self.kind not in ("gaussian", "poisson", "bernoulli"):
            raise ValueError(f"unknown family {self.kind!r}")

    @property
    def link_name(self) -> str:
        return {"gaussian": "identity", "poisson": "log", "bernoulli": "logit"}[self.kind]

    def link(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self.kind == "gaussian":
            return mu
        if self.kind == "poisson":
            return np.log(mu)
        return np.log(mu) - np.log1p(-mu)

    def inverse_link(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self.kind == "gaussian":
            return eta
        if self.kind == "poisson":
            return np.exp(eta)
        # clamped so that exp() cannot overflow; mu stays inside (0, 1)
        eta = np.clip(eta, -LOGIT_CLAMP, LOGIT_CLAMP)
        return 1.0 / (1.0 + np.exp(-eta))

    def variance(self, mu):
        """Variance function V(mu), without validation (hot path)."""
        mu = np.asarray(mu, dtype=float)
        if self.kind == "gaussian":
            return np.ones_like(mu)
        if self.kind == "poisson":
            return mu
        return mu * (1.0 - mu)

    def unit_deviance(self, y, mu):
        """Per-observation deviance d(y, mu) >= 0, zero iff y == mu."""
        y = np.asarray(y, dtype=float)
        mu = np.asarray(mu, dtype=float)
        if self.kind == "gaussian":
            return (y - mu) ** 2
        if self.kind == "poisson":
            with np.errstate(divide="ignore", invalid="ignore"):
                ylogy = np.where(y > 0, y * np.log(np.where(y > 0, y, 1.0) / mu), 0.0)
            return np.maximum(2.0 * (ylogy - (y - mu)), 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = np.where(y > 0, y * np.log(np.where(y > 0, y, 1.0) / mu), 0.0)
            t0 = np.where(y < 1, (1 - y) * np.log(np.where(y < 1, 1 - y, 1.0) / (1 - mu)), 0.0)
        return np.maximum(2.0 * (t1 + t0), 0.0)

    def check_outcome(self, y) -> None:
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise DataError("outcome contains non-finite values")
        if self.kind == "poisson":
            if np.any(y < 0) or np.any(y != np.round(y)):
                raise DataError("poisson outcome must be a non-negative integer")
        elif self.kind == "bernoulli":
            if np.any((y != 0) & (y != 1)):
                raise DataError("bernoulli outcome must be 0 or 1")


GAUSSIAN = Family("gaussian")
POISSON = Family("poisson")
BERNOULLI = Family("bernoulli")

_FAMILY_ALIASES = {
    "gaussian": GAUSSIAN,
    "normal": GAUSSIAN,
    "continuous": GAUSSIAN,
    "poisson": POISSON,
    "count": POISSON,
    "bernoulli": BERNOULLI,
    "binomial": BERNOULLI,
    "binary": BERNOULLI,
}


def get_family(name: str | Family) -> Family:
    if isinstance(name, Family):
        return name
    try:
        return _FAMILY_ALIASES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown family {name!r}") from None


def inverse_link(family: Family, eta):
    """Mean from linear predictor; the logit is clamped at +/-30."""
    return family.inverse_link(eta)


def variance_function(family: Family, mu):
    """V(mu) with domain checks: 1, mu or mu(1 - mu)."""
    mu = np.asarray(mu, dtype=float)
    if family.kind == "poisson" and np.any(mu <= 0):
        raise ValueError("poisson mean must be positive")
    if family.kind == "bernoulli" and np.any((mu <= 0) | (mu >= 1)):
        raise ValueError("bernoulli mean must lie in (0, 1)")
    return family.variance(mu)


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


class Subject(NamedTuple):
    cluster_id: int
    subject_id: int
    outcome: float
    treatment: int
    subgroup: int
    covariates: tuple


@dataclass(frozen=True, eq=False)
class Dataset:
    """Row-per-subject trial data held as parallel arrays.

    Cluster ids are dense in ``0..n_clusters-1`` and subgroups in
    ``0..subgroup_levels-1``; ``cluster_labels`` keeps the original ids.
    """

    cluster: np.ndarray
    outcome: np.ndarray
    treatment: np.ndarray
    subgroup: np.ndarray
    covariates: np.ndarray = None
    covariate_names: tuple = ()
    subject: np.ndarray = None
    n_clusters: int = None
    subgroup_levels: int = None
    cluster_labels: tuple = None

    def __post_init__(self):
        cluster = np.asarray(self.cluster, dtype=np.int64)
        n = cluster.shape[0]
        if n == 0:
            raise DataError("dataset is empty")
        outcome = np.asarray(self.outcome, dtype=float)
        treatment = np.asarray(self.treatment, dtype=np.int64)
        subgroup = np.asarray(self.subgroup, dtype=np.int64)
        cov = self.covariates
        cov = np.zeros((n, 0)) if cov is None else np.asarray(cov, dtype=float).reshape(n, -1)
        subject = np.arange(n) if self.subject is None else np.asarray(self.subject, dtype=np.int64)
        for name, arr in (("outcome", outcome), ("treatment", treatment),
                          ("subgroup", subgroup), ("subject", subject)):
            if arr.shape != (n,):
                raise DataError(f"{name} has length {arr.shape[0]}, expected {n}")
        if len(self.covariate_names) not in (0, cov.shape[1]):
            raise DataError("covariate_names does not match covariate columns")
        names = tuple(self.covariate_names) or tuple(f"x{k}" for k in range(cov.shape[1]))

        n_clusters = int(cluster.max()) + 1 if self.n_clusters is None else int(self.n_clusters)
        if cluster.min() < 0 or cluster.max() >= n_clusters:
            raise DataError("cluster ids must lie in 0..n_clusters-1")
        sizes = np.bincount(cluster, minlength=n_clusters)
        if np.any(sizes == 0):
            raise DataError(f"cluster {int(np.argmin(sizes))} has no subjects")
        if np.any((treatment != 0) & (treatment != 1)):
            raise DataError("treatment must be coded 0/1")
        tmin = np.full(n_clusters, 2)
        tmax = np.full(n_clusters, -1)
        np.minimum.at(tmin, cluster, treatment)
        np.maximum.at(tmax, cluster, treatment)
        if np.any(tmin != tmax):
            bad = int(np.flatnonzero(tmin != tmax)[0])
            raise DataError(f"treatment varies within cluster {bad}")
        levels = int(subgroup.max()) + 1 if self.subgroup_levels is None else int(self.subgroup_levels)
        if subgroup.min() < 0 or subgroup.max() >= levels:
            raise DataError("subgroup codes must lie in 0..subgroup_levels-1")
        labels = tuple(range(n_clusters)) if self.cluster_labels is None else tuple(self.cluster_labels)

        for arr in (cluster, outcome, treatment, subgroup, cov, subject):
            arr.setflags(write=False)
        set_ = object.__setattr__
        set_(self, "cluster", cluster)
        set_(self, "outcome", outcome)
        set_(self, "treatment", treatment)
        set_(self, "subgroup", subgroup)
        set_(self, "covariates", cov)
        set_(self, "covariate_names", names)
        set_(self, "subject", subject)
        set_(self, "n_clusters", n_clusters)
        set_(self, "subgroup_levels", levels)
        set_(self, "cluster_labels", labels)

    @property
    def n(self) -> int:
        return self.cluster.shape[0]

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.cluster, minlength=self.n_clusters)

    @property
    def cluster_treatment(self) -> np.ndarray:
        trt = np.zeros(self.n_clusters, dtype=np.int64)
        trt[self.cluster] = self.treatment
        return trt

    def subjects(self) -> Iterator[Subject]:
        for k in range(self.n):
            yield Subject(int(self.cluster[k]), int(self.subject[k]), float(self.outcome[k]),
                          int(self.treatment[k]), int(self.subgroup[k]),
                          tuple(self.covariates[k]))

    def with_outcome(self, y) -> "Dataset":
        return Dataset(self.cluster, y, self.treatment, self.subgroup, self.covariates,
                       self.covariate_names, self.subject, self.n_clusters,
                       self.subgroup_levels, self.cluster_labels)

    def take(self, index) -> "Dataset":
        """Subset/reorder rows (cluster and subgroup coding is kept)."""
        index = np.asarray(index)
        return Dataset(self.cluster[index], self.outcome[index], self.treatment[index],
                       self.subgroup[index], self.covariates[index], self.covariate_names,
                       self.subject[index], self.n_clusters, self.subgroup_levels,
                       self.cluster_labels)


DEFAULT_SCHEMA = {
    "cluster": "cluster",
    "treatment": "trt",
    "subgroup": "subgroup",
    "outcome": "y",
    "covariates": (),
    "subject": None,
}


def _dense_codes(values: Sequence[str]):
    """Map raw labels to 0..k-1 in sorted order (numeric when possible)."""
    try:
        keys = [float(v) for v in values]
    except ValueError:
        keys = list(values)
    uniq = sorted(set(keys))
    lookup = {v: k for k, v in enumerate(uniq)}
    return np.array([lookup[k] for k in keys], dtype=np.int64), tuple(uniq)


def load_dataset(path: str | Path, schema: Mapping | None = None) -> Dataset:
    """Read a CSV file (header row required) into a validated :class:`Dataset`.

    ``schema`` maps the roles ``cluster``, ``treatment``, ``subgroup``,
    ``outcome``, ``covariates`` (sequence of column names) and optionally
    ``subject`` to CSV column names. Cluster ids and subgroup labels are
    re-indexed densely in sorted order, so the lowest subgroup label becomes
    the reference level.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    covariate_cols = list(schema["covariates"] or ())
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")

    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        roles = ["cluster", "treatment", "subgroup", "outcome"]
        wanted = [schema[r] for r in roles] + covariate_cols
        if schema["subject"]:
            wanted.append(schema["subject"])
        missing = [c for c in wanted if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        idx = {c: header.index(c) for c in wanted}
        raw = {c: [] for c in wanted}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            for c in wanted:
                cell = row[idx[c]].strip()
                if cell == "":
                    raise DataError(f"{path}: row {lineno}: missing value in column {c!r}")
                raw[c].append((lineno, cell))

    if not raw[schema["cluster"]]:
        raise DataError(f"{path}: no data rows")

    def numeric(col, kind=float):
        out = []
        for lineno, cell in raw[col]:
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {lineno}: cannot parse {cell!r} in column {col!r}") from None
            if not np.isfinite(v):
                raise DataError(f"{path}: row {lineno}: non-finite value in column {col!r}")
            if kind is int and v != int(v):
                raise DataError(f"{path}: row {lineno}: {cell!r} in column {col!r} is not an integer")
            out.append(v)
        return np.array(out, dtype=float)

    cluster, labels = _dense_codes([c for _, c in raw[schema["cluster"]]])
    treatment = numeric(schema["treatment"], int)
    bad = np.flatnonzero((treatment != 0) & (treatment != 1))
    if bad.size:
        lineno = raw[schema["treatment"]][bad[0]][0]
        raise DataError(f"{path}: row {lineno}: treatment must be 0 or 1")
    subgroup, _ = _dense_codes([c for _, c in raw[schema["subgroup"]]])
    outcome = numeric(schema["outcome"])
    cov = np.column_stack([numeric(c) for c in covariate_cols]) if covariate_cols else None
    subject = numeric(schema["subject"], int).astype(np.int64) if schema["subject"] else None
    return Dataset(cluster, outcome, treatment.astype(np.int64), subgroup, cov,
                   tuple(covariate_cols), subject, cluster_labels=labels)


def write_dataset(data: Dataset, path: str | Path, schema: Mapping | None = None) -> None:
    """Write ``data`` as CSV; floats use ``repr`` so a reload is bit-exact."""
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    cov_names = list(schema["covariates"] or data.covariate_names)
    header = [schema["cluster"], schema["subject"] or "sid", schema["outcome"],
              schema["treatment"], schema["subgroup"], *cov_names]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(data.n):
            w.writerow([data.cluster_labels[data.cluster[k]], int(data.subject[k]),
                        repr(float(data.outcome[k])), int(data.treatment[k]),
                        int(data.subgroup[k]), *(repr(float(v)) for v in data.covariates[k])])


# ---------------------------------------------------------------------------
# Design
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    """Fixed- and random-effects structure of an interaction model.

    ``random_effects`` is ``"none"`` (GEE), ``"cluster_intercept"``
    (standard GLMM) or ``"subgroup_within_cluster"`` (flexible GLMM). For
    the flexible model ``re_parameterization="slope"`` gives a random
    intercept plus random subgroup slope; ``"indicator"`` gives one random
    intercept per subgroup level.
    """

    family: Family
    random_effects: str = "none"
    covariates: tuple = ()
    include_interaction: bool = True
    re_parameterization: str = "slope"

    def __post_init__(self):
        object.__setattr__(self, "family", get_family(self.family))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if self.random_effects not in RANDOM_EFFECTS:
            raise ValueError(f"unknown random-effects structure {self.random_effects!r}")
        if self.re_parameterization not in ("slope", "indicator"):
            raise ValueError(f"unknown parameterization {self.re_parameterization!r}")


@dataclass(frozen=True, eq=False)
class DesignMatrices:
    X: np.ndarray
    y: np.ndarray
    cluster: np.ndarray
    Z: np.ndarray
    n_clusters: int
    column_names: tuple
    between: np.ndarray
    treatment_col: int
    subgroup_cols: tuple
    interaction_cols: tuple
    covariate_cols: tuple
    random_effects: str
    re_parameterization: str = "slope"
    subgroup: np.ndarray = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def q(self) -> int:
        return self.X.shape[1]

    @property
    def q_between(self) -> int:
        return int(self.between.sum())

    @property
    def q_within(self) -> int:
        return self.q - self.q_between

    @property
    def n_re(self) -> int:
        return self.Z.shape[1]

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.cluster, minlength=self.n_clusters)

    def with_outcome(self, y) -> "DesignMatrices":
        y = np.asarray(y, dtype=float)
        y.setflags(write=False)
        return DesignMatrices(self.X, y, self.cluster, self.Z, self.n_clusters,
                              self.column_names, self.between, self.treatment_col,
                              self.subgroup_cols, self.interaction_cols, self.covariate_cols,
                              self.random_effects, self.re_parameterization, self.subgroup)

    def with_random_effects(self, random_effects: str, re_parameterization: str = "slope"):
        Z = _random_design(random_effects, re_parameterization, self.subgroup,
                           self.n, len(self.subgroup_cols) + 1)
        return DesignMatrices(self.X, self.y, self.cluster, Z, self.n_clusters,
                              self.column_names, self.between, self.treatment_col,
                              self.subgroup_cols, self.interaction_cols, self.covariate_cols,
                              random_effects, re_parameterization, self.subgroup)


def between_columns(X, cluster, n_clusters) -> np.ndarray:
    """Boolean mask of columns that are constant within every cluster."""
    X = np.asarray(X, dtype=float)
    lo = np.full((n_clusters, X.shape[1]), np.inf)
    hi = np.full((n_clusters, X.shape[1]), -np.inf)
    np.minimum.at(lo, cluster, X)
    np.maximum.at(hi, cluster, X)
    return np.all(lo == hi, axis=0)


def check_full_rank(X) -> None:
    X = np.asarray(X, dtype=float)
    _, R, _ = linalg.qr(X, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    tol = 1e-10 * np.linalg.norm(X, 2)
    rank = int(np.sum(d > tol))
    if rank < X.shape[1]:
        raise RankDeficientError(f"design has rank {rank} < {X.shape[1]} columns")


def _random_design(random_effects, parameterization, subgroup, n, levels) -> np.ndarray:
    if random_effects == "none":
        return np.zeros((n, 0))
    if random_effects == "cluster_intercept":
        return np.ones((n, 1))
    if levels != 2:
        raise ValueError("subgroup-within-cluster random effects are only supported "
                         f"for a two-level subgroup factor (got {levels} levels)")
    g = (subgroup == 1).astype(float)
    if parameterization == "slope":
        return np.column_stack([np.ones(n), g])
    return np.column_stack([1.0 - g, g])


def build_design(data: Dataset, spec: ModelSpec) -> DesignMatrices:
    """Fixed-effects matrix ``[1, trt, gr dummies, trt*gr dummies, covariates]``.

    Dummies use treatment coding with level 0 as reference. Raises
    :class:`RankDeficientError` if a subgroup level (or treatment-by-subgroup
    cell) is empty or the covariates are collinear.
    """
    p = data.subgroup_levels
    if p < 2:
        raise DataError("need at least two subgroup levels")
    n = data.n
    counts = np.bincount(data.subgroup, minlength=p)
    if np.any(counts == 0):
        raise RankDeficientError(f"subgroup level {int(np.argmin(counts))} is absent from the data")
    trt = data.treatment.astype(float)
    dummies = np.column_stack([(data.subgroup == k).astype(float) for k in range(1, p)])
    cols = [np.ones(n), trt, *dummies.T]
    names = ["(Intercept)", "trt", *(f"gr{k}" for k in range(1, p))]
    if spec.include_interaction:
        cols += list((trt[:, None] * dummies).T)
        names += [f"trt:gr{k}" for k in range(1, p)]
    if spec.covariates:
        for c in spec.covariates:
            k = c if isinstance(c, (int, np.integer)) else data.covariate_names.index(c)
            cols.append(data.covariates[:, k])
            names.append(data.covariate_names[k])
    X = np.column_stack(cols)
    check_full_rank(X)
    spec.family.check_outcome(data.outcome)

    sg = tuple(range(2, 2 + p - 1))
    inter = tuple(range(1 + p, 1 + p + p - 1)) if spec.include_interaction else ()
    start = 1 + p + len(inter)
    covs = tuple(range(start, X.shape[1]))
    Z = _random_design(spec.random_effects, spec.re_parameterization, data.subgroup, n, p)
    between = between_columns(X, data.cluster, data.n_clusters)
    y = data.outcome.copy()
    for arr in (X, y, Z, between):
        arr.setflags(write=False)
    return DesignMatrices(X, y, data.cluster, Z, data.n_clusters, tuple(names), between, 1,
                          sg, inter, covs, spec.random_effects, spec.re_parameterization,
                          data.subgroup)


def design_from_arrays(X, y, cluster, Z=None, column_names=None, treatment_col: int = 1,
                       interaction_cols=(), random_effects: str | None = None) -> DesignMatrices:
    """Wrap arbitrary arrays as a design (for custom models and test fixtures).

    ``Z`` defaults to a random cluster intercept.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    y = np.asarray(y, dtype=float)
    cluster = np.asarray(cluster, dtype=np.int64)
    n_clusters = int(cluster.max()) + 1
    Z = np.ones((n, 1)) if Z is None else np.asarray(Z, dtype=float).reshape(n, -1)
    if random_effects is None:
        random_effects = "none" if Z.shape[1] == 0 else (
            "cluster_intercept" if Z.shape[1] == 1 else "subgroup_within_cluster")
    names = tuple(column_names) if column_names else tuple(f"x{k}" for k in range(X.shape[1]))
    between = between_columns(X, cluster, n_clusters)
    for arr in (X, y, Z, between):
        arr.setflags(write=False)
    return DesignMatrices(X, y, cluster, Z, n_clusters, names, between, treatment_col,
                          (), tuple(interaction_cols), (), random_effects, "slope",
                          np.zeros(n, dtype=np.int64))
