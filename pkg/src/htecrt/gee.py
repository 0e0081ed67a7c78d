"""Marginal model by GEE with an independence working correlation.

With independence the estimating equations are the GLM score equations,
so the point estimate is the ordinary GLM fit. What GEE adds is the
cluster-robust sandwich covariance and, for few clusters, the
Fay-Graubard bias-corrected sandwich with its own degrees of freedom.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .data import DesignMatrices, Family, get_family

FG_BOUND = 0.75


class ConvergenceError(RuntimeError):
    pass


def glm_irls(X, y, family: Family, tol: float = 1e-10, maxiter: int = 50, weights=None):
    """Fixed-effects GLM by IRLS (Fisher scoring; Newton for canonical links).

    Returns ``(beta, converged, n_iter)``.
    """
    family = get_family(family)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    wts = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    if family.kind == "gaussian":
        sw = np.sqrt(wts)
        beta = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)[0]
        return beta, True, 1
    mu = (wts * y + 0.5) / (wts + 1.0) if family.kind == "bernoulli" else y + 0.5
    eta = family.link(mu)
    dev_old = np.inf
    beta = np.zeros(X.shape[1])
    for it in range(1, maxiter + 1):
        v = family.variance(mu)
        W = wts * v
        z = eta + (y - mu) / v
        XtW = X.T * W
        beta = np.linalg.solve(XtW @ X, XtW @ z)
        eta = X @ beta
        mu = family.inverse_link(eta)
        dev = float(np.sum(wts * family.unit_deviance(y, mu)))
        if not np.isfinite(dev):
            raise ConvergenceError("IRLS diverged")
        if abs(dev - dev_old) <= tol * (abs(dev) + 0.1):
            return beta, True, it
        dev_old = dev
    return beta, False, maxiter


@dataclass(frozen=True, eq=False)
class GeeFitResult:
    beta: np.ndarray
    vcov_model: np.ndarray
    vcov_robust: np.ndarray
    vcov_fg: np.ndarray | None
    fg_applicable: bool | None  # None when the correction was not attempted
    converged: bool
    df_fg: float | None = None
    dispersion: float = 1.0
    n_clusters: int = 0
    column_names: tuple = ()
    family: Family | None = None

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.vcov_robust))


class ClusterScores(NamedTuple):
    scores: np.ndarray  # (K, q) per-cluster D'V^-1 r
    info: np.ndarray  # (K, q, q) per-cluster D'V^-1 D


def cluster_scores(design: DesignMatrices, family: Family, beta, dispersion: float = 1.0) -> ClusterScores:
    X, y = design.X, design.y
    mu = family.inverse_link(X @ beta)
    v = family.variance(mu)
    order = np.argsort(design.cluster, kind="stable")
    cl = design.cluster[order]
    starts = np.flatnonzero(np.r_[True, cl[1:] != cl[:-1]])
    Xo = X[order]
    # canonical link: D_i = V_i X_i, so D'V^-1 r = X'r and D'V^-1 D = X' V X
    scores = np.add.reduceat(Xo * (y - mu)[order, None], starts, axis=0) / dispersion
    info = np.add.reduceat((v[order, None, None] * Xo[:, :, None]) * Xo[:, None, :], starts, axis=0)
    return ClusterScores(scores, info / dispersion)


class FayGraubard(NamedTuple):
    vcov: np.ndarray | None
    df: float | None
    applicable: bool


def _is_singular(A: np.ndarray) -> bool:
    if not np.all(np.isfinite(A)):
        return True
    s = np.linalg.svd(A, compute_uv=False)
    return s[-1] <= 1e-10 * s[0]


def fay_graubard_adjust(fit: GeeFitResult, design: DesignMatrices, family, b: float = FG_BOUND,
                        contrast=None) -> FayGraubard:
    """Fay-Graubard bias-corrected sandwich and its degrees of freedom.

    The influence of cluster ``i`` on the estimate, ``Omega^-1 U_i``, is
    rescaled coordinate-wise by ``(1 - min(b, [Omega^-1 Omega_i]_jj))^(-1/2)``,
    where ``Omega_i`` is the cluster's contribution to the information
    ``Omega``. Scaling on the coefficient side keeps every factor acting on
    its own coefficient, so no variance can shrink. The degrees of freedom
    approximate ``c' V c`` by a scaled chi-square, using the covariance of
    the estimated cluster scores under the working model. ``contrast``
    defaults to the (first) interaction coefficient.

    A numerically singular information matrix makes the correction
    inapplicable; ``applicable`` is then False and the other fields None.
    """
    family = get_family(family)
    sc = cluster_scores(design, family, fit.beta, fit.dispersion)
    Omega = sc.info.sum(axis=0)
    if _is_singular(Omega):
        return FayGraubard(None, None, False)
    P = np.linalg.inv(Omega)
    P = 0.5 * (P + P.T)
    lev = np.einsum("ab,kba->ka", P, sc.info)  # diag(P Omega_i)
    h = 1.0 / np.sqrt(1.0 - np.minimum(b, np.maximum(lev, 0.0)))
    adj = h * (sc.scores @ P)
    vcov = adj.T @ adj

    if contrast is None:
        contrast = np.zeros(design.q)
        contrast[design.interaction_cols[0] if design.interaction_cols else design.treatment_col] = 1.0
    c = np.asarray(contrast, dtype=float)
    w = (h * c) @ P  # (K, q): c'V c = sum_i (w_i' U_i)^2
    v = np.einsum("kab,kb->ka", sc.info, w)
    S = -(v @ P @ v.T)
    S[np.diag_indices_from(S)] += np.einsum("ka,ka->k", w, v)
    denom = float(np.sum(S * S))
    if not np.isfinite(denom) or denom <= 0:
        return FayGraubard(None, None, False)
    df = float(np.trace(S) ** 2 / denom)
    return FayGraubard(vcov, df, True)


def fit_gee(design: DesignMatrices, family, fay_graubard: bool = True, b: float = FG_BOUND) -> GeeFitResult:
    """GEE with independence working correlation and sandwich covariance.

    ``vcov_robust = A^-1 (sum_i D_i'V_i^-1 r_i r_i' V_i^-1 D_i) A^-1`` with
    ``A = sum_i D_i'V_i^-1 D_i``. Gaussian dispersion is the Pearson mean
    square on ``n - q`` degrees of freedom; it cancels in the sandwich.
    """
    family = get_family(family)
    beta, converged, _ = glm_irls(design.X, design.y, family)
    if family.kind == "gaussian":
        r = design.y - design.X @ beta
        dispersion = float(r @ r) / (design.n - design.q)
    else:
        dispersion = 1.0
    sc = cluster_scores(design, family, beta, dispersion)
    A = sc.info.sum(axis=0)
    bread = np.linalg.inv(A)
    meat = sc.scores.T @ sc.scores
    robust = bread @ meat @ bread
    robust = 0.5 * (robust + robust.T)
    fit = GeeFitResult(beta, bread, robust, None, None, converged, None, dispersion,
                       design.n_clusters, design.column_names, family)
    if not fay_graubard:
        return fit
    fg = fay_graubard_adjust(fit, design, family, b)
    return GeeFitResult(beta, bread, robust, fg.vcov, fg.applicable, converged, fg.df, dispersion,
                        design.n_clusters, design.column_names, family)
