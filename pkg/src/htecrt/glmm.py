"""Standard and flexible GLMM fitting.

Gaussian models are fitted by REML on the profiled deviance (fixed effects
and residual variance profiled out through a blocked Cholesky
factorisation). Poisson and Bernoulli models use the Laplace approximation,
with fixed effects and spherical random effects updated jointly by
penalised iteratively reweighted least squares (PIRLS). In both cases only
the relative Cholesky factor ``theta`` of the random-effects covariance is
left to a bounded Nelder-Mead search.

Random effects are block diagonal by cluster, so all per-cluster algebra
is done on stacked ``(K, q, q)`` arrays where ``q`` is at most 2.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import optimize
from scipy.special import gammaln

from .data import DesignMatrices, Family, get_family

SINGULAR_TOL = 1e-4
PIRLS_TOL = 1e-8
PIRLS_MAXITER = 100
MAX_HALVINGS = 10
LOG_2PI = np.log(2.0 * np.pi)


class FitError(RuntimeError):
    """Raised when a model cannot be fitted at all."""


# ---------------------------------------------------------------------------
# Covariance parameters
# ---------------------------------------------------------------------------


def _tril_positions(q: int):
    """Column-major lower-triangle positions, e.g. (0,0), (1,0), (1,1)."""
    return [(i, j) for j in range(q) for i in range(j, q)]


def n_theta(q: int) -> int:
    return q * (q + 1) // 2


def theta_to_cholesky(theta, q: int) -> np.ndarray:
    L = np.zeros((q, q))
    for k, (i, j) in enumerate(_tril_positions(q)):
        L[i, j] = theta[k]
    return L


def cholesky_to_theta(L) -> np.ndarray:
    q = L.shape[0]
    return np.array([L[i, j] for i, j in _tril_positions(q)])


def diagonal_index(q: int) -> np.ndarray:
    return np.array([k for k, (i, j) in enumerate(_tril_positions(q)) if i == j])


def theta_start(q: int) -> np.ndarray:
    return np.array([1.0 if i == j else 0.0 for i, j in _tril_positions(q)])


@dataclass(frozen=True)
class CovarianceParams:
    """Lower-triangular Cholesky entries of the random-effects covariance.

    For gaussian models ``theta`` is relative to the residual SD; otherwise
    it is on the absolute scale. ``scale`` is the residual SD (1 for
    non-gaussian families).
    """

    theta: np.ndarray
    structure: str
    scale: float = 1.0

    @property
    def q(self) -> int:
        return int(round((np.sqrt(8 * len(self.theta) + 1) - 1) / 2))

    @property
    def cholesky(self) -> np.ndarray:
        return theta_to_cholesky(self.theta, self.q)

    @property
    def diagonal(self) -> np.ndarray:
        return np.asarray(self.theta)[diagonal_index(self.q)]

    @property
    def covariance(self) -> np.ndarray:
        """Absolute random-effects covariance ``scale**2 * L L'``."""
        L = self.cholesky
        return self.scale ** 2 * (L @ L.T)

    @property
    def singular(self) -> bool:
        return bool(np.any(self.diagonal < SINGULAR_TOL))


@dataclass(frozen=True, eq=False)
class FitResult:
    beta: np.ndarray
    vcov_beta: np.ndarray
    theta_hat: CovarianceParams
    sigma_resid: float | None
    deviance: float
    conditional_modes: np.ndarray
    converged: bool
    singular: bool
    n_outer_evals: int
    family: Family
    random_effects: str
    criterion: str
    column_names: tuple = ()

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.vcov_beta))

    @property
    def covariance(self) -> np.ndarray:
        return self.theta_hat.covariance


@dataclass(frozen=True, eq=False)
class PirlsResult:
    beta: np.ndarray
    cond_modes: np.ndarray
    laplace_deviance: float
    u: np.ndarray
    vcov_beta: np.ndarray
    converged: bool
    n_iter: int


# ---------------------------------------------------------------------------
# Per-cluster bookkeeping
# ---------------------------------------------------------------------------


def _cluster_sums(values: np.ndarray, starts: np.ndarray) -> np.ndarray:
    return np.add.reduceat(values, starts, axis=0)


def small_inv(M: np.ndarray):
    """Inverse and log-determinant of a stack of SPD matrices ``(K, q, q)``."""
    q = M.shape[-1]
    if q == 1:
        return 1.0 / M, np.log(M[:, 0, 0])
    if q == 2:
        a, b, d = M[:, 0, 0], M[:, 1, 0], M[:, 1, 1]
        det = a * d - b * b
        inv = np.empty_like(M)
        inv[:, 0, 0] = d / det
        inv[:, 1, 1] = a / det
        inv[:, 0, 1] = inv[:, 1, 0] = -b / det
        return inv, np.log(det)
    C = np.linalg.cholesky(M)
    return np.linalg.inv(M), 2.0 * np.sum(np.log(np.diagonal(C, axis1=1, axis2=2)), axis=1)


class LmmProblem:
    """Sufficient statistics of a gaussian mixed model, by cluster."""

    def __init__(self, design: DesignMatrices):
        if design.n_re == 0:
            raise ValueError("design has no random effects")
        order = np.argsort(design.cluster, kind="stable")
        X = design.X[order]
        Z = design.Z[order]
        y = design.y[order]
        cl = design.cluster[order]
        starts = np.flatnonzero(np.r_[True, cl[1:] != cl[:-1]])
        self.n, self.p = X.shape
        self.q = Z.shape[1]
        self.K = design.n_clusters
        self.ZtZ = _cluster_sums(Z[:, :, None] * Z[:, None, :], starts)
        self.ZtX = _cluster_sums(Z[:, :, None] * X[:, None, :], starts)
        self.Zty = _cluster_sums(Z * y[:, None], starts)
        self.XtX = X.T @ X
        self.Xty = X.T @ y
        self.yty = float(y @ y)

    def _solve(self, theta):
        L = theta_to_cholesky(theta, self.q)
        M = L.T @ self.ZtZ @ L + np.eye(self.q)
        LZX = L.T @ self.ZtX
        LZy = self.Zty @ L
        rhs = np.concatenate([LZX, LZy[:, :, None]], axis=2)
        Minv, logdet = small_inv(M)
        sol = Minv @ rhs
        cross = np.tensordot(rhs, sol, axes=([0, 1], [0, 1]))
        p = self.p
        XtX = self.XtX - cross[:p, :p]
        Xty = self.Xty - cross[:p, p]
        yty = self.yty - cross[p, p]
        R = np.linalg.cholesky(XtX)
        beta = np.linalg.solve(XtX, Xty)
        r2 = max(yty - beta @ Xty, 1e-300)
        logdet_X = 2.0 * np.sum(np.log(np.diag(R)))
        return beta, r2, float(np.sum(logdet)), logdet_X, XtX, sol, L

    def deviance(self, theta, criterion: str = "reml") -> float:
        try:
            _, r2, ldM, ldX, *_ = self._solve(theta)
        except np.linalg.LinAlgError:
            return np.inf
        if criterion == "reml":
            nu = self.n - self.p
            return float(ldM + ldX + nu * (1.0 + LOG_2PI + np.log(r2 / nu)))
        return float(ldM + self.n * (1.0 + LOG_2PI + np.log(r2 / self.n)))

    def reml_deviance_varpar(self, theta, sigma: float) -> float:
        """REML deviance at given relative theta and residual SD (not profiled)."""
        _, r2, ldM, ldX, *_ = self._solve(theta)
        nu = self.n - self.p
        return float(ldM + ldX + nu * (LOG_2PI + 2.0 * np.log(sigma)) + r2 / sigma ** 2)

    def vcov_varpar(self, theta, sigma: float) -> np.ndarray:
        _, _, _, _, XtX, _, _ = self._solve(theta)
        return sigma ** 2 * np.linalg.inv(XtX)

    def extract(self, theta, criterion: str = "reml"):
        beta, r2, _, _, XtX, sol, L = self._solve(theta)
        nu = self.n - self.p if criterion == "reml" else self.n
        sigma2 = r2 / nu
        # spherical modes u_i = M_i^{-1} (L'Z'y - L'Z'X beta)
        u = sol[:, :, self.p] - sol[:, :, : self.p] @ beta
        b = u @ L.T
        vcov = sigma2 * np.linalg.inv(XtX)
        return beta, float(np.sqrt(sigma2)), vcov, b


class GlmmProblem:
    """Laplace-approximation problem for poisson / bernoulli GLMMs.

    Rows sharing cluster, fixed-effects row and random-effects row are
    merged into one cell carrying the outcome sum and the row count; the
    log-likelihood depends on the data only through these (up to a
    constant that is added back).
    """

    def __init__(self, design: DesignMatrices, family: Family):
        if family.kind == "gaussian":
            raise ValueError("use LmmProblem for gaussian models")
        if design.n_re == 0:
            raise ValueError("design has no random effects")
        self.family = family
        keys = np.column_stack([design.cluster, design.X, design.Z])
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        inv = inv.ravel()
        p, q = design.q, design.n_re
        self.cell_cluster = uniq[:, 0].astype(np.int64)
        self.X = uniq[:, 1 : 1 + p]
        self.Z = uniq[:, 1 + p : 1 + p + q]
        self.S = np.bincount(inv, weights=design.y, minlength=len(uniq))
        self.w = np.bincount(inv, minlength=len(uniq)).astype(float)
        self.starts = np.flatnonzero(np.r_[True, self.cell_cluster[1:] != self.cell_cluster[:-1]])
        self.K = design.n_clusters
        if len(self.starts) != self.K:
            raise ValueError("every cluster must contain at least one row")
        self.p, self.q = p, q
        self.ZZ = self.Z[:, :, None] * self.Z[:, None, :]
        self.ZX = self.Z[:, :, None] * self.X[:, None, :]
        if family.kind == "poisson":
            self.const = 2.0 * float(np.sum(gammaln(design.y + 1.0)))
        else:
            self.const = 0.0
        self._warm = None

    @cached_property
    def beta_glm(self) -> np.ndarray:
        zero = np.zeros(n_theta(self.q))
        return self.pirls(zero, beta0=self._glm_start()).beta

    def _glm_start(self) -> np.ndarray:
        ybar = (self.S + 0.5) / (self.w + 1.0)
        eta = self.family.link(ybar)
        W = self.w
        return np.linalg.lstsq(self.X * np.sqrt(W)[:, None], eta * np.sqrt(W), rcond=None)[0]

    def _eta(self, beta, b):
        return self.X @ beta + np.einsum("mq,mq->m", self.Z, b[self.cell_cluster])

    def _loglik(self, eta) -> float:
        if self.family.kind == "poisson":
            return float(self.S @ eta - self.w @ np.exp(eta))
        eta = np.clip(eta, -30.0, 30.0)
        return float(self.S @ eta - self.w @ np.logaddexp(0.0, eta))

    def _normal_eq(self, L, beta, u):
        b = u @ L.T
        eta = self._eta(beta, b)
        mu = self.family.inverse_link(eta)
        W = self.w * self.family.variance(mu)
        rhs = W * eta + (self.S - self.w * mu)
        ZtWZ = _cluster_sums(W[:, None, None] * self.ZZ, self.starts)
        ZtWX = _cluster_sums(W[:, None, None] * self.ZX, self.starts)
        ZtWz = _cluster_sums(rhs[:, None] * self.Z, self.starts)
        M = L.T @ ZtWZ @ L + np.eye(self.q)
        LZX = L.T @ ZtWX
        LZz = ZtWz @ L
        XtWX = self.X.T @ (W[:, None] * self.X)
        XtWz = self.X.T @ rhs
        return M, LZX, LZz, XtWX, XtWz

    def _solve(self, L, beta, u):
        M, LZX, LZz, XtWX, XtWz = self._normal_eq(L, beta, u)
        Minv, logdet = small_inv(M)
        MiLZX = Minv @ LZX
        MiLZz = np.einsum("kab,kb->ka", Minv, LZz)
        A = XtWX - np.tensordot(LZX, MiLZX, axes=([0, 1], [0, 1]))
        r = XtWz - np.tensordot(LZX, MiLZz, axes=([0, 1], [0, 1]))
        return A, r, MiLZX, MiLZz, logdet

    def pirls(self, theta, beta0=None, u0=None) -> PirlsResult:
        L = theta_to_cholesky(theta, self.q)
        beta = self._glm_start() if beta0 is None else np.array(beta0, dtype=float)
        u = np.zeros((self.K, self.q)) if u0 is None else np.array(u0, dtype=float)
        pdev = -2.0 * self._loglik(self._eta(beta, u @ L.T)) + float(np.sum(u * u))
        converged = False
        for it in range(1, PIRLS_MAXITER + 1):
            A, r, MiLZX, MiLZz, _ = self._solve(L, beta, u)
            try:
                beta_new = np.linalg.solve(A, r)
            except np.linalg.LinAlgError as exc:
                raise FitError("singular weighted cross-product in PIRLS") from exc
            u_new = MiLZz - MiLZX @ beta_new
            d_beta, d_u = beta_new - beta, u_new - u
            step = 1.0
            for _ in range(MAX_HALVINGS + 1):
                bt, ut = beta + step * d_beta, u + step * d_u
                new = -2.0 * self._loglik(self._eta(bt, ut @ L.T)) + float(np.sum(ut * ut))
                if np.isfinite(new) and new <= pdev + 1e-10 * abs(pdev):
                    break
                step *= 0.5
            beta, u = bt, ut
            change = abs(pdev - new)
            pdev = new
            if change < PIRLS_TOL * (abs(new) + PIRLS_TOL):
                converged = True
                break
        A, _, _, _, logdet = self._solve(L, beta, u)
        try:
            vcov = np.linalg.inv(A)
        except np.linalg.LinAlgError as exc:
            raise FitError("singular weighted cross-product in PIRLS") from exc
        return PirlsResult(beta, u @ L.T, pdev + float(np.sum(logdet)) + self.const,
                           u, vcov, converged, it)

    def deviance(self, theta) -> float:
        """Laplace deviance, warm-started from the previous converged mode."""
        beta0, u0 = self._warm if self._warm is not None else (self.beta_glm, None)
        try:
            res = self.pirls(theta, beta0=beta0, u0=u0)
        except (FitError, np.linalg.LinAlgError, FloatingPointError):
            return np.inf
        if not np.isfinite(res.laplace_deviance):
            return np.inf
        if res.converged:
            self._warm = (res.beta, res.u)
        return res.laplace_deviance


def make_problem(design: DesignMatrices, family):
    family = get_family(family)
    if family.kind == "gaussian":
        return LmmProblem(design)
    return GlmmProblem(design, family)


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def pirls_solve(theta, design: DesignMatrices, family) -> PirlsResult:
    """Joint (beta, u) mode at fixed theta and its Laplace deviance.

    For gaussian models this is the exact penalised least-squares solution
    and the deviance is the profiled ML deviance.
    """
    theta = np.asarray(getattr(theta, "theta", theta), dtype=float)
    family = get_family(family)
    if family.kind == "gaussian":
        prob = LmmProblem(design)
        beta, sigma, vcov, b = prob.extract(theta, "ml")
        u = np.zeros_like(b)
        return PirlsResult(beta, b, prob.deviance(theta, "ml"), u, vcov, True, 1)
    prob = GlmmProblem(design, family)
    return prob.pirls(theta, beta0=prob.beta_glm)


def profiled_deviance(theta, design: DesignMatrices, family, criterion: str | None = None) -> float:
    """Objective minimised over theta: (RE)ML deviance or Laplace deviance."""
    theta = np.asarray(getattr(theta, "theta", theta), dtype=float)
    family = get_family(family)
    criterion = criterion or ("reml" if family.kind == "gaussian" else "ml")
    if criterion == "reml" and family.kind != "gaussian":
        raise ValueError("REML is only available for gaussian models")
    prob = make_problem(design, family)
    if family.kind == "gaussian":
        return prob.deviance(theta, criterion)
    return prob.deviance(theta)


def _initial_simplex(x0, step=0.5):
    pts = [np.array(x0, dtype=float)]
    for k in range(len(x0)):
        v = np.array(x0, dtype=float)
        v[k] -= step
        pts.append(v)
    return np.array(pts)


def fold_theta(x, q: int) -> np.ndarray:
    """Map an unconstrained vector to theta by reflecting diagonals at 0."""
    theta = np.array(x, dtype=float)
    diag = diagonal_index(q)
    theta[diag] = np.abs(theta[diag])
    return theta


@dataclass(frozen=True)
class ThetaOptimum:
    x: np.ndarray
    fun: float
    nfev: int
    success: bool
    message: str


def minimize_theta(objective, q: int, maxfun: int = 10000, x0=None) -> ThetaOptimum:
    """Nelder-Mead over theta with the diagonal entries kept >= 0.

    The bound is imposed by reflection (the objective sees ``|x|`` on the
    diagonal) rather than by clipping, which would collapse the simplex
    onto the boundary.
    """
    x0 = theta_start(q) if x0 is None else np.asarray(x0, dtype=float)
    res = optimize.minimize(
        lambda x: objective(fold_theta(x, q)), x0, method="Nelder-Mead",
        options={"xatol": 1e-6, "fatol": 1e-8, "maxfev": maxfun,
                 "initial_simplex": _initial_simplex(x0)},
    )
    return ThetaOptimum(fold_theta(res.x, q), float(res.fun), int(res.nfev),
                        bool(res.success), str(res.message))


def fit_glmm(design: DesignMatrices, family, re: str | None = None,
             criterion: str | None = None, maxfun: int = 10000,
             re_parameterization: str = "slope") -> FitResult:
    """Fit the standard (``cluster_intercept``) or flexible
    (``subgroup_within_cluster``) GLMM.

    Gaussian models default to REML, others to Laplace ML. The fit is
    flagged singular when any Cholesky diagonal of ``theta`` is below 1e-4.
    """
    family = get_family(family)
    re = re or design.random_effects
    if re == "none":
        raise ValueError("fit_glmm needs a random-effects structure")
    if re != design.random_effects or re_parameterization != design.re_parameterization:
        design = design.with_random_effects(re, re_parameterization)
    criterion = criterion or ("reml" if family.kind == "gaussian" else "ml")
    if criterion == "reml" and family.kind != "gaussian":
        raise ValueError("REML is only available for gaussian models")
    q = design.n_re
    prob = make_problem(design, family)

    if family.kind == "gaussian":
        objective = lambda th: prob.deviance(th, criterion)  # noqa: E731
    else:
        objective = prob.deviance
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = minimize_theta(objective, q, maxfun)
    theta = res.x
    converged = bool(res.success) and np.isfinite(res.fun)

    try:
        if family.kind == "gaussian":
            beta, sigma, vcov, b = prob.extract(theta, criterion)
            dev = prob.deviance(theta, criterion)
            cov = CovarianceParams(theta, re, sigma)
        else:
            pr = prob.pirls(theta, beta0=prob.beta_glm)
            beta, vcov, b, dev, sigma = pr.beta, pr.vcov_beta, pr.cond_modes, pr.laplace_deviance, None
            converged = converged and pr.converged
            cov = CovarianceParams(theta, re, 1.0)
    except (np.linalg.LinAlgError, FitError):
        nan = np.full(design.q, np.nan)
        return FitResult(nan, np.full((design.q, design.q), np.nan), CovarianceParams(theta, re),
                         None, np.nan, np.zeros((design.n_clusters, q)), False, cov_singular(theta, q),
                         int(res.nfev), family, re, criterion, design.column_names)
    vcov = 0.5 * (vcov + vcov.T)
    return FitResult(beta, vcov, cov, sigma, float(dev), b, converged, cov.singular,
                     int(res.nfev), family, re, criterion, design.column_names)


def cov_singular(theta, q) -> bool:
    return bool(np.any(np.asarray(theta)[diagonal_index(q)] < SINGULAR_TOL))


def fit_two_step(design: DesignMatrices, family, maxfun: int = 10000):
    """Flexible GLMM, falling back to the standard GLMM on a singular fit.

    Returns ``(fit, used_fallback)``.
    """
    flex_error = None
    try:
        flex = fit_glmm(design, family, "subgroup_within_cluster", maxfun=maxfun)
    except (FitError, np.linalg.LinAlgError) as exc:
        flex, flex_error = None, exc
    if flex is not None and flex.converged and not flex.singular:
        return flex, False
    std = fit_glmm(design, family, "cluster_intercept", maxfun=maxfun)
    if not std.converged and (flex is None or not flex.converged):
        raise FitError("both the flexible and the standard GLMM failed") from flex_error
    return std, True
