"""The generalized skew-normal bridge between the two likelihood forms.

A SkewParams block holds the joint-normal parameters (xi1, xi2, Xi11, Xi21,
Xi22) plus the threshold v2 (and an optional lower threshold for interval
models). One view of P(l < V2 <= v2) integrates the conditional CDF against
the k1-dimensional Gaussian weight (the GWI form); the other evaluates a
single k2-dimensional normal CDF (the CDF form). Both views are exposed here
and must agree numerically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BadDimension
from .gwi import GwiProblem
from .mvn import ApproxResult, CdfOptions, HyperRect, mvn_interval
from .numeric import (
    cholesky,
    chol_solve,
    check_symmetric,
    log_interval_prob,
    mills_ratio_inv,
    mvn_logpdf,
    std_normal_logcdf,
    std_normal_logpdf,
    std_normal_pdf,
)

__all__ = ["SkewParams", "conditional_cdf", "marginal_as_cdf", "marginal_as_gwi",
           "posterior_density"]


@dataclass
class SkewParams:
    """Parameters of the split joint normal (V1, V2) plus thresholds.

    The conditional covariance Xi22 - Xi21 Xi11^-1 Xi12 is precomputed; it is
    constant across integrand evaluations.
    """

    xi1: np.ndarray
    xi2: np.ndarray
    xi11: np.ndarray
    xi21: np.ndarray
    xi22: np.ndarray
    v2: np.ndarray
    lower: np.ndarray | None = None

    cond_cov: np.ndarray = field(init=False)
    coef: np.ndarray = field(init=False)  # Xi21 Xi11^-1

    def __post_init__(self):
        self.xi1 = np.asarray(self.xi1, dtype=float)
        self.xi2 = np.asarray(self.xi2, dtype=float)
        self.v2 = np.asarray(self.v2, dtype=float)
        self.xi11 = check_symmetric(self.xi11)
        self.xi21 = np.atleast_2d(np.asarray(self.xi21, dtype=float))
        self.xi22 = check_symmetric(self.xi22) if self.k2 else np.zeros((0, 0))
        if self.xi21.shape != (self.k2, self.k1):
            raise BadDimension(f"xi21 must be {(self.k2, self.k1)}, got {self.xi21.shape}")
        if self.lower is not None:
            self.lower = np.asarray(self.lower, dtype=float)
            if self.lower.shape != self.v2.shape:
                raise BadDimension("lower must match v2 in length")
        s11 = cholesky(self.xi11)
        self.coef = chol_solve(s11, self.xi21.T).T if self.k2 else np.zeros((0, self.k1))
        cc = self.xi22 - self.coef @ self.xi21.T
        self.cond_cov = 0.5 * (cc + cc.T) if self.k2 else cc

    @property
    def k1(self) -> int:
        return self.xi1.size

    @property
    def k2(self) -> int:
        return self.v2.size

    @property
    def cond_cov_is_diagonal(self) -> bool:
        if self.k2 == 0:
            return True
        off = self.cond_cov - np.diag(np.diag(self.cond_cov))
        return np.abs(off).max() <= 1e-10 * max(np.diag(self.cond_cov).max(), 1.0)


def _cond_bounds(sp: SkewParams, v1: np.ndarray):
    """Shifted thresholds of V2 | V1 = v1 (batch over rows of v1)."""
    v1 = np.atleast_2d(np.asarray(v1, dtype=float))
    shift = (v1 - sp.xi1) @ sp.coef.T  # (n, k2)
    hi = sp.v2[None, :] - shift
    lo = sp.lower[None, :] - shift if sp.lower is not None else None
    return lo, hi


def conditional_cdf(sp: SkewParams, v1, opts: CdfOptions | None = None):
    """P(lower < V2 <= v2 | V1 = v1) and its log.

    Exact product form when the conditional covariance is diagonal; general
    covariances fall back to the MVN CDF estimator.
    """
    if sp.k2 == 0:
        return 1.0, 0.0
    lo, hi = _cond_bounds(sp, v1)
    if sp.cond_cov_is_diagonal:
        sd = np.sqrt(np.diag(sp.cond_cov))
        hi_std = (hi - sp.xi2[None, :]) / sd[None, :]
        if lo is None:
            logp = np.sum(std_normal_logcdf(hi_std), axis=1)
        else:
            lo_std = (lo - sp.xi2[None, :]) / sd[None, :]
            logp = np.sum(log_interval_prob(lo_std, hi_std), axis=1)
        logp = float(logp[0]) if logp.size == 1 else logp
        return np.exp(logp), logp
    lo_v = lo[0] if lo is not None else np.full(sp.k2, -np.inf)
    rect = HyperRect(lo_v, hi[0])
    res = mvn_interval(rect, sp.xi2, sp.cond_cov, opts)
    return res.estimate, res.log_estimate


def marginal_as_cdf(sp: SkewParams):
    """(rect, mean, cov) such that mvn_cdf(rect, mean, cov) = P(lower < V2 <= v2).

    One-sided blocks use the shifted region (-inf, 0] with mean xi2 - v2;
    interval blocks keep the unshifted (lower, v2] so infinite thresholds
    (boundary bins) stay well defined.
    """
    if sp.lower is None:
        return (HyperRect(np.full(sp.k2, -np.inf), np.zeros(sp.k2)),
                sp.xi2 - sp.v2, sp.xi22)
    return HyperRect(sp.lower, sp.v2), sp.xi2, sp.xi22


def _diag_integrand(sp: SkewParams):
    """Analytic log h, gradient, and Hessian for diagonal conditional covariance."""
    sd = np.sqrt(np.diag(sp.cond_cov))
    bmat = -sp.coef / sd[:, None]                       # d(arg_i)/du
    a_hi = (sp.v2 - sp.xi2 + sp.coef @ sp.xi1) / sd
    a_lo = (sp.lower - sp.xi2 + sp.coef @ sp.xi1) / sd if sp.lower is not None else None

    if a_lo is None:
        def logh(u):
            arg = a_hi[None, :] + np.atleast_2d(u) @ bmat.T
            return np.sum(std_normal_logcdf(arg), axis=1)

        def logh_grad_hess(u):
            arg = a_hi + bmat @ u
            r = mills_ratio_inv(arg)
            lh = float(np.sum(std_normal_logcdf(arg)))
            grad = bmat.T @ r
            curr = -arg * r - r * r
            hess = (bmat * curr[:, None]).T @ bmat
            return lh, grad, hess
    else:
        def logh(u):
            u = np.atleast_2d(u)
            hi = a_hi[None, :] + u @ bmat.T
            lo = a_lo[None, :] + u @ bmat.T
            return np.sum(log_interval_prob(lo, hi), axis=1)

        def logh_grad_hess(u):
            hi = a_hi + bmat @ u
            lo = a_lo + bmat @ u
            logw = log_interval_prob(lo, hi)
            lh = float(np.sum(logw))
            hi0 = np.where(np.isfinite(hi), hi, 0.0)
            lo0 = np.where(np.isfinite(lo), lo, 0.0)
            ph = np.where(np.isfinite(hi), std_normal_pdf(hi0), 0.0)
            pl = np.where(np.isfinite(lo), std_normal_pdf(lo0), 0.0)
            w = np.maximum(np.exp(logw), 1e-300)
            first = (ph - pl) / w
            second = (-hi0 * ph + lo0 * pl) / w - first * first
            grad = bmat.T @ first
            hess = (bmat * second[:, None]).T @ bmat
            return lh, grad, hess

    return logh, logh_grad_hess


def marginal_as_gwi(sp: SkewParams, cdf_opts: CdfOptions | None = None) -> GwiProblem:
    """The k1-dimensional Gaussian-weighted-integral view of the marginal.

    Analytic integrand derivatives are available when the conditional
    covariance is diagonal; otherwise the conditional CDF is estimated per
    evaluation and derivatives use central differences.
    """
    if sp.k2 == 0 or sp.cond_cov_is_diagonal:
        if sp.k2 == 0:
            logh = lambda u: np.zeros(np.atleast_2d(u).shape[0])  # noqa: E731
            lgh = lambda u: (0.0, np.zeros(sp.k1), np.zeros((sp.k1, sp.k1)))  # noqa: E731
        else:
            logh, lgh = _diag_integrand(sp)
        return GwiProblem(xi1=sp.xi1, xi11=sp.xi11, logh=logh, logh_grad_hess=lgh)

    opts = cdf_opts or CdfOptions(abs_tol=0.0, rel_tol=1e-6, seed=0)

    def logh(u):
        u = np.atleast_2d(u)
        out = np.empty(u.shape[0])
        for i, row in enumerate(u):
            _, out[i] = conditional_cdf(sp, row, opts)
        return out

    def logh_grad_hess(u, h=1e-5):
        k = u.size
        base = float(logh(u[None, :])[0])
        grad = np.empty(k)
        hess = np.empty((k, k))
        for i in range(k):
            e = np.zeros(k)
            e[i] = h
            fp = float(logh((u + e)[None, :])[0])
            fm = float(logh((u - e)[None, :])[0])
            grad[i] = (fp - fm) / (2 * h)
            hess[i, i] = (fp - 2 * base + fm) / (h * h)
        for i in range(k):
            for j in range(i + 1, k):
                ei, ej = np.zeros(k), np.zeros(k)
                ei[i] = h
                ej[j] = h
                fpp = float(logh((u + ei + ej)[None, :])[0])
                fpm = float(logh((u + ei - ej)[None, :])[0])
                fmp = float(logh((u - ei + ej)[None, :])[0])
                fmm = float(logh((u - ei - ej)[None, :])[0])
                hess[i, j] = hess[j, i] = (fpp - fpm - fmp + fmm) / (4 * h * h)
        return base, grad, hess

    return GwiProblem(xi1=sp.xi1, xi11=sp.xi11, logh=logh, logh_grad_hess=logh_grad_hess)


def posterior_density(sp: SkewParams, v1, opts: CdfOptions | None = None,
                      log_denominator: float | None = None) -> float:
    """Density of V1 given the event {lower < V2 <= v2} at v1.

    The normalizer may be passed in (log scale) to avoid re-estimating it
    across evaluations.
    """
    v1 = np.asarray(v1, dtype=float)
    s11 = cholesky(sp.xi11)
    log_num_weight = mvn_logpdf(v1, sp.xi1, s11)
    _, log_cond = conditional_cdf(sp, v1, opts)
    if log_denominator is None:
        rect, mean, cov = marginal_as_cdf(sp)
        res: ApproxResult = mvn_interval(rect, mean, cov, opts)
        log_denominator = res.log_estimate
    return float(np.exp(log_num_weight + log_cond - log_denominator))
