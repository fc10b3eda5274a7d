"""Cluster likelihood builders for the four probit-link model families.

Each builder produces the analytic prefactor log c(y), the skew-normal
parameter block (the CDF view), and the Gaussian-weighted-integral problem
with analytic integrand derivatives (the GWI view). Built likelihoods also
carry the complete-data score and the chain rule needed to turn MVN CDF
gradients into parameter gradients, so every stochastic engine can share its
random points between the value and the gradient.

Parameter packing: a flat vector [family coefficients..., vech(Sigma)] where
vech stacks the lower triangle row by row; off-diagonal entries of a
symmetric full-matrix gradient are doubled when packed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import gammaln

from .errors import BadDimension, MonotonicityViolation
from .gwi import (
    AffineSpec,
    GwiProblem,
    McOptions,
    find_mode,
    ghq_rule,
    importance_sample,
    rqmc,
    spherical_radial,
)
from .mvn import ApproxResult, CdfOptions, mvn_grad_general
from .numeric import (
    cholesky,
    chol_logdet,
    chol_solve,
    check_symmetric,
    log_interval_prob,
    mills_ratio_inv,
    std_normal_logcdf,
    std_normal_logpdf,
    std_normal_pdf,
)
from .skewlink import SkewParams, marginal_as_cdf

__all__ = [
    "BinomialCluster",
    "MultinomialCluster",
    "OrderedCluster",
    "GsmCluster",
    "BuiltLikelihood",
    "build_binomial",
    "build_multinomial",
    "build_ordered",
    "build_gsm",
    "multinomial_integrand",
    "loglik_cdf",
    "loglik_gradient",
    "vech",
    "unvech",
    "sym_grad_to_vech",
]


# ---------------------------------------------------------------------------
# vech packing helpers (lower triangle, row-major)


def _vech_indices(k: int):
    return [(i, j) for i in range(k) for j in range(i + 1)]


def vech(a: np.ndarray) -> np.ndarray:
    k = a.shape[0]
    return np.array([a[i, j] for i, j in _vech_indices(k)])


def unvech(v: np.ndarray) -> np.ndarray:
    k = int((np.sqrt(8 * v.size + 1) - 1) / 2)
    out = np.zeros((k, k))
    for idx, (i, j) in enumerate(_vech_indices(k)):
        out[i, j] = out[j, i] = v[idx]
    return out


_VECH_CACHE: dict[int, tuple] = {}


def _vech_arrays(k: int):
    if k not in _VECH_CACHE:
        idx = _vech_indices(k)
        ii = np.array([i for i, _ in idx])
        jj = np.array([j for _, j in idx])
        mult = np.where(ii == jj, 1.0, 2.0)
        _VECH_CACHE[k] = (ii, jj, mult)
    return _VECH_CACHE[k]


def sym_grad_to_vech(g: np.ndarray) -> np.ndarray:
    """Pack a symmetric full-matrix gradient; off-diagonals count twice."""
    ii, jj, mult = _vech_arrays(g.shape[0])
    return g[ii, jj] * mult


def batch_sym_to_vech(gs: np.ndarray) -> np.ndarray:
    """Pack a batch (n, K, K) of symmetric gradients into (n, K(K+1)/2)."""
    ii, jj, mult = _vech_arrays(gs.shape[1])
    return gs[:, ii, jj] * mult[None, :]


def _gaussian_score_sigma_vech(u: np.ndarray, mean: np.ndarray, sigma_inv: np.ndarray):
    """vech-packed d/dSigma log phi(u; mean, Sigma) for a batch of u."""
    w = (np.atleast_2d(u) - mean) @ sigma_inv  # (n, K)
    outer = w[:, :, None] * w[:, None, :]
    return batch_sym_to_vech(0.5 * (outer - sigma_inv[None, :, :]))


# ---------------------------------------------------------------------------
# cluster data types


@dataclass
class BinomialCluster:
    """Counts y_i out of m_i trials with shared random effects."""

    y: np.ndarray
    m: np.ndarray | int
    x_design: np.ndarray
    z_design: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=int)
        n = self.y.size
        self.m = np.full(n, self.m, dtype=int) if np.isscalar(self.m) \
            else np.asarray(self.m, dtype=int)
        self.x_design = np.atleast_2d(np.asarray(self.x_design, dtype=float))
        self.z_design = np.atleast_2d(np.asarray(self.z_design, dtype=float))
        if not (self.m.size == n and self.x_design.shape[0] == n
                and self.z_design.shape[0] == n):
            raise BadDimension("row counts of y, m, x_design, z_design disagree")
        if np.any(self.y < 0) or np.any(self.y > self.m):
            raise ValueError("counts must satisfy 0 <= y_i <= m_i")

    @property
    def n(self) -> int:
        return self.y.size


@dataclass
class MultinomialCluster:
    """Categorical outcomes y_i in 1..c with per-category random-effect rows."""

    y: np.ndarray
    c: int
    x_design: np.ndarray            # (n, p)
    z_designs: np.ndarray           # (n, c, K)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=int)
        self.x_design = np.atleast_2d(np.asarray(self.x_design, dtype=float))
        self.z_designs = np.asarray(self.z_designs, dtype=float)
        if self.z_designs.ndim != 3 or self.z_designs.shape[1] != self.c:
            raise BadDimension("z_designs must have shape (n, c, K)")
        if np.any(self.y < 1) or np.any(self.y > self.c):
            raise ValueError("categories must lie in 1..c")

    @property
    def n(self) -> int:
        return self.y.size


@dataclass
class OrderedCluster:
    """Ordered categories with cutpoints gamma_1 < ... < gamma_{c-1}, gamma_1 = 0."""

    y: np.ndarray
    gamma: np.ndarray               # (c-1,) finite cutpoints
    x_design: np.ndarray
    z_design: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=int)
        self.gamma = np.asarray(self.gamma, dtype=float)
        self.x_design = np.atleast_2d(np.asarray(self.x_design, dtype=float))
        self.z_design = np.atleast_2d(np.asarray(self.z_design, dtype=float))
        if self.gamma.size and self.gamma[0] != 0.0:
            raise ValueError("identification requires gamma_1 = 0")
        if np.any(np.diff(self.gamma) <= 0):
            raise ValueError("cutpoints must be strictly increasing")
        if np.any(self.y < 1) or np.any(self.y > self.c):
            raise ValueError("categories must lie in 1..c")

    @property
    def c(self) -> int:
        return self.gamma.size + 1

    @property
    def n(self) -> int:
        return self.y.size

    def bin_edges(self):
        """(gamma_0, ..., gamma_c) with infinite end bins."""
        return np.concatenate([[-np.inf], self.gamma, [np.inf]])


@dataclass
class GsmCluster:
    """Survival times with probit-link survival.

    x_of_t(times, rows) evaluates the (possibly time-varying) design for the
    given individuals at the given times; dx_of_t is its time derivative.
    The linear predictor x(t)^T beta must increase at observed event times
    (survival decreases), which is checked when the likelihood is built.
    """

    t: np.ndarray
    d: np.ndarray
    x_of_t: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dx_of_t: Callable[[np.ndarray, np.ndarray], np.ndarray]
    z_design: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.d = np.asarray(self.d, dtype=int)
        self.z_design = np.atleast_2d(np.asarray(self.z_design, dtype=float))
        if np.any(self.t <= 0):
            raise ValueError("event/censoring times must be positive")

    @property
    def n(self) -> int:
        return self.t.size

    @property
    def observed(self) -> np.ndarray:
        return np.where(self.d == 1)[0]

    @property
    def censored(self) -> np.ndarray:
        return np.where(self.d == 0)[0]


# ---------------------------------------------------------------------------
# built likelihood


@dataclass
class BuiltLikelihood:
    """One cluster's likelihood in both representations.

    score_batch maps draws (nu, K) to complete-data scores (nu, n_params);
    cdf_param_gradient chains MVN CDF gradients back to the parameters.
    """

    family: str
    log_c: float
    skew: SkewParams
    gwi: GwiProblem
    n_params: int
    param_names: list
    score_batch: Callable[[np.ndarray], np.ndarray]
    cdf_param_gradient: Callable = None
    reduced: bool = field(default=False)

    def cdf_form(self):
        """(rect, mean, cov) of the CDF view, built once and reused."""
        form = getattr(self, "_cdf_form", None)
        if form is None:
            form = marginal_as_cdf(self.skew)
            object.__setattr__(self, "_cdf_form", form)
        return form

    def gwi_reduced_if_smaller(self) -> GwiProblem:
        """Apply the k2 < K rewrite when it shrinks the integral."""
        from .gwi import reduce_gwi_dimension

        if self.gwi.affine is not None and self.skew.k2 < self.gwi.k1:
            return reduce_gwi_dimension(self.gwi)
        return self.gwi


# ---------------------------------------------------------------------------
# mixed binomial probit


def _binomial_integrand(y, m, eta, z):
    yf = y.astype(float)
    mf = m.astype(float)

    def logh(u):
        a = eta[None, :] + np.atleast_2d(u) @ z.T
        return np.sum(yf * std_normal_logcdf(a) + (mf - yf) * std_normal_logcdf(-a), axis=1)

    def logh_grad_hess(u):
        a = eta + z @ u
        rp = mills_ratio_inv(a)
        rm = mills_ratio_inv(-a)
        lh = float(np.sum(yf * std_normal_logcdf(a) + (mf - yf) * std_normal_logcdf(-a)))
        coef = yf * rp - (mf - yf) * rm
        grad = z.T @ coef
        curv = yf * (-a * rp - rp * rp) + (mf - yf) * (a * rm - rm * rm)
        hess = (z * curv[:, None]).T @ z
        return lh, grad, hess

    return logh, logh_grad_hess


def _binomial_affine_rebuild(eta, lower_eta, zmat):
    n = eta.size
    ones = np.ones(n, dtype=int)
    return _binomial_integrand(ones, ones, eta, zmat)


def build_binomial(cl: BinomialCluster, beta, sigma) -> BuiltLikelihood:
    beta = np.asarray(beta, dtype=float)
    sigma = check_symmetric(sigma)
    n, big_k = cl.z_design.shape
    if cl.x_design.shape[1] != beta.size or sigma.shape[0] != big_k:
        raise BadDimension("design and parameter dimensions disagree")
    eta = cl.x_design @ beta
    log_c = float(np.sum(gammaln(cl.m + 1) - gammaln(cl.y + 1) - gammaln(cl.m - cl.y + 1)))

    # sign-augmented designs: +row per success, -row per failure
    signs = np.concatenate([np.concatenate([np.ones(y), -np.ones(m - y)])
                            for y, m in zip(cl.y, cl.m)])
    rows = np.repeat(np.arange(n), cl.m)
    z_aug = signs[:, None] * cl.z_design[rows]
    v2 = signs * eta[rows]
    k2 = int(np.sum(cl.m))
    skew = SkewParams(
        xi1=np.zeros(big_k), xi2=np.zeros(k2), xi11=sigma,
        xi21=-z_aug @ sigma, xi22=np.eye(k2) + z_aug @ sigma @ z_aug.T, v2=v2)

    logh, lgh = _binomial_integrand(cl.y, cl.m, eta, cl.z_design)
    affine = AffineSpec(eta=v2, zmat=z_aug, rebuild=_binomial_affine_rebuild)
    gwi = GwiProblem(xi1=np.zeros(big_k), xi11=sigma, logh=logh,
                     logh_grad_hess=lgh, affine=affine)

    sigma_inv = chol_solve(cholesky(sigma), np.eye(big_k))
    yf, mf = cl.y.astype(float), cl.m.astype(float)

    def score_batch(u):
        u = np.atleast_2d(u)
        a = eta[None, :] + u @ cl.z_design.T
        coef = yf * mills_ratio_inv(a) - (mf - yf) * mills_ratio_inv(-a)
        g_beta = coef @ cl.x_design
        g_vech = _gaussian_score_sigma_vech(u, np.zeros(big_k), sigma_inv)
        return np.concatenate([g_beta, g_vech], axis=1)

    def cdf_param_gradient(value, d_lower, d_upper, d_mu, d_sigma):
        # mean = -v2(beta) in the spec's shifted form; d v2/d beta = signs*X rows
        x_aug = signs[:, None] * cl.x_design[rows]
        g_beta = -(x_aug.T @ d_mu)
        g_cov = z_aug.T @ d_sigma @ z_aug
        return np.concatenate([g_beta, sym_grad_to_vech(g_cov)]) / max(value, 1e-300)

    names = [f"beta{i}" for i in range(beta.size)] + \
        [f"sigma[{i},{j}]" for i, j in _vech_indices(big_k)]
    return BuiltLikelihood("binomial", log_c, skew, gwi, len(names), names,
                           score_batch, cdf_param_gradient)


# ---------------------------------------------------------------------------
# mixed multinomial probit


_INNER_RULES: dict[int, tuple] = {}


def _inner_rule(b: int):
    if b not in _INNER_RULES:
        _INNER_RULES[b] = ghq_rule(b)
    return _INNER_RULES[b]


def _inner_aghq(tmat: np.ndarray, b: int, want_derivs: bool):
    """Adaptive 1-D quadrature of int phi(a) prod_j Phi(a + t_j) da, batched.

    tmat has shape (nu, c-1). Returns log h (nu,) and, when requested, the
    gradient and Hessian of log h with respect to t (adaptation point
    treated as fixed, which is exact up to the quadrature error).
    """
    tmat = np.atleast_2d(tmat)
    nu, _ = tmat.shape
    nodes, weights = _inner_rule(b)

    # mode of log phi(a) + sum log Phi(a + t_j), Newton (concave)
    a = np.zeros(nu)
    for _ in range(50):
        arg = a[:, None] + tmat
        r = mills_ratio_inv(arg)
        g = -a + r.sum(axis=1)
        curv = -1.0 + np.sum(-arg * r - r * r, axis=1)
        step = g / curv
        a = a - step
        if np.max(np.abs(g)) < 1e-12:
            break
    arg = a[:, None] + tmat
    r = mills_ratio_inv(arg)
    curv = -1.0 + np.sum(-arg * r - r * r, axis=1)
    s = 1.0 / np.sqrt(-curv)

    aq = a[:, None] + s[:, None] * nodes[None, :]            # (nu, b)
    logw = np.log(weights)[None, :] + np.log(s)[:, None] \
        + std_normal_logpdf(aq) - std_normal_logpdf(nodes)[None, :]
    args = aq[:, :, None] + tmat[:, None, :]                 # (nu, b, c-1)
    terms = logw + np.sum(std_normal_logcdf(args), axis=2)
    mx = terms.max(axis=1)
    logh = mx + np.log(np.sum(np.exp(terms - mx[:, None]), axis=1))
    if not want_derivs:
        return logh, None, None
    p = np.exp(terms - logh[:, None])                        # softmax over nodes
    rq = mills_ratio_inv(args)                               # (nu, b, c-1)
    grad = np.einsum("qb,qbj->qj", p, rq)
    rprime = -args * rq - rq * rq
    m1 = np.einsum("qb,qbj,qbl->qjl", p, rq, rq)
    m2 = np.einsum("qb,qbj->qj", p, rprime)
    hess = m1 + np.einsum("qj,jl->qjl", m2, np.eye(tmat.shape[1])) \
        - grad[:, :, None] * grad[:, None, :]
    return logh, grad, hess


def multinomial_integrand(eta, kmat, u, b: int = 8):
    """(h, grad log h, hess log h) of one individual's category probability
    h(u) = int phi(a) Phi^(c-1)(1 a + eta + kmat u) da, via adaptive
    quadrature with b nodes."""
    eta = np.asarray(eta, dtype=float)
    kmat = np.atleast_2d(np.asarray(kmat, dtype=float))
    t = eta + kmat @ np.asarray(u, dtype=float)
    logh, gt, ht = _inner_aghq(t[None, :], b, want_derivs=True)
    grad = kmat.T @ gt[0]
    hess = kmat.T @ ht[0] @ kmat
    return float(np.exp(logh[0])), grad, hess


def _contrast_blocks(cl: MultinomialCluster, bmat: np.ndarray):
    """Per-individual eta_i (c-1,) and K_i (c-1, K) contrast structures."""
    n = cl.n
    etas, kmats, others = [], [], []
    for i in range(n):
        k_cat = cl.y[i]
        other = [j for j in range(1, cl.c + 1) if j != k_cat]
        b_tilde = bmat[k_cat - 1][None, :] - bmat[[j - 1 for j in other]]
        z_tilde = cl.z_designs[i, k_cat - 1][None, :] - cl.z_designs[i, [j - 1 for j in other]]
        etas.append(b_tilde @ cl.x_design[i])
        kmats.append(z_tilde)
        others.append(other)
    return np.array(etas), np.array(kmats), others


def build_multinomial(cl: MultinomialCluster, bmat, sigma,
                      inner_nodes: int = 8) -> BuiltLikelihood:
    bmat = np.atleast_2d(np.asarray(bmat, dtype=float))
    sigma = check_symmetric(sigma)
    if bmat.shape[0] != cl.c:
        raise BadDimension("coefficient matrix must have one row per category")
    n, big_k = cl.n, sigma.shape[0]
    cm1 = cl.c - 1
    etas, kmats, others = _contrast_blocks(cl, bmat)

    z_stack = kmats.reshape(n * cm1, big_k)
    v2 = etas.reshape(n * cm1)
    omega = np.kron(np.eye(n), np.eye(cm1) + np.ones((cm1, cm1)))
    skew = SkewParams(
        xi1=np.zeros(big_k), xi2=np.zeros(n * cm1), xi11=sigma,
        xi21=-z_stack @ sigma, xi22=omega + z_stack @ sigma @ z_stack.T, v2=v2)

    def _rebuild(eta_flat, lower_eta, zmat):
        def logh(u):
            u = np.atleast_2d(u)
            t = eta_flat[None, :] + u @ zmat.T
            lh = np.zeros(u.shape[0])
            for i in range(n):
                sl = slice(i * cm1, (i + 1) * cm1)
                lh += _inner_aghq(t[:, sl], inner_nodes, False)[0]
            return lh

        def logh_grad_hess(u):
            t = eta_flat + zmat @ u
            lh = 0.0
            grad = np.zeros(u.size)
            hess = np.zeros((u.size, u.size))
            for i in range(n):
                sl = slice(i * cm1, (i + 1) * cm1)
                lhi, gt, ht = _inner_aghq(t[None, sl], inner_nodes, True)
                ki = zmat[sl]
                lh += float(lhi[0])
                grad += ki.T @ gt[0]
                hess += ki.T @ ht[0] @ ki
            return lh, grad, hess

        return logh, logh_grad_hess

    logh, lgh = _rebuild(v2, None, z_stack)
    affine = AffineSpec(eta=v2, zmat=z_stack, rebuild=_rebuild)
    gwi = GwiProblem(xi1=np.zeros(big_k), xi11=sigma, logh=logh,
                     logh_grad_hess=lgh, affine=affine)

    sigma_inv = chol_solve(cholesky(sigma), np.eye(big_k))
    p_dim = cl.x_design.shape[1]

    def _dlogh_dt(u):
        u = np.atleast_2d(u)
        t = v2[None, :] + u @ z_stack.T
        outs = []
        for i in range(n):
            sl = slice(i * cm1, (i + 1) * cm1)
            _, gt, _ = _inner_aghq(t[:, sl], inner_nodes, True)
            outs.append(gt)
        return outs  # list of (nu, c-1)

    def score_batch(u):
        u = np.atleast_2d(u)
        nu = u.shape[0]
        gts = _dlogh_dt(u)
        g_b = np.zeros((nu, cl.c, p_dim))
        for i in range(n):
            gt = gts[i]  # (nu, c-1)
            g_b[:, cl.y[i] - 1] += gt.sum(axis=1)[:, None] * cl.x_design[i][None, :]
            for jidx, cat in enumerate(others[i]):
                g_b[:, cat - 1] -= gt[:, jidx][:, None] * cl.x_design[i][None, :]
        g_vech = _gaussian_score_sigma_vech(u, np.zeros(big_k), sigma_inv)
        return np.concatenate([g_b.reshape(nu, -1), g_vech], axis=1)

    def cdf_param_gradient(value, d_lower, d_upper, d_mu, d_sigma):
        g_b = np.zeros((cl.c, p_dim))
        for i in range(n):
            sl = slice(i * cm1, (i + 1) * cm1)
            dmu_i = d_mu[sl]  # mean = -v2
            g_b[cl.y[i] - 1] += -np.sum(dmu_i) * cl.x_design[i]
            for jidx, cat in enumerate(others[i]):
                g_b[cat - 1] -= -dmu_i[jidx] * cl.x_design[i]
        g_cov = z_stack.T @ d_sigma @ z_stack
        return np.concatenate([g_b.reshape(-1), sym_grad_to_vech(g_cov)]) / max(value, 1e-300)

    names = [f"b[{k},{j}]" for k in range(cl.c) for j in range(p_dim)] + \
        [f"sigma[{i},{j}]" for i, j in _vech_indices(big_k)]
    return BuiltLikelihood("multinomial", 0.0, skew, gwi, len(names), names,
                           score_batch, cdf_param_gradient)


# ---------------------------------------------------------------------------
# mixed ordered probit


def _ordered_integrand(b_hi, b_lo, z):
    def logh(u):
        shift = np.atleast_2d(u) @ z.T
        return np.sum(log_interval_prob(b_lo[None, :] - shift, b_hi[None, :] - shift), axis=1)

    def logh_grad_hess(u):
        shift = z @ u
        hi = b_hi - shift
        lo = b_lo - shift
        logw = log_interval_prob(lo, hi)
        lh = float(np.sum(logw))
        hi0 = np.where(np.isfinite(hi), hi, 0.0)
        lo0 = np.where(np.isfinite(lo), lo, 0.0)
        ph = np.where(np.isfinite(hi), std_normal_pdf(hi0), 0.0)
        pl = np.where(np.isfinite(lo), std_normal_pdf(lo0), 0.0)
        w = np.maximum(np.exp(logw), 1e-300)
        first = (pl - ph) / w       # d log w / d shift
        second = (lo0 * pl - hi0 * ph) / w - first * first
        grad = z.T @ first
        hess = (z * second[:, None]).T @ z
        return lh, grad, hess

    return logh, logh_grad_hess


def _ordered_affine_rebuild(eta, lower_eta, zmat):
    return _ordered_integrand(eta, lower_eta, -zmat)


def build_ordered(cl: OrderedCluster, beta, sigma) -> BuiltLikelihood:
    beta = np.asarray(beta, dtype=float)
    sigma = check_symmetric(sigma)
    n, big_k = cl.z_design.shape
    edges = cl.bin_edges()
    eta = cl.x_design @ beta
    b_hi = edges[cl.y] - eta
    b_lo = edges[cl.y - 1] - eta

    skew = SkewParams(
        xi1=np.zeros(big_k), xi2=np.zeros(n), xi11=sigma,
        xi21=cl.z_design @ sigma,
        xi22=np.eye(n) + cl.z_design @ sigma @ cl.z_design.T,
        v2=b_hi, lower=b_lo)

    logh, lgh = _ordered_integrand(b_hi, b_lo, cl.z_design)
    affine = AffineSpec(eta=b_hi, zmat=-cl.z_design, rebuild=_ordered_affine_rebuild,
                        lower_eta=b_lo)
    gwi = GwiProblem(xi1=np.zeros(big_k), xi11=sigma, logh=logh,
                     logh_grad_hess=lgh, affine=affine)

    sigma_inv = chol_solve(cholesky(sigma), np.eye(big_k))
    n_free_gamma = max(cl.c - 2, 0)

    def _interval_ratios(u):
        """phi(hi)/w and phi(lo)/w per row for a batch of u."""
        u = np.atleast_2d(u)
        shift = u @ cl.z_design.T
        hi = b_hi[None, :] - shift
        lo = b_lo[None, :] - shift
        logw = log_interval_prob(lo, hi)
        ph = np.where(np.isfinite(hi), std_normal_pdf(np.where(np.isfinite(hi), hi, 0.0)), 0.0)
        pl = np.where(np.isfinite(lo), std_normal_pdf(np.where(np.isfinite(lo), lo, 0.0)), 0.0)
        w = np.maximum(np.exp(logw), 1e-300)
        return ph / w, pl / w

    def score_batch(u):
        u = np.atleast_2d(u)
        rh, rl = _interval_ratios(u)
        # d/d eta of log interval = phi(lo)... eta enters both bounds with -1
        g_beta = (rl - rh) @ cl.x_design
        g_gamma = np.zeros((u.shape[0], n_free_gamma))
        for kcut in range(2, cl.c):   # free cutpoints gamma_2..gamma_{c-1}
            col = kcut - 2
            upper_rows = cl.y == kcut
            lower_rows = cl.y == kcut + 1
            if upper_rows.any():
                g_gamma[:, col] += rh[:, upper_rows].sum(axis=1)
            if lower_rows.any():
                g_gamma[:, col] -= rl[:, lower_rows].sum(axis=1)
        g_vech = _gaussian_score_sigma_vech(u, np.zeros(big_k), sigma_inv)
        return np.concatenate([g_beta, g_gamma, g_vech], axis=1)

    def cdf_param_gradient(value, d_lower, d_upper, d_mu, d_sigma):
        # CDF form (marginal_as_cdf, interval block): rect = (b_lo, b_hi],
        # mean = 0, cov = I + Z Sigma Z'; both bounds carry -X beta and the
        # cutpoints enter through the bin edges.
        d_bhi = d_upper
        d_blo = d_lower
        g_beta = -cl.x_design.T @ (d_bhi + d_blo)
        g_gamma = np.zeros(n_free_gamma)
        for i in range(n):
            kc = cl.y[i]
            if 2 <= kc <= cl.c - 1:
                g_gamma[kc - 2] += d_bhi[i]
            if 2 <= kc - 1 <= cl.c - 1:
                g_gamma[kc - 3] += d_blo[i]
        g_cov = cl.z_design.T @ d_sigma @ cl.z_design
        return np.concatenate([g_beta, g_gamma, sym_grad_to_vech(g_cov)]) / max(value, 1e-300)

    names = [f"beta{i}" for i in range(beta.size)] + \
        [f"gamma{k}" for k in range(2, cl.c)] + \
        [f"sigma[{i},{j}]" for i, j in _vech_indices(big_k)]
    return BuiltLikelihood("ordered", 0.0, skew, gwi, len(names), names,
                           score_batch, cdf_param_gradient)


# ---------------------------------------------------------------------------
# generalized survival model (probit link)


def build_gsm(cl: GsmCluster, beta, sigma) -> BuiltLikelihood:
    beta = np.asarray(beta, dtype=float)
    sigma = check_symmetric(sigma)
    big_k = cl.z_design.shape[1]
    obs, cen = cl.observed, cl.censored
    n_o, n_c = obs.size, cen.size

    s_sig = cholesky(sigma)
    sigma_inv = chol_solve(s_sig, np.eye(big_k))

    if n_o:
        x_o = np.atleast_2d(cl.x_of_t(cl.t[obs], obs))
        dx_o = np.atleast_2d(cl.dx_of_t(cl.t[obs], obs))
        z_o = cl.z_design[obs]
        slopes = dx_o @ beta
        if np.any(slopes <= 0):
            raise MonotonicityViolation(
                "survival must decrease at observed event times (needs x'(t)^T beta > 0)")
        log_c = float(np.sum(np.log(slopes)))
        eta_o = x_o @ beta
        h_mat = z_o.T @ z_o + sigma_inv
        s_h = cholesky(h_mat)
        h_vec = chol_solve(s_h, z_o.T @ (-eta_o))
        log_k = (log_c - 0.5 * n_o * np.log(2 * np.pi)
                 - 0.5 * (chol_logdet(s_sig) + chol_logdet(s_h))
                 - 0.5 * float(eta_o @ eta_o) + 0.5 * float(h_vec @ h_mat @ h_vec))
    else:
        x_o = dx_o = z_o = np.zeros((0, 0))
        eta_o = np.zeros(0)
        h_mat = sigma_inv
        s_h = cholesky(h_mat)
        h_vec = np.zeros(big_k)
        log_c = 0.0
        log_k = 0.0

    h_inv = chol_solve(s_h, np.eye(big_k))
    if n_c:
        x_c = np.atleast_2d(cl.x_of_t(cl.t[cen], cen))
        z_c = cl.z_design[cen]
        eta_c = x_c @ beta
        v2 = -eta_c - z_c @ h_vec
        skew = SkewParams(
            xi1=h_vec, xi2=np.zeros(n_c), xi11=h_inv,
            xi21=z_c @ h_inv, xi22=np.eye(n_c) + z_c @ h_inv @ z_c.T, v2=v2)
        ones = np.ones(n_c, dtype=int)
        logh, lgh = _binomial_integrand(ones, ones, -eta_c, -z_c)
        affine = AffineSpec(eta=-eta_c, zmat=-z_c, rebuild=_binomial_affine_rebuild)
    else:
        x_c = np.zeros((0, beta.size))
        z_c = np.zeros((0, big_k))
        eta_c = np.zeros(0)
        skew = SkewParams(xi1=h_vec, xi2=np.zeros(0), xi11=h_inv,
                          xi21=np.zeros((0, big_k)), xi22=np.zeros((0, 0)),
                          v2=np.zeros(0))
        logh = lambda u: np.zeros(np.atleast_2d(u).shape[0])  # noqa: E731
        lgh = lambda u: (0.0, np.zeros(big_k), np.zeros((big_k, big_k)))  # noqa: E731
        affine = None
    gwi = GwiProblem(xi1=h_vec, xi11=h_inv, logh=logh, logh_grad_hess=lgh,
                     affine=affine)

    dh_dbeta = -h_inv @ (z_o.T @ x_o) if n_o else np.zeros((big_k, beta.size))

    def score_batch(u):
        u = np.atleast_2d(u)
        nu = u.shape[0]
        # beta score: log k part + Gaussian-weight part + integrand part
        g_beta = np.zeros((nu, beta.size))
        if n_o:
            const = ((dx_o / slopes[:, None]).sum(axis=0)
                     - x_o.T @ eta_o - x_o.T @ (z_o @ h_vec))
            g_beta += const[None, :]
            g_beta += -(u - h_vec) @ (z_o.T @ x_o)
        if n_c:
            a = -eta_c[None, :] - u @ z_c.T
            g_beta += -(mills_ratio_inv(a) @ x_c)
        # sigma score: the two dlogdet H pieces (log k and log phi) cancel
        resid = u - h_vec
        w1 = resid @ sigma_inv
        sih = sigma_inv @ h_vec
        const = -0.5 * sigma_inv + 0.5 * np.outer(sih, sih)
        gs = const[None, :, :] \
            + 0.5 * w1[:, :, None] * w1[:, None, :] \
            + 0.5 * (w1[:, :, None] * sih[None, None, :]
                     + sih[None, :, None] * w1[:, None, :])
        return np.concatenate([g_beta, batch_sym_to_vech(gs)], axis=1)

    def cdf_param_gradient(value, d_lower, d_upper, d_mu, d_sigma):
        # log L = log k + log P; mean = eta_c + z_c h, cov = I + z_c H^-1 z_c'
        val = max(value, 1e-300)
        g_beta = np.zeros(beta.size)
        if n_o:
            g_beta += ((dx_o / slopes[:, None]).sum(axis=0)
                       - x_o.T @ eta_o - x_o.T @ (z_o @ h_vec)) * val
        if n_c:
            g_beta += (x_c + z_c @ dh_dbeta).T @ d_mu
        g_cov_full = np.zeros((big_k, big_k))
        if n_c:
            # mean term through h(Sigma)
            bvec = sigma_inv @ h_inv @ (z_c.T @ d_mu)
            avec = sigma_inv @ h_vec
            g_cov_full += 0.5 * (np.outer(bvec, avec) + np.outer(avec, bvec))
            # covariance term through H^-1
            m = h_inv @ sigma_inv
            inner = z_c @ m
            g_cov_full += inner.T @ d_sigma @ inner
        # log k terms (scaled by value since we return d P-ish units)
        g_logk = (-0.5 * sigma_inv + 0.5 * sigma_inv @ h_inv @ sigma_inv
                  + 0.5 * np.outer(sigma_inv @ h_vec, sigma_inv @ h_vec))
        g_cov_full += g_logk * val
        return np.concatenate([g_beta, sym_grad_to_vech(g_cov_full)]) / val

    names = [f"beta{i}" for i in range(beta.size)] + \
        [f"sigma[{i},{j}]" for i, j in _vech_indices(big_k)]
    return BuiltLikelihood("gsm", log_k, skew, gwi, len(names), names,
                           score_batch, cdf_param_gradient)


# ---------------------------------------------------------------------------
# default time designs for the survival family


def ispline_basis(knot_times, degree: int = 2, with_intercept: bool = True):
    """Monotone I-spline basis evaluators (basis, d/dt basis).

    Each basis function is the running integral of a nonnegative M-spline,
    so any nonnegative coefficient vector keeps x(t)^T beta increasing.
    """
    from scipy.interpolate import BSpline

    knot_times = np.asarray(knot_times, dtype=float)
    lo, hi = float(knot_times.min()), float(knot_times.max())
    interior = np.quantile(knot_times, [0.33, 0.67]) if knot_times.size > 2 else []
    kv = np.concatenate([[lo] * (degree + 1), interior, [hi] * (degree + 1)])
    n_basis = kv.size - degree - 1
    splines = [BSpline.basis_element(kv[j:j + degree + 2], extrapolate=False)
               for j in range(n_basis)]
    integrals = [sp.antiderivative() for sp in splines]

    def _eval(fns, ts, fill):
        ts = np.clip(np.asarray(ts, dtype=float), lo, hi)
        out = np.column_stack([np.nan_to_num(f(ts), nan=fill) for f in fns])
        return out

    def basis(ts, rows=None):
        vals = _eval(integrals, ts, 0.0)
        # integral of a basis element saturates at its total mass past hi
        ts_arr = np.asarray(ts, dtype=float)
        for j, (sp, ig) in enumerate(zip(splines, integrals)):
            total = float(ig(kv[j + degree + 1] - 1e-12))
            vals[ts_arr >= kv[j + degree + 1], j] = total
        if with_intercept:
            vals = np.column_stack([vals, np.ones(vals.shape[0])])
        return vals

    def dbasis(ts, rows=None):
        vals = _eval(splines, ts, 0.0)
        if with_intercept:
            vals = np.column_stack([vals, np.zeros(vals.shape[0])])
        return vals

    return basis, dbasis


def time_design(basis, dbasis, covariates: np.ndarray | None = None):
    """Combine a time basis with per-individual covariate columns."""
    def x_of_t(ts, rows):
        b = basis(ts, rows)
        if covariates is None:
            return b
        return np.column_stack([b, covariates[rows]])

    def dx_of_t(ts, rows):
        db = dbasis(ts, rows)
        if covariates is None:
            return db
        return np.column_stack([db, np.zeros((db.shape[0], covariates.shape[1]))])

    return x_of_t, dx_of_t


# ---------------------------------------------------------------------------
# log-likelihood and gradient through either representation


def loglik_cdf(built: BuiltLikelihood, opts: CdfOptions | None = None):
    """Cluster log marginal likelihood via the CDF representation."""
    from .mvn import mvn_interval

    if built.skew.k2 == 0:
        return built.log_c, ApproxResult(1.0, 0.0, 0, 0.0, "Exact")
    rect, mean, cov = built.cdf_form()
    res = mvn_interval(rect, mean, cov, opts)
    return built.log_c + res.log_estimate, res


def loglik_gradient(built: BuiltLikelihood, engine: str = "cdf",
                    opts=None):
    """(log L, gradient, se) with the gradient sharing the value's points.

    engine "cdf" chains exact estimator derivatives through the skew-normal
    mapping; "importance", "spherical_radial", and "rqmc" use the
    posterior-weighted complete-data score (Fisher identity).
    """
    if engine == "cdf":
        copts = opts or CdfOptions(abs_tol=0.0, rel_tol=1e-4, seed=0)
        if built.skew.k2 == 0:
            # no integral left: the chain rule reduces to the analytic
            # prefactor's gradient (zero-size CDF sensitivities)
            grad = built.cdf_param_gradient(1.0, np.zeros(0), np.zeros(0),
                                            np.zeros(0), np.zeros((0, 0)))
            return built.log_c, grad, 0.0
        rect, mean, cov = marginal_as_cdf(built.skew)
        res, d_lo, d_up, d_mu, d_sig = mvn_grad_general(rect, mean, cov, copts)
        grad = built.cdf_param_gradient(res.estimate, d_lo, d_up, d_mu, d_sig)
        return built.log_c + res.log_estimate, grad, res.rel_std_error
    mopts = opts or McOptions(rel_tol=1e-4, seed=0)
    engines = {"importance": importance_sample, "spherical_radial": spherical_radial,
               "rqmc": rqmc}
    if engine not in engines:
        raise ValueError(f"unknown gradient engine '{engine}'")
    res, score_mean = engines[engine](built.gwi, mopts, score=built.score_batch)
    return built.log_c + res.log_estimate, score_mean, res.rel_std_error
