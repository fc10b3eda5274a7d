"""Approximation engines for Gaussian-weighted integrals L = int phi(u) h(u) du.

A problem bundles the Gaussian weight (mean xi1, covariance xi11) with a
log-integrand evaluator. Engines accumulate in the log domain with a running
max shift so long products of normal CDFs cannot underflow, and every
stochastic engine applies the same stopping rule: stop once
error_multiplier * SE <= max(abs_tol, rel_tol * |estimate|).

Engines returning plain floats (laplace, ghq, aghq) return the log of the
integral; stochastic engines return an ApproxResult carrying both scales.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats as sps
from scipy.linalg import eigh_tridiagonal, solve_triangular

from .errors import NodeBudgetExceeded, NotApplicable
from .mvn import ApproxResult
from .numeric import (
    cholesky,
    chol_logdet,
    chol_solve,
    jitter_spd,
    quasi_newton_minimize,
    std_normal_quantile,
    sym_eigen,
)
from .sequences import SobolGenerator, antithetic_expand

__all__ = [
    "GwiProblem",
    "AffineSpec",
    "ModeResult",
    "McOptions",
    "find_mode",
    "laplace",
    "importance_sample",
    "spherical_radial",
    "rqmc",
    "ghq_rule",
    "ghq",
    "aghq",
    "reduce_gwi_dimension",
]

NODE_BUDGET = 10_000_000


@dataclass(frozen=True)
class AffineSpec:
    """Affine structure h(u) = H(eta + zmat @ u) enabling the dimension
    reduction to k2 < K: the weight is pushed through zmat and the integrand
    is rebuilt with an identity design."""

    eta: np.ndarray              # (k2,) upper offsets
    zmat: np.ndarray             # (k2, K)
    rebuild: Callable            # (eta, lower_eta, zmat) -> (logh, logh_grad_hess)
    lower_eta: np.ndarray | None = None  # (k2,) for interval integrands


@dataclass
class GwiProblem:
    """K-dimensional Gaussian weight plus an integrand h with h(u) in (0, 1].

    logh evaluates a batch (n, K) -> (n,) of log h values;
    logh_grad_hess evaluates one point -> (log h, grad, hessian).
    """

    xi1: np.ndarray
    xi11: np.ndarray
    logh: Callable[[np.ndarray], np.ndarray]
    logh_grad_hess: Callable[[np.ndarray], tuple]
    affine: AffineSpec | None = None

    def __post_init__(self):
        self.xi1 = np.asarray(self.xi1, dtype=float)
        self.xi11 = np.asarray(self.xi11, dtype=float)
        self._chol = cholesky(self.xi11)

    @property
    def k1(self) -> int:
        return self.xi1.size

    @property
    def chol11(self) -> np.ndarray:
        return self._chol

    def log_weight(self, u: np.ndarray) -> np.ndarray:
        """log phi(u; xi1, xi11) for a batch (n, K)."""
        u = np.atleast_2d(u)
        z = solve_triangular(self._chol, (u - self.xi1).T, lower=True)
        return (-0.5 * np.sum(z * z, axis=0)
                - 0.5 * self.k1 * np.log(2 * np.pi) - 0.5 * chol_logdet(self._chol))

    def log_g(self, u: np.ndarray) -> np.ndarray:
        return self.log_weight(u) + self.logh(np.atleast_2d(u))


@dataclass
class ModeResult:
    u_hat: np.ndarray
    neg_hessian: np.ndarray      # -H, positive definite (jittered if needed)
    log_g_at_mode: float
    converged: bool = True

    def __post_init__(self):
        self._chol_neg_h = jitter_spd(self.neg_hessian)

    @property
    def chol_neg_hessian(self) -> np.ndarray:
        return self._chol_neg_h

    def cov(self) -> np.ndarray:
        """(-H)^-1, the curvature-matched proposal covariance."""
        return chol_solve(self._chol_neg_h, np.eye(self.u_hat.size))


@dataclass
class McOptions:
    rel_tol: float = 1e-3
    abs_tol: float = 0.0
    max_samples: int = 1_000_000
    batch_size: int = 2_048
    n_replicates: int = 10       # scrambled Sobol replicates for rqmc
    seed: int | None = None
    error_multiplier: float = 3.5
    adaptive: bool = True
    n_rotations: int = 1         # spherical-radial rotations per sample


def find_mode(p: GwiProblem, tol: float = 1e-8, start: np.ndarray | None = None) -> ModeResult:
    """Stationary point of log g = log phi + log h, started at xi1.

    Newton with step halving (the integrands are log-concave, so this almost
    always converges in a few iterations); falls back to BFGS if the Newton
    path stalls.
    """
    s1 = p.chol11
    xi11_inv = chol_solve(s1, np.eye(p.k1))

    def pieces(u):
        lh, gh, hh = p.logh_grad_hess(u)
        z = xi11_inv @ (u - p.xi1)
        val = float(-0.5 * (u - p.xi1) @ z - 0.5 * p.k1 * np.log(2 * np.pi)
                    - 0.5 * chol_logdet(s1)) + lh
        return val, gh - z, hh

    u = p.xi1.copy() if start is None else np.asarray(start, dtype=float).copy()
    val, grad, hh = pieces(u)
    converged = False
    for _ in range(60):
        if np.max(np.abs(grad)) <= tol:
            converged = True
            break
        neg_h = xi11_inv - hh
        try:
            step = chol_solve(jitter_spd(neg_h), grad)
        except Exception:
            break
        scale = 1.0
        for _ in range(25):
            cand = u + scale * step
            v2, g2, h2 = pieces(cand)
            if v2 >= val - 1e-12 * max(1.0, abs(val)):
                u, val, grad, hh = cand, v2, g2, h2
                break
            scale *= 0.5
        else:
            break
    if not converged and np.max(np.abs(grad)) > tol:
        def neg_log_g(uu):
            v, g, _ = pieces(uu)
            return -v, -g

        res = quasi_newton_minimize(neg_log_g, u, tol=tol)
        u = res.x
        val, grad, hh = pieces(u)
        converged = res.status == "Converged"
    else:
        converged = True
    neg_h = xi11_inv - hh
    return ModeResult(u_hat=u, neg_hessian=neg_h, log_g_at_mode=float(val),
                      converged=converged)


def laplace(p: GwiProblem, mode: ModeResult | None = None) -> float:
    """Laplace approximation of log L = (K/2) log 2pi - 0.5 log|-H| + log g(u_hat)."""
    mode = mode or find_mode(p)
    return (0.5 * p.k1 * np.log(2 * np.pi)
            - 0.5 * chol_logdet(mode.chol_neg_hessian)
            + mode.log_g_at_mode)


class _LogMeanAccumulator:
    """Streaming mean/SE of exp(log values) under one running max shift."""

    def __init__(self):
        self.shift = -np.inf
        self.n = 0
        self.s1 = 0.0
        self.s2 = 0.0

    def add_log(self, log_vals: np.ndarray):
        self.add_scaled(log_vals, None)

    def add_scaled(self, log_vals, signs):
        log_vals = np.asarray(log_vals, dtype=float)
        m = float(np.max(log_vals)) if log_vals.size else -np.inf
        if m > self.shift:
            if np.isfinite(self.shift):
                c = np.exp(self.shift - m)
                self.s1 *= c
                self.s2 *= c * c
            self.shift = m
        v = np.exp(log_vals - self.shift)
        if signs is not None:
            v = v * signs
        self.n += v.size
        self.s1 += float(np.sum(v))
        self.s2 += float(np.sum(v * v))

    def add_values(self, vals: np.ndarray, log_scale: float):
        """Add already-linear values recorded at a given log scale."""
        if log_scale > self.shift:
            if np.isfinite(self.shift):
                c = np.exp(self.shift - log_scale)
                self.s1 *= c
                self.s2 *= c * c
            self.shift = log_scale
        v = np.asarray(vals, dtype=float) * np.exp(log_scale - self.shift)
        self.n += v.size
        self.s1 += float(np.sum(v))
        self.s2 += float(np.sum(v * v))

    def summary(self):
        """(estimate, se, log_estimate) in natural scale."""
        mean = self.s1 / self.n
        var = max(self.s2 / self.n - mean * mean, 0.0) / max(self.n - 1, 1)
        scale = np.exp(self.shift)
        log_est = self.shift + np.log(mean) if mean > 0 else -np.inf
        return mean * scale, np.sqrt(var) * scale, log_est


def _result(acc: _LogMeanAccumulator, n_evals, t0, status) -> ApproxResult:
    est, se, log_est = acc.summary()
    return ApproxResult(est, se, n_evals, time.perf_counter() - t0, status,
                        log_estimate=log_est)


def importance_sample(p: GwiProblem, opts: McOptions | None = None,
                      mode: ModeResult | None = None, score=None):
    """Importance sampler with location/scale balanced antithetic variables.

    Adaptive mode draws from N(u_hat, (-H)^-1); the plain variant draws from
    the Gaussian weight itself. Each draw is expanded to four antithetic
    points, and the four-point average is the variance unit. When `score` is
    given (batch (n,K) -> (n,P) complete-data scores), the self-normalized
    posterior mean of the score is returned alongside.
    """
    opts = opts or McOptions()
    t0 = time.perf_counter()
    k = p.k1
    if opts.adaptive:
        mode = mode or find_mode(p)
        center, cov_chol = mode.u_hat, cholesky(mode.cov())
    else:
        center, cov_chol = p.xi1, p.chol11
    log_det_term = 0.5 * chol_logdet(cov_chol)
    rng = np.random.default_rng(opts.seed)
    acc = _LogMeanAccumulator()
    score_num = None
    score_acc_shift = -np.inf
    n_evals = 0
    status = "MaxSamples"
    while True:
        b = min(opts.batch_size, max((opts.max_samples - n_evals) // 4, 1))
        x = rng.standard_normal((b, k))
        r2 = np.einsum("ij,ij->i", x, x)
        cdf = sps.chi2.cdf(r2, df=k)
        target = np.where(cdf <= 0.5, sps.chi2.isf(np.clip(cdf, 1e-300, 1), df=k),
                          sps.chi2.ppf(sps.chi2.sf(r2, df=k), df=k))
        s = np.sqrt(np.maximum(target, 0.0) / r2)
        x4 = np.concatenate([x, -x, s[:, None] * x, -s[:, None] * x], axis=0)
        u = center + x4 @ cov_chol.T
        # log ratio: log g(u) - log proposal(u)
        q2 = np.concatenate([r2, r2, s * s * r2, s * s * r2])
        log_prop = -0.5 * q2 - 0.5 * k * np.log(2 * np.pi) - log_det_term
        log_ratio = p.log_g(u) - log_prop
        # four-point averages as units
        lr = log_ratio.reshape(4, b)
        m = lr.max(axis=0)
        unit_log = m + np.log(np.mean(np.exp(lr - m[None, :]), axis=0))
        acc.add_log(unit_log)
        if score is not None:
            sc = score(u)
            mloc = float(np.max(log_ratio))
            wgt = np.exp(log_ratio - mloc)
            chunk = wgt @ sc
            if score_num is None:
                score_num, score_den, score_acc_shift = chunk, float(np.sum(wgt)), mloc
            else:
                c = np.exp(min(score_acc_shift - mloc, 0.0))
                c2 = np.exp(min(mloc - score_acc_shift, 0.0))
                score_num = score_num * c + chunk * c2
                score_den = score_den * c + float(np.sum(wgt)) * c2
                score_acc_shift = max(score_acc_shift, mloc)
        n_evals += 4 * b
        est, se, _ = acc.summary()
        if est > 0 and opts.error_multiplier * se <= max(opts.abs_tol, opts.rel_tol * abs(est)):
            status = "Converged"
            break
        if n_evals >= opts.max_samples:
            break
    res = _result(acc, n_evals, t0, status)
    if score is not None:
        return res, score_num / score_den
    return res


# ---------------------------------------------------------------------------
# stochastic spherical-radial rule, degree 5


def _haar_orthogonal(k: int, rng) -> np.ndarray:
    """Haar-distributed orthogonal matrix via Householder QR (LAPACK geqrf
    uses the numerically stable reflector construction)."""
    a = rng.standard_normal((k, k))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))[None, :]


def _sph_points_weights(k: int):
    """Degree-5 spherical rule on S^{k-1}: points +-e_i with weight
    (4-k)/(2k(k+2)) and (+-e_i +- e_j)/sqrt(2) with weight 1/(k(k+2))."""
    pts = [np.eye(k), -np.eye(k)]
    w1 = (4.0 - k) / (2.0 * k * (k + 2.0))
    w2 = 1.0 / (k * (k + 2.0))
    cross = []
    for i in range(k):
        for j in range(i + 1, k):
            for si in (1.0, -1.0):
                for sj in (1.0, -1.0):
                    v = np.zeros(k)
                    v[i], v[j] = si / np.sqrt(2.0), sj / np.sqrt(2.0)
                    cross.append(v)
    pts = np.concatenate([np.concatenate(pts, axis=0), np.array(cross).reshape(-1, k)])
    wts = np.concatenate([np.full(2 * k, w1), np.full(2 * k * (k - 1), w2)])
    return pts, wts


def spherical_radial(p: GwiProblem, opts: McOptions | None = None,
                     mode: ModeResult | None = None, score=None):
    """Unbiased stochastic spherical-radial rule, exact per realization for
    polynomials of total degree <= 5.

    Radial part: with t = r^2 and chi-square-K moments M0=1, M1=K,
    M2=K(K+2), the interpolatory weights at nodes {0, K+2, 2(K+2)} have
    expectations {2/(K+2), K/(K+2), 0}; the estimator is
        R = 2/(K+2) f(0) + K/(K+2) F(K+2) + F(rho^2) - L(rho^2),
    rho^2 ~ chi2_K, where F(t) is the rotated degree-5 spherical rule at
    radius sqrt(t) and L the quadratic interpolant of F at the three nodes.
    For degree <= 5 integrands F is quadratic in t, so R is exact; for
    general integrands E[F(rho^2)] = L-term expectations cancel, giving an
    unbiased estimator.
    """
    opts = opts or McOptions()
    t0 = time.perf_counter()
    k = p.k1
    if opts.adaptive:
        mode = mode or find_mode(p)
        center, cov_chol = mode.u_hat, cholesky(mode.cov())
    else:
        center, cov_chol = p.xi1, p.chol11
    log_det = 0.5 * chol_logdet(cov_chol)
    rng = np.random.default_rng(opts.seed)
    sph, sph_w = _sph_points_weights(k)
    n_sph = sph.shape[0]
    t1, t2 = k + 2.0, 2.0 * (k + 2.0)
    w0_det, w1_det = 2.0 / (k + 2.0), k / (k + 2.0)

    acc = _LogMeanAccumulator()
    score_num, score_den, score_shift = None, 0.0, -np.inf
    n_evals = 0
    status = "MaxSamples"
    evals_per_sample = (3 * n_sph + 1) * opts.n_rotations

    def log_f(x):
        """log of g(center + C x) / phi(x; 0, I)."""
        u = center + x @ cov_chol.T
        return (p.log_g(u) + 0.5 * np.einsum("ij,ij->i", x, x)
                + 0.5 * k * np.log(2 * np.pi) + log_det)

    while True:
        b = max(min(opts.batch_size // max(evals_per_sample, 1), 512), 1)
        rho2 = rng.chisquare(df=k, size=(b, opts.n_rotations))
        samples = np.empty(b)
        all_logs = []
        layout = []
        for ib in range(b):
            for rot in range(opts.n_rotations):
                q = _haar_orthogonal(k, rng)
                dirs = sph @ q.T
                radii = np.sqrt([t1, t2, rho2[ib, rot]])
                xs = np.concatenate([r * dirs for r in radii] + [np.zeros((1, k))])
                all_logs.append(xs)
                layout.append((ib, rot))
        big = np.concatenate(all_logs)
        lf = log_f(big)
        shift = float(np.max(lf))
        vals = np.exp(lf - shift)
        per = 3 * n_sph + 1
        r_scaled = np.zeros(b)
        for idx, (ib, rot) in enumerate(layout):
            v = vals[idx * per:(idx + 1) * per]
            f1 = float(sph_w @ v[:n_sph])
            f2 = float(sph_w @ v[n_sph:2 * n_sph])
            fr = float(sph_w @ v[2 * n_sph:3 * n_sph])
            f0 = float(v[-1])
            tr = rho2[ib, rot]
            l0 = (tr - t1) * (tr - t2) / (t1 * t2)
            l1 = tr * (tr - t2) / (t1 * (t1 - t2))
            l2 = tr * (tr - t1) / (t2 * (t2 - t1))
            interp = f0 * l0 + f1 * l1 + f2 * l2
            r_scaled[ib] += (w0_det * f0 + w1_det * f1 + fr - interp) / opts.n_rotations
        acc.add_values(r_scaled, shift)
        if score is not None:
            sc = score(center + big @ cov_chol.T)
            # posterior-weighted score: weights are the rule coefficients times f
            coeffs = np.zeros(big.shape[0])
            for idx, (ib, rot) in enumerate(layout):
                base = idx * per
                tr = rho2[ib, rot]
                l0 = (tr - t1) * (tr - t2) / (t1 * t2)
                l1 = tr * (tr - t2) / (t1 * (t1 - t2))
                l2 = tr * (tr - t1) / (t2 * (t2 - t1))
                coeffs[base:base + n_sph] = (w1_det - l1) * sph_w
                coeffs[base + n_sph:base + 2 * n_sph] = -l2 * sph_w
                coeffs[base + 2 * n_sph:base + 3 * n_sph] = sph_w
                coeffs[base + 3 * n_sph] = w0_det - l0
            wgt = coeffs * vals
            chunk = wgt @ sc
            if score_num is None:
                score_num, score_den, score_shift = chunk, float(np.sum(wgt)), shift
            else:
                c = np.exp(min(score_shift - shift, 0.0))
                c2 = np.exp(min(shift - score_shift, 0.0))
                score_num = score_num * c + chunk * c2
                score_den = score_den * c + float(np.sum(wgt)) * c2
                score_shift = max(score_shift, shift)
        n_evals += big.shape[0]
        est, se, _ = acc.summary()
        if acc.n >= 2 and est > 0 and \
                opts.error_multiplier * se <= max(opts.abs_tol, opts.rel_tol * abs(est)):
            status = "Converged"
            break
        if n_evals >= opts.max_samples:
            break
    res = _result(acc, n_evals, t0, status)
    if score is not None:
        return res, score_num / score_den
    return res


# ---------------------------------------------------------------------------
# randomized quasi-Monte Carlo with scrambled Sobol sequences


def rqmc(p: GwiProblem, opts: McOptions | None = None,
         mode: ModeResult | None = None, score=None):
    """Adaptive RQMC: 10 independently scrambled Sobol replicates, points
    mapped by the elementwise normal quantile and then by Q Lambda^(1/2)
    from the eigendecomposition of the proposal covariance, largest
    eigenvalues on the leading Sobol dimensions."""
    opts = opts or McOptions()
    t0 = time.perf_counter()
    k = p.k1
    if opts.adaptive:
        mode = mode or find_mode(p)
        center = mode.u_hat
        eig = sym_eigen(mode.cov())
    else:
        center = p.xi1
        eig = sym_eigen(p.xi11)
    lam = np.maximum(eig.lam, 1e-300)
    transform = eig.q * np.sqrt(lam)[None, :]
    log_det = 0.5 * float(np.sum(np.log(lam)))
    seed_seq = np.random.SeedSequence(opts.seed if opts.seed is not None else 0)
    rep_seeds = [int(s.generate_state(1)[0] >> 1) for s in seed_seq.spawn(opts.n_replicates)]

    n = 64
    n_evals = 0
    status = "MaxSamples"
    while True:
        rep_means = np.empty(opts.n_replicates)
        rep_logs = np.empty(opts.n_replicates)
        shift = -np.inf
        rep_score = None
        rep_wsum = 0.0
        all_vals = []
        for rep in range(opts.n_replicates):
            pts = SobolGenerator(k, scramble_seed=rep_seeds[rep] + 7919 * n).take(n)
            x = std_normal_quantile(np.clip(pts, 1e-15, 1 - 1e-15))
            u = center + x @ transform.T
            log_ratio = (p.log_g(u) + 0.5 * np.einsum("ij,ij->i", x, x)
                         + 0.5 * k * np.log(2 * np.pi) + log_det)
            m = float(np.max(log_ratio))
            shift = max(shift, m)
            all_vals.append((m, log_ratio, u))
        for rep, (m, log_ratio, u) in enumerate(all_vals):
            v = np.exp(log_ratio - shift)
            rep_means[rep] = float(np.mean(v))
            rep_logs[rep] = m
            if score is not None:
                sc = score(u)
                w = v
                if rep_score is None:
                    rep_score = w @ sc
                else:
                    rep_score += w @ sc
                rep_wsum += float(np.sum(w))
        n_evals += opts.n_replicates * n
        est_s = float(np.mean(rep_means))
        se_s = float(np.std(rep_means, ddof=1) / np.sqrt(opts.n_replicates))
        est = est_s * np.exp(shift)
        se = se_s * np.exp(shift)
        if est_s > 0 and opts.error_multiplier * se <= max(opts.abs_tol, opts.rel_tol * abs(est)):
            status = "Converged"
            break
        if n_evals + opts.n_replicates * 2 * n > opts.max_samples:
            break
        n *= 2
    log_est = shift + np.log(est_s) if est_s > 0 else -np.inf
    res = ApproxResult(est, se, n_evals, time.perf_counter() - t0, status,
                       log_estimate=float(log_est))
    if score is not None:
        return res, rep_score / rep_wsum
    return res


# ---------------------------------------------------------------------------
# Gauss-Hermite quadrature (probabilists' weight)


_GHQ_CACHE: dict[int, tuple] = {}


def ghq_rule(b: int):
    """Nodes and weights integrating int phi(x) f(x) dx exactly for
    polynomials up to degree 2b-1 (Golub-Welsch on the Jacobi matrix)."""
    if not 1 <= b <= 60:
        raise ValueError("node count must be in [1, 60]")
    if b in _GHQ_CACHE:
        return _GHQ_CACHE[b]
    if b == 1:
        rule = (np.zeros(1), np.ones(1))
    else:
        off = np.sqrt(np.arange(1, b, dtype=float))
        lam, vec = eigh_tridiagonal(np.zeros(b), off)
        rule = (lam, vec[0, :] ** 2)
    _GHQ_CACHE[b] = rule
    return rule


def _tensor_chunks(b: int, k: int, chunk: int = 8192):
    """Yield grid index arrays (m, k) in odometer order (last dim fastest)."""
    total = b ** k
    radices = b ** np.arange(k - 1, -1, -1, dtype=np.int64)
    start = 0
    while start < total:
        idx = np.arange(start, min(start + chunk, total), dtype=np.int64)
        yield (idx[:, None] // radices[None, :]) % b
        start += chunk


def ghq(p: GwiProblem, b: int) -> float:
    """Tensor-product GHQ centered at the Gaussian weight; returns log L."""
    k = p.k1
    if b ** k > NODE_BUDGET:
        raise NodeBudgetExceeded(f"{b}^{k} nodes exceed the budget of {NODE_BUDGET}")
    nodes, weights = ghq_rule(b)
    logw = np.log(weights)
    c = p.chol11
    best = -np.inf
    acc = 0.0
    for grid in _tensor_chunks(b, k):
        x = nodes[grid]
        u = p.xi1 + x @ c.T
        terms = logw[grid].sum(axis=1) + p.logh(u)
        m = float(np.max(terms))
        if m > best:
            acc *= np.exp(best - m) if np.isfinite(best) else 0.0
            best = m
        acc += float(np.sum(np.exp(terms - best)))
    return best + np.log(acc)


def aghq(p: GwiProblem, b: int, mode: ModeResult | None = None) -> float:
    """Adaptive GHQ centered at the mode with curvature scaling; returns log L."""
    k = p.k1
    if b ** k > NODE_BUDGET:
        raise NodeBudgetExceeded(f"{b}^{k} nodes exceed the budget of {NODE_BUDGET}")
    mode = mode or find_mode(p)
    nodes, weights = ghq_rule(b)
    logw = np.log(weights)
    c = cholesky(mode.cov())
    log_det = 0.5 * chol_logdet(c)
    best = -np.inf
    acc = 0.0
    for grid in _tensor_chunks(b, k):
        x = nodes[grid]
        u = mode.u_hat + x @ c.T
        terms = (logw[grid].sum(axis=1) + p.log_g(u) + log_det
                 + 0.5 * np.einsum("ij,ij->i", x, x) + 0.5 * k * np.log(2 * np.pi))
        m = float(np.max(terms))
        if m > best:
            acc *= np.exp(best - m) if np.isfinite(best) else 0.0
            best = m
        acc += float(np.sum(np.exp(terms - best)))
    return best + np.log(acc)


def reduce_gwi_dimension(p: GwiProblem) -> GwiProblem:
    """Rewrite a problem with affine integrand structure as the equivalent
    k2-dimensional problem when k2 < K (weight mean Z mu, covariance
    Z Sigma Z^T, identity design)."""
    if p.affine is None:
        raise NotApplicable("problem does not expose affine integrand structure")
    z = p.affine.zmat
    k2, big_k = z.shape
    if k2 >= big_k:
        raise NotApplicable(f"k2={k2} is not below K={big_k}")
    new_mean = z @ p.xi1
    new_cov = z @ p.xi11 @ z.T
    new_cov = 0.5 * (new_cov + new_cov.T)
    eye = np.eye(k2)
    logh, lgh = p.affine.rebuild(p.affine.eta, p.affine.lower_eta, eye)
    new_affine = AffineSpec(eta=p.affine.eta, zmat=eye, rebuild=p.affine.rebuild,
                            lower_eta=p.affine.lower_eta)
    # reduced covariance can inherit near-singularity from Z; jitter once
    try:
        cholesky(new_cov)
    except Exception:
        bump = 1e-10 * max(np.trace(new_cov) / k2, 1.0)
        new_cov = new_cov + bump * eye
    return GwiProblem(xi1=new_mean, xi11=new_cov, logh=logh,
                      logh_grad_hess=lgh, affine=new_affine)
