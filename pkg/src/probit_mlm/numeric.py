"""Scalar normal functions, dense symmetric linear algebra, and a BFGS minimizer.

Everything here is a pure function of its inputs; returned arrays are fresh
and safe to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import special

from .errors import NoConvergence, NotPositiveDefinite

__all__ = [
    "std_normal_cdf",
    "std_normal_logcdf",
    "std_normal_pdf",
    "std_normal_logpdf",
    "std_normal_quantile",
    "mills_ratio_inv",
    "log_interval_prob",
    "cholesky",
    "sym_eigen",
    "chol_solve",
    "chol_logdet",
    "mvn_logpdf",
    "jitter_spd",
    "EigenDecomp",
    "MinimizeResult",
    "quasi_newton_minimize",
    "logsumexp_stream",
]

# Jitter added once to a near-singular covariance before giving up.
JITTER_SCALE = 1e-10


# 1/sqrt(2) in double-double; the low word recovers what rounding x/sqrt(2)
# loses, which otherwise costs ~x^2/2 * eps relative error in the tail
_RSQRT2_HI = 0.7071067811865476
_RSQRT2_LO = -7.559915563789515e-17
_TWO_OVER_SQRT_PI = 1.1283791670955126
_SPLITTER = 134217729.0  # 2^27 + 1


def _dekker_split(a):
    c = _SPLITTER * a
    hi = c - (c - a)
    return hi, a - hi


def _phi_tail(ax):
    """Phi(-ax) for ax > 0 via erfcx with compensated argument rounding."""
    ahi, alo = _dekker_split(ax)
    y = ax * _RSQRT2_HI
    bhi, blo = _dekker_split(_RSQRT2_HI)
    perr = ((ahi * bhi - y) + ahi * blo + alo * bhi) + alo * blo
    y_lo = perr + ax * _RSQRT2_LO
    s = y * y
    yhh, yhl = _dekker_split(y)
    e = ((yhh * yhh - s) + 2 * yhh * yhl) + yhl * yhl
    fx = special.erfcx(y)
    f = fx + y_lo * (2 * y * fx - _TWO_OVER_SQRT_PI)
    with np.errstate(under="ignore"):
        return 0.5 * f * np.exp(-s) * (1.0 - e - 2.0 * y * y_lo)


def std_normal_cdf(x):
    """Standard normal CDF; accepts scalars or arrays, handles +-inf.

    Relative error stays below 1e-14 across the tails. Plain erfc(x/sqrt(2))
    loses ~x^2/2 ulps to argument rounding, which passes 1e-14 around x=-7,
    so only the rare deep left tail takes the compensated branch.
    """
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = special.ndtr(x)
    if np.min(x, initial=0.0) < -5.0:
        lo = (x < -5.0) & np.isfinite(x)
        if lo.any():
            out[lo] = _phi_tail(-x[lo])
    return float(out[0]) if scalar else out


def std_normal_logcdf(x):
    """log Phi(x), accurate far into the left tail."""
    return special.log_ndtr(x)


def std_normal_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


def std_normal_logpdf(x):
    x = np.asarray(x, dtype=float)
    return -0.5 * x * x - 0.5 * np.log(2.0 * np.pi)


def std_normal_quantile(p):
    """Inverse standard normal CDF; p=0 and p=1 map to -inf/+inf."""
    return special.ndtri(p)


def mills_ratio_inv(x):
    """phi(x)/Phi(x), computed in the log domain so the left tail is stable."""
    x = np.asarray(x, dtype=float)
    return np.exp(std_normal_logpdf(x) - special.log_ndtr(x))


def log_interval_prob(lo, hi):
    """log(Phi(hi) - Phi(lo)) for lo < hi, stable when both are in one tail.

    Works on arrays; -inf/+inf bounds are allowed. Returns -inf for
    degenerate (zero-width) intervals.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    # Reflect so the interval sits in the lower half where log_ndtr is sharp:
    # P(lo < X <= hi) = P(-hi <= X < -lo).
    flip = (lo + hi) > 0
    lo_, hi_ = np.where(flip, -hi, lo), np.where(flip, -lo, hi)
    la, lb = special.log_ndtr(hi_), special.log_ndtr(lo_)
    with np.errstate(invalid="ignore"):
        out = la + np.log1p(-np.exp(np.minimum(lb - la, 0.0)))
    return np.where(lb == -np.inf, la, out)


# ---------------------------------------------------------------------------
# dense symmetric linear algebra


def check_symmetric(a: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    scale = max(np.abs(a).max(), 1.0)
    if np.abs(a - a.T).max() > rtol * scale:
        raise ValueError("matrix is not symmetric")
    return 0.5 * (a + a.T)


def cholesky(a: np.ndarray) -> np.ndarray:
    """Lower-triangular S with S S^T = a.

    Raises NotPositiveDefinite when a pivot falls at or below
    dim * eps * max(diag).
    """
    a = check_symmetric(a)
    n = a.shape[0]
    thresh = n * np.finfo(float).eps * max(np.max(np.diag(a)), 0.0)
    try:
        s = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite("matrix is not positive definite") from None
    if np.min(np.diag(s)) ** 2 <= thresh:
        raise NotPositiveDefinite("matrix is numerically singular")
    return s


def jitter_spd(a: np.ndarray) -> np.ndarray:
    """Cholesky with one jitter retry (JITTER_SCALE * trace/dim on the diagonal)."""
    try:
        return cholesky(a)
    except NotPositiveDefinite:
        n = a.shape[0]
        bump = JITTER_SCALE * max(np.trace(a) / n, 1.0)
        return cholesky(a + bump * np.eye(n))


@dataclass(frozen=True)
class EigenDecomp:
    """Orthogonal q and eigenvalues lam (descending) with a = q diag(lam) q^T."""

    q: np.ndarray
    lam: np.ndarray


def sym_eigen(a: np.ndarray) -> EigenDecomp:
    """Symmetric eigendecomposition, eigenvalues sorted descending.

    Tiny negative eigenvalues of numerically PSD input are clamped to zero.
    """
    a = check_symmetric(a)
    try:
        lam, q = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise NoConvergence(str(exc)) from None
    order = np.argsort(lam)[::-1]
    lam, q = lam[order], q[:, order]
    top = max(abs(lam[0]), abs(lam[-1]), 1.0)
    lam = np.where((lam < 0) & (lam > -1e-12 * top), 0.0, lam)
    return EigenDecomp(q=q, lam=lam)


def chol_solve(s: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve (S S^T) x = b given the lower Cholesky factor S."""
    from scipy.linalg import solve_triangular

    y = solve_triangular(s, b, lower=True)
    return solve_triangular(s.T, y, lower=False)


def chol_logdet(s: np.ndarray) -> float:
    """log det(S S^T) from the lower Cholesky factor S."""
    return 2.0 * float(np.sum(np.log(np.diag(s))))


def mvn_logpdf(x: np.ndarray, mean: np.ndarray, chol_lower: np.ndarray):
    """Multivariate normal log density; x may be (k,) or (n, k)."""
    from scipy.linalg import solve_triangular

    x = np.atleast_2d(np.asarray(x, dtype=float))
    k = chol_lower.shape[0]
    z = solve_triangular(chol_lower, (x - mean).T, lower=True)
    out = -0.5 * np.sum(z * z, axis=0) - 0.5 * k * np.log(2 * np.pi) \
        - 0.5 * chol_logdet(chol_lower)
    return out if out.size > 1 else float(out[0])


def logsumexp_stream(log_terms: np.ndarray) -> float:
    """logsumexp with the usual max shift; tolerates -inf entries."""
    log_terms = np.asarray(log_terms, dtype=float)
    m = np.max(log_terms)
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.sum(np.exp(log_terms - m))))


# ---------------------------------------------------------------------------
# BFGS quasi-Newton minimizer


@dataclass
class MinimizeResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    iterations: int
    status: str  # "Converged" | "MaxIterations" | "LineSearchFailure"

    @property
    def converged(self) -> bool:
        return self.status == "Converged"


def _wolfe_line_search(f_g, x, f0, g0, direction, max_steps=30):
    """Strong-Wolfe line search (Nocedal-Wright style zoom)."""
    c1, c2 = 1e-4, 0.9
    d_phi0 = float(g0 @ direction)
    alpha_prev, phi_prev = 0.0, f0
    alpha = 1.0

    def phi(al):
        fx, gx = f_g(x + al * direction)
        return fx, gx, float(gx @ direction)

    def zoom(lo, phi_lo, dlo, hi, phi_hi):
        for _ in range(30):
            al = 0.5 * (lo + hi)
            fx, gx, dphi = phi(al)
            if fx > f0 + c1 * al * d_phi0 or fx >= phi_lo:
                hi, phi_hi = al, fx
            else:
                if abs(dphi) <= -c2 * d_phi0:
                    return al, fx, gx
                if dphi * (hi - lo) >= 0:
                    hi, phi_hi = lo, phi_lo
                lo, phi_lo, dlo = al, fx, dphi
            if abs(hi - lo) < 1e-16 * max(1.0, abs(lo)):
                break
        fx, gx, _ = phi(lo)
        return lo, fx, gx

    for it in range(max_steps):
        fx, gx, dphi = phi(alpha)
        if fx > f0 + c1 * alpha * d_phi0 or (it > 0 and fx >= phi_prev):
            return zoom(alpha_prev, phi_prev, d_phi0, alpha, fx)
        if abs(dphi) <= -c2 * d_phi0:
            return alpha, fx, gx
        if dphi >= 0:
            return zoom(alpha, fx, dphi, alpha_prev, phi_prev)
        alpha_prev, phi_prev = alpha, fx
        alpha *= 2.0
    return None


def quasi_newton_minimize(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 500,
) -> MinimizeResult:
    """Minimize f with BFGS and a strong-Wolfe line search.

    f returns (value, gradient). Converges when
    ||grad||_inf <= tol * max(1, |f|); on MaxIterations or LineSearchFailure
    the best iterate found so far is returned, flagged in status.
    """
    x = np.asarray(x0, dtype=float).copy()
    n = x.size
    fx, gx = f(x)
    fx = float(fx)
    gx = np.asarray(gx, dtype=float)
    h_inv = np.eye(n)

    def done(fv, gv):
        return np.max(np.abs(gv)) <= tol * max(1.0, abs(fv))

    for it in range(max_iter):
        if done(fx, gx):
            return MinimizeResult(x, fx, gx, it, "Converged")
        direction = -h_inv @ gx
        if float(gx @ direction) >= 0:  # reset on loss of descent
            h_inv = np.eye(n)
            direction = -gx
        ls = _wolfe_line_search(f, x, fx, gx, direction)
        if ls is None:
            return MinimizeResult(x, fx, gx, it, "LineSearchFailure")
        alpha, f_new, g_new = ls
        s = alpha * direction
        yv = g_new - gx
        sy = float(s @ yv)
        if sy > 1e-14 * max(1.0, float(np.linalg.norm(s)) * float(np.linalg.norm(yv))):
            rho = 1.0 / sy
            v = np.eye(n) - rho * np.outer(s, yv)
            h_inv = v @ h_inv @ v.T + rho * np.outer(s, s)
        x = x + s
        fx, gx = float(f_new), np.asarray(g_new, dtype=float)
    status = "Converged" if done(fx, gx) else "MaxIterations"
    return MinimizeResult(x, fx, gx, max_iter, status)
