"""Pseudorandom, quasi-random, and antithetic point-set generation.

Sobol points come from the Joe-Kuo direction numbers shipped in
data/joe_kuo_1111.tsv.gz, randomized with nested digit scrambling at 31-bit
depth (the permutation bits are derived from a splitmix-style hash of the
digit prefix, which keeps the scramble vectorized while preserving the
dyadic stratification of the net). Korobov rules are rank-1 lattices with a
Cranley-Patterson random shift; the single generator parameter is picked by
minimizing a weighted spectral figure of merit, cached per (n, dim).
"""

from __future__ import annotations

import gzip
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy import stats as sps

from .errors import DimTooLarge, ZeroVector

__all__ = [
    "SobolGenerator",
    "sobol_points",
    "KorobovRule",
    "korobov_points",
    "next_prime",
    "antithetic_expand",
]

SOBOL_MAXDIM = 1111
SOBOL_BITS = 31
_SCALE = 2.0 ** -SOBOL_BITS


def _load_direction_table() -> list[tuple[int, list[int]]]:
    with resources.files("probit_mlm.data").joinpath("joe_kuo_1111.tsv.gz").open("rb") as fh:
        text = gzip.decompress(fh.read()).decode()
    table = []
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        _, poly, ms = line.split("\t")
        table.append((int(poly), [int(v) for v in ms.split(",")]))
    return table


_DIRECTION_TABLE = None
_V_CACHE: dict[int, np.ndarray] = {}


def _direction_integers(dim: int) -> np.ndarray:
    """31-bit direction integers, shape (dim, SOBOL_BITS)."""
    global _DIRECTION_TABLE
    if dim in _V_CACHE:
        return _V_CACHE[dim]
    if _DIRECTION_TABLE is None:
        _DIRECTION_TABLE = _load_direction_table()
    v = np.zeros((dim, SOBOL_BITS), dtype=np.uint64)
    for d in range(dim):
        if d == 0:
            m = [1] * SOBOL_BITS
        else:
            poly, m_init = _DIRECTION_TABLE[d]
            s = poly.bit_length() - 1
            a = [(poly >> (s - 1 - i)) & 1 for i in range(s - 1)]
            m = list(m_init[:s])
            for k in range(s, SOBOL_BITS):
                acc = m[k - s] ^ (m[k - s] << s)
                for i in range(1, s):
                    if a[i - 1]:
                        acc ^= m[k - i] << i
                m.append(acc)
        for b in range(SOBOL_BITS):
            v[d, b] = m[b] << (SOBOL_BITS - 1 - b)
    _V_CACHE[dim] = v
    return v


def _splitmix(z: np.ndarray) -> np.ndarray:
    """64-bit avalanche mix (splitmix64 finalizer), vectorized."""
    z = (z + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    return z ^ (z >> np.uint64(31))


def _nested_scramble(ints: np.ndarray, seed: int) -> np.ndarray:
    """Owen-style nested digit scramble of 31-bit integers, per column.

    The flip applied to bit position p of a point depends only on the
    point's digits above p, so every realization is a valid scramble tree:
    nets stay nets and each scrambled coordinate is uniform on [0, 1).
    """
    n, dim = ints.shape
    out = ints.copy()
    coord_keys = _splitmix(np.uint64(seed) + np.arange(1, dim + 1, dtype=np.uint64))
    for p in range(SOBOL_BITS - 1, -1, -1):
        prefix = out >> np.uint64(p + 1)
        depth_key = _splitmix(coord_keys + np.uint64(SOBOL_BITS - p))
        bits = _splitmix(prefix ^ depth_key[None, :]) & np.uint64(1)
        out ^= bits << np.uint64(p)
    return out


@dataclass
class SobolGenerator:
    """Stateful Sobol stream. A single instance is not thread-safe;
    independent instances with distinct seeds may run concurrently."""

    dim: int
    scramble_seed: int | None = None

    def __post_init__(self):
        if not 1 <= self.dim <= SOBOL_MAXDIM:
            raise DimTooLarge(f"Sobol dimension must be in [1, {SOBOL_MAXDIM}], got {self.dim}")
        self._v = _direction_integers(self.dim)
        # Unscrambled streams start at index 1: the all-zeros point breaks
        # inverse-CDF transforms downstream.
        self._next_index = 0 if self.scramble_seed is not None else 1

    def take(self, count: int) -> np.ndarray:
        pts = self._raw(self._next_index, count)
        self._next_index += count
        return pts

    def _raw(self, start: int, count: int) -> np.ndarray:
        idx = np.arange(start, start + count, dtype=np.uint64)
        out = np.zeros((count, self.dim), dtype=np.uint64)
        top = int(idx[-1]) if count else 0
        for b in range(max(top.bit_length(), 1)):
            mask = ((idx >> np.uint64(b)) & np.uint64(1)).astype(bool)
            if mask.any():
                out[mask] ^= self._v[:, b][None, :]
        if self.scramble_seed is not None:
            out = _nested_scramble(out, self.scramble_seed)
        return out.astype(np.float64) * _SCALE


def sobol_points(dim: int, count: int, scramble_seed: int | None = None) -> np.ndarray:
    """First `count` Sobol points in [0,1)^dim (index origin 1 when unscrambled)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return SobolGenerator(dim, scramble_seed).take(count)


# ---------------------------------------------------------------------------
# Korobov rank-1 lattice rules


def next_prime(n: int) -> int:
    """Smallest prime >= n (trial division; fine for desk-scale sizes)."""
    n = max(int(n), 2)
    while True:
        if n in (2, 3):
            return n
        if n % 2 and n % 3:
            i, isp = 5, True
            while i * i <= n:
                if n % i == 0 or n % (i + 2) == 0:
                    isp = False
                    break
                i += 6
            if isp:
                return n
        n += 1


_GEN_CACHE: dict[tuple[int, int], int] = {}


def _korobov_parameter(n: int, dim: int) -> int:
    """Generator a for the rule z = (1, a, a^2, ...) mod n.

    Picks a from a fixed candidate grid by minimizing the weighted P2
    criterion sum_k prod_j (1 + gamma_j * 2 pi^2 B2({k a^{j-1} / n})) with
    gamma_j = 1/j^2, evaluated over at most the first 12 coordinates.
    Deterministic and cached per (n, effective dim).
    """
    d_eff = min(dim, 12)
    key = (n, d_eff)
    if key in _GEN_CACHE:
        return _GEN_CACHE[key]
    if n < 7 or d_eff == 1:
        _GEN_CACHE[key] = 1
        return 1
    n_cand = min(64, n - 3)
    cands = np.unique(2 + ((n - 4) * np.arange(n_cand, dtype=np.int64)) // max(n_cand - 1, 1))
    ks = np.arange(n, dtype=np.float64)
    two_pi2 = 2.0 * np.pi * np.pi
    best_a, best_val = 1, np.inf
    for a in cands:
        a = int(a)
        prod = np.ones(n)
        z = 1
        for j in range(1, d_eff + 1):
            x = (ks * z) % n / n
            b2 = x * x - x + 1.0 / 6.0
            prod *= 1.0 + (two_pi2 / (j * j)) * b2
            z = (z * a) % n
        val = prod.mean() - 1.0
        if val < best_val:
            best_a, best_val = a, val
    _GEN_CACHE[key] = best_a
    return best_a


@dataclass(frozen=True)
class KorobovRule:
    """Randomly shifted rank-1 lattice: point i = frac(i * z / n + shift)."""

    n: int
    generator: np.ndarray  # integer vector z
    shift: np.ndarray      # uniform in [0,1)^dim

    @property
    def dim(self) -> int:
        return self.generator.size

    def points(self) -> np.ndarray:
        i = np.arange(self.n, dtype=np.float64)[:, None]
        return (i * (self.generator / self.n)[None, :] + self.shift[None, :]) % 1.0


def korobov_points(n: int, dim: int, seed) -> KorobovRule:
    """Shifted Korobov rule with at least n points (n is rounded up to a prime)."""
    if n < 7:
        raise ValueError("n must be >= 7")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    n = next_prime(n)
    a = _korobov_parameter(n, dim)
    z = np.empty(dim, dtype=np.int64)
    acc = 1
    for j in range(dim):
        z[j] = acc
        acc = (acc * a) % n
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return KorobovRule(n=n, generator=z, shift=rng.random(dim))


# ---------------------------------------------------------------------------
# location and scale balanced antithetic variables


def antithetic_expand(u: np.ndarray) -> np.ndarray:
    """Expand one standard-normal draw into {u, -u, s*u, -s*u}.

    s rescales the squared radius onto the complementary chi-square
    quantile: s = sqrt(F^-1_{chi2,K}(1 - F_{chi2,K}(||u||^2))) / ||u||,
    so all four points keep the correct marginal law.
    """
    u = np.asarray(u, dtype=float)
    k = u.size
    r2 = float(u @ u)
    if r2 == 0.0 or not np.isfinite(r2):
        raise ZeroVector("antithetic expansion needs a finite nonzero vector")
    # F^-1(1-F(x)) with the accurate tail on each side of the median
    cdf = sps.chi2.cdf(r2, df=k)
    if cdf <= 0.5:
        target = sps.chi2.isf(cdf, df=k)
    else:
        target = sps.chi2.ppf(sps.chi2.sf(r2, df=k), df=k)
    s = np.sqrt(max(target, 0.0) / r2)
    return np.stack([u, -u, s * u, -s * u])
