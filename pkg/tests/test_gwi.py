"""Gaussian-weighted-integral engines."""

import numpy as np
import pytest

from probit_mlm.errors import NodeBudgetExceeded, NotApplicable
from probit_mlm.gwi import (
    AffineSpec,
    GwiProblem,
    McOptions,
    aghq,
    find_mode,
    ghq,
    ghq_rule,
    importance_sample,
    laplace,
    reduce_gwi_dimension,
    rqmc,
    spherical_radial,
)
from probit_mlm.numeric import (
    mills_ratio_inv,
    std_normal_cdf,
    std_normal_logcdf,
)


def constant_problem(k=2, sigma=None):
    sigma = np.eye(k) if sigma is None else sigma
    return GwiProblem(
        xi1=np.zeros(k), xi11=sigma,
        logh=lambda u: np.zeros(np.atleast_2d(u).shape[0]),
        logh_grad_hess=lambda u: (0.0, np.zeros(k), np.zeros((k, k))))


def probit_problem(a0, bvec, sigma, xi1=None):
    """h(u) = Phi(a0 + b'u): closed form L = Phi((a0 + b'xi1)/sqrt(1 + b'Sigma b))."""
    bvec = np.asarray(bvec, dtype=float)
    k = bvec.size
    xi1 = np.zeros(k) if xi1 is None else np.asarray(xi1, dtype=float)

    def logh(u):
        return std_normal_logcdf(a0 + np.atleast_2d(u) @ bvec)

    def lgh(u):
        t = a0 + bvec @ u
        r = float(mills_ratio_inv(t))
        grad = r * bvec
        hess = (-t * r - r * r) * np.outer(bvec, bvec)
        return float(std_normal_logcdf(t)), grad, hess

    prob = GwiProblem(xi1=xi1, xi11=np.asarray(sigma, dtype=float),
                      logh=logh, logh_grad_hess=lgh)
    exact = std_normal_cdf((a0 + bvec @ xi1) / np.sqrt(1.0 + bvec @ prob.xi11 @ bvec))
    return prob, float(exact)


def loglinear_problem(avec, sigma):
    """h(u) = exp(a'u - shift) <= 1 on the relevant region; Laplace is exact.

    L = exp(a'xi1 + a'Sigma a/2 - shift)."""
    avec = np.asarray(avec, dtype=float)
    k = avec.size
    shift = 10.0

    def logh(u):
        return np.atleast_2d(u) @ avec - shift

    def lgh(u):
        return float(avec @ u - shift), avec.copy(), np.zeros((k, k))

    prob = GwiProblem(xi1=np.zeros(k), xi11=np.asarray(sigma, dtype=float),
                      logh=logh, logh_grad_hess=lgh)
    exact_log = 0.5 * avec @ prob.xi11 @ avec - shift
    return prob, float(exact_log)


class TestFindMode:
    def test_constant_integrand(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 3))
        sigma = a @ a.T / 3 + np.eye(3)
        xi1 = rng.standard_normal(3)
        p = GwiProblem(xi1=xi1, xi11=sigma,
                       logh=lambda u: np.zeros(np.atleast_2d(u).shape[0]),
                       logh_grad_hess=lambda u: (0.0, np.zeros(3), np.zeros((3, 3))))
        mode = find_mode(p)
        np.testing.assert_allclose(mode.u_hat, xi1, atol=1e-8)
        np.testing.assert_allclose(mode.neg_hessian, np.linalg.inv(sigma),
                                   rtol=1e-8, atol=1e-10)

    def test_probit_stationarity(self):
        p, _ = probit_problem(0.0, [1.0], np.eye(1))
        mode = find_mode(p)
        u = mode.u_hat[0]
        grad = mills_ratio_inv(u) - u  # d/du [log Phi(u) - u^2/2]
        assert abs(grad) < 1e-7

    def test_matches_grid_argmax(self):
        p, _ = probit_problem(0.5, [0.8, -0.6], np.array([[1.0, 0.3], [0.3, 0.8]]))
        mode = find_mode(p)
        grid = np.linspace(-2, 2, 201)
        uu, vv = np.meshgrid(grid, grid)
        pts = np.column_stack([uu.ravel(), vv.ravel()])
        vals = p.log_g(pts)
        best = pts[np.argmax(vals)]
        assert np.max(np.abs(best - mode.u_hat)) < 0.05  # grid resolution


class TestLaplace:
    def test_constant_is_exact(self):
        assert laplace(constant_problem(3)) == pytest.approx(0.0, abs=1e-12)

    def test_loglinear_exact(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal(3)
        m = rng.standard_normal((3, 3))
        sigma = m @ m.T / 3 + np.eye(3)
        p, exact_log = loglinear_problem(a, sigma)
        assert laplace(p) == pytest.approx(exact_log, abs=1e-9)

    def test_biased_but_close_on_probit(self):
        p, exact = probit_problem(0.4, [0.9, -0.5], np.eye(2) * 0.6)
        ll = laplace(p)
        assert abs(np.exp(ll) - exact) < 0.05 * exact
        assert np.exp(ll) != pytest.approx(exact, rel=1e-8)  # genuinely approximate


class TestImportanceSampler:
    def test_constant_integrand_exact_units(self):
        res = importance_sample(constant_problem(2), McOptions(rel_tol=1e-3, seed=0,
                                                               max_samples=4096))
        assert res.estimate == pytest.approx(1.0, abs=1e-12)

    def test_matches_quadrature(self):
        p, exact = probit_problem(0.3, [0.7, -0.4], np.eye(2) * 0.8)
        res = importance_sample(p, McOptions(rel_tol=5e-4, seed=1))
        ref = np.exp(aghq(p, 20))
        assert abs(res.estimate - ref) < 4 * max(res.std_error, 1e-9)

    def test_adaptive_beats_plain(self):
        rng = np.random.default_rng(3)
        wins = 0
        for t in range(12):
            a = rng.standard_normal(2)
            sigma = np.eye(2) * (0.5 + rng.random())
            p, _ = probit_problem(float(rng.standard_normal()), a, sigma)
            cap = 8192
            r_ad = importance_sample(p, McOptions(rel_tol=1e-9, seed=t, max_samples=cap))
            r_pl = importance_sample(p, McOptions(rel_tol=1e-9, seed=t, max_samples=cap,
                                                  adaptive=False))
            wins += r_ad.std_error <= r_pl.std_error
        assert wins >= 7  # median improvement

    def test_deterministic_per_seed(self):
        p, _ = probit_problem(0.2, [0.5], np.eye(1))
        o = McOptions(rel_tol=1e-3, seed=42, max_samples=4096)
        assert importance_sample(p, o).estimate == importance_sample(p, o).estimate


class TestSphericalRadial:
    def test_constant_exact(self):
        res = spherical_radial(constant_problem(3), McOptions(rel_tol=1e-6, seed=0,
                                                              max_samples=4000))
        assert res.estimate == pytest.approx(1.0, rel=1e-12)

    @pytest.mark.parametrize("k", [2, 3, 4, 5, 6])
    def test_degree5_zero_variance(self, k):
        # 1 + c * monomial of total degree <= 5: exact for every seed
        rng = np.random.default_rng(k)
        for _ in range(3):
            powers = np.zeros(k, dtype=int)
            total = int(rng.integers(0, 6))
            for _ in range(total):
                powers[rng.integers(0, k)] += 1

            def gauss_moment(p):
                out = 1.0
                for pi in p:
                    if pi % 2 == 1:
                        return 0.0
                    out *= float(np.prod(np.arange(1, pi, 2, dtype=float))) if pi else 1.0
                return out

            # small enough that 1 + c*monomial stays positive at every node
            c = 1e-5
            expect = 1.0 + c * gauss_moment(powers)

            def logh(u, powers=powers):
                v = np.prod(np.atleast_2d(u) ** powers[None, :], axis=1)
                return np.log1p(c * v)

            p = GwiProblem(xi1=np.zeros(k), xi11=np.eye(k), logh=logh,
                           logh_grad_hess=lambda u: (0.0, np.zeros(k), np.zeros((k, k))))
            vals = [spherical_radial(
                p, McOptions(rel_tol=1e-12, abs_tol=1e-12, seed=s,
                             max_samples=1500, adaptive=False)).estimate
                for s in range(4)]
            assert np.std(vals) < 1e-12
            assert vals[0] == pytest.approx(expect, rel=1e-10)

    def test_matches_ground_truth(self):
        p, exact = probit_problem(0.2, [0.5, -0.7, 0.3, 0.4], np.eye(4) * 0.5)
        res = spherical_radial(p, McOptions(rel_tol=1e-3, seed=5))
        assert abs(res.estimate - exact) < 4 * max(res.std_error, 1e-8)


class TestRqmc:
    def test_constant(self):
        res = rqmc(constant_problem(2), McOptions(rel_tol=1e-3, seed=0))
        assert res.estimate == pytest.approx(1.0, abs=1e-12)

    def test_matches_ground_truth(self):
        p, exact = probit_problem(-0.1, [0.6, 0.5, -0.3], np.eye(3) * 0.7)
        res = rqmc(p, McOptions(rel_tol=3e-4, seed=2))
        assert abs(res.estimate - exact) < 4 * max(res.std_error, 1e-9)

    def test_beats_mc_rate(self):
        # RMSE decay with sample count faster than s^(-1/2)
        p, exact = probit_problem(0.3, [0.8, -0.5, 0.4], np.eye(3) * 0.6)
        mode = find_mode(p)
        sizes = [2 ** j for j in range(6, 13)]
        rmses = []
        from probit_mlm.gwi import sym_eigen
        from probit_mlm.numeric import std_normal_quantile
        from probit_mlm.sequences import SobolGenerator

        eig = sym_eigen(mode.cov())
        transform = eig.q * np.sqrt(np.maximum(eig.lam, 0))[None, :]
        log_det = 0.5 * np.sum(np.log(np.maximum(eig.lam, 1e-300)))
        for n in sizes:
            errs = []
            for seed in range(8):
                pts = SobolGenerator(3, scramble_seed=seed + 1).take(n)
                x = std_normal_quantile(np.clip(pts, 1e-15, 1 - 1e-15))
                u = mode.u_hat + x @ transform.T
                lr = (p.log_g(u) + 0.5 * np.einsum("ij,ij->i", x, x)
                      + 0.5 * 3 * np.log(2 * np.pi) + log_det)
                errs.append(np.mean(np.exp(lr)) - exact)
            rmses.append(np.sqrt(np.mean(np.square(errs))))
        slope = np.polyfit(np.log(sizes), np.log(rmses), 1)[0]
        assert slope <= -0.7

    def test_ten_replicates(self):
        p, _ = probit_problem(0.0, [1.0, 0.5], np.eye(2))
        res = rqmc(p, McOptions(rel_tol=1e-9, seed=0, max_samples=64 * 10))
        assert res.n_evals == 64 * 10  # one stage, ten scrambled replicates


class TestGhqRule:
    def test_single_node(self):
        nodes, weights = ghq_rule(1)
        assert nodes[0] == 0.0 and weights[0] == 1.0

    def test_two_nodes(self):
        nodes, weights = ghq_rule(2)
        np.testing.assert_allclose(sorted(nodes), [-1.0, 1.0], atol=1e-14)
        np.testing.assert_allclose(weights, [0.5, 0.5], atol=1e-14)

    def test_moment_eight(self):
        nodes, weights = ghq_rule(10)
        assert weights @ nodes ** 8 == pytest.approx(105.0, abs=1e-11)

    @pytest.mark.parametrize("b", range(1, 21))
    def test_exactness_to_degree(self, b):
        nodes, weights = ghq_rule(b)
        for deg in range(0, 2 * b, 2):
            expect = float(np.prod(np.arange(1, deg, 2, dtype=float))) if deg else 1.0
            assert weights @ nodes ** deg == pytest.approx(expect, rel=1e-11, abs=1e-11)
        # odd moments vanish
        assert weights @ nodes ** 1 == pytest.approx(0.0, abs=1e-12)


class TestTensorQuadrature:
    def test_aghq_constant_exact_any_b(self):
        for b in (1, 2, 5):
            assert np.exp(aghq(constant_problem(2), b)) == pytest.approx(1.0, rel=1e-12)

    def test_loglinear_exact_aghq(self):
        # the curvature-matched rule integrates log-quadratic integrands
        # exactly at every node count; the plain tensor rule only converges
        rng = np.random.default_rng(4)
        p, exact_log = loglinear_problem(rng.standard_normal(2), np.eye(2) * 0.8)
        for b in (1, 2, 4):
            assert aghq(p, b) == pytest.approx(exact_log, abs=1e-10)
        assert ghq(p, 25) == pytest.approx(exact_log, abs=1e-6)

    def test_probit_cluster_accuracy(self):
        p, exact = probit_problem(0.4, [0.7, -0.6], np.eye(2) * 0.9)
        assert np.exp(aghq(p, 25)) == pytest.approx(exact, rel=2e-4)

    def test_node_budget(self):
        with pytest.raises(NodeBudgetExceeded):
            ghq(constant_problem(10), 60)

    def test_aghq_translation_invariance(self):
        # translating xi1 while shifting the integrand leaves log L unchanged
        shift = np.array([0.8, -0.5])
        p1, _ = probit_problem(0.3, [0.7, 0.4], np.eye(2) * 0.7)
        bvec = np.array([0.7, 0.4])

        def logh2(u):
            return std_normal_logcdf(0.3 + (np.atleast_2d(u) - shift) @ bvec)

        def lgh2(u):
            t = 0.3 + bvec @ (u - shift)
            r = float(mills_ratio_inv(t))
            return (float(std_normal_logcdf(t)), r * bvec,
                    (-t * r - r * r) * np.outer(bvec, bvec))

        p2 = GwiProblem(xi1=shift, xi11=np.eye(2) * 0.7, logh=logh2,
                        logh_grad_hess=lgh2)
        assert aghq(p1, 15) == pytest.approx(aghq(p2, 15), abs=1e-10)


class TestReduceDimension:
    def _affine_problem(self, k2, big_k, seed=0):
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((k2, big_k)) * 0.7
        eta = rng.standard_normal(k2) * 0.5
        m = rng.standard_normal((big_k, big_k))
        sigma = m @ m.T / big_k + 0.5 * np.eye(big_k)

        def rebuild(eta_, lower_, zmat_):
            def logh(u):
                return np.sum(std_normal_logcdf(eta_[None, :] + np.atleast_2d(u) @ zmat_.T),
                              axis=1)

            def lgh(u):
                t = eta_ + zmat_ @ u
                r = mills_ratio_inv(t)
                grad = zmat_.T @ r
                hess = (zmat_ * (-t * r - r * r)[:, None]).T @ zmat_
                return float(np.sum(std_normal_logcdf(t))), grad, hess

            return logh, lgh

        logh, lgh = rebuild(eta, None, z)
        return GwiProblem(xi1=np.zeros(big_k), xi11=sigma, logh=logh,
                          logh_grad_hess=lgh,
                          affine=AffineSpec(eta=eta, zmat=z, rebuild=rebuild))

    def test_shape(self):
        p = self._affine_problem(2, 7)
        red = reduce_gwi_dimension(p)
        assert red.k1 == 2

    def test_not_applicable_square(self):
        p = self._affine_problem(4, 4)
        with pytest.raises(NotApplicable):
            reduce_gwi_dimension(p)

    def test_reduced_matches_full(self):
        # the 6-d tensor rule converges to the 3-d reduced value from above
        p = self._affine_problem(3, 6, seed=3)
        red = reduce_gwi_dimension(p)
        full = aghq(p, 11)
        small = aghq(red, 40)
        assert full == pytest.approx(small, abs=2e-5)


class TestEngineAgreement:
    def test_pairwise_on_random_binomial_instances(self):
        rng = np.random.default_rng(10)
        for t in range(6):
            k = int(rng.integers(1, 4))
            a = rng.standard_normal((k, k))
            sigma = a @ a.T / k + 0.5 * np.eye(k)
            p, _ = probit_problem(float(rng.standard_normal() * 0.5),
                                  rng.standard_normal(k) * 0.7, sigma)
            ref = aghq(p, 20)
            mo = McOptions(rel_tol=1e-3, seed=t)
            for engine in (importance_sample, spherical_radial, rqmc):
                res = engine(p, mo)
                # small-sample SEs of the ratio estimators run a little
                # tight, so this per-case bound carries extra slack; the
                # acceptance suite applies the 4-SE rule with a miss budget
                se_log = max(res.rel_std_error, 1e-7)
                assert abs(res.log_estimate - ref) < 5 * se_log + 2e-4, engine.__name__

    def test_stochastic_unbiasedness_grand_mean(self):
        p, _ = probit_problem(0.25, [0.6, -0.4], np.eye(2) * 0.8)
        ref = np.exp(aghq(p, 30))
        ests = [importance_sample(
            p, McOptions(rel_tol=1e-9, seed=s, max_samples=2048)).estimate
            for s in range(60)]
        grand = np.mean(ests)
        gse = np.std(ests, ddof=1) / np.sqrt(len(ests))
        assert abs(grand - ref) < 4 * gse
