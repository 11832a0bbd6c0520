"""Analytic likelihoods and scores against quadrature, dense-normal and
finite-difference oracles, plus the marginal covariance builder."""

import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from pseudocluster import (DataError, DesignedCluster, DesignedSupercluster,
                           NumericError, ThreeLevelParams, TwoLevelParams,
                           build_dataset, loglik_quadrature_oracle,
                           loglik_three_level, loglik_two_level,
                           marginal_covariance, score_three_level,
                           score_two_level)

rng = np.random.default_rng(20260810)


def rand_cluster(p=2, nmax=4, wmax=3.0):
    n = int(rng.integers(1, nmax + 1))
    X = np.column_stack([np.ones(n)] +
                        [rng.normal(size=n) for _ in range(p - 1)])
    return DesignedCluster(y=1.5 * rng.normal(size=n), X=X,
                           W=rng.uniform(0.5, wmax, size=n),
                           w_cluster=float(rng.uniform(0.5, wmax)))


def rand_two_level_params(p=2, allow_zero_u=True):
    lo = 0.0 if allow_zero_u else 0.2
    return TwoLevelParams(beta=rng.normal(size=p),
                          sigma2_e=float(rng.uniform(0.3, 2.5)),
                          sigma2_u=float(rng.uniform(lo, 2.5)))


def fd_gradient(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


class TestParams:
    def test_invariants(self):
        with pytest.raises(DataError):
            TwoLevelParams(beta=np.array([0.0]), sigma2_e=0.0, sigma2_u=1.0)
        with pytest.raises(DataError):
            TwoLevelParams(beta=np.array([0.0]), sigma2_e=1.0, sigma2_u=-0.1)
        with pytest.raises(DataError):
            ThreeLevelParams(beta=np.array([np.inf]), sigma2_e=1.0,
                             sigma2_u=1.0, sigma2_tau=1.0)

    def test_derived_quantities(self):
        p = ThreeLevelParams(beta=np.zeros(1), sigma2_e=1.0, sigma2_u=0.5,
                             sigma2_tau=0.25)
        assert p.sigma2_total == 1.75
        assert p.sigma2_c == 0.75


class TestTwoLevel:
    def test_singleton_closed_form(self):
        c = DesignedCluster(y=np.zeros(1), X=np.ones((1, 1)), W=np.ones(1))
        p = TwoLevelParams(beta=np.zeros(1), sigma2_e=1.0, sigma2_u=1.0)
        expected = -0.5 * math.log(4 * math.pi)
        assert loglik_two_level([c], p, weighted=False) == pytest.approx(
            expected, abs=1e-14)

    def test_weighted_degenerates_with_unit_weights(self):
        cls = [DesignedCluster(y=rng.normal(size=3),
                               X=np.ones((3, 1)), W=np.ones(3))
               for _ in range(4)]
        p = rand_two_level_params(p=1)
        a = loglik_two_level(cls, p, weighted=True)
        b = loglik_two_level(cls, p, weighted=False)
        assert a == b  # same code path, exact

    def test_oracle_singleton_closed_form(self):
        c = DesignedCluster(y=np.array([0.7]), X=np.ones((1, 1)), W=np.ones(1))
        p = TwoLevelParams(beta=np.array([0.2]), sigma2_e=0.8, sigma2_u=1.3)
        total = 0.8 + 1.3
        expected = -0.5 * (math.log(2 * math.pi * total)
                           + (0.7 - 0.2) ** 2 / total)
        value = loglik_quadrature_oracle([c], p, weighted=False)
        assert value == pytest.approx(expected, abs=1e-12)

    def test_matches_quadrature_oracle(self):
        worst = 0.0
        for _ in range(100):
            cls = [rand_cluster() for _ in range(int(rng.integers(1, 5)))]
            p = rand_two_level_params()
            analytic = loglik_two_level(cls, p, weighted=True)
            oracle = loglik_quadrature_oracle(cls, p, weighted=True)
            worst = max(worst, abs(analytic - oracle))
        assert worst <= 1e-8

    def test_score_matches_finite_differences(self):
        worst = 0.0
        for _ in range(50):
            cls = [rand_cluster() for _ in range(3)]
            theta = np.concatenate([rng.normal(size=2),
                                    rng.uniform(0.3, 2.0, size=2)])

            def ll(t):
                return loglik_two_level(
                    cls, TwoLevelParams(t[:2], t[2], t[3]), True)

            analytic = score_two_level(
                cls, TwoLevelParams(theta[:2], theta[2], theta[3]), True)
            numeric = fd_gradient(ll, theta)
            rel = np.max(np.abs(analytic - numeric)
                         / np.maximum(np.abs(numeric), 1e-6))
            worst = max(worst, rel)
        assert worst <= 1e-4

    def test_singleton_mean_score_zero(self):
        # all n_j = 1 and beta at the overall mean: d l / d beta0 = 0
        ys = rng.normal(size=6)
        cls = [DesignedCluster(y=np.array([y]), X=np.ones((1, 1)),
                               W=np.ones(1)) for y in ys]
        p = TwoLevelParams(beta=np.array([ys.mean()]), sigma2_e=0.8,
                           sigma2_u=0.6)
        g = score_two_level(cls, p, weighted=False)
        assert abs(g[0]) < 1e-12

    def test_sigma_u_zero_is_independent_errors(self):
        cls = [rand_cluster() for _ in range(3)]
        p = TwoLevelParams(beta=np.zeros(2), sigma2_e=1.3, sigma2_u=0.0)
        expected = 0.0
        for c in cls:
            r = c.y - c.X @ p.beta
            expected += c.w_cluster * np.sum(
                c.W * (-0.5 * np.log(2 * np.pi * 1.3) - r ** 2 / 2.6))
        assert loglik_two_level(cls, p, True) == pytest.approx(expected)

    def test_within_cluster_permutation_invariance(self):
        c = rand_cluster(nmax=4)
        if c.n == 1:
            c = DesignedCluster(y=rng.normal(size=3), X=np.ones((3, 1)),
                                W=rng.uniform(0.5, 2, 3))
        perm = rng.permutation(c.n)
        cp = DesignedCluster(y=c.y[perm], X=c.X[perm], W=c.W[perm],
                             w_cluster=c.w_cluster)
        p = rand_two_level_params(p=c.X.shape[1])
        assert loglik_two_level([c], p, True) == pytest.approx(
            loglik_two_level([cp], p, True), rel=1e-14)

    def test_nonfinite_input_reports_cluster(self):
        good = DesignedCluster(y=np.zeros(2), X=np.ones((2, 1)), W=np.ones(2))
        p = TwoLevelParams(beta=np.array([0.0]), sigma2_e=1.0, sigma2_u=1.0)
        with pytest.raises(NumericError, match="cluster index 1"):
            loglik_two_level(
                [good, DesignedCluster(y=np.array([1e200, -1e200]),
                                       X=np.ones((2, 1)), W=np.ones(2))],
                p, True)


class TestThreeLevel:
    def rand_groups(self, n_groups=2, p=2):
        return [DesignedSupercluster(
                    clusters=tuple(rand_cluster(p=p)
                                   for _ in range(int(rng.integers(1, 3)))),
                    w_super=float(rng.uniform(0.5, 2)))
                for _ in range(n_groups)]

    def rand_params(self, p=2):
        return ThreeLevelParams(beta=rng.normal(size=p),
                                sigma2_e=float(rng.uniform(0.3, 2.0)),
                                sigma2_u=float(rng.uniform(0.0, 1.5)),
                                sigma2_tau=float(rng.uniform(0.0, 1.5)))

    def test_collapse_to_two_level(self):
        # sigma2_tau = 0 and one cluster per supercluster
        groups = [DesignedSupercluster(clusters=(rand_cluster(),),
                                       w_super=float(rng.uniform(0.5, 2)))
                  for _ in range(4)]
        p3 = ThreeLevelParams(beta=rng.normal(size=2), sigma2_e=1.1,
                              sigma2_u=0.7, sigma2_tau=0.0)
        flat = [DesignedCluster(y=g.clusters[0].y, X=g.clusters[0].X,
                                W=g.clusters[0].W,
                                w_cluster=g.w_super * g.clusters[0].w_cluster)
                for g in groups]
        p2 = TwoLevelParams(beta=p3.beta, sigma2_e=1.1, sigma2_u=0.7)
        a = loglik_three_level(groups, p3, weighted=True)
        b = loglik_two_level(flat, p2, weighted=True)
        assert abs(a - b) <= 1e-10 * abs(b)

    def test_matches_dense_normal_when_unweighted(self):
        worst = 0.0
        for _ in range(25):
            groups = self.rand_groups()
            p = self.rand_params()
            analytic = loglik_three_level(groups, p, weighted=False)
            dense = 0.0
            for g in groups:
                sizes = [c.n for c in g.clusters]
                total = sum(sizes)
                V = p.sigma2_tau * np.ones((total, total))
                r_all, at = [], 0
                for c, n in zip(g.clusters, sizes):
                    V[at:at + n, at:at + n] += p.sigma2_u * np.ones((n, n))
                    r_all.append(c.y - c.X @ p.beta)
                    at += n
                V += p.sigma2_e * np.eye(total)
                dense += multivariate_normal(
                    mean=np.zeros(total), cov=V).logpdf(np.concatenate(r_all))
            worst = max(worst, abs(analytic - dense))
        assert worst <= 1e-8

    def test_matches_quadrature_oracle_weighted(self):
        worst = 0.0
        for _ in range(40):
            groups = self.rand_groups()
            p = self.rand_params()
            analytic = loglik_three_level(groups, p, weighted=True)
            oracle = loglik_quadrature_oracle(groups, p, weighted=True,
                                              tol=1e-6)
            worst = max(worst, abs(analytic - oracle))
        assert worst <= 1e-6

    def test_tiny_weighted_instance_nested_quadrature(self):
        # l = 2 superclusters, m_k <= 2, n_jk <= 3
        groups = [
            DesignedSupercluster(clusters=(
                DesignedCluster(y=np.array([0.3, -0.5, 1.1]),
                                X=np.ones((3, 1)),
                                W=np.array([0.7, 1.4, 2.0]), w_cluster=1.3),
                DesignedCluster(y=np.array([0.9]), X=np.ones((1, 1)),
                                W=np.array([2.5]), w_cluster=0.8)),
                w_super=1.7),
            DesignedSupercluster(clusters=(
                DesignedCluster(y=np.array([-1.2, 0.4]), X=np.ones((2, 1)),
                                W=np.array([1.1, 0.6]), w_cluster=2.2),),
                w_super=0.9),
        ]
        p = ThreeLevelParams(beta=np.array([0.2]), sigma2_e=0.9,
                             sigma2_u=0.6, sigma2_tau=0.4)
        analytic = loglik_three_level(groups, p, weighted=True)
        oracle = loglik_quadrature_oracle(groups, p, weighted=True, tol=1e-6)
        assert abs(analytic - oracle) <= 1e-6

    def test_score_matches_finite_differences(self):
        worst = 0.0
        for _ in range(20):
            groups = self.rand_groups()
            theta = np.concatenate([rng.normal(size=2),
                                    rng.uniform(0.3, 1.5, size=3)])

            def ll(t):
                return loglik_three_level(
                    groups, ThreeLevelParams(t[:2], t[2], t[3], t[4]), True)

            analytic = score_three_level(
                groups, ThreeLevelParams(theta[:2], *theta[2:]), True)
            numeric = fd_gradient(ll, theta)
            rel = np.max(np.abs(analytic - numeric)
                         / np.maximum(np.abs(numeric), 1e-6))
            worst = max(worst, rel)
        assert worst <= 1e-4


class TestMarginalCovariance:
    def params(self, s2e=1.0, s2u=1.0, s2t=1.0):
        return ThreeLevelParams(beta=np.zeros(1), sigma2_e=s2e, sigma2_u=s2u,
                                sigma2_tau=s2t)

    def test_depth1_units_diagonal(self):
        rows = [dict(unit_id=f"u{i}", cluster_id=f"pseudo:0:c{i}",
                     supercluster_id=f"pseudo:0:s{i}", y=0.0)
                for i in range(3)]
        data = build_dataset(rows, depth=3)
        cov = marginal_covariance(data, self.params())
        assert len(cov.blocks) == 1
        np.testing.assert_allclose(cov.blocks[0].matrix, 3.0 * np.eye(3))

    def test_depth2_compound_symmetry_with_sigma_c(self):
        rows = [dict(unit_id=f"u{i}", cluster_id=f"pseudo:0:c{i}",
                     supercluster_id="s0:top", y=0.0) for i in range(2)]
        data = build_dataset(rows, depth=3)
        cov = marginal_covariance(data, self.params(1.0, 0.5, 0.5))
        np.testing.assert_allclose(cov.blocks[0].matrix,
                                   np.array([[2.0, 1.0], [1.0, 2.0]]))

    def test_depth3_blocks_and_zero_cross_blocks(self):
        rows = []
        for k in range(2):
            for j in range(2):
                for i in range(2):
                    rows.append(dict(unit_id=f"{k}{j}{i}",
                                     cluster_id=f"c{k}{j}",
                                     supercluster_id=f"s{k}", y=0.0))
        data = build_dataset(rows, depth=3)
        p = self.params(1.0, 0.5, 0.25)
        cov = marginal_covariance(data, p)
        assert len(cov.blocks) == 2
        blk = cov.blocks[0].matrix
        np.testing.assert_allclose(np.diag(blk), np.full(4, p.sigma2_total))
        assert blk[0, 1] == pytest.approx(0.75)   # same cluster: s2u + s2t
        assert blk[0, 2] == pytest.approx(0.25)   # same supercluster only
        dense = cov.dense()
        assert np.all(dense[:4, 4:] == 0)

    def test_total_variance_on_diagonal_everywhere(self):
        from pseudocluster import combine_datasets
        d3 = build_dataset(
            [dict(unit_id=f"a{j}{i}", cluster_id=f"c{j}",
                  supercluster_id="s", y=0.0)
             for j in range(2) for i in range(2)], depth=3)
        d2 = build_dataset(
            [dict(unit_id=f"b{i}", cluster_id="top", y=0.0)
             for i in range(3)], depth=2)
        d1 = build_dataset([dict(unit_id=f"c{i}", y=0.0) for i in range(2)],
                           depth=1)
        combined = combine_datasets([d3, d2, d1])
        p = self.params(0.7, 0.9, 0.4)
        dense = marginal_covariance(combined, p).dense()
        np.testing.assert_allclose(np.diag(dense),
                                   np.full(combined.n_observations,
                                           p.sigma2_total))
