"""Population generation, informative sampling stages, Monte Carlo harness."""

import math

import numpy as np
import pytest

from pseudocluster import (MonteCarloConfig, PopulationSpec, Scenario,
                           draw_singleton_sample, generate_population,
                           poisson_select_units, pps_select_clusters,
                           run_replication, run_table, summarize,
                           true_sigma_u_model4)
from pseudocluster.simulation import (SampleDesign, assemble_replication_data,
                                      cluster_size_from_z, table_truths)


def spec3(M=50, seed=0):
    return PopulationSpec(model="model3", coefficients=(1.0, 1.0, 1.0),
                          sigma_u=1.0, M=M, seed=seed)


class TestPopulation:
    def test_cluster_size_formula(self):
        assert cluster_size_from_z(np.array([0.0]))[0] == 462
        assert cluster_size_from_z(np.array([-2.5]))[0] == 250
        assert cluster_size_from_z(np.array([-30.0]))[0] == 100  # clamped

    def test_determinism(self):
        a = generate_population(spec3(seed=7))
        b = generate_population(spec3(seed=7))
        np.testing.assert_array_equal(a.y, b.y)
        np.testing.assert_array_equal(a.N, b.N)

    def test_model3_structure(self):
        pop = generate_population(spec3(M=200, seed=1))
        assert pop.x_unit is not None and pop.x_cluster is None
        assert pop.y.shape[0] == int(pop.N.sum())
        # y decomposes exactly per the generating equation
        cidx = np.repeat(np.arange(pop.M), pop.N)
        recon = 1 + pop.x_unit + pop.z[cidx] + pop.u[cidx] + pop.e
        np.testing.assert_allclose(pop.y, recon, rtol=1e-12)

    def test_model4_interaction(self):
        spec = PopulationSpec(model="model4",
                              coefficients=(1.0, 1.0, 1.0, -1.0),
                              sigma_u=0.5, M=100, seed=2)
        pop = generate_population(spec)
        assert pop.x_cluster is not None and pop.x_unit is None
        cidx = np.repeat(np.arange(pop.M), pop.N)
        x = pop.x_cluster[cidx]
        recon = 1 + x + pop.z[cidx] - x * pop.z[cidx] + pop.u[cidx] + pop.e
        np.testing.assert_allclose(pop.y, recon, rtol=1e-12)

    def test_model4_with_zero_interaction_matches_model3_decomposition(self):
        # beta3 = 0: between-cluster variance reduces to beta2^2 + var(u)
        assert true_sigma_u_model4((1.0, 1.0, 1.0, 0.0), 0.5) == \
            pytest.approx(1.0 + 0.25)


class TestTrueSigmaU:
    def test_paper_value(self):
        assert true_sigma_u_model4((1.0, 1.0, 1.0, -1.0), 0.5) == \
            pytest.approx(2.25)

    def test_degenerate(self):
        assert true_sigma_u_model4((1.0, 1.0, 0.0, 0.0), 0.5) == \
            pytest.approx(0.25)

    def test_against_simulated_between_cluster_variance(self):
        rng = np.random.default_rng(3)
        n = 1_000_000
        x = rng.exponential(1.0, n) + 1.0
        z = rng.standard_normal(n)
        u = 0.5 * rng.standard_normal(n)
        effect = 1.0 * z + (-1.0) * x * z + u
        mc = effect.var()
        se = effect.var() * math.sqrt(2 / n) * 4  # loose MC bound
        assert abs(mc - 2.25) < max(3 * se, 0.02)


class TestPPS:
    def test_hand_probabilities(self):
        pop = generate_population(spec3(M=4, seed=0))
        object.__setattr__(pop, "N", np.array([100, 200, 300, 400]))
        rng = np.random.default_rng(0)
        out = pps_select_clusters(pop, 2, rng)
        np.testing.assert_allclose(np.sort(out.p),
                                   np.sort(2 * pop.N[out.indices] / 1000))
        assert out.indices.size == 2

    def test_equal_sizes_srs(self):
        pop = generate_population(spec3(M=10, seed=0))
        object.__setattr__(pop, "N", np.full(10, 250))
        out = pps_select_clusters(pop, 4, np.random.default_rng(1))
        np.testing.assert_allclose(out.p, 0.4)

    def test_inclusion_frequencies(self):
        pop = generate_population(spec3(M=12, seed=5))
        m1 = 4
        p = m1 * pop.N / pop.N.sum()
        rng = np.random.default_rng(99)
        counts = np.zeros(pop.M)
        draws = 100_000
        for _ in range(draws):
            out = pps_select_clusters(pop, m1, rng)
            counts[out.indices] += 1
        freq = counts / draws
        se = np.sqrt(p * (1 - p) / draws)
        assert np.all(np.abs(freq - p) <= 3 * se + 1e-12)

    def test_weights_are_inverse_probabilities(self):
        pop = generate_population(spec3(M=30, seed=2))
        out = pps_select_clusters(pop, 10, np.random.default_rng(3))
        np.testing.assert_allclose(out.w, 1.0 / out.p)

    def test_horvitz_thompson_total(self):
        # sum of sampled weights estimates the number of population clusters
        pop = generate_population(spec3(M=40, seed=8))
        rng = np.random.default_rng(11)
        draws = 4000
        totals = np.empty(draws)
        for b in range(draws):
            out = pps_select_clusters(pop, 8, rng)
            totals[b] = out.w.sum()
        se = totals.std(ddof=1) / math.sqrt(draws)
        assert abs(totals.mean() - pop.M) <= 3 * se


class TestPoisson:
    def test_hand_probabilities(self):
        e = np.array([-0.5, -0.1, 0.2, 0.9])
        out = poisson_select_units(e, 2, np.random.default_rng(0))
        # size measures (0.25, 0.25, 0.75, 0.75) -> p = (0.25, 0.25, 0.75, 0.75)
        full_p = np.minimum(2 * np.where(e < 0, 0.25, 0.75) / 2.0, 1.0)
        np.testing.assert_allclose(full_p, [0.25, 0.25, 0.75, 0.75])
        np.testing.assert_allclose(out.p, full_p[out.indices])

    def test_same_sign_noninformative(self):
        e = np.abs(np.random.default_rng(1).normal(size=20))
        out = poisson_select_units(e, 5, np.random.default_rng(2))
        np.testing.assert_allclose(out.p, 5 / 20)

    def test_realized_size_frequencies(self):
        e = np.array([-0.5, -0.1, 0.2, 0.9])
        expected = 2.0  # sum of p
        rng = np.random.default_rng(7)
        draws = 100_000
        sizes = np.array([poisson_select_units(e, 2, rng).indices.size
                          for _ in range(draws)])
        var_n = np.sum([p * (1 - p) for p in (0.25, 0.25, 0.75, 0.75)])
        se = math.sqrt(var_n / draws)
        assert abs(sizes.mean() - expected) <= 3 * se

    def test_capping_flagged(self):
        e = np.array([0.5, 0.6, -0.2, -0.4])
        out = poisson_select_units(e, 4, np.random.default_rng(0))
        assert out.n_capped == 2  # the two 0.75-measure units exceed 1


class TestSingletons:
    def test_weights(self):
        data = draw_singleton_sample(spec3(), 25, 100,
                                     np.random.default_rng(0))
        assert data.depth == 1
        assert data.n_observations == 25
        assert all(c.w_cluster == 4.0 for c in data.clusters.values())
        assert all(o.w_unit == 1.0 for o in data.observations)

    def test_census(self):
        data = draw_singleton_sample(spec3(), 10, 10,
                                     np.random.default_rng(0))
        assert all(c.w_cluster == 1.0 for c in data.clusters.values())

    def test_empty(self):
        data = draw_singleton_sample(spec3(), 0, 0, np.random.default_rng(0))
        assert data.n_observations == 0


class TestReplication:
    def test_scenario_counts_no_singletons(self):
        data, diag = assemble_replication_data(
            Scenario(100, 30, 0.0), "sim1", np.random.SeedSequence(1))
        assert len(data.clusters) == 100
        assert diag.singleton_fraction == 0.0
        # about m*n observations in expectation
        assert abs(data.n_observations - 3000) < 300

    def test_scenario_counts_quarter_singletons(self):
        data, diag = assemble_replication_data(
            Scenario(100, 30, 25.0), "sim1", np.random.SeedSequence(2))
        assert len(data.clusters) == 100
        info = summarize(data)
        assert info.pseudo_cluster_fraction == 0.25
        assert diag.singleton_fraction == 0.25

    def test_design_resolution(self):
        d = SampleDesign.from_scenario(Scenario(100, 30, 25.0))
        assert (d.m1, d.m2, d.N2) == (75, 25, 100)
        assert d.singleton_fraction == 0.25

    def test_determinism(self):
        a = run_replication(Scenario(30, 8, 0.0), "sim1", 123)
        b = run_replication(Scenario(30, 8, 0.0), "sim1", 123)
        assert a.estimates == b.estimates
        assert a.ses == b.ses

    def test_informative_sampling_signature(self):
        # unweighted residual mean strictly positive; weighted near zero
        seq = np.random.SeedSequence(4)
        data, _ = assemble_replication_data(Scenario(60, 20, 0.0), "sim1", seq)
        resid, w = [], []
        for o in data.observations:
            resid.append(o.y - (1 + o.x_unit[0] + o.x_unit[1]))
            w.append(o.w_unit)
        resid, w = np.array(resid), np.array(w)
        assert resid.mean() > 5 * resid.std() / math.sqrt(resid.size)
        wmean = np.average(resid, weights=w)
        # rough design SE of the weighted mean
        se = math.sqrt(np.sum((w * (resid - wmean)) ** 2)) / w.sum()
        assert abs(wmean) <= 3 * se

    def test_sim2_tables_share_data(self):
        a = run_replication(Scenario(25, 8, 0.0), "sim2_model1", 55)
        b = run_replication(Scenario(25, 8, 0.0), "sim2_model2", 55)
        assert a.diagnostics.n_observations == b.diagnostics.n_observations


class TestRunTable:
    def test_single_replication_report(self):
        cfg = MonteCarloConfig(B=1, scenarios=(Scenario(25, 6, 0.0),),
                               master_seed=9)
        rep = run_table(cfg, "sim1")
        row = rep.rows[0]
        assert math.isnan(row.est_sd_weighted)  # SD undefined at B=1
        one = run_replication(Scenario(25, 6, 0.0), "sim1",
                              np.random.SeedSequence(entropy=9,
                                                     spawn_key=(0, 0)))
        assert row.est_mean_weighted == pytest.approx(
            one.estimates["weighted"]["beta0"])

    def test_parallel_equals_serial(self):
        cfg = MonteCarloConfig(B=6, scenarios=(Scenario(20, 6, 0.0),),
                               master_seed=3)
        serial = run_table(cfg, "sim1", threads=1)
        parallel = run_table(cfg, "sim1", threads=3)
        assert serial.to_csv_text() == parallel.to_csv_text()

    def test_truth_columns(self):
        assert table_truths("sim1")["sigma2_u"] == 1.0
        assert table_truths("sim2_model1")["sigma2_u"] == pytest.approx(2.25)

    def test_csv_columns(self):
        cfg = MonteCarloConfig(B=2, scenarios=(Scenario(15, 5, 0.0),),
                               master_seed=1)
        text = run_table(cfg, "sim2_model2").to_csv_text()
        header = text.splitlines()[0]
        assert header == ("scenario,parameter,truth,est_mean_unweighted,"
                          "est_sd_unweighted,est_mean_weighted,"
                          "est_sd_weighted,coverage_weighted,"
                          "coverage_unweighted,nonconverged")

    def test_markdown_cell_format(self):
        cfg = MonteCarloConfig(B=3, scenarios=(Scenario(15, 5, 0.0),),
                               master_seed=1)
        md = run_table(cfg, "sim2_model2").to_markdown_text()
        import re
        assert re.search(r"\| -?\d+\.\d{3} \(\d+\.\d{3}\) \|", md)
