"""Finite populations, informative multi-stage sampling, Monte Carlo harness.

Populations follow the two generative models used throughout the simulation
study: a unit-level covariate model (``model3``) and a cluster-level model
with an interaction (``model4``).  Cluster selection is systematic PPS on a
randomly permuted list; unit selection is Poisson sampling whose size
measures depend on the sign of the residual, making both stages informative.
Replications are seeded from a counter-based stream per (scenario, rep) so
parallel execution cannot change results.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .data import (HierarchicalDataset, WeightScaling, build_dataset,
                   combine_two_level)
from .fitting import FitResult, fit_linear, fit_two_level

DEFAULT_POPULATION_CLUSTERS = 1000
DEFAULT_SINGLETON_POOL_FACTOR = 4
Z_95 = 1.959963984540054

TABLES = ("sim1", "sim2_model1", "sim2_model2")

_TABLE_MODEL = {
    "sim1": ("model3", (1.0, 1.0, 1.0), 1.0),
    "sim2_model1": ("model4", (1.0, 1.0, 1.0, -1.0), 0.5),
    "sim2_model2": ("model4", (1.0, 1.0, 1.0, -1.0), 0.5),
}


# ---------------------------------------------------------------------------
# population generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PopulationSpec:
    """Settings of the finite-population generator."""

    model: str
    coefficients: tuple[float, ...]
    sigma_u: float
    M: int
    seed: int

    def __post_init__(self):
        if self.model not in ("model3", "model4"):
            raise ValueError(f"model must be 'model3' or 'model4', got {self.model!r}")
        need = 3 if self.model == "model3" else 4
        if len(self.coefficients) != need:
            raise ValueError(f"{self.model} needs {need} coefficients")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.sigma_u < 0:
            raise ValueError("sigma_u must be >= 0")


@dataclass(frozen=True)
class Population:
    spec: PopulationSpec
    z: np.ndarray
    u: np.ndarray
    N: np.ndarray
    offsets: np.ndarray
    e: np.ndarray
    y: np.ndarray
    x_unit: np.ndarray | None = None
    x_cluster: np.ndarray | None = None

    @property
    def M(self) -> int:
        return self.N.shape[0]

    def units_of(self, j: int) -> slice:
        return slice(self.offsets[j], self.offsets[j + 1])


def cluster_size_from_z(z):
    """N_j = round(500 * logistic(2.5 + z_j)), clamped to [100, 500]."""
    return np.clip(np.rint(500.0 * expit(2.5 + np.asarray(z, dtype=float))),
                   100, 500).astype(int)


def generate_population(spec: PopulationSpec) -> Population:
    """Draw a finite clustered population; deterministic for a fixed seed."""
    rng = np.random.default_rng(spec.seed)
    z = rng.standard_normal(spec.M)
    N = cluster_size_from_z(z)
    u = spec.sigma_u * rng.standard_normal(spec.M)
    total = int(N.sum())
    offsets = np.concatenate([[0], np.cumsum(N)])
    cluster_index = np.repeat(np.arange(spec.M), N)

    if spec.model == "model3":
        b0, b1, b2 = spec.coefficients
        x_unit = rng.exponential(1.0, size=total) + 1.0
        e = rng.standard_normal(total)
        y = b0 + b1 * x_unit + b2 * z[cluster_index] + u[cluster_index] + e
        return Population(spec=spec, z=z, u=u, N=N, offsets=offsets, e=e, y=y,
                          x_unit=x_unit)
    b0, b1, b2, b3 = spec.coefficients
    x_cl = rng.exponential(1.0, size=spec.M) + 1.0
    e = rng.standard_normal(total)
    xz = x_cl[cluster_index]
    y = (b0 + b1 * xz + b2 * z[cluster_index] + b3 * xz * z[cluster_index]
         + u[cluster_index] + e)
    return Population(spec=spec, z=z, u=u, N=N, offsets=offsets, e=e, y=y,
                      x_cluster=x_cl)


def true_sigma_u_model4(coefficients: Sequence[float], sigma_u: float) -> float:
    """Between-cluster variance absorbed by the random intercept when the
    fitted model drops z and the x*z interaction (x ~ exp(1)+1, z ~ N(0,1))."""
    _, _, b2, b3 = coefficients
    e_x, e_x2, e_z2 = 2.0, 5.0, 1.0
    return b2 ** 2 * e_z2 + b3 ** 2 * e_x2 * e_z2 + sigma_u ** 2 \
        + 2.0 * b2 * b3 * e_x * e_z2


# ---------------------------------------------------------------------------
# sampling stages
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PPSSample:
    indices: np.ndarray
    p: np.ndarray
    w: np.ndarray
    n_capped: int


def pps_select_clusters(population: Population, m1: int,
                        rng: np.random.Generator) -> PPSSample:
    """Systematic PPS without replacement on a randomly permuted list.

    First-order inclusion probabilities equal p_j = m1 * N_j / sum(N);
    probabilities above 1 are capped and reported in ``n_capped``.
    """
    N = population.N
    if m1 > population.M:
        raise ValueError("m1 cannot exceed the number of population clusters")
    raw = m1 * N / N.sum()
    p = np.minimum(raw, 1.0)
    n_capped = int(np.sum(raw > 1.0))
    perm = rng.permutation(population.M)
    cum = np.cumsum(p[perm])
    total = cum[-1]
    start = rng.uniform()
    points = start + np.arange(math.ceil(total))
    points = points[points < total]
    chosen = perm[np.searchsorted(cum, points, side="right")]
    chosen = np.unique(chosen)
    return PPSSample(indices=chosen, p=p[chosen], w=1.0 / p[chosen],
                     n_capped=n_capped)


@dataclass(frozen=True)
class PoissonSample:
    indices: np.ndarray
    p: np.ndarray
    w: np.ndarray
    n_capped: int


def poisson_select_units(e_cluster: np.ndarray, n: int,
                         rng: np.random.Generator) -> PoissonSample:
    """Poisson sampling with residual-sign size measures.

    Size measures are 0.25 for units with e < 0 and 0.75 otherwise, so
    positive-residual units are three times more likely to be selected.
    Inclusion probabilities p = n * l / sum(l) are capped at 1 (flagged); the
    realized sample may be empty.
    """
    e_cluster = np.asarray(e_cluster, dtype=float)
    l = np.where(e_cluster < 0, 0.25, 0.75)
    raw = n * l / l.sum()
    p = np.minimum(raw, 1.0)
    n_capped = int(np.sum(raw > 1.0))
    keep = rng.random(e_cluster.shape[0]) < p
    idx = np.flatnonzero(keep)
    return PoissonSample(indices=idx, p=p[idx], w=1.0 / p[idx],
                         n_capped=n_capped)


def draw_singleton_sample(spec: PopulationSpec, m2: int, N2: int,
                          rng: np.random.Generator) -> HierarchicalDataset:
    """SRS of m2 standalone units from a fresh size-N2 population.

    Every selected unit becomes a cluster containing only itself with design
    weight N2/m2 at the cluster level and unit weight 1.  Covariate layout
    matches the clustered sample: x1 is the fitted covariate, x2 is z.
    """
    if m2 < 0 or N2 < m2:
        raise ValueError("need 0 <= m2 <= N2")
    if m2 == 0:
        return build_dataset([], depth=1)
    z = rng.standard_normal(N2)
    u = spec.sigma_u * rng.standard_normal(N2)
    x = rng.exponential(1.0, size=N2) + 1.0
    e = rng.standard_normal(N2)
    if spec.model == "model3":
        b0, b1, b2 = spec.coefficients
        y = b0 + b1 * x + b2 * z + u + e
    else:
        b0, b1, b2, b3 = spec.coefficients
        y = b0 + b1 * x + b2 * z + b3 * x * z + u + e
    chosen = rng.choice(N2, size=m2, replace=False)
    w_cl = N2 / m2
    rows = [dict(unit_id=f"g{i}", y=float(y[i]), x=(float(x[i]), float(z[i])),
                 w_unit=1.0, w_cluster=w_cl)
            for i in chosen]
    return build_dataset(rows, depth=1)


# ---------------------------------------------------------------------------
# replications
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    m: int
    n: int
    singleton_pct: float = 0.0

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ValueError("m and n must be >= 1")
        if not 0.0 <= self.singleton_pct < 100.0:
            raise ValueError("singleton_pct must be in [0, 100)")

    @property
    def label(self) -> str:
        return f"({self.m},{self.n}) {self.singleton_pct:g}%"


@dataclass(frozen=True)
class SampleDesign:
    """Resolved multi-stage design for one scenario."""

    m1: int
    n: int
    m2: int
    N2: int

    def __post_init__(self):
        if self.m1 < 1 or self.n < 1 or self.m2 < 0 or self.N2 < self.m2:
            raise ValueError("invalid sample design")

    @property
    def singleton_fraction(self) -> float:
        return self.m2 / (self.m1 + self.m2)

    @classmethod
    def from_scenario(cls, scenario: Scenario,
                      singleton_pool_factor: int = DEFAULT_SINGLETON_POOL_FACTOR):
        m2 = round(scenario.m * scenario.singleton_pct / 100.0)
        return cls(m1=scenario.m - m2, n=scenario.n, m2=m2,
                   N2=m2 * singleton_pool_factor)


_TABLE_PARAMS = {
    "sim1": ("beta0", "beta1", "beta2", "sigma2_e", "sigma2_u"),
    "sim2_model1": ("beta0", "beta1", "sigma2_e", "sigma2_u"),
    "sim2_model2": ("beta0", "beta1"),
}


def table_truths(table: str) -> dict[str, float]:
    model, coefs, sigma_u = _TABLE_MODEL[table]
    if table == "sim1":
        return {"beta0": 1.0, "beta1": 1.0, "beta2": 1.0,
                "sigma2_e": 1.0, "sigma2_u": sigma_u ** 2}
    if table == "sim2_model1":
        return {"beta0": 1.0, "beta1": 1.0, "sigma2_e": 1.0,
                "sigma2_u": true_sigma_u_model4(coefs, sigma_u)}
    return {"beta0": 1.0, "beta1": 1.0}


@dataclass(frozen=True)
class ReplicationDiagnostics:
    n_clusters: int
    n_observations: int
    singleton_fraction: float
    poisson_redraws: int
    pps_capped: int
    poisson_capped: int


@dataclass(frozen=True)
class ReplicationResult:
    scenario: Scenario
    table: str
    estimates: dict
    ses: dict
    covered: dict
    converged: dict
    diagnostics: ReplicationDiagnostics


def _fit_estimates(table: str, fit: FitResult) -> tuple[dict, dict]:
    est, ses = {}, {}
    beta_names = _TABLE_PARAMS[table][:len(fit.params.beta)]
    for i, name in enumerate(beta_names):
        est[name] = float(fit.params.beta[i])
        ses[name] = float(fit.se_robust[i])
    vt = fit.variance_table()
    for name in _TABLE_PARAMS[table]:
        if name.startswith("sigma2") and name in vt:
            est[name] = vt[name]["estimate"]
            ses[name] = vt[name]["se"]
    return est, ses


def assemble_replication_data(scenario: Scenario, table: str, seed,
                              m_population: int = DEFAULT_POPULATION_CLUSTERS,
                              singleton_pool_factor: int = DEFAULT_SINGLETON_POOL_FACTOR,
                              ) -> tuple[HierarchicalDataset, ReplicationDiagnostics]:
    """Generate population(s), draw both samples, and build the combined data."""
    seq = seed if isinstance(seed, np.random.SeedSequence) \
        else np.random.SeedSequence(seed)
    ss_pop, ss_pps, ss_poisson, ss_single = seq.spawn(4)
    design = SampleDesign.from_scenario(scenario, singleton_pool_factor)

    model, coefs, sigma_u = _TABLE_MODEL[table]
    spec = PopulationSpec(
        model=model, coefficients=coefs, sigma_u=sigma_u, M=m_population,
        seed=int(ss_pop.generate_state(1, dtype=np.uint64)[0]))
    pop = generate_population(spec)

    rng_pps = np.random.Generator(np.random.Philox(ss_pps))
    rng_poisson = np.random.Generator(np.random.Philox(ss_poisson))
    pps = pps_select_clusters(pop, design.m1, rng_pps)

    rows = []
    redraws = 0
    poisson_capped = 0
    for j, w_j in zip(pps.indices, pps.w):
        sl = pop.units_of(int(j))
        e_cl = pop.e[sl]
        sel = poisson_select_units(e_cl, design.n, rng_poisson)
        while sel.indices.size == 0:
            redraws += 1
            sel = poisson_select_units(e_cl, design.n, rng_poisson)
        poisson_capped += sel.n_capped
        base = pop.offsets[int(j)]
        zj = float(pop.z[int(j)])
        for local, w_i in zip(sel.indices, sel.w):
            g = base + int(local)
            if pop.x_unit is not None:
                x1 = float(pop.x_unit[g])
            else:
                x1 = float(pop.x_cluster[int(j)])
            rows.append(dict(unit_id=f"c{int(j)}:u{int(local)}",
                             cluster_id=f"c{int(j)}", y=float(pop.y[g]),
                             x=(x1, zj), w_unit=float(w_i),
                             w_cluster=float(w_j)))
    clustered = build_dataset(rows, depth=2)

    sources = [clustered]
    if design.m2 > 0:
        rng_single = np.random.Generator(np.random.Philox(ss_single))
        sources.append(draw_singleton_sample(spec, design.m2, design.N2,
                                             rng_single))
    combined = combine_two_level(sources)
    sizes = combined.cluster_sizes()
    diag = ReplicationDiagnostics(
        n_clusters=len(combined.clusters),
        n_observations=combined.n_observations,
        singleton_fraction=sum(1 for v in sizes.values() if v == 1) / len(sizes),
        poisson_redraws=redraws, pps_capped=pps.n_capped,
        poisson_capped=poisson_capped)
    return combined, diag


def run_replication(scenario: Scenario, table: str, seed,
                    m_population: int = DEFAULT_POPULATION_CLUSTERS,
                    singleton_pool_factor: int = DEFAULT_SINGLETON_POOL_FACTOR,
                    scaling: WeightScaling | str = WeightScaling.CLUSTER_SIZE,
                    ) -> ReplicationResult:
    """One draw-and-fit cycle: both weightings of the table's model."""
    if table not in TABLES:
        raise ValueError(f"unknown table {table!r}; expected one of {TABLES}")
    combined, diag = assemble_replication_data(
        scenario, table, seed, m_population, singleton_pool_factor)

    truths = table_truths(table)
    estimates, ses, covered, converged = {}, {}, {}, {}
    for label, weighted in (("weighted", True), ("unweighted", False)):
        if table == "sim2_model2":
            fit = fit_linear(combined, ("x1",), weighted=weighted)
        elif table == "sim2_model1":
            fit = fit_two_level(combined, ("x1",), weighted=weighted,
                                scaling=scaling)
        else:
            fit = fit_two_level(combined, ("x1", "x2"), weighted=weighted,
                                scaling=scaling)
        converged[label] = bool(fit.convergence.converged)
        est, se = _fit_estimates(table, fit)
        estimates[label] = est
        ses[label] = se
        covered[label] = {
            name: bool(se[name] > 0
                       and abs(est[name] - truths[name]) <= Z_95 * se[name])
            for name in truths}
    return ReplicationResult(scenario=scenario, table=table,
                             estimates=estimates, ses=ses, covered=covered,
                             converged=converged, diagnostics=diag)


# ---------------------------------------------------------------------------
# Monte Carlo aggregation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MonteCarloConfig:
    B: int
    scenarios: tuple[Scenario, ...]
    master_seed: int = 0

    def __post_init__(self):
        if self.B < 1:
            raise ValueError("B must be >= 1")
        if not self.scenarios:
            raise ValueError("at least one scenario is required")


@dataclass(frozen=True)
class ReportRow:
    scenario: str
    parameter: str
    truth: float
    est_mean_unweighted: float
    est_sd_unweighted: float
    est_mean_weighted: float
    est_sd_weighted: float
    coverage_weighted: float
    coverage_unweighted: float
    nonconverged: int


@dataclass(frozen=True)
class SimulationReport:
    table: str
    B: int
    master_seed: int
    rows: tuple[ReportRow, ...]

    _CSV_COLUMNS = ("scenario", "parameter", "truth",
                    "est_mean_unweighted", "est_sd_unweighted",
                    "est_mean_weighted", "est_sd_weighted",
                    "coverage_weighted", "coverage_unweighted", "nonconverged")

    def value(self, scenario_label: str, parameter: str, column: str):
        for row in self.rows:
            if row.scenario == scenario_label and row.parameter == parameter:
                return getattr(row, column)
        raise KeyError((scenario_label, parameter))

    def to_csv_text(self) -> str:
        lines = [",".join(self._CSV_COLUMNS)]
        for row in self.rows:
            cells = []
            for colname in self._CSV_COLUMNS:
                v = getattr(row, colname)
                cells.append(str(v) if not isinstance(v, float) else repr(v))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def to_markdown_text(self) -> str:
        def cell(mean, sd):
            if math.isnan(sd):
                return f"{mean:.3f} (n/a)"
            return f"{mean:.3f} ({sd:.3f})"

        lines = [
            f"# {self.table}: estimates over B = {self.B} replications",
            "",
            "| Scenario | Parameter | True value | Non-weighted | Weighted | "
            "Coverage (non-w.) | Coverage (w.) |",
            "|---|---|---|---|---|---|---|",
        ]
        for row in self.rows:
            lines.append(
                f"| {row.scenario} | {row.parameter} | {row.truth:g} | "
                f"{cell(row.est_mean_unweighted, row.est_sd_unweighted)} | "
                f"{cell(row.est_mean_weighted, row.est_sd_weighted)} | "
                f"{row.coverage_unweighted:.3f} | {row.coverage_weighted:.3f} |")
        return "\n".join(lines) + "\n"


def _replication_job(args) -> tuple[int, int, ReplicationResult]:
    scenario, table, master_seed, s_idx, rep, m_pop, pool_factor, scaling = args
    seq = np.random.SeedSequence(entropy=master_seed, spawn_key=(s_idx, rep))
    result = run_replication(scenario, table, seq, m_pop, pool_factor, scaling)
    return s_idx, rep, result


def run_table(config: MonteCarloConfig, table: str, threads: int = 1,
              m_population: int = DEFAULT_POPULATION_CLUSTERS,
              singleton_pool_factor: int = DEFAULT_SINGLETON_POOL_FACTOR,
              scaling: WeightScaling | str = WeightScaling.CLUSTER_SIZE,
              ) -> SimulationReport:
    """Run every scenario B times and aggregate into the table layout."""
    if table not in TABLES:
        raise ValueError(f"unknown table {table!r}; expected one of {TABLES}")
    jobs = [(scenario, table, config.master_seed, s_idx, rep,
             m_population, singleton_pool_factor, WeightScaling(scaling))
            for s_idx, scenario in enumerate(config.scenarios)
            for rep in range(config.B)]
    results: dict[tuple[int, int], ReplicationResult] = {}
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for s_idx, rep, res in pool.map(_replication_job, jobs,
                                            chunksize=max(1, len(jobs) // (8 * threads))):
                results[(s_idx, rep)] = res
    else:
        for job in jobs:
            s_idx, rep, res = _replication_job(job)
            results[(s_idx, rep)] = res

    truths = table_truths(table)
    rows = []
    for s_idx, scenario in enumerate(config.scenarios):
        reps = [results[(s_idx, r)] for r in range(config.B)]
        nonconverged = sum(
            (not r.converged["weighted"]) + (not r.converged["unweighted"])
            for r in reps)
        for name in _TABLE_PARAMS[table]:
            def collect(label, kind):
                return np.array([
                    r.estimates[label][name] if kind == "est"
                    else float(r.covered[label][name])
                    for r in reps if r.converged[label]])

            est_w, est_u = collect("weighted", "est"), collect("unweighted", "est")
            cov_w, cov_u = collect("weighted", "cov"), collect("unweighted", "cov")

            def mean(a):
                return float(np.mean(a)) if a.size else math.nan

            def sd(a):
                return float(np.std(a, ddof=1)) if a.size > 1 else math.nan

            rows.append(ReportRow(
                scenario=scenario.label, parameter=name, truth=truths[name],
                est_mean_unweighted=mean(est_u), est_sd_unweighted=sd(est_u),
                est_mean_weighted=mean(est_w), est_sd_weighted=sd(est_w),
                coverage_weighted=mean(cov_w), coverage_unweighted=mean(cov_u),
                nonconverged=nonconverged))
    return SimulationReport(table=table, B=config.B,
                            master_seed=config.master_seed, rows=tuple(rows))
