"""Solve the (pseudo-)ML estimating equations and produce variance estimates.

The optimizer profiles the fixed effects out in closed form (the score is
affine in beta, so each iterate solves one weighted GLS system) and runs a
quasi-Newton loop on the log-scale variance components, followed by a Newton
polish on the natural scale until the score norm drops below tolerance.
Variance components that drift to the lower bound are pinned to exactly zero
and recorded in ``boundary_hit``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm

from .data import HierarchicalDataset, WeightScaling, rescale_weights
from .errors import EstimationError, IdentifiabilityError, ModelError
from .likelihood import (ClusterBundle, ThreeLevelParams, TwoLevelParams,
                         design_three_level, design_two_level,
                         loglik_three_level, loglik_two_level,
                         score_three_level, score_two_level)

SCORE_TOL = 1e-6
PARAM_TOL = 1e-8
MAX_ITER = 500


@dataclass(frozen=True)
class ConvergenceReport:
    iterations: int
    final_score_norm: float
    converged: bool
    boundary_hit: tuple[str, ...] = ()


@dataclass(frozen=True)
class FitResult:
    """Point estimates plus model-based and robust uncertainty."""

    params: TwoLevelParams | ThreeLevelParams
    fixed_names: tuple[str, ...]
    cov_model: np.ndarray = field(compare=False)
    cov_sandwich: np.ndarray = field(compare=False)
    se_robust: np.ndarray = field(compare=False)
    z: np.ndarray = field(compare=False)
    p: np.ndarray = field(compare=False)
    loglik: float = math.nan
    convergence: ConvergenceReport = None
    n_levels: int = 2
    weighted: bool = False
    scaling: WeightScaling = WeightScaling.RAW
    n_top_groups: int = 0

    @property
    def beta(self) -> np.ndarray:
        return self.params.beta

    def variance_names(self) -> list[str]:
        if self.n_levels == 3:
            return ["sigma2_e", "sigma2_u", "sigma2_tau"]
        if self.n_levels == 2:
            return ["sigma2_e", "sigma2_u"]
        return ["sigma2_e"]

    def se_model(self) -> np.ndarray:
        """Model-based standard errors for the fixed effects."""
        k = len(self.fixed_names)
        return np.sqrt(np.clip(np.diag(self.cov_model)[:k], 0.0, None))

    def variance_table(self) -> dict[str, dict[str, float]]:
        k = len(self.fixed_names)
        values = {"sigma2_e": self.params.sigma2_e,
                  "sigma2_u": getattr(self.params, "sigma2_u", 0.0)}
        if self.n_levels == 3:
            values["sigma2_tau"] = self.params.sigma2_tau
        diag = np.diag(self.cov_model)
        out = {}
        for i, name in enumerate(self.variance_names()):
            out[name] = {"estimate": float(values[name]),
                         "se": float(math.sqrt(max(diag[k + i], 0.0)))}
        return out

    def to_json_dict(self) -> dict:
        fixed = []
        se_m = self.se_model()
        for i, name in enumerate(self.fixed_names):
            fixed.append({
                "name": name,
                "coef": float(self.params.beta[i]),
                "se_model": float(se_m[i]),
                "se_robust": float(self.se_robust[i]),
                "z": float(self.z[i]),
                "p": float(self.p[i]),
            })
        return {
            "model": {
                "levels": self.n_levels,
                "weighted": self.weighted,
                "scaling": self.scaling.value,
            },
            "fixed_effects": fixed,
            "variance_components": self.variance_table(),
            "loglik": float(self.loglik),
            "convergence": {
                "iterations": self.convergence.iterations,
                "converged": self.convergence.converged,
                "final_score_norm": float(self.convergence.final_score_norm),
                "boundary_hit": list(self.convergence.boundary_hit),
            },
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_json_dict(), indent=indent)


# ---------------------------------------------------------------------------
# evaluation engine
# ---------------------------------------------------------------------------

class _MixedModel:
    """Wraps a ClusterBundle with level-aware likelihood/score plumbing."""

    def __init__(self, bundle: ClusterBundle, three_level: bool, weighted: bool):
        self.b = bundle
        self.three = three_level
        self.weighted = weighted
        self.p = bundle.p
        self.k_var = 3 if three_level else 2
        w, wc, ws = bundle.weights(weighted)
        self.wu, self.wc, self.ws = w, wc, ws
        self.Wp = np.bincount(bundle.cidx, weights=w, minlength=bundle.m)
        self.M = bundle.cluster_xtx(weighted)
        _, _, _, _, self.t = bundle.unit_stats(np.zeros(self.p), weighted)
        # per-cluster weight including the supercluster factor
        if three_level:
            self.wce = wc * ws[bundle.sidx]
        else:
            self.wce = wc
        self.var_scale = float(np.var(bundle.y)) if bundle.y.size > 1 else 1.0
        if self.var_scale <= 0:
            self.var_scale = 1.0

    def params(self, beta, sig):
        if self.three:
            return ThreeLevelParams(beta=beta, sigma2_e=sig[0], sigma2_u=sig[1],
                                    sigma2_tau=sig[2])
        return TwoLevelParams(beta=beta, sigma2_e=sig[0], sigma2_u=sig[1])

    def loglik(self, beta, sig) -> float:
        if self.three:
            return loglik_three_level(self.b, self.params(beta, sig), self.weighted)
        return loglik_two_level(self.b, self.params(beta, sig), self.weighted)

    def score(self, beta, sig) -> np.ndarray:
        if self.three:
            return score_three_level(self.b, self.params(beta, sig), self.weighted)
        return score_two_level(self.b, self.params(beta, sig), self.weighted)

    # -- closed-form GLS step ----------------------------------------------

    def bread(self, sig) -> np.ndarray:
        """Negative beta-Jacobian of the beta-score (the GLS information)."""
        s2e, s2u = sig[0], sig[1]
        D = s2e + self.Wp * s2u
        outer = np.einsum("ja,jb->jab", self.t, self.t)
        H = (self.M - (s2u / D)[:, None, None] * outer) / s2e
        A = np.einsum("j,jab->ab", self.wce, H)
        if self.three and sig[2] > 0:
            s2t = sig[2]
            P = self.b.super_sum(self.wc * self.Wp / D)
            R = s2t * P + 1.0
            Qb = np.stack([self.b.super_sum(self.wc * self.t[:, a] / D)
                           for a in range(self.p)], axis=1)
            A = A - np.einsum("k,ka,kb->ab", s2t * self.ws / R, Qb, Qb)
        return A

    def gls_beta(self, sig) -> np.ndarray:
        A = self.bread(sig)
        g0 = self.score(np.zeros(self.p), sig)[:self.p]
        try:
            return np.linalg.solve(A, g0)
        except np.linalg.LinAlgError:
            raise ModelError("design matrix is rank deficient under the "
                             "current weights") from None

    # -- per-top-group score contributions (for the sandwich) ---------------

    def beta_score_groups(self, beta, sig) -> np.ndarray:
        s2e, s2u = sig[0], sig[1]
        Wp, S1, _, s, t = self.b.unit_stats(beta, self.weighted)
        D = s2e + Wp * s2u
        U = (self.wc / s2e)[:, None] * (s - (s2u * S1 / D)[:, None] * t)
        if not self.three:
            return U
        s2t = sig[2]
        Cb = np.stack([self.b.super_sum(U[:, a]) for a in range(self.p)], axis=1)
        if s2t == 0.0:
            return self.ws[:, None] * Cb
        P = self.b.super_sum(self.wc * Wp / D)
        Q = self.b.super_sum(self.wc * S1 / D)
        R = s2t * P + 1.0
        Qb = np.stack([self.b.super_sum(self.wc * (-t[:, a]) / D)
                       for a in range(self.p)], axis=1)
        return self.ws[:, None] * (Cb + (s2t * Q / R)[:, None] * Qb)

    @property
    def n_top_groups(self) -> int:
        return self.b.l if self.three else self.b.m


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

def _full_sig(model, free_idx, values, pinned):
    sig = np.array(pinned, dtype=float)
    sig[free_idx] = values
    return sig


def _optimize(model: _MixedModel, sig0: np.ndarray, free_idx: list[int],
              boundary_names: list[str]):
    """Maximize the profiled likelihood over the free variance components."""
    pinned = np.array(sig0, dtype=float)
    pinned[free_idx] = 0.0
    floor = 1e-12 * model.var_scale
    iterations = 0

    def pll_and_grad(v):
        sig = _full_sig(model, free_idx, np.exp(v), pinned)
        beta = model.gls_beta(sig)
        ll = model.loglik(beta, sig)
        g = model.score(beta, sig)[model.p:]
        return ll, g[free_idx] * np.exp(v)

    if free_idx:
        v0 = np.log(np.maximum(sig0[free_idx], floor))
        bound = (math.log(floor), math.log(1e8 * model.var_scale))

        def neg(v):
            ll, g = pll_and_grad(v)
            return -ll, -g

        res = minimize(neg, v0, jac=True, method="L-BFGS-B",
                       bounds=[bound] * len(free_idx),
                       options={"maxiter": 200, "ftol": 1e-15, "gtol": 1e-9})
        iterations += int(res.nit)
        sig_free = np.exp(res.x)
    else:
        sig_free = np.array([])

    sig = _full_sig(model, free_idx, sig_free, pinned)

    # pin components that collapsed to the boundary, then re-optimize the rest
    boundary_tol = 1e-7 * model.var_scale
    hit = []
    for pos, idx in enumerate(list(free_idx)):
        if idx != 0 and sig[idx] <= boundary_tol:
            hit.append(idx)
    if hit:
        new_free = [i for i in free_idx if i not in hit]
        new_sig0 = sig.copy()
        new_sig0[hit] = 0.0
        names = ["sigma2_e", "sigma2_u", "sigma2_tau"]
        sub_names = boundary_names + [names[i] for i in hit]
        sig, beta, rep = _optimize(model, new_sig0, new_free, sub_names)
        rep = ConvergenceReport(
            iterations=rep.iterations + iterations,
            final_score_norm=rep.final_score_norm,
            converged=rep.converged,
            boundary_hit=rep.boundary_hit)
        return sig, beta, rep

    # Newton polish on the natural scale until score norm and step criteria hold
    beta = model.gls_beta(sig)
    rel_change = math.inf
    converged = False
    for _ in range(60):
        if iterations >= MAX_ITER:
            break
        g_full = model.score(beta, sig)
        g_free = g_full[model.p:][free_idx]
        norm = max(float(np.max(np.abs(g_full[:model.p]))),
                   float(np.max(np.abs(g_free))) if free_idx else 0.0)
        if norm <= SCORE_TOL and rel_change <= PARAM_TOL:
            converged = True
            break
        if not free_idx:
            # nothing left to move; beta is exact GLS so only report the norm
            converged = norm <= SCORE_TOL
            break
        iterations += 1
        J = _score_jacobian(model, beta, sig, free_idx)
        try:
            delta = np.linalg.solve(J, -g_free)
        except np.linalg.LinAlgError:
            delta = -g_free
        lam = 1.0
        ll0 = model.loglik(beta, sig)
        for _ in range(40):
            cand = sig.copy()
            cand[free_idx] = sig[free_idx] + lam * delta
            if np.all(cand[free_idx] > 0):
                beta_c = model.gls_beta(cand)
                if model.loglik(beta_c, cand) >= ll0 - 1e-9 * max(abs(ll0), 1.0):
                    break
            lam *= 0.5
        else:
            break
        new_sig = sig.copy()
        new_sig[free_idx] = sig[free_idx] + lam * delta
        new_beta = model.gls_beta(new_sig)
        num = max(float(np.max(np.abs(new_sig - sig))),
                  float(np.max(np.abs(new_beta - beta))))
        den = max(float(np.max(np.abs(new_sig))),
                  float(np.max(np.abs(new_beta))), 1e-12)
        rel_change = num / den
        sig, beta = new_sig, new_beta

    g_full = model.score(beta, sig)
    g_free = g_full[model.p:][free_idx] if free_idx else np.array([])
    norm = max(float(np.max(np.abs(g_full[:model.p]))),
               float(np.max(np.abs(g_free))) if free_idx else 0.0)
    report = ConvergenceReport(
        iterations=iterations,
        final_score_norm=norm,
        converged=converged or norm <= SCORE_TOL,
        boundary_hit=tuple(boundary_names))
    return sig, beta, report


def _score_jacobian(model, beta, sig, free_idx):
    """Central-difference Jacobian of the free variance scores."""
    k = len(free_idx)
    J = np.zeros((k, k))
    for col, idx in enumerate(free_idx):
        h = max(1e-6 * max(sig[idx], 1e-4 * model.var_scale), 1e-12)
        h = min(h, sig[idx] / 2) if sig[idx] > 0 else h
        hi, lo = sig.copy(), sig.copy()
        hi[idx] += h
        lo[idx] = max(lo[idx] - h, 0.0)
        gh = model.score(beta, hi)[model.p:][free_idx]
        gl = model.score(beta, lo)[model.p:][free_idx]
        J[:, col] = (gh - gl) / (hi[idx] - lo[idx])
    return J


def _observed_information(model, beta, sig, free_idx):
    """Negative Hessian of the log-likelihood over (beta, free variances)."""
    names_idx = list(range(model.p)) + [model.p + i for i in free_idx]
    dim_full = model.p + model.k_var
    theta = np.concatenate([beta, sig])

    def score_at(th):
        return model.score(th[:model.p], th[model.p:])

    J = np.zeros((dim_full, dim_full))
    for col in names_idx:
        scale = max(abs(theta[col]), 1e-3)
        h = 1e-5 * scale
        if col >= model.p and theta[col] - h < 0:
            h = max(theta[col] / 2, 1e-12)
        hi, lo = theta.copy(), theta.copy()
        hi[col] += h
        lo[col] -= h if (col < model.p or lo[col] - h >= 0) else 0.0
        J[:, col] = (score_at(hi) - score_at(lo)) / (hi[col] - lo[col])
    info = -(J + J.T) / 2.0
    keep = np.array(names_idx)
    sub = info[np.ix_(keep, keep)]
    cov = np.zeros((dim_full, dim_full))
    try:
        cov_sub = np.linalg.inv(sub)
    except np.linalg.LinAlgError:
        cov_sub = np.linalg.pinv(sub)
    cov[np.ix_(keep, keep)] = cov_sub
    return (cov + cov.T) / 2.0


def _sandwich(model, beta, sig) -> np.ndarray:
    U = model.beta_score_groups(beta, sig)
    m = U.shape[0]
    if m < 2:
        raise EstimationError(
            "the sandwich variance needs at least two independent top-level "
            "groups")
    Uc = U - U.mean(axis=0, keepdims=True)
    meat = (m / (m - 1)) * Uc.T @ Uc
    A = model.bread(sig)
    Ainv = np.linalg.inv(A)
    cov = Ainv @ meat @ Ainv
    return (cov + cov.T) / 2.0


# ---------------------------------------------------------------------------
# starting values
# ---------------------------------------------------------------------------

def _starting_values(model: _MixedModel, three_level: bool):
    b = model.b
    wt = model.wu * model.wce[b.cidx]
    sw = np.sqrt(wt)
    beta0, *_ = np.linalg.lstsq(sw[:, None] * b.X, sw * b.y, rcond=None)
    r = b.y - b.X @ beta0
    nj = b.n_per_cluster
    means = np.bincount(b.cidx, weights=r, minlength=b.m) / nj
    within = r - means[b.cidx]
    dof = max(b.y.size - b.m, 1)
    s2e = float(np.sum(within ** 2) / dof)
    total_var = float(np.var(r)) if r.size > 1 else 1.0
    floor = max(1e-4 * total_var, 1e-10)
    s2e = max(s2e, floor)
    s2u = max(float(np.var(means)) - s2e * float(np.mean(1.0 / nj)), floor)
    if not three_level:
        return beta0, np.array([s2e, s2u])
    per_super = np.bincount(b.sidx, minlength=b.l)
    super_means = np.bincount(b.sidx, weights=means, minlength=b.l) / per_super
    s2t = max(float(np.var(super_means))
              - s2u * float(np.mean(1.0 / per_super)), floor)
    return beta0, np.array([s2e, s2u, s2t])


# ---------------------------------------------------------------------------
# public fitting operations
# ---------------------------------------------------------------------------

def _check_rank(X: np.ndarray):
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise ModelError("design matrix is rank deficient")


def _finish(model, beta, sig, report, fixed_names, n_levels, weighted, scaling,
            free_idx) -> FitResult:
    params = model.params(beta, sig)
    cov_model = _observed_information(model, beta, sig, free_idx)
    cov_sw = _sandwich(model, beta, sig)
    se_rb = np.sqrt(np.clip(np.diag(cov_sw), 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se_rb > 0, beta / se_rb, np.nan)
    pvals = 2.0 * norm.sf(np.abs(z))
    if n_levels == 1:
        params = model.params(beta, sig)
    return FitResult(
        params=params, fixed_names=tuple(fixed_names),
        cov_model=cov_model, cov_sandwich=cov_sw,
        se_robust=se_rb, z=z, p=pvals,
        loglik=model.loglik(beta, sig), convergence=report,
        n_levels=n_levels, weighted=weighted, scaling=WeightScaling(scaling),
        n_top_groups=model.n_top_groups)


def fit_two_level(data: HierarchicalDataset, fixed: Sequence[str] = (),
                  weighted: bool = False,
                  scaling: WeightScaling | str = WeightScaling.RAW) -> FitResult:
    """Maximize the two-level (pseudo-)log-likelihood over (beta, s2e, s2u)."""
    if data.depth < 2:
        raise ModelError("fit_two_level needs data with at least two levels")
    scaling = WeightScaling(scaling)
    work = rescale_weights(data, scaling) if weighted else data
    clusters = design_two_level(work, fixed)
    bundle = ClusterBundle(clusters)
    _check_rank(bundle.X)
    if np.all(bundle.n_per_cluster == 1):
        raise IdentifiabilityError(
            "every cluster is a singleton: only sigma2_e + sigma2_u is "
            "identified; fix the variances or supply multi-unit clusters")
    model = _MixedModel(bundle, three_level=False, weighted=weighted)
    beta0, sig0 = _starting_values(model, three_level=False)
    sig, beta, report = _optimize(model, sig0, [0, 1], [])
    free_idx = [i for i in (0, 1)
                if ["sigma2_e", "sigma2_u"][i] not in report.boundary_hit]
    return _finish(model, beta, sig, report, ["intercept", *fixed], 2,
                   weighted, scaling, free_idx)


def fit_three_level(data: HierarchicalDataset, fixed: Sequence[str] = (),
                    weighted: bool = False,
                    scaling: WeightScaling | str = WeightScaling.RAW) -> FitResult:
    """Maximize the three-level (pseudo-)log-likelihood."""
    if data.depth != 3:
        raise ModelError("fit_three_level needs depth-3 data")
    scaling = WeightScaling(scaling)
    work = rescale_weights(data, scaling) if weighted else data
    groups = design_three_level(work, fixed)
    bundle = ClusterBundle.from_superclusters(groups)
    _check_rank(bundle.X)
    if np.all(bundle.n_per_cluster == 1):
        raise IdentifiabilityError(
            "every level-2 cluster is a singleton: sigma2_e and sigma2_u are "
            "jointly unidentified (real multi-unit clusters are required)")

    # Exact collapse: with one cluster per supercluster and unit level-2
    # weights, the model is a two-level model in sigma2_u + sigma2_tau.
    one_cluster_per_super = bundle.l == bundle.m
    unit_l2_weights = (not weighted) or bool(np.all(np.abs(bundle.wc - 1.0) < 1e-12))
    if one_cluster_per_super and unit_l2_weights:
        merged = [
            type(groups[0].clusters[0])(
                y=grp.clusters[0].y, X=grp.clusters[0].X, W=grp.clusters[0].W,
                w_cluster=grp.w_super)
            for grp in groups]
        b2 = ClusterBundle(merged)
        model2 = _MixedModel(b2, three_level=False, weighted=weighted)
        beta0, sig0 = _starting_values(model2, three_level=False)
        sig2, beta, rep2 = _optimize(model2, sig0, [0, 1], [])
        sig = np.array([sig2[0], sig2[1], 0.0])
        report = ConvergenceReport(
            iterations=rep2.iterations,
            final_score_norm=rep2.final_score_norm,
            converged=rep2.converged,
            boundary_hit=tuple([*rep2.boundary_hit, "sigma2_tau"]))
        model = _MixedModel(bundle, three_level=True, weighted=weighted)
        free_idx = [i for i in (0, 1)
                    if ["sigma2_e", "sigma2_u"][i] not in report.boundary_hit]
        return _finish(model, beta, sig, report, ["intercept", *fixed], 3,
                       weighted, scaling, free_idx)

    model = _MixedModel(bundle, three_level=True, weighted=weighted)
    beta0, sig0 = _starting_values(model, three_level=True)
    sig, beta, report = _optimize(model, sig0, [0, 1, 2], [])
    names = ["sigma2_e", "sigma2_u", "sigma2_tau"]
    free_idx = [i for i in (0, 1, 2) if names[i] not in report.boundary_hit]
    return _finish(model, beta, sig, report, ["intercept", *fixed], 3,
                   weighted, scaling, free_idx)


def fit_linear(data: HierarchicalDataset, fixed: Sequence[str] = (),
               weighted: bool = False) -> FitResult:
    """Weighted single-level Gaussian regression with cluster-robust variance.

    The random intercept is omitted (sigma2_u pinned at zero), so each unit
    contributes with weight w_cluster * w_unit; the sandwich still clusters
    on the level-2 groups.
    """
    clusters = design_two_level(data, fixed)
    bundle = ClusterBundle(clusters)
    _check_rank(bundle.X)
    model = _MixedModel(bundle, three_level=False, weighted=weighted)
    beta0, sig0 = _starting_values(model, three_level=False)
    sig, beta, report = _optimize(model, np.array([sig0[0], 0.0]), [0], [])
    return _finish(model, beta, sig, report, ["intercept", *fixed], 1,
                   weighted, WeightScaling.RAW, [0])


def fit_intercept_closed_form(data: HierarchicalDataset, weighted: bool = False,
                              fixed_variances: tuple[float, float] | None = None
                              ) -> FitResult:
    """Intercept-only fit via the precision-weighted cluster-mean estimator.

    With ``fixed_variances`` the fixed effect comes straight from the
    closed-form expression; otherwise the intercept and the variance
    components are iterated to joint stationarity.
    """
    if fixed_variances is None:
        return fit_two_level(data, (), weighted, WeightScaling.RAW)
    s2e, s2u = fixed_variances
    if not (s2e > 0 and s2u >= 0):
        raise EstimationError("fixed variances must satisfy s2e > 0, s2u >= 0")
    clusters = design_two_level(data, ())
    bundle = ClusterBundle(clusters)
    model = _MixedModel(bundle, three_level=False, weighted=weighted)
    sig = np.array([s2e, s2u])
    beta = model.gls_beta(sig)
    norm_ = float(np.max(np.abs(model.score(beta, sig)[:1])))
    report = ConvergenceReport(iterations=0, final_score_norm=norm_,
                               converged=norm_ <= SCORE_TOL, boundary_hit=())
    return _finish(model, beta, sig, report, ["intercept"], 2, weighted,
                   WeightScaling.RAW, [])


def sandwich_variance(data: HierarchicalDataset, fit: FitResult,
                      weighted: bool | None = None) -> np.ndarray:
    """Recompute the robust covariance of the fixed effects from a dataset.

    Uses per-group score contributions at ``fit.params`` with the m/(m-1)
    correction, clustering on the highest level the fit used.
    """
    if weighted is None:
        weighted = fit.weighted
    work = rescale_weights(data, fit.scaling) if weighted else data
    fixed = [n for n in fit.fixed_names if n != "intercept"]
    if fit.n_levels == 3:
        bundle = ClusterBundle.from_superclusters(design_three_level(work, fixed))
        model = _MixedModel(bundle, three_level=True, weighted=weighted)
        sig = np.array([fit.params.sigma2_e, fit.params.sigma2_u,
                        fit.params.sigma2_tau])
    else:
        bundle = ClusterBundle(design_two_level(work, fixed))
        model = _MixedModel(bundle, three_level=False, weighted=weighted)
        sig = np.array([fit.params.sigma2_e, fit.params.sigma2_u])
    return _sandwich(model, fit.params.beta, sig)
