"""Exact (pseudo-)log-likelihoods and scores for Gaussian random-intercept models.

Every evaluator works from per-cluster sufficient statistics.  For a cluster
with residuals r = y - X b, level-1 weights w_i and cluster weight w_c:

    Wp = sum w_i,  S1 = sum w_i r_i,  S2 = sum w_i r_i^2,  D = s2e + Wp*s2u

    ll = w_c * [ -Wp/2*log(2*pi*s2e) + (log s2e - log D)/2
                 - S2/(2*s2e) + s2u*S1^2/(2*s2e*D) ]

which is the analytic value of the weighted random-intercept integral
(rank-one inverse and determinant via Sherman-Morrison).  The three-level
likelihood integrates the level-3 intercept against the product of the
per-cluster Gaussian kernels in tau:

    ll_k = w_s * [ C + s2t*Q^2/(2R) - log(R)/2 ],   R = s2t*P + 1

with C = sum w_c*c_j, Q = sum w_c*S1_j/D_j and P = sum w_c*Wp_j/D_j over the
clusters of supercluster k.  Constants (2*pi terms) are retained throughout,
so values match dense multivariate-normal densities absolutely.  Variance
components may be exactly zero; the formulas take the analytic limits.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import HierarchicalDataset
from .errors import DataError, ModelError, NumericError

LOG_2PI = math.log(2.0 * math.pi)


def _frozen_array(values, ndim) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != ndim:
        raise DataError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TwoLevelParams:
    """theta = (beta, sigma2_e, sigma2_u); the intercept is beta[0]."""

    beta: np.ndarray
    sigma2_e: float
    sigma2_u: float

    def __post_init__(self):
        object.__setattr__(self, "beta", _frozen_array(self.beta, 1))
        if not np.all(np.isfinite(self.beta)):
            raise DataError("beta must be finite")
        if not (math.isfinite(self.sigma2_e) and self.sigma2_e > 0):
            raise DataError(f"sigma2_e must be > 0, got {self.sigma2_e}")
        if not (math.isfinite(self.sigma2_u) and self.sigma2_u >= 0):
            raise DataError(f"sigma2_u must be >= 0, got {self.sigma2_u}")

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.beta, [self.sigma2_e, self.sigma2_u]])


@dataclass(frozen=True)
class ThreeLevelParams:
    """theta = (beta, sigma2_e, sigma2_u, sigma2_tau)."""

    beta: np.ndarray
    sigma2_e: float
    sigma2_u: float
    sigma2_tau: float

    def __post_init__(self):
        object.__setattr__(self, "beta", _frozen_array(self.beta, 1))
        if not np.all(np.isfinite(self.beta)):
            raise DataError("beta must be finite")
        if not (math.isfinite(self.sigma2_e) and self.sigma2_e > 0):
            raise DataError(f"sigma2_e must be > 0, got {self.sigma2_e}")
        if not (math.isfinite(self.sigma2_u) and self.sigma2_u >= 0):
            raise DataError(f"sigma2_u must be >= 0, got {self.sigma2_u}")
        if not (math.isfinite(self.sigma2_tau) and self.sigma2_tau >= 0):
            raise DataError(f"sigma2_tau must be >= 0, got {self.sigma2_tau}")

    @property
    def sigma2_total(self) -> float:
        return self.sigma2_e + self.sigma2_u + self.sigma2_tau

    @property
    def sigma2_c(self) -> float:
        """Shared variance of units in the same level-2-or-above group."""
        return self.sigma2_u + self.sigma2_tau

    def as_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.beta, [self.sigma2_e, self.sigma2_u, self.sigma2_tau]])


@dataclass(frozen=True)
class DesignedCluster:
    """One cluster ready for likelihood evaluation."""

    y: np.ndarray
    X: np.ndarray
    W: np.ndarray
    w_cluster: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "y", _frozen_array(self.y, 1))
        object.__setattr__(self, "X", _frozen_array(self.X, 2))
        object.__setattr__(self, "W", _frozen_array(self.W, 1))
        n = self.y.shape[0]
        if self.X.shape[0] != n or self.W.shape[0] != n:
            raise DataError("y, X and W must have matching row counts")
        if n == 0:
            raise DataError("a cluster must contain at least one unit")
        if not np.all(self.W > 0) or not np.all(np.isfinite(self.W)):
            raise DataError("level-1 weights must be positive and finite")
        if not (math.isfinite(self.w_cluster) and self.w_cluster > 0):
            raise DataError("w_cluster must be positive and finite")

    @property
    def n(self) -> int:
        return self.y.shape[0]


@dataclass(frozen=True)
class DesignedSupercluster:
    """A level-3 group: its clusters plus the level-3 weight."""

    clusters: tuple[DesignedCluster, ...]
    w_super: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "clusters", tuple(self.clusters))
        if not self.clusters:
            raise DataError("a supercluster must contain at least one cluster")
        if not (math.isfinite(self.w_super) and self.w_super > 0):
            raise DataError("w_super must be positive and finite")


# ---------------------------------------------------------------------------
# design construction from a HierarchicalDataset
# ---------------------------------------------------------------------------

_NAME_RE = re.compile(r"^([xzv])([1-9][0-9]*)$")


def _column_getter(data: HierarchicalDataset, name: str):
    m = _NAME_RE.match(name)
    if not m:
        raise ModelError(f"unknown covariate column {name!r} (expected x#/z#/v#)")
    fam, idx = m.group(1), int(m.group(2)) - 1
    if fam == "x":
        if idx >= data.x_dim():
            raise ModelError(f"column {name!r} exceeds the level-1 covariate count")
        return lambda obs: obs.x_unit[idx]
    if fam == "z":
        def get_z(obs):
            vec = data.clusters[obs.cluster_id].x_cluster
            if idx >= len(vec):
                raise ModelError(
                    f"cluster {obs.cluster_id!r} has no value for column {name!r}")
            return vec[idx]
        return get_z

    def get_v(obs):
        vec = data.superclusters[obs.supercluster_id].x_super
        if idx >= len(vec):
            raise ModelError(
                f"supercluster {obs.supercluster_id!r} has no value for "
                f"column {name!r}")
        return vec[idx]
    return get_v


def design_matrix(data: HierarchicalDataset,
                  fixed: Sequence[str]) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Return (y, X, names); X has a leading column of ones."""
    if not data.observations:
        raise ModelError("cannot build a design from an empty dataset")
    getters = [_column_getter(data, name) for name in fixed]
    n = data.n_observations
    y = np.array([obs.y for obs in data.observations])
    X = np.ones((n, 1 + len(getters)))
    for j, get in enumerate(getters, start=1):
        X[:, j] = [get(obs) for obs in data.observations]
    names = ["intercept"] + list(fixed)
    return y, X, names


def design_two_level(data: HierarchicalDataset,
                     fixed: Sequence[str] = ()) -> list[DesignedCluster]:
    """Group observations by cluster, in order of first appearance."""
    y, X, _ = design_matrix(data, fixed)
    order: dict[str, list[int]] = {}
    for i, obs in enumerate(data.observations):
        order.setdefault(obs.cluster_id, []).append(i)
    out = []
    for cid, idx in order.items():
        out.append(DesignedCluster(
            y=y[idx], X=X[idx], W=np.array([data.observations[i].w_unit for i in idx]),
            w_cluster=data.clusters[cid].w_cluster))
    return out


def design_three_level(data: HierarchicalDataset,
                       fixed: Sequence[str] = ()) -> list[DesignedSupercluster]:
    """Group observations by supercluster, then by cluster within it."""
    y, X, _ = design_matrix(data, fixed)
    super_order: dict[str, dict[str, list[int]]] = {}
    for i, obs in enumerate(data.observations):
        super_order.setdefault(obs.supercluster_id, {}).setdefault(
            obs.cluster_id, []).append(i)
    out = []
    for sid, cluster_map in super_order.items():
        clusters = tuple(
            DesignedCluster(
                y=y[idx], X=X[idx],
                W=np.array([data.observations[i].w_unit for i in idx]),
                w_cluster=data.clusters[cid].w_cluster)
            for cid, idx in cluster_map.items())
        out.append(DesignedSupercluster(
            clusters=clusters, w_super=data.superclusters[sid].w_super))
    return out


# ---------------------------------------------------------------------------
# flat bundles (shared evaluation path for lists and fitted models)
# ---------------------------------------------------------------------------

class ClusterBundle:
    """Flat arrays plus per-cluster indices; one evaluation path for all APIs."""

    def __init__(self, clusters: Sequence[DesignedCluster],
                 super_index: np.ndarray | None = None,
                 w_super: np.ndarray | None = None):
        if not clusters:
            raise DataError("at least one cluster is required")
        p = clusters[0].X.shape[1]
        if any(c.X.shape[1] != p for c in clusters):
            raise DataError("all clusters must share one design dimension")
        self.m = len(clusters)
        self.p = p
        self.y = np.concatenate([c.y for c in clusters])
        self.X = np.vstack([c.X for c in clusters])
        self.w = np.concatenate([c.W for c in clusters])
        self.cidx = np.repeat(np.arange(self.m), [c.n for c in clusters])
        self.wc = np.array([c.w_cluster for c in clusters])
        self.n_per_cluster = np.array([c.n for c in clusters])
        # supercluster layer (optional)
        if super_index is None:
            self.sidx = None
            self.ws = None
            self.l = 0
        else:
            self.sidx = np.asarray(super_index, dtype=int)
            self.ws = np.asarray(w_super, dtype=float)
            self.l = self.ws.shape[0]
        self._ones = np.ones_like(self.w)

    @classmethod
    def from_superclusters(cls, groups: Sequence[DesignedSupercluster]):
        clusters = [c for g in groups for c in g.clusters]
        super_index = np.repeat(np.arange(len(groups)),
                                [len(g.clusters) for g in groups])
        w_super = np.array([g.w_super for g in groups])
        return cls(clusters, super_index=super_index, w_super=w_super)

    # -- per-cluster sufficient statistics ---------------------------------

    def weights(self, weighted: bool):
        if weighted:
            return self.w, self.wc, self.ws
        ones_c = np.ones(self.m)
        ones_s = None if self.ws is None else np.ones(self.l)
        return self._ones, ones_c, ones_s

    def unit_stats(self, beta: np.ndarray, weighted: bool):
        """Return (Wp, S1, S2, s, t) per cluster at the given beta."""
        w, _, _ = self.weights(weighted)
        with np.errstate(over="ignore", invalid="ignore"):
            r = self.y - self.X @ beta
            wr = w * r
            Wp = np.bincount(self.cidx, weights=w, minlength=self.m)
            S1 = np.bincount(self.cidx, weights=wr, minlength=self.m)
            S2 = np.bincount(self.cidx, weights=wr * r, minlength=self.m)
            s = np.empty((self.m, self.p))
            t = np.empty((self.m, self.p))
            for a in range(self.p):
                s[:, a] = np.bincount(self.cidx, weights=wr * self.X[:, a],
                                      minlength=self.m)
                t[:, a] = np.bincount(self.cidx, weights=w * self.X[:, a],
                                      minlength=self.m)
        return Wp, S1, S2, s, t

    def cluster_xtx(self, weighted: bool) -> np.ndarray:
        """Per-cluster sum of w_i x_i x_i' (m, p, p)."""
        w, _, _ = self.weights(weighted)
        M = np.zeros((self.m, self.p, self.p))
        wX = w[:, None] * self.X
        for a in range(self.p):
            for b in range(a, self.p):
                vals = np.bincount(self.cidx, weights=wX[:, a] * self.X[:, b],
                                   minlength=self.m)
                M[:, a, b] = vals
                M[:, b, a] = vals
        return M

    def super_sum(self, values: np.ndarray) -> np.ndarray:
        """Sum a per-cluster array within superclusters."""
        return np.bincount(self.sidx, weights=values, minlength=self.l)


def _cluster_core(Wp, S1, S2, s2e, s2u):
    """Per-cluster log-likelihood pieces c_j, plus D = s2e + Wp*s2u."""
    D = s2e + Wp * s2u
    with np.errstate(over="ignore", invalid="ignore"):
        c = (-0.5 * Wp * (LOG_2PI + math.log(s2e))
             + 0.5 * (math.log(s2e) - np.log(D))
             - S2 / (2.0 * s2e)
             + s2u * S1 ** 2 / (2.0 * s2e * D))
    return c, D


def _check_finite(values: np.ndarray, what: str):
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise NumericError(f"non-finite {what} contribution at cluster index "
                           f"{int(bad[0])}")


# ---------------------------------------------------------------------------
# two-level evaluators
# ---------------------------------------------------------------------------

def _as_bundle(data) -> ClusterBundle:
    if isinstance(data, ClusterBundle):
        return data
    return ClusterBundle(list(data))


def loglik_two_level(data: Sequence[DesignedCluster], params: TwoLevelParams,
                     weighted: bool = True) -> float:
    """Exact marginal (pseudo-)log-likelihood of the two-level model."""
    b = _as_bundle(data)
    Wp, S1, S2, _, _ = b.unit_stats(params.beta, weighted)
    c, _ = _cluster_core(Wp, S1, S2, params.sigma2_e, params.sigma2_u)
    _, wc, _ = b.weights(weighted)
    contrib = wc * c
    _check_finite(contrib, "log-likelihood")
    return float(np.sum(contrib))


def score_two_level(data: Sequence[DesignedCluster], params: TwoLevelParams,
                    weighted: bool = True) -> np.ndarray:
    """Closed-form gradient of ``loglik_two_level`` in (beta, s2e, s2u) order."""
    b = _as_bundle(data)
    s2e, s2u = params.sigma2_e, params.sigma2_u
    Wp, S1, S2, s, t = b.unit_stats(params.beta, weighted)
    _, wc, _ = b.weights(weighted)
    D = s2e + Wp * s2u

    g_beta = (wc / s2e)[:, None] * (s - (s2u * S1 / D)[:, None] * t)
    g_e = wc * (-Wp / (2 * s2e) + 1 / (2 * s2e) - 1 / (2 * D)
                + S2 / (2 * s2e ** 2)
                - s2u * S1 ** 2 * (D + s2e) / (2 * s2e ** 2 * D ** 2))
    g_u = wc * (-Wp / (2 * D) + S1 ** 2 / (2 * D ** 2))
    _check_finite(g_e, "score")
    return np.concatenate([g_beta.sum(axis=0), [g_e.sum(), g_u.sum()]])


# ---------------------------------------------------------------------------
# three-level evaluators
# ---------------------------------------------------------------------------

def _as_super_bundle(data) -> ClusterBundle:
    if isinstance(data, ClusterBundle):
        if data.sidx is None:
            raise DataError("bundle lacks a supercluster layer")
        return data
    return ClusterBundle.from_superclusters(list(data))


def _super_core(b: ClusterBundle, params: ThreeLevelParams, weighted: bool):
    s2e, s2u = params.sigma2_e, params.sigma2_u
    Wp, S1, S2, s, t = b.unit_stats(params.beta, weighted)
    _, wc, ws = b.weights(weighted)
    c, D = _cluster_core(Wp, S1, S2, s2e, s2u)
    C = b.super_sum(wc * c)
    Q = b.super_sum(wc * S1 / D)
    P = b.super_sum(wc * Wp / D)
    return (Wp, S1, S2, s, t, D, wc, ws, C, Q, P)


def loglik_three_level(data: Sequence[DesignedSupercluster],
                       params: ThreeLevelParams,
                       weighted: bool = True) -> float:
    """Exact three-level marginal (pseudo-)log-likelihood.

    The level-2 integral reduces per cluster as in the two-level model; the
    remaining Gaussian kernels in the level-3 intercept are raised to the
    level-2 weights, multiplied within the supercluster, integrated against
    the level-3 density, and the log is scaled by the level-3 weight.
    """
    b = _as_super_bundle(data)
    s2t = params.sigma2_tau
    *_, ws, C, Q, P = _super_core(b, params, weighted)
    R = s2t * P + 1.0
    contrib = ws * (C + s2t * Q ** 2 / (2.0 * R) - 0.5 * np.log(R))
    _check_finite(contrib, "log-likelihood")
    return float(np.sum(contrib))


def score_three_level(data: Sequence[DesignedSupercluster],
                      params: ThreeLevelParams,
                      weighted: bool = True) -> np.ndarray:
    """Gradient of ``loglik_three_level`` in (beta, s2e, s2u, s2t) order."""
    b = _as_super_bundle(data)
    s2e, s2u, s2t = params.sigma2_e, params.sigma2_u, params.sigma2_tau
    Wp, S1, S2, s, t, D, wc, ws, C, Q, P = _super_core(b, params, weighted)
    R = s2t * P + 1.0

    # per-cluster derivatives of c_j, q1_j = S1/D and p1_j = Wp/D
    dc_beta = (1.0 / s2e) * (s - (s2u * S1 / D)[:, None] * t)
    dc_e = (-Wp / (2 * s2e) + 1 / (2 * s2e) - 1 / (2 * D)
            + S2 / (2 * s2e ** 2)
            - s2u * S1 ** 2 * (D + s2e) / (2 * s2e ** 2 * D ** 2))
    dc_u = -Wp / (2 * D) + S1 ** 2 / (2 * D ** 2)
    dq_beta = -t / D[:, None]
    dq_e = -S1 / D ** 2
    dq_u = -S1 * Wp / D ** 2
    dp_e = -Wp / D ** 2
    dp_u = -(Wp / D) ** 2

    def agg(per_cluster):
        if per_cluster.ndim == 1:
            return b.super_sum(wc * per_cluster)
        return np.stack([b.super_sum(wc * per_cluster[:, a])
                         for a in range(per_cluster.shape[1])], axis=1)

    C_b, Q_b = agg(dc_beta), agg(dq_beta)
    C_e, Q_e, P_e = agg(dc_e), agg(dq_e), agg(dp_e)
    C_u, Q_u, P_u = agg(dc_u), agg(dq_u), agg(dp_u)

    def total_scalar(C_x, Q_x, P_x):
        per_super = (C_x + s2t * Q * Q_x / R
                     - s2t ** 2 * Q ** 2 * P_x / (2 * R ** 2)
                     - s2t * P_x / (2 * R))
        return float(np.sum(ws * per_super))

    # P does not depend on beta, so the P_x terms vanish for the beta block.
    g_beta = (ws[:, None] * (C_b + (s2t * Q / R)[:, None] * Q_b)).sum(axis=0)
    g_e = total_scalar(C_e, Q_e, P_e)
    g_u = total_scalar(C_u, Q_u, P_u)
    g_t = float(np.sum(ws * (Q ** 2 / (2 * R ** 2) - P / (2 * R))))
    out = np.concatenate([g_beta, [g_e, g_u, g_t]])
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite score in three-level evaluation")
    return out


# ---------------------------------------------------------------------------
# marginal covariance blocks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CovarianceBlock:
    label: str
    unit_ids: tuple[str, ...]
    matrix: np.ndarray = field(compare=False)


@dataclass(frozen=True)
class MarginalCovariance:
    blocks: tuple[CovarianceBlock, ...]

    @property
    def total_dim(self) -> int:
        return sum(len(b.unit_ids) for b in self.blocks)

    def dense(self) -> np.ndarray:
        n = self.total_dim
        out = np.zeros((n, n))
        at = 0
        for blk in self.blocks:
            k = len(blk.unit_ids)
            out[at:at + k, at:at + k] = blk.matrix
            at += k
        return out


_PSEUDO_SOURCE_RE = re.compile(r"^pseudo:([0-9]+):")


def marginal_covariance(data: HierarchicalDataset,
                        params: ThreeLevelParams) -> MarginalCovariance:
    """Materialize Var(y*) as independent blocks, one per top-level group.

    Groups whose clusters are all genuine compound-symmetry clusters get
    blockdiag(s2e I + s2u J) + s2t J; groups made entirely of singleton
    pseudo clusters under a real supercluster get s2e I + (s2u + s2t) J;
    fully pseudo units are independent with variance s2e + s2u + s2t and are
    collected per source into one diagonal block.  Off-diagonal blocks
    between groups are identically zero.
    """
    s2e, s2u, s2t = params.sigma2_e, params.sigma2_u, params.sigma2_tau

    groups: dict[str, list] = {}
    labels: dict[str, str] = {}
    for obs in data.observations:
        cl = data.clusters[obs.cluster_id]
        sc = data.superclusters[obs.supercluster_id]
        if cl.is_pseudo and sc.is_pseudo:
            m = _PSEUDO_SOURCE_RE.match(sc.supercluster_id)
            key = f"independent:{m.group(1)}" if m else "independent"
            labels[key] = key
        else:
            key = sc.supercluster_id
            labels[key] = f"supercluster:{sc.supercluster_id}"
        groups.setdefault(key, []).append(obs)

    blocks = []
    for key, members in groups.items():
        ids = tuple(o.unit_id for o in members)
        k = len(members)
        if key.startswith("independent"):
            mat = (s2e + s2u + s2t) * np.eye(k)
        else:
            all_pseudo = all(data.clusters[o.cluster_id].is_pseudo for o in members)
            if all_pseudo:
                mat = s2e * np.eye(k) + (s2u + s2t) * np.ones((k, k))
            else:
                mat = s2t * np.ones((k, k))
                cl_of = [o.cluster_id for o in members]
                for i in range(k):
                    for j in range(k):
                        if cl_of[i] == cl_of[j]:
                            mat[i, j] += s2u
                mat += s2e * np.eye(k)
        blocks.append(CovarianceBlock(label=labels[key], unit_ids=ids, matrix=mat))
    return MarginalCovariance(blocks=tuple(blocks))
