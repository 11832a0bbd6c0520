"""Adaptive Gauss-Hermite evaluation of the defining random-intercept integrals.

This is the numerical oracle the analytic evaluators are tested against: it
works directly from the integral definitions (density products summed in log
space), never through the Sherman-Morrison reduction.  Integrals are taken
under an exact change of variables (center and scale only affect convergence
speed, not the value): the level-2 integral is centered on the Gaussian
posterior of the intercept, the level-3 integral on a numerically located
mode.  Intended for small test instances; cost grows as nodes^levels.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.special import logsumexp, roots_hermite

from .errors import NumericError
from .likelihood import (DesignedCluster, DesignedSupercluster, ThreeLevelParams,
                         TwoLevelParams)

LOG_2PI = math.log(2.0 * math.pi)


def _log_normal(res, s2):
    return -0.5 * (LOG_2PI + math.log(s2)) - res ** 2 / (2.0 * s2)


def _cluster_log_integral(cluster: DesignedCluster, beta, s2e, s2u,
                          weighted: bool, centers: np.ndarray,
                          nodes: int) -> np.ndarray:
    """log int prod_i f(y_i | a)^{w_i} N(a; c, s2u) da for each prior mean c.

    The substitution a = mu(c) + sqrt(2)/sqrt(prec) * z uses the integrand's
    own Gaussian posterior location, computed from the raw data sums; the
    integrand itself stays the plain product of weighted normal densities.
    """
    w = cluster.W if weighted else np.ones_like(cluster.W)
    r = cluster.y - cluster.X @ beta
    if s2u == 0.0:
        res = r[None, :] - centers[:, None]
        return (w[None, :] * _log_normal(res, s2e)).sum(axis=1)

    prec = w.sum() / s2e + 1.0 / s2u
    mu = ((w * r).sum() / s2e + centers / s2u) / prec
    scale = 1.0 / math.sqrt(prec)
    z, xi = roots_hermite(nodes)
    alpha = mu[:, None] + math.sqrt(2.0) * scale * z[None, :]
    res = r[None, None, :] - alpha[:, :, None]
    log_f = (w[None, None, :] * _log_normal(res, s2e)).sum(axis=2)
    log_f += _log_normal(alpha - centers[:, None], s2u)
    vals = log_f + (z ** 2)[None, :] + np.log(xi)[None, :]
    return logsumexp(vals, axis=1) + 0.5 * math.log(2.0) + math.log(scale)


def _numeric_mode(log_f, lo, hi, steps=161, refine=60):
    """Grid scan plus ternary refinement of a 1-d log-density mode."""
    grid = np.linspace(lo, hi, steps)
    vals = log_f(grid)
    i = int(np.argmax(vals))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, steps - 1)]
    for _ in range(refine):
        m1 = a + (b - a) / 3.0
        m2 = b - (b - a) / 3.0
        if log_f(np.array([m1]))[0] < log_f(np.array([m2]))[0]:
            a = m1
        else:
            b = m2
    return 0.5 * (a + b)


def _curvature_scale(log_f, mode, fallback):
    h = max(1e-4, 1e-4 * abs(mode))
    f0 = log_f(np.array([mode]))[0]
    fp = log_f(np.array([mode + h]))[0]
    fm = log_f(np.array([mode - h]))[0]
    second = (fp - 2.0 * f0 + fm) / h ** 2
    if second < 0 and math.isfinite(second):
        return 1.0 / math.sqrt(-second)
    return fallback


def _two_level(clusters, params: TwoLevelParams, weighted, nodes) -> float:
    zero = np.zeros(1)
    total = 0.0
    for cl in clusters:
        wc = cl.w_cluster if weighted else 1.0
        log_i = _cluster_log_integral(cl, params.beta, params.sigma2_e,
                                      params.sigma2_u, weighted, zero, nodes)
        total += wc * float(log_i[0])
    return total


def _three_level(groups, params: ThreeLevelParams, weighted, nodes) -> float:
    s2t = params.sigma2_tau
    total = 0.0
    for grp in groups:
        def log_g(taus):
            acc = _log_normal(taus, s2t) if s2t > 0 else np.zeros_like(taus)
            for cl in grp.clusters:
                wj = cl.w_cluster if weighted else 1.0
                acc = acc + wj * _cluster_log_integral(
                    cl, params.beta, params.sigma2_e, params.sigma2_u,
                    weighted, taus, nodes)
            return acc

        if s2t == 0.0:
            log_outer = float(log_g(np.zeros(1)))
        else:
            st = math.sqrt(s2t)
            resid_span = [float(np.mean(cl.y - cl.X @ params.beta))
                          for cl in grp.clusters]
            lo = min(min(resid_span), 0.0) - 8.0 * st
            hi = max(max(resid_span), 0.0) + 8.0 * st
            mode = _numeric_mode(log_g, lo, hi)
            scale = _curvature_scale(log_g, mode, st)
            z, xi = roots_hermite(nodes)
            taus = mode + math.sqrt(2.0) * scale * z
            vals = log_g(taus) + z ** 2 + np.log(xi)
            log_outer = float(logsumexp(vals)
                              + 0.5 * math.log(2.0) + math.log(scale))
        ws = grp.w_super if weighted else 1.0
        total += ws * log_outer
    return total


def loglik_quadrature_oracle(data: Sequence, params, weighted: bool = True,
                             node_counts: tuple[int, int] = (96, 144),
                             tol: float = 1e-8) -> float:
    """Evaluate the defining integral(s) by high-order Gauss-Hermite rules.

    ``data`` is a sequence of :class:`DesignedCluster` (with
    :class:`TwoLevelParams`) or of :class:`DesignedSupercluster` (with
    :class:`ThreeLevelParams`).  The integral is evaluated at each node count
    in ``node_counts``; if successive refinements disagree by more than
    ``tol``, the node count is flagged as too small.  Intended for small
    instances (roughly ten clusters or fewer).
    """
    data = list(data)
    if isinstance(params, ThreeLevelParams):
        if not all(isinstance(g, DesignedSupercluster) for g in data):
            raise TypeError("three-level params require DesignedSupercluster data")
        evaluate = lambda n: _three_level(data, params, weighted, n)
    elif isinstance(params, TwoLevelParams):
        if not all(isinstance(c, DesignedCluster) for c in data):
            raise TypeError("two-level params require DesignedCluster data")
        evaluate = lambda n: _two_level(data, params, weighted, n)
    else:
        raise TypeError(f"unsupported params type {type(params).__name__}")

    values = [evaluate(n) for n in node_counts]
    for prev, cur in zip(values, values[1:]):
        if not math.isfinite(cur) or abs(cur - prev) > tol:
            raise NumericError(
                f"quadrature did not stabilize: node counts {node_counts} "
                f"gave {values}")
    return values[-1]
