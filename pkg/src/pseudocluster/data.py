"""Multi-level survey datasets: records, validation, combination, re-weighting.

A dataset always materializes three levels internally (unit, cluster,
supercluster).  Sources of native depth 1 or 2 get deterministic placeholder
groups for the missing levels; pseudo-clustering proper (with ``pseudo:`` ids
and flags) happens in :func:`combine_datasets` / :func:`combine_two_level`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Mapping, Sequence

from .errors import DataError, StructuralError

PSEUDO_PREFIX = "pseudo:"

# Deterministic ids for levels a shallow source does not have.
_IMPLIED_CLUSTER = "_c:{}"
_IMPLIED_SUPER = "_s:{}"


def _check_weight(w, what):
    if not (isinstance(w, (int, float)) and math.isfinite(w) and w > 0):
        raise DataError(f"{what} must be positive and finite, got {w!r}")


@dataclass(frozen=True)
class ObservationRecord:
    """One level-1 unit: outcome, level-1 covariates, conditional weight."""

    unit_id: str
    cluster_id: str
    supercluster_id: str
    y: float
    x_unit: tuple[float, ...] = ()
    w_unit: float = 1.0

    def __post_init__(self):
        if not self.unit_id:
            raise DataError("unit_id must be non-empty")
        if not self.cluster_id:
            raise DataError(f"unit {self.unit_id}: cluster_id must be non-empty")
        if not self.supercluster_id:
            raise DataError(f"unit {self.unit_id}: supercluster_id must be non-empty")
        if not math.isfinite(self.y):
            raise DataError(f"unit {self.unit_id}: y is not finite")
        _check_weight(self.w_unit, f"unit {self.unit_id}: w_unit")


@dataclass(frozen=True)
class ClusterRecord:
    """One level-2 group with its covariates and conditional weight."""

    cluster_id: str
    supercluster_id: str
    x_cluster: tuple[float, ...] = ()
    w_cluster: float = 1.0
    is_pseudo: bool = False

    def __post_init__(self):
        if not self.cluster_id:
            raise DataError("cluster_id must be non-empty")
        _check_weight(self.w_cluster, f"cluster {self.cluster_id}: w_cluster")


@dataclass(frozen=True)
class SuperclusterRecord:
    """One level-3 group with its covariates and weight."""

    supercluster_id: str
    x_super: tuple[float, ...] = ()
    w_super: float = 1.0
    is_pseudo: bool = False

    def __post_init__(self):
        if not self.supercluster_id:
            raise DataError("supercluster_id must be non-empty")
        _check_weight(self.w_super, f"supercluster {self.supercluster_id}: w_super")


class WeightScaling(str, Enum):
    """How :func:`rescale_weights` treats conditional weights."""

    RAW = "raw"
    CLUSTER_SIZE = "cluster-size"


@dataclass(frozen=True)
class HierarchicalDataset:
    """Immutable three-level dataset.  ``depth`` is the native source depth."""

    observations: tuple[ObservationRecord, ...]
    clusters: Mapping[str, ClusterRecord]
    superclusters: Mapping[str, SuperclusterRecord]
    depth: int

    def __post_init__(self):
        if self.depth not in (1, 2, 3):
            raise DataError(f"depth must be 1, 2 or 3, got {self.depth}")
        self._validate()

    def _validate(self):
        seen_units = set()
        cluster_count: dict[str, int] = {}
        for obs in self.observations:
            if obs.unit_id in seen_units:
                raise StructuralError(f"duplicate unit_id {obs.unit_id!r}")
            seen_units.add(obs.unit_id)
            cl = self.clusters.get(obs.cluster_id)
            if cl is None:
                raise StructuralError(
                    f"unit {obs.unit_id!r} references unknown cluster {obs.cluster_id!r}")
            if cl.supercluster_id != obs.supercluster_id:
                raise StructuralError(
                    f"unit {obs.unit_id!r} disagrees with cluster {obs.cluster_id!r} "
                    f"about the supercluster")
            cluster_count[obs.cluster_id] = cluster_count.get(obs.cluster_id, 0) + 1

        super_count: dict[str, int] = {}
        for cid, cl in self.clusters.items():
            if cid != cl.cluster_id:
                raise StructuralError(f"cluster map key {cid!r} != record id")
            if cl.supercluster_id not in self.superclusters:
                raise StructuralError(
                    f"cluster {cid!r} references unknown supercluster "
                    f"{cl.supercluster_id!r}")
            n = cluster_count.get(cid, 0)
            if n < 1:
                raise StructuralError(f"cluster {cid!r} has no observations")
            if cl.is_pseudo and n != 1:
                raise StructuralError(
                    f"pseudo cluster {cid!r} must contain exactly one unit, has {n}")
            super_count[cl.supercluster_id] = super_count.get(cl.supercluster_id, 0) + 1

        for sid, sc in self.superclusters.items():
            if sid != sc.supercluster_id:
                raise StructuralError(f"supercluster map key {sid!r} != record id")
            m = super_count.get(sid, 0)
            if m < 1:
                raise StructuralError(f"supercluster {sid!r} has no clusters")
            if sc.is_pseudo and m != 1:
                raise StructuralError(
                    f"pseudo supercluster {sid!r} must contain exactly one cluster, "
                    f"has {m}")

        for level, dims in (
            ("x", {len(o.x_unit) for o in self.observations}),
            ("z", {len(c.x_cluster) for c in self.clusters.values() if c.x_cluster}),
            ("v", {len(s.x_super) for s in self.superclusters.values() if s.x_super}),
        ):
            if len(dims) > 1:
                raise StructuralError(
                    f"inconsistent {level}-covariate dimension: {sorted(dims)}")

    # -- convenience views ------------------------------------------------

    @property
    def n_observations(self) -> int:
        return len(self.observations)

    def cluster_sizes(self) -> dict[str, int]:
        sizes = {cid: 0 for cid in self.clusters}
        for obs in self.observations:
            sizes[obs.cluster_id] += 1
        return sizes

    def supercluster_sizes(self) -> dict[str, int]:
        """Number of clusters per supercluster."""
        sizes = {sid: 0 for sid in self.superclusters}
        for cl in self.clusters.values():
            sizes[cl.supercluster_id] += 1
        return sizes

    def x_dim(self) -> int:
        return len(self.observations[0].x_unit) if self.observations else 0

    def z_dim(self) -> int:
        dims = {len(c.x_cluster) for c in self.clusters.values() if c.x_cluster}
        return dims.pop() if dims else 0

    def v_dim(self) -> int:
        dims = {len(s.x_super) for s in self.superclusters.values() if s.x_super}
        return dims.pop() if dims else 0


def build_dataset(rows: Sequence[Mapping], depth: int) -> HierarchicalDataset:
    """Assemble a dataset from per-observation dicts, filling implied levels.

    Each row needs ``unit_id`` and ``y``; optional keys are ``x`` (tuple),
    ``w_unit``, ``cluster_id``, ``supercluster_id``, ``w_cluster``, ``w_super``,
    ``x_cluster`` and ``x_super``.  Group-level values must agree across the
    rows of a group; disagreement raises :class:`StructuralError`.
    """
    observations = []
    clusters: dict[str, ClusterRecord] = {}
    superclusters: dict[str, SuperclusterRecord] = {}

    def _register(mapping, record, label):
        old = mapping.get(record_id(record))
        if old is None:
            mapping[record_id(record)] = record
        elif old != record:
            raise StructuralError(
                f"{label} {record_id(record)!r} has conflicting attributes "
                f"across rows")

    def record_id(rec):
        return rec.cluster_id if isinstance(rec, ClusterRecord) else rec.supercluster_id

    for row in rows:
        unit_id = str(row["unit_id"])
        if depth >= 2:
            cid = str(row["cluster_id"])
        else:
            cid = _IMPLIED_CLUSTER.format(unit_id)
        if depth == 3:
            sid = str(row["supercluster_id"])
        elif depth == 2:
            sid = _IMPLIED_SUPER.format(cid)
        else:
            sid = _IMPLIED_SUPER.format(unit_id)

        observations.append(ObservationRecord(
            unit_id=unit_id, cluster_id=cid, supercluster_id=sid,
            y=float(row["y"]), x_unit=tuple(row.get("x", ())),
            w_unit=float(row.get("w_unit", 1.0))))
        _register(clusters, ClusterRecord(
            cluster_id=cid, supercluster_id=sid,
            x_cluster=tuple(row.get("x_cluster", ())),
            w_cluster=float(row.get("w_cluster", 1.0)),
            is_pseudo=cid.startswith(PSEUDO_PREFIX)), "cluster")
        _register(superclusters, SuperclusterRecord(
            supercluster_id=sid,
            x_super=tuple(row.get("x_super", ())),
            w_super=float(row.get("w_super", 1.0)),
            is_pseudo=sid.startswith(PSEUDO_PREFIX)), "supercluster")

    return HierarchicalDataset(
        observations=tuple(observations), clusters=clusters,
        superclusters=superclusters, depth=depth)


# ---------------------------------------------------------------------------
# combination
# ---------------------------------------------------------------------------

def _namespaced(identifier: str, index: int) -> str:
    if identifier.startswith(PSEUDO_PREFIX):
        return f"{PSEUDO_PREFIX}{index}:{identifier[len(PSEUDO_PREFIX):]}"
    return f"s{index}:{identifier}"


def _check_disjoint_units(sources: Sequence[HierarchicalDataset]):
    seen: dict[str, int] = {}
    for idx, src in enumerate(sources):
        for obs in src.observations:
            if obs.unit_id in seen:
                raise StructuralError(
                    f"duplicate unit_id {obs.unit_id!r} in sources "
                    f"{seen[obs.unit_id]} and {idx}")
            seen[obs.unit_id] = idx


def combine_datasets(sources: Sequence[HierarchicalDataset]) -> HierarchicalDataset:
    """Merge sources of mixed depth into one three-level dataset.

    Depth-3 sources pass through unchanged (up to id namespacing).  The top
    grouping of a depth-2 source becomes a supercluster and each of its
    observations gets a fresh singleton pseudo cluster; the observation's
    conditional weight moves onto that pseudo cluster (selecting the pseudo
    cluster *is* selecting the unit, so the within-cluster weight becomes 1).
    Depth-1 observations get a fresh pseudo cluster and pseudo supercluster
    each, keeping the weights exactly where the source put them.
    """
    sources = list(sources)
    if not sources:
        raise ValueError("combine_datasets requires at least one source")
    _check_disjoint_units(sources)

    observations = []
    clusters: dict[str, ClusterRecord] = {}
    superclusters: dict[str, SuperclusterRecord] = {}

    for idx, src in enumerate(sources):
        counter = 0
        if src.depth == 3:
            for obs in src.observations:
                observations.append(replace(
                    obs, unit_id=_namespaced(obs.unit_id, idx),
                    cluster_id=_namespaced(obs.cluster_id, idx),
                    supercluster_id=_namespaced(obs.supercluster_id, idx)))
            for cl in src.clusters.values():
                cid = _namespaced(cl.cluster_id, idx)
                clusters[cid] = replace(
                    cl, cluster_id=cid,
                    supercluster_id=_namespaced(cl.supercluster_id, idx))
            for sc in src.superclusters.values():
                sid = _namespaced(sc.supercluster_id, idx)
                superclusters[sid] = replace(sc, supercluster_id=sid)
        elif src.depth == 2:
            # Promote the source's top grouping to supercluster rank; the
            # placeholder supercluster weight (normally 1) folds in.
            for cl in src.clusters.values():
                sid = _namespaced(cl.cluster_id, idx)
                holder = src.superclusters[cl.supercluster_id]
                superclusters[sid] = SuperclusterRecord(
                    supercluster_id=sid, x_super=cl.x_cluster,
                    w_super=cl.w_cluster * holder.w_super,
                    is_pseudo=cl.is_pseudo)
            for obs in src.observations:
                cid = f"{PSEUDO_PREFIX}{idx}:c{counter}"
                counter += 1
                sid = _namespaced(obs.cluster_id, idx)
                clusters[cid] = ClusterRecord(
                    cluster_id=cid, supercluster_id=sid,
                    w_cluster=obs.w_unit, is_pseudo=True)
                observations.append(replace(
                    obs, unit_id=_namespaced(obs.unit_id, idx),
                    cluster_id=cid, supercluster_id=sid, w_unit=1.0))
        else:
            for obs in src.observations:
                holder_cl = src.clusters[obs.cluster_id]
                holder_sc = src.superclusters[obs.supercluster_id]
                cid = f"{PSEUDO_PREFIX}{idx}:c{counter}"
                sid = f"{PSEUDO_PREFIX}{idx}:s{counter}"
                counter += 1
                superclusters[sid] = SuperclusterRecord(
                    supercluster_id=sid, x_super=holder_sc.x_super,
                    w_super=holder_sc.w_super, is_pseudo=True)
                clusters[cid] = ClusterRecord(
                    cluster_id=cid, supercluster_id=sid,
                    x_cluster=holder_cl.x_cluster,
                    w_cluster=holder_cl.w_cluster, is_pseudo=True)
                observations.append(replace(
                    obs, unit_id=_namespaced(obs.unit_id, idx),
                    cluster_id=cid, supercluster_id=sid))

    return HierarchicalDataset(
        observations=tuple(observations), clusters=clusters,
        superclusters=superclusters, depth=3)


def combine_two_level(sources: Sequence[HierarchicalDataset]) -> HierarchicalDataset:
    """Merge depth-1/depth-2 sources into one two-level dataset.

    This is the combination used when the target model has only a cluster
    level: depth-1 observations become singleton pseudo clusters (keeping
    their weights as placed by the source) and depth-2 clusters stay clusters.
    """
    sources = list(sources)
    if not sources:
        raise ValueError("combine_two_level requires at least one source")
    if any(src.depth > 2 for src in sources):
        raise ValueError("combine_two_level only accepts depth-1 or depth-2 sources")
    _check_disjoint_units(sources)

    rows = []
    for idx, src in enumerate(sources):
        counter = 0
        for obs in src.observations:
            cl = src.clusters[obs.cluster_id]
            if src.depth == 2:
                cid = _namespaced(obs.cluster_id, idx)
            else:
                cid = f"{PSEUDO_PREFIX}{idx}:c{counter}"
                counter += 1
            rows.append(dict(
                unit_id=_namespaced(obs.unit_id, idx), cluster_id=cid,
                y=obs.y, x=obs.x_unit, w_unit=obs.w_unit,
                x_cluster=cl.x_cluster, w_cluster=cl.w_cluster))
    return build_dataset(rows, depth=2)


# ---------------------------------------------------------------------------
# weight rescaling
# ---------------------------------------------------------------------------

def rescale_weights(data: HierarchicalDataset,
                    mode: WeightScaling | str) -> HierarchicalDataset:
    """Rescale conditional weights so they sum to realized group sizes.

    With ``cluster-size`` scaling, level-1 weights are rescaled within every
    cluster to sum to n_jk; level-2 weights are rescaled within every
    supercluster to sum to m_k, but only when the dataset actually has a
    third level (rescaling applies at each level *below* the top of the
    hierarchy).  Top-level weights are never touched.  ``raw`` is a no-op.
    """
    mode = WeightScaling(mode)
    if mode is WeightScaling.RAW:
        return data

    def factor(target, total):
        f = target / total
        # snap to 1 so a second pass is byte-identical, not merely 1e-12 close
        return 1.0 if abs(f - 1.0) < 1e-12 else f

    unit_wsum = {cid: 0.0 for cid in data.clusters}
    for obs in data.observations:
        unit_wsum[obs.cluster_id] += obs.w_unit
    sizes = data.cluster_sizes()
    unit_factor = {cid: factor(sizes[cid], unit_wsum[cid])
                   for cid in data.clusters}

    observations = tuple(
        replace(obs, w_unit=obs.w_unit * unit_factor[obs.cluster_id])
        for obs in data.observations)

    clusters = dict(data.clusters)
    if data.depth == 3:
        cl_wsum = {sid: 0.0 for sid in data.superclusters}
        for cl in data.clusters.values():
            cl_wsum[cl.supercluster_id] += cl.w_cluster
        m_k = data.supercluster_sizes()
        cl_factor = {sid: factor(m_k[sid], cl_wsum[sid])
                     for sid in data.superclusters}
        clusters = {
            cid: replace(cl, w_cluster=cl.w_cluster
                         * cl_factor[cl.supercluster_id])
            for cid, cl in data.clusters.items()}

    return HierarchicalDataset(
        observations=observations, clusters=clusters,
        superclusters=dict(data.superclusters), depth=data.depth)


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSummary:
    n_observations: int
    n_clusters: int
    n_superclusters: int
    depth: int
    singleton_cluster_fraction: float
    pseudo_cluster_fraction: float
    pseudo_supercluster_fraction: float
    w_unit_range: tuple[float, float]
    w_cluster_range: tuple[float, float]
    w_super_range: tuple[float, float]

    def as_dict(self) -> dict:
        return {
            "n_observations": self.n_observations,
            "n_clusters": self.n_clusters,
            "n_superclusters": self.n_superclusters,
            "depth": self.depth,
            "singleton_cluster_fraction": self.singleton_cluster_fraction,
            "pseudo_cluster_fraction": self.pseudo_cluster_fraction,
            "pseudo_supercluster_fraction": self.pseudo_supercluster_fraction,
            "w_unit_min": self.w_unit_range[0],
            "w_unit_max": self.w_unit_range[1],
            "w_cluster_min": self.w_cluster_range[0],
            "w_cluster_max": self.w_cluster_range[1],
            "w_super_min": self.w_super_range[0],
            "w_super_max": self.w_super_range[1],
        }


def summarize(data: HierarchicalDataset) -> DatasetSummary:
    """Counts per level, singleton and pseudo fractions, weight ranges."""
    sizes = data.cluster_sizes()
    n_cl = len(data.clusters)
    n_singleton = sum(1 for n in sizes.values() if n == 1)
    n_pseudo_cl = sum(1 for c in data.clusters.values() if c.is_pseudo)
    n_pseudo_sc = sum(1 for s in data.superclusters.values() if s.is_pseudo)

    def _range(values):
        values = list(values)
        return (min(values), max(values)) if values else (math.nan, math.nan)

    return DatasetSummary(
        n_observations=data.n_observations,
        n_clusters=n_cl,
        n_superclusters=len(data.superclusters),
        depth=data.depth,
        singleton_cluster_fraction=n_singleton / n_cl if n_cl else math.nan,
        pseudo_cluster_fraction=n_pseudo_cl / n_cl if n_cl else math.nan,
        pseudo_supercluster_fraction=(n_pseudo_sc / len(data.superclusters)
                                      if data.superclusters else math.nan),
        w_unit_range=_range(o.w_unit for o in data.observations),
        w_cluster_range=_range(c.w_cluster for c in data.clusters.values()),
        w_super_range=_range(s.w_super for s in data.superclusters.values()),
    )
