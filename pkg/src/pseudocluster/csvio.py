"""CSV ingestion and emission for hierarchical datasets.

Schema (UTF-8, header required): ``unit_id, cluster_id, supercluster_id, y,
w_unit, w_cluster, w_super`` followed by covariate columns ``x1..xp``
(level 1), ``z1..zq`` (level 2), ``v1..vr`` (level 3).  ``supercluster_id``
is absent for depth-2 files, both id columns for depth-1.  Missing weight
columns default to 1.0.  Plain decimal numbers, comma separator, LF endings.
"""

from __future__ import annotations

import csv
import re
from typing import Sequence

from .data import HierarchicalDataset, build_dataset
from .errors import IngestionError

_ID_COLS = ("unit_id", "cluster_id", "supercluster_id")
_WEIGHT_COLS = ("w_unit", "w_cluster", "w_super")
_COVAR_RE = re.compile(r"^([xzv])([1-9][0-9]*)$")


def _covariate_names(header: Sequence[str]) -> dict[str, list[str]]:
    """Collect x/z/v columns and check each family is contiguous from 1."""
    found: dict[str, dict[int, str]] = {"x": {}, "z": {}, "v": {}}
    for name in header:
        m = _COVAR_RE.match(name)
        if m:
            found[m.group(1)][int(m.group(2))] = name
    out = {}
    for fam, cols in found.items():
        if cols and sorted(cols) != list(range(1, len(cols) + 1)):
            raise IngestionError(
                f"{fam}-covariate columns must be numbered 1..{len(cols)}, "
                f"got {sorted(cols.values())}")
        out[fam] = [cols[i] for i in sorted(cols)]
    return out


def read_csv(path) -> HierarchicalDataset:
    """Parse a dataset file; depth is inferred from the id columns present."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file, header required") from None
        raw_rows = [(lineno, row) for lineno, row in enumerate(reader, start=2)
                    if row and any(cell.strip() for cell in row)]

    header = [h.strip() for h in header]
    if len(set(header)) != len(header):
        raise IngestionError(f"{path}: duplicate column names in header")

    covars = _covariate_names(header)
    known = set(_ID_COLS) | set(_WEIGHT_COLS) | {"y"}
    known |= {c for fam in covars.values() for c in fam}
    unknown = [h for h in header if h not in known]
    if unknown:
        raise IngestionError(f"{path}: unknown column(s) {unknown}")

    for required in ("unit_id", "y"):
        if required not in header:
            raise IngestionError(f"{path}: missing required column {required!r}")
    has_cluster = "cluster_id" in header
    has_super = "supercluster_id" in header
    if has_super and not has_cluster:
        raise IngestionError(
            f"{path}: supercluster_id column requires a cluster_id column")
    if covars["z"] and not has_cluster:
        raise IngestionError(
            f"{path}: z-covariate columns require a cluster_id column")
    if covars["v"] and not has_super:
        raise IngestionError(
            f"{path}: v-covariate columns require a supercluster_id column")
    depth = 1 + has_cluster + has_super

    col = {name: i for i, name in enumerate(header)}

    def cell(row, lineno, name):
        i = col[name]
        if i >= len(row):
            raise IngestionError(f"{path}: row {lineno}: too few fields")
        return row[i].strip()

    def number(row, lineno, name, default=None):
        if name not in col:
            return default
        text = cell(row, lineno, name)
        if text == "" and default is not None:
            return default
        try:
            return float(text)
        except ValueError:
            raise IngestionError(
                f"{path}: row {lineno}, column {name!r}: "
                f"cannot parse {text!r} as a number") from None

    rows = []
    for lineno, row in raw_rows:
        unit_id = cell(row, lineno, "unit_id")
        if not unit_id:
            raise IngestionError(f"{path}: row {lineno}: empty unit_id")
        rec = {
            "unit_id": unit_id,
            "y": number(row, lineno, "y"),
            "w_unit": number(row, lineno, "w_unit", 1.0),
            "w_cluster": number(row, lineno, "w_cluster", 1.0),
            "w_super": number(row, lineno, "w_super", 1.0),
            "x": tuple(number(row, lineno, c) for c in covars["x"]),
            "x_cluster": tuple(number(row, lineno, c) for c in covars["z"]),
            "x_super": tuple(number(row, lineno, c) for c in covars["v"]),
            "_lineno": lineno,
        }
        if has_cluster:
            rec["cluster_id"] = cell(row, lineno, "cluster_id")
            if not rec["cluster_id"]:
                raise IngestionError(f"{path}: row {lineno}: empty cluster_id")
        if has_super:
            rec["supercluster_id"] = cell(row, lineno, "supercluster_id")
            if not rec["supercluster_id"]:
                raise IngestionError(f"{path}: row {lineno}: empty supercluster_id")
        rows.append(rec)

    _check_group_consistency(path, rows, depth, covars)

    seen = {}
    for rec in rows:
        if rec["unit_id"] in seen:
            raise IngestionError(
                f"{path}: row {rec['_lineno']}: duplicate unit_id "
                f"{rec['unit_id']!r} (first at row {seen[rec['unit_id']]})")
        seen[rec["unit_id"]] = rec["_lineno"]

    return build_dataset(rows, depth=depth)


def _check_group_consistency(path, rows, depth, covars):
    """Cluster-level fields must agree across rows of the same group."""
    if depth < 2:
        return
    by_cluster: dict[str, dict] = {}
    for rec in rows:
        cid = rec["cluster_id"]
        fields = {
            "w_cluster": rec["w_cluster"],
            **{name: rec["x_cluster"][i] for i, name in enumerate(covars["z"])},
        }
        if depth == 3:
            fields["supercluster_id"] = rec["supercluster_id"]
        prev = by_cluster.get(cid)
        if prev is None:
            by_cluster[cid] = {"_lineno": rec["_lineno"], **fields}
        else:
            for name, value in fields.items():
                if prev[name] != value:
                    raise IngestionError(
                        f"{path}: row {rec['_lineno']}, column {name!r}: value "
                        f"{value!r} conflicts with row {prev['_lineno']} for "
                        f"cluster {cid!r}")
    if depth < 3:
        return
    by_super: dict[str, dict] = {}
    for rec in rows:
        sid = rec["supercluster_id"]
        fields = {
            "w_super": rec["w_super"],
            **{name: rec["x_super"][i] for i, name in enumerate(covars["v"])},
        }
        prev = by_super.get(sid)
        if prev is None:
            by_super[sid] = {"_lineno": rec["_lineno"], **fields}
        else:
            for name, value in fields.items():
                if prev[name] != value:
                    raise IngestionError(
                        f"{path}: row {rec['_lineno']}, column {name!r}: value "
                        f"{value!r} conflicts with row {prev['_lineno']} for "
                        f"supercluster {sid!r}")


def write_csv(data: HierarchicalDataset, path) -> None:
    """Emit the dataset in its native-depth schema (LF endings, '.' decimals)."""
    p, q, r = data.x_dim(), data.z_dim(), data.v_dim()
    header = ["unit_id"]
    if data.depth >= 2:
        header.append("cluster_id")
    if data.depth == 3:
        header.append("supercluster_id")
    header += ["y", "w_unit", "w_cluster", "w_super"]
    header += [f"x{i}" for i in range(1, p + 1)]
    header += [f"z{i}" for i in range(1, q + 1)]
    header += [f"v{i}" for i in range(1, r + 1)]

    def fmt(v: float) -> str:
        return repr(float(v))

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for obs in data.observations:
            cl = data.clusters[obs.cluster_id]
            sc = data.superclusters[obs.supercluster_id]
            row = [obs.unit_id]
            if data.depth >= 2:
                row.append(obs.cluster_id)
            if data.depth == 3:
                row.append(obs.supercluster_id)
            row += [fmt(obs.y), fmt(obs.w_unit), fmt(cl.w_cluster), fmt(sc.w_super)]
            row += [fmt(v) for v in obs.x_unit]
            if q and len(cl.x_cluster) != q:
                raise IngestionError(
                    f"cannot serialize: cluster {cl.cluster_id!r} lacks the "
                    f"z-covariates other clusters carry")
            if r and len(sc.x_super) != r:
                raise IngestionError(
                    f"cannot serialize: supercluster {sc.supercluster_id!r} lacks "
                    f"the v-covariates other superclusters carry")
            row += [fmt(v) for v in cl.x_cluster]
            row += [fmt(v) for v in sc.x_super]
            writer.writerow(row)
