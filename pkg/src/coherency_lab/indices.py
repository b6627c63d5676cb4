"""Group-level coupling matrix and the power transient-stability indices.

Aggregating a machine similarity matrix over a coherency grouping yields a
small symmetric group matrix whose diagonal measures intra-group cohesion
and whose off-diagonal measures inter-group coupling. The indices track
its evolution: CF (mean diagonal), SF (mean off-diagonal), and the overall
separation ratio CF/SF = sum(diagonal) / sum(upper off-diagonal).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .clustering import CoherencyGrouping, agglomerate, cut, to_distance
from .coherency import SimilarityMatrix, WindowSpec, cc_matrix, ks_matrix, sliding_windows
from .transient_sim import RotorTrajectory


@dataclass(frozen=True)
class GroupMatrix:
    values: np.ndarray
    grouping: CoherencyGrouping
    t_ref: float
    singleton_groups: tuple[int, ...] = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        n = self.grouping.n_groups
        if values.shape != (n, n):
            raise ValueError("group-matrix dimensions do not match grouping")
        if np.max(np.abs(values - values.T), initial=0.0) > 1e-12:
            raise ValueError("group matrix must be symmetric")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def order(self) -> int:
        return self.grouping.n_groups


def group_matrix(sim: SimilarityMatrix, grouping: CoherencyGrouping,
                 t_ref: float | None = None) -> GroupMatrix:
    """Aggregate machine similarities into a group-by-group matrix.

    Diagonal entry p is the mean similarity over unordered intra-group
    pairs of group p (0, flagged, for singletons); entry (p, q) is the mean
    over all cross pairs.
    """
    index = {lab: i for i, lab in enumerate(sim.machine_labels)}
    covered = {lab for grp in grouping.groups for lab in grp}
    if covered != set(sim.machine_labels):
        raise ValueError("grouping does not cover the similarity matrix machines")

    n = grouping.n_groups
    values = np.zeros((n, n))
    singletons = []
    members = [[index[lab] for lab in grp] for grp in grouping.groups]
    for p, mp in enumerate(members):
        if len(mp) == 1:
            singletons.append(p)
            continue
        pairs = [sim.values[i, j] for a, i in enumerate(mp) for j in mp[a + 1:]]
        values[p, p] = float(np.mean(pairs))
    for p in range(n):
        for q in range(p + 1, n):
            cross = sim.values[np.ix_(members[p], members[q])]
            values[p, q] = values[q, p] = float(np.mean(cross))
    return GroupMatrix(values=values, grouping=grouping,
                       t_ref=sim.t_ref if t_ref is None else t_ref,
                       singleton_groups=tuple(singletons))


def cf(gm: GroupMatrix) -> tuple[np.ndarray, float]:
    """Connectivity factor: per-group diagonal entries and their mean."""
    diag = np.diag(gm.values).copy()
    return diag, float(diag.mean())


def sf(gm: GroupMatrix) -> float:
    """Separation factor: mean inter-group coupling (nan for one group)."""
    n = gm.order
    if n < 2:
        return math.nan
    iu = np.triu_indices(n, k=1)
    return float(gm.values[iu].mean())


def sf_literal(gm: GroupMatrix) -> float:
    """Alternate separation figure: sum of (a_pp + a_pq) / (2 a_pq) over the
    upper triangle. Kept for comparison; the mean off-diagonal is canonical.
    """
    n = gm.order
    if n < 2:
        return math.nan
    total = 0.0
    for p in range(n):
        for q in range(p + 1, n):
            a_pq = gm.values[p, q]
            if a_pq == 0.0:
                return math.inf
            total += (gm.values[p, p] + a_pq) / (2.0 * a_pq)
    return total


def cf_sf(gm: GroupMatrix) -> float:
    """Overall separation status: sum(diagonal) / sum(upper off-diagonal).

    A zero off-diagonal sum (no inter-group coupling, or a single group)
    reports infinity: the total-separation signal.
    """
    num = float(np.trace(gm.values))
    n = gm.order
    if n < 2:
        return math.inf
    iu = np.triu_indices(n, k=1)
    den = float(gm.values[iu].sum())
    if den == 0.0:
        return math.inf
    return num / den


def laplacian_eigs(gm: GroupMatrix) -> np.ndarray:
    """Eigenvalues (ascending) of L = D - W, W = gm with zeroed diagonal."""
    w = gm.values.copy()
    np.fill_diagonal(w, 0.0)
    lap = np.diag(w.sum(axis=1)) - w
    return np.linalg.eigvalsh(lap)


@dataclass(frozen=True)
class IndexSeries:
    times: np.ndarray
    cf: np.ndarray
    cf_per_group: tuple[np.ndarray, ...]
    sf: np.ndarray
    cf_sf: np.ndarray
    n_groups: np.ndarray
    groupings: tuple[CoherencyGrouping, ...]
    group_matrices: tuple[GroupMatrix, ...]
    sf_literal: np.ndarray | None = None

    def __post_init__(self):
        k = len(self.groupings)
        for name in ("times", "cf", "sf", "cf_sf"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (k,):
                raise ValueError(f"index series field {name} has wrong length")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)


def index_series(traj: RotorTrajectory, metric: str = "ks",
                 window: WindowSpec = WindowSpec(),
                 linkage: str = "average",
                 cut_criterion: str = "largest_gap",
                 cut_kwargs: dict | None = None,
                 groupings: CoherencyGrouping | Sequence[CoherencyGrouping] | None = None,
                 with_sf_literal: bool = False) -> IndexSeries:
    """Index time series over sliding windows.

    Per window: build the similarity matrix (correlation over the window,
    or synchronization coefficients at the window end using the epoch then
    in force), pick the grouping, and evaluate the indices. The grouping
    is re-clustered per window by default; pass one grouping to freeze it,
    or a per-window sequence aligned with the windows.
    """
    if metric not in ("cc", "ks"):
        raise ValueError(f"unknown metric {metric!r}")
    if metric == "ks" and not traj.epochs:
        raise ValueError("metric 'ks' requires topology epochs "
                         "(simulate output or the epochs sidecar)")
    windows = sliding_windows(traj, window)
    if isinstance(groupings, CoherencyGrouping):
        fixed: Sequence[CoherencyGrouping | None] = [groupings] * len(windows)
    elif groupings is None:
        fixed = [None] * len(windows)
    else:
        if len(groupings) != len(windows):
            raise ValueError(f"{len(groupings)} groupings for {len(windows)} windows")
        fixed = list(groupings)

    cut_kwargs = cut_kwargs or {}
    times, cf_all, per_group, sf_all, cfsf_all = [], [], [], [], []
    sfl_all, n_all, grp_all, gm_all = [], [], [], []
    for (t0, t1), given in zip(windows, fixed):
        if metric == "cc":
            sim = cc_matrix(traj, (t0, t1))
        else:
            red = traj.epoch_at(t1)
            k = traj.sample_index(t1)
            sim = ks_matrix(red, traj.delta[:, k], t_ref=t1)
        grouping = given
        if grouping is None:
            dend = agglomerate(to_distance(sim), linkage)
            grouping = cut(dend, cut_criterion, **cut_kwargs)
        gm = group_matrix(sim, grouping)
        diag, aggregate = cf(gm)
        times.append(t1)
        cf_all.append(aggregate)
        per_group.append(diag)
        sf_all.append(sf(gm))
        cfsf_all.append(cf_sf(gm))
        if with_sf_literal:
            sfl_all.append(sf_literal(gm))
        n_all.append(gm.order)
        grp_all.append(grouping)
        gm_all.append(gm)

    return IndexSeries(
        times=np.array(times), cf=np.array(cf_all),
        cf_per_group=tuple(per_group), sf=np.array(sf_all),
        cf_sf=np.array(cfsf_all), n_groups=np.array(n_all, dtype=int),
        groupings=tuple(grp_all), group_matrices=tuple(gm_all),
        sf_literal=np.array(sfl_all) if with_sf_literal else None)


def write_indices_csv(series: IndexSeries, path: str | Path) -> None:
    """CSV `time_s,CF,SF,CF_SF,n_groups[,SF_literal],CF_g1..CF_gN`."""
    max_groups = int(series.n_groups.max(initial=0))
    header = ["time_s", "CF", "SF", "CF_SF", "n_groups"]
    if series.sf_literal is not None:
        header.append("SF_literal")
    header += [f"CF_g{p + 1}" for p in range(max_groups)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(series.times.size):
            row = [f"{series.times[k]:.6f}", repr(float(series.cf[k])),
                   repr(float(series.sf[k])), repr(float(series.cf_sf[k])),
                   int(series.n_groups[k])]
            if series.sf_literal is not None:
                row.append(repr(float(series.sf_literal[k])))
            diag = series.cf_per_group[k]
            row += [repr(float(v)) for v in diag]
            row += [""] * (max_groups - diag.size)
            writer.writerow(row)
