"""Agglomerative hierarchical clustering over similarity matrices.

Similarities convert to distances, clusters merge bottom-up under a chosen
linkage, and the dendrogram is cut into coherent machine groups either at
a fixed count, at a height, or at the largest jump between merge heights.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .coherency import SimilarityMatrix

LINKAGES = ("single", "complete", "average")
CUT_CRITERIA = ("largest_gap", "fixed_k", "height")


def n_pairs(n_g: int) -> int:
    """Number of unordered machine pairs (distinct similarities)."""
    if n_g < 1:
        raise ValueError("need at least one generator")
    return n_g * (n_g - 1) // 2


@dataclass(frozen=True)
class DistanceMatrix:
    values: np.ndarray
    labels: tuple[str, ...]
    source_metric: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        n = len(self.labels)
        if values.shape != (n, n):
            raise ValueError("distance dimensions do not match labels")
        if np.max(np.abs(values - values.T), initial=0.0) > 1e-12:
            raise ValueError("distance matrix must be symmetric")
        if np.any(np.diag(values) != 0.0):
            raise ValueError("distance diagonal must be zero")
        if np.min(values, initial=0.0) < 0.0:
            raise ValueError("distances must be nonnegative")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def order(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class Merge:
    a: int
    b: int
    height: float


@dataclass(frozen=True)
class Dendrogram:
    """Merge list in scipy convention: leaves are 0..n-1, merge k forms n+k."""

    merges: tuple[Merge, ...]
    leaf_labels: tuple[str, ...]
    source_metric: str = ""

    @property
    def order(self) -> int:
        return len(self.leaf_labels)

    def heights(self) -> np.ndarray:
        return np.array([m.height for m in self.merges])


@dataclass(frozen=True)
class CoherencyGrouping:
    groups: tuple[tuple[str, ...], ...]
    source_metric: str
    cut_height: float

    def __post_init__(self):
        flat = [lab for grp in self.groups for lab in grp]
        if len(flat) != len(set(flat)):
            raise ValueError("groups must be disjoint")
        if any(len(grp) == 0 for grp in self.groups):
            raise ValueError("groups must be non-empty")

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def as_sets(self) -> set[frozenset]:
        return {frozenset(grp) for grp in self.groups}


def to_distance(sim: SimilarityMatrix) -> DistanceMatrix:
    """Bridge similarities to clustering distances.

    cc: d = 1 - CC, range [0, 2]. ks: off-diagonal values are min-max
    normalized to [0, 1] and flipped; a flat Ks matrix (zero range) falls
    back to a uniform d = 0.5 with a warning.
    """
    values = sim.values
    n = sim.order
    if sim.metric == "cc":
        d = 1.0 - values
    else:
        if n < 2:
            d = np.zeros((1, 1))
        else:
            off = values[~np.eye(n, dtype=bool)]
            lo, hi = float(off.min()), float(off.max())
            if hi - lo <= 1e-15 * max(1.0, abs(hi)):
                warnings.warn("all synchronization coefficients equal; "
                              "falling back to uniform distances", stacklevel=2)
                d = np.full((n, n), 0.5)
            else:
                d = 1.0 - (values - lo) / (hi - lo)
    np.fill_diagonal(d, 0.0)
    d = np.clip(d, 0.0, None)
    d = (d + d.T) / 2.0
    return DistanceMatrix(values=d, labels=sim.machine_labels,
                          source_metric=sim.metric)


def agglomerate(d: DistanceMatrix, linkage: str = "average") -> Dendrogram:
    """Merge the closest cluster pair until one cluster remains.

    Inter-cluster distances follow the Lance-Williams updates for single,
    complete, and unweighted-average linkage. Ties break on the smallest
    (min leaf, max leaf) representative pair, so the result is
    deterministic and label-order reproducible.
    """
    if linkage not in LINKAGES:
        raise ValueError(f"unknown linkage {linkage!r}")
    n = d.order
    merges: list[Merge] = []
    if n <= 1:
        return Dendrogram(tuple(merges), d.labels, d.source_metric)

    dist: dict[tuple[int, int], float] = {}
    for i in range(n):
        for j in range(i + 1, n):
            dist[(i, j)] = float(d.values[i, j])
    rep = {i: i for i in range(n)}    # smallest contained leaf
    size = {i: 1 for i in range(n)}
    active = set(range(n))
    next_id = n

    for _ in range(n - 1):
        best = None
        for (a, b), val in dist.items():
            key = (val, min(rep[a], rep[b]), max(rep[a], rep[b]))
            if best is None or key < best[0]:
                best = (key, a, b)
        (height, _, _), a, b = best
        lo, hi = (a, b) if rep[a] <= rep[b] else (b, a)
        merges.append(Merge(lo, hi, height))

        new = next_id
        next_id += 1
        active.discard(a)
        active.discard(b)
        for c in active:
            d_ac = dist.pop((min(a, c), max(a, c)))
            d_bc = dist.pop((min(b, c), max(b, c)))
            if linkage == "single":
                val = min(d_ac, d_bc)
            elif linkage == "complete":
                val = max(d_ac, d_bc)
            else:
                val = (size[a] * d_ac + size[b] * d_bc) / (size[a] + size[b])
            dist[(c, new)] = val
        del dist[(min(a, b), max(a, b))]
        rep[new] = min(rep[a], rep[b])
        size[new] = size[a] + size[b]
        active.add(new)

    return Dendrogram(tuple(merges), d.labels, d.source_metric)


def _membership(dend: Dendrogram, n_merges: int) -> list[list[int]]:
    """Leaf partition after applying the first n_merges merges."""
    n = dend.order
    comp: dict[int, list[int]] = {i: [i] for i in range(n)}
    for k in range(n_merges):
        m = dend.merges[k]
        comp[n + k] = comp.pop(m.a) + comp.pop(m.b)
    groups = sorted((sorted(leaves) for leaves in comp.values()),
                    key=lambda g: g[0])
    return groups


def cut(dend: Dendrogram, criterion: str = "largest_gap", *,
        k: int | None = None, h: float | None = None) -> CoherencyGrouping:
    """Cut a dendrogram into coherent groups.

    fixed_k keeps exactly k clusters; height applies every merge at or
    below h; largest_gap (default) stops just before the largest jump
    between consecutive merge heights, or keeps a single group when the
    heights carry no structure (all within noise of each other).
    """
    if criterion not in CUT_CRITERIA:
        raise ValueError(f"unknown cut criterion {criterion!r}")
    n = dend.order
    heights = dend.heights()

    if criterion == "fixed_k":
        if k is None or not 1 <= k <= n:
            raise ValueError(f"fixed_k requires 1 <= k <= {n}, got {k}")
        applied = n - k
        if applied == 0:
            cut_height = 0.0 if n == 1 else float(heights[0]) / 2.0
        elif applied == n - 1:
            cut_height = float(heights[-1])
        else:
            cut_height = float(heights[applied - 1] + heights[applied]) / 2.0
    elif criterion == "height":
        if h is None:
            raise ValueError("height criterion requires h")
        applied = int(np.searchsorted(heights, h, side="right")) if n > 1 else 0
        cut_height = float(h)
    else:
        if n <= 2:
            # No interior gap exists; treat the record as one coherent group.
            applied = n - 1
            cut_height = float(heights[-1]) if n > 1 else 0.0
        elif heights[-1] - heights[0] <= 1e-12 * max(1.0, heights[-1]):
            applied = n - 1
            cut_height = float(heights[-1])
        else:
            gaps = np.diff(heights)
            g = int(np.argmax(gaps))
            applied = g + 1
            cut_height = float(heights[g] + heights[g + 1]) / 2.0

    groups = _membership(dend, applied)
    labels = tuple(tuple(dend.leaf_labels[i] for i in grp) for grp in groups)
    return CoherencyGrouping(groups=labels, source_metric=dend.source_metric,
                             cut_height=cut_height)


def parse_cut_spec(text: str) -> tuple[str, dict]:
    """Parse CLI cut specs: 'largest_gap', 'fixed_k:3', 'height:0.4'."""
    if text == "largest_gap":
        return "largest_gap", {}
    if text.startswith("fixed_k:"):
        return "fixed_k", {"k": int(text.split(":", 1)[1])}
    if text.startswith("height:"):
        return "height", {"h": float(text.split(":", 1)[1])}
    raise ValueError(f"unknown cut criterion {text!r}")


# --- file formats --------------------------------------------------------------


def grouping_record(grouping: CoherencyGrouping, t_ref: float) -> dict:
    return {
        "t_ref": t_ref,
        "metric": grouping.source_metric,
        "cut_height": grouping.cut_height,
        "groups": [list(grp) for grp in grouping.groups],
    }


def write_groupings_json(records: list[dict], path: str | Path) -> None:
    Path(path).write_text(json.dumps(records, indent=1) + "\n")


def read_grouping_json(path: str | Path) -> CoherencyGrouping:
    """Load one grouping from a records file (the last record of an array)."""
    doc = json.loads(Path(path).read_text())
    rec = doc[-1] if isinstance(doc, list) else doc
    return CoherencyGrouping(
        groups=tuple(tuple(g) for g in rec["groups"]),
        source_metric=rec.get("metric", ""),
        cut_height=float(rec.get("cut_height", 0.0)))


def write_dendrogram_csv(dend: Dendrogram, path: str | Path) -> None:
    """Merge list (cluster ids, height, merged size) for external plotting."""
    n = dend.order
    sizes = {i: 1 for i in range(n)}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cluster_a", "cluster_b", "height", "n_leaves"])
        for k, m in enumerate(dend.merges):
            sizes[n + k] = sizes[m.a] + sizes[m.b]
            writer.writerow([m.a, m.b, f"{m.height:.12g}", sizes[n + k]])
