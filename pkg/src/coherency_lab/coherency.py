"""Pairwise coherency measures over rotor trajectories.

Two similarity metrics: windowed Pearson correlation of rotor-angle series
("cc") and the instantaneous synchronization coefficient computed from the
reduced network ("ks"): Ks_ij = |E'_i||E'_j| B_ij cos(d_i - d_j) with B the
imaginary part of the reduced admittance.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .transient_sim import ReducedNetwork, RotorTrajectory, read_epochs_json

# Series whose relative peak-to-peak falls below this are treated as
# constant: their correlation is 0/0 and the degenerate convention applies.
CONSTANT_TOL = 1e-12

DEFAULT_WINDOW_LENGTH_S = 2.0
DEFAULT_WINDOW_STEP_S = 0.1


@dataclass(frozen=True)
class WindowSpec:
    length_s: float = DEFAULT_WINDOW_LENGTH_S
    step_s: float = DEFAULT_WINDOW_STEP_S

    def __post_init__(self):
        if self.length_s <= 0 or self.step_s <= 0:
            raise ValueError("window length and step must be positive")


@dataclass(frozen=True)
class SimilarityMatrix:
    values: np.ndarray
    metric: str
    t_ref: float
    machine_labels: tuple[str, ...]
    degenerate_pairs: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        n = len(self.machine_labels)
        if values.shape != (n, n):
            raise ValueError("similarity dimensions do not match labels")
        if self.metric not in ("cc", "ks"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if np.max(np.abs(values - values.T), initial=0.0) > 1e-12:
            raise ValueError("similarity matrix must be symmetric")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def order(self) -> int:
        return len(self.machine_labels)


def _is_constant(x: np.ndarray) -> bool:
    scale = max(1.0, float(np.max(np.abs(x))))
    return float(np.ptp(x)) <= CONSTANT_TOL * scale


def pearson_cc(x, y) -> float:
    """Pearson correlation of two equal-length sample series.

    Computed as (n*Sxy - Sx*Sy) / sqrt((n*Sxx - Sx^2)(n*Syy - Sy^2)) on
    mean-shifted copies (the shift leaves the value unchanged but avoids
    cancellation on small-swing windows). Constant series fall back to the
    degenerate convention: 1 when both are constant, 0 when only one is.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be equal-length 1-D series")
    n = x.size
    if n < 3:
        raise ValueError("need at least 3 samples")
    cx, cy = _is_constant(x), _is_constant(y)
    if cx or cy:
        return 1.0 if (cx and cy) else 0.0
    xs = x - x.mean()
    ys = y - y.mean()
    num = n * np.dot(xs, ys) - xs.sum() * ys.sum()
    den_x = n * np.dot(xs, xs) - xs.sum() ** 2
    den_y = n * np.dot(ys, ys) - ys.sum() ** 2
    r = num / np.sqrt(den_x * den_y)
    return float(min(1.0, max(-1.0, r)))


def degenerate_pair(x, y) -> bool:
    """True when the pair falls under the constant-series convention."""
    return _is_constant(np.asarray(x, float)) or _is_constant(np.asarray(y, float))


def cc_matrix(traj: RotorTrajectory, window: tuple[float, float]) -> SimilarityMatrix:
    """Pairwise correlation of center-of-inertia rotor angles over a window."""
    t0, t1 = window
    if t1 <= t0:
        raise ValueError("window end must follow window start")
    mask = (traj.times >= t0 - 1e-12) & (traj.times <= t1 + 1e-12)
    if int(mask.sum()) < 3:
        raise ValueError(f"window [{t0}, {t1}] holds fewer than 3 samples")
    data = traj.delta_coi()[:, mask]

    m = traj.n_machines
    values = np.eye(m)
    flagged = []
    for i in range(m):
        for j in range(i + 1, m):
            r = pearson_cc(data[i], data[j])
            values[i, j] = values[j, i] = r
            if degenerate_pair(data[i], data[j]):
                flagged.append((traj.machine_labels[i], traj.machine_labels[j]))
    return SimilarityMatrix(values=values, metric="cc", t_ref=float(t1),
                            machine_labels=traj.machine_labels,
                            degenerate_pairs=tuple(flagged))


def ks_matrix(red: ReducedNetwork, delta, t_ref: float = 0.0) -> SimilarityMatrix:
    """Pairwise synchronization coefficients at one instant; zero diagonal.

    Inductive coupling makes Im(y_red) positive off the diagonal, so tight
    small-angle pairs score highest.
    """
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (red.order,):
        raise ValueError(f"expected {red.order} angles, got shape {delta.shape}")
    ee = np.outer(red.e_mag, red.e_mag)
    dd = delta[:, None] - delta[None, :]
    upper = np.triu(ee * red.y_red.imag * np.cos(dd), k=1)
    values = upper + upper.T
    return SimilarityMatrix(values=values, metric="ks", t_ref=float(t_ref),
                            machine_labels=red.machine_labels)


def sync_row_sums(sim: SimilarityMatrix) -> np.ndarray:
    """Per-machine total coupling: row sums of the similarity off-diagonal."""
    values = sim.values.copy()
    np.fill_diagonal(values, 0.0)
    return values.sum(axis=1)


def sliding_windows(traj: RotorTrajectory, spec: WindowSpec) -> list[tuple[float, float]]:
    """Windows [t_k - length, t_k] marching by step, clipped to the record."""
    t0 = float(traj.times[0])
    t_end = float(traj.times[-1])
    if spec.length_s > t_end - t0 + 1e-12:
        raise ValueError(
            f"window length {spec.length_s} s exceeds trajectory span {t_end - t0} s")
    dt = float(np.min(np.diff(traj.times)))
    if int(np.floor(spec.length_s / dt)) + 1 < 3:
        raise ValueError("window holds fewer than 3 samples at this sampling rate")
    windows = []
    t_k = t0 + spec.length_s
    while t_k <= t_end + 1e-9:
        windows.append((t_k - spec.length_s, t_k))
        t_k += spec.step_s
    return windows


def ingest_trajectory_csv(path: str | Path,
                          epochs_path: str | Path | None = None) -> RotorTrajectory:
    """Read a trajectory CSV (degrees, COI reference) and optional epoch sidecar.

    The synchronization-coefficient metric needs the sidecar; correlation
    analysis works from the angle series alone. Speeds are reconstructed by
    differentiation and are diagnostic only.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "time_s":
            raise ValueError(f"{path}: expected 'time_s' as first CSV column")
        labels = tuple(header[1:])
        rows = [[float(v) for v in row] for row in reader if row]
    if not rows:
        raise ValueError(f"{path}: no samples")
    data = np.array(rows)
    times = data[:, 0]
    delta = np.radians(data[:, 1:].T)
    omega = np.gradient(delta, times, axis=1)
    epochs: tuple = ()
    if epochs_path is not None:
        epochs = read_epochs_json(epochs_path)
        if epochs and epochs[0][1].machine_labels != labels:
            raise ValueError("epoch sidecar machine labels do not match trajectory")
    return RotorTrajectory(times=times, delta=delta, omega=omega,
                           epochs=epochs, machine_labels=labels, h_sec=None)
