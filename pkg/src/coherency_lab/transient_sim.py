"""Classical-model time-domain simulation on the Kron-reduced network.

Loads become constant shunt admittances at their pre-fault voltages,
machines appear as constant EMFs behind transient reactance on internal
nodes, and every non-internal node is eliminated. The swing equations are
integrated with fixed-step RK4 under a timed event schedule; each event
rebuilds the reduced network, opening a new topology epoch.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .grid_model import (
    FAULT_ADMITTANCE,
    AdmittanceMatrix,
    NetworkCase,
    TopologyState,
    build_ybus,
)
from .powerflow import InternalEmf, PowerFlowSolution, internal_emf, solve_power_flow

EVENT_KINDS = ("apply_bus_fault", "clear_bus_fault", "trip_line", "close_line")


class SingularNetworkError(RuntimeError):
    """Kron elimination hit a singular block (e.g. isolated dead node)."""


class NumericalBlowupError(RuntimeError):
    """Integration produced a non-finite state."""


class UnknownTargetError(ValueError):
    """An event references a bus or branch that is not in the case."""


class EventOrderError(ValueError):
    """An event is inconsistent with the running topology state."""


@dataclass(frozen=True)
class SimEvent:
    time_s: float
    kind: str
    target: str

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.time_s < 0:
            raise ValueError(f"negative event time {self.time_s}")


@dataclass(frozen=True)
class EventSchedule:
    events: tuple[SimEvent, ...] = ()

    def __post_init__(self):
        times = [e.time_s for e in self.events]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("event times must be nondecreasing")


def load_events(path: str | Path) -> EventSchedule:
    records = json.loads(Path(path).read_text())
    return EventSchedule(tuple(
        SimEvent(time_s=float(r["time_s"]), kind=r["kind"], target=str(r["target"]))
        for r in records))


def save_events(schedule: EventSchedule, path: str | Path) -> None:
    Path(path).write_text(json.dumps(
        [{"time_s": e.time_s, "kind": e.kind, "target": e.target}
         for e in schedule.events], indent=1) + "\n")


@dataclass(frozen=True)
class ReducedNetwork:
    y_red: np.ndarray
    e_mag: np.ndarray
    machine_labels: tuple[str, ...]

    def __post_init__(self):
        y = np.asarray(self.y_red, dtype=complex)
        e = np.asarray(self.e_mag, dtype=float)
        if y.shape != (len(self.machine_labels),) * 2 or e.shape != (len(self.machine_labels),):
            raise ValueError("reduced-network dimensions inconsistent")
        y.flags.writeable = False
        e.flags.writeable = False
        object.__setattr__(self, "y_red", y)
        object.__setattr__(self, "e_mag", e)

    @property
    def order(self) -> int:
        return len(self.machine_labels)


@dataclass(frozen=True)
class RotorTrajectory:
    """Rotor angles/speed deviations per machine, plus topology epochs.

    `delta` and `omega` have one row per machine and one column per sample.
    Epochs are (start_time, ReducedNetwork) pairs; an epoch is in force
    from its start time up to the next epoch's start.
    """

    times: np.ndarray
    delta: np.ndarray
    omega: np.ndarray
    epochs: tuple[tuple[float, ReducedNetwork], ...]
    machine_labels: tuple[str, ...]
    h_sec: np.ndarray | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        delta = np.asarray(self.delta, dtype=float)
        omega = np.asarray(self.omega, dtype=float)
        m, n = len(self.machine_labels), times.size
        if delta.shape != (m, n) or omega.shape != (m, n):
            raise ValueError("trajectory dimensions inconsistent")
        if np.any(np.diff(times) <= 0):
            raise ValueError("sample times must be strictly increasing")
        starts = [t for t, _ in self.epochs]
        if starts and (sorted(starts) != starts or len(set(starts)) != len(starts)):
            raise ValueError("epoch start times must be unique and sorted")
        for arr in (times, delta, omega):
            arr.flags.writeable = False
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "omega", omega)
        if self.h_sec is not None:
            h = np.asarray(self.h_sec, dtype=float)
            h.flags.writeable = False
            object.__setattr__(self, "h_sec", h)

    @property
    def n_machines(self) -> int:
        return len(self.machine_labels)

    def epoch_at(self, t: float) -> ReducedNetwork:
        """Reduced network in force at time t."""
        if not self.epochs:
            raise ValueError("trajectory has no epochs")
        current = self.epochs[0][1]
        for start, red in self.epochs:
            if start <= t + 1e-12:
                current = red
            else:
                break
        return current

    def delta_coi(self) -> np.ndarray:
        """Angles relative to the center of inertia.

        Uses inertia weights when available; an ingested trajectory without
        inertia data is taken to be COI-referenced already.
        """
        if self.h_sec is None:
            return self.delta
        w = self.h_sec / np.sum(self.h_sec)
        return self.delta - w @ self.delta

    def sample_index(self, t: float) -> int:
        k = int(np.searchsorted(self.times, t - 1e-12))
        if k >= self.times.size:
            k = self.times.size - 1
        return k


def kron_reduce(y_full: AdmittanceMatrix, keep: Iterable[str]) -> AdmittanceMatrix:
    """Schur-complement elimination of every node not in `keep`.

    Returns Y_kk - Y_ke Y_ee^-1 Y_ek over the eliminated set, with kept
    nodes in their original order.
    """
    keep_set = set(keep)
    unknown = keep_set - set(y_full.node_labels)
    if unknown:
        raise KeyError(f"keep set references unknown nodes {sorted(unknown)}")
    k_idx = [i for i, lab in enumerate(y_full.node_labels) if lab in keep_set]
    e_idx = [i for i, lab in enumerate(y_full.node_labels) if lab not in keep_set]
    y = y_full.entries
    if not e_idx:
        return AdmittanceMatrix(y.copy(), tuple(y_full.node_labels))
    y_kk = y[np.ix_(k_idx, k_idx)]
    y_ke = y[np.ix_(k_idx, e_idx)]
    y_ek = y[np.ix_(e_idx, k_idx)]
    y_ee = y[np.ix_(e_idx, e_idx)]
    try:
        x = np.linalg.solve(y_ee, y_ek)
    except np.linalg.LinAlgError as exc:
        raise SingularNetworkError(f"eliminated block is singular: {exc}") from exc
    reduced = y_kk - y_ke @ x
    labels = tuple(y_full.node_labels[i] for i in k_idx)
    return AdmittanceMatrix(reduced, labels)


def build_reduced(case: NetworkCase, sol: PowerFlowSolution,
                  emfs: Sequence[InternalEmf],
                  topology: TopologyState | None = None) -> ReducedNetwork:
    """Reduce the grid to the machine internal nodes for one topology state.

    Loads convert to constant shunts y_L = (P - jQ)/|V|^2 at their solved
    pre-fault voltages; each machine adds an internal node coupled through
    1/(j x'd); all physical buses are then Kron-eliminated.
    """
    topology = topology or TopologyState()
    index = case.bus_index()
    n = len(case.buses)
    m = len(case.generators)
    y = np.zeros((n + m, n + m), dtype=complex)
    y[:n, :n] = build_ybus(case, topology).entries

    for bus in case.buses:
        if bus.p_load != 0.0 or bus.q_load != 0.0:
            i = index[bus.id]
            v2 = sol.v_mag[i] ** 2
            y[i, i] += complex(bus.p_load, -bus.q_load) / v2

    bus_labels = [b.id for b in case.buses]
    taken = set(bus_labels)
    internal_labels = []
    for k, gen in enumerate(case.generators):
        label = gen.id if gen.id not in taken else f"gen:{gen.id}"
        taken.add(label)
        internal_labels.append(label)
        i = index[gen.bus]
        y_g = 1.0 / complex(0.0, gen.xdp)
        y[n + k, n + k] += y_g
        y[i, i] += y_g
        y[n + k, i] -= y_g
        y[i, n + k] -= y_g

    full = AdmittanceMatrix(y, tuple(bus_labels + internal_labels))
    reduced = kron_reduce(full, internal_labels)

    by_machine = {e.machine: e for e in emfs}
    e_mag = np.array([by_machine[g.id].e_mag for g in case.generators])
    return ReducedNetwork(y_red=reduced.entries, e_mag=e_mag,
                          machine_labels=tuple(g.id for g in case.generators))


def electrical_power(red: ReducedNetwork, delta: np.ndarray) -> np.ndarray:
    """Machine electrical power P_ei = sum_j E_i E_j (G_ij cos d_ij + B_ij sin d_ij)."""
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (red.order,):
        raise ValueError(f"expected {red.order} angles, got shape {delta.shape}")
    e = red.e_mag
    dd = delta[:, None] - delta[None, :]
    kernel = red.y_red.real * np.cos(dd) + red.y_red.imag * np.sin(dd)
    return e * (kernel @ e)


class _SwingRhs:
    """Swing-equation right-hand side for one topology epoch.

    Expands cos(d_i - d_j) so each evaluation is a handful of dense
    mat-vecs instead of building machine-by-machine angle grids.
    """

    def __init__(self, red: ReducedNetwork, h_sec: np.ndarray,
                 d_damp: np.ndarray, omega_s: float, p_m: np.ndarray):
        ee = np.outer(red.e_mag, red.e_mag)
        self.eeg = ee * red.y_red.real
        self.eeb = ee * red.y_red.imag
        self.m_inv = omega_s / (2.0 * h_sec)
        self.d_over_ws = d_damp / omega_s
        self.p_m = p_m
        self.n = red.order

    def p_e(self, delta: np.ndarray) -> np.ndarray:
        c = np.cos(delta)
        s = np.sin(delta)
        return (c * (self.eeg @ c) + s * (self.eeg @ s)
                + s * (self.eeb @ c) - c * (self.eeb @ s))

    def __call__(self, state: np.ndarray) -> np.ndarray:
        delta = state[:self.n]
        omega = state[self.n:]
        acc = self.m_inv * (self.p_m - self.p_e(delta) - self.d_over_ws * omega)
        return np.concatenate([omega, acc])


def _rk4_step(rhs, state: np.ndarray, dt: float) -> np.ndarray:
    k1 = rhs(state)
    k2 = rhs(state + 0.5 * dt * k1)
    k3 = rhs(state + 0.5 * dt * k2)
    k4 = rhs(state + dt * k3)
    return state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_swing(red: ReducedNetwork, h_sec: np.ndarray, d_damp: np.ndarray,
                    omega_s: float, p_m: np.ndarray, delta0: np.ndarray,
                    omega0: np.ndarray, dt: float, n_steps: int,
                    t0: float = 0.0):
    """Fixed-step RK4 over one epoch; returns (delta, omega) incl. the start.

    Raises NumericalBlowupError at the first non-finite state.
    """
    m = red.order
    rhs = _SwingRhs(red, np.asarray(h_sec, float), np.asarray(d_damp, float),
                    omega_s, np.asarray(p_m, float))
    delta = np.empty((m, n_steps + 1))
    omega = np.empty((m, n_steps + 1))
    state = np.concatenate([np.asarray(delta0, float), np.asarray(omega0, float)])
    if not np.all(np.isfinite(state)) or not np.all(np.isfinite(rhs(state))):
        raise NumericalBlowupError(f"non-finite state or derivative at t={t0:.6f} s")
    delta[:, 0] = state[:m]
    omega[:, 0] = state[m:]
    for k in range(n_steps):
        state = _rk4_step(rhs, state, dt)
        if not np.all(np.isfinite(state)):
            raise NumericalBlowupError(
                f"non-finite state at t={t0 + (k + 1) * dt:.6f} s")
        delta[:, k + 1] = state[:m]
        omega[:, k + 1] = state[m:]
    return delta, omega


def _apply_event(case: NetworkCase, topology: TopologyState,
                 event: SimEvent) -> TopologyState:
    if event.kind == "apply_bus_fault":
        if event.target not in case.bus_index():
            raise UnknownTargetError(f"event targets unknown bus {event.target!r}")
        return topology.with_fault(event.target, FAULT_ADMITTANCE)
    if event.kind == "clear_bus_fault":
        if event.target not in case.bus_index():
            raise UnknownTargetError(f"event targets unknown bus {event.target!r}")
        try:
            return topology.without_fault(event.target)
        except KeyError as exc:
            raise EventOrderError(str(exc)) from exc
    # line events
    try:
        idx = case.find_branch(event.target)
    except KeyError as exc:
        raise UnknownTargetError(str(exc)) from exc
    branch_id = case.branch_ids()[idx]
    if event.kind == "trip_line":
        return topology.with_branch_out(branch_id)
    return topology.with_branch_in(branch_id)


def simulate(case: NetworkCase, schedule: EventSchedule,
             dt: float = 1e-3, t_stop: float = 10.0) -> RotorTrajectory:
    """Simulate the classical multimachine model under a timed event schedule.

    Mechanical power is pinned to the pre-fault equilibrium electrical
    power, so with an empty schedule the trajectory holds still. Event
    times are snapped to the integration grid (with a warning when they
    do not land on it); each event rebuilds the reduced network.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if t_stop <= 0:
        raise ValueError("t_stop must be positive")

    sol = solve_power_flow(case)
    emfs = internal_emf(case, sol)
    h_sec = np.array([g.h_sec for g in case.generators])
    d_damp = np.array([g.d_damp for g in case.generators])
    omega_s = case.omega_s
    labels = tuple(g.id for g in case.generators)
    m = len(labels)

    n_steps = int(round(t_stop / dt))
    by_step: dict[int, list[SimEvent]] = {}
    for event in schedule.events:
        step = int(round(event.time_s / dt))
        snapped = step * dt
        if abs(snapped - event.time_s) > 1e-9 * max(1.0, abs(event.time_s)):
            warnings.warn(
                f"event at t={event.time_s} s snapped to grid time {snapped} s",
                stacklevel=2)
        if step > n_steps:
            warnings.warn(
                f"event at t={event.time_s} s is beyond t_stop={t_stop} s; ignored",
                stacklevel=2)
            continue
        by_step.setdefault(step, []).append(event)

    topology = TopologyState()
    red = build_reduced(case, sol, emfs, topology)
    delta = np.array([e.delta0 for e in emfs])
    omega = np.zeros(m)
    p_m = electrical_power(red, delta)

    # Events at t=0 replace the initial epoch (P_m keeps the pre-fault value).
    if 0 in by_step:
        for event in by_step.pop(0):
            topology = _apply_event(case, topology, event)
        red = build_reduced(case, sol, emfs, topology)

    epochs: list[tuple[float, ReducedNetwork]] = [(0.0, red)]
    out_delta = np.empty((m, n_steps + 1))
    out_omega = np.empty((m, n_steps + 1))
    out_delta[:, 0] = delta
    out_omega[:, 0] = omega

    event_steps = sorted(by_step)
    segment_starts = [0] + event_steps
    segment_ends = event_steps + [n_steps]
    for start, end in zip(segment_starts, segment_ends):
        if start in by_step:
            for event in by_step[start]:
                topology = _apply_event(case, topology, event)
            red = build_reduced(case, sol, emfs, topology)
            epochs.append((start * dt, red))
        if end == start:
            continue
        seg_delta, seg_omega = integrate_swing(
            red, h_sec, d_damp, omega_s, p_m,
            out_delta[:, start], out_omega[:, start],
            dt, end - start, t0=start * dt)
        out_delta[:, start:end + 1] = seg_delta
        out_omega[:, start:end + 1] = seg_omega

    times = np.arange(n_steps + 1) * dt
    return RotorTrajectory(times=times, delta=out_delta, omega=out_omega,
                           epochs=tuple(epochs), machine_labels=labels,
                           h_sec=h_sec)


def detect_loss_of_sync(traj: RotorTrajectory,
                        threshold: float = np.pi) -> list[tuple[float, tuple[str, str]]]:
    """First times at which a pairwise rotor-angle difference exceeds threshold."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    out = []
    labels = traj.machine_labels
    for i in range(traj.n_machines):
        for j in range(i + 1, traj.n_machines):
            gap = np.abs(traj.delta[i] - traj.delta[j])
            hits = np.nonzero(gap > threshold)[0]
            if hits.size:
                out.append((float(traj.times[hits[0]]), (labels[i], labels[j])))
    out.sort(key=lambda rec: (rec[0], rec[1]))
    return out


# --- trajectory and epoch file formats ----------------------------------------


def write_trajectory_csv(traj: RotorTrajectory, path: str | Path) -> None:
    """CSV `time_s,<machine...>` with center-of-inertia angles in degrees."""
    deg = np.degrees(traj.delta_coi())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_s", *traj.machine_labels])
        for k, t in enumerate(traj.times):
            writer.writerow([f"{t:.6f}", *(f"{v:.9f}" for v in deg[:, k])])


def write_epochs_json(traj: RotorTrajectory, path: str | Path) -> None:
    records = []
    for start, red in traj.epochs:
        records.append({
            "start_time_s": start,
            "e_mag": red.e_mag.tolist(),
            "y_red_real": red.y_red.real.tolist(),
            "y_red_imag": red.y_red.imag.tolist(),
        })
    doc = {"machine_labels": list(traj.machine_labels), "epochs": records}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def read_epochs_json(path: str | Path) -> tuple[tuple[float, ReducedNetwork], ...]:
    doc = json.loads(Path(path).read_text())
    labels = tuple(doc["machine_labels"])
    epochs = []
    for rec in doc["epochs"]:
        y = np.array(rec["y_red_real"]) + 1j * np.array(rec["y_red_imag"])
        epochs.append((float(rec["start_time_s"]),
                       ReducedNetwork(y_red=y, e_mag=np.array(rec["e_mag"]),
                                      machine_labels=labels)))
    return tuple(epochs)
