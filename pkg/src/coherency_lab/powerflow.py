"""AC power flow (full Newton-Raphson, polar) and classical-model EMFs.

Establishes the pre-fault operating point and the constant voltage behind
transient reactance for every machine.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid_model import NetworkCase, build_ybus, validate_case


class PowerFlowError(RuntimeError):
    """Power flow failed: divergence or a singular Jacobian."""


@dataclass(frozen=True)
class PowerFlowSolution:
    bus_labels: tuple[str, ...]
    v_mag: np.ndarray
    v_ang: np.ndarray
    p_inj: np.ndarray
    q_inj: np.ndarray
    iterations: int
    max_mismatch: float

    def __post_init__(self):
        for name in ("v_mag", "v_ang", "p_inj", "q_inj"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def v_complex(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)


@dataclass(frozen=True)
class InternalEmf:
    machine: str
    e_mag: float
    delta0: float


def _scheduled_injections(case: NetworkCase):
    n = len(case.buses)
    index = case.bus_index()
    p = np.zeros(n)
    q = np.zeros(n)
    for bus in case.buses:
        i = index[bus.id]
        p[i] -= bus.p_load
        q[i] -= bus.q_load
    for gen in case.generators:
        p[index[gen.bus]] += gen.p_set
    return p, q


def solve_power_flow(case: NetworkCase, tol: float = 1e-8,
                     max_iter: int = 30) -> PowerFlowSolution:
    """Full Newton-Raphson power flow with polar mismatch equations.

    Flat start (1.0 pu, 0 rad) except where voltage setpoints pin the
    magnitude. Converged when max(|dP|, |dQ|) < tol over the mismatch set.
    No reactive-limit enforcement on PV buses.
    """
    report = validate_case(case)
    if not report.ok:
        raise PowerFlowError("invalid case: " + "; ".join(report.violations))
    if tol <= 0:
        raise ValueError("tol must be positive")

    index = case.bus_index()
    n = len(case.buses)
    kinds = [b.kind for b in case.buses]
    slack = kinds.index("slack")
    pv = [i for i, k in enumerate(kinds) if k == "pv"]
    pq = [i for i, k in enumerate(kinds) if k == "pq"]
    pvpq = sorted(pv + pq)

    ybus = build_ybus(case).entries
    p_sched, q_sched = _scheduled_injections(case)

    v_mag = np.ones(n)
    v_ang = np.zeros(n)
    for bus in case.buses:
        if bus.v_set is not None and bus.kind in ("slack", "pv"):
            v_mag[index[bus.id]] = bus.v_set

    iterations = 0
    while True:
        iterations += 1
        v = v_mag * np.exp(1j * v_ang)
        s = v * np.conj(ybus @ v)
        mis = np.concatenate([p_sched[pvpq] - s.real[pvpq],
                              q_sched[pq] - s.imag[pq]])
        max_mis = float(np.max(np.abs(mis))) if mis.size else 0.0
        if max_mis < tol:
            return PowerFlowSolution(
                bus_labels=tuple(b.id for b in case.buses),
                v_mag=v_mag, v_ang=v_ang,
                p_inj=s.real, q_inj=s.imag,
                iterations=iterations, max_mismatch=max_mis)
        if iterations > max_iter:
            raise PowerFlowError(
                f"no convergence after {max_iter} iterations "
                f"(max mismatch {max_mis:.3e} pu)")

        # Complex-form partial derivatives of S = V conj(Ybus V).
        i_bus = ybus @ v
        diag_v = np.diag(v)
        diag_i = np.diag(i_bus)
        diag_vn = np.diag(v / v_mag)
        ds_dva = 1j * diag_v @ np.conj(diag_i - ybus @ diag_v)
        ds_dvm = diag_v @ np.conj(ybus @ diag_vn) + np.conj(diag_i) @ diag_vn

        j11 = ds_dva.real[np.ix_(pvpq, pvpq)]
        j12 = ds_dvm.real[np.ix_(pvpq, pq)]
        j21 = ds_dva.imag[np.ix_(pq, pvpq)]
        j22 = ds_dvm.imag[np.ix_(pq, pq)]
        jac = np.block([[j11, j12], [j21, j22]])
        try:
            dx = np.linalg.solve(jac, mis)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowError(f"singular Jacobian at iteration {iterations}: {exc}") from exc
        v_ang[pvpq] += dx[:len(pvpq)]
        v_mag[pq] += dx[len(pvpq):]


def internal_emf(case: NetworkCase, sol: PowerFlowSolution) -> list[InternalEmf]:
    """Constant EMF behind transient reactance: E' = V_t + j x'd I_t.

    The generator terminal current comes from the solved bus injection plus
    the local load (loads are separate constant-power draws at the same
    bus). Machines with zero injection get I_t = 0 and E' = V_t. When
    several machines share a bus, the bus generation splits in proportion
    to their active-power schedules.
    """
    index = case.bus_index()
    v = sol.v_complex

    by_bus: dict[str, list] = {}
    for gen in case.generators:
        by_bus.setdefault(gen.bus, []).append(gen)

    emfs = []
    for gen in case.generators:
        i = index[gen.bus]
        bus = case.buses[i]
        s_gen_bus = complex(sol.p_inj[i] + bus.p_load, sol.q_inj[i] + bus.q_load)
        siblings = by_bus[gen.bus]
        total_p = sum(g.p_set for g in siblings)
        share = gen.p_set / total_p if total_p > 0 else 1.0 / len(siblings)
        s_gen = share * s_gen_bus
        i_term = np.conj(s_gen) / np.conj(v[i]) if s_gen != 0 else 0.0 + 0.0j
        e = v[i] + 1j * gen.xdp * i_term
        emfs.append(InternalEmf(machine=gen.id, e_mag=float(abs(e)),
                                delta0=float(np.angle(e))))
    return emfs


def dump_solution_csv(sol: PowerFlowSolution, path: str | Path) -> None:
    """Write `bus,v_mag_pu,v_ang_deg,p_inj_pu,q_inj_pu` rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bus", "v_mag_pu", "v_ang_deg", "p_inj_pu", "q_inj_pu"])
        for k, label in enumerate(sol.bus_labels):
            writer.writerow([label,
                             f"{sol.v_mag[k]:.9f}",
                             f"{np.degrees(sol.v_ang[k]):.9f}",
                             f"{sol.p_inj[k]:.9f}",
                             f"{sol.q_inj[k]:.9f}"])
