"""Grid data model: buses, branches, generators, and admittance assembly.

All electrical quantities are per-unit on the system MVA base; angles are
radians internally (file exports use degrees). Every type is immutable
after construction, so instances can be shared freely across threads.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

# Default bus-fault severity: a real shunt (pu) at the faulted bus. The
# value represents an effective (impedant) short rather than a bolted one;
# a constant-EMF machine model has no excitation support, so the bolted
# 1e6-pu shunt would turn the bundled stable scenario into a first-swing
# collapse. Event application may override it per fault.
FAULT_ADMITTANCE = 70.0

BUS_KINDS = ("slack", "pv", "pq")


class CaseFormatError(ValueError):
    """Case file is malformed or does not match the schema."""


class CaseValidationError(ValueError):
    """Parsed case violates the data-model invariants."""


@dataclass(frozen=True)
class Bus:
    id: str
    kind: str
    v_set: float | None = None
    p_load: float = 0.0
    q_load: float = 0.0
    g_shunt: float = 0.0
    b_shunt: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: str
    to_bus: str
    r: float
    x: float
    b_charging_half: float = 0.0
    tap: float = 1.0
    in_service: bool = True


@dataclass(frozen=True)
class Generator:
    id: str
    bus: str
    p_set: float
    v_set: float
    h_sec: float
    xdp: float
    d_damp: float = 2.0


@dataclass(frozen=True)
class NetworkCase:
    base_mva: float
    freq_hz: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]

    @property
    def omega_s(self) -> float:
        """Synchronous speed (rad/s)."""
        return 2.0 * np.pi * self.freq_hz

    def bus_index(self) -> dict[str, int]:
        return {bus.id: i for i, bus in enumerate(self.buses)}

    def branch_ids(self) -> tuple[str, ...]:
        """Stable branch identifiers "from-to", "#k"-suffixed for parallels."""
        seen: dict[str, int] = {}
        ids = []
        for br in self.branches:
            base = f"{br.from_bus}-{br.to_bus}"
            seen[base] = seen.get(base, 0) + 1
            ids.append(base if seen[base] == 1 else f"{base}#{seen[base]}")
        return tuple(ids)

    def find_branch(self, branch_id: str) -> int:
        """Resolve a branch id, accepting the reversed "to-from" spelling."""
        ids = self.branch_ids()
        if branch_id in ids:
            return ids.index(branch_id)
        if "#" not in branch_id and branch_id.count("-") == 1:
            a, b = branch_id.split("-")
            flipped = f"{b}-{a}"
            if flipped in ids:
                return ids.index(flipped)
        raise KeyError(f"no branch {branch_id!r} in case")

    def slack_index(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.kind == "slack")


@dataclass(frozen=True)
class TopologyState:
    """Dynamic topology overlay: tripped branches and active bus-fault shunts."""

    out_branches: frozenset[str] = frozenset()
    fault_buses: tuple[tuple[str, float], ...] = ()

    def with_fault(self, bus: str, y_shunt: float = FAULT_ADMITTANCE) -> "TopologyState":
        faults = dict(self.fault_buses)
        faults[bus] = y_shunt
        return TopologyState(self.out_branches, tuple(sorted(faults.items())))

    def without_fault(self, bus: str) -> "TopologyState":
        faults = dict(self.fault_buses)
        if bus not in faults:
            raise KeyError(f"no active fault at bus {bus!r} to clear")
        del faults[bus]
        return TopologyState(self.out_branches, tuple(sorted(faults.items())))

    def with_branch_out(self, branch_id: str) -> "TopologyState":
        return TopologyState(self.out_branches | {branch_id}, self.fault_buses)

    def with_branch_in(self, branch_id: str) -> "TopologyState":
        return TopologyState(self.out_branches - {branch_id}, self.fault_buses)


@dataclass(frozen=True)
class AdmittanceMatrix:
    entries: np.ndarray
    node_labels: tuple[str, ...]

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=complex)
        if entries.shape != (len(self.node_labels),) * 2:
            raise ValueError("admittance dimensions do not match node labels")
        entries.flags.writeable = False
        object.__setattr__(self, "entries", entries)

    @property
    def order(self) -> int:
        return len(self.node_labels)


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_case(case: NetworkCase) -> ValidationReport:
    """Check all data-model invariants; violations are data, not errors."""
    v: list[str] = []
    if case.base_mva <= 0:
        v.append(f"nonpositive base_mva {case.base_mva}")
    if case.freq_hz <= 0:
        v.append(f"nonpositive freq_hz {case.freq_hz}")

    ids = [b.id for b in case.buses]
    dup = {i for i in ids if ids.count(i) > 1}
    if dup:
        v.append(f"duplicate bus ids {sorted(dup)}")
    known = set(ids)

    slack = [b.id for b in case.buses if b.kind == "slack"]
    if len(slack) == 0:
        v.append("no slack bus")
    elif len(slack) > 1:
        v.append(f"multiple slack buses {slack}")

    for bus in case.buses:
        if bus.kind not in BUS_KINDS:
            v.append(f"bus {bus.id}: unknown kind {bus.kind!r}")
        if bus.kind in ("slack", "pv") and bus.v_set is None:
            v.append(f"bus {bus.id}: {bus.kind} bus without v_set")
        if bus.v_set is not None and bus.v_set <= 0:
            v.append(f"bus {bus.id}: nonpositive v_set {bus.v_set}")

    for bid, br in zip(case.branch_ids(), case.branches):
        if br.from_bus not in known:
            v.append(f"branch {bid}: unknown from bus {br.from_bus}")
        if br.to_bus not in known:
            v.append(f"branch {bid}: unknown to bus {br.to_bus}")
        if br.from_bus == br.to_bus:
            v.append(f"branch {bid}: both endpoints on bus {br.from_bus}")
        if br.r == 0 and br.x == 0:
            v.append(f"branch {bid}: zero impedance")
        if br.tap <= 0:
            v.append(f"branch {bid}: nonpositive tap {br.tap}")

    gen_ids = [g.id for g in case.generators]
    dup = {g for g in gen_ids if gen_ids.count(g) > 1}
    if dup:
        v.append(f"duplicate generator ids {sorted(dup)}")
    for gen in case.generators:
        if gen.bus not in known:
            v.append(f"generator {gen.id}: unknown bus {gen.bus}")
        if gen.h_sec <= 0:
            v.append(f"generator {gen.id}: nonpositive inertia {gen.h_sec}")
        if gen.xdp <= 0:
            v.append(f"generator {gen.id}: nonpositive transient reactance {gen.xdp}")
        if gen.d_damp < 0:
            v.append(f"generator {gen.id}: negative damping {gen.d_damp}")
        if gen.v_set <= 0:
            v.append(f"generator {gen.id}: nonpositive v_set {gen.v_set}")

    return ValidationReport(tuple(v))


def build_ybus(case: NetworkCase, topology: TopologyState | None = None) -> AdmittanceMatrix:
    """Assemble the nodal admittance matrix for the given topology state.

    Off-nominal taps sit on the from side: a branch of series admittance ys
    and half-charging jb contributes ys+jb scaled by 1/tap^2 at the from
    diagonal, ys+jb at the to diagonal, and -ys/tap off-diagonal. Bus and
    fault shunts add to the diagonal.
    """
    topology = topology or TopologyState()
    index = case.bus_index()
    n = len(case.buses)
    y = np.zeros((n, n), dtype=complex)

    out = set(topology.out_branches)
    for bid, br in zip(case.branch_ids(), case.branches):
        if not br.in_service or bid in out:
            continue
        f, t = index[br.from_bus], index[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        ysh = 1j * br.b_charging_half
        tap = br.tap
        y[f, f] += (ys + ysh) / (tap * tap)
        y[t, t] += ys + ysh
        y[f, t] += -ys / tap
        y[t, f] += -ys / tap

    for bus in case.buses:
        y[index[bus.id], index[bus.id]] += complex(bus.g_shunt, bus.b_shunt)
    for bus_id, y_f in topology.fault_buses:
        if bus_id not in index:
            raise KeyError(f"fault target bus {bus_id!r} not in case")
        y[index[bus_id], index[bus_id]] += y_f

    return AdmittanceMatrix(y, tuple(b.id for b in case.buses))


# --- case file I/O -----------------------------------------------------------
#
# Schema: JSON object with keys base_mva, freq_hz, buses, branches,
# generators. Impedances and powers in pu on base_mva. Branch endpoints use
# keys "from"/"to". Generator "id" is optional (defaults G1..GN in order).

_BUS_FIELDS = {"id", "kind", "v_set", "p_load", "q_load", "g_shunt", "b_shunt"}
_BRANCH_FIELDS = {"from", "to", "r", "x", "b_charging_half", "tap", "in_service"}
_GEN_FIELDS = {"id", "bus", "p_set", "v_set", "h_sec", "xdp", "d_damp"}


def _require(record: Mapping, keys: Iterable[str], what: str):
    for key in keys:
        if key not in record:
            raise CaseFormatError(f"{what} record missing required field {key!r}: {record}")


def load_case(path: str | Path) -> NetworkCase:
    """Load and validate a case file; raises on malformed or invalid data."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CaseFormatError(f"{path}: not valid JSON: {exc}") from exc

    _require(raw, ("base_mva", "freq_hz", "buses", "branches", "generators"), "case")

    buses = []
    for rec in raw["buses"]:
        _require(rec, ("id", "kind"), "bus")
        unknown = set(rec) - _BUS_FIELDS
        if unknown:
            raise CaseFormatError(f"bus {rec.get('id')}: unknown fields {sorted(unknown)}")
        buses.append(Bus(
            id=str(rec["id"]),
            kind=rec["kind"],
            v_set=rec.get("v_set"),
            p_load=float(rec.get("p_load", 0.0)),
            q_load=float(rec.get("q_load", 0.0)),
            g_shunt=float(rec.get("g_shunt", 0.0)),
            b_shunt=float(rec.get("b_shunt", 0.0)),
        ))

    branches = []
    for rec in raw["branches"]:
        _require(rec, ("from", "to", "r", "x"), "branch")
        unknown = set(rec) - _BRANCH_FIELDS
        if unknown:
            raise CaseFormatError(f"branch {rec.get('from')}-{rec.get('to')}: "
                                  f"unknown fields {sorted(unknown)}")
        branches.append(Branch(
            from_bus=str(rec["from"]),
            to_bus=str(rec["to"]),
            r=float(rec["r"]),
            x=float(rec["x"]),
            b_charging_half=float(rec.get("b_charging_half", 0.0)),
            tap=float(rec.get("tap", 1.0)),
            in_service=bool(rec.get("in_service", True)),
        ))

    generators = []
    for k, rec in enumerate(raw["generators"]):
        _require(rec, ("bus", "p_set", "v_set", "h_sec", "xdp"), "generator")
        unknown = set(rec) - _GEN_FIELDS
        if unknown:
            raise CaseFormatError(f"generator {rec.get('id', k)}: unknown fields {sorted(unknown)}")
        generators.append(Generator(
            id=str(rec.get("id", f"G{k + 1}")),
            bus=str(rec["bus"]),
            p_set=float(rec["p_set"]),
            v_set=float(rec["v_set"]),
            h_sec=float(rec["h_sec"]),
            xdp=float(rec["xdp"]),
            d_damp=float(rec.get("d_damp", 2.0)),
        ))

    case = NetworkCase(
        base_mva=float(raw["base_mva"]),
        freq_hz=float(raw["freq_hz"]),
        buses=tuple(buses),
        branches=tuple(branches),
        generators=tuple(generators),
    )
    report = validate_case(case)
    if not report.ok:
        raise CaseValidationError("; ".join(report.violations))
    return case


def save_case(case: NetworkCase, path: str | Path) -> None:
    """Write a case file that load_case reads back to an equal NetworkCase."""
    def bus_rec(b: Bus) -> dict:
        rec = {"id": b.id, "kind": b.kind}
        if b.v_set is not None:
            rec["v_set"] = b.v_set
        rec.update(p_load=b.p_load, q_load=b.q_load, g_shunt=b.g_shunt, b_shunt=b.b_shunt)
        return rec

    doc = {
        "base_mva": case.base_mva,
        "freq_hz": case.freq_hz,
        "buses": [bus_rec(b) for b in case.buses],
        "branches": [
            {"from": br.from_bus, "to": br.to_bus, "r": br.r, "x": br.x,
             "b_charging_half": br.b_charging_half, "tap": br.tap,
             "in_service": br.in_service}
            for br in case.branches
        ],
        "generators": [
            {"id": g.id, "bus": g.bus, "p_set": g.p_set, "v_set": g.v_set,
             "h_sec": g.h_sec, "xdp": g.xdp, "d_damp": g.d_damp}
            for g in case.generators
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def default_data_dir() -> Path:
    """Bundled data directory, overridable via COHERENCY_LAB_DATA."""
    env = os.environ.get("COHERENCY_LAB_DATA")
    if env:
        return Path(env)
    return Path(__file__).resolve().parent / "data"


def resolve_data_path(name: str | Path) -> Path:
    """Resolve a file argument: as given if it exists, else under the data dir."""
    p = Path(name)
    if p.exists():
        return p
    candidate = default_data_dir() / p
    if candidate.exists():
        return candidate
    raise FileNotFoundError(f"{name}: not found directly or under {default_data_dir()}")
