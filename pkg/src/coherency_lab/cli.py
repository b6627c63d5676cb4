"""End-to-end command line: simulate scenarios, analyze, compute indices.

Exit codes: 0 success, 1 usage problem, 2 bad or missing input,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .clustering import (
    LINKAGES,
    agglomerate,
    cut,
    grouping_record,
    parse_cut_spec,
    read_grouping_json,
    to_distance,
    write_dendrogram_csv,
    write_groupings_json,
)
from .coherency import WindowSpec, cc_matrix, ingest_trajectory_csv, ks_matrix, sliding_windows
from .grid_model import CaseFormatError, CaseValidationError, load_case, resolve_data_path
from .indices import index_series, write_indices_csv
from .powerflow import PowerFlowError, dump_solution_csv, internal_emf, solve_power_flow
from .transient_sim import (
    EventOrderError,
    NumericalBlowupError,
    SingularNetworkError,
    UnknownTargetError,
    detect_loss_of_sync,
    load_events,
    simulate,
    write_epochs_json,
    write_trajectory_csv,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures to exit code 1
        raise UsageError(message)


@dataclass
class RunConfig:
    case: str = "ieee39.case"
    events: str = "scenario1.events"
    dt: float = 1e-3
    t_stop: float = 10.0
    metric: str = "cc"
    window_length_s: float = 2.0
    window_step_s: float = 0.1
    linkage: str = "average"
    cut: str = "largest_gap"
    out_dir: str = "out"
    force: bool = False
    dump_pf: bool = False
    sf_literal: bool = False
    freeze_grouping: str | None = None


def _load_config(path: str | None) -> RunConfig:
    config = RunConfig()
    if path:
        doc = json.loads(Path(path).read_text())
        unknown = set(doc) - set(asdict(config))
        if unknown:
            raise UsageError(f"config: unknown keys {sorted(unknown)}")
        for key, value in doc.items():
            setattr(config, key, value)
    return config


def _merge_args(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    for key in asdict(config):
        value = getattr(args, key, None)
        if value is not None:
            setattr(config, key, value)
    return config


def _check(config: RunConfig):
    if config.dt <= 0:
        raise UsageError(f"--dt must be positive, got {config.dt}")
    if config.t_stop <= 0:
        raise UsageError(f"--t-stop must be positive, got {config.t_stop}")
    if config.metric not in ("cc", "ks"):
        raise UsageError(f"--metric must be cc or ks, got {config.metric!r}")
    if config.linkage not in LINKAGES:
        raise UsageError(f"--linkage must be one of {LINKAGES}")
    if config.window_length_s <= 0 or config.window_step_s <= 0:
        raise UsageError("window length and step must be positive")
    try:
        parse_cut_spec(config.cut)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _prepare_out(config: RunConfig, names: list[str]) -> Path:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not config.force:
        clashes = [n for n in names if (out / n).exists()]
        if clashes:
            raise UsageError(
                f"refusing to overwrite {clashes} in {out} (use --force)")
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, config: RunConfig, inputs: dict[str, Path],
                    outputs: list[str]) -> None:
    doc = {
        "tool": "coherency-lab",
        "version": __version__,
        "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "config": asdict(config),
        "inputs": {k: {"path": str(p), "sha256": _sha256(p)} for k, p in inputs.items()},
        "outputs": outputs,
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=1) + "\n")


def _cmd_simulate(config: RunConfig) -> int:
    case_path = resolve_data_path(config.case)
    events_path = resolve_data_path(config.events)
    case = load_case(case_path)
    schedule = load_events(events_path)
    names = ["trajectory.csv", "epochs.json"] + (["pf.csv"] if config.dump_pf else [])
    out = _prepare_out(config, names)
    traj = simulate(case, schedule, dt=config.dt, t_stop=config.t_stop)
    write_trajectory_csv(traj, out / "trajectory.csv")
    write_epochs_json(traj, out / "epochs.json")
    if config.dump_pf:
        dump_solution_csv(solve_power_flow(case), out / "pf.csv")
    print(f"wrote {out / 'trajectory.csv'} and {out / 'epochs.json'}")
    return EXIT_OK


def _load_trajectory(config: RunConfig, out: Path):
    traj_path = out / "trajectory.csv"
    epochs_path = out / "epochs.json"
    if not traj_path.exists():
        raise FileNotFoundError(f"{traj_path}: run simulate first")
    if config.metric == "ks":
        if not epochs_path.exists():
            raise FileNotFoundError(
                f"metric 'ks' needs the epochs sidecar {epochs_path}, which is missing")
        return ingest_trajectory_csv(traj_path, epochs_path)
    return ingest_trajectory_csv(traj_path)


def _window_groupings(config: RunConfig, traj):
    spec = WindowSpec(config.window_length_s, config.window_step_s)
    criterion, kwargs = parse_cut_spec(config.cut)
    records = []
    last_dend = None
    for t0, t1 in sliding_windows(traj, spec):
        if config.metric == "cc":
            sim = cc_matrix(traj, (t0, t1))
        else:
            red = traj.epoch_at(t1)
            sim = ks_matrix(red, traj.delta[:, traj.sample_index(t1)], t_ref=t1)
        last_dend = agglomerate(to_distance(sim), config.linkage)
        grouping = cut(last_dend, criterion, **kwargs)
        records.append(grouping_record(grouping, t_ref=t1))
    return records, last_dend


def _cmd_analyze(config: RunConfig) -> int:
    out = Path(config.out_dir)
    traj = _load_trajectory(config, out)
    names = [f"groupings_{config.metric}.json", f"dendrogram_{config.metric}.csv"]
    _prepare_out(config, names)
    records, last_dend = _window_groupings(config, traj)
    write_groupings_json(records, out / names[0])
    if last_dend is not None:
        write_dendrogram_csv(last_dend, out / names[1])
    print(f"wrote {out / names[0]} ({len(records)} windows)")
    return EXIT_OK


def _cmd_indices(config: RunConfig) -> int:
    out = Path(config.out_dir)
    traj = _load_trajectory(config, out)
    name = f"indices_{config.metric}.csv"
    _prepare_out(config, [name])
    criterion, kwargs = parse_cut_spec(config.cut)
    frozen = None
    if config.freeze_grouping:
        frozen = read_grouping_json(resolve_data_path(config.freeze_grouping))
    series = index_series(
        traj, metric=config.metric,
        window=WindowSpec(config.window_length_s, config.window_step_s),
        linkage=config.linkage, cut_criterion=criterion, cut_kwargs=kwargs,
        groupings=frozen, with_sf_literal=config.sf_literal)
    write_indices_csv(series, out / name)
    print(f"wrote {out / name} ({series.times.size} samples)")
    return EXIT_OK


def _cmd_pipeline(config: RunConfig) -> int:
    case_path = resolve_data_path(config.case)
    events_path = resolve_data_path(config.events)
    case = load_case(case_path)
    schedule = load_events(events_path)
    names = ["trajectory.csv", "epochs.json",
             f"groupings_{config.metric}.json", f"dendrogram_{config.metric}.csv",
             f"indices_{config.metric}.csv", "loss_of_sync.json", "manifest.json"]
    if config.dump_pf:
        names.append("pf.csv")
    out = _prepare_out(config, names)

    traj = simulate(case, schedule, dt=config.dt, t_stop=config.t_stop)
    write_trajectory_csv(traj, out / "trajectory.csv")
    write_epochs_json(traj, out / "epochs.json")
    if config.dump_pf:
        dump_solution_csv(solve_power_flow(case), out / "pf.csv")

    records, last_dend = _window_groupings(config, traj)
    write_groupings_json(records, out / f"groupings_{config.metric}.json")
    if last_dend is not None:
        write_dendrogram_csv(last_dend, out / f"dendrogram_{config.metric}.csv")

    criterion, kwargs = parse_cut_spec(config.cut)
    frozen = None
    if config.freeze_grouping:
        frozen = read_grouping_json(resolve_data_path(config.freeze_grouping))
    series = index_series(
        traj, metric=config.metric,
        window=WindowSpec(config.window_length_s, config.window_step_s),
        linkage=config.linkage, cut_criterion=criterion, cut_kwargs=kwargs,
        groupings=frozen, with_sf_literal=config.sf_literal)
    write_indices_csv(series, out / f"indices_{config.metric}.csv")

    sync_loss = detect_loss_of_sync(traj)
    (out / "loss_of_sync.json").write_text(json.dumps(
        [{"time_s": t, "pair": list(pair)} for t, pair in sync_loss], indent=1) + "\n")

    _write_manifest(out, config, {"case": case_path, "events": events_path}, names)
    print(f"pipeline complete: {len(records)} windows, "
          f"{len(sync_loss)} loss-of-sync pairs, outputs in {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="coherency-lab",
                     description="Transient-stability workbench: classical-model "
                                 "simulation, coherency detection, stability indices.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON config file mirroring RunConfig")
        p.add_argument("--out-dir", dest="out_dir", help="output directory (default out)")
        p.add_argument("--force", action="store_true", default=None,
                       help="overwrite existing outputs")

    def add_sim(p):
        p.add_argument("--case", help="case file (searched in the data dir)")
        p.add_argument("--events", help="event schedule file")
        p.add_argument("--dt", type=float, help="integration step (s), default 1e-3")
        p.add_argument("--t-stop", dest="t_stop", type=float, help="end time (s)")
        p.add_argument("--dump-pf", dest="dump_pf", action="store_true", default=None,
                       help="also write the power-flow solution CSV")

    def add_analysis(p):
        p.add_argument("--metric", choices=("cc", "ks"))
        p.add_argument("--window-length", dest="window_length_s", type=float)
        p.add_argument("--window-step", dest="window_step_s", type=float)
        p.add_argument("--linkage", choices=LINKAGES)
        p.add_argument("--cut", help="largest_gap | fixed_k:K | height:H")

    p_sim = sub.add_parser("simulate", help="run a scenario, write trajectory + epochs")
    add_common(p_sim)
    add_sim(p_sim)

    p_ana = sub.add_parser("analyze", help="cluster windows into coherent groups")
    add_common(p_ana)
    add_analysis(p_ana)

    p_idx = sub.add_parser("indices", help="compute CF/SF/CF-SF series")
    add_common(p_idx)
    add_analysis(p_idx)
    p_idx.add_argument("--sf-literal", dest="sf_literal", action="store_true",
                       default=None, help="add the alternate SF column")
    p_idx.add_argument("--freeze-grouping", dest="freeze_grouping",
                       help="grouping JSON to hold fixed across windows")

    p_pipe = sub.add_parser("pipeline", help="simulate + analyze + indices")
    add_common(p_pipe)
    add_sim(p_pipe)
    add_analysis(p_pipe)
    p_pipe.add_argument("--sf-literal", dest="sf_literal", action="store_true", default=None)
    p_pipe.add_argument("--freeze-grouping", dest="freeze_grouping")

    return parser


_COMMANDS = {
    "simulate": _cmd_simulate,
    "analyze": _cmd_analyze,
    "indices": _cmd_indices,
    "pipeline": _cmd_pipeline,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = _load_config(getattr(args, "config", None))
        config = _merge_args(config, args)
        _check(config)
        return _COMMANDS[args.command](config)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, CaseFormatError, CaseValidationError,
            UnknownTargetError, EventOrderError, json.JSONDecodeError,
            ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (PowerFlowError, SingularNetworkError, NumericalBlowupError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
