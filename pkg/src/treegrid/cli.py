"""Command-line entry point: ``treegrid {solve,cascade,partition,sweep,demo39}``.

Exit codes: 0 ok, 2 usage error, 3 data error, 4 solver error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .cascade import AgcRule, DroopRule, ProportionalRule, UnifiedControllerRule, run_cascade
from .case_io import load_any
from .control import ControlConfig, ControlProblem, Level, mitigate
from .dynamics import (DT, DUAL_THRESHOLD, HORIZON, Detector, DualGains, UnifiedController,
                       simulate)
from .errors import CaseError, DisconnectedInput, PartitionBroken, TreeGridError
from .experiment import ALPHAS, STRATEGIES, Strategy, config_hash, nominal_injections, run_sweep
from .network import GridCase, dc_power_flow
from .partition import (Partition, associated_areas, congestion_level, keep_largest_flow,
                        modularity_bisect, optimal_switching, tie_lines)

log = logging.getLogger("treegrid")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SOLVER = 0, 2, 3, 4
DEMO_FAILURES = ((4, 14), (6, 7))
DEMO_MONITOR = (25, 26)
# warning time of the severe failure in the original demonstration
DEMO_REFERENCE_WARNING = 10.0


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    subcommand: str
    case: str
    partition: str = "auto"
    strategies: list[str] = field(default_factory=lambda: [s.name for s in STRATEGIES])
    alphas: list[float] = field(default_factory=lambda: list(ALPHAS))
    dual_threshold: float = DUAL_THRESHOLD
    agr_tol: float = 1e-4
    dt: float = DT
    horizon: float = HORIZON
    max_stages: int = 100
    out: str | None = None
    workers: int = 1
    strict_parse: bool = False

    def validate(self) -> None:
        if self.dual_threshold <= 0:
            raise UsageError("--dual-threshold must be positive")
        if self.dt <= 0 or self.horizon < self.dt:
            raise UsageError("need --dt > 0 and --horizon >= --dt")
        if self.max_stages < 1:
            raise UsageError("--max-stages must be at least 1")
        if self.workers < 1:
            raise UsageError("--workers must be at least 1")
        if not self.alphas or any(a <= 0 for a in self.alphas):
            raise UsageError("--alpha values must be positive")
        for s in self.strategies:
            try:
                Strategy.parse(s)
            except ValueError as exc:
                raise UsageError(str(exc)) from None

    def echo(self) -> dict:
        """Config as written into outputs; the worker count is left out so
        output bytes do not depend on it."""
        d = asdict(self)
        d.pop("workers")
        d.pop("out")
        return d


# --------------------------------------------------------------------------
# helpers


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated number list: {text!r}") from None


def _names(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def parse_line(grid: GridCase, spec: str) -> int:
    """Grid position of a line given as ``A-B`` / ``A,B`` (bus ids) or ``#k``."""
    spec = spec.strip()
    if spec.startswith("#"):
        k = int(spec[1:])
        if not 0 <= k < len(grid.lines):
            raise UsageError(f"line position {k} out of range")
        return k
    for sep in ("-", ","):
        if sep in spec:
            a, b = spec.split(sep, 1)
            try:
                return grid.find_line(int(a), int(b))
            except (KeyError, ValueError):
                raise UsageError(f"no line between buses {a} and {b}") from None
    raise UsageError(f"cannot parse line {spec!r}; use A-B or #k")


def _load(cfg: RunConfig) -> GridCase:
    return load_any(cfg.case, "strict" if cfg.strict_parse else "lenient")


def _partition(grid: GridCase, spec: str) -> Partition:
    if spec == "auto":
        if "partition" in grid.metadata or all(b.area is not None for b in grid.buses):
            part = Partition.from_grid(grid)
            if part.n_areas >= 2:
                return part
        return modularity_bisect(grid.topology())
    path = Path(spec)
    if not path.exists():
        raise CaseError("partition", f"file {spec} not found")
    return Partition.from_json(grid, path.read_text())


def _stamp(cfg: dict) -> str:
    return f"treegrid {__version__} config {config_hash(cfg)}"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# --------------------------------------------------------------------------
# commands


def cmd_solve(args, cfg: RunConfig) -> int:
    grid = _load(cfg)
    top = grid.topology()
    part = None
    if args.tree:
        part = _partition(grid, cfg.partition)
        top = part.switched_topology()
    fails = [parse_line(grid, s) for s in args.fail]
    if not fails:
        state = dc_power_flow(top, grid.injections)
        print(f"{grid.name or cfg.case}: DC power flow, {len(top.lines)} lines")
        for k, f in zip(top.lines, state.flows):
            ln = grid.lines[k]
            mark = "  OVERLOAD" if abs(f) > ln.limit else ""
            print(f"  {grid.line_label(k):>10} flow {f: .6g}  limit {ln.limit:.6g}{mark}")
        return EXIT_OK
    top = top.without(fails)
    areas = None if part is None else part.label_array
    config = ControlConfig(agc=args.agc)
    sol, level = mitigate(grid, top, config, areas=areas)
    print(f"{grid.name or cfg.case}: failed {', '.join(grid.line_label(k) for k in fails)}")
    print(f"  controller {'AGC' if args.agc else 'UC'}: {sol.status} at {level.name}"
          f" (objective {sol.objective:.6g})")
    if sol.kkt is not None:
        print(f"  KKT residual {sol.kkt.max():.2e}")
    for j, b in enumerate(grid.buses):
        if abs(sol.d[j]) > 1e-9:
            print(f"  bus {b.id:>5} d* {sol.d[j]: .6g}  (gen {sol.d_gen[j]: .6g}, load {sol.d_load[j]: .6g})")
    for k, f in zip(top.lines, sol.flows):
        print(f"  {grid.line_label(k):>10} flow {f: .6g}  limit {grid.lines[k].limit:.6g}")
    for name, v in sol.duals.items():
        if len(v):
            print(f"  dual {name}: max |.| {np.abs(v).max():.6g}")
    if cfg.out:
        _write(Path(cfg.out), sol.to_json(indent=1) + "\n")
    return EXIT_OK


def _rule(name: str, part: Partition | None, grid: GridCase):
    areas = None if part is None else part.label_array
    if name == "proportional":
        return ProportionalRule()
    if name == "droop":
        return DroopRule()
    if name == "uc":
        return UnifiedControllerRule(ControlConfig(), areas, grid.injections)
    if name == "agc":
        return AgcRule(areas=areas, ace_reference=grid.injections)
    raise UsageError(f"unknown rule {name!r}")


def cmd_cascade(args, cfg: RunConfig) -> int:
    grid = _load(cfg)
    fails = [parse_line(grid, s) for s in args.fail]
    if not fails:
        raise UsageError("cascade needs at least one --fail line")
    part = None
    top = grid.topology()
    if args.tree or args.rule in ("uc", "agc"):
        part = _partition(grid, cfg.partition)
        if args.tree:
            top = part.switched_topology()
    trace = run_cascade(grid, fails, _rule(args.rule, part, grid), cfg.max_stages, topology=top)
    print(f"{grid.name or cfg.case}: rule {args.rule}, {trace.n_stages} stage(s), "
          f"{trace.terminal_status.value}")
    for st in trace.stages:
        lvl = "" if st.level is None else f" level {st.level.name}"
        print(f"  stage {st.index}: tripped {sorted(grid.line_label(k) for k in st.tripped)}"
              f" -> overloads {sorted(grid.line_label(k) for k in st.overloads)}{lvl}")
    print(f"  shed {trace.shed():.6g} pu")
    if cfg.out:
        out = Path(cfg.out)
        echo = cfg.echo() | {"rule": args.rule, "fail": args.fail, "tree": args.tree}
        doc = trace.to_dict() | {"version": __version__, "config": echo,
                                 "config_hash": config_hash(echo)}
        _write(out / "cascade.json", json.dumps(doc, indent=1, sort_keys=True) + "\n")
        buf = io.StringIO()
        buf.write(f"# {_stamp(echo)}\n")
        csv.writer(buf, lineterminator="\n").writerows(trace.to_csv_rows())
        _write(out / "cascade.csv", buf.getvalue())
    return EXIT_OK


def cmd_partition(args, cfg: RunConfig) -> int:
    grid = _load(cfg)
    top = grid.topology()
    if args.method == "modularity":
        part = modularity_bisect(top)
    else:
        part = _partition(grid, cfg.partition)
        part = part.with_switching(())
    p = nominal_injections(grid)
    if args.switching == "optimal":
        sw = optimal_switching(top, p, part)
        off = sw.switched_off
    else:
        off = keep_largest_flow(top, p, part)
    part = part.with_switching(off)
    gamma = congestion_level(top, p, off, part)
    ties = tie_lines(top, part)
    print(f"{grid.name or cfg.case}: {part.n_areas} areas, sizes {list(part.sizes())}")
    print(f"  tie lines ({len(ties)}): {[grid.line_label(k) for k in ties]}")
    print(f"  switched off ({args.switching}): {sorted(grid.line_label(k) for k in off)}")
    print(f"  congestion level gamma = {gamma:.6g}")
    echo = cfg.echo() | {"method": args.method, "switching": args.switching}
    doc = part.to_dict() | {"gamma": gamma, "tie_lines": [[grid.lines[k].from_bus, grid.lines[k].to_bus] for k in ties],
                            "version": __version__, "config_hash": config_hash(echo)}
    text = json.dumps(doc, indent=1, sort_keys=True) + "\n"
    if cfg.out:
        _write(Path(cfg.out), text)
    else:
        print(text, end="")
    return EXIT_OK


def cmd_sweep(args, cfg: RunConfig) -> int:
    grid = _load(cfg)
    part = _partition(grid, cfg.partition)
    report = run_sweep(
        grid, part, [Strategy.parse(s) for s in cfg.strategies], cfg.alphas,
        max_stages=cfg.max_stages, cost=args.cost, workers=cfg.workers,
    )
    print(report.to_markdown())
    if cfg.out:
        paths = report.write(cfg.out)
        print("wrote " + ", ".join(str(p) for p in paths.values()))
    return EXIT_OK


def run_demo39(
    grid: GridCase,
    failures=DEMO_FAILURES,
    threshold: float = DUAL_THRESHOLD,
    horizon: float = HORIZON,
    dt: float = DT,
    gains: DualGains = DualGains(),
    output_interval: float = 0.01,
) -> list[dict]:
    """Both demonstration failures on the tree-connected network: steady-state
    ladder solve plus the primal-dual dynamics with warning-driven relaxation."""
    part = Partition.from_grid(grid)
    tree = part.switched_topology()
    labels = part.label_array
    pre = dc_power_flow(tree, grid.injections, tol=1e-7)
    mon = grid.find_line(*DEMO_MONITOR)
    out = []
    for a, b in failures:
        k = grid.find_line(a, b)
        top = tree.without([k])
        sol, level = mitigate(grid, top, ControlConfig(), areas=labels)
        problem = ControlProblem.build(grid, top, areas=labels)
        traj = simulate(grid, top, UnifiedController(problem, gains), horizon=horizon, dt=dt,
                        output_interval=output_interval, p0=problem.p0,
                        detector=Detector(threshold, relax_on_warning=True), pre_topology=tree)
        assoc = associated_areas([k], part)
        outside = ~np.isin(labels, list(assoc))
        i_mon = top.lines.index(mon)
        warn = traj.event_times("severe_warning")
        out.append({
            "failure": grid.line_label(k),
            "steady_level": level.name,
            "steady_status": sol.status,
            "shed": float(-sol.d_load.sum()) + 0.0,
            "generation_change": float(sol.d_gen.sum()),
            "severe": bool(warn),
            "warning_time": warn[0] if warn else None,
            "reference_warning_time": DEMO_REFERENCE_WARNING,
            "dynamic_level": traj.final_level.name,
            "max_dual_before_warning": _max_dual_before(traj, warn[0] if warn else None),
            "events": [{"time": e.time, "kind": e.kind, **e.detail} for e in traj.events],
            "monitored_line": grid.line_label(mon),
            "monitored_flow_pre": float(pre.flows[tree.lines.index(mon)]),
            "monitored_flow_steady": float(sol.flows[i_mon]),
            "monitored_flow_final": float(traj.final_flows[i_mon]),
            "max_abs_d_nonassociated": float(np.abs(sol.d[outside]).max(initial=0.0)),
            "final_max_loading": float(np.max(np.abs(traj.final_flows) / top.limits)),
            "final_d_error": float(np.abs(traj.final_d - sol.d).max()),
            "trajectory": traj,
        })
    return out


def _max_dual_before(traj, t_warn) -> float:
    stop = len(traj.times) if t_warn is None else int(np.searchsorted(traj.times, t_warn))
    best = 0.0
    for v in traj.duals.values():
        if v.size and stop:
            best = max(best, float(np.abs(v[:stop]).max()))
    return best


def cmd_demo39(args, cfg: RunConfig) -> int:
    grid = _load(cfg)
    res = run_demo39(grid, threshold=cfg.dual_threshold, horizon=cfg.horizon, dt=cfg.dt)
    echo = cfg.echo()
    stamp = _stamp(echo)
    for r in res:
        warn = "none" if r["warning_time"] is None else f"{r['warning_time']:.3f} s"
        print(f"failure {r['failure']}: steady state {r['steady_status']} at {r['steady_level']},"
              f" shed {r['shed']:.4g} pu; severe warning {warn}"
              f" (reference {r['reference_warning_time']:g} s); dynamics end at {r['dynamic_level']}")
        print(f"  flow {r['monitored_line']}: pre {r['monitored_flow_pre']:.6g},"
              f" steady {r['monitored_flow_steady']:.6g}; max |d*| outside associated areas"
              f" {r['max_abs_d_nonassociated']:.2e}")
    if cfg.out:
        out = Path(cfg.out)
        log_doc = {"version": __version__, "config": echo, "config_hash": config_hash(echo),
                   "failures": [{k: v for k, v in r.items() if k != "trajectory"} for r in res]}
        _write(out / "events.json", json.dumps(log_doc, indent=1, sort_keys=True) + "\n")
        for r in res:
            name = r["failure"].strip("()").replace(",", "_")
            _write(out / f"trajectory_{name}.csv", f"# {stamp}\n" + r["trajectory"].to_csv())
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="treegrid", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"treegrid {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, case_default=None):
        if case_default is None:
            sp.add_argument("case", help="bundled name, JSON case or MATPOWER .m file")
        else:
            sp.add_argument("case", nargs="?", default=case_default)
        sp.add_argument("--strict-parse", action="store_true",
                        help="reject unknown fields instead of warning")
        sp.add_argument("--out", help="output file or directory")
        sp.add_argument("--partition", default="auto",
                        help="partition JSON file, or 'auto' (case areas, else modularity)")

    sp = sub.add_parser("solve", help="DC power flow, or a UC/AGC solve after failures")
    common(sp)
    sp.add_argument("--fail", action="append", default=[], metavar="A-B")
    sp.add_argument("--agc", action="store_true", help="drop line limits")
    sp.add_argument("--tree", action="store_true", help="apply the partition's switching")

    sp = sub.add_parser("cascade", help="cascade trace for one initial failure set")
    common(sp)
    sp.add_argument("--fail", action="append", default=[], metavar="A-B")
    sp.add_argument("--rule", default="proportional",
                    choices=["proportional", "droop", "uc", "agc"])
    sp.add_argument("--tree", action="store_true")
    sp.add_argument("--max-stages", type=int, default=100)

    sp = sub.add_parser("partition", help="area bisection and tie-line switching")
    common(sp)
    sp.add_argument("--method", default="modularity", choices=["modularity", "given"])
    sp.add_argument("--switching", default="optimal", choices=["optimal", "largest-flow"])

    sp = sub.add_parser("sweep", help="all single-line failures x strategies x alpha")
    common(sp)
    sp.add_argument("--strategies", type=_names,
                    default=[s.name for s in STRATEGIES])
    sp.add_argument("--alpha", type=_floats, default=list(ALPHAS))
    sp.add_argument("--max-stages", type=int, default=100)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--cost", default="unit", choices=["unit", "case"])

    sp = sub.add_parser("demo39", help="39-bus demonstration of detection and relaxation")
    common(sp, case_default="ieee39")
    sp.add_argument("--dual-threshold", type=float, default=DUAL_THRESHOLD)
    sp.add_argument("--horizon", type=float, default=HORIZON)
    sp.add_argument("--dt", type=float, default=DT)
    return p


COMMANDS = {
    "solve": cmd_solve,
    "cascade": cmd_cascade,
    "partition": cmd_partition,
    "sweep": cmd_sweep,
    "demo39": cmd_demo39,
}


def _config(args) -> RunConfig:
    cfg = RunConfig(args.command, args.case, partition=args.partition, out=args.out,
                    strict_parse=args.strict_parse)
    for name in ("max_stages", "workers", "dual_threshold", "horizon", "dt"):
        if hasattr(args, name):
            setattr(cfg, name, getattr(args, name))
    if hasattr(args, "strategies"):
        cfg.strategies = list(args.strategies)
    if hasattr(args, "alpha"):
        cfg.alphas = list(args.alpha)
    cfg.validate()
    return cfg


_DATA_ERRORS = (CaseError, DisconnectedInput, PartitionBroken, FileNotFoundError, json.JSONDecodeError)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"treegrid: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _DATA_ERRORS as exc:
        print(f"treegrid: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TreeGridError as exc:
        print(f"treegrid: solver error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
