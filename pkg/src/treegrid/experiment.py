"""Contingency sweeps: nominal DC OPF, limit scaling, the four mitigation
strategies over every single-line failure, and LLR/AGR reporting.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .cascade import UnifiedControllerRule, run_cascade
from .control import ADJUST_TOL, ControlConfig
from .errors import DisconnectedInput, OpfInfeasible, TreeGridError, ZeroDemand
from .kkt import KKTReport, check_kkt
from .network import GridCase, dc_power_flow
from .partition import Partition, keep_largest_flow, modularity_bisect
from .qp import solve_qp

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# nominal operating point


@dataclass
class OpfResult:
    pg: np.ndarray
    injections: np.ndarray
    flows: np.ndarray
    objective: float
    kkt: KKTReport
    qp: dict = field(repr=False, default_factory=dict)


def dc_opf(grid: GridCase, cost: str | Sequence[float] = "unit") -> OpfResult:
    """Quadratic-cost DC OPF on the in-service network.

    ``cost`` is ``"unit"`` (every generator costs pg^2), ``"case"`` (the
    buses' ``gen_cost``), or an explicit per-bus sequence.
    """
    top = grid.topology()
    if not top.is_connected:
        raise DisconnectedInput("DC OPF needs a connected network")
    gens = np.array([j for j, b in enumerate(grid.buses) if b.is_generator], dtype=int)
    pd = grid.demand
    if gens.size == 0:
        raise OpfInfeasible("no generators")
    lo = grid.vec("pg_min")[gens]
    hi = grid.vec("pg_max")[gens]
    if pd.sum() > hi.sum() + 1e-9:
        raise OpfInfeasible(f"demand {pd.sum():.4f} exceeds capacity {hi.sum():.4f}")
    if isinstance(cost, str):
        if cost == "unit":
            c2 = np.ones(gens.size)
        elif cost == "case":
            c2 = grid.vec("gen_cost")[gens]
        else:
            raise ValueError(f"unknown cost mode {cost!r}")
    else:
        c2 = np.asarray(cost, float)[gens]

    F = top.ptdf
    Fg = F[:, gens]
    f_load = F @ (-pd)
    lim = top.limits
    ng = gens.size
    h = 2.0 * c2
    c = np.zeros(ng)
    A = np.ones((1, ng))
    b = np.array([pd.sum()])
    G = np.vstack([Fg, -Fg, np.eye(ng), -np.eye(ng)])
    g = np.concatenate([lim - f_load, lim + f_load, hi, -lo])
    res = solve_qp(h, c, A, b, G, g)
    if not res.optimal:
        raise OpfInfeasible(f"DC OPF infeasible (total violation {res.violation:.4g} pu)")
    pg = np.zeros(grid.n_buses)
    pg[gens] = res.x
    p = pg - pd
    state = dc_power_flow(top, p, tol=1e-7)
    kkt = check_kkt(h, c, A, b, G, g, res.x)
    return OpfResult(pg, p, state.flows, res.objective, kkt,
                     dict(h=h, c=c, A=A, b=b, G=G, g=g, x=res.x))


def nominal_injections(grid: GridCase, cost: str | Sequence[float] = "unit") -> np.ndarray:
    """The case's own dispatch when it balances, else the DC OPF dispatch."""
    p = grid.injections
    if abs(p.sum()) <= 1e-6:
        return p
    return dc_opf(grid, cost).injections


def scale_limits(grid: GridCase, alpha: float) -> GridCase:
    """Multiply line limits and generator capacity bounds by ``alpha``."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    lines = [replace(ln, limit=ln.limit * alpha) for ln in grid.lines]
    buses = [
        replace(b, pg_max=b.pg_max * alpha, pg_min=b.pg_min * alpha) for b in grid.buses
    ]
    return replace(grid, buses=tuple(buses), lines=tuple(lines))


# --------------------------------------------------------------------------
# metrics


def llr(demand: float | np.ndarray, shed: float) -> float:
    """Load loss rate: shed load over total demand."""
    total = float(np.sum(demand))
    if total <= 0:
        raise ZeroDemand("total demand is zero")
    return float(shed) / total


def agr(d_gen: np.ndarray, generators: np.ndarray, tol: float = ADJUST_TOL) -> float:
    """Adjusted generator rate over the positions in ``generators``."""
    generators = np.asarray(generators, dtype=int)
    if generators.size == 0:
        return 0.0
    return float(np.mean(np.abs(np.asarray(d_gen)[generators]) > tol))


# --------------------------------------------------------------------------
# strategies and scenario results

# shed below this fraction of total demand counts as no load loss
LLR_TOL = 1e-6


@dataclass(frozen=True)
class Strategy:
    controller: str  # "UC" or "AGC"
    structure: str  # "Tree" or "Mesh"

    def __post_init__(self):
        if self.controller not in ("UC", "AGC") or self.structure not in ("Tree", "Mesh"):
            raise ValueError(f"unknown strategy {self.controller}+{self.structure}")

    @property
    def name(self) -> str:
        return f"{self.controller.lower()}-{self.structure.lower()}"

    @property
    def label(self) -> str:
        return f"{self.controller} + {self.structure}"

    @classmethod
    def parse(cls, name: str) -> "Strategy":
        try:
            c, s = name.strip().lower().split("-")
        except ValueError:
            raise ValueError(f"strategy {name!r} is not of the form uc-tree") from None
        return cls(c.upper(), s.capitalize())


STRATEGIES = (
    Strategy("UC", "Tree"),
    Strategy("UC", "Mesh"),
    Strategy("AGC", "Tree"),
    Strategy("AGC", "Mesh"),
)
ALPHAS = (0.5, 1.0, 1.5)


@dataclass
class ScenarioResult:
    line: int
    label: str
    strategy: str
    alpha: float
    llr: float = 0.0
    agr: float = 0.0
    stages: int = 0
    level: str = ""
    severe: bool = False
    terminal: str = ""
    # adjusted generators outside the associated areas
    nonlocal_adjusted: int = 0
    lifted: bool = False
    status: str = "ok"
    error: str = ""

    @property
    def errored(self) -> bool:
        return self.status != "ok"


CSV_COLUMNS = [
    "line", "label", "strategy", "alpha", "llr", "agr", "stages", "level",
    "severe", "terminal", "nonlocal_adjusted", "lifted", "status", "error",
]


@dataclass
class SweepRow:
    strategy: str
    alpha: float
    scenarios: int
    errored: int
    frac_nonzero_llr: float
    frac_nonzero_agr: float
    mean_nonzero_llr: float | None
    mean_nonzero_agr: float | None
    max_stages: int
    single_stage: float


@dataclass
class SweepReport:
    network: str
    config: dict
    config_hash: str
    rows: list[SweepRow]
    scenarios: list[ScenarioResult] = field(repr=False, default_factory=list)
    version: str = __version__

    def row(self, strategy: str | Strategy, alpha: float) -> SweepRow:
        name = strategy.name if isinstance(strategy, Strategy) else strategy
        for r in self.rows:
            if r.strategy == name and r.alpha == alpha:
                return r
        raise KeyError((name, alpha))

    @property
    def errored(self) -> int:
        return sum(s.errored for s in self.scenarios)

    def to_dict(self) -> dict:
        return {
            "tool": "treegrid",
            "version": self.version,
            "config_hash": self.config_hash,
            "network": self.network,
            "config": self.config,
            "rows": [asdict(r) for r in self.rows],
            "errored": self.errored,
            "errored_scenarios": [
                {"line": s.label, "strategy": s.strategy, "alpha": s.alpha, "error": s.error}
                for s in self.scenarios if s.errored
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# treegrid {self.version} config {self.config_hash}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for s in self.scenarios:
            row = asdict(s)
            w.writerow([_cell(row[c]) for c in CSV_COLUMNS])
        return buf.getvalue()

    def to_markdown(self) -> str:
        strategies = list(dict.fromkeys(r.strategy for r in self.rows))
        alphas = sorted({r.alpha for r in self.rows})
        labels = {s.name: s.label for s in STRATEGIES}
        head = "| Network | Metric | " + " | ".join(
            f"{labels.get(s, s)} α={a:g}" for s in strategies for a in alphas) + " |"
        rule = "|" + "---|" * (2 + len(strategies) * len(alphas))

        def table(title, keys):
            out = [f"### {title}", "", head, rule]
            for metric, key in keys:
                cells = []
                for s in strategies:
                    for a in alphas:
                        v = getattr(self.row(s, a), key)
                        cells.append("n/a" if v is None else f"{100 * v:.2f}%")
                out.append(f"| {self.network} | {metric} | " + " | ".join(cells) + " |")
            return out

        lines = [f"<!-- treegrid {self.version} config {self.config_hash} -->", ""]
        lines += table("Share of scenarios with load loss (LLR) or adjusted generators (AGR)",
                       [("LLR", "frac_nonzero_llr"), ("AGR", "frac_nonzero_agr")])
        lines.append("")
        lines += table("Mean LLR and AGR over the scenarios where they are nonzero",
                       [("LLR", "mean_nonzero_llr"), ("AGR", "mean_nonzero_agr")])
        if self.errored:
            lines += ["", f"Errored scenarios (excluded from the tables): {self.errored}"]
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"report": out / "report.json", "scenarios": out / "scenarios.csv",
                 "tables": out / "tables.md"}
        paths["report"].write_text(self.to_json())
        paths["scenarios"].write_text(self.to_csv())
        paths["tables"].write_text(self.to_markdown())
        return paths


def _cell(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def summarize(scenarios: Sequence[ScenarioResult], strategy: str, alpha: float) -> SweepRow:
    """Summary statistics over the non-errored scenarios of one (strategy, alpha) cell."""
    cell = [s for s in scenarios if s.strategy == strategy and s.alpha == alpha]
    ok = [s for s in cell if not s.errored]
    n = len(ok)
    llr_nz = [s.llr for s in ok if s.llr > LLR_TOL]
    agr_nz = [s.agr for s in ok if s.agr > 0]
    return SweepRow(
        strategy=strategy,
        alpha=alpha,
        scenarios=len(cell),
        errored=len(cell) - n,
        frac_nonzero_llr=len(llr_nz) / n if n else 0.0,
        frac_nonzero_agr=len(agr_nz) / n if n else 0.0,
        mean_nonzero_llr=float(np.mean(llr_nz)) if llr_nz else None,
        mean_nonzero_agr=float(np.mean(agr_nz)) if agr_nz else None,
        max_stages=max((s.stages for s in ok), default=0),
        single_stage=float(np.mean([s.stages == 1 for s in ok])) if n else 0.0,
    )


# --------------------------------------------------------------------------
# sweep


@dataclass(frozen=True)
class SweepContext:
    """Everything a worker needs; pickled once per worker process."""

    grid: GridCase  # nominal grid with the OPF dispatch as pg
    labels: tuple[int, ...]
    switched_off: frozenset[int]
    max_stages: int
    config: ControlConfig


_SCALED: dict = {"ctx": None, "grids": {}}


def _scaled(ctx: SweepContext, alpha: float) -> GridCase:
    if _SCALED["ctx"] is not ctx:
        _SCALED["ctx"], _SCALED["grids"] = ctx, {}
    grids = _SCALED["grids"]
    if alpha not in grids:
        grids[alpha] = scale_limits(ctx.grid, alpha)
    return grids[alpha]


def run_scenario(ctx: SweepContext, line: int, strategy: Strategy, alpha: float) -> ScenarioResult:
    grid0 = ctx.grid
    res = ScenarioResult(line, grid0.line_label(line), strategy.name, alpha)
    try:
        grid = _scaled(ctx, alpha)
        top = grid.topology()
        if strategy.structure == "Tree":
            top = top.without(ctx.switched_off)
        config = replace(ctx.config, agc=strategy.controller == "AGC")
        rule = UnifiedControllerRule(config, np.array(ctx.labels), ace_reference=grid0.injections)
        trace = run_cascade(grid, [line], rule, max_stages=ctx.max_stages, topology=top)
    except TreeGridError as exc:
        res.status, res.error = "errored", f"{type(exc).__name__}: {exc}"
        log.warning("scenario %s %s alpha=%g errored: %s", res.label, strategy.name, alpha, exc)
        return res

    gens = np.flatnonzero(grid0.vec("pg_max") > 0)
    dg = trace.generation_change()
    res.llr = llr(trace.initial.pd[trace.initial.pd > 0], trace.shed())
    res.agr = agr(dg, gens)
    res.stages = trace.n_stages
    level = trace.max_level
    res.level = level.name if level is not None else ""
    res.severe = level is not None and level > 0
    res.terminal = trace.terminal_status.value
    res.lifted = any(st.info.get("lifted_areas") for st in trace.stages)
    labels = np.array(ctx.labels)
    assoc = {labels[i] for i in grid0.endpoints[line]}
    moved = gens[np.abs(dg[gens]) > ADJUST_TOL]
    res.nonlocal_adjusted = int(sum(labels[j] not in assoc for j in moved))
    return res


_CTX: SweepContext | None = None


def _init_worker(ctx: SweepContext) -> None:
    global _CTX
    _CTX = ctx


def _work(task):
    line, strategy, alpha = task
    return run_scenario(_CTX, line, strategy, alpha)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def grid_digest(grid: GridCase) -> str:
    from .case_io import grid_to_document

    doc = grid_to_document(replace(grid, metadata={}))
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def prepare_sweep(
    grid: GridCase,
    partition: Partition | None = None,
    cost: str | Sequence[float] = "unit",
) -> tuple[GridCase, Partition]:
    """Dispatch the nominal DC OPF on the full network and make sure the
    partition has a tree-inducing switching (largest-flow heuristic when the
    partition carries none).  Without a partition the case's area labels are
    used, or a modularity bisection when the case has none."""
    opf = dc_opf(grid, cost)
    grid = replace(grid, buses=tuple(replace(b, pg=float(v)) for b, v in zip(grid.buses, opf.pg)))
    if partition is None:
        labelled = "partition" in grid.metadata or all(b.area is not None for b in grid.buses)
        partition = Partition.from_grid(grid) if labelled else modularity_bisect(grid.topology())
    partition = Partition(grid, partition.labels, partition.switched_off)
    if not partition.is_tree():
        keep = keep_largest_flow(grid.topology(), grid.injections, partition)
        partition = partition.with_switching(keep)
    return grid, partition


def run_sweep(
    grid: GridCase,
    partition: Partition | None = None,
    strategies: Sequence[Strategy] = STRATEGIES,
    alphas: Sequence[float] = ALPHAS,
    max_stages: int = 100,
    config: ControlConfig = ControlConfig(),
    cost: str | Sequence[float] = "unit",
    workers: int = 1,
    lines: Iterable[int] | None = None,
) -> SweepReport:
    """Every in-service line as the initial failure under every (strategy, alpha).

    The nominal dispatch comes from one DC OPF on the unscaled full network and
    is shared by all strategies and scaling factors.  Tie lines switched off for
    the Tree structure are skipped as initial failures there.
    """
    if not strategies or not alphas:
        raise ValueError("need at least one strategy and one alpha")
    strategies = [Strategy.parse(s) if isinstance(s, str) else s for s in strategies]
    alphas = [float(a) for a in alphas]
    if any(a <= 0 for a in alphas):
        raise ValueError("alpha must be positive")
    grid, partition = prepare_sweep(grid, partition, cost)
    ctx = SweepContext(grid, partition.labels, partition.switched_off, max_stages, config)

    in_service = [k for k, ln in enumerate(grid.lines) if ln.in_service]
    if lines is not None:
        chosen = set(lines)
        in_service = [k for k in in_service if k in chosen]
    tasks = []
    for a in alphas:
        for s in strategies:
            for k in in_service:
                if s.structure == "Tree" and k in partition.switched_off:
                    continue
                tasks.append((k, s, a))

    if workers > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(ctx,)) as ex:
            results = list(ex.map(_work, tasks, chunksize=max(1, len(tasks) // (8 * workers))))
    else:
        results = [run_scenario(ctx, *t) for t in tasks]
    order = {s.name: i for i, s in enumerate(strategies)}
    results.sort(key=lambda r: (alphas.index(r.alpha), order[r.strategy], r.line))

    cfg = {
        "network": grid.name,
        "grid_digest": grid_digest(grid),
        "strategies": [s.name for s in strategies],
        "alphas": alphas,
        "max_stages": max_stages,
        "cost": cost if isinstance(cost, str) else [float(c) for c in cost],
        "controller": {k: (sorted(v) if isinstance(v, frozenset) else
                           (int(v) if hasattr(v, "value") else v))
                       for k, v in asdict(config).items() if k != "agc"},
        "switched_off": sorted(grid.line_label(k) for k in partition.switched_off),
        "lines": None if lines is None else sorted(in_service),
        "llr_tol": LLR_TOL,
        "agr_tol": ADJUST_TOL,
    }
    rows = [summarize(results, s.name, a) for a in alphas for s in strategies]
    return SweepReport(grid.name, cfg, config_hash(cfg), rows, results)
