"""Steady-state unified control: the congestion-aware frequency control optimum,
its AGC relaxation (no line limits), and the constraint-relaxation ladder.

The decision variables are the controllable deviations ``d = p0 - p``.  Every
bus with generation capacity contributes a generation deviation ``g``; once
load shedding is enabled every bus with demand also contributes a load
deviation ``l`` (``l < 0`` sheds load).  Line flows are eliminated through the
grounded transfer matrix of the surviving topology, which is exact because the
island balance rows are always enforced.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Sequence

import numpy as np

from .errors import LadderExhausted
from .kkt import KKTReport, check_kkt
from .network import GridCase, Topology, dc_power_flow
from .qp import solve_qp

ADJUST_TOL = 1e-4


class Level(IntEnum):
    GEN_ONLY = 0
    LOAD_SHED = 1
    ACE_LIFTED = 2


def area_index(area_labels: Sequence) -> tuple[np.ndarray, list]:
    """Map arbitrary area labels to 0..l-1 (sorted; ``None`` counts as one area)."""
    keys = sorted({a for a in area_labels}, key=lambda a: (a is None, a))
    pos = {a: i for i, a in enumerate(keys)}
    return np.array([pos[a] for a in area_labels], dtype=int), keys


@dataclass(frozen=True)
class ControlProblem:
    topology: Topology
    pg: np.ndarray
    pd: np.ndarray
    areas: np.ndarray
    ace_target: np.ndarray
    pg_min: np.ndarray
    pg_max: np.ndarray
    alpha: np.ndarray
    alpha_load: np.ndarray
    f_lo: np.ndarray
    f_hi: np.ndarray
    enforce_limits: bool = True
    level: Level = Level.GEN_ONLY
    lift: frozenset = frozenset()
    # areas lifted at ACE_LIFTED; None lifts every area
    selective_lift: frozenset | None = None

    @classmethod
    def build(
        cls,
        grid: GridCase,
        topology: Topology,
        pg: np.ndarray | None = None,
        pd: np.ndarray | None = None,
        areas: Sequence | np.ndarray | None = None,
        ace_reference: np.ndarray | None = None,
        enforce_limits: bool = True,
        level: Level = Level.GEN_ONLY,
    ) -> "ControlProblem":
        """Problem for the surviving ``topology`` starting from generation ``pg``
        and demand ``pd`` (defaults: the grid's nominal values).

        ``ace_reference`` is the injection vector whose area sums define the
        scheduled interchange; it defaults to the nominal injections.
        """
        pg = grid.vec("pg") if pg is None else np.asarray(pg, float)
        pd = grid.demand if pd is None else np.asarray(pd, float)
        if areas is None:
            areas = [b.area for b in grid.buses]
        # labels are arbitrary (partitions count from 1); rows are 0..l-1
        areas, _ = area_index(list(np.asarray(areas).tolist()))
        ref = grid.injections if ace_reference is None else ace_reference
        l = int(areas.max()) + 1
        target = np.bincount(areas, weights=ref, minlength=l)
        lim = topology.limits
        return cls(
            topology=topology,
            pg=pg,
            pd=pd,
            areas=areas,
            ace_target=target,
            pg_min=grid.vec("pg_min"),
            pg_max=grid.vec("pg_max"),
            alpha=grid.vec("alpha"),
            alpha_load=grid.vec("alpha_load"),
            f_lo=-lim,
            f_hi=lim.copy(),
            enforce_limits=enforce_limits,
            level=Level(level),
        )

    @property
    def p0(self) -> np.ndarray:
        return self.pg - self.pd

    @property
    def n_areas(self) -> int:
        return len(self.ace_target)

    def connected_areas(self) -> np.ndarray:
        """Boolean per area: shares an island with some other area."""
        out = np.zeros(self.n_areas, dtype=bool)
        for comp in self.topology.components:
            present = np.unique(self.areas[comp])
            if present.size > 1:
                out[present] = True
        return out

    def lifted_areas(self) -> np.ndarray:
        lifted = ~self.connected_areas()
        for a in self.lift:
            lifted[a] = True
        if self.level >= Level.ACE_LIFTED:
            if self.selective_lift is None:
                lifted[:] = True
            else:
                for a in self.selective_lift:
                    lifted[a] = True
        return lifted

    def variables(self):
        """(bus, kind, lo, hi, alpha) for every decision variable, kind in {'g','l'}."""
        out = []
        shed = self.level >= Level.LOAD_SHED
        for j in range(len(self.pg)):
            if self.pg_max[j] > 0:
                floor = min(self.pg_min[j], 0.0) if shed else self.pg_min[j]
                lo, hi = self.pg[j] - self.pg_max[j], self.pg[j] - floor
                if hi - lo > 1e-12:
                    out.append((j, "g", min(lo, 0.0), max(hi, 0.0), self.alpha[j]))
            if shed and self.pd[j] != 0:
                a, b = sorted((0.0, -self.pd[j]))
                out.append((j, "l", a, b, self.alpha_load[j]))
        return out


def relax(problem: ControlProblem) -> ControlProblem:
    if problem.level >= Level.ACE_LIFTED:
        return problem
    return replace(problem, level=Level(problem.level + 1))


def relax_strict(problem: ControlProblem) -> ControlProblem:
    """Like :func:`relax` but refuses to move past the top of the ladder."""
    if problem.level >= Level.ACE_LIFTED:
        raise LadderExhausted("relaxation ladder already at ACE_LIFTED")
    return relax(problem)


@dataclass
class ControlSolution:
    status: str
    level: Level
    d: np.ndarray
    d_gen: np.ndarray
    d_load: np.ndarray
    flows: np.ndarray
    angles: np.ndarray
    injections: np.ndarray
    duals: dict
    prices: np.ndarray
    objective: float
    kkt: KKTReport | None
    violation: float = 0.0
    lifted: tuple = ()
    iterations: int = 0
    qp: dict = field(default_factory=dict, repr=False)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"

    def shed(self, pd: np.ndarray) -> float:
        """Total shed demand (positive loads only)."""
        pos = pd > 0
        return float(-self.d_load[pos].sum())

    def adjusted_generators(self, tol: float = ADJUST_TOL) -> np.ndarray:
        return np.flatnonzero(np.abs(self.d_gen) > tol)

    def to_dict(self) -> dict:
        def arr(v):
            return None if v is None else [float(x) for x in np.asarray(v).ravel()]

        return {
            "status": self.status,
            "level": self.level.name,
            "objective": None if not np.isfinite(self.objective) else self.objective,
            "violation": self.violation,
            "d": arr(self.d),
            "d_gen": arr(self.d_gen),
            "d_load": arr(self.d_load),
            "flows": arr(self.flows),
            "angles": arr(self.angles),
            "duals": {k: arr(v) for k, v in self.duals.items()},
            "prices": arr(self.prices),
            "lifted_areas": list(self.lifted),
            "kkt": None if self.kkt is None else self.kkt.__dict__,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def assemble(problem: ControlProblem):
    """QP data (h, c, A, b, G, g) plus bookkeeping for ``problem``."""
    top = problem.topology
    n = len(problem.pg)
    var = problem.variables()
    nv = len(var)
    bus = np.array([v[0] for v in var], dtype=int)
    lo = np.array([v[2] for v in var])
    hi = np.array([v[3] for v in var])
    h = 1.0 / np.array([v[4] for v in var]) if nv else np.zeros(0)
    c = np.zeros(nv)
    p0 = problem.p0

    rows, rhs, tags = [], [], []
    for k, comp in enumerate(top.components):
        mask = np.isin(bus, comp)
        rows.append(mask.astype(float))
        rhs.append(p0[comp].sum())
        tags.append(("balance", k))
    lifted = problem.lifted_areas()
    area_sum = np.bincount(problem.areas, weights=p0, minlength=problem.n_areas)
    for a in range(problem.n_areas):
        if lifted[a]:
            continue
        rows.append((problem.areas[bus] == a).astype(float))
        rhs.append(area_sum[a] - problem.ace_target[a])
        tags.append(("ace", a))
    A = np.array(rows).reshape(-1, nv)
    b = np.array(rhs)

    Gs, gs, gtags = [], [], []
    if problem.enforce_limits and top.m:
        F = top.ptdf
        Fv = F[:, bus]
        f_nom = F @ p0
        Gs += [-Fv, Fv]
        gs += [problem.f_hi - f_nom, f_nom - problem.f_lo]
        gtags += [("line_upper", top.m), ("line_lower", top.m)]
    eye = np.eye(nv)
    Gs += [eye, -eye]
    gs += [hi, -lo]
    gtags += [("var_upper", nv), ("var_lower", nv)]
    G = np.vstack(Gs) if Gs else np.zeros((0, nv))
    g = np.concatenate(gs) if gs else np.zeros(0)
    return dict(
        h=h, c=c, A=A, b=b, G=G, g=g, bus=bus, kind=[v[1] for v in var],
        tags=tags, gtags=gtags, lifted=lifted,
    )


def _solve(problem: ControlProblem, max_iter: int = 100_000) -> ControlSolution:
    top = problem.topology
    n = len(problem.pg)
    qp = assemble(problem)
    bus, kind = qp["bus"], qp["kind"]
    lifted = tuple(int(a) for a in np.flatnonzero(qp["lifted"]))

    if len(bus) == 0:
        # nothing controllable: feasible only if the nominal point already is
        res = _trivial(problem, qp)
    else:
        res = solve_qp(qp["h"], qp["c"], qp["A"], qp["b"], qp["G"], qp["g"], max_iter=max_iter)

    if not res.optimal:
        z = np.zeros(n)
        return ControlSolution(
            "infeasible", problem.level, z, z.copy(), z.copy(), np.zeros(top.m),
            np.zeros(n), problem.p0.copy(), {}, np.zeros(n), np.inf, None,
            violation=res.violation, lifted=lifted, iterations=res.iterations, qp=qp,
        )

    x = res.x
    d_gen = np.zeros(n)
    d_load = np.zeros(n)
    for xi, j, k in zip(x, bus, kind):
        if k == "g":
            d_gen[j] += xi
        else:
            d_load[j] += xi
    d = d_gen + d_load
    p = problem.p0 - d
    state = dc_power_flow(top, p, tol=1e-7)

    duals = {}
    off = 0
    nb = len(top.components)
    eqd = res.eq_duals
    duals["balance"] = eqd[:nb]
    ace = np.zeros(problem.n_areas)
    for (tag, a), val in zip(qp["tags"][nb:], eqd[nb:]):
        ace[a] = val
    duals["ace"] = ace
    for tag, size in qp["gtags"]:
        duals[tag] = res.ineq_duals[off:off + size]
        off += size

    # bus prices: stationarity gives d_j / alpha_j = price_j for interior variables
    price = -duals["balance"][top.island_of] - ace[problem.areas]
    if "line_upper" in duals:
        price = price + top.ptdf.T @ (duals["line_upper"] - duals["line_lower"])

    kkt = check_kkt(qp["h"], qp["c"], qp["A"], qp["b"], qp["G"], qp["g"], x) if len(bus) else KKTReport(0, 0, 0, 0)
    return ControlSolution(
        "optimal", problem.level, d, d_gen, d_load, state.flows, state.angles, p,
        duals, price, res.objective, kkt, lifted=lifted, iterations=res.iterations, qp=qp,
    )


class _Trivial:
    def __init__(self, ok, n_eq, n_in, violation):
        self.optimal = ok
        self.x = np.zeros(0)
        self.eq_duals = np.zeros(n_eq)
        self.ineq_duals = np.zeros(n_in)
        self.objective = 0.0
        self.iterations = 0
        self.violation = violation


def _trivial(problem, qp):
    viol = np.abs(qp["b"]).sum() + np.maximum(-qp["g"], 0).sum()
    return _Trivial(viol <= 1e-9, len(qp["b"]), len(qp["g"]), float(viol))


def solve_uc(problem: ControlProblem, max_iter: int = 100_000) -> ControlSolution:
    return _solve(replace(problem, enforce_limits=True), max_iter)


def solve_agc(problem: ControlProblem, max_iter: int = 100_000) -> ControlSolution:
    return _solve(replace(problem, enforce_limits=False), max_iter)


@dataclass(frozen=True)
class ControlConfig:
    agc: bool = False
    start_level: Level = Level.GEN_ONLY
    max_level: Level = Level.ACE_LIFTED
    selective_lift: frozenset | None = None
    max_iter: int = 100_000


def mitigate_problem(
    problem: ControlProblem, config: ControlConfig = ControlConfig()
) -> tuple[ControlSolution, Level]:
    """Solve at the problem's level, relaxing until feasible."""
    solver = solve_agc if config.agc else solve_uc
    prob = replace(problem, level=Level(config.start_level), selective_lift=config.selective_lift)
    while True:
        sol = solver(prob, config.max_iter)
        if sol.optimal or prob.level >= config.max_level:
            return sol, prob.level
        prob = relax(prob)


def mitigate(
    grid: GridCase,
    topology: Topology,
    config: ControlConfig = ControlConfig(),
    areas=None,
    pg=None,
    pd=None,
    ace_reference=None,
) -> tuple[ControlSolution, Level]:
    problem = ControlProblem.build(
        grid, topology, pg=pg, pd=pd, areas=areas, ace_reference=ace_reference,
        enforce_limits=not config.agc,
    )
    return mitigate_problem(problem, config)


def detect_severe(grid, topology, config: ControlConfig = ControlConfig(), **kw):
    """Severe-failure detection through the primal-dual dynamics; see
    :func:`treegrid.dynamics.detect_severe` for the keyword arguments."""
    from .dynamics import detect_severe as _detect

    return _detect(grid, topology, config, **kw)
