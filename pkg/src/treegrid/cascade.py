"""Stage-by-stage cascading failure simulation.

Stage k removes the lines in E(k), lets a balancing rule pick new injections on
the surviving network, and recomputes the DC flows.  Every line whose flow then
strictly exceeds its limit trips together at stage k+1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .control import ControlConfig, ControlProblem, Level, mitigate_problem
from .errors import DegenerateIsland, RuleFailure
from .network import GridCase, Topology, check_limits, dc_power_flow

MAX_STAGES = 100
# absorbs solver roundoff on flows that sit exactly at a limit
TRIP_TOL = 1e-6


@dataclass
class GridState:
    """Operating point carried between stages: generation, demand, injections."""

    pg: np.ndarray
    pd: np.ndarray
    p: np.ndarray

    @classmethod
    def nominal(cls, grid: GridCase, pg: np.ndarray | None = None) -> "GridState":
        pg = grid.vec("pg") if pg is None else np.asarray(pg, float)
        pd = grid.demand.copy()
        return cls(pg.copy(), pd, pg - pd)


@dataclass
class RuleOutcome:
    state: GridState
    level: Level | None = None
    status: str = "ok"
    info: dict = field(default_factory=dict)


class BalancingRule:
    """Maps the previous operating point and the surviving topology to a
    balanced one.  Subclasses implement :meth:`balance`."""

    name = "rule"
    controller = False

    def balance(self, grid: GridCase, topology: Topology, state: GridState) -> RuleOutcome:
        raise NotImplementedError


def proportional_balance(
    p_prev: np.ndarray,
    topology: Topology,
    alpha: np.ndarray,
    damping: np.ndarray,
) -> np.ndarray:
    """Share each island's imbalance in proportion to alpha_j + D_j."""
    p_prev = np.asarray(p_prev, float)
    w = np.asarray(alpha, float) + np.asarray(damping, float)
    out = p_prev.copy()
    for k, comp in enumerate(topology.components):
        s = p_prev[comp].sum()
        if s == 0.0:
            continue
        tot = w[comp].sum()
        if tot <= 0:
            raise DegenerateIsland(k, float(s))
        out[comp] = p_prev[comp] - w[comp] / tot * s
    return out


def _zero_degenerate(p, topology, weights):
    """Zero every island that has imbalance but no gain to absorb it."""
    p = p.copy()
    zeroed = []
    for k, comp in enumerate(topology.components):
        if abs(p[comp].sum()) > 0 and weights[comp].sum() <= 0:
            p[comp] = 0.0
            zeroed.append(k)
    return p, zeroed


class ProportionalRule(BalancingRule):
    """Rule R_c: unchanged when connected, proportional sharing per island."""

    name = "proportional"

    def __init__(self, alpha: np.ndarray | None = None, damping: np.ndarray | None = None):
        self.alpha = alpha
        self.damping = damping

    def _gains(self, grid):
        a = grid.vec("alpha") if self.alpha is None else np.asarray(self.alpha, float)
        d = grid.vec("damping") if self.damping is None else np.asarray(self.damping, float)
        return a, d

    def balance(self, grid, topology, state):
        a, d = self._gains(grid)
        p, zeroed = _zero_degenerate(state.p, topology, a + d)
        if zeroed:
            state = GridState(
                np.where(np.isin(topology.island_of, zeroed), 0.0, state.pg),
                np.where(np.isin(topology.island_of, zeroed), 0.0, state.pd),
                p,
            )
        new = proportional_balance(p, topology, a, d)
        delta = state.p - new
        # attribute the correction to generation; demand is left alone
        return RuleOutcome(
            GridState(state.pg - delta, state.pd.copy(), new),
            info={"zeroed_islands": zeroed},
        )


class DroopRule(ProportionalRule):
    """Steady state of the droop-controlled swing dynamics on each island."""

    name = "droop"

    def balance(self, grid, topology, state):
        from .dynamics import droop_equilibrium

        a, d = self._gains(grid)
        p, zeroed = _zero_degenerate(state.p, topology, a + d)
        eq = droop_equilibrium(grid, topology, p, alpha=a, damping=d)
        new = p - eq.d - eq.damping_power
        return RuleOutcome(
            GridState(state.pg - (state.p - new), state.pd.copy(), new),
            info={"zeroed_islands": zeroed, "omega": eq.omega},
        )


class UnifiedControllerRule(BalancingRule):
    """Steady state of the unified controller (or AGC with ``config.agc``),
    including the relaxation ladder."""

    controller = True

    def __init__(
        self,
        config: ControlConfig = ControlConfig(),
        areas: Sequence | np.ndarray | None = None,
        ace_reference: np.ndarray | None = None,
    ):
        self.config = config
        self.areas = areas
        self.ace_reference = ace_reference

    @property
    def name(self):
        return "agc" if self.config.agc else "uc"

    def balance(self, grid, topology, state):
        ref = self.ace_reference
        if ref is None:
            ref = grid.injections
        problem = ControlProblem.build(
            grid, topology, pg=state.pg, pd=state.pd, areas=self.areas,
            ace_reference=ref, enforce_limits=not self.config.agc,
        )
        sol, level = mitigate_problem(problem, self.config)
        if not sol.optimal:
            raise RuleFailure(
                f"controller infeasible at {level.name} (violation {sol.violation:.3g})"
            )
        pg = state.pg - sol.d_gen
        pd = state.pd + sol.d_load
        return RuleOutcome(
            GridState(pg, pd, pg - pd),
            level=level,
            status=sol.status,
            info={
                "objective": sol.objective,
                "kkt": sol.kkt.max() if sol.kkt is not None else None,
                "lifted_areas": list(sol.lifted),
                "max_dual": max(
                    (float(np.abs(v).max(initial=0.0)) for v in sol.duals.values()),
                    default=0.0,
                ),
            },
        )


class AgcRule(UnifiedControllerRule):
    """The unified controller without line limits."""

    def __init__(self, config: ControlConfig = ControlConfig(agc=True), areas=None,
                 ace_reference=None):
        if not config.agc:
            config = ControlConfig(**{**config.__dict__, "agc": True})
        super().__init__(config, areas, ace_reference)


class Termination(str, Enum):
    TERMINATED = "Terminated"
    MAX_STAGES = "MaxStagesExceeded"


@dataclass
class Stage:
    index: int
    tripped: frozenset[int]
    topology: Topology
    state: GridState
    flows: np.ndarray
    overloads: frozenset[int]
    level: Level | None = None
    status: str = "ok"
    info: dict = field(default_factory=dict)


@dataclass
class CascadeTrace:
    grid: GridCase
    initial: GridState
    stages: list[Stage]
    terminal_status: Termination

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    @property
    def final(self) -> Stage:
        return self.stages[-1]

    @property
    def failed_lines(self) -> frozenset[int]:
        out: set[int] = set()
        for st in self.stages:
            out |= st.tripped
        return frozenset(out)

    @property
    def max_level(self) -> Level | None:
        levels = [st.level for st in self.stages if st.level is not None]
        return max(levels) if levels else None

    def shed(self) -> float:
        """Total demand lost over the cascade (positive loads only)."""
        pd0 = self.initial.pd
        pos = pd0 > 0
        return float(np.sum(pd0[pos] - np.maximum(self.final.state.pd[pos], 0.0)))

    def generation_change(self) -> np.ndarray:
        return self.initial.pg - self.final.state.pg

    def to_dict(self) -> dict:
        g = self.grid

        def lines(ks):
            return [g.line_label(k) for k in sorted(ks)]

        return {
            "terminal_status": self.terminal_status.value,
            "stages": [
                {
                    "stage": st.index,
                    "tripped": lines(st.tripped),
                    "surviving": len(st.topology.lines),
                    "overloads": lines(st.overloads),
                    "level": None if st.level is None else st.level.name,
                    "status": st.status,
                    "injections": [float(v) for v in st.state.p],
                    "flows": {g.line_label(k): float(f) for k, f in zip(st.topology.lines, st.flows)},
                }
                for st in self.stages
            ],
            "shed": self.shed(),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def to_csv_rows(self) -> list[list]:
        rows = [["stage", "line", "flow", "limit", "tripped_next"]]
        for st in self.stages:
            for i, k in enumerate(st.topology.lines):
                rows.append([st.index, self.grid.line_label(k), float(st.flows[i]),
                             float(st.topology.limits[i]), int(k in st.overloads)])
        return rows


def run_cascade(
    grid: GridCase,
    initial_failures: Iterable[int],
    rule: BalancingRule,
    max_stages: int = MAX_STAGES,
    topology: Topology | None = None,
    start: GridState | None = None,
    trip_tol: float = TRIP_TOL,
) -> CascadeTrace:
    """Simulate the cascade triggered by ``initial_failures`` (grid line positions).

    ``topology`` is the pre-failure network (default: all in-service lines) and
    ``start`` the pre-failure operating point (default: nominal).
    """
    failures = frozenset(int(k) for k in initial_failures)
    top = grid.topology() if topology is None else topology
    if not failures:
        raise ValueError("initial failure set is empty")
    missing = failures - set(top.lines)
    if missing:
        raise ValueError(f"lines {sorted(missing)} are not in service")
    if max_stages < 1:
        raise ValueError("max_stages must be at least 1")

    state = GridState.nominal(grid) if start is None else start
    initial = state
    stages: list[Stage] = []
    trip = failures
    for k in range(1, max_stages + 1):
        top = top.without(trip)
        try:
            out = rule.balance(grid, top, state)
        except DegenerateIsland as exc:
            raise RuleFailure(str(exc)) from exc
        state = out.state
        flows = dc_power_flow(top, state.p, tol=1e-7)
        over = check_limits(flows, top, trip_tol)
        stages.append(Stage(k, trip, top, state, flows.flows, over, out.level, out.status, out.info))
        if not over:
            return CascadeTrace(grid, initial, stages, Termination.TERMINATED)
        trip = over
    return CascadeTrace(grid, initial, stages, Termination.MAX_STAGES)
