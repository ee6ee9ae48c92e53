"""Grid data model and DC power flow.

Buses are addressed by position (0..n-1) everywhere inside the package; the
``id`` field is only used for I/O and for ordering (positions are sorted by id).
Lines are addressed by their position in ``GridCase.lines``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.linalg as sla
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import CaseError, UnbalancedIsland

BALANCE_TOL = 1e-9
RESIDUAL_TOL = 1e-8


@dataclass(frozen=True)
class Bus:
    """One bus. Powers are in per-unit on the case base."""

    id: int
    pd: float = 0.0
    pg: float = 0.0
    pg_min: float = 0.0
    pg_max: float = 0.0
    damping: float = 0.05
    inertia: float = 0.1
    alpha: float = 1.0
    alpha_load: float = 0.01
    area: int | None = None
    gen_cost: float = 1.0

    @property
    def injection(self) -> float:
        return self.pg - self.pd

    @property
    def is_generator(self) -> bool:
        return self.pg_max > 0.0

    @property
    def control_bounds(self) -> tuple[float, float]:
        """Bounds on the generation-side deviation d (p = p0 - d)."""
        if not self.is_generator:
            return 0.0, 0.0
        return self.pg - self.pg_max, self.pg - self.pg_min


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    susceptance: float
    limit: float
    in_service: bool = True


@dataclass(frozen=True)
class GridCase:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    base_mva: float = 100.0
    name: str = ""
    metadata: Mapping = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        ids = [b.id for b in self.buses]
        if any(a >= b for a, b in zip(ids, ids[1:])):
            raise CaseError("buses", "bus ids must be unique and sorted ascending")
        index = {bid: i for i, bid in enumerate(ids)}
        for k, ln in enumerate(self.lines):
            if ln.from_bus not in index or ln.to_bus not in index:
                raise CaseError(f"lines[{k}]", "endpoint references an unknown bus")
            if ln.from_bus == ln.to_bus:
                raise CaseError(f"lines[{k}]", "self loop")
            if not ln.susceptance > 0:
                raise CaseError(f"lines[{k}].susceptance", "must be strictly positive")
            if not ln.limit > 0:
                raise CaseError(f"lines[{k}].limit", "must be strictly positive")
        for b in self.buses:
            if not b.inertia > 0:
                raise CaseError(f"bus {b.id}.inertia", "must be strictly positive")
            if b.damping < 0:
                raise CaseError(f"bus {b.id}.damping", "must be non-negative")
            if not (b.alpha > 0 and b.alpha_load > 0):
                raise CaseError(f"bus {b.id}.alpha", "gains must be strictly positive")

    @cached_property
    def index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    @cached_property
    def endpoints(self) -> np.ndarray:
        """(m, 2) array of bus positions for every line."""
        idx = self.index
        return np.array(
            [(idx[ln.from_bus], idx[ln.to_bus]) for ln in self.lines], dtype=int
        ).reshape(-1, 2)

    @cached_property
    def susceptances(self) -> np.ndarray:
        return np.array([ln.susceptance for ln in self.lines], dtype=float)

    @cached_property
    def limits(self) -> np.ndarray:
        return np.array([ln.limit for ln in self.lines], dtype=float)

    @cached_property
    def injections(self) -> np.ndarray:
        return np.array([b.injection for b in self.buses], dtype=float)

    @cached_property
    def demand(self) -> np.ndarray:
        return np.array([b.pd for b in self.buses], dtype=float)

    def vec(self, attr: str) -> np.ndarray:
        return np.array([getattr(b, attr) for b in self.buses], dtype=float)

    @cached_property
    def area_of(self) -> dict[int, int | None]:
        return {b.id: b.area for b in self.buses}

    def line_label(self, k: int) -> str:
        ln = self.lines[k]
        return f"({ln.from_bus},{ln.to_bus})"

    def find_line(self, a: int, b: int) -> int:
        """Position of the first line joining bus ids a and b (either orientation)."""
        for k, ln in enumerate(self.lines):
            if {ln.from_bus, ln.to_bus} == {a, b}:
                return k
        raise KeyError(f"no line between buses {a} and {b}")

    def with_buses(self, buses: Iterable[Bus]) -> "GridCase":
        return replace(self, buses=tuple(buses))

    def with_lines(self, lines: Iterable[Line]) -> "GridCase":
        return replace(self, lines=tuple(lines))

    def with_injections(self, pg: Sequence[float]) -> "GridCase":
        return self.with_buses(replace(b, pg=float(g)) for b, g in zip(self.buses, pg))

    def topology(self, exclude: Iterable[int] = ()) -> "Topology":
        """Topology of in-service lines, minus ``exclude``."""
        drop = set(exclude)
        keep = tuple(
            k for k, ln in enumerate(self.lines) if ln.in_service and k not in drop
        )
        return Topology(self, keep)


@dataclass(frozen=True)
class Topology:
    """An ordered subset of the lines of a grid."""

    grid: GridCase
    lines: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "lines", tuple(int(k) for k in self.lines))

    def __eq__(self, other):
        return (
            isinstance(other, Topology)
            and self.grid is other.grid
            and self.lines == other.lines
        )

    def __hash__(self):
        return hash((id(self.grid), self.lines))

    @property
    def n(self) -> int:
        return self.grid.n_buses

    @property
    def m(self) -> int:
        return len(self.lines)

    def without(self, removed: Iterable[int]) -> "Topology":
        drop = set(removed)
        return Topology(self.grid, tuple(k for k in self.lines if k not in drop))

    @cached_property
    def endpoints(self) -> np.ndarray:
        return self.grid.endpoints[list(self.lines)].reshape(-1, 2)

    @cached_property
    def susceptances(self) -> np.ndarray:
        return self.grid.susceptances[list(self.lines)]

    @cached_property
    def limits(self) -> np.ndarray:
        return self.grid.limits[list(self.lines)]

    @cached_property
    def incidence(self) -> np.ndarray:
        """Node-edge incidence matrix C (n x m): +1 at the from bus, -1 at the to bus."""
        C = np.zeros((self.n, self.m))
        cols = np.arange(self.m)
        C[self.endpoints[:, 0], cols] = 1.0
        C[self.endpoints[:, 1], cols] = -1.0
        return C

    @cached_property
    def laplacian(self) -> np.ndarray:
        C = self.incidence
        return (C * self.susceptances) @ C.T

    @cached_property
    def components(self) -> tuple[np.ndarray, ...]:
        n = self.n
        if self.m:
            e = self.endpoints
            adj = coo_matrix(
                (np.ones(self.m), (e[:, 0], e[:, 1])), shape=(n, n)
            ).tocsr()
        else:
            adj = coo_matrix((n, n)).tocsr()
        count, labels = connected_components(adj, directed=False)
        comps = [np.flatnonzero(labels == c) for c in range(count)]
        # positions are sorted by bus id, so comp[0] is the smallest id
        comps.sort(key=lambda c: c[0])
        return tuple(comps)

    @cached_property
    def island_of(self) -> np.ndarray:
        lab = np.empty(self.n, dtype=int)
        for i, comp in enumerate(self.components):
            lab[comp] = i
        return lab

    @property
    def is_connected(self) -> bool:
        return len(self.components) == 1

    @cached_property
    def _factors(self):
        L = self.laplacian
        out = []
        for comp in self.components:
            rest = comp[1:]
            if rest.size == 0:
                out.append((comp, rest, None))
                continue
            sub = L[np.ix_(rest, rest)]
            out.append((comp, rest, sla.cho_factor(sub)))
        return out

    @cached_property
    def ptdf(self) -> np.ndarray:
        """Grounded transfer matrix F (m x n) with f = F p for island-balanced p.

        Column j gives line flows for a unit injection at bus j withdrawn at the
        reference (lowest id) bus of its island.
        """
        X = np.zeros((self.n, self.n))
        for comp, rest, fac in self._factors:
            if fac is None:
                continue
            X[np.ix_(rest, rest)] = sla.cho_solve(fac, np.eye(rest.size))
        return (self.incidence.T * self.susceptances[:, None]) @ X

    def island_sums(self, p: np.ndarray) -> np.ndarray:
        return np.array([p[c].sum() for c in self.components])


@dataclass(frozen=True)
class PowerFlowState:
    flows: np.ndarray
    angles: np.ndarray


def islands(topology: Topology) -> list[list[int]]:
    """Connected components as sorted lists of bus ids, ordered by smallest id."""
    ids = [b.id for b in topology.grid.buses]
    return [[ids[i] for i in comp] for comp in topology.components]


def check_balance(topology: Topology, p: np.ndarray, tol: float = BALANCE_TOL) -> None:
    for i, s in enumerate(topology.island_sums(p)):
        if abs(s) > tol:
            raise UnbalancedIsland(i, float(s))


def laplacian_pinv_solve(
    topology: Topology, rhs: np.ndarray, tol: float = BALANCE_TOL
) -> np.ndarray:
    """Solve L x = rhs island by island with the lowest-id bus of each island at 0."""
    rhs = np.asarray(rhs, dtype=float)
    check_balance(topology, rhs, tol)
    x = np.zeros(topology.n)
    for comp, rest, fac in topology._factors:
        if fac is not None:
            x[rest] = sla.cho_solve(fac, rhs[rest])
    return x


def dc_power_flow(
    topology: Topology, injections: np.ndarray, tol: float = BALANCE_TOL
) -> PowerFlowState:
    p = np.asarray(injections, dtype=float)
    theta = laplacian_pinv_solve(topology, p, tol)
    flows = topology.susceptances * (topology.incidence.T @ theta)
    resid = np.abs(p - topology.incidence @ flows).max(initial=0.0)
    # residual should be roundoff only; the imbalance tolerance is the floor
    assert resid <= max(RESIDUAL_TOL, 10 * tol), resid
    return PowerFlowState(flows=flows, angles=theta)


def check_limits(
    state: PowerFlowState, topology: Topology, tol: float = 0.0
) -> frozenset[int]:
    """Grid line positions whose flow strictly exceeds the limit (plus ``tol``)."""
    over = np.abs(state.flows) > topology.limits + tol
    return frozenset(topology.lines[i] for i in np.flatnonzero(over))


def loading(state: PowerFlowState, topology: Topology) -> np.ndarray:
    return np.abs(state.flows) / topology.limits
