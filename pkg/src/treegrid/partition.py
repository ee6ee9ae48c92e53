"""Control areas, tie lines and tie-line switching.

Areas are labelled by integers.  ``modularity_bisect`` always returns labels
1 and 2 with the lowest-id bus in area 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.linalg as sla
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import DisconnectedInput, NoSpanningTree, PartitionBroken
from .network import GridCase, Topology, dc_power_flow

MAX_TREES = 100_000


@dataclass(frozen=True)
class Partition:
    """Bus-to-area assignment plus the set of switched-off tie lines.

    ``labels[i]`` is the area of bus position ``i``; ``switched_off`` holds grid
    line positions.
    """

    grid: GridCase
    labels: tuple[int, ...]
    switched_off: frozenset[int] = frozenset()

    def __post_init__(self):
        if len(self.labels) != self.grid.n_buses:
            raise ValueError("one area label per bus required")
        object.__setattr__(self, "labels", tuple(int(a) for a in self.labels))
        object.__setattr__(self, "switched_off", frozenset(int(k) for k in self.switched_off))

    @property
    def areas(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.labels)))

    @property
    def n_areas(self) -> int:
        return len(self.areas)

    @property
    def label_array(self) -> np.ndarray:
        return np.array(self.labels, dtype=int)

    def members(self, area: int) -> list[int]:
        """Bus ids in ``area``."""
        return [b.id for b, a in zip(self.grid.buses, self.labels) if a == area]

    def area_of_bus(self, bus_id: int) -> int:
        return self.labels[self.grid.index[bus_id]]

    def sizes(self) -> tuple[int, ...]:
        return tuple(self.labels.count(a) for a in self.areas)

    def with_switching(self, switched_off: Iterable[int]) -> "Partition":
        return Partition(self.grid, self.labels, frozenset(switched_off))

    def switched_topology(self, topology: Topology | None = None) -> Topology:
        top = self.grid.topology() if topology is None else topology
        return top.without(self.switched_off)

    def is_tree(self, topology: Topology | None = None) -> bool:
        """Whether the remaining tie lines connect the areas as a tree."""
        top = self.switched_topology(topology)
        edges = [(a, b) for _, a, b in reduced_graph(top, self)]
        return _is_spanning_tree(self.areas, edges)

    def to_dict(self) -> dict:
        return {
            "area_of": {str(b.id): a for b, a in zip(self.grid.buses, self.labels)},
            "switched_off": [
                [self.grid.lines[k].from_bus, self.grid.lines[k].to_bus]
                for k in sorted(self.switched_off)
            ],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, grid: GridCase, doc: Mapping) -> "Partition":
        amap = {int(k): int(v) for k, v in doc["area_of"].items()}
        missing = [b.id for b in grid.buses if b.id not in amap]
        if missing:
            raise ValueError(f"partition misses buses {missing[:5]}")
        labels = [amap[b.id] for b in grid.buses]
        off = [grid.find_line(int(a), int(b)) for a, b in doc.get("switched_off", [])]
        return cls(grid, tuple(labels), frozenset(off))

    @classmethod
    def from_json(cls, grid: GridCase, text: str) -> "Partition":
        return cls.from_dict(grid, json.loads(text))

    @classmethod
    def from_grid(cls, grid: GridCase) -> "Partition":
        """Partition from the case's bus ``area`` fields, or its partition block."""
        block = grid.metadata.get("partition")
        if block and "area_of" in block:
            return cls.from_dict(grid, block)
        if any(b.area is None for b in grid.buses):
            raise ValueError("case has buses without an area label")
        return cls(grid, tuple(b.area for b in grid.buses))


# --------------------------------------------------------------------------
# graph helpers


def _adjacency(topology: Topology, weights: np.ndarray | None = None) -> np.ndarray:
    n = topology.n
    w = np.ones(topology.m) if weights is None else np.asarray(weights, float)
    e = topology.endpoints
    W = np.zeros((n, n))
    np.add.at(W, (e[:, 0], e[:, 1]), w)
    np.add.at(W, (e[:, 1], e[:, 0]), w)
    return W


def _n_components(W: np.ndarray, mask: np.ndarray) -> int:
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return 0
    return connected_components(csr_matrix(W[np.ix_(idx, idx)] > 0), directed=False)[0]


def _components(W: np.ndarray, mask: np.ndarray) -> list[np.ndarray]:
    idx = np.flatnonzero(mask)
    count, lab = connected_components(csr_matrix(W[np.ix_(idx, idx)] > 0), directed=False)
    return [idx[lab == c] for c in range(count)]


def modularity_matrix(W: np.ndarray) -> np.ndarray:
    k = W.sum(axis=1)
    return W - np.outer(k, k) / k.sum()


def modularity(topology: Topology, labels: Sequence[int], weights=None) -> float:
    """Newman modularity of a bus labelling on the (optionally weighted) graph."""
    W = _adjacency(topology, weights)
    B = modularity_matrix(W)
    lab = np.asarray(labels)
    same = lab[:, None] == lab[None, :]
    return float(B[same].sum() / W.sum())


def _q2(B: np.ndarray, s: np.ndarray, two_m: float) -> float:
    return float(s @ B @ s) / (2.0 * two_m)


def _repair(W: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Move every stray fragment of a side into the other side."""
    s = s.copy()
    for side in (1.0, -1.0):
        comps = _components(W, s == side) if np.any(s == side) else []
        if len(comps) > 1:
            comps.sort(key=lambda c: (-len(c), c[0]))
            for c in comps[1:]:
                s[c] = -side
    return s


def _refine(W: np.ndarray, B: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Kernighan-Lin passes restricted to moves keeping both sides connected.

    Each pass moves every bus at most once, always taking the best admissible
    single move, and keeps the best prefix; passes repeat while modularity
    strictly increases.
    """
    two_m = W.sum()
    diag = np.diag(B)
    best_q = _q2(B, s, two_m)
    while True:
        cur = s.copy()
        moved = np.zeros(s.size, dtype=bool)
        pass_best, pass_s = best_q, None
        for _ in range(s.size):
            gain = -cur * (B @ cur) + diag
            gain[moved] = -np.inf
            pick = -1
            for i in np.argsort(-gain, kind="stable"):
                if not np.isfinite(gain[i]):
                    break
                cur[i] = -cur[i]
                if np.any(cur > 0) and np.any(cur < 0) and \
                        _n_components(W, cur > 0) == 1 and _n_components(W, cur < 0) == 1:
                    pick = i
                    break
                cur[i] = -cur[i]
            if pick < 0:
                break
            moved[pick] = True
            q = _q2(B, cur, two_m)
            if q > pass_best + 1e-12:
                pass_best, pass_s = q, cur.copy()
        if pass_s is None:
            return s
        s, best_q = pass_s, pass_best


def modularity_bisect(
    topology: Topology, method: str = "spectral", weights: np.ndarray | None = None
) -> Partition:
    """Two connected control areas with high modularity.

    ``method="spectral"`` seeds the split with the sign pattern of the Fiedler
    vector of the graph Laplacian; ``method="leading"`` uses the leading
    eigenvector of the modularity matrix.  Either seed is repaired to two
    connected sides and then refined by connectivity-preserving Kernighan-Lin
    moves that increase modularity.
    """
    if topology.n < 2:
        raise DisconnectedInput("bisection needs at least two buses")
    if not topology.is_connected:
        raise DisconnectedInput("bisection needs a connected network")
    W = _adjacency(topology, weights)
    B = modularity_matrix(W)
    if method == "spectral":
        L = np.diag(W.sum(axis=1)) - W
        vec = sla.eigh(L, subset_by_index=[1, 1])[1][:, 0]
    elif method == "leading":
        vec = sla.eigh(B, subset_by_index=[topology.n - 1, topology.n - 1])[1][:, 0]
    else:
        raise ValueError(f"unknown bisection method {method!r}")
    s = np.where(vec >= 0, 1.0, -1.0)
    if np.all(s == s[0]):
        # degenerate seed: split off the bus with the smallest entry
        s[np.argmin(vec)] = -s[0]
    s = _repair(W, s)
    if np.all(s == s[0]):
        s[-1] = -s[0]
        s = _repair(W, s)
    s = _refine(W, B, s)
    labels = np.where(s == s[0], 1, 2)
    return Partition(topology.grid, tuple(int(a) for a in labels))


# --------------------------------------------------------------------------
# tie lines and the reduced graph


def tie_lines(topology: Topology, partition: Partition) -> tuple[int, ...]:
    """Grid positions of the lines of ``topology`` joining different areas."""
    lab = partition.label_array
    e = topology.endpoints
    cross = lab[e[:, 0]] != lab[e[:, 1]] if topology.m else np.zeros(0, bool)
    return tuple(topology.lines[i] for i in np.flatnonzero(cross))


def reduced_graph(topology: Topology, partition: Partition) -> list[tuple[int, int, int]]:
    """Edges (line, area_a, area_b) of the area multigraph, one per tie line."""
    lab = partition.label_array
    out = []
    for i, k in enumerate(topology.lines):
        a, b = lab[topology.endpoints[i]]
        if a != b:
            out.append((k, int(a), int(b)))
    return out


class _DSU:
    def __init__(self, items):
        self.p = {x: x for x in items}

    def find(self, x):
        while self.p[x] != x:
            self.p[x] = self.p[self.p[x]]
            x = self.p[x]
        return x

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.p[ra] = rb
        return True


def _is_spanning_tree(nodes, edges) -> bool:
    nodes = list(nodes)
    if len(edges) != len(nodes) - 1:
        return False
    dsu = _DSU(nodes)
    return all(dsu.union(a, b) for a, b in edges)


def spanning_tree_count(areas: Sequence[int], edges: Sequence[tuple[int, int]]) -> int:
    """Matrix-tree count of spanning trees of the area multigraph."""
    pos = {a: i for i, a in enumerate(areas)}
    n = len(areas)
    if n == 1:
        return 1
    L = np.zeros((n, n))
    for a, b in edges:
        i, j = pos[a], pos[b]
        L[i, i] += 1
        L[j, j] += 1
        L[i, j] -= 1
        L[j, i] -= 1
    return int(round(np.linalg.det(L[1:, 1:])))


def _check_areas_intact(topology: Topology, partition: Partition) -> None:
    lab = partition.label_array
    W = _adjacency(topology)
    for a in partition.areas:
        mask = lab == a
        if _n_components(W, mask) > 1:
            raise PartitionBroken(f"area {a} is internally disconnected")


def congestion_level(
    topology: Topology,
    injections: np.ndarray,
    switched_off: Iterable[int] = (),
    partition: Partition | None = None,
) -> float:
    """max |f_e| / limit_e on the network with ``switched_off`` removed."""
    top = topology.without(switched_off)
    if partition is not None:
        _check_areas_intact(top, partition)
    state = dc_power_flow(top, injections, tol=1e-7)
    if top.m == 0:
        return 0.0
    return float(np.max(np.abs(state.flows) / top.limits))


@dataclass(frozen=True)
class Switching:
    switched_off: frozenset[int]
    gamma: float
    candidates: int
    exhaustive: bool


def _spanning_trees(areas, ties):
    """Yield tuples of tie-line positions (indices into ``ties``) forming spanning trees."""
    need = len(areas) - 1

    def rec(start, chosen, dsu_parent):
        if len(chosen) == need:
            yield tuple(chosen)
            return
        if len(ties) - start < need - len(chosen):
            return
        for i in range(start, len(ties)):
            _, a, b = ties[i]
            dsu = _DSU(areas)
            dsu.p = dict(dsu_parent)
            if dsu.union(a, b):
                yield from rec(i + 1, chosen + [i], dsu.p)

    yield from rec(0, [], {a: a for a in areas})


def optimal_switching(
    topology: Topology,
    injections: np.ndarray,
    partition: Partition,
    max_trees: int = MAX_TREES,
) -> Switching:
    """Tie lines to switch off so that the areas form a tree with minimum congestion.

    Ties in congestion are broken by keeping the tie-line set with the largest
    total nominal |flow|, then by the lexicographically smallest kept set.
    """
    ties = reduced_graph(topology, partition)
    areas = partition.areas
    edges = [(a, b) for _, a, b in ties]
    count = spanning_tree_count(areas, edges)
    if count == 0:
        raise NoSpanningTree("reduced area graph is disconnected")
    f0 = np.abs(dc_power_flow(topology, injections, tol=1e-7).flows)
    flow_of = {k: f0[i] for i, k in enumerate(topology.lines)}
    tie_ids = [k for k, _, _ in ties]

    if count <= max_trees:
        best = None
        n_eval = 0
        for kept in _spanning_trees(areas, ties):
            kept_ids = tuple(tie_ids[i] for i in kept)
            off = frozenset(tie_ids) - set(kept_ids)
            gamma = congestion_level(topology, injections, off)
            n_eval += 1
            key = (gamma, -sum(flow_of[k] for k in kept_ids), kept_ids)
            if best is None or key < best[0]:
                best = (key, off)
        return Switching(best[1], best[0][0], n_eval, True)

    off = _greedy_max_flow_tree(areas, ties, flow_of)
    return Switching(off, congestion_level(topology, injections, off), 1, False)


def _greedy_max_flow_tree(areas, ties, flow_of) -> frozenset[int]:
    """Kruskal on descending |f0| (ties: lower line position first)."""
    order = sorted(ties, key=lambda t: (-flow_of[t[0]], t[0]))
    dsu = _DSU(areas)
    kept = {k for k, a, b in order if dsu.union(a, b)}
    return frozenset(k for k, _, _ in ties) - kept


def keep_largest_flow(
    topology: Topology, injections: np.ndarray, partition: Partition
) -> frozenset[int]:
    """Switch off every tie line except the one carrying the largest nominal |flow|.

    With more than two areas the same rule is applied greedily, keeping a
    maximum-|flow| spanning tree of the area graph.
    """
    ties = reduced_graph(topology, partition)
    if spanning_tree_count(partition.areas, [(a, b) for _, a, b in ties]) == 0:
        raise NoSpanningTree("reduced area graph is disconnected")
    f0 = np.abs(dc_power_flow(topology, injections, tol=1e-7).flows)
    flow_of = {k: f0[i] for i, k in enumerate(topology.lines)}
    return _greedy_max_flow_tree(partition.areas, ties, flow_of)


def associated_areas(failures: Iterable[int], partition: Partition) -> frozenset[int]:
    """Areas containing an endpoint of any failed line."""
    grid = partition.grid
    out = set()
    for k in failures:
        for i in grid.endpoints[k]:
            out.add(partition.labels[i])
    return frozenset(out)

