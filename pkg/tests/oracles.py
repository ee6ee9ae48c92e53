"""Independent reference implementations used only by the tests.

Nothing here imports solver code from ``treegrid``: flows come from dense
grounded Laplacians, QPs from active-set enumeration (or SLSQP followed by an
exact active-set polish), modularity and switching from exhaustive search.
Inputs are plain arrays and edge lists.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.optimize import linprog, minimize

# --------------------------------------------------------------------------
# graphs and DC flow


def components(n: int, edges) -> list[list[int]]:
    """Connected components (sorted lists of bus positions) ordered by smallest member."""
    adj = [[] for _ in range(n)]
    for i, j, *_ in edges:
        adj[i].append(j)
        adj[j].append(i)
    seen = [False] * n
    out = []
    for s in range(n):
        if seen[s]:
            continue
        stack, comp = [s], []
        seen[s] = True
        while stack:
            u = stack.pop()
            comp.append(u)
            for v in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)
        out.append(sorted(comp))
    return out


def dense_flows(n: int, edges, p) -> tuple[np.ndarray, np.ndarray]:
    """Flows and angles for ``edges = [(i, j, b), ...]`` via a dense reduced
    Laplacian solve per island, lowest bus of each island grounded."""
    p = np.asarray(p, float)
    L = np.zeros((n, n))
    for i, j, b in edges:
        L[i, i] += b
        L[j, j] += b
        L[i, j] -= b
        L[j, i] -= b
    theta = np.zeros(n)
    for comp in components(n, edges):
        rest = comp[1:]
        if rest:
            theta[rest] = np.linalg.solve(L[np.ix_(rest, rest)], p[rest])
    flows = np.array([b * (theta[i] - theta[j]) for i, j, b in edges])
    return flows, theta


def grid_edges(grid, lines) -> list[tuple[int, int, float]]:
    """Plain edge list for the given line positions of a ``GridCase``."""
    idx = {b.id: k for k, b in enumerate(grid.buses)}
    return [
        (idx[grid.lines[k].from_bus], idx[grid.lines[k].to_bus], grid.lines[k].susceptance)
        for k in lines
    ]


# --------------------------------------------------------------------------
# convex QP:  min 1/2 x^T diag(h) x + c^T x  s.t.  A x = b,  G x <= g
#
# h may contain zeros (free angle variables) as long as the equality rows pin
# those variables down.


def _kkt_solve(h, c, A, b, G, g, active):
    n = len(h)
    M = np.vstack([A, G[list(active)]]) if len(active) else A
    r = np.concatenate([b, g[list(active)]]) if len(active) else b
    k = M.shape[0]
    K = np.zeros((n + k, n + k))
    K[:n, :n] = np.diag(h)
    K[:n, n:] = M.T
    K[n:, :n] = M
    rhs = np.concatenate([-c, r])
    if np.linalg.matrix_rank(K) < n + k:
        return None
    sol = np.linalg.solve(K, rhs)
    return sol[:n], sol[n:n + A.shape[0]], sol[n + A.shape[0]:]


def _certified(h, c, A, b, G, g, active, tol):
    out = _kkt_solve(h, c, A, b, G, g, active)
    if out is None:
        return None
    x, _, mu = out
    if len(g) and np.any(G @ x - g > tol * (1 + np.abs(g))):
        return None
    if np.any(mu < -tol):
        return None
    return x


def qp_enumerate(h, c, A, b, G, g, max_active=None, tol=1e-9, groups=None):
    """Exact minimizer by enumerating active sets in order of size.

    ``groups`` (optional) lists, per inequality, a group id; at most one row
    per group is tried active (upper/lower bounds of the same quantity).
    Returns None when no active set of size <= max_active certifies.
    """
    _, _, A_all, b_all, _, _ = _arrays(h, c, A, b, G, g, reduce=False)
    h, c, A, b, G, g = _arrays(h, c, A, b, G, g)
    m = len(g)
    groups = list(range(m)) if groups is None else list(groups)
    max_active = m if max_active is None else max_active
    for size in range(0, max_active + 1):
        for active in itertools.combinations(range(m), size):
            if len({groups[i] for i in active}) < size:
                continue
            x = _certified(h, c, A, b, G, g, active, tol)
            if x is not None and np.all(np.abs(A_all @ x - b_all) <= 1e-7):
                return x
    return None


def lp_feasible(A, b, G, g, tol=1e-9) -> bool:
    """Feasibility of {A x = b, G x <= g} by a dual-simplex LP."""
    n = A.shape[1] if A.size else G.shape[1]
    res = linprog(
        np.zeros(n),
        A_ub=G if len(g) else None,
        b_ub=g if len(g) else None,
        A_eq=A if len(b) else None,
        b_eq=b if len(b) else None,
        bounds=[(None, None)] * n,
        method="highs-ds",
        options={"primal_feasibility_tolerance": tol},
    )
    return res.status == 0


def qp_oracle(h, c, A, b, G, g, tol=1e-8):
    """Exact minimizer, or None when infeasible.

    SLSQP supplies a guess of the active set; the point is then recomputed
    exactly from the KKT system of that active set and certified (primal
    feasible, multipliers >= 0).  If the guess fails, neighbouring active
    sets are tried before falling back to full enumeration.
    """
    if not lp_feasible(*_arrays(h, c, A, b, G, g, reduce=False)[2:]):
        return None
    h, c, A, b, G, g = _arrays(h, c, A, b, G, g)
    n = len(h)
    cons = []
    if len(b):
        cons.append({"type": "eq", "fun": lambda x: A @ x - b, "jac": lambda x: A})
    if len(g):
        cons.append({"type": "ineq", "fun": lambda x: g - G @ x, "jac": lambda x: -G})
    x0 = np.linalg.lstsq(A, b, rcond=None)[0] if len(b) else np.zeros(n)
    res = minimize(
        lambda x: 0.5 * x @ (h * x) + c @ x,
        x0,
        jac=lambda x: h * x + c,
        constraints=cons,
        method="SLSQP",
        options={"ftol": 1e-14, "maxiter": 2000},
    )
    guess = tuple(np.flatnonzero(g - G @ res.x <= 1e-6 * (1 + np.abs(g)))) if len(g) else ()
    candidates = [guess]
    candidates += [tuple(a for a in guess if a != r) for r in guess]
    candidates += [tuple(sorted(guess + (r,))) for r in range(len(g)) if r not in guess]
    for act in candidates:
        x = _certified(h, c, A, b, G, g, act, tol)
        if x is not None:
            return x
    x = qp_enumerate(h, c, A, b, G, g, tol=tol)
    if x is None:
        raise AssertionError("oracle QP: feasible but no active set certified")
    return x


def _independent(A, b):
    """Greedy maximal set of linearly independent equality rows."""
    keep = []
    for i in range(A.shape[0]):
        if np.linalg.matrix_rank(A[keep + [i]]) == len(keep) + 1:
            keep.append(i)
    return A[keep], b[keep]


def _arrays(h, c, A, b, G, g, reduce=True):
    h = np.asarray(h, float)
    n = h.size
    c = np.zeros(n) if c is None else np.asarray(c, float)
    A = np.zeros((0, n)) if A is None else np.asarray(A, float).reshape(-1, n)
    b = np.zeros(0) if b is None else np.asarray(b, float)
    G = np.zeros((0, n)) if G is None else np.asarray(G, float).reshape(-1, n)
    g = np.zeros(0) if g is None else np.asarray(g, float)
    if reduce:
        A, b = _independent(A, b)
    return h, c, A, b, G, g


# --------------------------------------------------------------------------
# steady-state control in the angle formulation


def control_oracle(n, edges, limits, p0, variables, areas, ace_target, lifted, enforce_limits):
    """Control optimum with explicit angles as variables.

    ``variables`` is a list of (bus, lo, hi, alpha).  Returns (d per bus,
    flows) or None when infeasible.  Flows are ``b (theta_i - theta_j)``
    and every island's lowest bus is grounded.
    """
    nv = len(variables)
    N = nv + n
    h = np.concatenate([[1.0 / v[3] for v in variables], np.zeros(n)])
    rows, rhs = [], []
    # nodal balance: p0_i - sum of controls at i = sum_j b (theta_i - theta_j)
    for i in range(n):
        r = np.zeros(N)
        for k, v in enumerate(variables):
            if v[0] == i:
                r[k] = 1.0
        for i1, j1, bb in edges:
            if i1 == i:
                r[nv + i1] += bb
                r[nv + j1] -= bb
            elif j1 == i:
                r[nv + j1] += bb
                r[nv + i1] -= bb
        rows.append(r)
        rhs.append(p0[i])
    for comp in components(n, edges):
        r = np.zeros(N)
        r[nv + comp[0]] = 1.0
        rows.append(r)
        rhs.append(0.0)
    for a, t in enumerate(ace_target):
        if lifted[a]:
            continue
        r = np.zeros(N)
        for k, v in enumerate(variables):
            if areas[v[0]] == a:
                r[k] = 1.0
        rows.append(r)
        rhs.append(sum(p0[i] for i in range(n) if areas[i] == a) - t)
    A, b = np.array(rows), np.array(rhs)
    Gs, gs = [], []
    if enforce_limits:
        for (i, j, bb), lim in zip(edges, limits):
            r = np.zeros(N)
            r[nv + i], r[nv + j] = bb, -bb
            Gs += [r, -r]
            gs += [lim, lim]
    for k, v in enumerate(variables):
        r = np.zeros(N)
        r[k] = 1.0
        Gs += [r, -r]
        gs += [v[2], -v[1]]
    G, g = np.array(Gs).reshape(-1, N), np.array(gs)
    x = qp_oracle(h, None, A, b, G, g)
    if x is None:
        return None
    d = np.zeros(n)
    for k, v in enumerate(variables):
        d[v[0]] += x[k]
    theta = x[nv:]
    flows = np.array([bb * (theta[i] - theta[j]) for i, j, bb in edges])
    return d, flows, x[:nv]


# --------------------------------------------------------------------------
# droop, modularity, switching


def droop_closed_form(p0, alpha, damping, comps):
    """Per-island common frequency sum(p0)/sum(alpha+D); returns (d, D*omega, omega)."""
    p0, alpha, damping = (np.asarray(v, float) for v in (p0, alpha, damping))
    omega = np.zeros(len(p0))
    for comp in comps:
        tot = sum(alpha[i] + damping[i] for i in comp)
        omega[comp] = sum(p0[i] for i in comp) / tot
    return alpha * omega, damping * omega, omega


def modularity_value(W: np.ndarray, labels) -> float:
    k = W.sum(axis=1)
    two_m = k.sum()
    same = np.equal.outer(labels, labels)
    return float(((W - np.outer(k, k) / two_m) * same).sum() / two_m)


def brute_force_bisection(W: np.ndarray, connected_only: bool = False):
    """Best two-way split over all 2^(n-1) bipartitions; returns (Q, labels)."""
    n = W.shape[0]
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if W[i, j] > 0]
    best = None
    for mask in range(1, 2 ** (n - 1)):
        labels = np.array([1] + [2 if (mask >> (i - 1)) & 1 else 1 for i in range(1, n)])
        if connected_only:
            ok = True
            for side in (1, 2):
                members = [i for i in range(n) if labels[i] == side]
                sub = [(members.index(i), members.index(j)) for i, j in edges
                       if i in members and j in members]
                if len(components(len(members), sub)) != 1:
                    ok = False
            if not ok:
                continue
        q = modularity_value(W, labels)
        if best is None or q > best[0] + 1e-12:
            best = (q, labels)
    return best


def brute_force_switching(n, edges, limits, p, ties, area_of_tie, n_areas):
    """Minimum congestion over every subset of ``ties`` (edge positions) whose
    kept lines form a spanning tree of the area graph.  Returns (gamma, kept)."""
    best = None
    for kept in itertools.combinations(ties, n_areas - 1):
        area_edges = [area_of_tie[t] for t in kept]
        if len(components(n_areas, area_edges)) != 1:
            continue
        off = set(ties) - set(kept)
        sub = [e for k, e in enumerate(edges) if k not in off]
        lim = [l for k, l in enumerate(limits) if k not in off]
        flows, _ = dense_flows(n, sub, p)
        gamma = float(np.max(np.abs(flows) / np.array(lim))) if len(sub) else 0.0
        if best is None or gamma < best[0] - 1e-12:
            best = (gamma, kept)
    return best


def grid_control_oracle(grid, lines, pg, pd, areas, ace_target, level, enforce_limits=True):
    """Control optimum for a ``GridCase`` at ladder ``level`` (0, 1, 2).

    Variables: one generation deviation per generator bus with bounds
    [pg - pg_max, pg - pg_min] (pg_min floor lowered to 0 once shedding is
    on), plus from level 1 a load deviation in [-pd, 0] per load bus.
    Areas alone in their island, and every area at level 2, lose their
    interchange row.  Returns (d_gen, d_load, flows) or None.
    """
    n = grid.n_buses
    pg, pd = np.asarray(pg, float), np.asarray(pd, float)
    edges = grid_edges(grid, lines)
    limits = [grid.lines[k].limit for k in lines]
    areas = list(areas)
    keys = sorted(set(areas))
    a_idx = [keys.index(a) for a in areas]
    variables, kinds = [], []
    for j, b in enumerate(grid.buses):
        if b.pg_max > 0:
            floor = min(b.pg_min, 0.0) if level >= 1 else b.pg_min
            lo, hi = pg[j] - b.pg_max, pg[j] - floor
            if hi - lo > 1e-12:
                variables.append((j, min(lo, 0.0), max(hi, 0.0), b.alpha))
                kinds.append("g")
        if level >= 1 and pd[j] != 0:
            lo, hi = sorted((0.0, -pd[j]))
            variables.append((j, lo, hi, b.alpha_load))
            kinds.append("l")
    lifted = []
    comps = components(n, edges)
    for a in range(len(keys)):
        alone = all(len({a_idx[i] for i in c}) == 1 for c in comps if any(a_idx[i] == a for i in c))
        lifted.append(level >= 2 or alone)
    p0 = pg - pd
    out = control_oracle(n, edges, limits, p0, variables, a_idx, ace_target, lifted, enforce_limits)
    if out is None:
        return None
    _, flows, x = out
    d_gen, d_load = np.zeros(n), np.zeros(n)
    for (j, *_), kind, v in zip(variables, kinds, x):
        if kind == "g":
            d_gen[j] += v
        else:
            d_load[j] += v
    return d_gen, d_load, flows


# --------------------------------------------------------------------------
# composed sweep


def opf_oracle(grid):
    """Unit-cost DC OPF (min sum pg^2) as a control problem in d = -pg."""
    n = grid.n_buses
    lines = [k for k, ln in enumerate(grid.lines) if ln.in_service]
    edges = grid_edges(grid, lines)
    limits = [grid.lines[k].limit for k in lines]
    pd = np.array([b.pd for b in grid.buses])
    variables = [(j, -b.pg_max, -b.pg_min, 0.5) for j, b in enumerate(grid.buses) if b.pg_max > 0]
    out = control_oracle(n, edges, limits, -pd, variables, [0] * n, [0.0], [True], True)
    if out is None:
        return None
    return -out[0]


def sweep_oracle(grid, labels, alpha=1.0, max_stages=100, trip_tol=1e-6):
    """Brute-force reproduction of one alpha column of the sweep.

    Returns (scenarios, rows): scenarios maps (strategy, line) to a dict with
    llr, agr, stages, level; rows maps strategy to the table statistics.
    """
    n = grid.n_buses
    pg0 = opf_oracle(grid)
    pd0 = np.array([b.pd for b in grid.buses])
    p_nom = pg0 - pd0
    keys = sorted(set(labels))
    ace_target = [sum(p_nom[i] for i in range(n) if labels[i] == a) for a in keys]

    base = [k for k, ln in enumerate(grid.lines) if ln.in_service]
    f_nom, _ = dense_flows(n, grid_edges(grid, base), p_nom)
    idx = {b.id: i for i, b in enumerate(grid.buses)}
    ends = {k: (idx[grid.lines[k].from_bus], idx[grid.lines[k].to_bus]) for k in base}
    ties = [k for k in base if labels[ends[k][0]] != labels[ends[k][1]]]
    if len(keys) != 2:
        raise ValueError("the sweep oracle handles two areas")
    keep = max(ties, key=lambda k: (abs(f_nom[base.index(k)]), -k))
    off = set(ties) - {keep}

    # alpha scaling of line limits and generator bounds
    from dataclasses import replace

    g = replace(grid,
                lines=tuple(replace(ln, limit=ln.limit * alpha) for ln in grid.lines),
                buses=tuple(replace(b, pg_max=b.pg_max * alpha, pg_min=b.pg_min * alpha)
                            for b in grid.buses))
    gens = [j for j, b in enumerate(grid.buses) if b.pg_max > 0]
    scen = {}
    for name in ("uc-tree", "uc-mesh", "agc-tree", "agc-mesh"):
        tree = name.endswith("tree")
        uc = name.startswith("uc")
        start = [k for k in base if not (tree and k in off)]
        for k in start:
            pg, pd = pg0.copy(), pd0.copy()
            alive = [e for e in start if e != k]
            stages, level_max = 0, 0
            while True:
                stages += 1
                for level in (0, 1, 2):
                    sol = grid_control_oracle(g, alive, pg, pd, labels, ace_target, level,
                                              enforce_limits=uc)
                    if sol is not None:
                        break
                if sol is None:
                    raise AssertionError("oracle ladder exhausted")
                level_max = max(level_max, level)
                d_gen, d_load, _ = sol
                pg, pd = pg - d_gen, pd + d_load
                flows, _ = dense_flows(n, grid_edges(g, alive), pg - pd)
                lim = np.array([g.lines[e].limit for e in alive])
                over = [e for e, f, l in zip(alive, flows, lim) if abs(f) > l + trip_tol]
                if not over or stages >= max_stages:
                    break
                alive = [e for e in alive if e not in over]
            pos = pd0 > 0
            shed = float(np.sum(pd0[pos] - np.maximum(pd[pos], 0.0)))
            moved = [j for j in gens if abs(pg0[j] - pg[j]) > 1e-4]
            scen[(name, k)] = {
                "llr": shed / pd0[pos].sum(),
                "agr": len(moved) / len(gens),
                "stages": stages,
                "level": level_max,
            }
    rows = {}
    for name in ("uc-tree", "uc-mesh", "agc-tree", "agc-mesh"):
        cell = [v for (s, _), v in scen.items() if s == name]
        llr_nz = [v["llr"] for v in cell if v["llr"] > 1e-6]
        agr_nz = [v["agr"] for v in cell if v["agr"] > 0]
        rows[name] = {
            "scenarios": len(cell),
            "frac_nonzero_llr": len(llr_nz) / len(cell),
            "frac_nonzero_agr": len(agr_nz) / len(cell),
            "mean_nonzero_llr": float(np.mean(llr_nz)) if llr_nz else None,
            "mean_nonzero_agr": float(np.mean(agr_nz)) if agr_nz else None,
        }
    return scen, rows, off
