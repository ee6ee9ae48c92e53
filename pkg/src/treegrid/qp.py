"""Dense active-set solver for strictly convex QPs with a diagonal Hessian.

    minimize    1/2 x' diag(h) x + c' x
    subject to  A x  = b
                G x <= g

The method is the dual active-set scheme of Goldfarb and Idnani: start at the
equality-constrained minimizer and repeatedly add the most violated inequality,
dropping active constraints whose multipliers would turn negative.  Infeasibility
is certified separately by a phase-one LP minimizing the total violation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog

from .errors import SolverStall

FEAS_TOL = 1e-9
PIVOT_TOL = 1e-8


@dataclass
class QPResult:
    status: str
    x: np.ndarray | None
    eq_duals: np.ndarray
    ineq_duals: np.ndarray
    objective: float
    iterations: int
    violation: float = 0.0

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def independent_rows(A: np.ndarray, tol: float = PIVOT_TOL) -> np.ndarray:
    """Indices of a maximal linearly independent subset of the rows of A."""
    if A.shape[0] == 0:
        return np.zeros(0, dtype=int)
    _, R, piv = sla.qr(A.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0:
        return np.zeros(0, dtype=int)
    rank = int(np.sum(diag > tol * max(1.0, diag[0])))
    return np.sort(piv[:rank])


def phase_one(A, b, G, g) -> tuple[float, np.ndarray | None]:
    """Minimum total constraint violation and a minimizing point."""
    n = A.shape[1] if A.size else G.shape[1]
    me, mi = A.shape[0], G.shape[0]
    # variables: x (free), s+ (me), s- (me), t (mi), all slacks >= 0
    cost = np.concatenate([np.zeros(n), np.ones(2 * me + mi)])
    A_eq = np.hstack([A, np.eye(me), -np.eye(me), np.zeros((me, mi))]) if me else None
    A_ub = np.hstack([G, np.zeros((mi, 2 * me)), -np.eye(mi)]) if mi else None
    bounds = [(None, None)] * n + [(0, None)] * (2 * me + mi)
    res = linprog(
        cost,
        A_ub=A_ub,
        b_ub=g if mi else None,
        A_eq=A_eq,
        b_eq=b if me else None,
        bounds=bounds,
        method="highs",
    )
    if res.status != 0:
        raise SolverStall(f"phase-one LP failed: {res.message}")
    return float(res.fun), res.x[:n]


def solve_qp(
    h: np.ndarray,
    c: np.ndarray,
    A: np.ndarray | None = None,
    b: np.ndarray | None = None,
    G: np.ndarray | None = None,
    g: np.ndarray | None = None,
    max_iter: int = 100_000,
    tol: float = FEAS_TOL,
) -> QPResult:
    h = np.asarray(h, dtype=float)
    c = np.asarray(c, dtype=float)
    n = h.size
    if np.any(h <= 0):
        raise ValueError("Hessian diagonal must be strictly positive")
    A = np.zeros((0, n)) if A is None else np.asarray(A, dtype=float).reshape(-1, n)
    b = np.zeros(0) if b is None else np.asarray(b, dtype=float)
    G = np.zeros((0, n)) if G is None else np.asarray(G, dtype=float).reshape(-1, n)
    g = np.zeros(0) if g is None else np.asarray(g, dtype=float)
    hinv = 1.0 / h

    def infeasible(iters):
        viol, _ = phase_one(A, b, G, g)
        return QPResult(
            "infeasible", None, np.zeros(len(b)), np.zeros(len(g)), np.inf, iters, viol
        )

    keep = independent_rows(A)
    Ae, be = A[keep], b[keep]

    # active set: equality rows first (never dropped), then inequality indices
    act: list[int] = []
    lam_act = np.zeros(0)

    def matrix(ids):
        if not ids:
            return Ae
        return np.vstack([Ae, G[ids]])

    def schur_solve(M, rhs):
        S = (M * hinv) @ M.T
        try:
            return sla.cho_solve(sla.cho_factor(S), rhs)
        except (sla.LinAlgError, ValueError):
            return np.linalg.lstsq(S, rhs, rcond=None)[0]

    if Ae.shape[0]:
        mu = -schur_solve(Ae, be + Ae @ (hinv * c))
        x = -hinv * (c + Ae.T @ mu)
        if np.abs(A @ x - b).max() > 1e3 * tol * max(1.0, np.abs(b).max()):
            return infeasible(0)
    else:
        mu = np.zeros(0)
        x = -hinv * c
    lam_act = mu
    ne = Ae.shape[0]

    it = 0
    scale = 1.0 + np.abs(g) if g.size else g
    while True:
        if g.size == 0:
            break
        viol = (G @ x - g) / scale
        if act:
            viol[act] = -np.inf
        q = int(np.argmax(viol))
        if viol[q] <= tol:
            break
        nq = G[q]
        uq = 0.0
        while True:
            it += 1
            if it > max_iter:
                raise SolverStall(f"active-set iteration budget {max_iter} exhausted")
            M = matrix(act)
            if M.shape[0]:
                r = -schur_solve(M, M @ (hinv * nq))
                z = -hinv * (nq + M.T @ r)
            else:
                r = np.zeros(0)
                z = -hinv * nq
            slope = -(nq @ z)
            t1 = (nq @ x - g[q]) / slope if slope > PIVOT_TOL * (nq @ (hinv * nq)) else np.inf
            t2, drop = np.inf, -1
            for j in range(len(act)):
                rj = r[ne + j]
                if rj < -1e-12:
                    tj = lam_act[ne + j] / -rj
                    if tj < t2:
                        t2, drop = tj, j
            if not np.isfinite(t1) and not np.isfinite(t2):
                return infeasible(it)
            if t2 < t1:
                x = x + t2 * z
                lam_act = lam_act + t2 * r
                uq += t2
                lam_act = np.delete(lam_act, ne + drop)
                del act[drop]
                continue
            x = x + t1 * z
            lam_act = np.append(lam_act + t1 * r, uq + t1)
            act.append(q)
            break

    eq_duals = np.zeros(len(b))
    eq_duals[keep] = lam_act[:ne]
    ineq = np.zeros(len(g))
    if act:
        ineq[act] = np.maximum(lam_act[ne:], 0.0)
    obj = 0.5 * float(x @ (h * x)) + float(c @ x)
    return QPResult("optimal", x, eq_duals, ineq, obj, it)
