"""Independent KKT certificate for the QPs solved by :mod:`treegrid.qp`.

The checker never looks at the solver's multipliers: it recovers its own by a
bounded least-squares fit of the stationarity condition over the constraints
that are active at the candidate point, then reports the four residuals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import lsq_linear


@dataclass(frozen=True)
class KKTReport:
    stationarity: float
    primal: float
    dual: float
    complementarity: float

    def max(self) -> float:
        return max(self.stationarity, self.primal, self.dual, self.complementarity)

    def ok(self, tol: float = 1e-6) -> bool:
        return self.max() <= tol


def check_kkt(h, c, A, b, G, g, x, active_tol: float = 1e-7) -> KKTReport:
    h = np.asarray(h, float)
    c = np.asarray(c, float)
    x = np.asarray(x, float)
    n = x.size
    A = np.asarray(A, float).reshape(-1, n)
    G = np.asarray(G, float).reshape(-1, n)
    b = np.asarray(b, float)
    g = np.asarray(g, float)

    grad = h * x + c
    slack = g - G @ x if g.size else np.zeros(0)
    primal = max(
        np.abs(A @ x - b).max(initial=0.0),
        np.maximum(-slack, 0.0).max(initial=0.0),
    )
    active = np.flatnonzero(slack <= active_tol * (1.0 + np.abs(g)))
    M = np.vstack([A, G[active]]).T  # n x (me + na)
    me = A.shape[0]
    if M.shape[1] == 0:
        return KKTReport(float(np.abs(grad).max(initial=0.0)), float(primal), 0.0, 0.0)
    lo = np.concatenate([np.full(me, -np.inf), np.zeros(active.size)])
    hi = np.full(M.shape[1], np.inf)
    fit = lsq_linear(M, -grad, bounds=(lo, hi), method="bvls", tol=1e-14)
    mult = fit.x
    stat = np.abs(grad + M @ mult).max(initial=0.0)
    comp = np.abs(mult[me:] * slack[active]).max(initial=0.0)
    return KKTReport(float(stat), float(primal), 0.0, float(comp))


def check_kkt_with_duals(h, c, A, b, G, g, x, nu, mu) -> KKTReport:
    """Residuals for a caller-supplied multiplier pair (nu for A, mu for G)."""
    h, c, x = (np.asarray(v, float) for v in (h, c, x))
    n = x.size
    A = np.asarray(A, float).reshape(-1, n)
    G = np.asarray(G, float).reshape(-1, n)
    nu = np.asarray(nu, float)
    mu = np.asarray(mu, float)
    slack = np.asarray(g, float) - G @ x
    stat = np.abs(h * x + c + A.T @ nu + G.T @ mu).max(initial=0.0)
    primal = max(
        np.abs(A @ x - np.asarray(b, float)).max(initial=0.0),
        np.maximum(-slack, 0.0).max(initial=0.0),
    )
    dual = np.maximum(-mu, 0.0).max(initial=0.0)
    comp = np.abs(mu * slack).max(initial=0.0)
    return KKTReport(float(stat), float(primal), float(dual), float(comp))
