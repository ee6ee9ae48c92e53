"""Linear swing and flow dynamics under droop or unified (primal-dual) control.

State: per-bus frequency deviation w and per-line flow f on the surviving
network,

    M w' = p0 - d - D w - C f
    f'   = B C^T w

plus whatever internal state the controller carries.  Integration is classical
fixed-step RK4.

The unified controller is the projected primal-dual flow of the steady-state
control problem written with virtual angles phi:

    d      = clip(alpha * (w + lam))                  per control variable
    lam'   = z_lam * (p0 - d - L phi)
    phi'   = chi   * (L lam - L E^T pi - C B (sp - sm))
    pi'    = z_pi  * (E L phi - ace_target)           (lifted rows frozen at 0)
    sp'    = z_sig * [B C^T phi - f_hi]^+_{sp}
    sm'    = z_sig * [f_lo - B C^T phi]^+_{sm}

with sp, sm clamped at zero after every step.  At an equilibrium lam equals the
bus price of the quadratic program, so d = alpha * lam.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .control import ControlConfig, ControlProblem, Level, relax
from .errors import DegenerateIsland, NumericalBlowup
from .network import GridCase, Topology, dc_power_flow

DT = 1e-3
OUTPUT_INTERVAL = 1e-2
HORIZON = 60.0
BLOWUP = 1e6
DUAL_THRESHOLD = 0.5
REARM_FACTOR = 10.0


# --------------------------------------------------------------------------
# droop steady state


@dataclass(frozen=True)
class DroopEquilibrium:
    d: np.ndarray
    omega: np.ndarray
    damping_power: np.ndarray
    flows: np.ndarray


def droop_equilibrium(
    grid: GridCase,
    topology: Topology,
    p0: np.ndarray | None = None,
    alpha: np.ndarray | None = None,
    damping: np.ndarray | None = None,
) -> DroopEquilibrium:
    """Closed-form droop equilibrium: each island settles at the common
    frequency w* = (sum p0) / sum(alpha + D), with d* = alpha w* and damping
    power D w*."""
    p0 = grid.injections if p0 is None else np.asarray(p0, float)
    a = grid.vec("alpha") if alpha is None else np.asarray(alpha, float)
    D = grid.vec("damping") if damping is None else np.asarray(damping, float)
    omega = np.zeros(grid.n_buses)
    for k, comp in enumerate(topology.components):
        s = p0[comp].sum()
        tot = a[comp].sum() + D[comp].sum()
        if tot <= 0:
            if s != 0.0:
                raise DegenerateIsland(k, float(s))
            continue
        omega[comp] = s / tot
    d = a * omega
    dw = D * omega
    flows = dc_power_flow(topology, p0 - d - dw, tol=1e-7).flows
    return DroopEquilibrium(d, omega, dw, flows)


# --------------------------------------------------------------------------
# controllers
#
# Every controller is affine in the full state x = [w, f, z] except for a
# clipped output u = clip(S x, lo, hi) and a projection of the derivative of
# some state entries (inequality duals).  ``assemble`` returns that structure
# so the right-hand side costs a handful of dense products.


@dataclass
class Parts:
    A: np.ndarray          # N x N affine part
    b: np.ndarray          # N
    S: np.ndarray          # nv x N, pre-clip control signal
    lo: np.ndarray
    hi: np.ndarray
    Q: np.ndarray          # N x nv, how the clipped controls enter x'
    P: np.ndarray          # n x nv, per-bus d from the controls
    proj: np.ndarray       # state indices with projected (>= 0) dynamics
    A_proj: np.ndarray | None = None
    b_proj: np.ndarray | None = None


class Controller:
    """Supplies d(t) and the dynamics of its own internal state."""

    name = "none"

    def size(self, sim: "_System") -> int:
        return 0

    def initial(self, sim: "_System") -> np.ndarray:
        return np.zeros(self.size(sim))

    def controls(self, sim: "_System"):
        """(bus, gain_on_omega, gain_on_internal_index, lo, hi) per control variable."""
        return []

    def internal(self, sim: "_System", A: np.ndarray, b: np.ndarray, Q: np.ndarray) -> np.ndarray:
        """Fill the internal-state rows of A, b, Q; return projected state indices."""
        return np.zeros(0, dtype=int)

    def after_step(self, z: np.ndarray) -> np.ndarray:
        return z

    def duals(self, z: np.ndarray) -> dict[str, np.ndarray]:
        return {}

    def max_dual(self, z: np.ndarray) -> float:
        return 0.0

    def assemble(self, sim: "_System") -> Parts:
        n, m = sim.n, sim.m
        N = n + m + self.size(sim)
        A = np.zeros((N, N))
        b = np.zeros(N)
        # physics: M w' = p0 - D w - C f - d ;  f' = B C^T w
        A[:n, :n] = -np.diag(sim.Minv * sim.D)
        A[:n, n:n + m] = -sim.Minv[:, None] * sim.C
        A[n:n + m, :n] = sim.BCt
        b[:n] = sim.Minv * sim.p0
        ctl = self.controls(sim)
        nv = len(ctl)
        S = np.zeros((nv, N))
        Q = np.zeros((N, nv))
        P = np.zeros((n, nv))
        lo = np.full(nv, -np.inf)
        hi = np.full(nv, np.inf)
        for v, (j, gw, zi, l_, h_) in enumerate(ctl):
            S[v, j] = gw
            if zi is not None:
                S[v, n + m + zi] = gw
            lo[v], hi[v] = l_, h_
            Q[j, v] = -sim.Minv[j]
            P[j, v] = 1.0
        proj = self.internal(sim, A, b, Q)
        return Parts(A, b, S, lo, hi, Q, P, np.asarray(proj, dtype=int))


class NoControl(Controller):
    pass


class DroopController(Controller):
    """d_j = alpha_j w_j."""

    name = "droop"

    def __init__(self, alpha: np.ndarray | None = None):
        self.alpha = alpha

    def controls(self, sim):
        a = sim.grid.vec("alpha") if self.alpha is None else np.asarray(self.alpha, float)
        return [(j, a[j], None, -np.inf, np.inf) for j in range(sim.n)]


@dataclass(frozen=True)
class DualGains:
    lam: float = 1.0
    phi: float = 1.0
    pi: float = 1.0
    sigma: float = 1.0


class UnifiedController(Controller):
    """Primal-dual realization of the unified controller for ``problem``.

    With ``problem.enforce_limits = False`` the line-limit duals stay at zero
    (the AGC variant).  Internal state layout: lam (n), phi (n), pi (areas),
    sp (lines), sm (lines).
    """

    name = "uc"

    def __init__(self, problem: ControlProblem, gains: DualGains = DualGains(),
                 phi0: np.ndarray | None = None):
        self.problem = problem
        self.gains = gains
        self.phi0 = phi0

    def size(self, sim):
        self.n, self.m, self.l = sim.n, sim.m, self.problem.n_areas
        return 2 * sim.n + self.problem.n_areas + 2 * sim.m

    def initial(self, sim):
        z = np.zeros(self.size(sim))
        z[self.n:2 * self.n] = sim.theta0 if self.phi0 is None else self.phi0
        return z

    def controls(self, sim):
        return [(j, a, j, lo, hi) for j, kind, lo, hi, a in self.problem.variables()]

    def variable_kinds(self):
        return [(j, kind) for j, kind, *_ in self.problem.variables()]

    def internal(self, sim, A, b, Q):
        pr, g = self.problem, self.gains
        n, m, l = self.n, self.m, self.l
        o = n + m
        il, ip, ia, isp, ism = o, o + n, o + 2 * n, o + 2 * n + l, o + 2 * n + l + m
        L = sim.topology.laplacian
        BCt = sim.BCt
        E = np.zeros((l, n))
        E[pr.areas, np.arange(n)] = 1.0
        act = (~pr.lifted_areas()).astype(float)
        self._active = act
        # lam' = z_lam (p0 - d - L phi)
        A[il:il + n, ip:ip + n] = -g.lam * L
        b[il:il + n] = g.lam * pr.p0
        for v, (j, *_rest) in enumerate(self.controls(sim)):
            Q[il + j, v] = -g.lam
        # phi' = chi (L lam - L E^T pi - C B (sp - sm))
        A[ip:ip + n, il:il + n] = g.phi * L
        A[ip:ip + n, ia:ia + l] = -g.phi * (L @ E.T) * act
        if pr.enforce_limits and m:
            A[ip:ip + n, isp:isp + m] = -g.phi * BCt.T
            A[ip:ip + n, ism:ism + m] = g.phi * BCt.T
        # pi' = z_pi (E L phi - target) on active rows
        A[ia:ia + l, ip:ip + n] = g.pi * (E @ L) * act[:, None]
        b[ia:ia + l] = -g.pi * pr.ace_target * act
        if not (pr.enforce_limits and m):
            return np.zeros(0, dtype=int)
        # sp' = z_sig (B C^T phi - f_hi), sm' = z_sig (f_lo - B C^T phi), projected
        A[isp:isp + m, ip:ip + n] = g.sigma * BCt
        b[isp:isp + m] = -g.sigma * pr.f_hi
        A[ism:ism + m, ip:ip + n] = -g.sigma * BCt
        b[ism:ism + m] = g.sigma * pr.f_lo
        return np.arange(isp, isp + 2 * m)

    def after_step(self, z):
        k = 2 * self.n + self.l
        np.maximum(z[k:], 0.0, out=z[k:])
        z[2 * self.n:k] *= self._active
        return z

    def duals(self, z):
        n, l, m = self.n, self.l, self.m
        out = {"lambda": z[:n], "ace": z[2 * n:2 * n + l]}
        if self.problem.enforce_limits:
            out["line_upper"] = z[2 * n + l:2 * n + l + m]
            out["line_lower"] = z[2 * n + l + m:]
        return out

    def max_dual(self, z):
        n = self.n
        return float(max(np.abs(z[:n]).max(initial=0.0), np.abs(z[2 * n:]).max(initial=0.0)))

    def relax(self):
        self.problem = relax(self.problem)


# --------------------------------------------------------------------------
# simulation


@dataclass
class Event:
    time: float
    kind: str
    detail: dict = field(default_factory=dict)


@dataclass
class Trajectory:
    times: np.ndarray
    omega: np.ndarray
    flows: np.ndarray
    d: np.ndarray
    duals: dict[str, np.ndarray]
    events: list[Event]
    line_labels: list[str]
    bus_ids: list[int]
    final_level: Level | None = None
    stopped_early: bool = False
    final_derivative: float = np.inf

    @property
    def final_omega(self) -> np.ndarray:
        return self.omega[-1]

    @property
    def final_flows(self) -> np.ndarray:
        return self.flows[-1]

    @property
    def final_d(self) -> np.ndarray:
        return self.d[-1]

    def event_times(self, kind: str) -> list[float]:
        return [e.time for e in self.events if e.kind == kind]

    def max_abs_dual(self) -> float:
        return float(max((np.abs(v).max(initial=0.0) for v in self.duals.values()), default=0.0))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["t"] + [f"omega_{b}" for b in self.bus_ids] + [f"f_{s}" for s in self.line_labels]
        cols = []
        for name, arr in self.duals.items():
            for i in range(arr.shape[1]):
                cols.append((name, i))
                head.append(f"{name}_{i}")
        head.append("events")
        w.writerow(head)
        marks: dict[int, list[str]] = {}
        for e in self.events:
            k = int(np.searchsorted(self.times, e.time - 1e-12))
            marks.setdefault(min(k, len(self.times) - 1), []).append(e.kind)
        for k, t in enumerate(self.times):
            row = [f"{t:.6f}"]
            row += [f"{v:.10g}" for v in self.omega[k]]
            row += [f"{v:.10g}" for v in self.flows[k]]
            row += [f"{self.duals[nm][k, i]:.10g}" for nm, i in cols]
            row.append(";".join(marks.get(k, [])))
            w.writerow(row)
        return buf.getvalue()


class _System:
    def __init__(self, grid, topology, p0, theta0):
        self.grid = grid
        self.topology = topology
        self.n = topology.n
        self.m = topology.m
        self.p0 = p0
        self.theta0 = theta0
        self.Minv = 1.0 / grid.vec("inertia")
        self.D = grid.vec("damping")
        self.C = topology.incidence
        self.BCt = topology.susceptances[:, None] * topology.incidence.T


@dataclass(frozen=True)
class Detector:
    """Severe-failure warning on |dual| > threshold.

    With ``relax_on_warning`` the controller moves one ladder level up at each
    warning and the threshold is multiplied by ``rearm_factor``: the duals of
    a feasible relaxed problem settle at d / alpha, which may sit above the
    original threshold.
    """

    threshold: float = DUAL_THRESHOLD
    relax_on_warning: bool = False
    stop_on_warning: bool = False
    rearm_factor: float = REARM_FACTOR


class _Stepper:
    """Classical RK4 for the piecewise-affine closed loop.

    Inside a region where the set of saturated controls and of held-at-zero
    duals does not change, the dynamics are affine and one RK4 step is the
    exact affine map x -> Phi x + c, which is cached per region.  A step whose
    end point lies in a different region is redone with four explicit stage
    evaluations.
    """

    def __init__(self, parts: Parts, dt: float):
        self.p = parts
        self.dt = dt
        self.cache: dict[bytes, tuple[np.ndarray, np.ndarray]] = {}
        self._next_key: bytes | None = None
        if parts.proj.size:
            parts.A_proj = parts.A[parts.proj]
            parts.b_proj = parts.b[parts.proj]

    def rhs(self, x):
        p = self.p
        y = p.A @ x + p.b
        if p.S.shape[0]:
            y += p.Q @ np.clip(p.S @ x, p.lo, p.hi)
        if p.proj.size:
            i = p.proj
            y[i] = np.where((x[i] > 0) | (y[i] > 0), y[i], 0.0)
        return y

    def _mode(self, x) -> bytes:
        p = self.p
        u = p.S @ x
        sat = (u <= p.lo).view(np.int8) + 2 * (u >= p.hi).view(np.int8)
        if p.proj.size:
            i = p.proj
            held = (x[i] <= 0) & (p.A_proj @ x + p.b_proj <= 0)
            return sat.tobytes() + held.tobytes()
        return sat.tobytes()

    def _affine(self, key: bytes):
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        p = self.p
        nv = p.S.shape[0]
        codes = np.frombuffer(key[:nv], dtype=np.int8)
        held = np.frombuffer(key[nv:], dtype=bool)
        mid = codes == 0
        A = p.A + p.Q[:, mid] @ p.S[mid]
        b = p.b + p.Q[:, codes == 1] @ p.lo[codes == 1] + p.Q[:, codes == 2] @ p.hi[codes == 2]
        if held.any():
            rows = p.proj[held]
            A[rows] = 0.0
            b[rows] = 0.0
        h = self.dt
        hA = h * A
        hA2 = hA @ hA
        hA3 = hA2 @ hA
        eye = np.eye(A.shape[0])
        Phi = eye + hA + hA2 / 2 + hA3 / 6 + (hA3 @ hA) / 24
        c = h * ((eye + hA / 2 + hA2 / 6 + hA3 / 24) @ b)
        if len(self.cache) > 512:
            self.cache.clear()
        self.cache[key] = (Phi, c)
        return Phi, c

    def step(self, x):
        key = self._next_key if self._next_key is not None else self._mode(x)
        Phi, c = self._affine(key)
        y = Phi @ x + c
        key2 = self._mode(y)
        if key2 == key:
            self._next_key = key2
            return y
        self._next_key = None
        h = self.dt
        k1 = self.rhs(x)
        k2 = self.rhs(x + 0.5 * h * k1)
        k3 = self.rhs(x + 0.5 * h * k2)
        k4 = self.rhs(x + h * k3)
        return x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def simulate(
    grid: GridCase,
    topology: Topology,
    controller: Controller | None = None,
    horizon: float = HORIZON,
    dt: float = DT,
    output_interval: float = OUTPUT_INTERVAL,
    p0: np.ndarray | None = None,
    f0: np.ndarray | None = None,
    omega0: np.ndarray | None = None,
    theta0: np.ndarray | None = None,
    detector: Detector | None = None,
    blowup: float = BLOWUP,
    pre_topology: Topology | None = None,
) -> Trajectory:
    """Integrate the swing/flow dynamics on ``topology``.

    ``f0`` defaults to the pre-disturbance DC flows of ``pre_topology``
    (default: every in-service line) restricted to the surviving lines, and
    ``theta0`` to the matching angles (also the unified controller's initial
    virtual angles).
    """
    if dt <= 0 or horizon < dt:
        raise ValueError("need dt > 0 and horizon >= dt")
    if np.any(grid.vec("inertia") <= 0):
        raise ValueError("inertia must be positive")
    controller = NoControl() if controller is None else controller
    p0 = grid.injections if p0 is None else np.asarray(p0, float)
    if f0 is None or theta0 is None:
        full = grid.topology() if pre_topology is None else pre_topology
        pre = dc_power_flow(full, grid.injections, tol=1e-7)
        if theta0 is None:
            theta0 = pre.angles
        if f0 is None:
            pos = {k: i for i, k in enumerate(full.lines)}
            f0 = np.array([pre.flows[pos[k]] if k in pos else 0.0 for k in topology.lines])
    sim = _System(grid, topology, p0, np.asarray(theta0, float))
    n, m = sim.n, sim.m
    z0 = controller.initial(sim)
    x = np.concatenate([np.zeros(n) if omega0 is None else np.asarray(omega0, float),
                        np.asarray(f0, float), z0])
    parts = controller.assemble(sim)

    stepper = _Stepper(parts, dt)

    def rhs(x):
        return stepper.rhs(x)

    def d_of(x):
        if parts.S.shape[0] == 0:
            return np.zeros(n)
        return parts.P @ np.clip(parts.S @ x, parts.lo, parts.hi)

    steps = int(round(horizon / dt))
    every = max(1, int(round(output_interval / dt)))
    times, W, Fl, Ds = [], [], [], []
    duals: dict[str, list] = {}
    events: list[Event] = []
    is_uc = isinstance(controller, UnifiedController)
    threshold = detector.threshold if detector is not None and is_uc else None
    factor = 1.0
    if threshold is not None:
        factor = detector.rearm_factor

    def record(t, x):
        times.append(t)
        W.append(x[:n].copy())
        Fl.append(x[n:n + m].copy())
        Ds.append(d_of(x))
        for k, v in controller.duals(x[n + m:]).items():
            duals.setdefault(k, []).append(v.copy())

    record(0.0, x)
    stopped = False
    for s in range(1, steps + 1):
        x = stepper.step(x)
        x[n + m:] = controller.after_step(x[n + m:])
        t = s * dt
        mag = np.abs(x).max()
        if not np.isfinite(mag) or mag > blowup:
            raise NumericalBlowup(t, float(mag))
        if threshold is not None:
            md = controller.max_dual(x[n + m:])
            if md > threshold:
                events.append(Event(t, "severe_warning",
                                    {"max_dual": md, "threshold": threshold,
                                     "level": controller.problem.level.name}))
                if detector.stop_on_warning:
                    record(t, x)
                    stopped = True
                    break
                if detector.relax_on_warning and controller.problem.level < Level.ACE_LIFTED:
                    controller.relax()
                    parts = controller.assemble(sim)
                    stepper = _Stepper(parts, dt)
                    x[n + m:] = controller.after_step(x[n + m:])
                    events.append(Event(t, "relax", {"level": controller.problem.level.name}))
                    threshold = threshold * factor
                else:
                    threshold = None
        if s % every == 0:
            record(t, x)

    level = controller.problem.level if is_uc else None
    return Trajectory(
        times=np.array(times),
        omega=np.array(W),
        flows=np.array(Fl).reshape(len(times), m),
        d=np.array(Ds),
        duals={k: np.array(v) for k, v in duals.items()},
        events=events,
        line_labels=[grid.line_label(k) for k in topology.lines],
        bus_ids=[b.id for b in grid.buses],
        final_level=level,
        stopped_early=stopped,
        final_derivative=float(np.abs(rhs(x)).max()),
    )


# --------------------------------------------------------------------------
# severe failure detection


@dataclass(frozen=True)
class Detection:
    severe: bool
    warning_time: float | None
    max_dual_seen: float


def detect_severe(
    grid: GridCase,
    topology: Topology,
    config: ControlConfig = ControlConfig(),
    threshold: float = DUAL_THRESHOLD,
    t_max: float = HORIZON,
    dt: float = DT,
    gains: DualGains = DualGains(),
    areas=None,
    pg: np.ndarray | None = None,
    pd: np.ndarray | None = None,
    pre_topology: Topology | None = None,
) -> Detection:
    """Run the unified controller's primal-dual dynamics on the post-failure
    ``topology`` and report the first time any |dual| exceeds ``threshold``."""
    if threshold <= 0 or t_max <= 0:
        raise ValueError("threshold and t_max must be positive")
    problem = ControlProblem.build(grid, topology, pg=pg, pd=pd, areas=areas,
                                   enforce_limits=not config.agc,
                                   level=config.start_level)
    problem = replace(problem, selective_lift=config.selective_lift)
    ctrl = UnifiedController(problem, gains)
    traj = simulate(grid, topology, ctrl, horizon=t_max, dt=dt,
                    p0=problem.p0, output_interval=max(dt, 0.1),
                    detector=Detector(threshold, stop_on_warning=True),
                    pre_topology=pre_topology)
    warn = traj.event_times("severe_warning")
    return Detection(bool(warn), warn[0] if warn else None, traj.max_abs_dual())
