"""Integration of the geodesic (Hamiltonian) flow and Poincare-section events."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from .errors import IntegrationError, PreconditionError
from .metric import ConformalFactor, MetricField, PhasePoint, TangentPoint

DEFAULT_ENERGY_TOL = 1e-9


def hamiltonian_rhs(metric: MetricField, factor: ConformalFactor | None = None):
    """Right-hand side ``y' = F(y)`` with ``y = (x, p)`` for ``solve_ivp``."""
    n = metric.dim

    def rhs(_t, y):
        x, p = y[:n], y[n:]
        v = metric.Q(x) @ p
        force = 0.5 * np.einsum("kij,i,j->k", metric.dG(x), v, v)
        if factor is not None and factor.in_support_box(x):
            fx, grad = factor.value_and_gradient(x)
            if fx != 0.0 or np.any(grad):
                s = np.exp(-fx)
                return np.concatenate([s * v, s * force + 0.5 * s * (p @ v) * grad])
        return np.concatenate([v, force])

    return rhs


def _solve(metric, factor, y0, t0, t1, tol, max_step=np.inf):
    rhs = hamiltonian_rhs(metric, factor)
    res = solve_ivp(rhs, (t0, t1), np.asarray(y0, dtype=float), method="DOP853",
                    rtol=tol, atol=tol, dense_output=True, max_step=max_step)
    if res.status != 0:
        last = float(res.t[-1]) if res.t.size else t0
        raise IntegrationError(f"step-size collapse: {res.message}", last_good_time=last)
    return res


class GeodesicArc:
    """Dense-output solution of the (possibly conformal) Hamiltonian system.

    Times run from ``0`` to ``duration``; ``jet`` returns position, velocity
    and acceleration consistent with the unperturbed geodesic equation.
    """

    def __init__(self, metric, factor, res):
        self.metric = metric
        self.factor = factor
        self._sol = res.sol
        self.times = res.t.copy()
        self.states = res.y.T.copy()
        n = metric.dim
        self.dim = n
        self.duration = float(self.times[-1])

    # -- sampling
    def state(self, t):
        """``(x, p)`` at time(s) ``t``; arrays of shape ``(m, n)`` for array input."""
        t = np.asarray(t, dtype=float)
        y = self._sol(t)
        n = self.dim
        if t.ndim == 0:
            return y[:n], y[n:]
        return y[:n].T, y[n:].T

    def position(self, t):
        return self.state(t)[0]

    def velocity(self, t):
        x, p = self.state(t)
        v = np.einsum("...ij,...j->...i", self.metric.Q(x), p)
        if self.factor is not None:
            fx = np.array([self.factor.value(xi) for xi in np.atleast_2d(x)])
            v = v * np.exp(-fx).reshape(v.shape[:-1] + (1,)) if v.ndim > 1 else v * np.exp(-fx[0])
        return v

    @property
    def velocities(self):
        return np.atleast_2d(self.velocity(self.times))

    @property
    def positions(self):
        return self.states[:, : self.dim]

    def jet(self, t):
        """Position, velocity and acceleration of an unperturbed geodesic."""
        x, p = self.state(np.atleast_1d(np.asarray(t, dtype=float)))
        return geodesic_jet(self.metric, x, p)

    def final(self) -> PhasePoint:
        n = self.dim
        return PhasePoint(self.states[-1, :n], self.states[-1, n:])

    def energy(self, t=None):
        t = self.times if t is None else np.atleast_1d(t)
        x, p = self.state(t)
        x, p = np.atleast_2d(x), np.atleast_2d(p)
        H = 0.5 * np.einsum("mi,mij,mj->m", p, self.metric.Q(x), p)
        if self.factor is not None:
            H = H * np.exp(-np.array([self.factor.value(xi) for xi in x]))
        return H

    @property
    def energy_drift(self) -> float:
        H = self.energy()
        return float(np.max(np.abs(H - H[0])))

    def to_csv(self, path, samples=None):
        t = self.times if samples is None else np.linspace(0.0, self.duration, samples)
        x, p = self.state(t)
        H = self.energy(t)
        n = self.dim
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x{i + 1}" for i in range(n)] + [f"p{i + 1}" for i in range(n)] + ["H"])
            for row in zip(t, x, p, H):
                w.writerow([repr(float(row[0]))] + [repr(float(c)) for c in row[1]]
                           + [repr(float(c)) for c in row[2]] + [repr(float(row[3]))])


def geodesic_jet(metric, x, p):
    """``(x, xdot, xddot)`` from cotangent states via the geodesic equation."""
    x = np.atleast_2d(x)
    p = np.atleast_2d(p)
    Q = metric.Q(x)
    dG = metric.dG(x)
    v = np.einsum("mij,mj->mi", Q, p)
    pdot = 0.5 * np.einsum("mkij,mi,mj->mk", dG, v, v)
    dGv = np.einsum("mkij,mk->mij", dG, v)
    acc = np.einsum("mij,mj->mi", Q, pdot - np.einsum("mij,mj->mi", dGv, v))
    return x, v, acc


def integrate(metric: MetricField, factor: ConformalFactor | None, start: PhasePoint,
              duration: float, tol: float = 1e-11, max_step: float = np.inf) -> GeodesicArc:
    if not duration > 0:
        raise PreconditionError("duration must be positive")
    if not (1e-14 < tol < 1e-3):
        raise PreconditionError("tol must lie in (1e-14, 1e-3)")
    res = _solve(metric, factor, start.as_vector(), 0.0, float(duration), tol, max_step)
    return GeodesicArc(metric, factor, res)


def governing_speed(metric, factor, tp: TangentPoint) -> float:
    s2 = float(tp.v @ metric.G(tp.x) @ tp.v)
    if factor is not None:
        s2 *= np.exp(factor.value(tp.x))
    return np.sqrt(s2)


def flow_map(metric: MetricField, factor: ConformalFactor | None, tp: TangentPoint, t: float,
             tol: float = 1e-12, max_step: float = np.inf) -> TangentPoint:
    """Time-``t`` map of the unit-speed geodesic flow of ``exp(f) g``."""
    speed = governing_speed(metric, factor, tp)
    if abs(speed - 1.0) > 1e-10:
        raise PreconditionError(f"flow_map needs a unit vector, got |v|_x = {speed!r}")
    if t == 0:
        return TangentPoint(tp.x, tp.v)
    if t < 0:
        back = flow_map(metric, factor, TangentPoint(tp.x, -tp.v), -t, tol, max_step)
        return TangentPoint(back.x, -back.v)
    scale = 1.0 if factor is None else np.exp(factor.value(tp.x))
    start = PhasePoint(tp.x, scale * (metric.G(tp.x) @ tp.v))
    arc = integrate(metric, factor, start, t, tol, max_step)
    end = arc.final()
    v = metric.Q(end.x) @ end.p
    if factor is not None:
        v = np.exp(-factor.value(end.x)) * v
    return TangentPoint(end.x, v)


def reverse_integrate(metric, factor, end: PhasePoint, duration, tol=1e-11):
    """Integrate backwards in time by flipping the momentum."""
    arc = integrate(metric, factor, PhasePoint(end.x, -end.p), duration, tol)
    final = arc.final()
    return PhasePoint(final.x, -final.p)


@dataclass(frozen=True)
class SectionEvent:
    time: float
    state: PhasePoint
    crossing_sign: int
    tangential: bool = False


def scalar_crossings(arc: GeodesicArc, func, subdivisions=4, t_min=None, t_max=None):
    """Roots of ``func(x)`` along the arc polished by Brent's method.

    Returns a list of ``(time, sign, slope)`` tuples ordered by time.
    """
    t_min = 0.0 if t_min is None else t_min
    t_max = arc.duration if t_max is None else t_max
    nodes = arc.times[(arc.times >= t_min) & (arc.times <= t_max)]
    nodes = np.unique(np.concatenate([[t_min], nodes, [t_max]]))
    fine = [nodes[:1]]
    for a, b in zip(nodes[:-1], nodes[1:]):
        fine.append(np.linspace(a, b, subdivisions + 1)[1:])
    ts = np.concatenate(fine)
    xs = np.atleast_2d(arc.position(ts))
    vals = np.array([func(x) for x in xs])
    events = []

    def g(t):
        return func(arc.position(t))

    for i in range(len(ts) - 1):
        a, b = vals[i], vals[i + 1]
        if a == 0.0:
            root = ts[i]
        elif a * b < 0:
            root = brentq(g, ts[i], ts[i + 1], xtol=1e-15, rtol=1e-15, maxiter=200)
        else:
            continue
        if events and abs(events[-1][0] - root) < 1e-13:
            continue
        sign = int(np.sign(b - a)) if a != b else 1
        h = 1e-7 * max(1.0, arc.duration)
        lo, hi = max(root - h, 0.0), min(root + h, arc.duration)
        slope = (g(hi) - g(lo)) / (hi - lo)
        events.append((float(root), sign, float(slope)))
    return events


def section_crossings(arc: GeodesicArc, section_coord: int, level: float) -> list[SectionEvent]:
    """Crossings of the hyperplane ``{x_i = level}`` in the arc's time span."""
    if arc.times.size == 0:
        raise PreconditionError("empty arc")
    out = []
    for t, sign, _ in scalar_crossings(arc, lambda x: x[section_coord] - level):
        x, p = arc.state(t)
        v = arc.velocity(t)
        out.append(SectionEvent(t, PhasePoint(x, p), sign, tangential=bool(abs(v[section_coord]) < 1e-8)))
    return out
