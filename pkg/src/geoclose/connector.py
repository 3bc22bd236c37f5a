"""Connecting two nearby geodesics by a unit-speed curve and its control field."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad, solve_ivp
from scipy.interpolate import BPoly

from .curves import (BlendCurve, Curve, GeodesicCurve, PatchedCurve, ShiftedCurve,
                     control_from_jet, curve_speed)
from .errors import DegenerateBlendError, NumericalDifferentiationError, PreconditionError
from .metric import MetricField, PhasePoint, TangentPoint
from .profiles import BlendProfile

log = logging.getLogger(__name__)

UNIT_TOL = 1e-10
MIN_SPEED = 0.5


def active_interval(curve: Curve):
    """Parameter interval outside of which the curve is an unperturbed geodesic."""
    if isinstance(curve, BlendCurve):
        return curve.profile.start, curve.profile.end
    if isinstance(curve, ShiftedCurve):
        lo, hi = active_interval(curve.base)
        return min(lo, curve._lo), max(hi, curve._hi)
    if isinstance(curve, PatchedCurve):
        lo, hi = active_interval(curve.base)
        return min(lo, curve.center - curve.radius), max(hi, curve.center + curve.radius)
    if isinstance(curve, GeodesicCurve):
        return curve.t_min, curve.t_min
    return curve.t_min, curve.t_max


CELL_NODES, CELL_WEIGHTS = np.polynomial.legendre.leggauss(12)


class ArclengthMap:
    """Arclength ``alpha`` of a curve on ``[0, tau]`` and its inverse ``theta``.

    Lengths come from a composite Gauss-Legendre table whose cells end at the
    curve's breakpoints; ``theta`` is the quintic Hermite interpolant built
    from the exact values of ``theta'`` and ``theta''`` at the table nodes.
    """

    def __init__(self, metric, curve, tau, breakpoints=(), cells=1024):
        self.metric, self.curve, self.tau = metric, curve, float(tau)
        grid = np.concatenate([np.linspace(0.0, tau, cells + 1), [b for b in breakpoints if 0 < b < tau]])
        grid = np.unique(grid)
        grid = grid[np.concatenate([[True], np.diff(grid) > 1e-12 * max(tau, 1.0)])]
        grid[-1] = tau
        self.nodes = grid
        self.cell_lengths = self._cell_integrals(grid[:-1], grid[1:])
        self.cumulative = np.concatenate([[0.0], np.cumsum(self.cell_lengths)])
        self.tau_tilde = float(self.cumulative[-1])
        sig, dsig = self.speed_and_rate(grid)
        if np.min(sig) < MIN_SPEED:
            i = int(np.argmin(sig))
            raise DegenerateBlendError(f"curve speed {sig[i]:.3g} below {MIN_SPEED} at parameter {grid[i]:.6g}")
        derivs = np.column_stack([grid, 1.0 / sig, -dsig / sig**3])
        self._theta = BPoly.from_derivatives(self.cumulative, derivs[:, :, None].reshape(len(grid), 3))

    def speed_and_rate(self, t):
        x, dx, ddx = self.curve.jet(np.atleast_1d(t))
        return curve_speed(self.metric, x, dx, ddx)

    def _cell_integrals(self, a, b):
        half = 0.5 * (b - a)
        pts = (0.5 * (a + b))[:, None] + half[:, None] * CELL_NODES[None, :]
        sig = self.speed_and_rate(pts.ravel())[0].reshape(pts.shape)
        return half * (sig @ CELL_WEIGHTS)

    def speed(self, t):
        return float(self.speed_and_rate(np.array([t]))[0][0])

    def theta(self, s):
        s = np.asarray(s, dtype=float)
        out = self._theta(np.clip(s, 0.0, self.tau_tilde))
        return np.clip(out, 0.0, self.tau)

    def alpha(self, t):
        """Length of the curve over ``[0, t]``."""
        t = min(max(float(t), 0.0), self.tau)
        i = int(np.searchsorted(self.nodes, t, side="right")) - 1
        i = min(max(i, 0), len(self.nodes) - 2)
        return float(self.cumulative[i] + self._cell_integrals(np.array([self.nodes[i]]), np.array([t]))[0])


def arclength_reparam(metric: MetricField, curve: Curve, tau: float | None = None,
                      breakpoints=()) -> ArclengthMap:
    """Total length and the inverse arclength map of ``curve`` on ``[0, tau]``."""
    tau = curve.t_max if tau is None else float(tau)
    return ArclengthMap(metric, curve, tau, breakpoints)


def arclength_by_ode(metric: MetricField, curve: Curve, tau: float):
    """Reference route: adaptive quadrature for the length, ODE for the inverse map."""
    def speed(t):
        x, dx, ddx = curve.jet(np.array([t]))
        return float(curve_speed(metric, x, dx, ddx)[0][0])

    length = quad(speed, 0.0, tau, epsabs=1e-13, epsrel=1e-13, limit=400)[0]
    sol = solve_ivp(lambda _s, th: [1.0 / speed(min(max(th[0], 0.0), tau))], (0.0, length), [0.0],
                    method="DOP853", rtol=1e-13, atol=1e-14, dense_output=True)
    return length, (lambda s: sol.sol(s)[0])


@dataclass
class ConnectingData:
    """Unit-speed connecting curve ``x~`` with momentum ``p~`` and control ``u~``."""

    metric: MetricField
    curve: Curve
    arclength: ArclengthMap
    start: TangentPoint
    target: TangentPoint
    tau: float
    support_interval: tuple
    history: list = field(default_factory=list)
    breaks: tuple = ()

    @property
    def tau_tilde(self) -> float:
        return self.arclength.tau_tilde

    def jet(self, t):
        """``(x~, x~', x~'')`` at times ``t``; arrays of shape ``(m, n)``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        th = np.atleast_1d(self.arclength.theta(t))
        X, dX, ddX = self.curve.jet(th)
        sig, dsig = curve_speed(self.metric, X, dX, ddX)
        sig, dsig = sig[:, None], dsig[:, None]
        return X, dX / sig, ddX / sig**2 - dX * dsig / sig**3

    def x_tilde(self, t):
        return self.jet(t)[0]

    def velocity(self, t):
        return self.jet(t)[1]

    def p_tilde(self, t):
        x, xd, _ = self.jet(t)
        return np.einsum("mij,mj->mi", self.metric.G(x), xd)

    def u_tilde(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        x, xd, xdd = self.jet(t)
        u = control_from_jet(self.metric, x, xd, xdd)
        geo = self.curve.geodesic_mask(np.atleast_1d(self.arclength.theta(t)))
        u[geo] = 0.0
        return u

    def sample(self, count=401):
        t = np.linspace(0.0, self.tau_tilde, count)
        x, xd, xdd = self.jet(t)
        p = np.einsum("mij,mj->mi", self.metric.G(x), xd)
        return t, x, p, self.u_tilde(t)

    def endpoints(self):
        x, xd, _ = self.jet(np.array([0.0, self.tau_tilde]))
        p = np.einsum("mij,mj->mi", self.metric.G(x), xd)
        return PhasePoint(x[0], p[0]), PhasePoint(x[1], p[1])

    def to_csv(self, path, count=401):
        t, x, p, u = self.sample(count)
        n = self.metric.dim
        header = (["t"] + [f"x{i + 1}" for i in range(n)] + [f"p{i + 1}" for i in range(n)]
                  + [f"u{i + 1}" for i in range(n)])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in np.column_stack([t, x, p, u]):
                w.writerow([repr(float(c)) for c in row])


def check_unit(metric, tp: TangentPoint, label: str):
    speed = np.sqrt(float(tp.v @ metric.G(tp.x) @ tp.v))
    if abs(speed - 1.0) > UNIT_TOL:
        raise PreconditionError(f"{label} is not unit speed: |v| = {speed!r}")


def phase_separation(start: TangentPoint, target: TangentPoint) -> float:
    return float(np.linalg.norm(start.as_vector() - target.as_vector()))


def blend_curve(metric: MetricField, start: TangentPoint, target: TangentPoint,
                profile: BlendProfile, max_separation: float | None = None) -> BlendCurve:
    """Blend of the two geodesics issued from ``start`` and ``target`` over ``[0, tau]``."""
    check_unit(metric, start, "start")
    check_unit(metric, target, "target")
    sep = phase_separation(start, target)
    if max_separation is not None and sep > max_separation:
        raise PreconditionError(f"endpoint separation {sep:.3g} exceeds allowed {max_separation:.3g}")
    a = GeodesicCurve(metric, start, profile.tau)
    b = a if sep == 0.0 else GeodesicCurve(metric, target, profile.tau)
    return BlendCurve(a, b, profile)


def make_connecting_data(metric, curve, start, target, tau, history=()) -> ConnectingData:
    lo, hi = active_interval(curve)
    params = sorted(set(p for p in [lo, hi, *curve.breakpoints()] if 0 < p < tau))
    amap = arclength_reparam(metric, curve, tau, breakpoints=params)
    times = {p: amap.alpha(p) for p in params}
    support = (times.get(lo, 0.0), times.get(hi, 0.0)) if hi > lo else (0.0, 0.0)
    return ConnectingData(metric, curve, amap, start, target, tau, support, list(history),
                          tuple(sorted(times.values())))


def control_field(data: ConnectingData, times=None, orth_tol=1e-7):
    """Control ``u~`` at ``times`` with an orthogonality self-check."""
    t = np.linspace(0.0, data.tau_tilde, 401) if times is None else np.atleast_1d(times)
    x, xd, _ = data.jet(t)
    u = data.u_tilde(t)
    orth = np.abs(np.einsum("mi,mi->m", u, xd))
    if orth.size and np.max(orth) > orth_tol:
        i = int(np.argmax(orth))
        raise NumericalDifferentiationError(
            f"control not orthogonal to velocity: {orth[i]:.3g} at t = {t[i]:.6g}")
    return u


def build_connecting_data(metric, start: TangentPoint, target: TangentPoint, tau: float,
                          max_separation=None) -> ConnectingData:
    curve = blend_curve(metric, start, target, BlendProfile(tau), max_separation)
    return make_connecting_data(metric, curve, start, target, tau)


def connecting_invariants(data: ConnectingData, count=401) -> dict:
    """Measured residuals of the unit-speed, orthogonality, pinning and plateau invariants."""
    t = np.linspace(0.0, data.tau_tilde, count)
    x, xd, _ = data.jet(t)
    G = data.metric.G(x)
    p = np.einsum("mij,mj->mi", G, xd)
    u = data.u_tilde(t)
    speed = np.einsum("mi,mi->m", xd, p)
    H = 0.5 * np.einsum("mi,mij,mj->m", p, data.metric.Q(x), p)
    start_pp = PhasePoint(data.start.x, data.metric.G(data.start.x) @ data.start.v)
    from .flow import flow_map  # local import keeps module load order simple
    end_tp = flow_map(data.metric, None, data.target, data.tau, tol=1e-13)
    end_pp = PhasePoint(end_tp.x, data.metric.G(end_tp.x) @ end_tp.v)
    e0, e1 = data.endpoints()
    plateau = (t <= data.tau / 3) | (t >= data.tau_tilde - data.tau / 3)
    return {
        "unit_speed": float(np.max(np.abs(speed - 1.0))),
        "hamiltonian": float(np.max(np.abs(H - 0.5))),
        "orthogonality": float(np.max(np.abs(np.einsum("mi,mi->m", u, xd)))),
        "pin_start": float(np.linalg.norm(e0.as_vector() - start_pp.as_vector())),
        "pin_end": float(np.linalg.norm(e1.as_vector() - end_pp.as_vector())),
        "plateau_control": float(np.max(np.abs(u[plateau]))) if np.any(plateau) else 0.0,
        "max_control": float(np.max(np.linalg.norm(u, axis=1))),
        "max_velocity_defect": float(np.max(np.linalg.norm(xd - xd[0], axis=1))),
    }


# ------------------------------------------------------------ conformal factor

def control_bump(data: ConnectingData, mu: float):
    """Tube bump with gradient ``u~`` along ``x~`` (the obstacle-free factor)."""
    from .tube_bump import TubeBump, TubeBumpSpec

    a, b = data.support_interval
    T = data.tau_tilde
    beta = min(a, T - b) if b > a else T / 3.0

    def y_curve(t):
        x, xd, _ = data.jet(t)
        return x, xd

    spec = TubeBumpSpec(y_curve, data.u_tilde, T, beta, min(mu, beta / 3.0),
                        w_support=(a, b), w_breaks=data.breaks)
    spec.validate()
    return TubeBump(spec)


def tube_sample_points(data: ConnectingData, mu: float, n_t=161, n_z=17, seed=0):
    """Points filling the tube of radius ``2 mu / 3`` around ``x~``."""
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, data.tau_tilde, n_t)
    x = data.x_tilde(t)
    n = x.shape[1]
    radii = np.linspace(-2 * mu / 3, 2 * mu / 3, n_z)
    pts = [x]
    for r in radii:
        d = rng.normal(size=(t.size, n - 1))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        shift = np.zeros_like(x)
        shift[:, 1:] = r * d if n > 2 else r
        pts.append(x + shift)
    return np.vstack(pts)


def estimate_c1_norm(factor, points) -> dict:
    """``sup |f| + sup |grad f|`` over ``points``."""
    vals = np.empty(len(points))
    grads = np.empty(len(points))
    for i, p in enumerate(points):
        f, g = factor.value_and_gradient(p)
        vals[i] = abs(f)
        grads[i] = np.linalg.norm(g)
    c0, g0 = float(vals.max(initial=0.0)), float(grads.max(initial=0.0))
    return {"c0": c0, "grad": g0, "c1": c0 + g0}


def conformal_rhs_residual(data: ConnectingData, factor, count=401):
    """Sup-norm defect of ``(x~, p~)`` against the conformal Hamiltonian field.

    Also returns the largest ``|f(x~(t))|`` and ``|grad f(x~) - u~|``.
    """
    metric = data.metric
    t = np.linspace(0.0, data.tau_tilde, count)
    x, xd, xdd = data.jet(t)
    G, dG = metric.G(x), metric.dG(x)
    p = np.einsum("mij,mj->mi", G, xd)
    pdot = np.einsum("mij,mj->mi", G, xdd) + np.einsum("mkij,mk,mj->mi", dG, xd, xd)
    u = data.u_tilde(t)
    worst_rhs = worst_f = worst_grad = 0.0
    for i in range(t.size):
        f, g = factor.value_and_gradient(x[i])
        s = np.exp(-f)
        v = metric.Q(x[i]) @ p[i]
        dx = s * v
        dp = s * 0.5 * np.einsum("kij,i,j->k", dG[i], v, v) + 0.5 * s * (p[i] @ v) * g
        worst_rhs = max(worst_rhs, float(np.max(np.abs(dx - xd[i]))), float(np.max(np.abs(dp - pdot[i]))))
        worst_f = max(worst_f, abs(f))
        worst_grad = max(worst_grad, float(np.max(np.abs(g - u[i]))))
    return {"rhs": worst_rhs, "f_on_curve": worst_f, "grad_vs_control": worst_grad}


@dataclass
class ConnectResult:
    factor: object
    tau_tilde: float
    data: ConnectingData | None
    report: dict
    verified: bool


def endpoint_residual(metric, factor, start: TangentPoint, target: TangentPoint, tau, tau_tilde,
                      tol=1e-12):
    """Phase distance between the perturbed flow from ``start`` and the geodesic flow of ``target``."""
    from .flow import flow_map, integrate

    arc = integrate(metric, factor, PhasePoint(start.x, metric.G(start.x) @ start.v), tau_tilde, tol)
    end = arc.final()
    ref = flow_map(metric, None, target, tau, tol=min(tol, 1e-13))
    ref_p = metric.G(ref.x) @ ref.v
    return float(np.linalg.norm(np.concatenate([end.x - ref.x, end.p - ref_p]))), arc


def connect(metric: MetricField, start: TangentPoint, target: TangentPoint, tau: float, rho: float,
            mu: float | None = None, obstacles=None, endpoint_tol=1e-7, seed=0,
            angle_floor=1e-3, max_separation=None, norm_samples=(161, 17)) -> ConnectResult:
    """Conformal factor steering the flow from ``start`` onto the geodesic of ``target``.

    Without ``obstacles`` this is the tube bump of the control field; with
    obstacles the curve is first made transverse to them and the factor is
    then post-processed so every obstacle stays a reparametrized geodesic.
    """
    from .metric import ZeroFactor

    sep = phase_separation(start, target)
    mu = rho / 8.0 if mu is None else float(mu)
    report = {"separation": sep, "tau": tau, "rho": rho, "mu": mu}
    if sep == 0.0:
        check_unit(metric, start, "start")
        factor = ZeroFactor(metric.dim)
        report.update({"tau_tilde": tau, "f_c1_norm": 0.0, "f_c0_norm": 0.0, "endpoint_residual": 0.0})
        return ConnectResult(factor, tau, None, report, True)
    data = build_connecting_data(metric, start, target, tau, max_separation)
    geometry = None
    if obstacles is not None and len(obstacles.arcs) > 0:
        from .obstacle import build_obstacle_factor, intersection_geometry, transversalize

        from .obstacle import patch_radii

        data = transversalize(metric, data, obstacles, rng_seed=seed, angle_floor=angle_floor, rho=rho)
        radii = patch_radii(data)
        if radii:
            mu = min(mu, min(radii) / 6.0)
        geometry = intersection_geometry(data, obstacles, rho)
        bump = control_bump(data, mu)
        factor = build_obstacle_factor(metric, data, obstacles, geometry, rho, base=bump)
        report["mu"] = bump.mu
        report["geometry"] = geometry.to_dict()
    else:
        factor = control_bump(data, mu)
        report["mu"] = factor.mu
    control_field(data)
    report["tau_tilde"] = data.tau_tilde
    report["invariants"] = connecting_invariants(data)
    norms = estimate_c1_norm(factor, tube_sample_points(data, report["mu"], *norm_samples))
    factor.c1_norm_estimate = norms["c1"]
    report["f_c1_norm"] = norms["c1"]
    report["f_c0_norm"] = norms["c0"]
    report["along_curve"] = conformal_rhs_residual(data, factor)
    residual, _ = endpoint_residual(metric, factor, start, target, tau, data.tau_tilde)
    report["endpoint_residual"] = residual
    report["endpoint_tol"] = endpoint_tol
    verified = residual < endpoint_tol
    if not verified:
        log.warning("endpoint residual %.3g exceeds tolerance %.3g", residual, endpoint_tol)
    return ConnectResult(factor, data.tau_tilde, data, report, verified)
