"""Geodesics of g whose gradient of f is colinear with the momentum stay geodesics of exp(f) g."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad, solve_ivp
from scipy.optimize import minimize_scalar

from .errors import ColinearityError, PreconditionError, VerificationError
from .flow import GeodesicArc, integrate
from .metric import MetricField, PhasePoint

COLINEAR_TOL = 1e-8


def _samples(arc: GeodesicArc, count):
    return np.linspace(0.0, arc.duration, count)


def _check_unit_geodesic(metric, arc, count=201, tol=1e-9):
    x, p = arc.state(_samples(arc, count))
    H = 0.5 * np.einsum("mi,mij,mj->m", p, metric.Q(x), p)
    if np.max(np.abs(H - 0.5)) > tol:
        raise PreconditionError(f"arc is not a unit-speed geodesic (|H - 1/2| = {np.max(np.abs(H - 0.5)):.3g})")


@dataclass
class ColinearityProfile:
    """``lambda(t)`` with ``grad f(c(t)) = lambda(t) p(t)`` along an arc."""

    metric: MetricField
    factor: object
    arc: GeodesicArc
    worst_residual: float
    worst_time: float

    def __call__(self, t):
        t = np.atleast_1d(t)
        _, p = self.arc.state(t)
        x = np.atleast_2d(self.arc.position(t))
        p = np.atleast_2d(p)
        g = np.array([self.factor.gradient(xi) for xi in x])
        return np.einsum("mi,mi->m", g, p) / np.einsum("mi,mi->m", p, p)


def colinearity_check(metric: MetricField, f, arc: GeodesicArc, count=801, tol=COLINEAR_TOL):
    """Verify ``grad f`` is a multiple of the momentum along ``arc``."""
    _check_unit_geodesic(metric, arc)
    t = _samples(arc, count)
    x, p = arc.state(t)
    worst, worst_t = 0.0, 0.0
    for ti, xi, pi in zip(t, x, p):
        g = f.gradient(xi)
        lam = (g @ pi) / (pi @ pi)
        res = float(np.linalg.norm(g - lam * pi) / (1.0 + np.linalg.norm(g)))
        if res > worst:
            worst, worst_t = res, float(ti)
    if worst > tol:
        raise ColinearityError(f"gradient not colinear with momentum: residual {worst:.3g} at t = {worst_t:.6g}",
                               {"worst_residual": worst, "worst_time": worst_t})
    return ColinearityProfile(metric, f, arc, worst, worst_t)


class ReparametrizedArc:
    """``c~(s) = c(theta(s))`` with ``theta' = exp(-f(c(theta))/2)``."""

    def __init__(self, metric, f, arc: GeodesicArc, max_steps=None, panels=256):
        self.metric, self.factor, self.arc = metric, f, arc
        T = arc.duration

        def weight(t):
            return np.exp(0.5 * f.value(arc.position(t)))

        self._weight = weight
        # fixed panels keep adaptive quadrature from stepping over features narrower than T / panels
        self._edges = np.linspace(0.0, T, panels + 1)
        pieces = [self._quad(a, b) for a, b in zip(self._edges[:-1], self._edges[1:])]
        self._cumulative = np.concatenate([[0.0], np.cumsum(pieces)])
        self.length = float(self._cumulative[-1])

        def rhs(_s, th):
            return [1.0 / weight(min(max(th[0], 0.0), T))]

        # one step cap per quadrature panel suffices for the same feature resolution
        max_steps = panels if max_steps is None else max_steps
        sol = solve_ivp(rhs, (0.0, self.length), [0.0], method="DOP853", rtol=1e-13, atol=1e-14,
                        dense_output=True, max_step=self.length / max_steps)
        if sol.status != 0:
            raise VerificationError(f"reparametrization failed: {sol.message}")
        self._theta = sol.sol
        self.duration = self.length

    def beta(self, t):
        """Reparametrized time of original time ``t``."""
        if t <= 0:
            return 0.0
        t = min(t, self.arc.duration)
        i = min(int(np.searchsorted(self._edges, t, side="right")) - 1, self._edges.size - 2)
        return float(self._cumulative[i] + self._quad(self._edges[i], t))

    def _quad(self, a, b):
        return quad(self._weight, a, b, epsabs=1e-15, epsrel=1e-13, limit=200)[0]

    def theta(self, s):
        s = np.asarray(s, dtype=float)
        out = self._theta(np.clip(s, 0.0, self.length))[0]
        return np.clip(out, 0.0, self.arc.duration)

    def state(self, s):
        """Position, velocity and momentum (for ``exp(f) g``) at parameters ``s``."""
        s = np.atleast_1d(s)
        th = np.atleast_1d(self.theta(s))
        x, p = self.arc.state(th)
        x, p = np.atleast_2d(x), np.atleast_2d(p)
        fx = np.array([self.factor.value(xi) for xi in x])
        v = np.einsum("mij,mj->mi", self.metric.Q(x), p)
        return x, v * np.exp(-fx / 2)[:, None], p * np.exp(fx / 2)[:, None]

    def start(self) -> PhasePoint:
        x, _, p = self.state(np.array([0.0]))
        return PhasePoint(x[0], p[0])


def beta_reparam(metric: MetricField, f, arc: GeodesicArc, check=True) -> ReparametrizedArc:
    if check:
        colinearity_check(metric, f, arc)
    return ReparametrizedArc(metric, f, arc)


def _segment_distance(point, curve, s_lo, s_hi):
    # the unsquared distance has a sharp minimum, so the located point is accurate to xatol
    mid, half = 0.5 * (s_lo + s_hi), 0.5 * (s_hi - s_lo)
    dist = lambda u: float(np.linalg.norm(curve(mid + u) - point))
    # offsets from the bracket centre: Brent's tolerance carries a sqrt(eps) * |x| term
    res = minimize_scalar(dist, bounds=(-half, half), method="bounded", options={"xatol": 1e-14})
    # that term still leaves ~1e-11 on a V-shaped minimum; re-centre on the minimizer and polish
    best = mid + res.x
    local = lambda u: float(np.linalg.norm(curve(best + u) - point))
    width = min(1e-7, half)
    lo, hi = max(-width, s_lo - best), min(width, s_hi - best)
    polish = minimize_scalar(local, bounds=(lo, hi), method="bounded", options={"xatol": 1e-15}) if hi > lo else res
    # bounded Brent never samples the bracket ends themselves
    return min(res.fun, polish.fun, dist(-half), dist(half))


def curve_distance(curve_a, span_a, curve_b, span_b, count=400):
    """One-sided distance sup over ``a`` of dist(a, image of b), polished per sample."""
    sa = np.linspace(*span_a, count)
    sb = np.linspace(*span_b, 4 * count)
    pb = np.array([curve_b(s) for s in sb])
    worst = 0.0
    for s in sa:
        pa = curve_a(s)
        i = int(np.argmin(np.sum((pb - pa) ** 2, axis=1)))
        lo, hi = sb[max(i - 1, 0)], sb[min(i + 1, sb.size - 1)]
        worst = max(worst, _segment_distance(pa, curve_b, lo, hi))
    return worst


def hausdorff_distance(curve_a, span_a, curve_b, span_b, count=400):
    return max(curve_distance(curve_a, span_a, curve_b, span_b, count),
               curve_distance(curve_b, span_b, curve_a, span_a, count))


def verify_perturbed_geodesic(metric: MetricField, f, ctilde: ReparametrizedArc, count=401,
                              rhs_tol=1e-7, hausdorff_tol=1e-7, raise_on_failure=True) -> dict:
    """Algebraic and re-integration checks that ``c~`` is an ``exp(f) g`` geodesic."""
    s = np.linspace(0.0, ctilde.duration, count)
    x, v, p = ctilde.state(s)
    th = np.atleast_1d(ctilde.theta(s))
    _, cdot, _ = ctilde.arc.jet(th)
    _, pbar = ctilde.arc.state(th)
    pbar = np.atleast_2d(pbar)
    dG = metric.dG(x)
    worst, worst_s = 0.0, 0.0
    for i in range(s.size):
        fx, g = f.value_and_gradient(x[i])
        pbar_dot = 0.5 * np.einsum("kij,i,j->k", dG[i], cdot[i], cdot[i])
        dp = 0.5 * (g @ cdot[i]) * pbar[i] + pbar_dot
        ex = np.exp(-fx)
        vq = metric.Q(x[i]) @ p[i]
        rhs_x = ex * vq
        rhs_p = ex * 0.5 * np.einsum("kij,i,j->k", dG[i], vq, vq) + 0.5 * ex * (p[i] @ vq) * g
        res = max(float(np.max(np.abs(rhs_x - v[i]))), float(np.max(np.abs(rhs_p - dp))))
        if res > worst:
            worst, worst_s = res, float(s[i])
    start = ctilde.start()
    rerun = integrate(metric, f, start, ctilde.duration, tol=1e-12)
    param = float(np.max(np.linalg.norm(np.atleast_2d(rerun.position(s)) - x, axis=1)))
    haus = hausdorff_distance(lambda t: ctilde.arc.position(t), (0.0, ctilde.arc.duration),
                              lambda t: rerun.position(t), (0.0, rerun.duration), count=200)
    round_trip = max(abs(ctilde.beta(float(ctilde.theta(si))) - si) for si in s[:: max(1, count // 40)])
    report = {"rhs_residual": worst, "worst_time": worst_s, "parametrized_distance": param,
              "hausdorff": haus, "beta_round_trip": round_trip, "duration": ctilde.duration}
    ok = worst < rhs_tol and haus < hausdorff_tol
    report["passed"] = bool(ok)
    if not ok and raise_on_failure:
        raise VerificationError(f"perturbed geodesic check failed: residual {worst:.3g} at s = {worst_s:.6g}, "
                                f"Hausdorff {haus:.3g}", report)
    return report
