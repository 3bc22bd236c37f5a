"""Parametrized curves carrying exact first and second derivatives.

Every curve exposes ``jet(s) -> (X, X', X'')`` on arrays of parameters,
returning arrays of shape ``(m, n)``.  ``geodesic_mask(s)`` marks the
parameters where the curve is known to coincide with an unperturbed
geodesic, so the control field can be set to exactly zero there.
"""
from __future__ import annotations

import numpy as np

from .flow import GeodesicArc, geodesic_jet, integrate
from .metric import MetricField, PhasePoint, TangentPoint
from .profiles import BlendProfile, WindowProfile, patch_profile


class Curve:
    t_min = 0.0
    t_max = 1.0

    def jet(self, s):
        raise NotImplementedError

    def position(self, s):
        return self.jet(s)[0]

    def geodesic_mask(self, s):
        return np.zeros(np.atleast_1d(s).shape, dtype=bool)

    def breakpoints(self):
        """Parameters where the curve is only finitely smooth."""
        return []


class GeodesicCurve(Curve):
    """Unperturbed geodesic from a tangent point, parametrized by time."""

    def __init__(self, metric: MetricField, start: TangentPoint, duration: float, tol=1e-13):
        self.metric = metric
        self.start = start
        self.arc: GeodesicArc = integrate(metric, None, PhasePoint(start.x, metric.G(start.x) @ start.v),
                                          duration, tol)
        self.t_max = float(duration)

    def jet(self, s):
        return self.arc.jet(np.atleast_1d(s))

    def geodesic_mask(self, s):
        return np.ones(np.atleast_1d(s).shape, dtype=bool)


class TwoSidedGeodesic(Curve):
    """Geodesic through ``x`` with velocity ``v`` (any speed) on ``[-span, span]``."""

    def __init__(self, metric: MetricField, x, v, span: float, tol=1e-13):
        self.metric = metric
        p = metric.G(x) @ np.asarray(v, dtype=float)
        self._fwd = integrate(metric, None, PhasePoint(x, p), span, tol)
        self._bwd = integrate(metric, None, PhasePoint(x, -p), span, tol)
        self.t_min, self.t_max = -float(span), float(span)

    def jet(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        n = self.metric.dim
        X, V, A = (np.empty((s.size, n)) for _ in range(3))
        pos = s >= 0
        if np.any(pos):
            X[pos], V[pos], A[pos] = self._fwd.jet(s[pos])
        if np.any(~pos):
            xb, vb, ab = self._bwd.jet(-s[~pos])
            X[~pos], V[~pos], A[~pos] = xb, -vb, ab
        return X, V, A


class BlendCurve(Curve):
    """``(1 - psi) a + psi b`` for two curves on a common parameter interval."""

    def __init__(self, first: Curve, second: Curve, profile: BlendProfile):
        self.first, self.second, self.profile = first, second, profile
        self.t_min, self.t_max = 0.0, profile.tau

    def jet(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        a, da, dda = self.first.jet(s)
        if self.second is self.first:
            return a, da, dda
        b, db, ddb = self.second.jet(s)
        p0, p1, p2 = (np.asarray(q).reshape(-1, 1) for q in self.profile.derivatives(s))
        X = (1 - p0) * a + p0 * b
        dX = (1 - p0) * da + p0 * db + p1 * (b - a)
        ddX = (1 - p0) * dda + p0 * ddb + 2 * p1 * (db - da) + p2 * (b - a)
        return X, dX, ddX

    def geodesic_mask(self, s):
        s = np.atleast_1d(s)
        if self.second is self.first:
            return np.ones(s.shape, dtype=bool)
        return (s <= self.profile.start) | (s >= self.profile.end)

    def breakpoints(self):
        return [self.profile.start, self.profile.end]


class ShiftedCurve(Curve):
    """``X(s) + window(s) * omega``; the window vanishes near both ends."""

    def __init__(self, base: Curve, omega, window: WindowProfile):
        self.base = base
        self.omega = np.asarray(omega, dtype=float)
        self.window = window
        self.t_min, self.t_max = base.t_min, base.t_max
        self._lo, self._hi = window.up.start, window.down.end

    def jet(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        X, dX, ddX = self.base.jet(s)
        w = [np.asarray(self.window.psi(s, k)).reshape(-1, 1) for k in range(3)]
        return X + w[0] * self.omega, dX + w[1] * self.omega, ddX + w[2] * self.omega

    def geodesic_mask(self, s):
        s = np.atleast_1d(s)
        return self.base.geodesic_mask(s) & ((s <= self._lo) | (s >= self._hi))

    def breakpoints(self):
        w = self.window
        return self.base.breakpoints() + [w.up.start, w.up.end, w.down.start, w.down.end]


class PatchedCurve(Curve):
    """Local replacement of a curve by the geodesic tangent to it at ``center``.

    On ``|s - center| <= radius/2`` the result is exactly that geodesic.
    """

    def __init__(self, metric: MetricField, base: Curve, center: float, radius: float):
        self.base, self.center, self.radius = base, float(center), float(radius)
        self.t_min, self.t_max = base.t_min, base.t_max
        X, dX, _ = base.jet(np.array([center]))
        self.tangent = TwoSidedGeodesic(metric, X[0], dX[0], radius * 1.01)

    def jet(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        X, dX, ddX = (a.copy() for a in self.base.jet(s))
        u = (s - self.center) / self.radius
        near = np.abs(u) < 1.0
        if np.any(near):
            c, dc, ddc = self.tangent.jet(s[near] - self.center)
            ph = [np.asarray(patch_profile(u[near], k)).reshape(-1, 1) / self.radius**k for k in range(3)]
            Xn, dXn, ddXn = X[near], dX[near], ddX[near]
            X[near] = ph[0] * Xn + (1 - ph[0]) * c
            dX[near] = ph[0] * dXn + (1 - ph[0]) * dc + ph[1] * (Xn - c)
            ddX[near] = ph[0] * ddXn + (1 - ph[0]) * ddc + 2 * ph[1] * (dXn - dc) + ph[2] * (Xn - c)
        return X, dX, ddX

    def geodesic_mask(self, s):
        s = np.atleast_1d(s)
        core = np.abs(s - self.center) <= 0.5 * self.radius
        return np.where(np.abs(s - self.center) < self.radius, core, self.base.geodesic_mask(s))

    def breakpoints(self):
        c, r = self.center, self.radius
        return self.base.breakpoints() + [c - r, c - r / 2, c + r / 2, c + r]


def curve_speed(metric: MetricField, x, dx, ddx):
    """Speed ``sigma`` and its parameter derivative along a curve."""
    G = metric.G(x)
    dG = metric.dG(x)
    Gdx = np.einsum("mij,mj->mi", G, dx)
    sigma = np.sqrt(np.einsum("mi,mi->m", dx, Gdx))
    dGdx = np.einsum("mkij,mk->mij", dG, dx)
    num = 2 * np.einsum("mi,mi->m", ddx, Gdx) + np.einsum("mi,mij,mj->m", dx, dGdx, dx)
    return sigma, num / (2 * sigma)


def control_from_jet(metric: MetricField, x, xd, xdd):
    """Defect ``2 d/dt(G xd) - (<xd, dG_i xd>)_i`` of a curve from the geodesic equation."""
    G = metric.G(x)
    dG = metric.dG(x)
    dGxd = np.einsum("mkij,mk->mij", dG, xd)
    pdot = np.einsum("mij,mj->mi", G, xdd) + np.einsum("mij,mj->mi", dGxd, xd)
    quad = np.einsum("mi,mkij,mj->mk", xd, dG, xd)
    return 2 * pdot - quad


__all__ = ["Curve", "GeodesicCurve", "TwoSidedGeodesic", "BlendCurve", "ShiftedCurve",
           "PatchedCurve", "curve_speed", "control_from_jet", "geodesic_jet"]
