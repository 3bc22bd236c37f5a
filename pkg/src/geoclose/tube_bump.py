"""Compactly supported function with prescribed gradient along a near-horizontal curve.

Coordinates around the curve are ``x = y(t) + (0, z)``.  In those
coordinates the function is

    W(t, z) = cutoff(|z| / mu) * sum_j  integral_t^{t + z_j} w_j(s) ds,

with ``w`` extended by zero outside its interval, which gives
``grad W(y(t)) = w(t)`` whenever ``w(t)`` is orthogonal to ``y'(t)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SpecInvalidError
from .metric import ConformalFactor, TubeRegion
from .profiles import radial_cutoff

GAUSS_NODES, GAUSS_WEIGHTS = np.polynomial.legendre.leggauss(16)
CONE_BOUND = 0.2


@dataclass
class TubeBumpSpec:
    """Curve ``y`` (callable returning ``(y, y')``), field ``w`` and tube sizes.

    ``w_support`` is an interval outside of which ``w`` is known to vanish and
    ``w_breaks`` lists times where ``w`` is only finitely smooth; quadrature
    panels are split there.
    """

    y_curve: object
    w_field: object
    T: float
    beta: float
    mu: float
    w_support: tuple | None = None
    w_breaks: tuple = ()

    def support_window(self):
        a, b = self.w_support if self.w_support is not None else (0.0, self.T)
        return max(a, 0.0), min(b, self.T)

    def validate(self, samples=401, orth_tol=1e-8):
        failed = []
        if not (3 * self.mu <= self.beta * (1 + 1e-12)):
            failed.append(f"3*mu <= beta violated (mu={self.mu:.6g}, beta={self.beta:.6g})")
        if not (0 < self.beta < self.T):
            failed.append(f"0 < beta < T violated (beta={self.beta:.6g}, T={self.T:.6g})")
        if self.mu <= 0:
            failed.append("mu > 0 violated")
        t = np.linspace(0.0, self.T, samples)
        y, yd = self.y_curve(t)
        e1 = np.zeros(y.shape[1])
        e1[0] = 1.0
        cone = np.max(np.linalg.norm(yd - e1, axis=1))
        if cone > CONE_BOUND:
            failed.append(f"|y' - e1| <= 1/5 violated (max {cone:.4g})")
        w = self.w_field(t)
        ends = (t <= self.beta) | (t >= self.T - self.beta)
        if np.any(ends) and np.max(np.abs(w[ends])) > 1e-12:
            failed.append(f"w = 0 on [0, beta] and [T - beta, T] violated (max {np.max(np.abs(w[ends])):.3g})")
        a, b = self.support_window()
        outside = (t < a) | (t > b)
        if np.any(outside) and np.max(np.abs(w[outside])) > 1e-12:
            failed.append("w nonzero outside its declared support")
        orth = np.abs(np.einsum("mi,mi->m", yd, w))
        if np.max(orth) > orth_tol * (1 + np.max(np.abs(w))):
            failed.append(f"<y', w> = 0 violated (max {np.max(orth):.3g})")
        if failed:
            raise SpecInvalidError("; ".join(failed))


OUTSIDE = None


class TubeBump(ConformalFactor):
    """The function ``W`` for a validated :class:`TubeBumpSpec`."""

    def __init__(self, spec: TubeBumpSpec, grid_size=2001):
        self.spec = spec
        self.mu = float(spec.mu)
        self.T = float(spec.T)
        self.a, self.b = spec.support_window()
        self._tgrid = np.linspace(0.0, self.T, grid_size)
        y, yd = spec.y_curve(self._tgrid)
        self._ygrid = y
        self.dim = y.shape[1]
        self._y1_lo, self._y1_hi = float(y[0, 0]), float(y[-1, 0])
        if not np.all(np.diff(y[:, 0]) > 0):
            raise SpecInvalidError("first coordinate of the curve is not increasing")
        self.zero = self.b <= self.a
        self._breaks = np.array(sorted(set([self.a, self.b, *spec.w_breaks])))
        lo, hi = max(self.a - self.mu, 0.0), min(self.b + self.mu, self.T)
        self._x1_window = (np.interp(lo, self._tgrid, y[:, 0]) - 1e-3 * self.mu,
                           np.interp(hi, self._tgrid, y[:, 0]) + 1e-3 * self.mu)
        inside = (self._tgrid >= lo - 1e-9) & (self._tgrid <= hi + 1e-9)
        zs = y[inside, 1:] if np.any(inside) else y[:1, 1:]
        zlo, zhi = zs.min(axis=0), zs.max(axis=0)
        self.support = TubeRegion(self._x1_window[0], self._x1_window[1],
                                  float(np.max((zhi - zlo) / 2)) + self.mu * 1.01, (zhi + zlo) / 2)
        self.c1_norm_estimate = float("nan")

    # ---------------------------------------------------------------- chart
    def chart(self, x):
        """``(t, z)`` with ``y(t) + (0, z) = x``, or ``None`` outside the slab."""
        x = np.asarray(x, dtype=float)
        if x[0] < self._y1_lo or x[0] > self._y1_hi:
            return OUTSIDE
        t = float(np.interp(x[0], self._ygrid[:, 0], self._tgrid))
        for _ in range(12):
            y, yd = self.spec.y_curve(np.array([t]))
            step = (y[0, 0] - x[0]) / yd[0, 0]
            t = min(max(t - step, 0.0), self.T)
            # Newton converges quadratically, so the next correction would be ~step^2
            if abs(step) < 1e-9:
                break
        y, yd = self.spec.y_curve(np.array([t]))
        return t, x[1:] - y[0, 1:], yd[0]

    def inverse_chart(self, t, z):
        y, _ = self.spec.y_curve(np.array([t]))
        return y[0] + np.concatenate([[0.0], z])

    # ---------------------------------------------------------------- values
    def _w(self, s):
        s = np.asarray(s, dtype=float)
        w = self.spec.w_field(s)
        w[(s < self.a) | (s > self.b)] = 0.0
        return w

    def _tilde(self, t, z):
        """``W~`` and its partials in the tube coordinates."""
        m = z.size
        lo = np.minimum(t, t + z)
        hi = np.maximum(t, t + z)
        panels = []
        for j in range(m):
            a, b = max(lo[j], self.a), min(hi[j], self.b)
            if b > a:
                cuts = self._breaks[(self._breaks > a) & (self._breaks < b)]
                edges = np.concatenate([[a], cuts, [b]])
                panels.extend((j, e0, e1) for e0, e1 in zip(edges[:-1], edges[1:]))
        k = GAUSS_NODES.size
        nodes = np.array([0.5 * (e0 + e1) + 0.5 * (e1 - e0) * GAUSS_NODES for _, e0, e1 in panels])
        pts = np.concatenate([nodes.ravel(), t + z, [t]])
        w = self._w(pts)
        S = 0.0
        for i, (j, e0, e1) in enumerate(panels):
            S += np.sign(z[j]) * 0.5 * (e1 - e0) * (GAUSS_WEIGHTS @ w[i * k:(i + 1) * k, j + 1])
        base = len(panels) * k
        w_end = np.array([w[base + j, j + 1] for j in range(m)])
        w_start = w[-1, 1:]
        r = float(np.linalg.norm(z))
        psi = float(radial_cutoff(r / self.mu))
        dpsi = float(radial_cutoff(r / self.mu, 1)) if r > 0 else 0.0
        Wt = psi * float(np.sum(w_end - w_start))
        Wz = psi * w_end
        if dpsi != 0.0:
            Wz = Wz + dpsi * S * z / (r * self.mu)
        return psi * S, Wt, Wz

    def value_and_gradient(self, x):
        x = np.asarray(x, dtype=float)
        zero = (0.0, np.zeros(self.dim))
        if self.zero or not self.in_support_box(x):
            return zero
        if x[0] < self._x1_window[0] or x[0] > self._x1_window[1]:
            return zero
        ch = self.chart(x)
        if ch is OUTSIDE:
            return zero
        t, z, yd = ch
        if np.linalg.norm(z) >= 2.0 * self.mu / 3.0:
            return zero
        if t + np.max(np.abs(z)) < self.a or t - np.max(np.abs(z)) > self.b:
            return zero
        W, Wt, Wz = self._tilde(t, z)
        grad = np.empty(self.dim)
        grad[1:] = Wz
        grad[0] = (Wt - yd[1:] @ Wz) / yd[0]
        return W, grad


def tube_chart(spec: TubeBumpSpec, point):
    """Tube coordinates ``(t, z)`` of ``point`` or ``None`` outside the slab."""
    ch = TubeBump(spec, grid_size=401).chart(point)
    return ch if ch is OUTSIDE else ch[:2]


def build_bump(spec: TubeBumpSpec, validate=True) -> TubeBump:
    if validate:
        spec.validate()
    return TubeBump(spec)


def straight_line_spec(w_func, T=1.0, beta=0.2, mu=0.05, dim=2):
    """Spec along ``y(t) = t e1``; handy for tests and demos."""
    e1 = np.zeros(dim)
    e1[0] = 1.0

    def y_curve(t):
        t = np.atleast_1d(t)
        return t[:, None] * e1[None, :], np.tile(e1, (t.size, 1))

    return TubeBumpSpec(y_curve, w_func, T, beta, mu)
