"""Polynomial smoothstep profiles with exact plateaus."""
from __future__ import annotations

from fractions import Fraction
from math import comb

import numpy as np
from numpy.polynomial import Polynomial

SMOOTH_ORDER = 6  # C^6 joins at both ends; degree 2*6 + 1


def _smoothstep_polynomial(order: int = SMOOTH_ORDER) -> Polynomial:
    # normalized primitive of u^order (1 - u)^order, with coefficients computed exactly
    coef = [Fraction(0)] * (2 * order + 2)
    for j in range(order + 1):
        coef[order + 1 + j] = Fraction((-1) ** j * comb(order, j), order + 1 + j)
    total = sum(coef)
    return Polynomial([float(c / total) for c in coef])


class Smoothstep:
    """``S(u)``: 0 for u <= 0, 1 for u >= 1, polynomial in between.

    ``derivative(u, k)`` gives ``S^{(k)}``; the clamped branches are exact.
    """

    def __init__(self, order: int = SMOOTH_ORDER):
        self.order = order
        self._poly = [_smoothstep_polynomial(order)]
        for _ in range(3):
            self._poly.append(self._poly[-1].deriv())
        # highest degree first, for Horner on scalars
        self._horner = [tuple(float(c) for c in p.coef[::-1]) for p in self._poly]

    def _scalar(self, u: float, k: int) -> float:
        if not 0.0 < u < 1.0:
            return 1.0 if (k == 0 and u >= 1.0) else 0.0
        high = u > 0.5
        low = 1.0 - u if high else u
        val = 0.0
        for c in self._horner[k]:
            val = val * low + c
        if high:
            if k == 0:
                return 1.0 - val
            if k % 2 == 0:
                return -val
        return val

    def derivative(self, u, k: int = 0):
        if isinstance(u, (float, int, np.floating)):
            return self._scalar(float(u), k)
        u = np.asarray(u, dtype=float)
        if u.ndim == 0:
            return self._scalar(float(u), k)
        inner = (u > 0.0) & (u < 1.0)
        # evaluate near the nearer plateau via S(u) = 1 - S(1 - u) to avoid cancellation
        low = np.clip(np.where(u <= 0.5, u, 1.0 - u), 0.0, 0.5)
        vals = self._poly[k](low)
        high = u > 0.5
        if k == 0:
            vals = np.where(high, 1.0 - vals, vals)
        elif k % 2 == 0:
            vals = np.where(high, -vals, vals)
        out = np.where(inner, vals, 0.0)
        if k == 0:
            out = np.where(u >= 1.0, 1.0, out)
        return out if out.ndim else float(out)

    def __call__(self, u):
        return self.derivative(u, 0)


SMOOTHSTEP = Smoothstep()


class BlendProfile:
    """Transition from 0 to 1 over ``[start, end]`` inside ``[0, tau]``.

    The default window ``[tau/3, 2 tau/3]`` keeps both geodesic plateaus.
    """

    def __init__(self, tau: float, start: float | None = None, end: float | None = None):
        if not tau > 0:
            raise ValueError("tau must be positive")
        self.tau = float(tau)
        self.start = tau / 3.0 if start is None else float(start)
        self.end = 2.0 * tau / 3.0 if end is None else float(end)
        self._width = self.end - self.start

    def psi(self, t, k: int = 0):
        u = (np.asarray(t, dtype=float) - self.start) / self._width
        return SMOOTHSTEP.derivative(u, k) / self._width**k

    def __call__(self, t):
        return self.psi(t)

    def derivatives(self, t):
        return self.psi(t, 0), self.psi(t, 1), self.psi(t, 2)


class WindowProfile:
    """Plateau of height 1 on ``[a2, b1]`` with smooth ramps on ``[a1, a2]`` and ``[b1, b2]``."""

    def __init__(self, a1, a2, b1, b2):
        if not a1 < a2 <= b1 < b2:
            raise ValueError("window needs a1 < a2 <= b1 < b2")
        self.up = BlendProfile(1.0, a1, a2)
        self.down = BlendProfile(1.0, b1, b2)

    def psi(self, t, k: int = 0):
        if k == 0:
            return self.up.psi(t) - self.down.psi(t)
        return self.up.psi(t, k) - self.down.psi(t, k)


def radial_cutoff(s, k: int = 0):
    """Even cutoff equal to 1 on ``[0, 1/3]`` and 0 beyond ``2/3``.

    Its value and first derivative stay below 10 in absolute value.
    """
    s = np.abs(np.asarray(s, dtype=float))
    return (-3.0) ** k * SMOOTHSTEP.derivative(2.0 - 3.0 * s, k)


def patch_profile(u, k: int = 0):
    """0 on ``|u| <= 1/2``, 1 on ``|u| >= 1``; used for local curve replacement."""
    u = np.asarray(u, dtype=float)
    a = np.abs(u)
    val = SMOOTHSTEP.derivative(2.0 * a - 1.0, k) * 2.0**k
    if k % 2 == 1:
        val = val * np.sign(u)
    return val
