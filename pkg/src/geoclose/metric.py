"""Riemannian metrics on R^n, their duals, Hamiltonians and conformal factors.

Every metric evaluates ``G(x)`` and its partial derivatives on arrays of
points of shape ``(..., n)``.  Derivatives are returned with the
differentiation index first: ``dG(x)[..., k, i, j] = d G_ij / d x_k``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, MetricDegeneracyError

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class TangentPoint:
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float).copy())
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float).copy())

    def as_vector(self):
        return np.concatenate([self.x, self.v])


@dataclass(frozen=True)
class PhasePoint:
    x: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float).copy())
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float).copy())

    def as_vector(self):
        return np.concatenate([self.x, self.p])


@dataclass(frozen=True)
class TubeRegion:
    """Cylinder ``{(t, z): t in [t_min, t_max], |z - center| < radius}``."""

    t_min: float
    t_max: float
    radius: float
    center: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        if not (self.t_min <= x[0] <= self.t_max):
            return False
        return bool(np.linalg.norm(x[1:] - self.center) < self.radius)

    def contains_many(self, xs):
        xs = np.atleast_2d(xs)
        inside_t = (xs[:, 0] >= self.t_min) & (xs[:, 0] <= self.t_max)
        return inside_t & (np.linalg.norm(xs[:, 1:] - self.center, axis=1) < self.radius)

    def scaled(self, factor: float) -> "TubeRegion":
        return TubeRegion(self.t_min, self.t_max, self.radius * factor, self.center)

    def to_dict(self):
        return {"t_min": self.t_min, "t_max": self.t_max, "radius": self.radius,
                "center": self.center.tolist()}


class MetricField:
    """Smooth field of symmetric positive-definite matrices on R^n."""

    periodic = False
    smoothness_class = "inf"
    name = "metric"

    def __init__(self, dim: int):
        if dim < 2:
            raise DomainError("metric dimension must be at least 2")
        self.dim = int(dim)

    def G(self, x):
        raise NotImplementedError

    def dG(self, x):
        raise NotImplementedError

    def Q(self, x):
        return np.linalg.inv(self.G(x))

    def dQ(self, x):
        """Partials of the dual matrix, ``-Q (dG/dx_k) Q``."""
        Q = self.Q(x)
        return -np.einsum("...ia,...kab,...bj->...kij", Q, self.dG(x), Q)

    def describe(self) -> dict:
        return {"family": self.name, "dim": self.dim}


class FlatMetric(MetricField):
    periodic = True
    name = "flat"

    def G(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.eye(self.dim), x.shape[:-1] + (self.dim, self.dim)).copy()

    def dG(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (self.dim,) * 3)

    def Q(self, x):
        return self.G(x)


class DiagonalMetric(MetricField):
    """``G_ii(x) = d_i (1 + a_i sin(2 pi x_{i+1}))`` with the index taken mod n.

    With all amplitudes zero this is a constant diagonal metric.
    """

    periodic = True
    name = "diagonal"

    def __init__(self, entries, amplitudes=None):
        entries = np.asarray(entries, dtype=float)
        super().__init__(entries.size)
        self.entries = entries
        self.amplitudes = np.zeros_like(entries) if amplitudes is None else np.asarray(amplitudes, float)
        if np.any(entries <= 0) or np.any(np.abs(self.amplitudes) >= 1):
            raise DomainError("diagonal metric needs positive entries and |amplitude| < 1")
        self._partner = (np.arange(self.dim) + 1) % self.dim

    def _diag(self, x):
        x = np.asarray(x, dtype=float)
        arg = TWO_PI * x[..., self._partner]
        return self.entries * (1.0 + self.amplitudes * np.sin(arg)), \
            self.entries * self.amplitudes * TWO_PI * np.cos(arg)

    def G(self, x):
        d, _ = self._diag(x)
        return d[..., :, None] * np.eye(self.dim)

    def Q(self, x):
        d, _ = self._diag(x)
        return (1.0 / d)[..., :, None] * np.eye(self.dim)

    def dG(self, x):
        x = np.asarray(x, dtype=float)
        _, dd = self._diag(x)
        out = np.zeros(x.shape[:-1] + (self.dim,) * 3)
        for i in range(self.dim):
            out[..., self._partner[i], i, i] = dd[..., i]
        return out

    def describe(self):
        return {"family": self.name, "dim": self.dim, "entries": self.entries.tolist(),
                "amplitudes": self.amplitudes.tolist()}


class ConformalTrigMetric(MetricField):
    """``G(x) = exp(sum_m a_m sin(2 pi k_m . x + phi_m)) I``."""

    periodic = True
    name = "conformal_trig"

    def __init__(self, dim, amplitudes, wavevectors, phases=None):
        super().__init__(dim)
        self.amplitudes = np.atleast_1d(np.asarray(amplitudes, dtype=float))
        self.wavevectors = np.atleast_2d(np.asarray(wavevectors, dtype=float))
        self.phases = np.zeros_like(self.amplitudes) if phases is None else np.atleast_1d(np.asarray(phases, float))
        if not np.allclose(self.wavevectors, np.round(self.wavevectors)):
            self.periodic = False

    def _phi(self, x):
        x = np.asarray(x, dtype=float)
        arg = TWO_PI * x @ self.wavevectors.T + self.phases
        phi = np.sin(arg) @ self.amplitudes
        dphi = (np.cos(arg) * self.amplitudes) @ self.wavevectors * TWO_PI
        return phi, dphi

    def G(self, x):
        phi, _ = self._phi(x)
        return np.exp(phi)[..., None, None] * np.eye(self.dim)

    def Q(self, x):
        phi, _ = self._phi(x)
        return np.exp(-phi)[..., None, None] * np.eye(self.dim)

    def dG(self, x):
        phi, dphi = self._phi(x)
        return (np.exp(phi)[..., None] * dphi)[..., :, None, None] * np.eye(self.dim)

    def describe(self):
        return {"family": self.name, "dim": self.dim, "amplitudes": self.amplitudes.tolist(),
                "wavevectors": self.wavevectors.tolist(), "phases": self.phases.tolist()}


class TrigPerturbedMetric(MetricField):
    """Flat metric plus a random trigonometric polynomial of symmetric matrices.

    ``G(x) = I + sum_m A_m sin(2 pi k_m . x + phi_m)`` with integer wave
    vectors, scaled so that ``sup|G - I| + sum_k sup|dG/dx_k|`` (spectral
    norms, bounded through the triangle inequality) equals ``c1_size``.
    """

    periodic = True
    name = "trig_perturbed"

    def __init__(self, dim=2, c1_size=0.05, n_modes=4, max_wavenumber=1, seed=0):
        super().__init__(dim)
        rng = np.random.default_rng(seed)
        ks = []
        while len(ks) < n_modes:
            k = rng.integers(-max_wavenumber, max_wavenumber + 1, size=dim)
            if np.any(k != 0):
                ks.append(k)
        self.wavevectors = np.array(ks, dtype=float)
        self.phases = rng.uniform(0.0, TWO_PI, size=n_modes)
        mats = rng.normal(size=(n_modes, dim, dim))
        mats = 0.5 * (mats + np.swapaxes(mats, 1, 2))
        norms = np.linalg.norm(mats, ord=2, axis=(1, 2))
        bound = np.sum(norms * (1.0 + TWO_PI * np.abs(self.wavevectors).sum(axis=1)))
        self.matrices = mats * (c1_size / bound)
        self.c1_size = float(c1_size)
        self.seed = seed
        self.n_modes = n_modes
        self.max_wavenumber = max_wavenumber

    def _args(self, x):
        x = np.asarray(x, dtype=float)
        return TWO_PI * x @ self.wavevectors.T + self.phases

    def G(self, x):
        s = np.sin(self._args(x))
        return np.eye(self.dim) + np.einsum("...m,mij->...ij", s, self.matrices)

    def dG(self, x):
        c = np.cos(self._args(x))
        return TWO_PI * np.einsum("...m,mk,mij->...kij", c, self.wavevectors, self.matrices)

    def Q(self, x):
        G = self.G(x)
        if self.dim == 2:
            det = G[..., 0, 0] * G[..., 1, 1] - G[..., 0, 1] * G[..., 1, 0]
            out = np.empty_like(G)
            out[..., 0, 0] = G[..., 1, 1]
            out[..., 1, 1] = G[..., 0, 0]
            out[..., 0, 1] = -G[..., 0, 1]
            out[..., 1, 0] = -G[..., 1, 0]
            return out / det[..., None, None]
        return np.linalg.inv(G)

    def describe(self):
        return {"family": self.name, "dim": self.dim, "c1_size": self.c1_size, "seed": self.seed,
                "n_modes": self.n_modes, "max_wavenumber": self.max_wavenumber}


class LinearChartMetric(MetricField):
    """Pull-back of ``base`` through the affine chart ``y = L (x - origin)``.

    ``Gbar(y) = L^{-T} G(origin + L^{-1} y) L^{-1}``.
    """

    name = "chart"

    def __init__(self, base: MetricField, origin, L):
        super().__init__(base.dim)
        self.base = base
        self.origin = np.asarray(origin, dtype=float)
        self.L = np.asarray(L, dtype=float)
        self.Linv = np.linalg.inv(self.L)

    def to_base(self, y):
        return self.origin + np.asarray(y, dtype=float) @ self.Linv.T

    def from_base(self, x):
        return (np.asarray(x, dtype=float) - self.origin) @ self.L.T

    def G(self, y):
        G = self.base.G(self.to_base(y))
        return self.Linv.T @ G @ self.Linv

    def dG(self, y):
        dG = self.base.dG(self.to_base(y))
        # chain rule: d/dy_k = sum_m Linv[m, k] d/dx_m
        dG = np.einsum("mk,...mij->...kij", self.Linv, dG)
        return np.einsum("ai,...kab,bj->...kij", self.Linv, dG, self.Linv)

    def describe(self):
        return {"family": self.name, "base": self.base.describe(), "origin": self.origin.tolist(),
                "L": self.L.tolist()}


def make_metric(config: dict) -> MetricField:
    """Build a metric from a config section such as ``{"family": "flat", "dim": 2}``."""
    cfg = dict(config)
    family = cfg.pop("family", "flat")
    dim = int(cfg.pop("dim", 2))
    if family == "flat":
        metric = FlatMetric(dim)
    elif family == "diagonal":
        metric = DiagonalMetric(cfg.pop("entries", [1.0] * dim), cfg.pop("amplitudes", None))
    elif family == "conformal_trig":
        metric = ConformalTrigMetric(dim, cfg.pop("amplitudes", [0.1]),
                                     cfg.pop("wavevectors", [[1.0] + [0.0] * (dim - 1)]),
                                     cfg.pop("phases", None))
    elif family == "trig_perturbed":
        metric = TrigPerturbedMetric(dim, cfg.pop("c1_size", 0.05), cfg.pop("n_modes", 4),
                                     cfg.pop("max_wavenumber", 1), cfg.pop("seed", 0))
    else:
        raise DomainError(f"unknown metric family {family!r}")
    if cfg:
        raise DomainError(f"unknown metric keys: {sorted(cfg)}")
    return metric


# ---------------------------------------------------------------- operations

def dual_matrix(metric: MetricField, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    G = metric.G(x)
    try:
        np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        raise MetricDegeneracyError(x) from None
    Q = metric.Q(x)
    if np.max(np.abs(Q @ G - np.eye(metric.dim))) >= 1e-10:
        raise MetricDegeneracyError(x, "(ill-conditioned inverse)")
    return Q


def hamiltonian(metric: MetricField, pp: PhasePoint) -> float:
    Q = dual_matrix(metric, pp.x)
    return 0.5 * float(pp.p @ Q @ pp.p)


def speed_squared(metric: MetricField, x, v) -> float:
    return float(v @ metric.G(x) @ v)


def unit_normalize(metric: MetricField, tp: TangentPoint) -> TangentPoint:
    norm2 = speed_squared(metric, tp.x, tp.v)
    if not norm2 > 0.0:
        raise DomainError("cannot normalize a zero velocity")
    v = tp.v / np.sqrt(norm2)
    # one refinement sweep brings |v|_x to 1 within a few ulps
    v = v / np.sqrt(speed_squared(metric, tp.x, v))
    return TangentPoint(tp.x, v)


def to_phase(metric: MetricField, tp: TangentPoint, factor=None) -> PhasePoint:
    p = metric.G(tp.x) @ tp.v
    if factor is not None:
        p = np.exp(factor.value(tp.x)) * p
    return PhasePoint(tp.x, p)


def to_tangent(metric: MetricField, pp: PhasePoint, factor=None) -> TangentPoint:
    v = metric.Q(pp.x) @ pp.p
    if factor is not None:
        v = np.exp(-factor.value(pp.x)) * v
    return TangentPoint(pp.x, v)


def conformal_hamiltonian_rhs(metric: MetricField, f, pp: PhasePoint):
    """Hamiltonian vector field of ``H_f = exp(-f)/2 <p, Q p>``.

    Returns ``(dx, dp)``; ``f=None`` gives the unperturbed field.
    """
    x, p = pp.x, pp.p
    Q = metric.Q(x)
    v = Q @ p
    # -<p, dQ_k p>/2 = <v, dG_k v>/2
    force = 0.5 * np.einsum("kij,i,j->k", metric.dG(x), v, v)
    if f is None:
        return v, force
    fx, grad = f.value_and_gradient(x)
    scale = np.exp(-fx)
    return scale * v, scale * force + 0.5 * scale * float(p @ v) * grad


# ---------------------------------------------------------- conformal factors

class ConformalFactor:
    """Scalar field ``f`` with exact gradient, vanishing outside ``support``."""

    support: TubeRegion | None = None
    c1_norm_estimate: float = 0.0

    def value_and_gradient(self, x):
        raise NotImplementedError

    def value(self, x) -> float:
        return self.value_and_gradient(x)[0]

    def gradient(self, x) -> np.ndarray:
        return self.value_and_gradient(x)[1]

    def in_support_box(self, x) -> bool:
        """Cheap conservative test: False means f and grad f vanish at x."""
        s = self.support
        if s is None:
            return True
        x = np.asarray(x, dtype=float)
        if x[0] < s.t_min or x[0] > s.t_max:
            return False
        return bool(np.all(np.abs(x[1:] - s.center) < s.radius))


class ZeroFactor(ConformalFactor):
    def __init__(self, dim, support=None):
        self.dim = dim
        self.support = support
        self.c1_norm_estimate = 0.0

    def value_and_gradient(self, x):
        return 0.0, np.zeros(self.dim)


class AnalyticFactor(ConformalFactor):
    """Factor from user callables; used for tests and negative controls."""

    def __init__(self, func, grad, support=None, dim=None):
        self.func = func
        self.grad = grad
        self.support = support
        self.dim = dim

    def value_and_gradient(self, x):
        x = np.asarray(x, dtype=float)
        if self.support is not None and not self.support.contains(x):
            return 0.0, np.zeros(x.size)
        return float(self.func(x)), np.asarray(self.grad(x), dtype=float)


def central_difference_gradient(f: ConformalFactor, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    g = np.empty(x.size)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        g[i] = (f.value(x + e) - f.value(x - e)) / (2 * h)
    return g
