"""Closing a near-recurrent geodesic of a periodic metric by a small conformal change.

The driver works in a similarity chart around the seed: the seed goes to the
origin with velocity ``e1``.  A recurrence of the flow on the section
``{y1 = 0}`` is refined until its gap is small enough for the connecting
factor to stay below the C^1 budget, the revisits of the tube are collected
as obstacles, the return point is steered onto the geodesic of the first
point and the factor is pulled back to the torus.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .connector import connect, estimate_c1_norm, tube_sample_points
from .errors import (GeocloseError, GeometryError, PreconditionError, RecurrenceNotFoundError, StageError,
                     VerificationError)
from .flow import GeodesicArc, integrate
from .metric import (ConformalFactor, LinearChartMetric, MetricField, PhasePoint, TangentPoint, TubeRegion,
                     ZeroFactor)
from .obstacle import ObstacleSet
from .reparam import beta_reparam, verify_perturbed_geodesic

log = logging.getLogger(__name__)

DEFAULT_TAU = 1.0 / 40.0
MIN_TAU = 1e-3
CURVATURE_BOUND = 0.1  # |d/dt chart(geodesic) - e1| on [0, tau]


# ------------------------------------------------------------------ chart

def rotation_to_e1(direction) -> np.ndarray:
    """Rotation in the plane of ``direction`` and ``e1`` taking ``direction`` to ``e1``."""
    a = np.asarray(direction, dtype=float)
    a = a / np.linalg.norm(a)
    n = a.size
    e1 = np.zeros(n)
    e1[0] = 1.0
    c = float(a @ e1)
    if c < -1.0 + 1e-12:
        R = np.eye(n)
        R[:2, :2] = -np.eye(2)
        return R
    K = np.outer(e1, a) - np.outer(a, e1)
    return np.eye(n) + K + K @ K / (1.0 + c)


@dataclass
class ChartMap:
    """Affine chart ``y = L (x - origin)`` with ``L = R / |v|``; ``periodic`` wraps ``x - origin``."""

    origin: np.ndarray
    L: np.ndarray
    periodic: bool = True
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.L = np.asarray(self.L, dtype=float)
        self.Linv = np.linalg.inv(self.L)

    def offset(self, x):
        d = np.asarray(x, dtype=float) - self.origin
        return d - np.round(d) if self.periodic else d

    def to_chart(self, x):
        return self.offset(x) @ self.L.T

    def from_chart(self, y):
        return self.origin + np.asarray(y, dtype=float) @ self.Linv.T

    def tangent_to_chart(self, tp: TangentPoint) -> TangentPoint:
        return TangentPoint(self.to_chart(tp.x), self.L @ tp.v)

    def tangent_from_chart(self, tp: TangentPoint) -> TangentPoint:
        return TangentPoint(self.from_chart(tp.x), self.Linv @ tp.v)

    def momentum_to_chart(self, p):
        return np.asarray(p, dtype=float) @ self.Linv

    def to_dict(self):
        return {"origin": self.origin.tolist(), "L": self.L.tolist(), "periodic": self.periodic, "tau": self.tau}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["origin"]), np.array(d["L"]), d["periodic"], d["tau"])


def _chart_geodesic(metric: MetricField, tau):
    e1 = np.zeros(metric.dim)
    e1[0] = 1.0
    pp = PhasePoint(np.zeros(metric.dim), metric.G(np.zeros(metric.dim)) @ e1)
    return integrate(metric, None, pp, tau, tol=1e-12)


def _self_intersects(base: MetricField, chart: ChartMap, seed: TangentPoint, tau: float) -> bool:
    """Chord-arc test of the seed geodesic on ``[-10 tau, 10 tau]`` on the torus."""
    pp = PhasePoint(seed.x, base.G(seed.x) @ seed.v)
    fwd = integrate(base, None, pp, 10 * tau, tol=1e-12)
    back = integrate(base, None, PhasePoint(seed.x, -pp.p), 10 * tau, tol=1e-12)
    t = np.linspace(0.0, 10 * tau, 201)
    pts = np.vstack([back.position(t[::-1]), fwd.position(t[1:])])
    times = np.concatenate([-t[::-1], t[1:]])
    d = pts[:, None, :] - pts[None, :, :]
    if chart.periodic:
        d = d - np.round(d)
    dist = np.linalg.norm(d, axis=2)
    dt = np.abs(times[:, None] - times[None, :])
    far = dt >= tau
    return bool(np.any(dist[far] < 0.25 * dt[far] * np.min(np.linalg.norm(fwd.velocities, axis=1))))


def align_chart(metric: MetricField, tp: TangentPoint, tau: float = DEFAULT_TAU):
    """Chart sending ``tp`` to ``(0, e1)``; ``chart.tau`` is shrunk until the straightness bound holds.

    Returns ``(chart, aligned_metric)``.
    """
    speed2 = float(tp.v @ metric.G(tp.x) @ tp.v)
    if abs(speed2 - 1.0) > 1e-9:
        raise PreconditionError(f"seed velocity is not unit (|v|^2 = {speed2:.12g})")
    R = rotation_to_e1(tp.v)
    L = R / np.linalg.norm(tp.v)
    periodic = bool(getattr(metric, "periodic", False))
    while True:
        chart = ChartMap(np.array(tp.x, dtype=float), L, periodic, tau)
        aligned = LinearChartMetric(metric, tp.x, L)
        arc = _chart_geodesic(aligned, tau)
        e1 = np.zeros(metric.dim)
        e1[0] = 1.0
        dev = np.max(np.linalg.norm(arc.velocity(np.linspace(0.0, tau, 201)) - e1, axis=1))
        if dev <= CURVATURE_BOUND and not _self_intersects(metric, chart, tp, tau):
            return chart, aligned
        tau *= 0.5
        if tau < MIN_TAU:
            raise GeometryError(f"geometry too curved: no tau >= {MIN_TAU} satisfies the straightness bound")


# ------------------------------------------------------------ recurrence

@dataclass
class SectionHit:
    time: float
    x: np.ndarray
    v: np.ndarray
    y: np.ndarray  # chart position, y[0] = 0
    w: np.ndarray  # chart velocity


@dataclass
class RecurrencePair:
    """``second`` is the flow of ``first`` after ``return_time``; both lie on the section."""

    first: TangentPoint
    second: TangentPoint
    return_time: float
    gap: float
    first_time: float = 0.0
    refined: bool = False

    def to_dict(self):
        return {"first": {"x": self.first.x.tolist(), "v": self.first.v.tolist()},
                "second": {"x": self.second.x.tolist(), "v": self.second.v.tolist()},
                "return_time": self.return_time, "gap": self.gap, "first_time": self.first_time,
                "refined": self.refined}

    @classmethod
    def from_dict(cls, d):
        tp = lambda e: TangentPoint(np.array(e["x"]), np.array(e["v"]))
        return cls(tp(d["first"]), tp(d["second"]), d["return_time"], d["gap"], d.get("first_time", 0.0),
                   d.get("refined", False))


def section_gap(chart: ChartMap, a: TangentPoint, b: TangentPoint) -> float:
    ca, cb = chart.tangent_to_chart(a), chart.tangent_to_chart(b)
    return float(np.linalg.norm(np.concatenate([ca.x - cb.x, ca.v - cb.v])))


def _arc_hits(arc: GeodesicArc, chart: ChartMap, window: float, t_offset: float, step=0.01):
    """Upward crossings of ``y1 = 0`` with chart position and velocity within ``window`` of ``(0, e1)``."""
    t = np.arange(0.0, arc.duration, step)
    if t[-1] < arc.duration:
        t = np.append(t, arc.duration)
    y = chart.to_chart(arc.position(t))
    s = y[:, 0]
    idx = np.nonzero((s[:-1] < 0) & (s[1:] >= 0) & (np.abs(s[:-1]) < 0.1) & (np.abs(s[1:]) < 0.1)
                     & (np.linalg.norm(y[:-1, 1:], axis=1) < 2 * window + 0.05))[0]
    e1 = np.zeros(chart.L.shape[0])
    e1[0] = 1.0
    hits = []
    for i in idx:
        tc = brentq(lambda u: chart.to_chart(arc.position(u))[0], t[i], t[i + 1], xtol=1e-15, rtol=1e-15)
        x = arc.position(tc)
        v = arc.velocity(tc)
        yc, wc = chart.to_chart(x), chart.L @ v
        if np.linalg.norm(yc[1:]) < window and np.linalg.norm(wc - e1) < window:
            yc[0] = 0.0
            hits.append(SectionHit(t_offset + tc, x, v, yc, wc))
    return hits


def scan_section(metric: MetricField, seed: TangentPoint, chart: ChartMap, max_time: float, window: float,
                 tol=1e-11, chunk=100.0):
    """Integrate the seed orbit up to ``max_time`` and collect its section hits near the seed."""
    pp = PhasePoint(seed.x, metric.G(seed.x) @ seed.v)
    hits, t0 = [], 0.0
    while t0 < max_time:
        span = min(chunk, max_time - t0)
        arc = integrate(metric, None, pp, span, tol)
        hits.extend(_arc_hits(arc, chart, window, t0))
        pp = arc.final()
        t0 += span
    return hits


def find_recurrence(metric: MetricField, seed: TangentPoint, max_time: float, target_gap: float,
                    chart: ChartMap | None = None, window: float | None = None, min_return=1.0,
                    tol=1e-11) -> RecurrencePair:
    """Best-gap pair of section hits of the seed orbit, at least ``min_return`` apart in time."""
    if chart is None:
        chart, _ = align_chart(metric, seed)
    window = chart.tau / 4 if window is None else window
    hits = [SectionHit(0.0, np.array(seed.x, float), np.array(seed.v, float),
                       np.zeros(metric.dim), chart.L @ seed.v)]
    hits[0].y = chart.to_chart(seed.x)
    hits += scan_section(metric, seed, chart, max_time, window, tol)
    if len(hits) < 2:
        raise RecurrenceNotFoundError(f"no return to the section within time {max_time}", float("inf"))
    Z = np.array([np.concatenate([h.y, h.w]) for h in hits])
    T = np.array([h.time for h in hits])
    best = (np.inf, None, None)
    for i in range(len(hits) - 1):
        ok = T[i + 1:] - T[i] >= min_return
        if not np.any(ok):
            continue
        d = np.linalg.norm(Z[i + 1:] - Z[i], axis=1)
        d[~ok] = np.inf
        j = int(np.argmin(d))
        if d[j] < best[0]:
            best = (float(d[j]), i, i + 1 + j)
    gap, i, j = best
    if i is None or gap > target_gap:
        raise RecurrenceNotFoundError(f"best section gap {gap:.3g} exceeds target {target_gap:.3g}", gap)
    a, b = hits[i], hits[j]
    return RecurrencePair(TangentPoint(a.x, a.v), TangentPoint(b.x, b.v), b.time - a.time, gap, a.time)


def _unit_w(metric: MetricField, y, w_lat):
    """Chart velocity ``(w1, w_lat)`` of unit length with ``w1 > 0``."""
    G = metric.G(y)
    a = G[0, 0]
    b = 2.0 * G[0, 1:] @ w_lat
    c = w_lat @ G[1:, 1:] @ w_lat - 1.0
    disc = b * b - 4 * a * c
    if disc < 0:
        raise GeometryError("lateral velocity too large for a unit vector")
    return np.concatenate([[(-b + np.sqrt(disc)) / (2 * a)], w_lat])


def _return_hit(metric: MetricField, chart: ChartMap, aligned, z, T_guess, tol):
    n = metric.dim
    y = np.concatenate([[0.0], z[: n - 1]])
    w = _unit_w(aligned, y, z[n - 1:])
    tp = chart.tangent_from_chart(TangentPoint(y, w))
    pp = PhasePoint(tp.x, metric.G(tp.x) @ tp.v)
    arc = integrate(metric, None, pp, T_guess + 0.2, tol)
    t = np.linspace(T_guess - 0.2, T_guess + 0.2, 81)
    s = chart.to_chart(arc.position(t))[:, 0]
    idx = np.nonzero((s[:-1] < 0) & (s[1:] >= 0) & (np.abs(s[:-1]) < 0.1))[0]
    if idx.size == 0:
        raise RecurrenceNotFoundError("return crossing lost during refinement", float("inf"))
    i = idx[np.argmin(np.abs(t[idx] - T_guess))]
    tc = brentq(lambda u: chart.to_chart(arc.position(u))[0], t[i], t[i + 1], xtol=1e-15, rtol=1e-15)
    x, v = arc.position(tc), arc.velocity(tc)
    yc, wc = chart.to_chart(x), chart.L @ v
    zr = np.concatenate([yc[1:], wc[1:]])
    return tp, TangentPoint(x, v), tc, zr, np.concatenate([y, w]), np.concatenate([[0.0], yc[1:], wc])


def refine_recurrence(metric: MetricField, chart: ChartMap, pair: RecurrencePair, target_gap: float,
                      tol=1e-12, max_iter=12, fd_step=1e-8) -> RecurrencePair:
    """Move the first point along the section until its return gap drops below ``target_gap``.

    Newton steps on the section coordinates are shortened so the predicted gap is
    about half the target: the pair stays a genuine near-recurrence.
    """
    aligned = LinearChartMetric(metric, chart.origin, chart.L)
    n = metric.dim
    c = chart.tangent_to_chart(pair.first)
    z = np.concatenate([c.x[1:], c.v[1:]])
    T = pair.return_time
    for it in range(max_iter):
        first, second, T, zr, full0, full1 = _return_hit(metric, chart, aligned, z, T, tol)
        gap = float(np.linalg.norm(full1 - full0))
        log.info("refine %d: gap %.3e at return time %.6f", it, gap, T)
        if gap <= target_gap:
            return RecurrencePair(first, second, T, gap, pair.first_time, True)
        F = zr - z
        J = np.empty((F.size, F.size))
        for k in range(F.size):
            dz = np.zeros_like(z)
            dz[k] = fd_step
            J[:, k] = (_return_hit(metric, chart, aligned, z + dz, T, tol)[3] - (z + dz) - F) / fd_step
        step = np.linalg.lstsq(J, -F, rcond=None)[0]
        frac = 1.0 - 0.5 * target_gap / gap
        z = z + frac * step
    raise RecurrenceNotFoundError(f"refinement stalled at gap {gap:.3g} (target {target_gap:.3g})", gap)


# ------------------------------------------------------------- obstacles

@dataclass
class ObstacleCollection:
    obstacles: ObstacleSet
    intervals: list
    rho: float

    def to_dict(self):
        return {"count": len(self.obstacles), "intervals": [list(map(float, iv)) for iv in self.intervals],
                "rho": self.rho}


def _runs(mask):
    idx = np.nonzero(mask)[0]
    if idx.size == 0:
        return []
    cuts = np.nonzero(np.diff(idx) > 1)[0]
    starts = np.concatenate([[idx[0]], idx[cuts + 1]])
    ends = np.concatenate([idx[cuts], [idx[-1]]])
    return list(zip(starts, ends))


def collect_obstacles(metric: MetricField, pair: RecurrencePair, chart: ChartMap, tau: float, rho: float,
                      tol=1e-12, max_adjust=10) -> ObstacleCollection:
    """Orbit pieces over ``[5 tau, T - 5 tau]`` through the tube of radius ``rho / 2``, as chart geodesics.

    Each piece is extended until it leaves the box enlarged by ``rho / 4``
    lengthwise and to radius ``5 rho / 4``; ``rho`` shrinks when an arc turns
    by ``1/8`` or more.
    """
    aligned = LinearChartMetric(metric, chart.origin, chart.L)
    x_end = float(_chart_geodesic(aligned, tau).final().x[0])
    T = pair.return_time
    lo, hi = 5 * tau, T - 5 * tau
    if hi <= lo:
        return ObstacleCollection(ObstacleSet([], TubeRegion(0.0, x_end, rho, np.zeros(metric.dim - 1))), [], rho)
    pp = PhasePoint(pair.first.x, metric.G(pair.first.x) @ pair.first.v)
    arc = integrate(metric, None, pp, T, tol)
    for _ in range(max_adjust):
        step = min(rho / 8, tau / 10)
        t = np.arange(lo - 2 * tau, hi + 2 * tau, step)
        t = t[(t >= 0) & (t <= T)]
        y = chart.to_chart(arc.position(t))
        lat = np.linalg.norm(y[:, 1:], axis=1)
        inner = (y[:, 0] >= 0) & (y[:, 0] <= x_end) & (lat < rho / 2) & (t >= lo) & (t <= hi)
        outer = (y[:, 0] >= -rho / 4) & (y[:, 0] <= x_end + rho / 4) & (lat < 1.25 * rho)
        intervals = []
        for a, b in _runs(inner):
            while a > 0 and outer[a]:
                a -= 1
            while b < t.size - 1 and outer[b]:
                b += 1
            if intervals and t[a] <= intervals[-1][1]:
                intervals[-1] = (intervals[-1][0], float(t[b]))
            else:
                intervals.append((float(t[a]), float(t[b])))
        arcs = []
        for a, b in intervals:
            x, p = arc.state(a)
            start = PhasePoint(chart.to_chart(x), chart.momentum_to_chart(p))
            arcs.append(integrate(aligned, None, start, b - a, tol=1e-13))
        obs = ObstacleSet(arcs, TubeRegion(0.0, x_end, rho, np.zeros(metric.dim - 1)))
        try:
            obs.validate(rho)
            return ObstacleCollection(obs, intervals, rho)
        except PreconditionError as exc:
            log.info("obstacle collection rejected at rho = %.3g: %s", rho, exc)
            rho *= 0.75
    raise GeometryError(f"obstacle collection failed after {max_adjust} adjustments of rho")


# ------------------------------------------------------ torus pull-back

class TorusFactor(ConformalFactor):
    """Chart factor pulled back to the torus: ``F(x) = f(L wrap(x - origin))``."""

    def __init__(self, inner: ConformalFactor, chart: ChartMap):
        self.inner = inner
        self.chart = chart
        self.dim = chart.L.shape[0]
        self.support = None

    def in_support_box(self, x) -> bool:
        return self.inner.in_support_box(self.chart.to_chart(x))

    def value_and_gradient(self, x):
        y = self.chart.to_chart(x)
        if not self.inner.in_support_box(y):
            return 0.0, np.zeros(self.dim)
        val, g = self.inner.value_and_gradient(y)
        return val, self.chart.L.T @ g


@dataclass
class PerturbedMetric:
    """``exp(F) g`` with ``F`` a :class:`TorusFactor`."""

    base: MetricField
    factor: ConformalFactor
    chart: ChartMap

    def describe(self):
        return {"base": self.base.describe(), "conformal_factor": type(self.factor).__name__,
                "chart": self.chart.to_dict()}


# ----------------------------------------------------------- closing run

@dataclass
class ClosingConfig:
    epsilon: float = 0.05
    tau: float = DEFAULT_TAU
    rho: float | None = None
    max_time: float = 5e3
    recurrence_gap: float = 1e-2
    closure_tol: float = 1e-5
    safety: float = 0.3
    calibration_separation: float = 1e-4
    flow_tol: float = 1e-12
    period_window: float = 1e-3
    max_budget_rounds: int = 3

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise PreconditionError(f"unknown close options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ClosingReport:
    recurrence: dict
    gap: float
    period: float
    residuals: dict
    f_c1_norm: float
    f_c0_norm: float
    epsilon: float
    obstacles: dict
    displacement: float
    closed: bool
    tau: float
    rho: float
    tau_tilde: float
    connect: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def to_dict(self, with_timing=True):
        d = asdict(self)
        if not with_timing:
            d.pop("timing")
        return d

    def to_json(self, with_timing=True) -> str:
        return json.dumps(self.to_dict(with_timing), sort_keys=True, default=_json_default)

    @classmethod
    def from_json(cls, text: str) -> "ClosingReport":
        return cls(**json.loads(text))


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _stage(name, func, *args, **kwargs):
    try:
        return func(*args, **kwargs)
    except StageError:
        raise
    except GeocloseError as exc:
        raise StageError(name, exc) from exc


def phase_distance(a: TangentPoint, b: TangentPoint, periodic=True) -> float:
    d = np.asarray(a.x, float) - np.asarray(b.x, float)
    if periodic:
        d = d - np.round(d)
    return float(np.linalg.norm(np.concatenate([d, np.asarray(a.v) - np.asarray(b.v)])))


def calibrate_constant(aligned: MetricField, tau: float, rho: float, separation: float) -> float:
    """``||f||_C1 / separation`` for a lateral offset of the chart origin."""
    n = aligned.dim
    e1 = np.zeros(n)
    e1[0] = 1.0
    y = np.zeros(n)
    y[1] = separation
    G = aligned.G(y)
    start = TangentPoint(y, e1 / np.sqrt(e1 @ G @ e1))
    target = TangentPoint(np.zeros(n), e1 / np.sqrt(e1 @ aligned.G(np.zeros(n)) @ e1))
    res = connect(aligned, start, target, tau, rho)
    return res.report["f_c1_norm"] / max(res.report["separation"], 1e-300)


def _flow_windows(metric, factor, start: TangentPoint, duration, windows, fine_step, tol):
    """Integrate ``exp(F) g`` with a step cap inside the listed time windows; returns the arcs."""
    pp = PhasePoint(start.x, metric.G(start.x) @ start.v)
    cuts = sorted({0.0, duration, *[min(max(t, 0.0), duration) for w in windows for t in w]})
    arcs, t0 = [], 0.0
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b - a <= 0:
            continue
        fine = any(w[0] <= a and b <= w[1] for w in windows)
        arc = integrate(metric, factor, pp, b - a, tol, max_step=fine_step if fine else np.inf)
        arcs.append((a, arc))
        pp = arc.final()
    return arcs


def _tangent(metric, factor, x, p):
    v = metric.Q(x) @ p
    return TangentPoint(x, np.exp(-factor.value(x)) * v)


def close_orbit(metric: MetricField, seed: TangentPoint, config: ClosingConfig | dict | None = None):
    """Closed geodesic of ``exp(F) g`` through a point near ``seed``.

    Returns ``(perturbed_metric, periodic_point, period, report)``; the report's
    ``closed`` flag says whether every check passed.
    """
    cfg = config if isinstance(config, ClosingConfig) else ClosingConfig.from_dict(config or {})
    timing = {}
    clock = time.perf_counter()

    def lap(name):
        nonlocal clock
        now = time.perf_counter()
        timing[name] = now - clock
        clock = now

    chart, aligned = _stage("align", align_chart, metric, seed, cfg.tau)
    tau = chart.tau
    rho = cfg.rho if cfg.rho is not None else tau / 2
    lap("align")
    pair = _stage("recurrence", find_recurrence, metric, seed, cfg.max_time, cfg.recurrence_gap, chart,
                  tol=cfg.flow_tol)
    lap("recurrence")

    periodic = chart.periodic
    if pair.gap < 1e-12:
        factor = ZeroFactor(metric.dim)
        torus_factor = TorusFactor(factor, chart)
        conn_report, tau_tilde, coll = {}, tau, None
        c1 = c0 = 0.0
    else:
        constant = _stage("calibrate", calibrate_constant, aligned, tau, rho, cfg.calibration_separation)
        target_gap = cfg.safety * cfg.epsilon / constant
        lap("calibrate")
        for round_ in range(cfg.max_budget_rounds):
            if pair.gap > target_gap:
                pair = _stage("refine", refine_recurrence, metric, chart, pair, target_gap, tol=cfg.flow_tol)
            lap(f"refine_{round_}")
            coll = _stage("obstacles", collect_obstacles, metric, pair, chart, tau, rho)
            lap(f"obstacles_{round_}")
            start = chart.tangent_to_chart(pair.second)
            target = chart.tangent_to_chart(pair.first)
            obs = coll.obstacles if len(coll.obstacles) else None
            result = _stage("connect", connect, aligned, start, target, tau, coll.rho, obstacles=obs)
            lap(f"connect_{round_}")
            torus_factor = TorusFactor(result.factor, chart)
            pts = tube_sample_points(result.data, result.report["mu"])
            norms = estimate_c1_norm(torus_factor, chart.from_chart(pts))
            c1, c0 = norms["c1"], norms["c0"]
            if c1 < cfg.epsilon:
                break
            log.info("factor norm %.3g over budget; tightening the recurrence", c1)
            target_gap = pair.gap * 0.5 * cfg.epsilon / c1
        factor = result.factor
        conn_report = result.report
        tau_tilde = result.tau_tilde

    # obstacles must stay geodesics of the perturbed chart metric
    obstacle_checks = []
    delay = 0.0
    if coll is not None:
        for arc in coll.obstacles.arcs:
            rep = verify_perturbed_geodesic(aligned, factor, beta_reparam(aligned, factor, arc),
                                            raise_on_failure=False)
            obstacle_checks.append(rep)
            delay += rep["duration"] - arc.duration
    lap("obstacle_checks")

    # periodicity of the perturbed flow
    periodic_point = pair.second
    period0 = pair.return_time + tau_tilde - tau + delay
    windows = [(0.0, tau_tilde + tau)]
    if coll is not None:
        windows += [(a + tau_tilde - tau - tau, b + tau_tilde - tau + tau) for a, b in coll.intervals]
    fine = max(conn_report.get("mu", tau), 1e-4) if conn_report else np.inf
    span = period0 + cfg.period_window
    arcs = _flow_windows(metric, torus_factor, periodic_point, span, windows, fine, cfg.flow_tol)
    t_last, last = arcs[-1]

    def state_at(t):
        for t0, a in reversed(arcs):
            if t >= t0:
                x, p = a.state(t - t0)
                return _tangent(metric, torus_factor, x, p)
        raise ValueError(t)

    def mismatch(t):
        return phase_distance(state_at(t), periodic_point, periodic)

    res = minimize_scalar(mismatch, bounds=(period0 - cfg.period_window, period0 + cfg.period_window),
                          method="bounded", options={"xatol": 1e-12})
    period = float(res.x)
    residual = mismatch(period)
    twice = _flow_windows(metric, torus_factor, state_at(period), period,
                          [(w0, w1) for w0, w1 in windows], fine, cfg.flow_tol)[-1][1].final()
    second_residual = phase_distance(_tangent(metric, torus_factor, twice.x, twice.p), periodic_point, periodic)
    lap("periodicity")

    displacement = phase_distance(periodic_point, seed, periodic)
    residuals = {
        "periodicity": residual,
        "second_period": second_residual,
        "endpoint": conn_report.get("endpoint_residual", 0.0),
        "obstacle_hausdorff": max([r["hausdorff"] for r in obstacle_checks], default=0.0),
        "obstacle_rhs": max([r["rhs_residual"] for r in obstacle_checks], default=0.0),
    }
    closed = (residual < cfg.closure_tol and second_residual < 10 * cfg.closure_tol and c1 < cfg.epsilon
              and displacement < cfg.epsilon and residuals["obstacle_hausdorff"] < 1e-6)
    report = ClosingReport(
        recurrence=pair.to_dict(), gap=pair.gap, period=period, residuals=residuals, f_c1_norm=c1,
        f_c0_norm=c0, epsilon=cfg.epsilon,
        obstacles=coll.to_dict() if coll is not None else {"count": 0, "intervals": [], "rho": rho},
        displacement=displacement, closed=bool(closed), tau=tau, rho=rho, tau_tilde=tau_tilde,
        connect=_plain(conn_report), timing=timing)
    return PerturbedMetric(metric, torus_factor, chart), periodic_point, period, report


def _plain(obj):
    return json.loads(json.dumps(obj, default=_json_default))


def require_closed(report: ClosingReport):
    if not report.closed:
        raise VerificationError("closed orbit not certified", report.to_dict())
    return report
