"""Keeping transverse geodesic arcs (obstacles) geodesic under the perturbation.

The connecting curve is first made transverse to the obstacles and free of
control wherever it meets them; the conformal factor is then composed with
three maps that freeze it near obstacle crossings, flatten it near contact
points and make it constant across each obstacle's normal hyperplanes.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .connector import ConnectingData, make_connecting_data, phase_separation
from .curves import PatchedCurve, ShiftedCurve
from .errors import ConstructionError, GeometryError, PreconditionError, TransversalizationError
from .flow import GeodesicArc
from .metric import ConformalFactor, MetricField, TubeRegion
from .profiles import WindowProfile, radial_cutoff

log = logging.getLogger(__name__)

CONTACT_TOL = 1e-10
NEAR_MISS = 1e-6
OSCILLATION_BOUND = 1.0 / 8.0


# ------------------------------------------------------------------ obstacles

class ObstacleSet:
    """Unit-speed geodesic arcs ``c_l : [0, L_l] -> R^n`` with nearest-point queries."""

    def __init__(self, arcs, tube: TubeRegion | None = None, samples=600):
        self.arcs: list[GeodesicArc] = list(arcs)
        self.tube = tube
        self._samples = []
        for arc in self.arcs:
            s = np.linspace(0.0, arc.duration, samples)
            self._samples.append((s, np.atleast_2d(arc.position(s))))

    def __len__(self):
        return len(self.arcs)

    def jet(self, l, s):
        """``(c, c', p, p')`` of obstacle ``l`` at parameters ``s``."""
        arc = self.arcs[l]
        s = np.atleast_1d(np.asarray(s, dtype=float))
        x, p = arc.state(s)
        x, p = np.atleast_2d(x), np.atleast_2d(p)
        metric = arc.metric
        v = np.einsum("mij,mj->mi", metric.Q(x), p)
        pd = 0.5 * np.einsum("mkij,mi,mj->mk", metric.dG(x), v, v)
        return x, v, p, pd

    def nearest_sample(self, x):
        """``(l, s, distance)`` of the closest stored sample point."""
        best = (None, None, np.inf)
        for l, (s, pts) in enumerate(self._samples):
            d2 = np.sum((pts - x) ** 2, axis=1)
            i = int(np.argmin(d2))
            if d2[i] < best[2] ** 2:
                best = (l, float(s[i]), float(np.sqrt(d2[i])))
        return best

    def distances_to(self, x):
        """Sampled distance from ``x`` to each obstacle."""
        return np.array([np.sqrt(np.min(np.sum((pts - x) ** 2, axis=1))) for _, pts in self._samples])

    def validate(self, rho: float, geodesics=()):
        """Endpoint, oscillation and non-coincidence conditions; raises on failure."""
        problems = []
        tube = self.tube
        for l, arc in enumerate(self.arcs):
            ends = np.atleast_2d(arc.position(np.array([0.0, arc.duration])))
            if tube is not None:
                region = TubeRegion(tube.t_min, tube.t_max, rho, tube.center)
                if region.contains(ends[0]) or region.contains(ends[1]):
                    problems.append(f"obstacle {l}: endpoint inside the tube of radius {rho:.4g}")
            vel = self.jet(l, np.linspace(0.0, arc.duration, 201))[1]
            osc = np.max(np.linalg.norm(vel[:, None, :] - vel[None, :, :], axis=2))
            if osc >= OSCILLATION_BOUND:
                problems.append(f"obstacle {l}: velocity oscillation {osc:.3g} >= 1/8")
            for g in geodesics:
                ts = np.linspace(0.0, g.duration, 201)
                gx, gp = g.state(ts)
                ox, op = arc.state(np.linspace(0.0, arc.duration, 201))
                d = np.min(np.linalg.norm(np.hstack([gx, gp])[:, None, :] - np.hstack([ox, op])[None, :, :], axis=2))
                if d < 1e-8:
                    problems.append(f"obstacle {l}: coincides with a connecting geodesic")
        if problems:
            raise PreconditionError("; ".join(problems))

    def describe(self):
        return [{"index": l, "length": arc.duration,
                 "start": arc.position(0.0).tolist(), "end": arc.position(arc.duration).tolist()}
                for l, arc in enumerate(self.arcs)]


# ------------------------------------------------------------------- contacts

@dataclass
class Contact:
    """Point where two curves meet (or nearly meet)."""

    t: float            # parameter on the first curve
    s: float            # parameter on the second curve
    point: np.ndarray
    distance: float
    angle: float        # angle between the tangents, in [0, pi/2]
    other: int = -1     # obstacle index of the second curve
    first: int = -1     # obstacle index of the first curve, if it is one

    def to_dict(self):
        return {"t": self.t, "s": self.s, "point": self.point.tolist(), "distance": self.distance,
                "angle": self.angle, "obstacle": self.other}


def _tangent_angle(a, b):
    c = abs(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
    return float(np.arccos(min(1.0, c)))


def polish_contact(jet_a, jet_b, t, s, span_a, span_b, iters=60):
    """Minimize ``|a(t) - b(s)|`` by Gauss-Newton from ``(t, s)``."""
    for _ in range(iters):
        xa, va = jet_a(t)
        xb, vb = jet_b(s)
        r = xa - xb
        J = np.column_stack([va, -vb])
        step = np.linalg.lstsq(J, -r, rcond=1e-14)[0]
        t_new = min(max(t + step[0], span_a[0]), span_a[1])
        s_new = min(max(s + step[1], span_b[0]), span_b[1])
        done = abs(t_new - t) < 1e-15 and abs(s_new - s) < 1e-15
        t, s = t_new, s_new
        if done:
            break
    xa, va = jet_a(t)
    xb, vb = jet_b(s)
    return t, s, xa, float(np.linalg.norm(xa - xb)), _tangent_angle(va, vb)


def find_contacts(jet_a, span_a, jet_b, span_b, pts_a, ts_a, pts_b, ts_b, threshold=None, other=-1):
    """Intersections and near-contacts of two sampled curves.

    Local minima of the sampled distance are polished; anything closer than
    ``NEAR_MISS`` after polishing is returned.
    """
    seg_a = np.max(np.linalg.norm(np.diff(pts_a, axis=0), axis=1))
    seg_b = np.max(np.linalg.norm(np.diff(pts_b, axis=0), axis=1))
    threshold = 2.0 * (seg_a + seg_b) if threshold is None else threshold
    d2 = np.sum((pts_a[:, None, :] - pts_b[None, :, :]) ** 2, axis=2)
    j_best = np.argmin(d2, axis=1)
    dist = np.sqrt(d2[np.arange(len(pts_a)), j_best])
    out: list[Contact] = []
    for i in range(len(pts_a)):
        left = dist[i - 1] if i > 0 else np.inf
        right = dist[i + 1] if i + 1 < len(pts_a) else np.inf
        if dist[i] > threshold or dist[i] > left or dist[i] > right:
            continue
        t, s, x, d, ang = polish_contact(jet_a, jet_b, ts_a[i], ts_b[j_best[i]], span_a, span_b)
        if d >= NEAR_MISS:
            continue
        if any(abs(c.t - t) < 1e-9 and abs(c.s - s) < 1e-9 for c in out):
            continue
        out.append(Contact(float(t), float(s), x, d, ang, other))
    return sorted(out, key=lambda c: c.t)


def _data_jet(data: ConnectingData):
    def jet(t):
        x, xd, _ = data.jet(np.array([t]))
        return x[0], xd[0]
    return jet


def _obstacle_jet(obstacles: ObstacleSet, l):
    def jet(s):
        x, v, _, _ = obstacles.jet(l, np.array([s]))
        return x[0], v[0]
    return jet


def curve_obstacle_contacts(data: ConnectingData, obstacles: ObstacleSet, samples=801):
    """All contacts of ``x~([0, tau~])`` with the obstacles, ordered by time."""
    ts = np.linspace(0.0, data.tau_tilde, samples)
    pts = data.x_tilde(ts)
    out = []
    for l, arc in enumerate(obstacles.arcs):
        ss, opts = obstacles._samples[l]
        out += find_contacts(_data_jet(data), (0.0, data.tau_tilde), _obstacle_jet(obstacles, l),
                             (0.0, arc.duration), pts, ts, opts, ss, other=l)
    return sorted(out, key=lambda c: c.t)


def obstacle_crossings(obstacles: ObstacleSet):
    """Pairwise contacts between distinct obstacles."""
    out = []
    for k in range(len(obstacles)):
        for l in range(k + 1, len(obstacles)):
            sk, pk = obstacles._samples[k]
            sl, pl = obstacles._samples[l]
            for c in find_contacts(_obstacle_jet(obstacles, k), (0.0, obstacles.arcs[k].duration),
                                   _obstacle_jet(obstacles, l), (0.0, obstacles.arcs[l].duration),
                                   pk, sk, pl, sl, other=l):
                c.first = k
                out.append(c)
    return out


# ------------------------------------------------------------ transversality

SHIFT_WINDOW = (1 / 5, 1 / 4, 3 / 4, 4 / 5)
BOUND_GROWTH = 25.0


def _control_is_zero_near(data: ConnectingData, t, half_width):
    th = float(data.arclength.theta(t))
    grid = np.linspace(th - half_width, th + half_width, 41)
    grid = grid[(grid >= 0) & (grid <= data.tau)]
    return bool(np.all(data.curve.geodesic_mask(grid)))


def lemma4_diagnostics(data: ConnectingData, obstacles: ObstacleSet, angle_floor: float,
                       clearance: float) -> dict:
    """Transversality and control-free contact checks on the current curve."""
    contacts = curve_obstacle_contacts(data, obstacles)
    tangential = [c for c in contacts if c.distance > CONTACT_TOL or c.angle <= angle_floor]
    controlled = [c for c in contacts if not _control_is_zero_near(data, c.t, clearance)]
    return {"contacts": contacts, "tangential": tangential, "controlled": controlled,
            "ok": not tangential and not controlled}


def _bound_ratios(data: ConnectingData, sep: float):
    t = np.linspace(0.0, data.tau_tilde, 401)
    umax = float(np.max(np.linalg.norm(data.u_tilde(t), axis=1)))
    return abs(data.tau_tilde - data.tau) / sep, umax / sep


def transversalize(metric: MetricField, connecting: ConnectingData, obstacles: ObstacleSet,
                   rng_seed=0, angle_floor=1e-3, rho=None, max_tries=12,
                   patch_radius=None) -> ConnectingData:
    """Make the connecting curve transverse to the obstacles, with zero control at every contact.

    Tangential contacts are removed by shifting the middle of the blend by a
    small random vector (first component zero); contacts inside the control
    support are then covered by local geodesic patches.
    """
    if obstacles is None or len(obstacles) == 0:
        return connecting
    tau = connecting.tau
    lam0 = tau / 20.0 if patch_radius is None else float(patch_radius)
    diag = lemma4_diagnostics(connecting, obstacles, angle_floor, lam0 / 4)
    if diag["ok"]:
        return connecting
    sep = phase_separation(connecting.start, connecting.target)
    tau_ratio0, u_ratio0 = _bound_ratios(connecting, sep)
    history = list(connecting.history)
    data = connecting
    rng = np.random.default_rng(rng_seed)
    n = metric.dim
    if diag["tangential"]:
        window = WindowProfile(*(w * tau for w in SHIFT_WINDOW))
        for k in range(max_tries):
            d = rng.normal(size=n - 1)
            omega = np.concatenate([[0.0], 0.5 * sep * 2.0**-k * d / np.linalg.norm(d)])
            cand = make_connecting_data(metric, ShiftedCurve(connecting.curve, omega, window),
                                        connecting.start, connecting.target, tau, history)
            cd = curve_obstacle_contacts(cand, obstacles)
            if all(c.distance <= CONTACT_TOL and c.angle > angle_floor for c in cd):
                data = cand
                history.append({"step": "shift", "omega": omega.tolist(), "try": k})
                break
        else:
            raise TransversalizationError("no admissible shift found", {"tries": max_tries})
    base = data
    lam = lam0
    for k in range(max_tries):
        contacts = curve_obstacle_contacts(base, obstacles)
        thetas = sorted(float(base.arclength.theta(c.t)) for c in contacts)
        curve = base.curve
        patches = []
        for i, th in enumerate(thetas):
            gaps = [abs(th - o) for j, o in enumerate(thetas) if j != i]
            r = min([lam] + [0.45 * g for g in gaps] + [0.9 * th, 0.9 * (tau - th)])
            grid = np.linspace(th - r, th + r, 41)
            if np.all(curve.geodesic_mask(grid[(grid >= 0) & (grid <= tau)])):
                continue
            curve = PatchedCurve(metric, curve, th, r)
            patches.append({"center": th, "radius": r})
        cand = make_connecting_data(metric, curve, base.start, base.target, tau,
                                    history + [{"step": "patch", "patches": patches}])
        min_r = min([p["radius"] for p in patches], default=lam)
        diag = lemma4_diagnostics(cand, obstacles, angle_floor, min_r / 4)
        tau_ratio, u_ratio = _bound_ratios(cand, sep)
        bounded = (tau_ratio <= BOUND_GROWTH * max(tau_ratio0, 1e-3)
                   and u_ratio <= BOUND_GROWTH * max(u_ratio0, 1e-3))
        if diag["ok"] and bounded:
            cand.history[-1].update({"tau_ratio": tau_ratio, "control_ratio": u_ratio,
                                     "contacts": [c.to_dict() for c in diag["contacts"]]})
            return cand
        log.info("patch radius %.3g rejected (ok=%s, bounded=%s)", lam, diag["ok"], bounded)
        lam /= 2.0
    raise TransversalizationError("local geodesic patches did not verify",
                                  {"last_radius": lam, "tangential": len(diag["tangential"]),
                                   "controlled": len(diag["controlled"])})


def patch_radii(data: ConnectingData):
    for h in data.history:
        if h.get("step") == "patch":
            return [p["radius"] for p in h["patches"]]
    return []


# ------------------------------------------------------------------ geometry

@dataclass
class IntersectionGeometry:
    """Crossings among obstacles, contacts with the curve and the clearance radii."""

    cross_points: list
    cross_angles: list
    touch_times: list
    touch_points: list
    touch_angles: list
    mu_freeze: float
    mu_snap: float
    mu_project: float
    delta: float
    rho: float
    tube: TubeRegion
    extras: dict = field(default_factory=dict)

    @property
    def mu(self) -> float:
        return self.mu_snap

    def to_dict(self):
        return {"cross_points": [p.tolist() for p in self.cross_points], "cross_angles": self.cross_angles,
                "touch_times": self.touch_times, "touch_points": [p.tolist() for p in self.touch_points],
                "touch_angles": self.touch_angles, "mu": self.mu, "mu_freeze": self.mu_freeze,
                "mu_snap": self.mu_snap, "mu_project": self.mu_project, "delta": self.delta,
                **self.extras}


def reference_tube(data: ConnectingData, obstacles: ObstacleSet, rho: float) -> TubeRegion:
    if obstacles.tube is not None:
        t = obstacles.tube
        return TubeRegion(t.t_min, t.t_max, rho, t.center)
    x = data.x_tilde(np.array([0.0, data.tau_tilde]))
    return TubeRegion(float(x[0, 0]), float(x[1, 0]), rho, np.zeros(data.metric.dim - 1))


def _lateral_gap(tube: TubeRegion, x):
    return abs(tube.radius - float(np.linalg.norm(np.asarray(x)[1:] - tube.center)))


def _support_points(data: ConnectingData, samples=1601):
    t = np.linspace(0.0, data.tau_tilde, samples)
    th = np.atleast_1d(data.arclength.theta(t))
    active = ~data.curve.geodesic_mask(th)
    return t[active], data.x_tilde(t[active]) if np.any(active) else np.zeros((0, data.metric.dim))


def _min_dist(a, b):
    if len(a) == 0 or len(b) == 0:
        return np.inf
    return float(np.sqrt(np.min(np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2))))


def intersection_geometry(connecting: ConnectingData, obstacles: ObstacleSet, rho: float,
                          distinct_tol=1e-6) -> IntersectionGeometry:
    """Locate obstacle crossings and curve contacts and pick clearance radii for the factor chain."""
    tube = reference_tube(connecting, obstacles, rho)
    inner = tube.scaled(2.0 / 3.0)
    delta = rho / 6.0
    crossings = [c for c in obstacle_crossings(obstacles) if inner.contains(c.point)]
    touches = curve_obstacle_contacts(connecting, obstacles)
    pts = [c.point for c in crossings]
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            if np.linalg.norm(pts[i] - pts[j]) < distinct_tol:
                raise GeometryError("obstacle crossings numerically indistinct; use a smaller rho")
    tpts = [c.point for c in touches]
    for i in range(len(tpts)):
        for j in range(i + 1, len(tpts)):
            if np.linalg.norm(tpts[i] - tpts[j]) < distinct_tol:
                raise GeometryError("curve contacts numerically indistinct; use a smaller rho")
    _, supp = _support_points(connecting)
    all_obst = np.vstack([p for _, p in obstacles._samples]) if len(obstacles) else np.zeros((0, connecting.metric.dim))

    # freeze radius around obstacle crossings
    if pts:
        cands = []
        for i, p in enumerate(pts):
            others = [np.linalg.norm(p - q) / 4 for j, q in enumerate(pts) if j != i]
            cands += others + [_min_dist(p[None, :], supp) / 2, _lateral_gap(inner, p) / 2]
        mu_f = 0.5 * min(cands)
    else:
        mu_f = np.inf
    # snap radius around curve contacts
    if tpts:
        cands = []
        half = tube.scaled(0.5)
        for i, p in enumerate(tpts):
            cands += [np.linalg.norm(p - q) / 10 for j, q in enumerate(tpts) if j != i]
            cands += [_lateral_gap(half, p) / 5, _min_dist(p[None, :], supp) / 5]
        mu_s = 0.5 * min(cands)
    else:
        mu_s = np.inf
    # projection radius around the obstacles
    cands = [delta / 2]
    if pts:
        theta_min = min(c.angle for c in crossings)
        cands.append(mu_f * np.sin(theta_min / 2) / 3)
    if tpts:
        cands.append(mu_s / 4)
    for k in range(len(obstacles)):
        for l in range(k + 1, len(obstacles)):
            a = obstacles._samples[k][1]
            b = obstacles._samples[l][1]
            if pts:
                far = lambda q: np.all(np.linalg.norm(q[:, None, :] - np.array(pts)[None], axis=2) > mu_f / 2, axis=1)
                a, b = a[far(a)], b[far(b)]
            cands.append(_min_dist(a, b) / 3)
    cands.append(_min_dist(supp, all_obst) / 2)
    mu_p = 0.5 * min(cands)
    if not np.isfinite(mu_p) or mu_p <= 0:
        raise GeometryError(f"no admissible projection radius (candidates {cands})")
    if tpts and mu_s < 1e-9:
        raise GeometryError("contact clearance collapsed; use a smaller rho")
    return IntersectionGeometry(pts, [c.angle for c in crossings], [c.t for c in touches], tpts,
                                [c.angle for c in touches], float(mu_f), float(mu_s), float(mu_p),
                                delta, rho, tube)


# ------------------------------------------------------------- factor chain

class MappedFactor(ConformalFactor):
    """``f(x) = inner(M(x))`` for a smooth map ``M`` equal to the identity away from a set."""

    step = "map"

    def __init__(self, inner: ConformalFactor, margin: float):
        self.inner = inner
        self.dim = inner.dim
        s = inner.support
        self.support = None if s is None else TubeRegion(s.t_min - margin, s.t_max + margin,
                                                         s.radius + margin, s.center)
        self.c1_norm_estimate = float("nan")

    def transform(self, x):
        """``(M(x), DM(x))`` or ``None`` where ``M`` is the identity."""
        raise NotImplementedError

    def value_and_gradient(self, x):
        x = np.asarray(x, dtype=float)
        if not self.in_support_box(x):
            return 0.0, np.zeros(self.dim)
        tr = self.transform(x)
        if tr is None:
            return self.inner.value_and_gradient(x)
        y, J = tr
        f, g = self.inner.value_and_gradient(y)
        return f, J.T @ g


class FreezeFactor(MappedFactor):
    """Constant near each obstacle crossing: ``M(x) = x + cutoff(|x - x_k| / 3 mu)(x_k - x)``."""

    step = "freeze"

    def __init__(self, inner, points, mu):
        super().__init__(inner, 0.0)
        self.points = [np.asarray(p, dtype=float) for p in points]
        self.mu = float(mu)

    def transform(self, x):
        for p in self.points:
            d = x - p
            r = float(np.linalg.norm(d))
            if r >= 2 * self.mu:
                continue
            s = r / (3 * self.mu)
            psi = float(radial_cutoff(s))
            dpsi = float(radial_cutoff(s, 1)) / (3 * self.mu)
            grad_psi = dpsi * d / r if r > 0 else np.zeros_like(x)
            y = x + psi * (p - x)
            J = (1 - psi) * np.eye(x.size) + np.outer(p - x, grad_psi)
            return y, J
        return None


class SnapFactor(MappedFactor):
    """Pulls points near each curve contact onto the curve along the first axis."""

    step = "snap"

    def __init__(self, inner, data: ConnectingData, times, mu):
        super().__init__(inner, 0.0)
        self.data = data
        self.times = [float(t) for t in times]
        self.centers = [data.x_tilde(np.array([t]))[0] for t in self.times]
        self.mu = float(mu)

    def _vertical_foot(self, x, t0):
        t = t0
        for _ in range(30):
            c, cd, _ = self.data.jet(np.array([t]))
            step = (c[0, 0] - x[0]) / cd[0, 0]
            t -= step
            if abs(step) < 1e-15:
                break
        c, cd, _ = self.data.jet(np.array([t]))
        return c[0], cd[0]

    def transform(self, x):
        for t_q, c_q in zip(self.times, self.centers):
            d = x - c_q
            r = float(np.linalg.norm(d))
            if r >= self.mu:
                continue
            s = 2 * r / (3 * self.mu)
            h = float(radial_cutoff(s))
            dh = float(radial_cutoff(s, 1)) * 2 / (3 * self.mu)
            grad_h = dh * d / r if r > 0 else np.zeros_like(x)
            foot, vel = self._vertical_foot(x, t_q)
            e1 = np.zeros(x.size)
            e1[0] = 1.0
            Dfoot = np.outer(vel, e1) / vel[0]
            n = x.size
            y = x + h * (foot - x)
            J = np.eye(n) + np.outer(foot - x, grad_h) + h * (Dfoot - np.eye(n))
            return y, J
        return None


class ProjectFactor(MappedFactor):
    """Makes the factor constant along the metric-normal hyperplanes of each obstacle."""

    step = "project"

    def __init__(self, inner, obstacles: ObstacleSet, geometry: IntersectionGeometry):
        mu = geometry.mu_project
        super().__init__(inner, mu)
        self.obstacles = obstacles
        self.mu = float(mu)
        self.geometry = geometry
        self.region = TubeRegion(geometry.tube.t_min, geometry.tube.t_max,
                                 2 * geometry.rho / 3 + geometry.delta, geometry.tube.center)
        self._spacing = max(np.max(np.linalg.norm(np.diff(p, axis=0), axis=1)) for _, p in obstacles._samples)

    def foot(self, x, l, s0):
        """Parameter ``s`` with ``<x - c(s), p(s)> = 0`` near ``s0``."""
        arc = self.obstacles.arcs[l]
        s = s0
        for _ in range(30):
            c, v, p, pd = (a[0] for a in self.obstacles.jet(l, np.array([s])))
            F = (x - c) @ p
            dF = -(v @ p) + (x - c) @ pd
            step = F / dF
            s = s - step
            if abs(step) < 1e-15:
                break
        if s < 0 or s > arc.duration:
            return None
        c, v, p, pd = (a[0] for a in self.obstacles.jet(l, np.array([s])))
        return s, c, v, p, pd

    def _excluded(self, c):
        g = self.geometry
        if not self.region.contains(c):
            return True
        if any(np.linalg.norm(c - p) < g.mu_freeze / 2 for p in g.cross_points):
            return True
        return any(np.linalg.norm(c - p) < g.mu_snap / 4 for p in g.touch_points)

    def transform(self, x):
        dists = self.obstacles.distances_to(x)
        l = int(np.argmin(dists))
        if dists[l] >= self.mu + self._spacing:
            return None
        l_, s0, _ = self.obstacles.nearest_sample(x)
        res = self.foot(x, l_, s0)
        if res is None:
            return None
        s, c, v, p, pd = res
        d_vec = x - c
        d = float(np.linalg.norm(d_vec))
        if d >= self.mu or self._excluded(c):
            return None
        n = x.size
        grad_s = p / (v @ p - d_vec @ pd)
        Dfoot = np.outer(v, grad_s)
        u = 2 * d / (3 * self.mu)
        psi = float(radial_cutoff(u))
        if d > 0:
            grad_d = (np.eye(n) - Dfoot).T @ d_vec / d
            grad_psi = float(radial_cutoff(u, 1)) * 2 / (3 * self.mu) * grad_d
        else:
            grad_psi = np.zeros(n)
        y = x + psi * (c - x)
        J = np.eye(n) + np.outer(c - x, grad_psi) + psi * (Dfoot - np.eye(n))
        return y, J


def build_obstacle_factor(metric: MetricField, connecting: ConnectingData, obstacles: ObstacleSet,
                          geometry: IntersectionGeometry, rho: float, base: ConformalFactor | None = None,
                          mu: float | None = None, check=True) -> ConformalFactor:
    """Compose the control bump with the freeze, snap and projection maps."""
    from .connector import control_bump

    f1 = base if base is not None else control_bump(connecting, rho / 8 if mu is None else mu)
    if obstacles is None or len(obstacles) == 0:
        return f1
    f2 = FreezeFactor(f1, geometry.cross_points, geometry.mu_freeze) if geometry.cross_points else f1
    f3 = SnapFactor(f2, connecting, geometry.touch_times, geometry.mu_snap) if geometry.touch_times else f2
    f = ProjectFactor(f3, obstacles, geometry)
    if check:
        check_factor_chain(connecting, obstacles, geometry, [f1, f2, f3, f])
    return f


def check_factor_chain(data: ConnectingData, obstacles: ObstacleSet, geometry: IntersectionGeometry,
                       chain, samples=201, tol=1e-7):
    """Step-tagged numerical checks of the chain properties."""
    f1, f2, f3, f = chain
    t = np.linspace(0.0, data.tau_tilde, samples)
    x = data.x_tilde(t)
    u = data.u_tilde(t)
    for name, g in (("curve gradient (step 1)", f1), ("curve gradient (step 4)", f)):
        err = max(float(np.max(np.abs(g.gradient(xi) - ui))) for xi, ui in zip(x, u))
        if err > tol:
            raise ConstructionError(name, f"gradient differs from control by {err:.3g} on the curve")
    for p in geometry.cross_points:
        if np.max(np.abs(f2.gradient(p))) > tol:
            raise ConstructionError("freeze (step 2)", f"nonzero gradient at crossing {p.tolist()}")
    for p in geometry.touch_points:
        if np.max(np.abs(f3.gradient(p))) > tol:
            raise ConstructionError("snap (step 3)", f"nonzero gradient at contact {p.tolist()}")
    for l, arc in enumerate(obstacles.arcs):
        s = np.linspace(0.0, arc.duration, samples)
        c, _, p, _ = obstacles.jet(l, s)
        for ci, pi in zip(c, p):
            g = f.gradient(ci)
            res = np.linalg.norm(g - (g @ pi) / (pi @ pi) * pi)
            if res > tol:
                raise ConstructionError("project (step 4)",
                                        f"gradient not colinear with momentum on obstacle {l}: {res:.3g}")
