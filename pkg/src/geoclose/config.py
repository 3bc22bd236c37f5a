"""JSON run configuration with sections ``metric``, ``flow``, ``connect``, ``obstacle``, ``close`` and ``sweep``.

Every section has defaults; unknown sections or keys are rejected so typos
surface immediately instead of silently falling back to a default.
"""
from __future__ import annotations

import copy
import json
from pathlib import Path

import numpy as np

from .closer import ClosingConfig
from .errors import ConfigError, DomainError
from .flow import flow_map, integrate
from .metric import MetricField, PhasePoint, TangentPoint, make_metric, unit_normalize
from .obstacle import ObstacleSet
from .metric import TubeRegion

DEFAULTS = {
    "metric": {"family": "trig_perturbed", "dim": 2, "c1_size": 0.05, "seed": 0},
    "flow": {"tol": 1e-11, "duration": 10.0, "start": None, "samples": 1001},
    "connect": {
        "tau": 1.0, "rho": 0.2, "mu": None, "endpoint_tol": 1e-7, "angle_floor": 1e-3,
        "base_point": [0.3, 0.4], "direction": [1.0, 0.0],
        # phase-space direction of the start relative to the target: position part then velocity part
        "displacement": [0.6, 0.5, 0.0, 0.6], "separation": 1e-2,
        "start": None, "target": None,
    },
    "obstacle": {"arcs": []},
    "close": {"seed_point": None, **{k: v.default for k, v in ClosingConfig.__dataclass_fields__.items()}},
    "sweep": {"separations": [1e-2, 5e-3, 2.5e-3, 1.25e-3], "ratio_spread": 2.0},
}

OBSTACLE_KEYS = {"point", "angle", "half_length"}


def _merge(section: str, given) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"section '{section}' must be an object")
    out = copy.deepcopy(DEFAULTS[section])
    if section == "metric":
        # metric families take different keys; make_metric validates them
        if given.get("family", out["family"]) != out["family"]:
            out = {"family": given["family"], "dim": out["dim"]}
        out.update(given)
        return out
    unknown = sorted(set(given) - set(out))
    if unknown:
        raise ConfigError(f"unknown keys in section '{section}': {', '.join(unknown)}")
    out.update(given)
    return out


def parse_config(text: str, source: str = "<config>") -> dict:
    """Parse and validate JSON text; errors name the line or the offending key."""
    try:
        raw = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be an object")
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"{source}: unknown sections: {', '.join(unknown)}")
    try:
        cfg = {name: _merge(name, raw.get(name, {})) for name in DEFAULTS}
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    try:
        build_metric(cfg)
    except DomainError as exc:
        raise ConfigError(f"{source}: section 'metric': {exc}") from exc
    for arc in cfg["obstacle"]["arcs"]:
        extra = sorted(set(arc) - OBSTACLE_KEYS)
        if extra:
            raise ConfigError(f"{source}: unknown keys in an obstacle arc: {', '.join(extra)}")
    for key in ("tau", "rho", "separation"):
        if not cfg["connect"][key] > 0:
            raise ConfigError(f"{source}: connect.{key} must be positive")
    if not cfg["flow"]["duration"] > 0:
        raise ConfigError(f"{source}: flow.duration must be positive")
    try:
        ClosingConfig.from_dict({k: v for k, v in cfg["close"].items() if k != "seed_point"})
    except Exception as exc:
        raise ConfigError(f"{source}: section 'close': {exc}") from exc
    return cfg


def load_config(path) -> dict:
    if path is None:
        return parse_config("{}", "<defaults>")
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_config(text, str(p))


def build_metric(cfg: dict) -> MetricField:
    return make_metric(cfg["metric"])


def _tangent(metric, entry) -> TangentPoint:
    return unit_normalize(metric, TangentPoint(np.array(entry["x"], float), np.array(entry["v"], float)))


def connect_endpoints(metric: MetricField, section: dict, separation: float | None = None):
    """``(start, target)`` unit tangent vectors from the ``connect`` section."""
    if section["start"] is not None and section["target"] is not None and separation is None:
        return _tangent(metric, section["start"]), _tangent(metric, section["target"])
    n = metric.dim
    x0 = np.array(section["base_point"], float)
    v0 = np.array(section["direction"], float)
    d = np.array(section["displacement"], float)
    if x0.size != n or v0.size != n or d.size != 2 * n:
        raise ConfigError(f"connect: base_point/direction need {n} entries and displacement {2 * n}")
    s = section["separation"] if separation is None else separation
    d = d / np.linalg.norm(d)
    target = unit_normalize(metric, TangentPoint(x0, v0))
    start = unit_normalize(metric, TangentPoint(x0 + s * d[:n], target.v + s * d[n:]))
    return start, target


def build_obstacles(metric: MetricField, cfg: dict, target: TangentPoint, tau: float, rho: float):
    """Obstacle arcs through configured points; ``None`` when the list is empty."""
    arcs_cfg = cfg["obstacle"]["arcs"]
    if not arcs_cfg:
        return None
    x_end = flow_map(metric, None, target, tau).x[0]
    arcs = []
    for a in arcs_cfg:
        ang = float(a["angle"])
        half = float(a.get("half_length", 0.45))
        d = np.zeros(metric.dim)
        d[0], d[1] = np.cos(ang), np.sin(ang)
        tp = unit_normalize(metric, TangentPoint(np.array(a["point"], float), -d))
        back = flow_map(metric, None, tp, half)
        start = PhasePoint(back.x, -(metric.G(back.x) @ back.v))
        arcs.append(integrate(metric, None, start, 2 * half, 1e-13))
    tube = TubeRegion(float(target.x[0]), float(x_end), rho, target.x[1:].copy())
    return ObstacleSet(arcs, tube)


def closing_config(cfg: dict) -> ClosingConfig:
    return ClosingConfig.from_dict({k: v for k, v in cfg["close"].items() if k != "seed_point"})


def seed_point(metric: MetricField, cfg: dict, rng_seed: int) -> TangentPoint:
    """Configured seed, or a random unit vector drawn from ``rng_seed``."""
    entry = cfg["close"]["seed_point"]
    if entry is not None:
        return _tangent(metric, entry)
    rng = np.random.default_rng(rng_seed)
    x = rng.random(metric.dim)
    v = rng.normal(size=metric.dim)
    return unit_normalize(metric, TangentPoint(x, v))
