import numpy as np
import pytest

from geoclose.flow import flow_map, integrate
from geoclose.metric import (ConformalTrigMetric, DiagonalMetric, FlatMetric, PhasePoint, TangentPoint,
                             TrigPerturbedMetric, TubeRegion, unit_normalize)
from geoclose.obstacle import ObstacleSet


@pytest.fixture(scope="session")
def flat():
    return FlatMetric(2)


@pytest.fixture(scope="session")
def perturbed():
    return TrigPerturbedMetric(2, 0.05, seed=0)


def all_metrics():
    return [
        FlatMetric(2),
        FlatMetric(3),
        DiagonalMetric([4.0, 1.0]),
        DiagonalMetric([1.0, 2.0, 0.5], [0.2, -0.3, 0.1]),
        ConformalTrigMetric(2, [0.1], [[1.0, 0.0]]),
        ConformalTrigMetric(2, [0.1, 0.05], [[1.0, 1.0], [0.0, 2.0]], [0.3, 1.1]),
        TrigPerturbedMetric(2, 0.05, seed=0),
        TrigPerturbedMetric(3, 0.05, seed=3),
    ]


def obstacle_through(metric, point, angle, half=0.45):
    """Unit geodesic arc of length ``2 half`` whose midpoint is ``point``, heading along ``angle``."""
    d = np.zeros(metric.dim)
    d[0], d[1] = np.cos(angle), np.sin(angle)
    tp = unit_normalize(metric, TangentPoint(np.asarray(point, float), -d))
    back = flow_map(metric, None, tp, half)
    return integrate(metric, None, PhasePoint(back.x, -(metric.G(back.x) @ back.v)), 2 * half, 1e-13)


class ObstacleScenario:
    """Two transverse obstacle arcs through the unit-length tube on the perturbed torus."""

    tau = 1.0
    rho = 0.2

    def __init__(self):
        from geoclose.connector import connect

        m = TrigPerturbedMetric(2, 0.05, seed=0)
        self.metric = m
        self.start = unit_normalize(m, TangentPoint([0.0, 0.0], [1.0, 0.0]))
        self.target = unit_normalize(m, TangentPoint([0.005, 0.005], [1.0, 0.005]))
        x_end = float(flow_map(m, None, self.start, self.tau).x[0])
        self.obstacles = ObstacleSet(
            [obstacle_through(m, [0.45, 0.0], np.pi / 3), obstacle_through(m, [0.58, 0.0], -np.pi / 4)],
            tube=TubeRegion(0.0, x_end, self.rho, np.zeros(1)))
        self.result = connect(m, self.start, self.target, self.tau, self.rho, obstacles=self.obstacles)


@pytest.fixture(scope="session")
def obstacle_scenario():
    return ObstacleScenario()
