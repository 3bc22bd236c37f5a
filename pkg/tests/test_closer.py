import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoclose.closer import (ChartMap, ClosingConfig, ClosingReport, RecurrencePair, TorusFactor, align_chart,
                             close_orbit, collect_obstacles, find_recurrence, phase_distance,
                             refine_recurrence, require_closed, rotation_to_e1)
from geoclose.errors import PreconditionError, RecurrenceNotFoundError, StageError, VerificationError
from geoclose.flow import flow_map
from geoclose.metric import (AnalyticFactor, FlatMetric, TangentPoint, TrigPerturbedMetric,
                             central_difference_gradient, unit_normalize)

FLAT = FlatMetric(2)
DIAGONAL = np.array([1.0, 1.0]) / np.sqrt(2)


def unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


# ------------------------------------------------------------------ chart

@given(st.lists(st.floats(-1, 1), min_size=2, max_size=3).filter(lambda v: np.linalg.norm(v) > 1e-3))
@settings(max_examples=40)
def test_rotation_to_e1(direction):
    R = rotation_to_e1(direction)
    n = len(direction)
    np.testing.assert_allclose(R @ unit(direction), np.eye(n)[0], atol=1e-12)
    np.testing.assert_allclose(R @ R.T, np.eye(n), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)


def test_rotation_of_minus_e1():
    R = rotation_to_e1([-1.0, 0.0, 0.0])
    np.testing.assert_allclose(R @ [-1.0, 0.0, 0.0], [1.0, 0.0, 0.0])
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_chart_wraps_and_round_trips():
    chart = ChartMap(np.array([0.9, 0.1]), rotation_to_e1([1.0, 1.0]), periodic=True)
    x = np.array([0.05, 0.15])
    y = chart.to_chart(x)
    # the offset across the seam is 0.15, not -0.85
    assert np.linalg.norm(y) == pytest.approx(np.hypot(0.15, 0.05), abs=1e-15)
    np.testing.assert_allclose(np.mod(chart.from_chart(y), 1.0), x, atol=1e-15)
    assert ChartMap.from_dict(json.loads(json.dumps(chart.to_dict()))).to_dict() == chart.to_dict()


def test_align_chart_identity_and_rotation():
    chart, aligned = align_chart(FLAT, TangentPoint([0.3, 0.4], [1.0, 0.0]))
    np.testing.assert_allclose(chart.L, np.eye(2), atol=1e-15)
    assert chart.tau == pytest.approx(1 / 40)
    chart, aligned = align_chart(FLAT, TangentPoint([0.3, 0.4], [0.0, 1.0]))
    np.testing.assert_allclose(chart.L @ [0.0, 1.0], [1.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(aligned.G(np.zeros(2)), np.eye(2), atol=1e-15)


def test_align_chart_perturbed_seed_becomes_unit_e1(perturbed):
    seed = unit_normalize(perturbed, TangentPoint([0.1, 0.2], [1.0, 0.6]))
    chart, aligned = align_chart(perturbed, seed)
    c = chart.tangent_to_chart(seed)
    np.testing.assert_allclose(c.x, 0.0, atol=1e-15)
    np.testing.assert_allclose(c.v, [1.0, 0.0], atol=1e-14)
    assert c.v @ aligned.G(c.x) @ c.v == pytest.approx(1.0, abs=1e-12)


def test_align_chart_rejects_non_unit():
    with pytest.raises(PreconditionError):
        align_chart(FLAT, TangentPoint([0.0, 0.0], [2.0, 0.0]))


# ------------------------------------------------------------- recurrence

def test_rational_slope_returns_exactly():
    pair = find_recurrence(FLAT, TangentPoint([0.2, 0.3], DIAGONAL), 3.0, 1e-6)
    assert pair.return_time == pytest.approx(np.sqrt(2), abs=1e-12)
    assert pair.gap < 1e-11


def test_golden_slope_recurrence():
    seed = TangentPoint([0.2, 0.3], unit([1.0, (np.sqrt(5) - 1) / 2]))
    pair = find_recurrence(FLAT, seed, 200.0, 1e-2)
    assert pair.gap < 1e-2
    assert pair.return_time >= 1.0
    # the second point really is the flow of the first
    moved = flow_map(FLAT, None, pair.first, pair.return_time)
    assert phase_distance(moved, pair.second) < 1e-10
    back = RecurrencePair.from_dict(json.loads(json.dumps(pair.to_dict())))
    assert back.gap == pair.gap and back.return_time == pair.return_time


def test_no_recurrence_raises():
    seed = TangentPoint([0.2, 0.3], unit([1.0, (np.sqrt(5) - 1) / 2]))
    with pytest.raises(RecurrenceNotFoundError):
        find_recurrence(FLAT, seed, 3.0, 1e-6)


def test_refine_recurrence_perturbed(perturbed):
    seed = unit_normalize(perturbed, TangentPoint([0.1, 0.2], [1.0, (np.sqrt(5) - 1) / 2]))
    chart, _ = align_chart(perturbed, seed)
    pair = find_recurrence(perturbed, seed, 300.0, 5e-2, chart)
    refined = refine_recurrence(perturbed, chart, pair, pair.gap / 10)
    assert refined.refined
    assert refined.gap <= pair.gap / 10
    # not a periodic orbit: Newton stops at about half the target
    assert refined.gap > pair.gap / 100
    moved = flow_map(perturbed, None, refined.first, refined.return_time)
    assert phase_distance(moved, refined.second) < 1e-8


# -------------------------------------------------------------- obstacles

def test_collect_obstacles_none_for_single_lap():
    seed = TangentPoint([0.2, 0.3], DIAGONAL)
    chart, _ = align_chart(FLAT, seed)
    pair = RecurrencePair(seed, flow_map(FLAT, None, seed, np.sqrt(2)), np.sqrt(2), 0.0)
    coll = collect_obstacles(FLAT, pair, chart, chart.tau, chart.tau / 2)
    assert len(coll.obstacles) == 0 and coll.intervals == []


def test_collect_obstacles_parallel_passes():
    # shallow slope: laps pass the seed at lateral offsets 0.002 k, two inside rho / 2
    seed = TangentPoint([0.2, 0.3], unit([1.0, 0.002]))
    chart, _ = align_chart(FLAT, seed)
    T = 3.0 * np.hypot(1.0, 0.002)
    pair = RecurrencePair(seed, flow_map(FLAT, None, seed, T), T, 0.006)
    coll = collect_obstacles(FLAT, pair, chart, chart.tau, chart.tau / 2)
    assert len(coll.obstacles) == 2
    for k, (a, b) in enumerate(coll.intervals, start=1):
        assert a < k * np.hypot(1.0, 0.002) < b
    for arc in coll.obstacles.arcs:
        y = arc.position(np.linspace(0, arc.duration, 50))
        lat = np.abs(y[:, 1])
        assert np.all(lat < chart.tau / 4)


# -------------------------------------------------------------- pull-back

def test_torus_factor_periodic_and_differentiable():
    chart = ChartMap(np.array([0.9, 0.1]), rotation_to_e1([1.0, 0.5]), periodic=True)
    inner = AnalyticFactor(lambda y: np.exp(-20 * y @ y), lambda y: -40 * y * np.exp(-20 * y @ y), dim=2)
    F = TorusFactor(inner, chart)
    x = np.array([0.95, 0.05])
    assert F.value(x) == pytest.approx(F.value(x + [3.0, -2.0]), abs=1e-14)
    np.testing.assert_allclose(F.gradient(x), central_difference_gradient(F, x, 1e-6), atol=1e-8)


# ---------------------------------------------------------------- closing

def test_close_rational_slope_needs_no_perturbation():
    seed = TangentPoint([0.2, 0.3], DIAGONAL)
    pm, point, period, report = close_orbit(FLAT, seed, {"max_time": 3.0})
    assert report.closed
    assert report.f_c1_norm == 0.0
    assert period == pytest.approx(np.sqrt(2), abs=1e-9)
    assert report.residuals["periodicity"] < 1e-9
    assert pm.factor.value(np.array([0.5, 0.5])) == 0.0
    require_closed(report)
    again = ClosingReport.from_json(report.to_json())
    assert again.to_dict() == json.loads(report.to_json())


def test_require_closed_fails_loudly():
    seed = TangentPoint([0.2, 0.3], DIAGONAL)
    _, _, _, report = close_orbit(FLAT, seed, {"max_time": 3.0})
    report.closed = False
    with pytest.raises(VerificationError):
        require_closed(report)


def test_closing_config_rejects_unknown_key():
    with pytest.raises(PreconditionError, match="unknown"):
        ClosingConfig.from_dict({"max_tme": 10})


def test_stage_error_names_failing_stage():
    seed = TangentPoint([0.2, 0.3], unit([1.0, (np.sqrt(5) - 1) / 2]))
    with pytest.raises(StageError, match="recurrence"):
        close_orbit(FLAT, seed, {"max_time": 2.0, "recurrence_gap": 1e-8})
