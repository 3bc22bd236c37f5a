import numpy as np
import pytest

from geoclose.connector import (arclength_by_ode, arclength_reparam, blend_curve, build_connecting_data,
                                connect, connecting_invariants, control_field, estimate_c1_norm,
                                tube_sample_points)
from geoclose.curves import Curve
from geoclose.errors import DegenerateBlendError, PreconditionError
from geoclose.flow import flow_map
from geoclose.metric import FlatMetric, TangentPoint, TrigPerturbedMetric, ZeroFactor, unit_normalize
from geoclose.profiles import BlendProfile


class ScaledLine(Curve):
    """``X(t) = speed * t * e1``."""

    def __init__(self, speed, t_max=1.0):
        self.speed, self.t_max = speed, t_max

    def jet(self, s):
        s = np.atleast_1d(np.asarray(s, float))
        z = np.zeros_like(s)
        return (np.column_stack([self.speed * s, z]), np.column_stack([self.speed + z, z]),
                np.column_stack([z, z]))


def pair(metric, sep, direction=(0.6, 0.5, 0.0, 0.6), base=(0.3, 0.4)):
    d = np.asarray(direction) / np.linalg.norm(direction)
    target = unit_normalize(metric, TangentPoint(base, [1.0, 0.0]))
    start = unit_normalize(metric, TangentPoint(target.x + sep * d[:2], target.v + sep * d[2:]))
    return start, target


# ------------------------------------------------------------- arclength

def test_arclength_of_unit_speed_curve():
    m = FlatMetric(2)
    amap = arclength_reparam(m, ScaledLine(1.0), 1.0)
    assert amap.tau_tilde == pytest.approx(1.0, abs=1e-11)
    s = np.linspace(0, 1, 51)
    np.testing.assert_allclose(amap.theta(s), s, atol=1e-10)


def test_arclength_of_constant_speed_two():
    amap = arclength_reparam(FlatMetric(2), ScaledLine(2.0), 1.0)
    assert amap.tau_tilde == pytest.approx(2.0, abs=1e-12)
    s = np.linspace(0, 2, 41)
    np.testing.assert_allclose(amap.theta(s), s / 2, atol=1e-12)


def test_arclength_round_trip_and_ode_reference(perturbed):
    start, target = pair(perturbed, 1e-2)
    curve = blend_curve(perturbed, start, target, BlendProfile(1.0))
    amap = arclength_reparam(perturbed, curve, 1.0, breakpoints=curve.breakpoints())
    s = np.linspace(0.0, amap.tau_tilde, 97)
    err = max(abs(amap.alpha(float(amap.theta(si))) - si) for si in s)
    assert err < 1e-9
    # independent route: adaptive quadrature for the length and an ODE for the inverse map
    length, theta = arclength_by_ode(perturbed, curve, 1.0)
    assert amap.tau_tilde == pytest.approx(length, abs=1e-11)
    np.testing.assert_allclose(amap.theta(s), theta(s), atol=1e-10)


def test_slow_curve_rejected():
    with pytest.raises(DegenerateBlendError):
        arclength_reparam(FlatMetric(2), ScaledLine(0.1), 1.0)


def test_opposite_velocities_degenerate():
    m = FlatMetric(2)
    a = TangentPoint([0.0, 0.0], [1.0, 0.0])
    b = TangentPoint([0.0, 0.0], [-1.0, 0.0])
    with pytest.raises(DegenerateBlendError):
        build_connecting_data(m, a, b, 1.0)


# ------------------------------------------------------- connecting data

def test_identical_endpoints_zero_control(perturbed):
    start, _ = pair(perturbed, 0.0)
    data = build_connecting_data(perturbed, start, start, 1.0)
    assert data.tau_tilde == pytest.approx(1.0, abs=1e-11)
    t = np.linspace(0, data.tau_tilde, 201)
    assert not data.u_tilde(t).any()
    res = connect(perturbed, start, start, 1.0, 0.2)
    assert isinstance(res.factor, ZeroFactor)
    assert res.tau_tilde == 1.0 and res.report["f_c1_norm"] == 0.0


def test_flat_parallel_lines_control_closed_form():
    m = FlatMetric(2)
    start = TangentPoint([0.0, 0.01], [1.0, 0.0])
    target = TangentPoint([0.0, 0.0], [1.0, 0.0])
    data = build_connecting_data(m, start, target, 1.0)
    t = np.linspace(0, data.tau_tilde, 301)
    _, _, xdd = data.jet(t)
    # G = I, so the defect is twice the acceleration
    np.testing.assert_allclose(data.u_tilde(t), 2 * xdd, atol=1e-12)
    h = 1e-5
    fd = (data.velocity(t[1:-1] + h) - data.velocity(t[1:-1] - h)) / (2 * h)
    np.testing.assert_allclose(2 * xdd[1:-1], 2 * fd, atol=1e-6)


@pytest.mark.parametrize("sep", [1e-2, 3e-3])
def test_connecting_invariants(perturbed, sep):
    start, target = pair(perturbed, sep)
    data = build_connecting_data(perturbed, start, target, 1.0)
    inv = connecting_invariants(data)
    assert inv["unit_speed"] < 1e-9
    assert inv["hamiltonian"] < 1e-9
    assert inv["orthogonality"] < 1e-9
    assert inv["pin_start"] < 1e-10
    assert inv["pin_end"] < 1e-10
    assert inv["plateau_control"] == 0.0
    control_field(data)


def test_control_scales_linearly(perturbed):
    maxima = []
    for sep in (1e-2, 5e-3):
        start, target = pair(perturbed, sep)
        data = build_connecting_data(perturbed, start, target, 1.0)
        t = np.linspace(0, data.tau_tilde, 401)
        maxima.append(np.max(np.linalg.norm(data.u_tilde(t), axis=1)))
    assert 2.0 / 1.2 <= maxima[0] / maxima[1] <= 2.0 * 1.2


def test_preconditions(perturbed):
    start, target = pair(perturbed, 1e-2)
    with pytest.raises(PreconditionError):
        build_connecting_data(perturbed, TangentPoint(start.x, 2 * start.v), target, 1.0)
    with pytest.raises(PreconditionError):
        build_connecting_data(perturbed, start, target, 1.0, max_separation=1e-3)


# ----------------------------------------------------------------- connect

def test_connect_flat_torus_endpoint():
    m = FlatMetric(2)
    start, target = pair(m, 1e-2)
    res = connect(m, start, target, 1.0, 0.2)
    assert res.verified
    assert res.report["endpoint_residual"] < 1e-7
    assert res.report["along_curve"]["rhs"] < 1e-8
    assert res.report["along_curve"]["grad_vs_control"] < 1e-8
    # the perturbed flow from the start lands on the target geodesic at time tau
    ref = flow_map(m, None, target, 1.0)
    assert ref.x[0] == pytest.approx(target.x[0] + 1.0, abs=1e-12)


def test_connect_report_and_norm_estimate(perturbed):
    start, target = pair(perturbed, 5e-3)
    res = connect(perturbed, start, target, 1.0, 0.2)
    rep = res.report
    for key in ("separation", "mu", "tau_tilde", "invariants", "f_c1_norm", "f_c0_norm", "endpoint_residual"):
        assert key in rep
    assert rep["mu"] == pytest.approx(0.2 / 8)
    pts = tube_sample_points(res.data, rep["mu"])
    assert estimate_c1_norm(res.factor, pts)["c1"] == pytest.approx(rep["f_c1_norm"])
    # f is supported near the curve: far points see nothing
    assert res.factor.value_and_gradient(np.array([0.5, 0.4 + 0.1]))[0] == 0.0
