import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoclose.errors import SpecInvalidError
from geoclose.metric import central_difference_gradient
from geoclose.profiles import WindowProfile
from geoclose.tube_bump import TubeBumpSpec, build_bump, straight_line_spec, tube_chart

T, BETA = 1.0, 0.2
WINDOW = WindowProfile(0.2, 0.35, 0.65, 0.8)


def _straight_w(amp=1.0, dim=2):
    def w(t):
        t = np.atleast_1d(t)
        out = np.zeros((t.size, dim))
        out[:, 1] = amp * WINDOW.psi(t)
        return out
    return w


def curved_spec(amp=0.01, mu=0.05, bend=0.05):
    def y_curve(t):
        t = np.atleast_1d(np.asarray(t, float))
        return (np.column_stack([t, bend * np.sin(2 * t)]),
                np.column_stack([np.ones_like(t), 2 * bend * np.cos(2 * t)]))

    def w(t):
        t = np.atleast_1d(np.asarray(t, float))
        _, yd = y_curve(t)
        n = np.column_stack([-yd[:, 1], yd[:, 0]])
        return amp * WINDOW.psi(t)[:, None] * n

    return TubeBumpSpec(y_curve, w, T, BETA, mu)


def test_tube_chart_examples():
    spec = straight_line_spec(_straight_w())
    t, z = tube_chart(spec, np.array([0.3, 0.2]))
    assert t == pytest.approx(0.3, abs=1e-15)
    np.testing.assert_allclose(z, [0.2], atol=1e-15)
    assert tube_chart(spec, np.array([1.5, 0.0])) is None
    curved = curved_spec()
    y, _ = curved.y_curve(np.array([0.42]))
    t, z = tube_chart(curved, y[0])
    assert t == pytest.approx(0.42, abs=1e-11)
    assert np.max(np.abs(z)) < 1e-11


@given(t=st.floats(0.0, 1.0), z=st.floats(-0.04, 0.04))
@settings(max_examples=40, deadline=None)
def test_tube_chart_round_trip(t, z):
    bump = build_bump(curved_spec())
    point = bump.inverse_chart(t, np.array([z]))
    tt, zz, _ = bump.chart(point)
    np.testing.assert_allclose(bump.inverse_chart(tt, zz), point, atol=1e-10)


def test_zero_field_gives_zero_function():
    bump = build_bump(straight_line_spec(lambda t: np.zeros((np.atleast_1d(t).size, 2))))
    for x in np.random.default_rng(0).uniform([0, -0.1], [1, 0.1], size=(50, 2)):
        val, grad = bump.value_and_gradient(x)
        assert val == 0.0 and not grad.any()


@pytest.mark.parametrize("spec", [straight_line_spec(_straight_w(0.02)), curved_spec(0.02)],
                         ids=["straight", "curved"])
def test_gradient_on_curve_equals_field(spec):
    bump = build_bump(spec)
    t = np.linspace(0.0, 1.0, 201)
    y, _ = spec.y_curve(t)
    w = spec.w_field(t)
    for yi, wi in zip(y, w):
        val, grad = bump.value_and_gradient(yi)
        assert abs(val) <= 1e-15
        np.testing.assert_allclose(grad, wi, atol=1e-9)


def test_support_confined_to_tube():
    spec = curved_spec(0.02, mu=0.05)
    bump = build_bump(spec)
    rng = np.random.default_rng(2)
    for _ in range(400):
        t = rng.uniform(-0.1, 1.1)
        z = rng.uniform(-0.1, 0.1)
        x = bump.inverse_chart(min(max(t, 0), 1), np.array([z])) + np.array([t - min(max(t, 0), 1), 0])
        val, grad = bump.value_and_gradient(x)
        ch = bump.chart(x)
        outside = ch is None or abs(ch[1][0]) >= spec.mu or ch[0] <= BETA - spec.mu or ch[0] >= T - BETA + spec.mu
        if outside:
            assert val == 0.0 and not grad.any()


def test_gradient_matches_finite_differences_off_curve():
    bump = build_bump(curved_spec(0.02))
    rng = np.random.default_rng(5)
    for _ in range(60):
        x = bump.inverse_chart(rng.uniform(0.15, 0.85), rng.uniform(-0.035, 0.035, size=1))
        g = bump.gradient(x)
        fd = central_difference_gradient(bump, x, 1e-6)
        np.testing.assert_allclose(g, fd, atol=1e-7 + 1e-6 * np.max(np.abs(g)))


def test_linearity_in_field():
    pts = np.random.default_rng(3).uniform([0.1, -0.03], [0.9, 0.03], size=(300, 2))
    norms = []
    for amp in (0.01, 0.02):
        bump = build_bump(curved_spec(amp))
        norms.append(max(abs(bump.value(p)) for p in pts) + max(np.linalg.norm(bump.gradient(p)) for p in pts))
    assert norms[1] / norms[0] == pytest.approx(2.0, rel=1e-2)


def test_three_dimensional_bump():
    def w(t):
        t = np.atleast_1d(t)
        out = np.zeros((t.size, 3))
        out[:, 1] = 0.01 * WINDOW.psi(t)
        out[:, 2] = -0.02 * WINDOW.psi(t)
        return out

    spec = straight_line_spec(w, dim=3)
    bump = build_bump(spec)
    for t in np.linspace(0, 1, 21):
        np.testing.assert_allclose(bump.gradient(np.array([t, 0.0, 0.0])), w(t)[0], atol=1e-12)
    x = np.array([0.5, 0.01, -0.012])
    np.testing.assert_allclose(bump.gradient(x), central_difference_gradient(bump, x, 1e-6), atol=1e-8)


@pytest.mark.parametrize("kwargs, message", [
    ({"mu": 0.1}, "3*mu <= beta"),
    ({"beta": 0.25, "mu": 0.05}, "w = 0 on"),
])
def test_invalid_specs_rejected(kwargs, message):
    base = {"T": T, "beta": BETA, "mu": 0.05}
    base.update(kwargs)
    spec = straight_line_spec(_straight_w(0.01), **base)
    with pytest.raises(SpecInvalidError, match=message.replace("*", r"\*")):
        build_bump(spec)


def test_non_orthogonal_field_rejected():
    def w(t):
        t = np.atleast_1d(t)
        out = np.zeros((t.size, 2))
        out[:, 0] = 0.01 * WINDOW.psi(t)
        return out

    with pytest.raises(SpecInvalidError, match="<y', w> = 0"):
        build_bump(straight_line_spec(w))


def test_steep_curve_rejected():
    with pytest.raises(SpecInvalidError, match="1/5"):
        build_bump(curved_spec(0.01, bend=0.2))
