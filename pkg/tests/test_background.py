import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from kdlab import BlackHole, Potential, delta, potential_q, radius_from_tortoise, tortoise
from kdlab.background import log_horizon_distance
from kdlab.errors import DomainError, ParameterError


def test_horizons_schwarzschild():
    bh = BlackHole(1.0, 0.0, 0.0)
    assert bh.r_plus == pytest.approx(2.0)
    assert bh.r_minus == pytest.approx(0.0)
    assert delta(bh, 2.0) == 0.0


def test_delta_root_and_factored_form(bh):
    assert delta(bh, bh.r_plus) == pytest.approx(0.0, abs=1e-15)
    r = 3.0
    expanded = r * r - 2 * bh.M * r + bh.a**2 + bh.Q**2
    assert delta(bh, r) == pytest.approx(expanded, rel=1e-12)
    assert delta(bh, r) == pytest.approx((r - bh.r_plus) * (r - bh.r_minus), rel=1e-12)


def test_delta_rejects_interior(bh):
    with pytest.raises(DomainError):
        delta(bh, bh.r_plus - 0.1)


@pytest.mark.parametrize("a,Q", [(0.9, 0.5), (1.0, 0.0), (0.6, 0.8), (0.0, 1.2)])
def test_extreme_and_naked_rejected(a, Q):
    with pytest.raises(ParameterError, match="a\\^2 \\+ Q\\^2 < M\\^2"):
        BlackHole(1.0, a, Q)


def test_schwarzschild_tortoise_classical():
    bh = BlackHole(1.0, 0.0, 0.0, x_offset=0.0)
    assert tortoise(bh, 4.0) == pytest.approx(4 + 2 * math.log(2), rel=1e-14)
    # r + 2M ln(r - 2M) everywhere
    r = np.array([2.5, 3.0, 10.0, 100.0])
    assert np.allclose(tortoise(bh, r), r + 2 * np.log(r - 2), rtol=1e-14)


def test_default_offset_fixes_reference_point(bh):
    assert tortoise(bh, 2 * bh.r_plus) == pytest.approx(2 * bh.r_plus, rel=1e-14)


def test_tortoise_derivative_matches_definition(bh):
    r, h = 3.0, 1e-5
    num = (tortoise(bh, r + h) - tortoise(bh, r - h)) / (2 * h)
    assert num == pytest.approx((r * r + bh.a**2) / delta(bh, r), rel=1e-9)


def test_tortoise_against_quadrature(bh):
    r0 = 5.0
    for r in [bh.r_plus + 1e-4, bh.r_plus + 0.01, 2.5, 10.0, 100.0, 1000.0]:
        integral, _ = quad(lambda s: (s * s + bh.a**2) / delta(bh, s), r0, r, epsabs=1e-13, epsrel=1e-13, limit=200)
        assert tortoise(bh, r) - tortoise(bh, r0) == pytest.approx(integral, abs=1e-10)


def test_tortoise_rejects_horizon(bh):
    with pytest.raises(DomainError):
        tortoise(bh, bh.r_plus)


def test_monotone_on_log_sample(bh):
    r = bh.r_plus + np.logspace(-6, 3, 1000)
    assert np.all(np.diff(tortoise(bh, r)) > 0)


@pytest.mark.parametrize("dr", [1e-3, None])
def test_round_trip(bh, dr):
    radii = [bh.r_plus + 1e-3, 3.0, 10.0, 100.0] if dr is None else [bh.r_plus + dr]
    for r in radii:
        assert radius_from_tortoise(bh, tortoise(bh, r)) == pytest.approx(r, rel=1e-9)


def test_inverse_in_log_distance_is_exact(bh):
    # tortoise(r(x)) = x to 1e-12 max(1,|x|); evaluated from the stored log distance u = ln(r - r_+)
    from kdlab.background import _x_of_u

    x = np.array([-500.0, -50.0, -1.0, 0.0, 3.0, 50.0, 1e4])
    u = log_horizon_distance(bh, x)
    assert np.all(np.abs(_x_of_u(bh, u) - x) <= 1e-12 * np.maximum(1, np.abs(x)))


def test_near_horizon_asymptotics(bh):
    x = -50.0
    d = radius_from_tortoise(bh, x) - bh.r_plus
    assert 0 < d < 1e-8
    # x ~ C_h + A_+ ln d with C_h = r_+ - A_- ln(r_+ - r_-) + x_offset
    predicted = math.exp((x - bh.horizon_constant) / bh.a_plus)
    assert d == pytest.approx(predicted, rel=1e-6)


def test_far_field(bh):
    x = 1e6
    assert radius_from_tortoise(bh, x) / x == pytest.approx(1.0, rel=1e-2)


def test_horizon_ratio_vanishes_at_both_ends(bh):
    r = radius_from_tortoise(bh, np.array([-1e3, 1e3]))
    ratio = delta(bh, r) / (r**2 + bh.a**2) ** 2
    assert np.all(ratio < 1e-5)


@settings(max_examples=50, deadline=None)
@given(st.floats(-300, 300))
def test_radius_monotone_property(x):
    bh = BlackHole(1.0, 0.5, 0.3)
    # r - r_+ drops below the resolution of r itself for x << 0, so strict
    # monotonicity is checked on ln(r - r_+)
    u1, u2 = log_horizon_distance(bh, np.array([x, x + 0.5]))
    assert u1 < u2
    r1, r2 = radius_from_tortoise(bh, np.array([x, x + 0.5]))
    assert bh.r_plus <= r1 <= r2


def test_potential_standard():
    bh = BlackHole(1.0, 0.5, 0.3)
    assert potential_q(Potential.standard(0.0), bh, 7.0) == 0.0
    assert potential_q(Potential.standard(0.1), bh, 2.0) == pytest.approx(0.06)


def test_potential_custom_linear_accepted(bh):
    p = Potential.rational([0.0, 1.0], [1.0])
    p.validate(bh)
    r = np.array([10.0, 1e3, 1e6])
    assert np.allclose(potential_q(p, bh, r) / r, 1.0)


def test_potential_custom_example(bh):
    # q(r) = r/2 + 1/(1+r) = (1 + r/2 + r^2/2) / (1 + r)
    p = Potential.rational([1.0, 0.5, 0.5], [1.0, 1.0])
    p.validate(bh)
    r = np.array([2.0, 5.0, 50.0])
    assert np.allclose(p(bh, r), r / 2 + 1 / (1 + r), rtol=1e-14)


def test_potential_superlinear_rejected(bh):
    with pytest.raises(ParameterError):
        Potential.rational([0.0, 0.0, 1.0], [1.0])


def test_potential_pole_outside_horizon_rejected(bh):
    # denominator root at r = 3 > r_+
    with pytest.raises(ParameterError):
        Potential.rational([1.0], [-3.0, 1.0]).validate(bh)


def test_potential_inside_horizon_rejected(bh):
    with pytest.raises(DomainError):
        potential_q(Potential.standard(0.1), bh, 0.5 * bh.r_plus)
