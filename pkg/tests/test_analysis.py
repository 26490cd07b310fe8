import numpy as np
import pytest

from kdlab import BlackHole
from kdlab.analysis import (
    cesaro_mean,
    coefficient_constant,
    coefficient_quotient,
    deficiency_check,
    empirical_K,
    estimate_terms,
    fourier_expansion,
    local_energy,
    local_energy_from_density,
    mode_field,
    rage_from_trajectory,
    rage_time_mean,
    random_field_family,
    single_mode_lhs,
    superposition_local_energy,
    tail_report,
    technical_estimate_ratio,
    transport,
)
from kdlab.angular import eigenbasis, full_spectrum
from kdlab.background import radius_from_tortoise
from kdlab.errors import ParameterError
from kdlab.evolution import EvolutionConfig, InitialData, symmetric_run, x_density
from kdlab.operators import Grid2D, PartialWaveOperator, plain_norm, s_norm


@pytest.fixture(scope="module")
def grid():
    return Grid2D(BlackHole(1.0, 0.6, 0.2), X=30.0, n_x=256, n_theta=16)


@pytest.fixture(scope="module")
def op(grid):
    return PartialWaveOperator(grid, 0.5, mass=0.5)


# local energy and Cesaro means


def test_local_energy_limits(grid, rng):
    psi = rng.normal(size=grid.shape) + 1j * rng.normal(size=grid.shape)
    assert local_energy(psi, grid, grid.X) == pytest.approx(plain_norm(psi, grid) ** 2, rel=1e-13)
    assert local_energy(grid.zeros(), grid, 5.0) == 0.0
    e = [local_energy(psi, grid, R) for R in (1.0, 5.0, 10.0, 20.0)]
    assert np.all(np.diff(e) >= 0)
    dens = x_density(psi, grid)[None]
    assert local_energy_from_density(dens, grid, 5.0)[0] == pytest.approx(local_energy(psi, grid, 5.0), rel=1e-12)


def test_superposition_energy_has_no_cross_terms():
    e = np.array([[1.0, 2.0], [0.5, 0.25]])
    out = superposition_local_energy(e, [1.0, 2j])
    assert np.allclose(out, 2 * np.pi * np.array([1 + 8, 0.5 + 1.0]))


def test_cesaro_mean_basic():
    t = np.linspace(-10, 10, 401)
    assert cesaro_mean(t, np.full_like(t, 3.0), 7.3) == pytest.approx(3.0, rel=1e-14)
    assert cesaro_mean(t, 1 + t, 5.0) == pytest.approx(1.0, rel=1e-13)
    assert cesaro_mean(t, t**2, 10.0) == pytest.approx(100 / 3, rel=1e-3)
    with pytest.raises(ParameterError):
        cesaro_mean(t, t, 11.0)
    with pytest.raises(ParameterError):
        cesaro_mean(t, t, 0.0)


def test_cesaro_continuous_in_T():
    t = np.linspace(-10, 10, 201)
    v = np.exp(-np.abs(t))
    a, b = cesaro_mean(t, v, 5.0), cesaro_mean(t, v, 5.0 + 1e-7)
    assert abs(a - b) < 1e-6


def test_rage_decay_and_frozen_control():
    t = np.linspace(-40, 40, 801)
    decaying = rage_time_mean(t, 1 / (1 + t**2), [5, 10, 20, 40], fraction=0.5)
    assert decaying.decreasing and decaying.passed
    assert decaying.final_fraction < 0.05
    frozen = rage_time_mean(t, np.ones_like(t), [5, 10, 20, 40], fraction=0.5)
    assert not frozen.decreasing and not frozen.below_threshold and not frozen.passed
    assert frozen.final_fraction == pytest.approx(1.0)


def test_rage_validity_flags():
    t = np.linspace(-40, 40, 801)
    rep = rage_time_mean(t, 1 / (1 + t**2), [5, 10, 20, 40], valid_until=25.0)
    assert list(rep.series.valid) == [True, True, True, False]
    assert not rep.passed and rep.warnings


def test_local_energy_within_twice_norm(grid):
    op = PartialWaveOperator(grid, 0.5)
    init = InitialData(kind="gaussian_packet", x0=0.0, sigma=1.0, polarization=(1, 0, 0, 1))
    traj = symmetric_run(op, init, EvolutionConfig(dt=0.1, t_final=5.0, snapshot_stride=5))
    rep = rage_from_trajectory(traj, 5.0, [1.0, 2.0, 5.0])
    assert rep.series.within_bound()
    assert rep.series.initial_norm_sq == pytest.approx(s_norm(init.build(grid, 0.5), grid) ** 2, rel=1e-10)


# graph-norm estimate


def test_estimate_ratio_scale_invariant(op, rng):
    f = random_field_family(op.grid, op.kappa, n_fields=1, seed=3)[0]
    r = technical_estimate_ratio(op, f)
    assert r > 0
    assert technical_estimate_ratio(op, (2.5 - 1j) * f) == pytest.approx(r, rel=1e-12)
    assert technical_estimate_ratio(op, op.grid.zeros()) == 0.0


def test_single_mode_closed_form(grid):
    pair = {p.m: p for p in eigenbasis(0.5, grid.theta, 3)}[2]
    prof = np.exp(-((grid.x - 1.0) ** 2) / 4) * np.exp(0.7j * grid.x)
    amps = (0.3 + 0.4j, -1.1)
    psi = mode_field(grid, prof, pair.g, amps)
    lhs = estimate_terms(PartialWaveOperator(grid, 0.5), psi).lhs
    assert lhs == pytest.approx(single_mode_lhs(grid, prof, pair.lam, amps), rel=1e-8)


def test_random_family_is_seeded(grid):
    a = random_field_family(grid, 0.5, n_fields=3, seed=7)
    b = random_field_family(grid, 0.5, n_fields=3, seed=7)
    c = random_field_family(grid, 0.5, n_fields=3, seed=8)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], c[0])


def test_empirical_K_is_max_ratio(op):
    rep = empirical_K(op, random_field_family(op.grid, op.kappa, n_fields=5, seed=1))
    assert rep.K == pytest.approx(rep.ratios.max())
    assert np.all(np.isfinite(rep.ratios))


def test_coefficient_quotient_matches_derivative():
    bh = BlackHole(1.0, 0.6, 0.2)
    x = np.linspace(-20, 30, 101)
    h = 1e-5

    def f(xx):
        r = radius_from_tortoise(bh, xx)
        return np.sqrt(r * r - 2 * bh.M * r + bh.a**2 + bh.Q**2) / (r * r + bh.a**2)

    num = np.abs(f(x + h) - f(x - h)) / (2 * h) / f(x)
    assert np.allclose(coefficient_quotient(bh, x), num, rtol=1e-6, atol=1e-9)


def test_coefficient_constant_limits():
    bh = BlackHole(1.0, 0.6, 0.2)
    rep = coefficient_constant(bh)
    assert np.isfinite(rep.C) and rep.C > 0
    assert rep.decreasing_right
    # toward the horizon the quotient approaches the surface gravity, not zero
    assert coefficient_quotient(bh, np.array([-60.0]))[0] == pytest.approx(rep.left_limit, rel=1e-6)


# Fourier truncation


def test_fourier_parseval(grid, rng):
    psi = rng.normal(size=grid.shape) + 1j * rng.normal(size=grid.shape)
    exp = fourier_expansion(psi, grid, 0.5, 6.0)
    assert exp.total == pytest.approx(local_energy(psi, grid, 6.0), rel=1e-12)
    tails = [exp.tail(L) for L in (0, 1, 10, 100, 1000)]
    assert np.all(np.diff(tails) <= 0)


def test_single_basis_element_tail(grid):
    R = 6.0
    mask = np.abs(grid.x) < R
    N = int(mask.sum())
    R_eff = 0.5 * N * grid.h_x
    lam, vec = full_spectrum(0.5, grid.theta)
    k, nu = 3, 4
    n = grid.n_theta
    psi = grid.zeros()
    xw = grid.x[mask]
    phase = np.exp(2j * np.pi * nu * np.arange(N) / N)
    psi[mask, :, 0] = phase[:, None] * vec[:n, k][None]
    psi[mask, :, 1] = phase[:, None] * vec[n:, k][None]
    exp = fourier_expansion(psi, grid, 0.5, R)
    freq = (nu * np.pi / R_eff) ** 2 + lam[k] ** 2
    assert exp.R_eff == pytest.approx(R_eff)
    assert exp.tail(freq * (1 - 1e-9)) == pytest.approx(exp.total, rel=1e-12)
    assert exp.tail(freq * (1 + 1e-9)) < 1e-20 * exp.total
    assert xw.size == N


def test_tail_report_bound(grid):
    op = PartialWaveOperator(grid, 0.5)
    fields = random_field_family(grid, 0.5, n_fields=3, seed=2, x_range=1.0)
    K = empirical_K(op, fields).K
    for f in fields:
        rep = tail_report(f, op, 12.0, [1, 10, 100, 1000], K)
        assert rep.bounded and rep.variation < 10


# deficiency shooting


def test_deficiency_lambda_zero_closed_form():
    bh = BlackHole(1.0, 0.6, 0.2)
    for s in (1, -1):
        ch = deficiency_check(bh, 0.5, 1, s, x_shoot=30.0, lam=0.0)
        assert ch.modulus == pytest.approx(1.0, abs=1e-9)


def test_deficiency_sign_symmetry():
    bh = BlackHole(1.0, 0.6, 0.2)
    a = deficiency_check(bh, 1.5, 2, 1, x_shoot=30.0)
    b = deficiency_check(bh, 1.5, -2, -1, x_shoot=30.0)
    assert a.modulus == pytest.approx(b.modulus, rel=1e-9)
    assert a.lam == -b.lam


def test_transport_preserves_wronskian():
    bh = BlackHole(1.0, 0.6, 0.2)
    e1 = transport(bh, 2.0, 1, [1, 0], -3.0, 3.0, renormalize=None)
    e2 = transport(bh, 2.0, 1, [0, 1], -3.0, 3.0, renormalize=None)
    assert abs(e1[0] * e2[1] - e1[1] * e2[0]) == pytest.approx(1.0, abs=1e-6)


def test_deficiency_refinement_and_shoot_invariance():
    bh = BlackHole(1.0, 0.6, 0.2)
    a = deficiency_check(bh, -0.5, 1, 1, x_shoot=30.0, rtol=1e-9)
    b = deficiency_check(bh, -0.5, 1, 1, x_shoot=30.0, rtol=1e-12)
    c = deficiency_check(bh, -0.5, 1, 1, x_shoot=60.0, rtol=1e-11)
    assert abs(a.modulus - b.modulus) < 1e-6
    assert abs(b.modulus - c.modulus) < 1e-6
    assert b.modulus > 1e-3


def test_deficiency_rejects_bad_sign():
    with pytest.raises(ParameterError):
        deficiency_check(BlackHole(1.0, 0.6, 0.2), 0.5, 1, 0)
