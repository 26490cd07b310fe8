"""Observables and quantitative checks built on the evolution and operators.

* local energy E_R(t) and its Cesaro means over [-T, T];
* the graph-norm estimate ratio LHS / (||S^-1 H psi||_S^2 + ||psi||_S^2);
* Fourier-truncation tails in the window (-R, R) x (0, pi);
* shooting for L^2 solutions of the reduced deficiency equations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from kdlab.angular import (
    check_half_integer,
    eigenbasis,
    full_spectrum,
    lambda_formula,
)
from kdlab.background import BlackHole, delta
from kdlab.errors import ConvergenceError, ParameterError
from kdlab.operators import Grid2D, PartialWaveOperator, s_norm


# ---------------------------------------------------------------------------
# local energy and time means


def local_energy(psi: np.ndarray, grid: Grid2D, R: float) -> float:
    """Plain C^4 mass of psi over (-R, R) x (0, pi); R >= X covers the whole grid."""
    mask = np.abs(grid.x) < R if R < grid.X else np.ones(grid.n_x, bool)
    dens = np.sum(np.abs(psi[mask]) ** 2)
    return float(dens * grid.cell)


def local_energy_from_density(density: np.ndarray, grid: Grid2D, R: float) -> np.ndarray:
    """E_R for rows of theta-integrated densities, shape (n_samples, n_x)."""
    mask = np.abs(grid.x) < R if R < grid.X else np.ones(grid.n_x, bool)
    return density[..., mask].sum(axis=-1) * grid.h_x


def superposition_local_energy(mode_energies, coefficients) -> np.ndarray:
    """Window energy of sum_kappa e^{-i kappa phi} c_kappa psi_kappa integrated over phi.

    Cross terms integrate to zero, leaving 2 pi sum |c_kappa|^2 E_R(psi_kappa).
    """
    e = np.asarray(mode_energies, dtype=float)
    c = np.abs(np.asarray(coefficients)) ** 2
    return 2 * np.pi * np.tensordot(e, c, axes=([-1], [0]))


@dataclass
class EnergySeries:
    times: np.ndarray
    local_energy: np.ndarray
    T_list: np.ndarray
    cesaro: np.ndarray
    valid: np.ndarray
    initial_norm_sq: float = np.nan

    def within_bound(self) -> bool:
        """E_R(t) <= 2 ||psi0||_S^2 at every sample."""
        return bool(np.all(self.local_energy <= 2 * self.initial_norm_sq * (1 + 1e-12)))


def cesaro_mean(times: np.ndarray, values: np.ndarray, T: float) -> float:
    """(1/2T) int_{-T}^{T} values dt by the trapezoid rule on the samples.

    Samples must cover [-T, T]; interior endpoints are linearly interpolated.
    """
    times = np.asarray(times, float)
    values = np.asarray(values, float)
    if T <= 0:
        raise ParameterError("averaging horizon T must be positive")
    if times[0] > -T * (1 - 1e-9) or times[-1] < T * (1 - 1e-9):
        raise ParameterError(f"samples cover [{times[0]:g}, {times[-1]:g}], need [-{T:g}, {T:g}]")
    inner = (times > -T) & (times < T)
    t = np.concatenate([[-T], times[inner], [T]])
    v = np.concatenate([[np.interp(-T, times, values)], values[inner], [np.interp(T, times, values)]])
    return float(np.trapezoid(v, t) / (2 * T))


@dataclass
class RageReport:
    R: float
    series: EnergySeries
    decreasing: bool
    final_fraction: float
    fraction_threshold: float
    warnings: list = field(default_factory=list)

    @property
    def below_threshold(self) -> bool:
        return bool(self.final_fraction < self.fraction_threshold)

    @property
    def all_valid(self) -> bool:
        return bool(np.all(self.series.valid))

    @property
    def passed(self) -> bool:
        return self.decreasing and self.below_threshold and self.all_valid


def rage_time_mean(times, energies, T_list, valid_until: float = np.inf,
                   fraction: float = 0.5, initial_norm_sq: float = np.nan, R: float = np.nan) -> RageReport:
    """Cesaro means <E_R>_T for each T in T_list from a symmetric record.

    Means at T beyond ``valid_until`` (first boundary-contamination time) are
    marked invalid.  ``decreasing`` asks for a strict decrease across T_list
    and ``final_fraction`` is <E_R>_{T_max} / E_R(0).
    """
    times = np.asarray(times, float)
    energies = np.asarray(energies, float)
    T_list = np.asarray(sorted(T_list), float)
    means = np.array([cesaro_mean(times, energies, T) for T in T_list])
    valid = T_list <= valid_until
    e0 = float(np.interp(0.0, times, energies))
    series = EnergySeries(times, energies, T_list, means, valid, initial_norm_sq)
    decreasing = bool(np.all(np.diff(means) < 0))
    frac = float(means[-1] / e0) if e0 > 0 else 0.0
    warnings = []
    if not np.all(valid):
        warnings.append(f"means for T > {valid_until:g} use boundary-contaminated samples")
    return RageReport(R, series, decreasing, frac, fraction, warnings)


def rage_from_trajectory(traj, R: float, T_list, fraction: float = 0.5) -> RageReport:
    energies = local_energy_from_density(traj.density, traj.grid, R)
    n0 = float(traj.s_norm[np.argmin(np.abs(traj.times))]) ** 2
    return rage_time_mean(traj.times, energies, T_list, traj.valid_until(), fraction, n0, R)


# ---------------------------------------------------------------------------
# graph-norm estimate


def _dx(psi: np.ndarray, h: float) -> np.ndarray:
    out = np.zeros_like(psi)
    out[1:-1] = psi[2:] - psi[:-2]
    out[0] = psi[1]
    out[-1] = -psi[-2]
    return out / (2 * h)


def _apply_A_blocks(psi: np.ndarray, kappa: float, grid: Grid2D) -> np.ndarray:
    """A_kappa applied to each two-spinor block (components 0,1 and 2,3)."""
    h = grid.h_theta
    K = kappa / np.sin(grid.theta.nodes)[None, :]

    def d(u):
        out = np.zeros_like(u)
        out[:, 1:-1] = u[:, 2:] - u[:, :-2]
        out[:, 0] = u[:, 1]
        out[:, -1] = -u[:, -2]
        return out / (2 * h)

    out = np.empty_like(psi)
    for up, lo in ((0, 1), (2, 3)):
        u, v = psi[..., up], psi[..., lo]
        out[..., up] = d(v) + K * v
        out[..., lo] = -d(u) + K * u
    return out


@dataclass
class EstimateSample:
    lhs: float
    rhs: float

    @property
    def ratio(self) -> float:
        return self.lhs / self.rhs if self.rhs > 0 else 0.0


def estimate_terms(op: PartialWaveOperator, psi: np.ndarray) -> EstimateSample:
    """LHS = sum_j int |d_x psi_j|^2 + Delta/(r^2+a^2)^2 |A psi_j|^2 and
    RHS0 = ||S^-1 H psi||_S^2 + ||psi||_S^2 on the grid."""
    grid = op.grid
    dx = _dx(psi, grid.h_x)
    ang = _apply_A_blocks(psi, op.kappa, grid)
    f2 = (grid.sqrt_delta_over_r2a2**2)[:, None, None]
    lhs = (np.sum(np.abs(dx) ** 2) + np.sum(f2 * np.abs(ang) ** 2)) * grid.cell
    rhs = s_norm(op.generator(psi), grid) ** 2 + s_norm(psi, grid) ** 2
    return EstimateSample(float(lhs), float(rhs))


def technical_estimate_ratio(op: PartialWaveOperator, psi: np.ndarray) -> float:
    """LHS / RHS0 of the graph-norm estimate; 0 for the zero field."""
    return estimate_terms(op, psi).ratio


def single_mode_lhs(grid: Grid2D, profile: np.ndarray, lam: float, amplitudes) -> float:
    """Closed-form LHS for psi_j = alpha_j phi(x) g_m(theta) with A g_m = lam g_m."""
    a2 = float(np.sum(np.abs(np.asarray(amplitudes)) ** 2))
    dphi = _dx(profile, grid.h_x)
    f2 = grid.sqrt_delta_over_r2a2**2
    return a2 * grid.h_x * float(np.sum(np.abs(dphi) ** 2) + lam**2 * np.sum(f2 * np.abs(profile) ** 2))


def mode_field(grid: Grid2D, profile: np.ndarray, g: np.ndarray, amplitudes) -> np.ndarray:
    """phi(x) (alpha_1 g, alpha_2 g) with g stacked as (upper, lower)."""
    n = grid.n_theta
    spinor = np.stack([g[:n], g[n:]], axis=-1)
    a1, a2 = amplitudes
    block = np.concatenate([a1 * spinor, a2 * spinor], axis=-1)
    return np.ascontiguousarray(profile[:, None, None] * block[None])


def random_field_family(grid: Grid2D, kappa, n_fields: int = 100, seed: int = 0,
                        m_max: int = 4, x_range: float | None = None):
    """Seeded family of smooth compactly supported fields.

    Each field is a Gaussian in x (random centre, width, carrier) times an
    angular eigenmode, with a random C^4 polarisation split over the blocks.
    Fields depend on the grid only through sampling, so refined grids give
    the same continuum family.
    """
    rng = np.random.default_rng(seed)
    pairs = {p.m: p.g for p in eigenbasis(kappa, grid.theta, m_max)}
    span = x_range if x_range is not None else min(10.0, 0.25 * grid.X)
    fields = []
    for _ in range(n_fields):
        x0 = rng.uniform(-span, span)
        sigma = rng.uniform(1.0, 3.0)
        k0 = rng.uniform(-2.0, 2.0)
        m = int(rng.choice([k for k in range(-m_max, m_max + 1) if k != 0]))
        pol = rng.normal(size=4) + 1j * rng.normal(size=4)
        prof = np.exp(-((grid.x - x0) ** 2) / (4 * sigma**2) + 1j * k0 * grid.x)
        n = grid.n_theta
        g = pairs[m]
        spinor = np.stack([g[:n], g[n:]], axis=-1)
        ang = np.concatenate([pol[0] * spinor + pol[1] * spinor[:, ::-1],
                              pol[2] * spinor + pol[3] * spinor[:, ::-1]], axis=-1)
        fields.append(np.ascontiguousarray(prof[:, None, None] * ang[None]))
    return fields


@dataclass
class EstimateReport:
    samples: list
    K: float

    @property
    def ratios(self) -> np.ndarray:
        return np.array([s.ratio for s in self.samples])


def empirical_K(op: PartialWaveOperator, fields) -> EstimateReport:
    samples = [estimate_terms(op, f) for f in fields]
    return EstimateReport(samples, float(max(s.ratio for s in samples)))


def coefficient_quotient(bh: BlackHole, x: np.ndarray) -> np.ndarray:
    """|d/dx f| / f for f = sqrt(Delta)/(r^2+a^2), evaluated in closed form.

    d/dx = (Delta/(r^2+a^2)) d/dr gives |(r-M)/(r^2+a^2) - 2 r Delta/(r^2+a^2)^2|.
    """
    from kdlab.background import radius_from_tortoise

    r = radius_from_tortoise(bh, np.asarray(x, float))
    s = r * r + bh.a**2
    return np.abs((r - bh.M) / s - 2 * r * delta(bh, r) / s**2)


@dataclass
class CoefficientReport:
    C: float
    x_at_max: float
    left_limit: float
    right_value: float
    decreasing_left: bool
    decreasing_right: bool


def coefficient_constant(bh: BlackHole, X: float = 100.0, n: int = 4001) -> CoefficientReport:
    """Sampled sup C of the coefficient quotient, plus its trend on the outer
    quarter of [-X, X] at each end (non-increasing toward the end and strictly
    below the value where the quarter starts)."""
    x = np.linspace(-X, X, n)
    q = coefficient_quotient(bh, x)
    i = int(np.argmax(q))
    k = n // 4
    left, right = q[: k + 1], q[-k - 1:]
    return CoefficientReport(
        C=float(q[i]),
        x_at_max=float(x[i]),
        left_limit=float((bh.r_plus - bh.M) / (bh.r_plus**2 + bh.a**2)),
        right_value=float(q[-1]),
        decreasing_left=bool(np.all(np.diff(left) >= 0) and left[0] < left[-1]),
        decreasing_right=bool(np.all(np.diff(right) <= 0) and right[-1] < right[0]),
    )


# ---------------------------------------------------------------------------
# Fourier truncation


@dataclass
class FourierExpansion:
    """Squared coefficient masses and their frequencies (nu pi / R)^2 + lambda^2."""

    weights: np.ndarray
    frequencies: np.ndarray
    R_eff: float

    def tail(self, L: float) -> float:
        return float(self.weights[self.frequencies > L].sum())

    @property
    def total(self) -> float:
        return float(self.weights.sum())


def fourier_expansion(psi: np.ndarray, grid: Grid2D, kappa, R: float) -> FourierExpansion:
    """Expand the restriction of psi to |x| < R in e^{-i nu pi x / R_eff} (x) discrete A eigenvectors.

    The window holds N nodes; the discrete exponentials are orthogonal on them
    with period 2 R_eff = N h_x, and the angular basis is the complete
    eigenbasis of the discrete A_kappa, so Parseval holds exactly.
    """
    kappa = check_half_integer(kappa)
    mask = np.abs(grid.x) < R
    win = psi[mask]
    N = win.shape[0]
    if N < 2:
        raise ParameterError(f"window |x| < {R} contains fewer than two nodes")
    R_eff = 0.5 * N * grid.h_x
    lam, vec = full_spectrum(kappa, grid.theta)
    n = grid.n_theta
    h = grid.h_theta
    weights, freqs = [], []
    nu = np.fft.fftfreq(N, d=1.0 / N)
    kx2 = (nu * np.pi / R_eff) ** 2
    for up, lo in ((0, 1), (2, 3)):
        stacked = np.concatenate([win[:, :, up], win[:, :, lo]], axis=1)  # (N, 2n)
        ang = h * stacked @ vec                                            # coefficients on g_k
        coef = np.fft.fft(ang, axis=0) / np.sqrt(N)
        w = np.abs(coef) ** 2 * grid.h_x
        weights.append(w.ravel())
        freqs.append((kx2[:, None] + lam[None, :] ** 2).ravel())
    return FourierExpansion(np.concatenate(weights), np.concatenate(freqs), R_eff)


def fourier_truncation_tail(psi: np.ndarray, grid: Grid2D, kappa, R: float, L: float) -> float:
    return fourier_expansion(psi, grid, kappa, R).tail(L)


@dataclass
class TailReport:
    L_list: np.ndarray
    tails: np.ndarray
    scaled: np.ndarray       # tail (1 + L)
    bound: float             # (2 + K / min(1, delta_R)) K0
    variation: float         # max(scaled) / scaled[0]

    @property
    def bounded(self) -> bool:
        return bool(np.all(self.scaled <= self.bound))

    @property
    def passed(self) -> bool:
        return bool(self.variation < 10.0 and self.bounded)


def tail_report(psi: np.ndarray, op: PartialWaveOperator, R: float, L_list, K: float) -> TailReport:
    """tail(L) (1 + L) over L_list with the a-priori bound implied by the estimate constant K.

    On the window, Delta/(r^2+a^2)^2 >= delta_R, so the unweighted derivative and
    angular energies are at most K / min(1, delta_R) times K0 = ||S^-1 H psi||_S^2
    + ||psi||_S^2, and the plain window mass is at most 2 K0.  The bound needs psi
    to vanish at the window edges (no periodisation jump).
    """
    grid = op.grid
    exp = fourier_expansion(psi, grid, op.kappa, R)
    L_list = np.asarray(L_list, float)
    tails = np.array([exp.tail(L) for L in L_list])
    scaled = tails * (1 + L_list)
    K0 = s_norm(op.generator(psi), grid) ** 2 + s_norm(psi, grid) ** 2
    delta_R = float(np.min(grid.sqrt_delta_over_r2a2[np.abs(grid.x) < R] ** 2))
    bound = (2.0 + K / min(1.0, delta_R)) * K0
    var = float(scaled.max() / scaled[0]) if scaled[0] > 0 else (0.0 if scaled.max() == 0 else np.inf)
    return TailReport(L_list, tails, scaled, bound, var)


# ---------------------------------------------------------------------------
# deficiency channels


@dataclass
class DeficiencyChannel:
    kappa: float
    mu: int
    lam: float
    sign: int
    matching_determinant: complex
    x_shoot: float
    left_frame: np.ndarray = field(repr=False, default=None)
    right_frame: np.ndarray = field(repr=False, default=None)

    @property
    def modulus(self) -> float:
        return abs(self.matching_determinant)


def _rhs(bh: BlackHole, lam: float, sign: int):
    rp, rm, a2 = bh.r_plus, bh.r_minus, bh.a**2

    def fun(x, z):
        # z = (Re y1, Im y1, Re y2, Im y2, d) with d = r - r_+
        d = z[4]
        r = rp + d
        s = r * r + a2
        dl = d * (d + rp - rm)
        f = np.sqrt(max(dl, 0.0)) / s
        y1 = z[0] + 1j * z[1]
        y2 = z[2] + 1j * z[3]
        d1 = (sign - 1j * lam * f) * y2
        d2 = (sign + 1j * lam * f) * y1
        return [d1.real, d1.imag, d2.real, d2.imag, dl / s]

    return fun


def transport(bh: BlackHole, lam: float, sign: int, y0, x0: float, x1: float,
              rtol: float = 1e-11, atol: float = 1e-14, renormalize: float | None = 1.0):
    """Integrate y' = [[0, s - i lam f], [s + i lam f, 0]] y from x0 to x1.

    With ``renormalize`` set, the solution is rescaled to unit length at every
    such interval of x (only the direction is kept).
    """
    from kdlab.background import log_horizon_distance

    fun = _rhs(bh, lam, sign)
    y = np.asarray(y0, complex)
    d = float(np.exp(log_horizon_distance(bh, np.array([x0]))[0]))
    step = abs(x1 - x0) if renormalize is None else renormalize
    marks = np.arange(x0, x1, step * np.sign(x1 - x0)) if x1 != x0 else np.array([x0])
    marks = np.append(marks, x1)
    for a, b in zip(marks[:-1], marks[1:]):
        if a == b:
            continue
        z0 = [y[0].real, y[0].imag, y[1].real, y[1].imag, d]
        sol = solve_ivp(fun, (a, b), z0, method="DOP853", rtol=rtol, atol=atol)
        if not sol.success:
            raise ConvergenceError(f"shooting integration failed on [{a}, {b}]: {sol.message}")
        z = sol.y[:, -1]
        y = np.array([z[0] + 1j * z[1], z[2] + 1j * z[3]])
        d = float(z[4])
        if renormalize is not None:
            y = y / np.linalg.norm(y)
    return y


def deficiency_check(bh: BlackHole, kappa, mu: int, sign: int, x_shoot: float = 60.0,
                     lam: float | None = None, x_match: float = 0.0, rtol: float = 1e-11) -> DeficiencyChannel:
    """Matching determinant of the decaying solutions from -x_shoot and +x_shoot.

    The left frame starts on the e^{+x} eigenvector (1, s)/sqrt2 of the
    limiting system, the right frame on the e^{-x} eigenvector (1, -s)/sqrt2.
    A nonzero determinant of the unit frames at x_match means no solution
    decays at both ends, i.e. the channel has trivial kernel.
    """
    kappa = check_half_integer(kappa)
    if sign not in (1, -1):
        raise ParameterError("sign must be +1 or -1")
    if lam is None:
        lam = lambda_formula(kappa, mu)
    s = float(sign)
    left0 = np.array([1.0, s]) / np.sqrt(2)
    right0 = np.array([1.0, -s]) / np.sqrt(2)
    try:
        yl = transport(bh, lam, sign, left0, -x_shoot, x_match, rtol=rtol)
        yr = transport(bh, lam, sign, right0, x_shoot, x_match, rtol=rtol)
    except ConvergenceError as exc:
        raise ConvergenceError(f"channel kappa={kappa}, mu={mu}, sign={sign}: {exc}") from exc
    det = yl[0] * yr[1] - yl[1] * yr[0]
    return DeficiencyChannel(kappa, int(mu), float(lam), int(sign), complex(det), x_shoot, yl, yr)


def channel_grid(kappas=(-1.5, -0.5, 0.5, 1.5), mus=(-2, -1, 1, 2), signs=(1, -1)):
    return [(k, m, s) for k in kappas for m in mus for s in signs]
