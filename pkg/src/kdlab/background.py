"""Kerr-Newman exterior geometry: horizons, Delta, tortoise coordinate, potentials.

Geometric units G = c = 1.  The tortoise coordinate is the closed-form
antiderivative of (r^2 + a^2)/Delta obtained by partial fractions,

    x(r) = r + A_+ ln(r - r_+) - A_- ln(r - r_-) + x_offset,
    A_+- = (r_+-^2 + a^2) / (r_+ - r_-),

with the additive constant exposed as ``x_offset``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.polynomial import polynomial as P

from kdlab.errors import ConvergenceError, DomainError, ParameterError

_NEWTON_MAX_ITER = 200


@dataclass(frozen=True)
class BlackHole:
    """Non-extreme Kerr-Newman parameters and derived horizon data.

    ``x_offset`` defaults to the value that makes x(2 r_+) = 2 r_+.
    """

    M: float = 1.0
    a: float = 0.0
    Q: float = 0.0
    x_offset: float | None = None
    r_plus: float = field(init=False)
    r_minus: float = field(init=False)

    def __post_init__(self):
        M, a, Q = float(self.M), float(self.a), float(self.Q)
        if not all(math.isfinite(v) for v in (M, a, Q)):
            raise ParameterError("black hole parameters must be finite")
        if M <= 0:
            raise ParameterError(f"mass must be positive, got M={M}")
        disc = M * M - a * a - Q * Q
        if disc <= 0:
            raise ParameterError(
                f"non-extreme condition a^2 + Q^2 < M^2 violated: "
                f"a^2 + Q^2 = {a * a + Q * Q:.6g} >= M^2 = {M * M:.6g}"
            )
        root = math.sqrt(disc)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "r_plus", M + root)
        object.__setattr__(self, "r_minus", M - root)
        if self.x_offset is None:
            rp, rm = self.r_plus, self.r_minus
            r_ref = 2.0 * rp
            raw = r_ref + self.a_plus * math.log(r_ref - rp) - self.a_minus * math.log(r_ref - rm)
            object.__setattr__(self, "x_offset", r_ref - raw)
        else:
            object.__setattr__(self, "x_offset", float(self.x_offset))

    @property
    def a_plus(self) -> float:
        return (self.r_plus**2 + self.a**2) / (self.r_plus - self.r_minus)

    @property
    def a_minus(self) -> float:
        return (self.r_minus**2 + self.a**2) / (self.r_plus - self.r_minus)

    @property
    def horizon_constant(self) -> float:
        """Constant c0 in r - r_+ ~ exp((x - c0)/A_+) as x -> -infinity."""
        rp, rm = self.r_plus, self.r_minus
        return rp - self.a_minus * math.log(rp - rm) + self.x_offset


def delta(bh: BlackHole, r):
    """Delta(r) = (r - r_+)(r - r_-) = r^2 - 2Mr + a^2 + Q^2, for r >= r_+."""
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < bh.r_plus):
        raise DomainError(f"Delta evaluated inside the outer horizon r_+={bh.r_plus}")
    out = (r_arr - bh.r_plus) * (r_arr - bh.r_minus)
    return float(out) if out.ndim == 0 else out


def tortoise(bh: BlackHole, r):
    """Tortoise coordinate x(r) for r > r_+ (scalar or array)."""
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr <= bh.r_plus):
        raise DomainError(f"tortoise coordinate requires r > r_+={bh.r_plus}")
    x = _x_of_u(bh, np.log(r_arr - bh.r_plus))
    return float(x) if x.ndim == 0 else x


def _x_of_u(bh: BlackHole, u):
    # u = ln(r - r_+); keeps the near-horizon distance exact
    d = np.exp(np.minimum(u, 700.0))
    rp, rm = bh.r_plus, bh.r_minus
    return rp + d + bh.a_plus * u - bh.a_minus * np.log(d + (rp - rm)) + bh.x_offset


def _dx_du(bh: BlackHole, u):
    d = np.exp(np.minimum(u, 700.0))
    r = bh.r_plus + d
    return (r * r + bh.a**2) / (d + bh.r_plus - bh.r_minus)


def log_horizon_distance(bh: BlackHole, x):
    """Return u = ln(r(x) - r_+) by safeguarded Newton iteration in u.

    Seeds come from the two asymptotic regimes: r - r_+ ~ exp((x - c0)/A_+)
    near the horizon and r ~ x at infinity.  A bracket is kept so that a
    Newton step leaving it falls back to bisection.
    """
    x_arr = np.atleast_1d(np.asarray(x, dtype=float))
    if not np.all(np.isfinite(x_arr)):
        raise DomainError("tortoise coordinate must be finite")
    u_near = (x_arr - bh.horizon_constant) / bh.a_plus
    u_far = np.log(np.maximum(x_arr - bh.r_plus, 1e-300))
    u = np.where(
        np.abs(_x_of_u(bh, u_near) - x_arr) <= np.abs(_x_of_u(bh, u_far) - x_arr), u_near, u_far
    )
    u = np.clip(u, -700.0, 700.0)

    lo = u - 1.0
    hi = u + 1.0
    for _ in range(_NEWTON_MAX_ITER):
        bad = _x_of_u(bh, lo) > x_arr
        if not bad.any():
            break
        lo = np.where(bad, lo - 2.0 * (hi - lo), lo)
    for _ in range(_NEWTON_MAX_ITER):
        bad = _x_of_u(bh, hi) < x_arr
        if not bad.any():
            break
        hi = np.where(bad, np.minimum(hi + 0.5 * (hi - lo) + 1.0, 700.0), hi)

    tol = 1e-13 * np.maximum(1.0, np.abs(x_arr))
    for _ in range(_NEWTON_MAX_ITER):
        g = _x_of_u(bh, u) - x_arr
        done = np.abs(g) <= tol
        if done.all():
            break
        lo = np.where(g < 0, u, lo)
        hi = np.where(g > 0, u, hi)
        step = u - g / _dx_du(bh, u)
        outside = (step <= lo) | (step >= hi) | ~np.isfinite(step)
        u = np.where(done, u, np.where(outside, 0.5 * (lo + hi), step))
    else:
        g = _x_of_u(bh, u) - x_arr
        if np.any(np.abs(g) > 1e-12 * np.maximum(1.0, np.abs(x_arr))):
            raise ConvergenceError(
                f"radius_from_tortoise did not converge; worst residual {np.max(np.abs(g)):.3e}"
            )
    return u if np.ndim(x) else float(u[0])


def radius_from_tortoise(bh: BlackHole, x):
    """Inverse of :func:`tortoise`; r(x) > r_+ for every real x."""
    u = log_horizon_distance(bh, x)
    r = bh.r_plus + np.exp(u)
    return float(r) if np.ndim(r) == 0 else r


@dataclass(frozen=True)
class Potential:
    """Electric potential term q(r) entering the Hamiltonian as q/(r^2 + a^2).

    ``standard`` gives q = e Q r.  ``custom`` is the rational function
    numerator(r)/denominator(r), coefficients in ascending powers of r, with
    deg numerator <= deg denominator + 1 so that q(r)/r has a limit and
    q'(r) = O(1).
    """

    kind: str = "standard"
    e: float = 0.0
    numerator: tuple[float, ...] = ()
    denominator: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        if self.kind not in ("standard", "custom"):
            raise ParameterError(f"unknown potential kind {self.kind!r}")
        object.__setattr__(self, "numerator", tuple(float(c) for c in self.numerator))
        object.__setattr__(self, "denominator", tuple(float(c) for c in self.denominator))
        if self.kind == "custom":
            num = np.trim_zeros(np.array(self.numerator, dtype=float), "b")
            den = np.trim_zeros(np.array(self.denominator, dtype=float), "b")
            if den.size == 0:
                raise ParameterError("custom potential denominator is identically zero")
            if not (np.all(np.isfinite(num)) and np.all(np.isfinite(den))):
                raise ParameterError("custom potential coefficients must be finite")
            if num.size - 1 > den.size:
                raise ParameterError(
                    f"custom potential q(r)/r diverges: deg numerator {num.size - 1} "
                    f"> deg denominator {den.size - 1} + 1"
                )

    @classmethod
    def standard(cls, e: float) -> "Potential":
        return cls(kind="standard", e=float(e))

    @classmethod
    def rational(cls, numerator: Sequence[float], denominator: Sequence[float] = (1.0,)) -> "Potential":
        return cls(kind="custom", numerator=tuple(numerator), denominator=tuple(denominator))

    def __call__(self, bh: BlackHole, r):
        if self.kind == "standard":
            return self.e * bh.Q * np.asarray(r, dtype=float)
        r = np.asarray(r, dtype=float)
        return P.polyval(r, self.numerator or (0.0,)) / P.polyval(r, self.denominator)

    def validate(self, bh: BlackHole) -> None:
        """Check C^1 regularity on [r_+, inf) and the q(r)/r limit by sampling."""
        if self.kind == "standard":
            return
        den = np.trim_zeros(np.array(self.denominator), "b")
        if den.size > 1:
            roots = P.polyroots(den)
            real = roots[np.abs(roots.imag) <= 1e-12 * np.maximum(1.0, np.abs(roots))].real
            if np.any(real >= bh.r_plus - 1e-12):
                raise ParameterError(
                    f"custom potential denominator vanishes at r={real[real >= bh.r_plus - 1e-12][0]:.6g} >= r_+"
                )
        # slope test: q(r)/r must settle at large radii
        r = np.array([1e4, 1e5, 1e6, 1e7]) * max(bh.M, bh.r_plus)
        slope = self(bh, r) / r
        if not np.all(np.isfinite(slope)):
            raise ParameterError("custom potential is not finite at large radii")
        jumps = np.abs(np.diff(slope))
        if jumps[-1] > 1e-3 * max(1.0, abs(slope[-1])) or jumps[-1] > jumps[0] + 1e-15:
            raise ParameterError("custom potential q(r)/r does not converge as r -> infinity")
        samples = bh.r_plus * (1.0 + np.logspace(-8, 6, 400))
        bounded = np.abs(self(bh, samples)) / (samples**2 + bh.a**2)
        if not np.all(np.isfinite(bounded)):
            raise ParameterError("custom potential is singular on [r_+, inf)")


def potential_q(p: Potential, bh: BlackHole, r):
    """Evaluate q(r) for r >= r_+."""
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < bh.r_plus):
        raise DomainError(f"potential evaluated inside the outer horizon r_+={bh.r_plus}")
    p.validate(bh)
    out = p(bh, r_arr)
    return float(out) if np.ndim(out) == 0 else out
