"""Weight matrix S, partial-wave Hamiltonians H_1, H_2 and the S-inner product.

Fields live in the transformed (flat measure) representation on a tensor grid
in (x, theta): a complex array of shape (n_x, n_theta, 4).  The discrete
L^2 product is h_x h_theta sum <phi, psi>_C4 and the S-product inserts the
node-wise 4x4 matrix

    S = I + c diag(sigma_2, -sigma_2),   c = a sqrt(Delta) sin(theta)/(r^2 + a^2).

After substituting i d/dphi -> kappa, the Hamiltonian H = H_1 + H_2 is
symmetric in the plain product, so S^-1 H is symmetric in the S-product.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from kdlab import _kernels
from kdlab.angular import SIGMA1, SIGMA2, SIGMA3, W, W_INV, AngularGrid, check_half_integer, difference_matrix
from kdlab.background import BlackHole, Potential, log_horizon_distance
from kdlab.errors import ParameterError

I2 = np.eye(2, dtype=complex)
Z2 = np.zeros((2, 2), dtype=complex)


def _blocks(a, b, c, d):
    return np.block([[a, b], [c, d]])


class Grid2D:
    """Uniform tortoise grid on [-X, X] times the midpoint angular grid.

    Coefficient tables depend on x only through r(x); the distance to the
    horizon d = r - r_+ is kept separately so Delta = d (d + r_+ - r_-) stays
    accurate deep in the near-horizon region.
    """

    def __init__(self, bh: BlackHole, X: float = 100.0, n_x: int = 2048, n_theta: int = 64):
        if not X > 0:
            raise ParameterError(f"half-width X must be positive, got {X}")
        if int(n_x) < 8:
            raise ParameterError(f"n_x must be at least 8, got {n_x}")
        self.bh = bh
        self.X = float(X)
        self.n_x = int(n_x)
        self.theta = AngularGrid(n_theta)
        self.x = np.linspace(-self.X, self.X, self.n_x)
        self.h_x = 2.0 * self.X / (self.n_x - 1)
        u = log_horizon_distance(bh, self.x)
        self.d = np.exp(u)
        self.r = bh.r_plus + self.d
        self.delta = self.d * (self.d + bh.r_plus - bh.r_minus)
        r2a2 = self.r**2 + bh.a**2
        self.one_over_r2a2 = 1.0 / r2a2
        self.sqrt_delta_over_r2a2 = np.sqrt(self.delta) / r2a2

    @property
    def n_theta(self) -> int:
        return self.theta.n_theta

    @property
    def h_theta(self) -> float:
        return self.theta.h

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_x, self.n_theta, 4)

    @property
    def size(self) -> int:
        return self.n_x * self.n_theta * 4

    @property
    def cell(self) -> float:
        return self.h_x * self.theta.h

    def key(self) -> tuple:
        bh = self.bh
        return (bh.M, bh.a, bh.Q, bh.x_offset, self.X, self.n_x, self.n_theta)

    def same_as(self, other: "Grid2D") -> bool:
        return self is other or self.key() == other.key()

    def describe_mismatch(self, other: "Grid2D") -> str:
        names = ("M", "a", "Q", "x_offset", "X", "n_x", "n_theta")
        diffs = [f"{n}: {p} != {q}" for n, p, q in zip(names, self.key(), other.key()) if p != q]
        return "grid mismatch (" + ", ".join(diffs) + ")"

    @cached_property
    def weight(self) -> "WeightMatrix":
        return assemble_S(self)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape, dtype=complex)


@dataclass
class SpinorField:
    kappa: float
    data: np.ndarray
    grid: Grid2D

    def __post_init__(self):
        self.kappa = check_half_integer(self.kappa)
        self.data = np.asarray(self.data, dtype=complex)
        if self.data.shape != self.grid.shape:
            raise ParameterError(f"field shape {self.data.shape} != grid shape {self.grid.shape}")

    def copy(self) -> "SpinorField":
        return SpinorField(self.kappa, self.data.copy(), self.grid)

    def with_data(self, data: np.ndarray) -> "SpinorField":
        return SpinorField(self.kappa, data, self.grid)


class WeightMatrix:
    """Node-wise S = I + c diag(sigma2, -sigma2) with closed-form powers.

    Each 2x2 block has eigenvalues 1 +- c along the eigenvectors of sigma2, so
    S^p = alpha_p I + beta_p diag(sigma2, -sigma2) with
    alpha_p = ((1+c)^p + (1-c)^p)/2 and beta_p = ((1+c)^p - (1-c)^p)/2.
    """

    def __init__(self, c: np.ndarray):
        self.c = np.ascontiguousarray(c, dtype=float)
        if np.any(np.abs(self.c) > 0.5 + 1e-14):
            # |c| <= |a| r/(r^2 + a^2) <= 1/2 holds for every admissible geometry
            raise AssertionError(f"weight coefficient exceeds 1/2: max |c| = {np.abs(self.c).max()}")

    def coefficients(self, p: float):
        c = self.c
        up, dn = (1.0 + c) ** p, (1.0 - c) ** p
        return 0.5 * (up + dn), 0.5 * (up - dn)

    def apply_power(self, psi: np.ndarray, p: float) -> np.ndarray:
        alpha, beta = self.coefficients(p)
        alpha = alpha[..., None]
        beta = beta[..., None]
        out = alpha * psi
        # diag(sigma2, -sigma2) psi = (-i p1, i p0, i p3, -i p2)
        rot = np.stack([-1j * psi[..., 1], 1j * psi[..., 0], 1j * psi[..., 3], -1j * psi[..., 2]], axis=-1)
        return out + beta * rot

    def apply(self, psi):
        return self.apply_power(psi, 1.0)

    def apply_inverse(self, psi):
        return self.apply_power(psi, -1.0)

    def node_matrix(self, i: int, j: int, p: float = 1.0) -> np.ndarray:
        alpha, beta = self.coefficients(p)
        J = _blocks(SIGMA2, Z2, Z2, -SIGMA2)
        return alpha[i, j] * np.eye(4) + beta[i, j] * J

    def spectrum_bounds(self) -> tuple[float, float]:
        c = np.abs(self.c)
        return float(1.0 - c.max()), float(1.0 + c.max())

    def sparse(self, p: float = 1.0) -> sp.csr_matrix:
        alpha, beta = self.coefficients(p)
        a = alpha.ravel()
        b = beta.ravel()
        J = _blocks(SIGMA2, Z2, Z2, -SIGMA2)
        blocks = [sp.kron(sp.diags(a), sp.identity(4)), sp.kron(sp.diags(b), sp.csr_matrix(J))]
        return (blocks[0] + blocks[1]).tocsr()


def assemble_S(grid: Grid2D) -> WeightMatrix:
    c = grid.bh.a * grid.sqrt_delta_over_r2a2[:, None] * np.sin(grid.theta.nodes)[None, :]
    return WeightMatrix(c)


def plain_inner(a: np.ndarray, b: np.ndarray, grid: Grid2D) -> complex:
    return complex(np.vdot(a, b) * grid.cell)


def plain_norm(a: np.ndarray, grid: Grid2D) -> float:
    return float(np.sqrt(np.vdot(a, a).real * grid.cell))


def s_inner(field1: SpinorField, field2: SpinorField) -> complex:
    """(Psi, Phi)_S = (Psi, S Phi) by midpoint/rectangle quadrature."""
    if not field1.grid.same_as(field2.grid):
        raise ParameterError(field1.grid.describe_mismatch(field2.grid))
    grid = field1.grid
    return plain_inner(field1.data, grid.weight.apply(field2.data), grid)


def s_norm(field: SpinorField | np.ndarray, grid: Grid2D | None = None) -> float:
    if isinstance(field, SpinorField):
        grid, data = field.grid, field.data
    else:
        data = field
    dens = _kernels.s_density(np.ascontiguousarray(data), grid.weight.c)
    return float(np.sqrt(max(dens.sum(), 0.0) * grid.cell))


class PartialWaveOperator:
    """H^(kappa) = H_1 + H_2 on a Grid2D for a particle of given mass and potential.

    ``mass`` is the particle rest mass m; the electric coupling enters through
    ``potential`` (default: e = 0).
    """

    def __init__(self, grid: Grid2D, kappa, mass: float = 0.0, potential: Potential | None = None):
        self.grid = grid
        self.kappa = check_half_integer(kappa)
        self.mass = float(mass)
        self.potential = potential if potential is not None else Potential.standard(0.0)
        bh = grid.bh
        self.potential.validate(bh)
        r = grid.r
        f = grid.sqrt_delta_over_r2a2
        self.f = np.ascontiguousarray(f)
        self.K = np.ascontiguousarray(self.kappa / np.sin(grid.theta.nodes))
        self.cos_t = np.ascontiguousarray(np.cos(grid.theta.nodes))
        self.V = np.ascontiguousarray(-(bh.a * self.kappa + self.potential(bh, r)) * grid.one_over_r2a2)
        self.mu = np.ascontiguousarray(self.mass * r * f)
        self.nux = np.ascontiguousarray(bh.a * self.mass * f)
        self.weight = grid.weight

    def _run(self, psi, s1, s2, with_s_inv):
        psi = np.ascontiguousarray(psi, dtype=complex)
        out = np.empty_like(psi)
        g = self.grid
        _kernels.apply_h(psi, out, g.h_x, g.h_theta, self.f, self.K, self.V, self.mu,
                         self.nux, self.cos_t, self.weight.c, s1, s2, with_s_inv)
        return out

    def h1(self, psi):
        return self._run(psi, 1.0, 0.0, False)

    def h2(self, psi):
        return self._run(psi, 0.0, 1.0, False)

    def h(self, psi):
        return self._run(psi, 1.0, 1.0, False)

    def generator(self, psi):
        """S^-1 H psi."""
        return self._run(psi, 1.0, 1.0, True)

    def similarity(self, psi):
        """S^-1/2 H S^-1/2 psi, symmetric in the plain product."""
        w = self.weight
        return w.apply_power(self.h(w.apply_power(psi, -0.5)), -0.5)

    def h2_symbol(self, i: int, j: int) -> np.ndarray:
        """4x4 Hermitian matrix of H_2 at node (i, j)."""
        v, m = self.V[i], self.mu[i]
        n = self.nux[i] * self.cos_t[j]
        return v * np.eye(4) + _blocks(Z2, (-m + 1j * n) * I2, (-m - 1j * n) * I2, Z2)

    def h2_norm_max(self) -> float:
        """max over nodes of the spectral norm of the H_2 symbol (closed form).

        The symbol is v I + [[0, z I], [conj(z) I, 0]] with eigenvalues v +- |z|.
        """
        z = np.abs(self.mu[:, None] - 1j * self.nux[:, None] * self.cos_t[None, :])
        return float(np.max(np.abs(self.V)[:, None] + z))

    def sparse(self, part: str = "H") -> sp.csr_matrix:
        """Sparse matrix of H, H1 or H2 in C order (x, theta, component)."""
        g = self.grid
        nx, nt = g.n_x, g.n_theta
        Ix, It = sp.identity(nx), sp.identity(nt)
        Dx = difference_matrix(nx, g.h_x, sparse=True)
        Dt = difference_matrix(nt, g.h_theta, sparse=True)
        F = sp.diags(self.f)
        K = sp.diags(self.K)
        diag_pm = lambda m: sp.csr_matrix(_blocks(m, Z2, Z2, -m))
        total = sp.csr_matrix((g.size, g.size), dtype=complex)
        if part in ("H", "H1"):
            total = total + sp.kron(sp.kron(Dx, It), diag_pm(-1j * SIGMA3))
            total = total + sp.kron(sp.kron(F, 1j * Dt), diag_pm(-SIGMA1))
            total = total + sp.kron(sp.kron(F, K), diag_pm(-SIGMA2))
        if part in ("H", "H2"):
            total = total + sp.kron(sp.kron(sp.diags(self.V), It), sp.identity(4))
            total = total + sp.kron(sp.kron(sp.diags(self.mu), It), sp.csr_matrix(_blocks(Z2, -I2, -I2, Z2)))
            total = total + sp.kron(sp.kron(sp.diags(self.nux), sp.diags(self.cos_t)),
                                    sp.csr_matrix(_blocks(Z2, 1j * I2, -1j * I2, Z2)))
        return total.tocsr()

    def h1_block(self) -> sp.csr_matrix:
        """The two-component operator h_1 = -s3 i d_x - f (s1 i d_theta + s2 kappa/sin)."""
        g = self.grid
        It = sp.identity(g.n_theta)
        Dx = difference_matrix(g.n_x, g.h_x, sparse=True)
        Dt = difference_matrix(g.n_theta, g.h_theta, sparse=True)
        F = sp.diags(self.f)
        return (sp.kron(sp.kron(Dx, It), -1j * SIGMA3)
                - sp.kron(sp.kron(F, 1j * Dt), SIGMA1)
                - sp.kron(sp.kron(F, sp.diags(self.K)), SIGMA2)).tocsr()

    def h1_conjugation_residual(self) -> float:
        """max |W^-1 h_1 W - (s3 i d_x - f A_kappa)| over matrix entries."""
        g = self.grid
        Ix, It = sp.identity(g.n_x), sp.identity(g.n_theta)
        Dx = difference_matrix(g.n_x, g.h_x, sparse=True)
        Dt = difference_matrix(g.n_theta, g.h_theta, sparse=True)
        Wb = sp.kron(sp.kron(Ix, It), W)
        Wb_inv = sp.kron(sp.kron(Ix, It), W_INV)
        # A_kappa = [[0, 1], [-1, 0]] d_theta + kappa/sin [[0, 1], [1, 0]] in (theta, component) order
        A = sp.kron(Dt, np.array([[0, 1], [-1, 0]])) + sp.kron(sp.diags(self.K), SIGMA1)
        target = sp.kron(sp.kron(Dx, It), 1j * SIGMA3) - sp.kron(sp.diags(self.f), A)
        diff = (Wb_inv @ self.h1_block() @ Wb - target).tocoo()
        return float(np.abs(diff.data).max(initial=0.0))

    def dense(self, form: str = "similarity") -> np.ndarray:
        """Dense matrix for small instances: 'H', 'generator' (S^-1 H) or 'similarity'."""
        H = self.sparse("H").toarray()
        if form == "H":
            return H
        if form == "generator":
            return self.weight.sparse(-1.0).toarray() @ H
        if form == "similarity":
            Sh = self.weight.sparse(-0.5).toarray()
            return Sh @ H @ Sh
        raise ValueError(f"unknown form {form!r}")


def apply_H1(op: PartialWaveOperator, field: SpinorField) -> SpinorField:
    return field.with_data(op.h1(field.data))


def apply_H2(op: PartialWaveOperator, field: SpinorField) -> SpinorField:
    return field.with_data(op.h2(field.data))


def apply_H(op: PartialWaveOperator, field: SpinorField) -> SpinorField:
    return field.with_data(op.h(field.data))


def similarity_form(op: PartialWaveOperator, field: SpinorField) -> SpinorField:
    return field.with_data(op.similarity(field.data))


def write_dense(path, matrix: np.ndarray) -> None:
    """Little-endian: u64 n_rows, then row-major (re, im) float64 pairs."""
    m = np.ascontiguousarray(matrix, dtype="<c16")
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("dense export expects a square matrix")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", m.shape[0]))
        fh.write(m.tobytes(order="C"))


def read_dense(path) -> np.ndarray:
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<Q", fh.read(8))
        data = np.frombuffer(fh.read(), dtype="<c16")
    if data.size != n * n:
        raise ValueError(f"dense file holds {data.size} entries, expected {n * n}")
    return data.reshape(n, n).astype(complex)


# Coefficient matrices of the system before it is solved for the time
# derivative; multiplying by B = [[0, -i s3], [i s3, 0]] must give S and the
# coefficients of H_1 + H_2 term by term.
REARRANGE = _blocks(Z2, -1j * SIGMA3, 1j * SIGMA3, Z2)


def rearrangement_residual(c: float = 0.3) -> float:
    """Max deviation in the node-wise algebra turning the coupled system into S^-1 H."""
    off = lambda m: _blocks(Z2, m, m, Z2)
    pre = {
        "dt": _blocks(Z2, -1j * SIGMA3, 1j * SIGMA3, Z2) + c * off(SIGMA1),
        "dx": off(I2),
        "f_dtheta": off(1j * SIGMA2),
        "f_over_sin_kappa": off(-SIGMA1),
        "potential": _blocks(Z2, 1j * SIGMA3, -1j * SIGMA3, Z2),
        "mass_r_f": 1j * _blocks(SIGMA3, Z2, Z2, -SIGMA3),
        "a_mass_f_cos": _blocks(-SIGMA3, Z2, Z2, -SIGMA3),
    }
    # the same terms in S^-1 H form (i d/dx and i d/dtheta kept as the derivative factor)
    post = {
        "dt": np.eye(4) + c * _blocks(SIGMA2, Z2, Z2, -SIGMA2),
        "dx": _blocks(-SIGMA3, Z2, Z2, SIGMA3) * 1j,
        "f_dtheta": _blocks(-SIGMA1, Z2, Z2, SIGMA1) * 1j,
        "f_over_sin_kappa": _blocks(-SIGMA2, Z2, Z2, SIGMA2),
        "potential": -np.eye(4),
        "mass_r_f": -off(I2),
        "a_mass_f_cos": _blocks(Z2, 1j * I2, -1j * I2, Z2),
    }
    return max(float(np.abs(REARRANGE @ pre[k] - post[k]).max()) for k in pre)
