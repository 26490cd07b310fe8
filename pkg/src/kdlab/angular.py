"""The a = 0 angular Dirac operator A_kappa on (0, pi).

    A_kappa = [[0, 1], [-1, 0]] d/dtheta + kappa/sin(theta) [[0, 1], [1, 0]]

acting on (upper, lower) components.  Discretized on the midpoint grid
theta_j = (j + 1/2) pi / n with a centered difference under zero extension,
which is exactly antisymmetric, so the assembled matrix is exactly symmetric.

Any antisymmetric nearest-neighbour stencil has a doubler: the map
(u, v) -> ((-1)^j v, (-1)^j u) commutes with the discrete operator, so every
eigenvalue appears twice, once with a smooth eigenvector and once with a
checkerboard one.  :func:`eigenbasis` resolves each pair by taking the
least-rough vector in the two-dimensional eigenspace.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from kdlab.errors import ConvergenceError, ParameterError

W = np.array([[0, 1], [1j, 0]], dtype=complex)
W_INV = np.array([[0, -1j], [1, 0]], dtype=complex)
SIGMA1 = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA2 = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA3 = np.array([[1, 0], [0, -1]], dtype=complex)


def check_half_integer(kappa) -> float:
    k = float(kappa)
    if not np.isfinite(k) or abs((k - 0.5) - round(k - 0.5)) > 1e-12:
        raise ParameterError(f"kappa must be a half-integer, got {kappa}")
    return round(2 * k) / 2


def lambda_formula(kappa: float, m: int) -> float:
    """Closed-form eigenvalue sign(m)(|kappa| - 1/2 + |m|)."""
    if m == 0:
        raise ParameterError("angular index m must be nonzero")
    return float(np.sign(m) * (abs(kappa) - 0.5 + abs(m)))


@dataclass(frozen=True)
class AngularGrid:
    n_theta: int
    nodes: np.ndarray = field(init=False, repr=False)
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = int(self.n_theta)
        if n < 8:
            raise ParameterError(f"n_theta must be at least 8, got {n}")
        if n % 2:
            # for odd n the mode/doubler pairs split and no eigenvector is smooth
            raise ParameterError(f"n_theta must be even, got {n}")
        object.__setattr__(self, "n_theta", n)
        h = np.pi / n
        object.__setattr__(self, "nodes", (np.arange(n) + 0.5) * h)
        object.__setattr__(self, "weights", np.full(n, h))

    @property
    def h(self) -> float:
        return np.pi / self.n_theta


def difference_matrix(n: int, h: float, sparse: bool = False):
    """Centered first difference with zero extension; exactly antisymmetric."""
    off = np.full(n - 1, 0.5 / h)
    D = sp.diags([off, -off], [1, -1], shape=(n, n), format="csr")
    return D if sparse else D.toarray()


def assemble_A(kappa, grid: AngularGrid, sparse: bool = False):
    """Real symmetric matrix of A_kappa, size 2 n_theta, blocks (upper, lower)."""
    kappa = check_half_integer(kappa)
    n = grid.n_theta
    D = difference_matrix(n, grid.h, sparse=True)
    K = sp.diags(kappa / np.sin(grid.nodes))
    A = sp.bmat([[None, D + K], [-D + K, None]], format="csr")
    return A if sparse else A.toarray()


@dataclass(frozen=True)
class AngularEigenpair:
    kappa: float
    m: int
    lam: float
    g: np.ndarray = field(repr=False)

    @property
    def lam_formula(self) -> float:
        return lambda_formula(self.kappa, self.m)


def _fix_sign(g: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    # first nonzero component at the smallest theta node is made positive
    n = g.size // 2
    stacked = np.stack([g[:n], g[n:]], axis=1).ravel()
    scale = np.max(np.abs(g))
    idx = np.flatnonzero(np.abs(stacked) > tol * scale)
    return -g if stacked[idx[0]] < 0 else g


def doubler_matrix(n: int) -> np.ndarray:
    """Involution (u, v) -> ((-1)^j v, (-1)^j u) commuting with the discrete A_kappa."""
    P = np.diag((-1.0) ** np.arange(n))
    return np.block([[np.zeros((n, n)), P], [P, np.zeros((n, n))]])


def _roughness(g: np.ndarray) -> float:
    n = g.size // 2
    return float(np.sum(np.diff(g[:n]) ** 2) + np.sum(np.diff(g[n:]) ** 2))


def _smooth_member(V: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    # V spans {g, Gamma g}; the Gamma-eigenvectors are (g +- Gamma g)/sqrt 2,
    # so g is recovered as their normalised sum or difference
    _, c = np.linalg.eigh(V.T @ gamma @ V)
    v_minus, v_plus = V @ c[:, 0], V @ c[:, 1]
    cand = [(v_plus + v_minus) / np.sqrt(2.0), (v_plus - v_minus) / np.sqrt(2.0)]
    return min(cand, key=_roughness)


def full_spectrum(kappa, grid: AngularGrid):
    """All eigenvalues/eigenvectors of the discrete A_kappa (doublers included)."""
    lam, vec = np.linalg.eigh(assemble_A(kappa, grid))
    return lam, vec / np.sqrt(grid.h)


def eigenbasis(kappa, grid: AngularGrid, m_max: int = 16, tol: float | None = None):
    """Physical eigenpairs for m in {-m_max..-1, 1..m_max}, sorted by eigenvalue.

    Eigenvectors are normalised in the discrete L^2((0, pi), dtheta)^2 product.
    Raises ConvergenceError when |lambda - lambda_formula| exceeds ``tol``
    (default: no check).
    """
    kappa = check_half_integer(kappa)
    m_max = int(m_max)
    if m_max < 1:
        raise ParameterError("m_max must be at least 1")
    n = grid.n_theta
    if 2 * m_max > n:
        raise ParameterError(f"m_max={m_max} needs n_theta >= {2 * m_max}")
    lam, vec = np.linalg.eigh(assemble_A(kappa, grid))
    gamma = doubler_matrix(n)
    order = np.argsort(lam)
    out = []
    for sign in (1, -1):
        idx = order[lam[order] > 0] if sign > 0 else order[lam[order] < 0][::-1]
        for k in range(m_max):
            i, j = idx[2 * k], idx[2 * k + 1]
            g = _smooth_member(vec[:, [i, j]], gamma)
            g = _fix_sign(g / np.sqrt(grid.h * np.dot(g, g)))
            out.append(AngularEigenpair(kappa, sign * (k + 1), 0.5 * (lam[i] + lam[j]), g))
    out.sort(key=lambda p: p.lam)
    if tol is not None:
        for p in out:
            err = abs(p.lam - p.lam_formula)
            if err > tol:
                raise ConvergenceError(
                    f"angular eigenvalue kappa={kappa}, m={p.m}: |{p.lam:.6g} - {p.lam_formula:.6g}| = {err:.3e} > {tol}"
                )
    return out


def pair_splitting(kappa, grid: AngularGrid, m_max: int) -> float:
    """Largest gap inside the degenerate (mode, doubler) pairs; ~ machine precision."""
    lam = np.linalg.eigvalsh(assemble_A(kappa, grid))
    pos = np.sort(lam[lam > 0])[: 2 * m_max]
    return float(np.max(np.abs(pos[0::2] - pos[1::2])))


def gram_matrix(pairs, grid: AngularGrid) -> np.ndarray:
    G = np.array([p.g for p in pairs])
    return grid.h * G @ G.T


def sigma3_flip_residual(pairs, grid: AngularGrid) -> float:
    """max_m min_sign || sigma_3 g_m + s g_{-m} || over the computed pairs."""
    by_m = {p.m: p.g for p in pairs}
    n = grid.n_theta
    worst = 0.0
    for m, g in by_m.items():
        if -m not in by_m:
            continue
        flipped = np.concatenate([g[:n], -g[n:]])
        other = by_m[-m]
        res = min(np.linalg.norm(flipped + other), np.linalg.norm(flipped - other))
        worst = max(worst, np.sqrt(grid.h) * res)
    return worst


@dataclass
class ConjugationReport:
    kappa: float
    n_theta: int
    forward: float   # || W A W^-1 - i sigma3 A_{-kappa} ||
    backward: float  # || W^-1 A W - i sigma3 A_{-kappa} ||
    sigma3: float    # || W^-1 sigma3 W + sigma3 ||

    @property
    def max_residual(self) -> float:
        return max(self.forward, self.backward, self.sigma3)


def conjugation_check(kappa, grid: AngularGrid) -> ConjugationReport:
    """Residuals of the W-conjugation identities for the discrete matrices."""
    kappa = check_half_integer(kappa)
    n = grid.n_theta
    I = np.eye(n)
    Wb = np.kron(W, I)
    Wb_inv = np.kron(W_INV, I)
    A = assemble_A(kappa, grid)
    target = 1j * np.kron(SIGMA3, I) @ assemble_A(-kappa, grid)
    fwd = np.abs(Wb @ A @ Wb_inv - target).max()
    bwd = np.abs(Wb_inv @ A @ Wb - target).max()
    s3 = np.abs(W_INV @ SIGMA3 @ W + SIGMA3).max()
    return ConjugationReport(kappa, n, float(fwd), float(bwd), float(s3))
