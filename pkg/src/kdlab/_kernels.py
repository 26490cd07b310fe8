"""Compiled stencil kernels for the partial-wave Hamiltonian.

Fields are complex arrays of shape (n_x, n_theta, 4).  Every kernel treats
values beyond the grid as zero (Dirichlet extension).
"""

import numba
import numpy as np


@numba.njit(cache=True, inline="always", fastmath=True, error_model="numpy")
def _node(psi, i, j, k, nx, nt):
    if 0 <= i < nx and 0 <= j < nt:
        return psi[i, j, k]
    return 0j


@numba.njit(cache=True, inline="always", fastmath=True, error_model="numpy")
def _h_at(psi, i, j, nx, nt, cx, ct, f, K, V, mu, nux, cos_t, s1, s2):
    p0 = psi[i, j, 0]
    p1 = psi[i, j, 1]
    p2 = psi[i, j, 2]
    p3 = psi[i, j, 3]
    dx0 = (_node(psi, i + 1, j, 0, nx, nt) - _node(psi, i - 1, j, 0, nx, nt)) * cx
    dx1 = (_node(psi, i + 1, j, 1, nx, nt) - _node(psi, i - 1, j, 1, nx, nt)) * cx
    dx2 = (_node(psi, i + 1, j, 2, nx, nt) - _node(psi, i - 1, j, 2, nx, nt)) * cx
    dx3 = (_node(psi, i + 1, j, 3, nx, nt) - _node(psi, i - 1, j, 3, nx, nt)) * cx
    dt0 = (_node(psi, i, j + 1, 0, nx, nt) - _node(psi, i, j - 1, 0, nx, nt)) * ct
    dt1 = (_node(psi, i, j + 1, 1, nx, nt) - _node(psi, i, j - 1, 1, nx, nt)) * ct
    dt2 = (_node(psi, i, j + 1, 2, nx, nt) - _node(psi, i, j - 1, 2, nx, nt)) * ct
    dt3 = (_node(psi, i, j + 1, 3, nx, nt) - _node(psi, i, j - 1, 3, nx, nt)) * ct
    F = f[i]
    Kj = K[j]
    o0 = 0j
    o1 = 0j
    o2 = 0j
    o3 = 0j
    if s1 != 0.0:
        o0 = s1 * (-1j * dx0 - F * (1j * dt1 - 1j * Kj * p1))
        o1 = s1 * (1j * dx1 - F * (1j * dt0 + 1j * Kj * p0))
        o2 = s1 * (1j * dx2 + F * (1j * dt3 - 1j * Kj * p3))
        o3 = s1 * (-1j * dx3 + F * (1j * dt2 + 1j * Kj * p2))
    if s2 != 0.0:
        v = V[i]
        m = mu[i]
        nn = nux[i] * cos_t[j]
        o0 += s2 * (v * p0 + (-m + 1j * nn) * p2)
        o1 += s2 * (v * p1 + (-m + 1j * nn) * p3)
        o2 += s2 * (v * p2 + (-m - 1j * nn) * p0)
        o3 += s2 * (v * p3 + (-m - 1j * nn) * p1)
    return o0, o1, o2, o3


@numba.njit(cache=True, inline="always", fastmath=True, error_model="numpy")
def _s_inv(c, o0, o1, o2, o3):
    inv = 1.0 / (1.0 - c * c)
    return (
        inv * (o0 + 1j * c * o1),
        inv * (o1 - 1j * c * o0),
        inv * (o2 - 1j * c * o3),
        inv * (o3 + 1j * c * o2),
    )


@numba.njit(cache=True, fastmath=True, error_model="numpy", nogil=True)
def apply_h(psi, out, hx, ht, f, K, V, mu, nux, cos_t, c, s1, s2, with_s_inv):
    nx, nt = psi.shape[0], psi.shape[1]
    cx = 0.5 / hx
    ct = 0.5 / ht
    for i in range(nx):
        for j in range(nt):
            o0, o1, o2, o3 = _h_at(psi, i, j, nx, nt, cx, ct, f, K, V, mu, nux, cos_t, s1, s2)
            if with_s_inv:
                o0, o1, o2, o3 = _s_inv(c[i, j], o0, o1, o2, o3)
            out[i, j, 0] = o0
            out[i, j, 1] = o1
            out[i, j, 2] = o2
            out[i, j, 3] = o3


@numba.njit(cache=True, fastmath=True, error_model="numpy", nogil=True)
def fixed_point_sweep(y, rhs, out, tau, hx, ht, f, K, V, mu, nux, cos_t, c):
    """out = rhs - i tau S^-1 H y; returns sum |out - y|^2 (unweighted)."""
    nx, nt = y.shape[0], y.shape[1]
    cx = 0.5 / hx
    ct = 0.5 / ht
    acc = 0.0
    for i in range(nx):
        for j in range(nt):
            o0, o1, o2, o3 = _h_at(y, i, j, nx, nt, cx, ct, f, K, V, mu, nux, cos_t, 1.0, 1.0)
            o0, o1, o2, o3 = _s_inv(c[i, j], o0, o1, o2, o3)
            n0 = rhs[i, j, 0] - 1j * tau * o0
            n1 = rhs[i, j, 1] - 1j * tau * o1
            n2 = rhs[i, j, 2] - 1j * tau * o2
            n3 = rhs[i, j, 3] - 1j * tau * o3
            d0 = n0 - y[i, j, 0]
            d1 = n1 - y[i, j, 1]
            d2 = n2 - y[i, j, 2]
            d3 = n3 - y[i, j, 3]
            acc += (d0.real * d0.real + d0.imag * d0.imag + d1.real * d1.real + d1.imag * d1.imag
                    + d2.real * d2.real + d2.imag * d2.imag + d3.real * d3.real + d3.imag * d3.imag)
            out[i, j, 0] = n0
            out[i, j, 1] = n1
            out[i, j, 2] = n2
            out[i, j, 3] = n3
    return acc


@numba.njit(cache=True, fastmath=True, error_model="numpy", nogil=True)
def s_density(psi, c):
    """Pointwise <psi, S psi> (real), shape (n_x, n_theta)."""
    nx, nt = psi.shape[0], psi.shape[1]
    out = np.empty((nx, nt))
    for i in range(nx):
        for j in range(nt):
            p0 = psi[i, j, 0]
            p1 = psi[i, j, 1]
            p2 = psi[i, j, 2]
            p3 = psi[i, j, 3]
            cc = c[i, j]
            # S = I + c diag(sigma2, -sigma2)
            s0 = p0 - 1j * cc * p1
            s1 = p1 + 1j * cc * p0
            s2 = p2 + 1j * cc * p3
            s3 = p3 - 1j * cc * p2
            v = (p0.conjugate() * s0 + p1.conjugate() * s1 + p2.conjugate() * s2 + p3.conjugate() * s3)
            out[i, j] = v.real
    return out


# Values below this are flushed to zero in the evolution sweep.  Gaussian tails
# otherwise decay into subnormal floats, which run ~3x slower on x86.
TINY = 1e-200


@numba.njit(cache=True, inline="always", fastmath=True, error_model="numpy")
def _flush(z):
    if abs(z.real) + abs(z.imag) < TINY:
        return 0j
    return z


@numba.njit(cache=True, fastmath=True, error_model="numpy", nogil=True)
def fixed_point_sweep_padded(y, rhs, out, tau, hx, ht, f, K, V, mu, nux, cos_t, c):
    """Branch-free variant of fixed_point_sweep on zero-padded arrays.

    y, rhs and out have shape (n_x + 2, n_theta + 2, 4); the one-node frame is
    the Dirichlet extension and is never written.
    """
    nx, nt = y.shape[0] - 2, y.shape[1] - 2
    cx = 0.5 / hx
    ct = 0.5 / ht
    acc = 0.0
    for i in range(nx):
        I = i + 1
        F = f[i]
        v = V[i]
        m = mu[i]
        nu = nux[i]
        for j in range(nt):
            J = j + 1
            p0 = y[I, J, 0]
            p1 = y[I, J, 1]
            p2 = y[I, J, 2]
            p3 = y[I, J, 3]
            dx0 = (y[I + 1, J, 0] - y[I - 1, J, 0]) * cx
            dx1 = (y[I + 1, J, 1] - y[I - 1, J, 1]) * cx
            dx2 = (y[I + 1, J, 2] - y[I - 1, J, 2]) * cx
            dx3 = (y[I + 1, J, 3] - y[I - 1, J, 3]) * cx
            dt0 = (y[I, J + 1, 0] - y[I, J - 1, 0]) * ct
            dt1 = (y[I, J + 1, 1] - y[I, J - 1, 1]) * ct
            dt2 = (y[I, J + 1, 2] - y[I, J - 1, 2]) * ct
            dt3 = (y[I, J + 1, 3] - y[I, J - 1, 3]) * ct
            Kj = K[j]
            nn = nu * cos_t[j]
            a = -m + 1j * nn
            b = -m - 1j * nn
            # -i S^-1 H y, with the factor -i folded into each row
            o0 = -dx0 - F * (dt1 - Kj * p1) - 1j * (v * p0 + a * p2)
            o1 = dx1 - F * (dt0 + Kj * p0) - 1j * (v * p1 + a * p3)
            o2 = dx2 + F * (dt3 - Kj * p3) - 1j * (v * p2 + b * p0)
            o3 = -dx3 + F * (dt2 + Kj * p2) - 1j * (v * p3 + b * p1)
            cc = c[i, j]
            s = tau / (1.0 - cc * cc)
            q0 = s * (o0 + 1j * cc * o1)
            q1 = s * (o1 - 1j * cc * o0)
            q2 = s * (o2 - 1j * cc * o3)
            q3 = s * (o3 + 1j * cc * o2)
            n0 = _flush(rhs[I, J, 0] + q0)
            n1 = _flush(rhs[I, J, 1] + q1)
            n2 = _flush(rhs[I, J, 2] + q2)
            n3 = _flush(rhs[I, J, 3] + q3)
            d0 = n0 - p0
            d1 = n1 - p1
            d2 = n2 - p2
            d3 = n3 - p3
            acc += (d0.real * d0.real + d0.imag * d0.imag + d1.real * d1.real + d1.imag * d1.imag
                    + d2.real * d2.real + d2.imag * d2.imag + d3.real * d3.real + d3.imag * d3.imag)
            out[I, J, 0] = n0
            out[I, J, 1] = n1
            out[I, J, 2] = n2
            out[I, J, 3] = n3
    return acc


@numba.njit(cache=True, fastmath=True, nogil=True)
def extrapolate(out, a, b, c):
    """out = 3a - 3b + c (quadratic extrapolation of three equally spaced states)."""
    fo = out.ravel()
    fa = a.ravel()
    fb = b.ravel()
    fc = c.ravel()
    for k in range(fo.size):
        fo[k] = 3.0 * (fa[k] - fb[k]) + fc[k]


@numba.njit(cache=True, fastmath=True, nogil=True)
def sq_norm(a):
    fa = a.ravel()
    acc = 0.0
    for k in range(fa.size):
        acc += fa[k].real * fa[k].real + fa[k].imag * fa[k].imag
    return acc
