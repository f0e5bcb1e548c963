"""Real spherical harmonics, Legendre polynomials and spherical Bessel functions.

Real harmonics use the Condon-Shortley-free convention::

    Y_l0  = N_l0 P_l(cos theta)
    Y_lm  = sqrt(2) N_lm P_l^m(cos theta) cos(m phi)      m > 0
    Y_l-m = sqrt(2) N_lm P_l^m(cos theta) sin(m phi)      m > 0

with P_l^m positive near the north pole, so Y_11, Y_1-1, Y_10 are positive
multiples of x, y, z. Coefficients of all (l, m) up to L are stored flat at
index ``l*l + l + m``.
"""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from scipy.special import spherical_jn

Y00 = 1.0 / math.sqrt(4 * math.pi)


@lru_cache(maxsize=64)
def _leggauss(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def gauss_legendre(n: int):
    """Nodes and weights of the n-point Gauss-Legendre rule on [-1, 1] (read-only, cached)."""
    return _leggauss(int(n))


def lm_index(ell: int, m: int) -> int:
    return ell * ell + ell + m


def n_coeffs(lmax: int) -> int:
    return (lmax + 1) ** 2


def legendre_all(lmax: int, u):
    """P_0..P_lmax at ``u`` by upward recurrence; shape (lmax+1, *u.shape)."""
    u = np.asarray(u, dtype=float)
    out = np.empty((lmax + 1,) + u.shape)
    out[0] = 1.0
    if lmax >= 1:
        out[1] = u
    for ell in range(1, lmax):
        out[ell + 1] = ((2 * ell + 1) * u * out[ell] - ell * out[ell - 1]) / (ell + 1)
    return out


def legendre_p(ell: int, u):
    """Legendre polynomial P_ell(u)."""
    if ell < 0:
        raise ValueError("ell must be non-negative")
    val = legendre_all(ell, u)[ell]
    return float(val) if np.ndim(val) == 0 else val


def spherical_jl(ell: int, x):
    """Spherical Bessel function j_ell(x) for x >= 0."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("spherical_jl requires x >= 0")
    val = spherical_jn(int(ell), x)
    return float(val) if val.ndim == 0 else val


def legendre_project(f, ell: int, order: int | None = None) -> float:
    """Integral of P_ell(u) f(u) over [-1, 1] by Gauss-Legendre quadrature.

    Parameters
    ----------
    f : callable
        Vectorized function on [-1, 1].
    ell : int
    order : int, optional
        Number of nodes; at least ``max(64, 4 ell)`` is always used.
    """
    n = max(64, 4 * ell, order or 0)
    x, w = gauss_legendre(n)
    return float(np.sum(w * legendre_all(ell, x)[ell] * np.asarray(f(x), dtype=float)))


def angles_from_xyz(xyz):
    xyz = np.asarray(xyz, dtype=float)
    norm = np.linalg.norm(xyz, axis=-1)
    if np.any(norm == 0):
        raise ValueError("zero vector has no direction")
    z = np.clip(xyz[..., 2] / norm, -1.0, 1.0)
    theta = np.arccos(z)
    phi = np.mod(np.arctan2(xyz[..., 1], xyz[..., 0]), 2 * np.pi)
    return theta, phi


def xyz_from_angles(theta, phi):
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def real_ylm_all(lmax: int, theta, phi):
    """All real harmonics up to ``lmax``; shape ((lmax+1)^2, *theta.shape)."""
    theta, phi = np.broadcast_arrays(np.asarray(theta, dtype=float), np.asarray(phi, dtype=float))
    ct, st = np.cos(theta), np.sin(theta)
    out = np.empty((n_coeffs(lmax),) + theta.shape)
    # fully normalized associated Legendre functions, no (-1)^m phase
    pmm = np.full(theta.shape, Y00)
    root2 = math.sqrt(2.0)
    for m in range(lmax + 1):
        if m > 0:
            pmm = math.sqrt((2 * m + 1) / (2.0 * m)) * st * pmm
        cos_m, sin_m = (np.cos(m * phi), np.sin(m * phi)) if m else (None, None)

        def store(ell, plm):
            if m == 0:
                out[lm_index(ell, 0)] = plm
            else:
                out[lm_index(ell, m)] = root2 * plm * cos_m
                out[lm_index(ell, -m)] = root2 * plm * sin_m

        store(m, pmm)
        if m == lmax:
            break
        p_prev, p_cur = pmm, math.sqrt(2 * m + 3.0) * ct * pmm
        store(m + 1, p_cur)
        for ell in range(m + 2, lmax + 1):
            a = math.sqrt((4.0 * ell * ell - 1) / (ell * ell - m * m))
            b = math.sqrt(((ell - 1.0) ** 2 - m * m) / (4.0 * (ell - 1) ** 2 - 1))
            p_prev, p_cur = p_cur, a * (ct * p_cur - b * p_prev)
            store(ell, p_cur)
    return out


def real_ylm(ell: int, m: int, theta, phi):
    """Real spherical harmonic Y_lm at polar angle ``theta`` and azimuth ``phi``."""
    if ell < 0 or abs(m) > ell:
        raise ValueError(f"need |m| <= ell, got ell={ell}, m={m}")
    val = real_ylm_all(ell, theta, phi)[lm_index(ell, m)]
    return float(val) if np.ndim(val) == 0 else val


def sphere_grid(n_theta: int, n_phi: int | None = None):
    """Product Gauss-Legendre (cos theta) x uniform (phi) grid.

    Returns flattened ``theta, phi, weights``; weights sum to 4 pi. Exact for
    band-limited integrands of degree below ``min(2 n_theta, n_phi)``.
    """
    n_phi = n_phi or 2 * n_theta
    x, w = gauss_legendre(n_theta)
    phi = 2 * np.pi * np.arange(n_phi) / n_phi
    th, ph = np.meshgrid(np.arccos(x), phi, indexing="ij")
    wt = np.outer(w, np.full(n_phi, 2 * np.pi / n_phi))
    return th.ravel(), ph.ravel(), wt.ravel()
