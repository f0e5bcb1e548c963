"""Correlation kernels C(r), D(r) and the mode kernels C~_l(r, r') on a radial grid.

Two independent routes compute C~_l:

* spectral: 4 pi int k^2 P(k) j_l(kr) j_l(kr') dk with composite Gauss-Legendre
  panels no wider than half an oscillation period of j_l(k max(r, r')).
* Legendre: (1/2) int P_l(u) C(sqrt(r^2 + r'^2 - 2 r r' u)) du, integrated in the
  separation rho = |r - r'| .. r + r' so that the sharp feature of C near u = 1
  is resolved by panels sized to the kernel's length scale.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gammaln, spherical_jn

from ._parallel import parallel_map
from .harmonics import gauss_legendre, legendre_all
from .spectrum import PowerSpectrum, SpectralMoments, effective_kmax, moment, spectral_moments

CROSSOVER = 40.0
DEFAULT_TOL = 1e-9
PANEL_NODES = 16
CACHE_MAGIC = b"CHI2KRN\x00"
CACHE_VERSION = 1


class QuadratureError(ArithmeticError):
    def __init__(self, what: str, achieved: float, tol: float, where=None):
        self.achieved, self.tol, self.where = achieved, tol, where
        loc = f" at (l, i, j) = {where}" if where is not None else ""
        super().__init__(f"{what}: quadrature did not converge{loc}; "
                         f"achieved {achieved:.3g} > tolerance {tol:.3g}")


class GridError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RadialGrid:
    """Strictly increasing positive radii; the origin is never a grid point."""

    radii: np.ndarray

    def __post_init__(self):
        r = np.array(self.radii, dtype=float).ravel()
        if r.size < 1 or not np.all(np.isfinite(r)) or r[0] <= 0 or np.any(np.diff(r) <= 0):
            raise GridError("grid radii must be finite, positive and strictly increasing")
        r.setflags(write=False)
        object.__setattr__(self, "radii", r)

    @classmethod
    def uniform(cls, r_max: float, points: int) -> "RadialGrid":
        return cls(r_max * np.arange(1, points + 1) / points)

    @classmethod
    def log(cls, r_max: float, points: int, r_min: float | None = None) -> "RadialGrid":
        r_min = r_max / 100 if r_min is None else r_min
        return cls(np.geomspace(r_min, r_max, points))

    def __len__(self):
        return self.radii.size

    @property
    def r_max(self) -> float:
        return float(self.radii[-1])

    @property
    def max_spacing(self) -> float:
        r = self.radii
        return float(np.max(np.diff(r))) if r.size > 1 else float(r[0])

    def check_nyquist(self, k_eff: float):
        if self.max_spacing >= math.pi / k_eff:
            raise GridError(f"grid spacing {self.max_spacing:.4g} is not below pi/k_eff = "
                            f"{math.pi / k_eff:.4g}; refine the grid")


# ---------------------------------------------------------------------------
# k-space quadrature

def k_rule(spec: PowerSpectrum, r_big: float, refine: int = 1):
    """Nodes ``k`` and weights ``w`` with sum(w f(k)) ~ 4 pi int P(k) f(k) dk.

    Panels are at most half a period of sin(k r_big) wide, so products of two
    spherical Bessel functions of argument up to k r_big see at most one full
    oscillation per panel.
    """
    x, gw = gauss_legendre(PANEL_NODES)
    breaks = spec.segments()
    h = math.pi / r_big if r_big > 0 else math.inf
    if spec.kind == "exponential":
        h = min(h, 0.25 * spec.ktilde)
    h /= refine
    ks, ws = [], []
    for a, b in zip(breaks[:-1], breaks[1:]):
        npan = max(1, math.ceil((b - a) / h)) if math.isfinite(h) else 1
        edges = np.linspace(a, b, npan + 1)
        half = 0.5 * np.diff(edges)[:, None]
        mid = 0.5 * (edges[1:] + edges[:-1])[:, None]
        ks.append((mid + half * x).ravel())
        ws.append((half * gw).ravel())
    k = np.concatenate(ks)
    w = np.concatenate(ws) * 4 * math.pi * spec(k)
    return k, w


def _sinc(x):
    return np.sinc(np.asarray(x) / np.pi)


def _exp_complex_parts(spec: PowerSpectrum, r, q: float):
    # (s - i r)^(-q) = |z|^-q exp(i q atan(r/s)), s = 1/ktilde
    s = 1.0 / spec.ktilde
    mag = (s * s + r * r) ** (-0.5 * q)
    ang = q * np.arctan2(r, s)
    return mag * np.cos(ang), mag * np.sin(ang)


def _c_exponential(spec, r):
    m = spec.power
    out = np.empty_like(r)
    zero = r == 0
    out[zero] = moment(spec, 0)
    rr = r[~zero]
    _, im = _exp_complex_parts(spec, rr, m + 2)
    out[~zero] = 4 * math.pi * spec.amplitude * math.exp(gammaln(m + 2)) * im / rr
    return out


def _d_exponential(spec, r):
    m = spec.power
    out = np.empty_like(r)
    small = r * spec.ktilde < 1e-2
    rs = r[small]
    # j1(x) = x/3 - x^3/30 + x^5/840 - ...
    out[small] = (moment(spec, 1) * rs / 3 - moment(spec, 2) * rs ** 3 / 30
                  + moment(spec, 3) * rs ** 5 / 840)
    rr = r[~small]
    _, im2 = _exp_complex_parts(spec, rr, m + 2)
    re3, _ = _exp_complex_parts(spec, rr, m + 3)
    pref = 4 * math.pi * spec.amplitude
    out[~small] = pref * (math.exp(gammaln(m + 2)) * im2 / rr ** 2
                          - math.exp(gammaln(m + 3)) * re3 / rr)
    return out


def _kernel_quadrature(spec, r, which: str, refine: int = 1, chunk: int = 256):
    out = np.empty_like(r)
    if r.size == 0:
        return out
    k, w = k_rule(spec, float(np.max(r)), refine)
    for s in range(0, r.size, chunk):
        rr = r[s:s + chunk, None]
        if which == "C":
            out[s:s + chunk] = np.sum(w * k ** 2 * _sinc(k * rr), axis=1)
        else:
            out[s:s + chunk] = np.sum(w * k ** 3 * spherical_jn(1, k * rr), axis=1)
    return out


def _checked_quadrature(spec, r, which, tol):
    coarse = _kernel_quadrature(spec, r, which)
    fine = _kernel_quadrature(spec, r, which, refine=2)
    err = float(np.max(np.abs(fine - coarse))) if r.size else 0.0
    if err > tol:
        raise QuadratureError(f"{which}(r)", err, tol)
    return fine


def _as_radius_array(r):
    arr = np.asarray(r, dtype=float)
    if np.any(arr < 0):
        raise ValueError("radii must be non-negative")
    return arr


def c_of_r(spec: PowerSpectrum, r, method: str = "auto", tol: float | None = None):
    """Field correlation C(r) = 4 pi int k^2 P(k) sinc(kr) dk.

    ``method="quadrature"`` forces numerical k-integration for continuous
    spectra (used to cross-check the closed forms).
    """
    arr = _as_radius_array(r)
    flat = arr.ravel().copy()
    s0 = moment(spec, 0)
    if spec.kind == "monochromatic":
        out = s0 * _sinc(spec.k0 * flat)
    elif spec.kind == "exponential" and method == "auto":
        out = _c_exponential(spec, flat)
    else:
        out = _checked_quadrature(spec, flat, "C", (tol or DEFAULT_TOL) * s0)
        out[flat == 0] = s0
    out = out.reshape(arr.shape)
    return float(out) if out.ndim == 0 else out


def d_of_r(spec: PowerSpectrum, r, method: str = "auto", tol: float | None = None):
    """Field-gradient correlation D(r) = 4 pi int k^3 P(k) j_1(kr) dk = -C'(r)."""
    arr = _as_radius_array(r)
    flat = arr.ravel().copy()
    if spec.kind == "monochromatic":
        out = spec.sigma0sq_mono * spec.k0 * spherical_jn(1, spec.k0 * flat)
    elif spec.kind == "exponential" and method == "auto":
        out = _d_exponential(spec, flat)
    else:
        out = _checked_quadrature(spec, flat, "D", (tol or DEFAULT_TOL) * moment(spec, 0) * spec.k_upper())
        out[flat == 0] = 0.0
    out = out.reshape(arr.shape)
    return float(out) if out.ndim == 0 else out


def _ctilde_spectral_all(spec, lmax, r, rp, refine=1):
    """C~_0..C~_lmax at one pair by the spectral route."""
    ells = np.arange(lmax + 1)
    if r == 0 or rp == 0:
        out = np.zeros(lmax + 1)
        out[0] = c_of_r(spec, max(r, rp))
        return out
    if spec.kind == "monochromatic":
        return spec.sigma0sq_mono * spherical_jn(ells, spec.k0 * r) * spherical_jn(ells, spec.k0 * rp)
    k, w = k_rule(spec, max(r, rp), refine)
    wk = w * k ** 2
    ja = spherical_jn(ells[:, None], k * r)
    jb = spherical_jn(ells[:, None], k * rp)
    return np.sum(wk * ja * jb, axis=1)


def _spectral_block(spec, L, radii, workers=None):
    """C~_0..C~_L on all pairs of ``radii`` with one shared k rule.

    The rule is sized for the largest radius, so it is at least as fine as
    the per-pair rule everywhere.
    """
    ells = np.arange(L + 1)
    if spec.kind == "monochromatic":
        J = spherical_jn(ells[:, None], spec.k0 * radii[None, :])        # (L+1, M)
        return spec.sigma0sq_mono * J[:, :, None] * J[:, None, :]
    k, w = k_rule(spec, float(radii[-1]))
    sw = np.sqrt(w * k ** 2)
    J = np.stack(parallel_map(lambda x: spherical_jn(ells[:, None], k * x) * sw, radii, workers), axis=1)
    # plain einsum (no BLAS) keeps the sum order fixed
    return np.einsum("lik,ljk->lij", J, J)


def ctilde_spectral(spec: PowerSpectrum, ell: int, r: float, rp: float, tol: float = DEFAULT_TOL) -> float:
    """Mode kernel C~_l(r, r') = 4 pi int k^2 P(k) j_l(kr) j_l(kr') dk."""
    if r < 0 or rp < 0:
        raise ValueError("radii must be non-negative")
    coarse = _ctilde_spectral_all(spec, ell, r, rp)[ell]
    if spec.kind == "monochromatic" or r == 0 or rp == 0:
        return float(coarse)
    fine = _ctilde_spectral_all(spec, ell, r, rp, refine=2)[ell]
    err = abs(fine - coarse)
    if err > tol * moment(spec, 0):
        raise QuadratureError("C~_l", err, tol * moment(spec, 0), (ell, r, rp))
    return float(fine)


def legendre_moments(f, r: float, rp: float, lmax: int, h: float | None = None,
                     tol: float = 1e-12, max_panels: int = 1 << 15):
    """int_{-1}^{1} P_l(u) f(sqrt(r^2 + r'^2 - 2 r r' u)) du for l = 0..lmax.

    The integral is taken in rho = sqrt(r^2 + r'^2 - 2 r r' u) with composite
    Gauss-Legendre panels of width ``h``. Without ``h`` the panel count is
    doubled until successive estimates agree to ``tol``.
    """
    out = np.zeros(lmax + 1)
    # one radius negligible against the other: only the l = 0 moment survives
    if min(r, rp) <= 1e-14 * max(r, rp):
        out[0] = 2.0 * float(np.asarray(f(np.array([max(r, rp)])))[0])
        return out
    lo, hi = abs(r - rp), r + rp

    def estimate(npan):
        x, gw = gauss_legendre(PANEL_NODES)
        edges = np.linspace(lo, hi, npan + 1)
        half = 0.5 * np.diff(edges)[:, None]
        rho = (0.5 * (edges[1:] + edges[:-1])[:, None] + half * x).ravel()
        wts = (half * gw).ravel() * rho / r / rp
        # ratios instead of products keep subnormal radii finite
        u = np.clip(0.5 * (r / rp + rp / r - (rho / r) * (rho / rp)), -1.0, 1.0)
        vals = np.asarray(f(rho), dtype=float) * wts
        return legendre_all(lmax, u) @ vals

    # P_l(u(rho)) is a degree-2l polynomial in rho; keep it resolved as well
    min_panels = max(2, lmax + 1)
    if h is not None:
        return estimate(max(min_panels, math.ceil((hi - lo) / h)))
    npan = min_panels
    prev = estimate(npan)
    while True:
        npan *= 2
        cur = estimate(npan)
        err = float(np.max(np.abs(cur - prev)))
        if err <= tol:
            return cur
        if npan >= max_panels:
            raise QuadratureError("Legendre projection", err, tol)
        prev = cur


def ctilde_legendre(kernelC, ell: int, r: float, rp: float, h: float | None = None,
                    tol: float = 1e-12) -> float:
    """Mode kernel from the separation-space Legendre projection of C.

    Parameters
    ----------
    kernelC : callable
        Vectorized C(rho).
    ell : int
    r, rp : float
    h : float, optional
        Panel width in rho; adaptive doubling when omitted.
    """
    return float(0.5 * legendre_moments(kernelC, r, rp, ell, h=h, tol=tol)[ell])


# ---------------------------------------------------------------------------
# KernelSet

@dataclass(frozen=True, eq=False)
class KernelSet:
    """Kernel tables on a radial grid plus on-demand kernel evaluation.

    ``Ctilde[l]`` holds C~_l(r_i, r_j) for l = 0..lmax+1. A KernelSet built
    with :func:`kernel_functions` has no grid and only evaluates on demand.
    """

    spec: PowerSpectrum
    moments: SpectralMoments
    grid: RadialGrid | None = None
    lmax: int = -1
    Cr: np.ndarray = field(default_factory=lambda: np.zeros(0))
    Dr: np.ndarray = field(default_factory=lambda: np.zeros(0))
    Ctilde: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 0)))
    tol: float = DEFAULT_TOL

    @property
    def k_eff(self) -> float:
        return effective_kmax(self.spec, 0.95)

    @property
    def sigma0sq(self) -> float:
        return self.moments.sigma0sq

    @property
    def sigma1sq(self) -> float:
        return self.moments.sigma1sq

    def C(self, r):
        return c_of_r(self.spec, r, tol=self.tol)

    def D(self, r):
        return d_of_r(self.spec, r, tol=self.tol)

    def route(self, r: float, rp: float) -> str:
        if self.spec.kind == "monochromatic":
            return "spectral"
        return "spectral" if self.k_eff * max(r, rp) < CROSSOVER else "legendre"

    def _snap(self, r: float) -> float:
        # radii far below the kernel length scale act as the origin
        return 0.0 if r < 1e-100 * self.spec.length_scale else r

    def ctilde_all(self, lmax: int, r: float, rp: float) -> np.ndarray:
        """C~_0..C~_lmax at one (r, r') pair, choosing the route by the crossover rule."""
        r, rp = self._snap(r), self._snap(rp)
        if self.route(r, rp) == "spectral":
            return _ctilde_spectral_all(self.spec, lmax, r, rp)
        return 0.5 * legendre_moments(self.C, r, rp, lmax, h=0.5 * self.spec.length_scale)

    def ctilde(self, ell: int, r: float, rp: float) -> float:
        return float(self.ctilde_all(ell, r, rp)[ell])

    def c2_moments(self, lmax: int, r: float, rp: float) -> np.ndarray:
        """int P_l(u) C(rho(u))^2 du for l = 0..lmax."""
        r, rp = self._snap(r), self._snap(rp)
        return legendre_moments(lambda rho: self.C(rho) ** 2, r, rp, lmax,
                                h=0.25 * self.spec.length_scale)


def kernel_functions(spec: PowerSpectrum, tol: float = DEFAULT_TOL) -> KernelSet:
    """Grid-free KernelSet for on-demand kernel evaluation."""
    return KernelSet(spec=spec, moments=spectral_moments(spec), tol=tol)


def build_kernel_set(spec: PowerSpectrum, grid: RadialGrid, lmax: int, tol: float = DEFAULT_TOL,
                     check_nyquist: bool = True, workers: int | None = None) -> KernelSet:
    """Tabulate C, D and C~_0..C~_{lmax+1} on ``grid``.

    Pairs with k_eff max(r_i, r_j) below the crossover use the spectral route,
    the rest the Legendre route. Work is split over matrix rows; the result does
    not depend on the number of workers.
    """
    if lmax < 2:
        raise ValueError("lmax must be at least 2")
    base = kernel_functions(spec, tol)
    if check_nyquist:
        grid.check_nyquist(base.k_eff)
    r = grid.radii
    M, L = r.size, lmax + 1
    ct = np.empty((L + 1, M, M))
    # spectral-route radii form a prefix of the grid; they share one k rule
    n_spec = M if spec.kind == "monochromatic" else int(np.sum(base.k_eff * r < CROSSOVER))
    if n_spec:
        ct[:, :n_spec, :n_spec] = _spectral_block(spec, L, r[:n_spec], workers)

    def row(i):
        j0 = max(i, n_spec)
        vals = np.empty((L + 1, M - j0))
        for jj, j in enumerate(range(j0, M)):
            try:
                vals[:, jj] = base.ctilde_all(L, r[i], r[j])
            except QuadratureError as exc:
                raise QuadratureError("C~_l", exc.achieved, exc.tol, ("0..%d" % L, i, j)) from exc
        return j0, vals

    for i, (j0, vals) in enumerate(parallel_map(row, range(M), workers)):
        ct[:, i, j0:] = vals
        ct[:, j0:, i] = vals
    ct.setflags(write=False)
    Cr, Dr = np.asarray(base.C(r)), np.asarray(base.D(r))
    Cr.setflags(write=False)
    Dr.setflags(write=False)
    return KernelSet(spec=spec, moments=base.moments, grid=grid, lmax=lmax, Cr=Cr, Dr=Dr,
                     Ctilde=ct, tol=tol)


# ---------------------------------------------------------------------------
# binary cache

def _spec_fingerprint(spec: PowerSpectrum) -> dict:
    return {"kind": spec.kind, "k0": spec.k0, "sigma0sq": spec.sigma0sq_mono,
            "amplitude": spec.amplitude, "power": spec.power, "ktilde": spec.ktilde,
            "k_table": list(spec.k_table), "p_table": list(spec.p_table)}


def cache_key(spec: PowerSpectrum, grid: RadialGrid, lmax: int, tol: float) -> str:
    payload = {"spec": _spec_fingerprint(spec), "grid": [float(x).hex() for x in grid.radii],
               "lmax": int(lmax), "tol": float(tol).hex(), "version": CACHE_VERSION}
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_kernel_set(ks: KernelSet, path) -> Path:
    """Write ``ks`` atomically: magic, version, JSON header, little-endian float64 arrays."""
    path = Path(path)
    header = json.dumps({"key": cache_key(ks.spec, ks.grid, ks.lmax, ks.tol), "M": len(ks.grid),
                         "lmax": ks.lmax, "sigma0sq": ks.moments.sigma0sq.hex(),
                         "sigma1sq": ks.moments.sigma1sq.hex()}, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(CACHE_MAGIC + struct.pack("<II", CACHE_VERSION, len(header)) + header)
            for arr in (ks.grid.radii, ks.Cr, ks.Dr, ks.Ctilde):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_kernel_set(path, spec: PowerSpectrum, grid: RadialGrid, lmax: int,
                    tol: float = DEFAULT_TOL) -> KernelSet | None:
    """Read a cache file; returns None when it is missing, stale or corrupt."""
    try:
        blob = Path(path).read_bytes()
    except OSError:
        return None
    n0 = len(CACHE_MAGIC) + 8
    if len(blob) < n0 or blob[:len(CACHE_MAGIC)] != CACHE_MAGIC:
        return None
    version, hlen = struct.unpack("<II", blob[len(CACHE_MAGIC):n0])
    if version != CACHE_VERSION:
        return None
    try:
        header = json.loads(blob[n0:n0 + hlen])
    except ValueError:
        return None
    if header.get("key") != cache_key(spec, grid, lmax, tol):
        return None
    M, L = header["M"], header["lmax"] + 2
    data = np.frombuffer(blob, dtype="<f8", offset=n0 + hlen)
    if data.size != 3 * M + L * M * M:
        return None
    data = data.astype(float)
    Cr, Dr = data[M:2 * M], data[2 * M:3 * M]
    ct = data[3 * M:].reshape(L, M, M)
    for a in (Cr, Dr, ct):
        a.setflags(write=False)
    moments = SpectralMoments(float.fromhex(header["sigma0sq"]), float.fromhex(header["sigma1sq"]))
    return KernelSet(spec=spec, moments=moments, grid=grid, lmax=lmax, Cr=Cr, Dr=Dr, Ctilde=ct, tol=tol)


def cached_kernel_set(spec: PowerSpectrum, grid: RadialGrid, lmax: int, cache_dir=None,
                      tol: float = DEFAULT_TOL, **kwargs) -> KernelSet:
    """Build a KernelSet, reusing ``cache_dir/<hash>.krn`` when present."""
    if cache_dir is None:
        return build_kernel_set(spec, grid, lmax, tol, **kwargs)
    path = Path(cache_dir) / f"{cache_key(spec, grid, lmax, tol)}.krn"
    ks = load_kernel_set(path, spec, grid, lmax, tol)
    if ks is None:
        ks = build_kernel_set(spec, grid, lmax, tol, **kwargs)
        save_kernel_set(ks, path)
    return ks
