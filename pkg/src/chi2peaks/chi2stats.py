"""Analytic statistics of the chi-squared field Phi = sum_alpha (phi^alpha)^2.

Pointwise and per-mode means and covariances, with and without the
stationary-point constraint, plus profile geometry: the half-height radius,
its one-sigma envelope, asphericity and the sphericity radius.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gaussian_bias import BiasSpec
from .kernels import KernelSet
from .spectrum import MAX_BISECT, SpectralMoments

FOUR_PI = 4 * math.pi


class MonotonicityError(ValueError):
    pass


def unbiased_mean(n: int, moments: SpectralMoments) -> float:
    return n * moments.sigma0sq


def unbiased_cov(n: int, kernels: KernelSet, dr):
    """Background covariance 2 n C(|r - r'|)^2."""
    return 2 * n * np.asarray(kernels.C(dr)) ** 2


def _ratios(bias, kernels, r):
    mo = bias.moments
    C = np.asarray(kernels.C(r), dtype=float)
    D = np.asarray(kernels.D(r), dtype=float)
    return C, D, mo.sigma0sq, mo.sigma1sq


def rho_c(kernels: KernelSet, r):
    return np.asarray(kernels.C(r)) / kernels.sigma0sq


def rho_d(kernels: KernelSet, r):
    return math.sqrt(3) * np.asarray(kernels.D(r)) / math.sqrt(kernels.sigma0sq * kernels.sigma1sq)


def biased_mean(bias: BiasSpec, kernels: KernelSet, r):
    """<Phi_B(r)> = n s0^2 + (nubar^2 - n) C^2 / s0^2 - 3 D^2 / s1^2."""
    C, D, s0, s1 = _ratios(bias, kernels, r)
    return bias.n * s0 + (bias.nubar ** 2 - bias.n) * C * C / s0 - 3 * D * D / s1


def biased_cov(bias: BiasSpec, kernels: KernelSet, r, rp, cosg):
    """Cov(Phi_B(r), Phi_B(r')) for points at radii r, r' separated by angle gamma.

    With X = C(|r - r'|) - C C'/s0^2, Y = 3 D D' cos(gamma)/s1^2 and
    K = C C'/s0^2 the result is 2(n-1)X^2 + 2(X-Y)^2 + 4 nubar^2 K (X-Y).
    """
    r, rp, cosg = (np.asarray(x, dtype=float) for x in (r, rp, cosg))
    C, D, s0, s1 = _ratios(bias, kernels, r)
    Cp, Dp, _, _ = _ratios(bias, kernels, rp)
    sep = np.sqrt(np.maximum(r * r + rp * rp - 2 * r * rp * cosg, 0.0))
    K = C * Cp / s0
    X = np.asarray(kernels.C(sep)) - K
    Y = 3 * D * Dp * cosg / s1
    return 2 * (bias.n - 1) * X ** 2 + 2 * (X - Y) ** 2 + 4 * bias.nubar ** 2 * K * (X - Y)


def biased_variance(bias: BiasSpec, kernels: KernelSet, r):
    """Var(Phi_B(r)), the coincident limit of :func:`biased_cov`."""
    C, D, s0, s1 = _ratios(bias, kernels, r)
    a = s0 - C * C / s0
    b = a - 3 * D * D / s1
    return 2 * (bias.n - 1) * a * a + 2 * b * (b + 2 * bias.nubar ** 2 * C * C / s0)


def mode_mean(bias: BiasSpec, kernels: KernelSet, ell: int, m: int, r):
    if ell != 0 or m != 0:
        return 0.0 * np.asarray(r, dtype=float)
    return math.sqrt(FOUR_PI) * biased_mean(bias, kernels, r)


def mode_cov(bias: BiasSpec, kernels: KernelSet, ell: int, r: float, rp: float,
             biased: bool = True) -> float:
    """Cov(Phi_B,lm(r), Phi_B,lm(r')); m-independent and diagonal in (l, m).

    ``biased=False`` drops every constraint term, leaving the background
    4 pi n int P_l(u) C(rho(u))^2 du.
    """
    if ell < 0:
        raise ValueError("ell must be non-negative")
    n, nb2 = bias.n, bias.nubar ** 2
    s0, s1 = bias.moments.sigma0sq, bias.moments.sigma1sq
    I = kernels.c2_moments(ell, r, rp)[ell]
    if not biased:
        return FOUR_PI * n * I
    ct = kernels.ctilde_all(ell + 1, r, rp)
    C, Cp = float(kernels.C(r)), float(kernels.C(rp))
    D, Dp = float(kernels.D(r)), float(kernels.D(rp))
    K = C * Cp / s0
    G = D * Dp / s1
    lower = ell * ct[ell - 1] if ell > 0 else 0.0
    total = (n * I + 4 * K * (nb2 - n) * ct[ell]
             - 12.0 / (2 * ell + 1) * G * ((ell + 1) * ct[ell + 1] + lower))
    if ell == 0:
        total += 2 * (K * K * (n - 2 * nb2) + 3 * G * G)
    elif ell == 1:
        total -= 4 * K * G * (nb2 - 1)
    elif ell == 2:
        total += 12.0 / 5 * G * G
    return FOUR_PI * total


def mode_variances(bias: BiasSpec, kernels: KernelSet, r: float, L: int) -> np.ndarray:
    """Var(Phi_B,l0(r)) for l = 0..L, sharing the kernel evaluations."""
    n, nb2 = bias.n, bias.nubar ** 2
    s0, s1 = bias.moments.sigma0sq, bias.moments.sigma1sq
    I = kernels.c2_moments(L, r, r)
    ct = kernels.ctilde_all(L + 1, r, r)
    C, D = float(kernels.C(r)), float(kernels.D(r))
    K, G = C * C / s0, D * D / s1
    ell = np.arange(L + 1)
    lower = np.concatenate([[0.0], ell[1:] * ct[:L]])
    out = n * I + 4 * K * (nb2 - n) * ct[:L + 1] - 12.0 / (2 * ell + 1) * G * ((ell + 1) * ct[1:L + 2] + lower)
    out[0] += 2 * (K * K * (n - 2 * nb2) + 3 * G * G)
    if L >= 1:
        out[1] -= 4 * K * G * (nb2 - 1)
    if L >= 2:
        out[2] += 12.0 / 5 * G * G
    return FOUR_PI * out


def variance_mode_sum(bias: BiasSpec, kernels: KernelSet, r: float, L: int) -> float:
    """(1/4 pi) sum_{l <= L} (2l+1) Var(Phi_B,l0(r))."""
    v = mode_variances(bias, kernels, r, L)
    return float(np.sum((2 * np.arange(L + 1) + 1) * v) / FOUR_PI)


# ---------------------------------------------------------------------------
# profile geometry

def _bisect(f, lo: float, hi: float, rtol: float = 1e-10):
    flo = f(lo)
    for _ in range(MAX_BISECT):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
        if hi - lo <= rtol * hi:
            break
    return 0.5 * (lo + hi)


def _first_crossing(f, grid: np.ndarray):
    """Root at the first sign change of f along the ordered sample ``grid``."""
    vals = np.array([f(x) for x in grid])
    sign = vals > 0
    idx = np.nonzero(sign[1:] != sign[:-1])[0]
    if idx.size == 0:
        return None
    a, b = grid[idx[0]], grid[idx[0] + 1]
    return _bisect(f, min(a, b), max(a, b))


def _scan(r_max: float, points: int = 400, r_min: float | None = None):
    r_min = r_max * 1e-4 if r_min is None else r_min
    return np.concatenate([np.geomspace(r_min, r_max / points, 50)[:-1],
                           np.linspace(r_max / points, r_max, points)])


def _bracket_max(kernels: KernelSet, r_max):
    if r_max is not None:
        return float(r_max)
    if kernels.grid is None:
        raise ValueError("r_max is required for a KernelSet without a grid")
    return kernels.grid.r_max


def r_alpha(kernels: KernelSet, alpha: float, r_max: float | None = None) -> float:
    """Radius where rho_C(r) = sqrt(alpha), by bisection on (0, r_max].

    Raises
    ------
    MonotonicityError
        If rho_C is not decreasing on the bracket (sharply peaked spectra).
    """
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    if alpha == 1:
        return 0.0
    r_max = _bracket_max(kernels, r_max)
    grid = np.concatenate([[0.0], _scan(r_max)])
    rc = rho_c(kernels, grid)
    if np.any(np.diff(rc) > 1e-12):
        raise MonotonicityError(
            "rho_C is not monotone decreasing on (0, r_max]; half-height radii are not meaningful "
            "for sharply peaked (e.g. monochromatic) spectra")
    target = math.sqrt(alpha)
    if rc[-1] > target:
        raise MonotonicityError(f"rho_C stays above sqrt(alpha) on (0, {r_max}]")
    return _bisect(lambda x: float(rho_c(kernels, x)) - target, 0.0, r_max)


def r_half_exact(bias: BiasSpec, kernels: KernelSet, r_max: float | None = None) -> float | None:
    """Radius where the exact mean profile is halfway between nu^2 and n s0^2."""
    r_max = _bracket_max(kernels, r_max)
    half = 0.5 * (bias.nu ** 2 + unbiased_mean(bias.n, bias.moments))
    return _first_crossing(lambda x: float(biased_mean(bias, kernels, x)) - half, _scan(r_max))


@dataclass
class EnvelopeEstimates:
    peak_ratio: float
    trough_ratio: float
    r_half: float | None
    dr_left: float | None
    dr_right: float | None


def envelope_estimates(bias: BiasSpec, kernels: KernelSet, r_max: float | None = None) -> EnvelopeEstimates:
    """Closed-form width ratios 2/nubar and 1/(1 + sqrt(n/2)) plus exact envelope widths.

    The exact widths solve <Phi(r_h -/+ dr)> -/+ s sqrt(Var) = <Phi(r_h)> with
    s = +1 for peaks and -1 for troughs. A missing side is returned as None.
    """
    peak = 2.0 / bias.nubar
    trough = 1.0 / (1.0 + math.sqrt(bias.n / 2.0))
    r_max = _bracket_max(kernels, r_max)
    rh = r_half_exact(bias, kernels, r_max)
    if rh is None:
        return EnvelopeEstimates(peak, trough, None, None, None)
    half = float(biased_mean(bias, kernels, rh))
    s = 1.0 if bias.nubar ** 2 > bias.n else -1.0

    def band(sign):
        return lambda x: float(biased_mean(bias, kernels, x)
                               + sign * np.sqrt(max(biased_variance(bias, kernels, x), 0.0))) - half

    # the inner side is scanned from r_h towards the origin
    left = _first_crossing(band(-s), _scan(rh, 200)[::-1])
    outer = np.linspace(rh, r_max, 400)[1:]
    right = _first_crossing(band(+s), np.concatenate([[rh * (1 + 1e-9)], outer]))
    return EnvelopeEstimates(peak, trough, rh,
                             None if left is None else rh - left,
                             None if right is None else right - rh)


def asphericity(bias: BiasSpec, kernels: KernelSet, r: float, L: int | None = None):
    """Aspherical variance and asphericity at radius r.

    Returns ``(sigma_as2, As)`` from the exact pointwise variance minus the
    spherical-mode share; with ``L`` the tuple gains the mode-sum cross-check
    (1/4 pi) sum_{1 <= l <= L} (2l+1) Var(Phi_l0) as a third element.
    As is defined as 1 where both the aspherical variance and the mean
    deviation vanish.
    """
    var = float(biased_variance(bias, kernels, r))
    v00 = mode_cov(bias, kernels, 0, r, r)
    s_as = max(var - v00 / FOUR_PI, 0.0)
    dev = float(biased_mean(bias, kernels, r)) - unbiased_mean(bias.n, bias.moments)
    denom = s_as + dev * dev
    # 0/0 up to rounding in the background value
    scale = unbiased_mean(bias.n, bias.moments)
    As = 1.0 if denom <= (1e-12 * scale) ** 2 else s_as / denom
    if L is None:
        return s_as, As
    v = mode_variances(bias, kernels, r, L)
    check = float(np.sum((2 * np.arange(1, L + 1) + 1) * v[1:]) / FOUR_PI)
    return s_as, As, check


def approx_profile(bias: BiasSpec, kernels: KernelSet, r):
    """rho_D-neglected mean and variance of the biased profile."""
    n, s0 = bias.n, bias.moments.sigma0sq
    rc2 = rho_c(kernels, r) ** 2
    mean = n * s0 * (1 + (bias.nubar ** 2 / n - 1) * rc2)
    # (2/n)(mean^2 - nu^4 rho_C^4), factored: mean - nu^2 rho_C^2 = n s0^2 (1 - rho_C^2)
    var = 2.0 * s0 * (1 - rc2) * (mean + bias.nu ** 2 * rc2)
    return mean, var


def r_sph(bias: BiasSpec, kernels: KernelSet, r_max: float | None = None) -> float | None:
    """Smallest radius where As(r) reaches 1/2; None when it never does on (0, r_max]."""
    r_max = _bracket_max(kernels, r_max)
    scan = _scan(r_max)

    def f(x):
        return asphericity(bias, kernels, x)[1] - 0.5

    if f(scan[0]) >= 0:
        return float(scan[0])
    return _first_crossing(f, scan)


@dataclass
class ProfileReport:
    r: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    env_lo: np.ndarray
    env_hi: np.ndarray
    rhoC: np.ndarray
    rhoD: np.ndarray
    sigma_as2: np.ndarray
    As: np.ndarray
    scalars: dict = field(default_factory=dict)

    COLUMNS = ("r", "mean", "var", "env_lo", "env_hi", "rhoC", "rhoD", "sigma_as2", "As")

    def rows(self):
        cols = [getattr(self, c) for c in self.COLUMNS]
        return [tuple(float(c[i]) for c in cols) for i in range(len(self.r))]


def profile_report(bias: BiasSpec, kernels: KernelSet, radii=None) -> ProfileReport:
    """Exact profile statistics on ``radii`` (defaults to the kernel grid) plus scalars."""
    r = np.asarray(kernels.grid.radii if radii is None else radii, dtype=float)
    r_max = float(r[-1])
    mean = np.asarray(biased_mean(bias, kernels, r))
    var = np.maximum(np.asarray(biased_variance(bias, kernels, r)), 0.0)
    sd = np.sqrt(var)
    aspher = np.array([asphericity(bias, kernels, x) for x in r])
    env = envelope_estimates(bias, kernels, r_max)
    rs = r_sph(bias, kernels, r_max)
    try:
        rh_rho = r_alpha(kernels, 0.5, r_max)
    except MonotonicityError:
        rh_rho = None
    rh = env.r_half
    scalars = {"r_half": rh, "r_half_rhoC": rh_rho, "dr_half_left": env.dr_left,
               "dr_half_right": env.dr_right, "r_sph": rs,
               "beta": (rs / rh) if (rs is not None and rh) else None,
               "peak_ratio_estimate": env.peak_ratio, "trough_ratio_estimate": env.trough_ratio}
    return ProfileReport(r, mean, var, mean - sd, mean + sd, rho_c(kernels, r), rho_d(kernels, r),
                         aspher[:, 0], aspher[:, 1], scalars)
