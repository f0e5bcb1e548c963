"""Isotropic power spectra of the underlying Gaussian fields and their moments."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import gammainc, gammaincc, gammaln

from .harmonics import gauss_legendre

KINDS = ("monochromatic", "exponential", "tabulated")

# Bisection cap shared by every root finder in the package.
MAX_BISECT = 200


class SpectrumError(ValueError):
    """Invalid spectrum definition or table."""


class NonIntegrableSpectrum(ArithmeticError):
    """Raised when a spectral moment does not converge."""

    def __init__(self, detail: str = ""):
        super().__init__("non-integrable spectrum" + (f": {detail}" if detail else ""))


@dataclass(frozen=True)
class SpectralMoments:
    sigma0sq: float
    sigma1sq: float

    def __post_init__(self):
        for name in ("sigma0sq", "sigma1sq"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise SpectrumError(f"{name} must be positive and finite, got {v}")

    @property
    def sigma0(self) -> float:
        return math.sqrt(self.sigma0sq)

    @property
    def sigma1(self) -> float:
        return math.sqrt(self.sigma1sq)


@dataclass(frozen=True)
class PowerSpectrum:
    """Isotropic power spectrum P(k).

    Use the constructors :meth:`monochromatic`, :meth:`exponential`,
    :meth:`exponential_normalized` and :meth:`tabulated` rather than the raw
    fields. Instances are immutable and hashable.

    The monochromatic spectrum is the distribution
    ``P(k) = sigma0sq / (4 pi k0^2) delta(k - k0)``; the exponential family is
    ``P(k) = A k^m exp(-k / ktilde)``; tabulated spectra interpolate linearly
    and vanish outside the table.
    """

    kind: str
    k0: float = 0.0
    sigma0sq_mono: float = 0.0
    amplitude: float = 0.0
    power: float = 0.0
    ktilde: float = 0.0
    k_table: tuple = ()
    p_table: tuple = ()

    # -- constructors -----------------------------------------------------
    @classmethod
    def monochromatic(cls, k0: float, sigma0sq: float = 1.0) -> "PowerSpectrum":
        if not (k0 > 0 and sigma0sq > 0):
            raise SpectrumError("monochromatic spectrum needs k0 > 0 and sigma0sq > 0")
        return cls(kind="monochromatic", k0=float(k0), sigma0sq_mono=float(sigma0sq))

    @classmethod
    def exponential(cls, amplitude: float, power: float, ktilde: float) -> "PowerSpectrum":
        if not (amplitude > 0 and power >= 0 and ktilde > 0):
            raise SpectrumError("exponential spectrum needs amplitude > 0, power >= 0, ktilde > 0")
        return cls(kind="exponential", amplitude=float(amplitude), power=float(power),
                   ktilde=float(ktilde))

    @classmethod
    def exponential_normalized(cls, sigma0sq: float, power: float, ktilde: float) -> "PowerSpectrum":
        """Exponential family with the amplitude chosen so that sigma_0^2 = ``sigma0sq``."""
        if not (sigma0sq > 0 and power >= 0 and ktilde > 0):
            raise SpectrumError("exponential spectrum needs sigma0sq > 0, power >= 0, ktilde > 0")
        p = power + 3.0
        log_a = math.log(sigma0sq) - math.log(4 * math.pi) - gammaln(p) - p * math.log(ktilde)
        return cls.exponential(math.exp(log_a), power, ktilde)

    @classmethod
    def tabulated(cls, k, p) -> "PowerSpectrum":
        k = np.asarray(k, dtype=float).ravel()
        p = np.asarray(p, dtype=float).ravel()
        if k.size < 2 or k.size != p.size:
            raise SpectrumError("tabulated spectrum needs at least two (k, P) pairs of equal length")
        if not np.all(np.isfinite(k)):
            raise SpectrumError("tabulated k values must be finite")
        if k[0] < 0 or np.any(np.diff(k) <= 0):
            raise SpectrumError("tabulated k must be strictly increasing and start at k >= 0")
        if np.any(p < 0):
            raise SpectrumError("tabulated P must be non-negative")
        return cls(kind="tabulated", k_table=tuple(k.tolist()), p_table=tuple(p.tolist()))

    @classmethod
    def from_csv(cls, path) -> "PowerSpectrum":
        """Load a two-column ``k,P`` CSV; a non-numeric first row is treated as a header."""
        rows = []
        try:
            with open(Path(path), newline="") as fh:
                for lineno, row in enumerate(csv.reader(fh)):
                    if not row or all(not c.strip() for c in row):
                        continue
                    if len(row) < 2:
                        raise SpectrumError(f"{path}:{lineno + 1}: expected two columns k,P")
                    try:
                        rows.append((float(row[0]), float(row[1])))
                    except ValueError:
                        if lineno == 0 and not rows:
                            continue
                        raise SpectrumError(f"{path}:{lineno + 1}: non-numeric entry {row!r}") from None
        except OSError as exc:
            raise SpectrumError(f"cannot read spectrum table {path}: {exc}") from exc
        if not rows:
            raise SpectrumError(f"{path}: no data rows")
        arr = np.array(rows)
        return cls.tabulated(arr[:, 0], arr[:, 1])

    # -- evaluation -------------------------------------------------------
    def __call__(self, k):
        """P(k) for the continuous kinds; the monochromatic kind has no pointwise value."""
        k = np.asarray(k, dtype=float)
        if self.kind == "exponential":
            return self.amplitude * k ** self.power * np.exp(-k / self.ktilde)
        if self.kind == "tabulated":
            kt, pt = self.arrays()
            return np.interp(k, kt, pt, left=0.0, right=0.0)
        raise SpectrumError("monochromatic spectrum is a delta function; use moments and kernels instead")

    def arrays(self):
        return np.asarray(self.k_table), np.asarray(self.p_table)

    @property
    def length_scale(self) -> float:
        """Shortest length on which the correlation kernel varies appreciably."""
        if self.kind == "monochromatic":
            return 1.0 / self.k0
        if self.kind == "exponential":
            return 1.0 / (self.ktilde * max(1.0, 0.5 * (self.power + 2)))
        kt, pt = self.arrays()
        nz = np.nonzero(pt)[0]
        return 1.0 / kt[nz[-1]] if nz.size else 1.0

    def k_upper(self, rel_tol: float = 1e-17) -> float:
        """Upper k limit beyond which the k^4-weighted tail is negligible."""
        if self.kind == "monochromatic":
            return self.k0
        if self.kind == "tabulated":
            return self.k_table[-1]
        # bisection on the regularized upper incomplete gamma for the k^4 moment
        a = self.power + 5.0
        lo, hi = 0.0, 10.0 + 2 * a
        while gammaincc(a, hi) > rel_tol:
            hi *= 2
        for _ in range(MAX_BISECT):
            mid = 0.5 * (lo + hi)
            if gammaincc(a, mid) > rel_tol:
                lo = mid
            else:
                hi = mid
            if hi - lo < 1e-6 * hi:
                break
        return hi * self.ktilde

    def segments(self):
        """Breakpoints splitting [0, k_upper] into pieces where P is smooth."""
        if self.kind == "tabulated":
            kt = np.asarray(self.k_table)
            return kt if kt[0] == 0 else np.concatenate([[0.0], kt])
        return np.array([0.0, self.k_upper()])

    def cumulative(self, kmax: float, n: int = 0) -> float:
        """4 pi int_0^kmax k^(2n+2) P(k) dk."""
        if kmax <= 0:
            return 0.0
        p = 2 * n + 2
        if self.kind == "monochromatic":
            return self.sigma0sq_mono * self.k0 ** (2 * n) if kmax >= self.k0 else 0.0
        if self.kind == "exponential":
            s = p + self.power + 1.0
            return float(4 * math.pi * self.amplitude * math.exp(gammaln(s)) * self.ktilde ** s
                         * gammainc(s, kmax / self.ktilde))
        # linear interpolation makes the integrand a polynomial on each segment,
        # so a Gauss-Legendre rule of sufficient order is exact there
        kt, pt = self.arrays()
        x, w = gauss_legendre(n + 4)
        total = 0.0
        for j in range(len(kt) - 1):
            a, b = kt[j], min(kt[j + 1], kmax)
            if b <= a:
                break
            kk = 0.5 * (b - a) * x + 0.5 * (a + b)
            total += 0.5 * (b - a) * np.sum(w * kk ** p * np.interp(kk, kt, pt))
        val = 4 * math.pi * total
        if not np.isfinite(val):
            raise NonIntegrableSpectrum(f"moment n={n} evaluated to {val}")
        return float(val)


def moment(spec: PowerSpectrum, n: int) -> float:
    """Spectral moment sigma_n^2 = 4 pi int k^(2n+2) P(k) dk.

    Parameters
    ----------
    spec : PowerSpectrum
    n : int
        Non-negative order.

    Returns
    -------
    float
        Exact for the monochromatic and exponential kinds; exact quadrature of
        the piecewise-linear table otherwise.
    """
    if n < 0 or int(n) != n:
        raise ValueError("moment order must be a non-negative integer")
    n = int(n)
    if spec.kind == "monochromatic":
        return spec.sigma0sq_mono * spec.k0 ** (2 * n)
    if spec.kind == "exponential":
        s = 2 * n + spec.power + 3.0
        val = 4 * math.pi * spec.amplitude * math.exp(gammaln(s) + s * math.log(spec.ktilde))
        if not np.isfinite(val):
            raise NonIntegrableSpectrum(f"moment n={n} overflows")
        return val
    return spec.cumulative(spec.k_table[-1], n)


def spectral_moments(spec: PowerSpectrum) -> SpectralMoments:
    return SpectralMoments(moment(spec, 0), moment(spec, 1))


def effective_kmax(spec: PowerSpectrum, fraction: float = 0.95) -> float:
    """Smallest k_eff whose cumulative power reaches ``fraction`` of sigma_0^2."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    if spec.kind == "monochromatic":
        return spec.k0
    target = fraction * moment(spec, 0)
    if spec.kind == "exponential":
        lo, hi = 0.0, spec.ktilde
        while spec.cumulative(hi) < target:
            hi *= 2
    else:
        lo, hi = spec.k_table[0], spec.k_table[-1]
    for _ in range(MAX_BISECT):
        mid = 0.5 * (lo + hi)
        if spec.cumulative(mid) >= target:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-14 * hi:
            break
    return hi
