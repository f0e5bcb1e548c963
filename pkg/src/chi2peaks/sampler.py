"""Biased spherical-harmonic mode sampling of the chi-squared field on a radial grid.

Each field alpha has real mode coefficients phi^alpha_lm(r_i), drawn as
A Z + mu from the law of its (field class, l) family. Phi is assembled as a
sum of squares of the resummed fields, and the truncation bias of the missing
modes is restored by an additive correction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gaussian_bias import BiasSpec
from .harmonics import (angles_from_xyz, gauss_legendre, legendre_all, lm_index, n_coeffs, real_ylm_all,
                        sphere_grid)
from .kernels import KernelSet, RadialGrid
from .rng import split_seed, stream_normals

SQRT_4PI = math.sqrt(4 * math.pi)
EPS_CLIP = 1e-10
FIRST, OTHER, SHARED = "first-field", "other-field", "shared"


class CovarianceNotPSD(np.linalg.LinAlgError):
    pass


def lmax_rule(ktilde: float, r_max: float) -> tuple[float, int]:
    """Rule-of-thumb truncation: raw = (ktilde r_max - 5.2) / 1.05, suggested ceil(raw) + 1 (at least 4)."""
    x = ktilde * r_max
    raw = (x - 5.2) / 1.05
    if x <= 5.2:
        return raw, 4
    return raw, max(4, math.ceil(raw) + 1)


def sigma_stack(kernels: KernelSet, lmax: int) -> np.ndarray:
    """Rows l = 0..lmax of the recovered fraction Sigma_l(r_i) on the kernel grid."""
    if lmax > kernels.lmax + 1:
        raise ValueError(f"kernels only hold l <= {kernels.lmax + 1}")
    diag = np.array([np.diag(kernels.Ctilde[ell]) for ell in range(lmax + 1)])
    weights = (2 * np.arange(lmax + 1) + 1)[:, None]
    return np.cumsum(weights * diag, axis=0) / kernels.sigma0sq


def sigma_recovery(kernels: KernelSet, lmax: int) -> np.ndarray:
    """Sigma_lmax(r_i) = (1/s0^2) sum_{l <= lmax} (2l+1) C~_l(r_i, r_i)."""
    return sigma_stack(kernels, lmax)[-1]


def truncation_correction(kernels: KernelSet, bias: BiasSpec, lmax: int) -> np.ndarray:
    """E_trunc(r_i) = sqrt(4 pi) n (s0^2 - sum_{l <= lmax} (2l+1) C~_l(r_i, r_i)).

    The corrected Phi_00 adds E_trunc; the corrected Phi adds E_trunc / sqrt(4 pi).
    """
    # the missing fraction is nonnegative; clip rounding noise at full recovery
    return SQRT_4PI * bias.n * kernels.sigma0sq * np.maximum(1.0 - sigma_recovery(kernels, lmax), 0.0)


@dataclass(frozen=True, eq=False)
class TruncationPlan:
    lmax: int
    ktilde: float
    r_max: float
    sigma_recovery: np.ndarray
    E_trunc: np.ndarray
    lmax_raw: float | None = None

    def to_dict(self) -> dict:
        return {"lmax": self.lmax, "ktilde": self.ktilde, "r_max": self.r_max,
                "lmax_raw": self.lmax_raw, "sigma_recovery": [float(x) for x in self.sigma_recovery],
                "E_trunc": [float(x) for x in self.E_trunc]}


def truncation_plan(kernels: KernelSet, bias: BiasSpec, lmax: int) -> TruncationPlan:
    k_eff = kernels.k_eff
    raw, _ = lmax_rule(k_eff, kernels.grid.r_max)
    return TruncationPlan(lmax, k_eff, kernels.grid.r_max, sigma_recovery(kernels, lmax),
                          truncation_correction(kernels, bias, lmax), raw)


def factor_covariance(S, eps_clip: float = EPS_CLIP, scale: float | None = None):
    """Factor a symmetric PSD matrix as A A^T via the eigendecomposition of its correlation matrix.

    Eigenvalues in [-eps_clip * s, 0) are set to zero, where s is the largest
    eigenvalue or ``scale`` if that is larger; ``scale`` lets an exactly
    degenerate matrix, whose eigenvalues are all rounding noise, factor to zero.

    Returns
    -------
    A : ndarray
    report : dict
        Number of clipped eigenvalues, clipped mass and the smallest eigenvalue.

    Raises
    ------
    CovarianceNotPSD
        If an eigenvalue lies below -eps_clip * s.
    """
    S = np.asarray(S, dtype=float)
    S = 0.5 * (S + S.T)
    lam, vec = np.linalg.eigh(S)
    s = max(float(lam.max(initial=0.0)), scale or 0.0)
    floor = -eps_clip * s
    if lam.size and lam.min() < floor:
        raise CovarianceNotPSD(f"covariance not PSD: eigenvalue {lam.min():.6g} below {floor:.3g}; "
                               f"spectrum {np.array2string(lam, precision=4)}")
    neg = lam < 0
    report = {"clipped": int(neg.sum()), "clipped_mass": float(abs(lam[neg].sum())),
              "min_eigenvalue": float(lam.min()) if lam.size else 0.0}
    # factor the correlation matrix: eigh is accurate to eps * lambda_max in
    # absolute terms, which would swamp rows whose variance is many decades
    # below the largest one (high l at small r)
    d = np.sqrt(np.maximum(np.diag(S), 0.0))
    keep = d > 0
    A = np.zeros_like(S)
    if keep.any():
        dk = d[keep]
        lam_c, vec_c = np.linalg.eigh(S[np.ix_(keep, keep)] / np.outer(dk, dk))
        A[np.ix_(keep, keep)] = dk[:, None] * vec_c * np.sqrt(np.maximum(lam_c, 0.0))
    return A, report


@dataclass(frozen=True, eq=False)
class ModeLaw:
    field_class: str
    ell: int
    mu: np.ndarray
    cov: np.ndarray
    A: np.ndarray
    report: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class ModeLawSet:
    bias: BiasSpec
    kernels: KernelSet
    lmax: int
    laws: dict

    def law_for(self, alpha: int, ell: int) -> ModeLaw:
        if ell >= 2:
            return self.laws[(SHARED, ell)]
        return self.laws[(FIRST if alpha == 1 else OTHER, ell)]

    def __iter__(self):
        return iter(self.laws.values())

    @property
    def radii(self) -> np.ndarray:
        return self.kernels.grid.radii


def build_mode_laws(bias: BiasSpec, kernels: KernelSet, grid: RadialGrid | None = None,
                    lmax: int | None = None, eps_clip: float = EPS_CLIP) -> ModeLawSet:
    """All distinct biased mode laws up to ``lmax`` on the kernel grid."""
    if kernels.grid is None:
        raise ValueError("build_mode_laws needs a KernelSet built on a grid")
    if grid is not None and not np.array_equal(grid.radii, kernels.grid.radii):
        raise ValueError("grid does not match the kernel grid")
    lmax = kernels.lmax if lmax is None else lmax
    if lmax > kernels.lmax + 1:
        raise ValueError(f"kernels only hold l <= {kernels.lmax + 1}")
    s0, s1 = kernels.sigma0sq, kernels.sigma1sq
    C, D = kernels.Cr, kernels.Dr
    scale = 4 * math.pi * s0
    zero = np.zeros(len(kernels.grid))
    specs = {}
    for ell in range(lmax + 1):
        base = 4 * math.pi * np.asarray(kernels.Ctilde[ell])
        if ell == 0:
            cov = base - 4 * math.pi * np.outer(C, C) / s0
            specs[(FIRST, 0)] = (SQRT_4PI * bias.nubar / math.sqrt(s0) * C, cov)
            specs[(OTHER, 0)] = (zero, cov)
        elif ell == 1:
            specs[(FIRST, 1)] = (zero, base - 4 * math.pi * np.outer(D, D) / s1)
            specs[(OTHER, 1)] = (zero, base)
        else:
            specs[(SHARED, ell)] = (zero, base)
    laws = {}
    for key, (mu, cov) in specs.items():
        cov = 0.5 * (cov + cov.T)
        try:
            A, report = factor_covariance(cov, eps_clip, scale)
        except CovarianceNotPSD as exc:
            raise CovarianceNotPSD(f"law {key}: {exc}") from exc
        for arr in (mu, cov, A):
            arr.setflags(write=False)
        laws[key] = ModeLaw(key[0], key[1], mu, cov, A, report)
    return ModeLawSet(bias, kernels, lmax, laws)


# ---------------------------------------------------------------------------
# drawing

def truncated_mode_variances(laws: "ModeLawSet", i: int, L: int) -> np.ndarray:
    """Exact Var(Phi_lm(r_i)), l = 0..L, of the band-limited field the sampler draws.

    Each field's coefficients are independent across (l, m) with variance
    v_l and a mean only at l = 0, so by Funk-Hecke the quadratic form gives
    4 pi int P_l K^2 du + 4 mu^2 Y00^2 v_l per field, with
    K(u) = sum_l' v_l' (2l'+1)/(4 pi) P_l'(u). Compare with mode_cov to see
    how much of each mode the truncation misses.
    """
    lmax = laws.lmax
    top = max(L, lmax)
    # P_l K^2 has degree L + 2 lmax
    x, w = gauss_legendre((L + 2 * lmax) // 2 + 1)
    P = legendre_all(top, x)                                # (top+1, nodes)
    ell = np.arange(lmax + 1)
    out = np.zeros(L + 1)
    for alpha in range(1, laws.bias.n + 1):
        v = np.array([laws.law_for(alpha, l).cov[i, i] for l in ell])
        K = ((2 * ell + 1) / (4 * math.pi) * v) @ P[:lmax + 1]
        out += 4 * math.pi * (P[:L + 1] * K * K) @ w
        mu = float(laws.law_for(alpha, 0).mu[i])
        k = min(L, lmax)
        out[:k + 1] += 4 * mu * mu * v[:k + 1] / (4 * math.pi)
    return out


def draw_coefficients(laws: ModeLawSet, seeds) -> np.ndarray:
    """Mode coefficients for a batch of seeds; shape (S, n, (lmax+1)^2, M)."""
    seeds = np.atleast_1d(np.asarray(seeds, dtype=np.uint64))
    n, L, M = laws.bias.n, laws.lmax, len(laws.kernels.grid)
    out = np.empty((seeds.size, n, n_coeffs(L), M))
    alpha = np.arange(1, n + 1)[:, None]
    for ell in range(L + 1):
        ms = np.arange(-ell, ell + 1)[None, :]
        z = stream_normals(seeds[:, None, None], alpha, ell, ms, M)   # (S, n, 2l+1, M)
        sl = slice(lm_index(ell, -ell), lm_index(ell, ell) + 1)
        for a in range(n):
            law = laws.law_for(a + 1, ell)
            vals = z[:, a] @ law.A.T
            if ell == 0:
                vals = vals + law.mu
            out[:, a, sl] = vals
    return out


@dataclass(frozen=True, eq=False)
class FieldSample:
    """One realization phi^alpha_lm(r_i), stored as an array (n, (lmax+1)^2, M)."""

    coefficients: np.ndarray
    seed: int
    plan: TruncationPlan
    radii: np.ndarray
    nu: float

    @property
    def n(self) -> int:
        return self.coefficients.shape[0]

    @property
    def lmax(self) -> int:
        return int(round(math.sqrt(self.coefficients.shape[1]))) - 1

    def nested(self) -> list:
        """Coefficients as nested lists ordered [alpha][l][m][i], m ascending."""
        c = self.coefficients
        return [[[c[a, lm_index(ell, m)].tolist() for m in range(-ell, ell + 1)]
                 for ell in range(self.lmax + 1)] for a in range(self.n)]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "n": self.n, "nu": self.nu, "lmax": self.lmax,
                "radii": self.radii.tolist(), "plan": self.plan.to_dict(),
                "coefficients": self.nested()}


def draw_sample(laws: ModeLawSet, rng_seed: int) -> FieldSample:
    """Deterministic sample from the (seed, alpha, l, m)-keyed normal streams."""
    split_seed(rng_seed)
    coeffs = draw_coefficients(laws, [rng_seed])[0]
    coeffs.setflags(write=False)
    plan = truncation_plan(laws.kernels, laws.bias, laws.lmax)
    return FieldSample(coeffs, int(rng_seed), plan, laws.radii, laws.bias.nu)


# ---------------------------------------------------------------------------
# assembly

def _directions(direction):
    d = np.asarray(direction, dtype=float)
    if d.shape[-1] == 3:
        return angles_from_xyz(d)
    if d.shape[-1] == 2:
        return d[..., 0], d[..., 1]
    raise ValueError("direction must be (theta, phi) or (x, y, z)")


def phi_from_coefficients(coeffs, ylm) -> np.ndarray:
    """Phi = sum_alpha (sum_lm phi_lm Y_lm)^2.

    ``coeffs`` has shape (..., n, ncoef, M) and ``ylm`` (ncoef, ndir); the
    result has shape (..., ndir, M).
    """
    fields = np.matmul(np.swapaxes(coeffs, -1, -2), ylm)      # (..., n, M, ndir)
    return np.swapaxes(np.sum(fields * fields, axis=-3), -1, -2)


def phi00_from_coefficients(coeffs) -> np.ndarray:
    return np.sum(coeffs * coeffs, axis=(-3, -2)) / SQRT_4PI


def assemble_phi(sample: FieldSample, direction, corrected: bool = False) -> np.ndarray:
    """Phi_B(r_i, n) at one direction (shape (M,)) or several (shape (ndir, M)).

    ``direction`` is (theta, phi) or a Cartesian unit vector, or an array of either.
    """
    theta, phi = _directions(direction)
    single = np.ndim(theta) == 0
    ylm = real_ylm_all(sample.lmax, np.atleast_1d(theta), np.atleast_1d(phi))
    out = phi_from_coefficients(sample.coefficients, ylm)
    if corrected:
        out = out + sample.plan.E_trunc / SQRT_4PI
    return out[0] if single else out


def assemble_phi00(sample: FieldSample, corrected: bool = False) -> np.ndarray:
    """Phi_B,00(r_i) = (1/sqrt(4 pi)) sum over alpha, l, m of phi_lm^2."""
    out = phi00_from_coefficients(sample.coefficients)
    return out + sample.plan.E_trunc if corrected else out


def projection_grid(lmax: int):
    """Angular grid exact for projecting Phi (band limit 2 lmax) onto Y_lm, l <= 2 lmax."""
    return sphere_grid(2 * lmax + 2, 4 * lmax + 4)


def project_modes(coeffs, lmax: int, L: int) -> np.ndarray:
    """Phi_lm(r_i) for l <= L by angular projection; shape (..., (L+1)^2, M)."""
    if L > 2 * lmax:
        raise ValueError("projection needs L <= 2 lmax")
    th, ph, w = projection_grid(lmax)
    y_full = real_ylm_all(max(lmax, L), th, ph)
    phi = phi_from_coefficients(coeffs, y_full[:n_coeffs(lmax)])
    return np.matmul(y_full[:n_coeffs(L)] * w, phi)


PROBE_DIRECTIONS = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)
                             if (i, j, k) != (0, 0, 0)], dtype=float)
PROBE_DIRECTIONS /= np.linalg.norm(PROBE_DIRECTIONS, axis=1, keepdims=True)


def classify_stationary(sample: FieldSample, probe_radius: float, corrected: bool = False,
                        tie_tol: float = 1e-12) -> str:
    """Classify the stationary point from Phi - nu^2 on 26 directions at the nearest grid radius.

    Returns ``"peak-like"`` when every probe lies below nu^2, ``"trough-like"``
    when every probe lies above, and ``"saddle-like"`` otherwise; values within
    ``tie_tol`` (relative) of nu^2 count as ties.
    """
    if probe_radius < sample.radii[0]:
        raise ValueError("probe radius lies inside the first grid radius")
    i = int(np.argmin(np.abs(sample.radii - probe_radius)))
    vals = assemble_phi(sample, PROBE_DIRECTIONS, corrected)[:, i] - sample.nu ** 2
    tol = tie_tol * max(sample.nu ** 2, 1.0)
    if np.all(vals < -tol):
        return "peak-like"
    if np.all(vals > tol):
        return "trough-like"
    return "saddle-like"
