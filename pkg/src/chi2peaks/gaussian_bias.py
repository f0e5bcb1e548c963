"""Gaussian conditioning and biased statistics of the underlying fields.

The constraint Phi(0) = nu^2, grad Phi(0) = 0 is imposed, after rotating in
field space, as phi^1(0) = nu, phi^a(0) = 0 for a > 1, and grad phi^1(0) = 0.
Field indices ``alpha`` run from 1 to n.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np
import scipy.linalg

from .kernels import KernelSet
from .spectrum import SpectralMoments

COND_LIMIT = 1e12
JITTER = 1e-12


class ZeroAmplitudeError(ValueError):
    def __init__(self):
        super().__init__(
            "nu = 0 is not supported: at zero amplitude the gradient constraint no longer "
            "pins the first field and the conditioning is ill-posed; for the nu -> 0 limit "
            "set nubar to a tiny positive value such as 1e-8")


class SingularConstraintError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class BiasSpec:
    """Stationary point Phi(0) = nu^2 of n fields with spectral moments ``moments``.

    The sign of ``nu`` is irrelevant (the positive root is taken).
    """

    n: int
    nu: float
    moments: SpectralMoments

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"n must be a positive integer, got {self.n}")
        if not np.isfinite(self.nu):
            raise ValueError("nu must be finite")
        if self.nu == 0:
            raise ZeroAmplitudeError()
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "nu", abs(float(self.nu)))

    @classmethod
    def from_nubar(cls, n: int, nubar: float, moments: SpectralMoments) -> "BiasSpec":
        if nubar == 0:
            raise ZeroAmplitudeError()
        return cls(n, nubar * moments.sigma0, moments)

    @property
    def nubar(self) -> float:
        return self.nu / self.moments.sigma0


@dataclass(frozen=True)
class GaussianPartition:
    mu1: np.ndarray
    mu2: np.ndarray
    S11: np.ndarray
    S12: np.ndarray
    S22: np.ndarray

    def __post_init__(self):
        for name in ("mu1", "mu2", "S11", "S12", "S22"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        q, p = self.mu1.size, self.mu2.size
        object.__setattr__(self, "S11", self.S11.reshape(q, q))
        object.__setattr__(self, "S22", self.S22.reshape(p, p))
        object.__setattr__(self, "S12", self.S12.reshape(q, p))


def condition(part: GaussianPartition, fixed_w2) -> tuple[np.ndarray, np.ndarray]:
    """Condition the first block on the second taking the value ``fixed_w2``.

    Returns
    -------
    mean_B : ndarray
        mu1 - S12 S22^-1 (mu2 - w2)
    cov_B : ndarray
        S11 - S12 S22^-1 S21, symmetrized.

    Raises
    ------
    SingularConstraintError
        If S22 has condition number above 1e12.
    """
    w2 = np.atleast_1d(np.asarray(fixed_w2, dtype=float))
    S22 = 0.5 * (part.S22 + part.S22.T)
    cond = np.linalg.cond(S22)
    if not cond < COND_LIMIT:
        raise SingularConstraintError(f"constraint covariance condition number {cond:.3g} exceeds 1e12")
    try:
        factor = scipy.linalg.cho_factor(S22)
    except np.linalg.LinAlgError:
        # Tikhonov fallback when rounding spoils an otherwise acceptable block
        S22 = S22 + JITTER * np.trace(S22) * np.eye(S22.shape[0])
        try:
            factor = scipy.linalg.cho_factor(S22)
        except np.linalg.LinAlgError as exc:
            raise SingularConstraintError("constraint covariance is not positive definite") from exc
    gain = scipy.linalg.cho_solve(factor, part.S12.T).T
    mean = part.mu1 - gain @ (part.mu2 - w2)
    cov = part.S11 - gain @ part.S12.T
    return mean, 0.5 * (cov + cov.T)


# ---------------------------------------------------------------------------
# closed forms

def _separation(r, rp, cosg):
    return np.sqrt(np.maximum(r * r + rp * rp - 2 * r * rp * cosg, 0.0))


def biased_phi_mean(bias: BiasSpec, kernels: KernelSet, alpha: int, r):
    """<phi^alpha(r)> given the constraint: delta^{alpha 1} (nubar / sigma_0) C(r)."""
    _check_alpha(bias, alpha)
    if alpha != 1:
        return 0.0 * np.asarray(r, dtype=float)
    return bias.nubar / bias.moments.sigma0 * kernels.C(r)


def biased_phi_cov(bias: BiasSpec, kernels: KernelSet, alpha: int, beta: int, r, rp, cosg):
    """Biased covariance of phi^alpha(r) and phi^beta(r') separated by angle gamma."""
    _check_alpha(bias, alpha)
    _check_alpha(bias, beta)
    r, rp, cosg = (np.asarray(x, dtype=float) for x in (r, rp, cosg))
    if np.any(np.abs(cosg) > 1 + 1e-12):
        raise ValueError("|cos gamma| must not exceed 1")
    if alpha != beta:
        return 0.0 * (r + rp + cosg)
    m = bias.moments
    out = kernels.C(_separation(r, rp, cosg)) - kernels.C(r) * kernels.C(rp) / m.sigma0sq
    if alpha == 1:
        out = out - 3 * kernels.D(r) * kernels.D(rp) * cosg / m.sigma1sq
    return out


def biased_mode_mean(bias: BiasSpec, kernels: KernelSet, alpha: int, ell: int, m: int, r):
    """Mean of the biased mode coefficient phi^alpha_lm(r)."""
    _check_alpha(bias, alpha)
    if alpha != 1 or ell != 0 or m != 0:
        return 0.0 * np.asarray(r, dtype=float)
    return math.sqrt(4 * math.pi) * bias.nubar / bias.moments.sigma0 * kernels.C(r)


def biased_mode_cov(bias: BiasSpec, kernels: KernelSet, alpha: int, ell: int, r, rp):
    """Covariance of phi^alpha_lm(r) and phi^alpha_lm(r'); independent of m."""
    _check_alpha(bias, alpha)
    mo = bias.moments
    out = kernels.ctilde(ell, r, rp)
    if ell == 0:
        out -= kernels.C(r) * kernels.C(rp) / mo.sigma0sq
    if ell == 1 and alpha == 1:
        out -= kernels.D(r) * kernels.D(rp) / mo.sigma1sq
    return 4 * math.pi * out


def _check_alpha(bias, alpha):
    if not 1 <= alpha <= bias.n:
        raise ValueError(f"field index must lie in 1..{bias.n}, got {alpha}")


# ---------------------------------------------------------------------------
# partitions used to derive the closed forms numerically

def point_partition(bias: BiasSpec, kernels: KernelSet, alpha: int, points) -> tuple[GaussianPartition, np.ndarray]:
    """Joint law of phi^alpha at 3-vectors ``points`` and its constraints at the origin.

    For alpha = 1 the constraint block is (phi(0), grad phi(0)) with value
    (nu, 0, 0, 0); otherwise it is phi(0) with value 0.
    """
    _check_alpha(bias, alpha)
    x = np.atleast_2d(np.asarray(points, dtype=float))
    mo = bias.moments
    dist = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=-1)
    S11 = kernels.C(dist)
    rad = np.linalg.norm(x, axis=1)
    C0 = np.atleast_1d(kernels.C(rad))
    if alpha == 1:
        D0 = np.atleast_1d(kernels.D(rad))
        unit = np.divide(x, rad[:, None], out=np.zeros_like(x), where=rad[:, None] > 0)
        # Cov(phi(x), d_i phi(0)) = D(|x|) x_i / |x|
        S12 = np.column_stack([C0, D0[:, None] * unit])
        S22 = np.diag([mo.sigma0sq] + [mo.sigma1sq / 3] * 3)
        w2 = np.array([bias.nu, 0.0, 0.0, 0.0])
    else:
        S12 = C0[:, None]
        S22 = np.array([[mo.sigma0sq]])
        w2 = np.zeros(1)
    part = GaussianPartition(np.zeros(len(x)), np.zeros(S22.shape[0]), S11, S12, S22)
    return part, w2


def mode_partition(bias: BiasSpec, kernels: KernelSet, alpha: int, ell: int, radii) -> tuple[GaussianPartition, np.ndarray]:
    """Joint law of phi^alpha_lm at ``radii`` and the constraint mode at the origin.

    l = 0 conditions on phi_00(0); l = 1 for the first field conditions on the
    gradient mode with covariance 4 pi D / 3 and variance 4 pi sigma_1^2 / 9.
    Other cases are unconstrained and return an empty constraint block.
    """
    r = np.atleast_1d(np.asarray(radii, dtype=float))
    mo = bias.moments
    S11 = 4 * math.pi * np.array([[kernels.ctilde(ell, a, b) for b in r] for a in r])
    if ell == 0:
        S12 = 4 * math.pi * np.atleast_1d(kernels.C(r))[:, None]
        S22 = np.array([[4 * math.pi * mo.sigma0sq]])
        w2 = np.array([math.sqrt(4 * math.pi) * bias.nu if alpha == 1 else 0.0])
    elif ell == 1 and alpha == 1:
        S12 = 4 * math.pi / 3 * np.atleast_1d(kernels.D(r))[:, None]
        S22 = np.array([[4 * math.pi * mo.sigma1sq / 9]])
        w2 = np.zeros(1)
    else:
        S12 = np.zeros((r.size, 0))
        S22 = np.zeros((0, 0))
        w2 = np.zeros(0)
    return GaussianPartition(np.zeros(r.size), np.zeros(w2.size), S11, S12, S22), w2


def condition_or_prior(part: GaussianPartition, w2):
    """:func:`condition`, passing through unconstrained partitions."""
    if part.mu2.size == 0:
        return part.mu1.copy(), part.S11.copy()
    return condition(part, w2)


# ---------------------------------------------------------------------------
# Wick's theorem

def wick4(means, cov) -> float:
    """<X1 X2 X3 X4> for a jointly Gaussian vector with the given mean and covariance.

    Sum over the three covariance pairings, the six mean-mean-covariance terms
    and the product of means.
    """
    mu = np.asarray(means, dtype=float).ravel()
    S = np.asarray(cov, dtype=float)
    if mu.size != 4 or S.shape != (4, 4):
        raise ValueError("wick4 needs a 4-vector of means and a 4x4 covariance")
    total = S[0, 1] * S[2, 3] + S[0, 2] * S[1, 3] + S[0, 3] * S[1, 2]
    for i, j in combinations(range(4), 2):
        k, l = (x for x in range(4) if x not in (i, j))
        total += mu[i] * mu[j] * S[k, l]
    return float(total + np.prod(mu))
