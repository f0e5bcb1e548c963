"""Brute-force Monte Carlo validators for the analytic statistics.

The point-set oracle draws the fields directly from a conditioned joint
Gaussian over a handful of points, with no spherical-harmonic machinery.
The Wick oracle samples a 4-vector. The mode-sampler checks recover the
mode laws and the (l, m) diagonality of Phi from sampled coefficients.
Every gate compares a statistic to its expectation in units of its standard
error and passes at |z| < 4.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import chi2stats
from .gaussian_bias import BiasSpec, condition, point_partition, wick4
from .harmonics import n_coeffs
from .kernels import KernelSet
from .sampler import (FIRST, OTHER, ModeLawSet, draw_coefficients, factor_covariance,
                      phi00_from_coefficients, project_modes, sigma_recovery,
                      truncated_mode_variances, truncation_correction)

Z_GATE = 4.0
PASS_FRACTION = 0.99
MIN_SAMPLES = 1000
TRUNC_NEGLIGIBLE = 1e-4
# relative gap between band-limited and full Phi_lm variance below which the full value is used
TRUNC_BIAS_REL = 1e-3


@dataclass
class Check:
    name: str
    statistic: float
    expected: float
    z: float
    passed: bool

    def __post_init__(self):
        # plain Python scalars keep the report JSON-serializable
        for name in ("statistic", "expected", "z"):
            setattr(self, name, float(getattr(self, name)))
        self.passed = bool(self.passed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return d


def _z(stat, expected, se):
    stat, expected, se = (np.asarray(x, dtype=float) for x in (stat, expected, se))
    diff = stat - expected
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, diff / np.where(se > 0, se, 1.0),
                     np.where(np.abs(diff) <= 1e-12 * (1 + np.abs(expected)), 0.0, np.inf))
    return z


def _rng(seed: int, *stream):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *stream])))


def _block_edges(N: int, blocks: int) -> np.ndarray:
    return np.linspace(0, N, min(blocks, N) + 1).astype(int)


def _jackknife_from_blocks(sx, sy, sxy, cnt):
    """Full covariance and delete-one-block jackknife SE from per-block sums."""
    blocks = sx.shape[0]
    cnt = np.asarray(cnt, dtype=float).reshape((-1,) + (1,) * (sxy.ndim - 1))
    N = cnt.sum()

    def cov_from(tx, ty, txy, n):
        return (txy - tx * ty / n) / (n - 1)

    full = cov_from(sx.sum(0), sy.sum(0), sxy.sum(0), N)
    loo = cov_from(sx.sum(0) - sx, sy.sum(0) - sy, sxy.sum(0) - sxy, N - cnt)
    se = np.sqrt((blocks - 1) / blocks * np.sum((loo - loo.mean(0)) ** 2, axis=0))
    return full, se


def jackknife_cov(x, y, blocks: int = 50):
    """Sample covariance of paired samples with its delete-one-block jackknife standard error.

    ``x`` and ``y`` have the sample index first; trailing axes broadcast.
    """
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    edges = _block_edges(x.shape[0], blocks)
    sx = np.add.reduceat(x, edges[:-1], axis=0)
    sy = np.add.reduceat(y, edges[:-1], axis=0)
    sxy = np.add.reduceat(x * y, edges[:-1], axis=0)
    return _jackknife_from_blocks(sx, sy, sxy, np.diff(edges))


class BlockMoments:
    """Streaming first and second moments of a vector, kept per jackknife block.

    Samples are identified by their index in 0..N-1 and fall into the same
    contiguous blocks jackknife_cov would use. Each sample may carry several
    pooled rows; they all land in that sample's block.
    """

    def __init__(self, N: int, dim: int, blocks: int = 50):
        self.N = int(N)
        self.edges = _block_edges(self.N, blocks)
        B = len(self.edges) - 1
        self.sx = np.zeros((B, dim))
        self.sxx = np.zeros((B, dim, dim))
        self.cnt = np.zeros(B)

    def add(self, x, start: int):
        """x: (samples, dim) or (samples, pooled, dim) for samples start, start+1, ..."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            x = x[:, None, :]
        S = x.shape[0]
        if start < 0 or start + S > self.N:
            raise ValueError("sample index out of range")
        blk = np.searchsorted(self.edges, start + np.arange(S), side="right") - 1
        for b in np.unique(blk):
            rows = x[blk == b].reshape(-1, x.shape[-1])
            self.sx[b] += rows.sum(0)
            self.sxx[b] += rows.T @ rows
            self.cnt[b] += rows.shape[0]

    @property
    def count(self) -> float:
        return float(self.cnt.sum())

    def mean(self):
        n = self.count
        mu = self.sx.sum(0) / n
        cov, _ = self.cov()
        return mu, np.sqrt(np.maximum(np.diag(cov), 0.0) / n)

    def cov(self):
        return _jackknife_from_blocks(self.sx[:, :, None], self.sx[:, None, :], self.sxx, self.cnt)


# ---------------------------------------------------------------------------
# point statistics

def points_to_xyz(points) -> np.ndarray:
    """(r, cos gamma) pairs to 3-vectors in the x-z plane, gamma measured from the z axis."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    r, c = pts[:, 0], np.clip(pts[:, 1], -1, 1)
    return np.column_stack([r * np.sqrt(1 - c * c), np.zeros_like(r), r * c])


@dataclass
class PointStats:
    points: np.ndarray
    mean: np.ndarray
    mean_se: np.ndarray
    cov: np.ndarray
    cov_se: np.ndarray
    N: int


def mc_biased_point_stats(bias: BiasSpec, kernels: KernelSet, points, N: int, seed: int,
                          chunk: int = 20000) -> PointStats:
    """Empirical mean and covariance of Phi_B at up to 8 points.

    Each field alpha is drawn from its joint Gaussian over the points
    conditioned on the origin constraints, then squared and summed.
    """
    xyz = points_to_xyz(points)
    P = len(xyz)
    if P > 8:
        raise ValueError("at most 8 points")
    laws = []
    for alpha in (1, 2) if bias.n > 1 else (1,):
        part, w2 = point_partition(bias, kernels, alpha, xyz)
        mean, cov = condition(part, w2)
        A, _ = factor_covariance(cov, scale=kernels.sigma0sq)
        laws.append((mean, A))
    phi = np.empty((N, P))
    for c, start in enumerate(range(0, N, chunk)):
        size = min(chunk, N - start)
        rng = _rng(seed, c)
        total = np.zeros((size, P))
        for alpha in range(1, bias.n + 1):
            mean, A = laws[0] if alpha == 1 else laws[1]
            f = rng.standard_normal((size, P)) @ A.T + mean
            total += f * f
        phi[start:start + size] = total
    cov, cov_se = jackknife_cov(phi[:, :, None], phi[:, None, :])
    return PointStats(xyz, phi.mean(0), phi.std(0, ddof=1) / math.sqrt(N), cov, cov_se, N)


def point_checks(bias: BiasSpec, kernels: KernelSet, stats: PointStats, label: str = "") -> list[Check]:
    """Compare a PointStats against biased_mean / biased_cov."""
    r = np.linalg.norm(stats.points, axis=1)
    unit = stats.points / r[:, None]
    checks = []
    for i in range(len(r)):
        exp = float(chi2stats.biased_mean(bias, kernels, r[i]))
        z = float(_z(stats.mean[i], exp, stats.mean_se[i]))
        checks.append(Check(f"{label}mean[{i}]", float(stats.mean[i]), exp, z, abs(z) < Z_GATE))
        for j in range(i, len(r)):
            cosg = float(np.clip(unit[i] @ unit[j], -1, 1))
            exp = float(chi2stats.biased_cov(bias, kernels, r[i], r[j], cosg))
            z = float(_z(stats.cov[i, j], exp, stats.cov_se[i, j]))
            checks.append(Check(f"{label}cov[{i},{j}]", float(stats.cov[i, j]), exp, z, abs(z) < Z_GATE))
    return checks


# ---------------------------------------------------------------------------
# Wick

def mc_wick4(means, cov, N: int, seed: int, chunk: int = 250000) -> tuple[float, float]:
    """Empirical <X1 X2 X3 X4> and its standard error."""
    mu = np.asarray(means, dtype=float)
    A, _ = factor_covariance(np.asarray(cov, dtype=float), scale=float(np.trace(cov)) or 1.0)
    s = s2 = 0.0
    for c, start in enumerate(range(0, N, chunk)):
        size = min(chunk, N - start)
        x = _rng(seed, c).standard_normal((size, 4)) @ A.T + mu
        prod = np.prod(x, axis=1)
        s += prod.sum()
        s2 += (prod * prod).sum()
    mean = s / N
    var = max(s2 / N - mean * mean, 0.0) * N / (N - 1)
    return mean, math.sqrt(var / N)


# ---------------------------------------------------------------------------
# mode sampler

def sample_batches(laws: ModeLawSet, N: int, seed: int, batch: int = 1000):
    """Yield coefficient batches for seeds seed*N .. seed*N + N - 1 in order."""
    base = int(seed) * int(N)
    for start in range(0, N, batch):
        stop = min(N, start + batch)
        yield draw_coefficients(laws, np.arange(base + start, base + stop, dtype=np.uint64))


def _chunks(coeffs, batch: int):
    coeffs = np.asarray(coeffs)
    for s in range(0, coeffs.shape[0], batch):
        yield s, coeffs[s:s + batch]


def _law_alphas(cls, n):
    if cls == FIRST:
        return [1]
    return list(range(2, n + 1)) if cls == OTHER else list(range(1, n + 1))


class _LawAccumulator:
    """Pools the (alpha, m) draws of each law; they are i.i.d. by construction."""

    def __init__(self, laws: ModeLawSet, N: int):
        self.laws = laws
        M = len(laws.kernels.grid)
        self.acc = {key: BlockMoments(N, M) for key in laws.laws if _law_alphas(key[0], laws.bias.n)}

    def add(self, c, start):
        n = self.laws.bias.n
        for (cls, ell), acc in self.acc.items():
            a = [k - 1 for k in _law_alphas(cls, n)]
            x = c[:, a, ell * ell:(ell + 1) ** 2, :]
            acc.add(x.reshape(x.shape[0], -1, x.shape[-1]), start)

    def checks(self) -> list[Check]:
        out = []
        for (cls, ell), acc in self.acc.items():
            law = self.laws.laws[(cls, ell)]
            mean, se = acc.mean()
            for i, z in enumerate(_z(mean, law.mu, se)):
                out.append(Check(f"law[{cls},{ell}].mu[{i}]", mean[i], law.mu[i], z, abs(z) < Z_GATE))
            cov, cse = acc.cov()
            zc = _z(cov, law.cov, cse)
            for i in range(cov.shape[0]):
                for j in range(i, cov.shape[0]):
                    out.append(Check(f"law[{cls},{ell}].cov[{i},{j}]", cov[i, j], law.cov[i, j],
                                     zc[i, j], abs(zc[i, j]) < Z_GATE))
        return out


class _Phi00Accumulator:
    def __init__(self, laws: ModeLawSet, N: int):
        ks = laws.kernels
        self.shift = truncation_correction(ks, laws.bias, laws.lmax)
        self.expected = chi2stats.mode_mean(laws.bias, ks, 0, 0, ks.grid.radii)
        self.acc = BlockMoments(N, len(ks.grid))

    def add(self, c, start):
        self.acc.add(phi00_from_coefficients(c) + self.shift, start)

    def checks(self) -> list[Check]:
        mean, se = self.acc.mean()
        zs = _z(mean, self.expected, se)
        return [Check(f"phi00_corrected_mean[{i}]", mean[i], self.expected[i], z, abs(z) < Z_GATE)
                for i, z in enumerate(zs)]


def mc_mode_laws(laws: ModeLawSet, coeffs, batch: int = 1000) -> list[Check]:
    """Recover each law's mean and covariance from pooled coefficient vectors."""
    acc = _LawAccumulator(laws, np.shape(coeffs)[0])
    for s, c in _chunks(coeffs, batch):
        acc.add(c, s)
    return acc.checks()


def mc_phi00_mean(laws: ModeLawSet, coeffs, batch: int = 1000) -> list[Check]:
    """Mean of the truncation-corrected Phi_00 against sqrt(4 pi) <Phi_B(r)>."""
    acc = _Phi00Accumulator(laws, np.shape(coeffs)[0])
    for s, c in _chunks(coeffs, batch):
        acc.add(c, s)
    return acc.checks()


@dataclass
class DiagonalityResult:
    L: int
    radius_index: int
    cov: np.ndarray
    se: np.ndarray
    z: np.ndarray
    offdiag_pass_fraction: float
    diag_checks: list

    @property
    def passed(self) -> bool:
        return self.offdiag_pass_fraction >= PASS_FRACTION and all(c.passed for c in self.diag_checks)


class _DiagAccumulator:
    def __init__(self, laws: ModeLawSet, L: int, N: int, radius_index: int | None):
        self.laws, self.L = laws, L
        self.missing = 1.0 - sigma_recovery(laws.kernels, laws.lmax)
        if radius_index is None:
            ok = np.nonzero(self.missing <= TRUNC_NEGLIGIBLE)[0]
            radius_index = int(ok[-1]) if ok.size else 0
        self.i = radius_index
        self.acc = BlockMoments(N, n_coeffs(L))

    def add(self, c, start):
        i = self.i
        self.acc.add(project_modes(c[..., i:i + 1], self.laws.lmax, self.L)[..., 0], start)

    def result(self) -> DiagonalityResult:
        ks, bias, L, i = self.laws.kernels, self.laws.bias, self.L, self.i
        cov, se = self.acc.cov()
        z = _z(cov, 0.0, se)
        off = ~np.eye(n_coeffs(L), dtype=bool)
        frac = float(np.mean(np.abs(z[off]) < Z_GATE))
        r = float(ks.grid.radii[i])
        diag = []
        if self.missing[i] <= TRUNC_NEGLIGIBLE:
            trunc = truncated_mode_variances(self.laws, i, L)
            for ell in range(L + 1):
                full = chi2stats.mode_cov(bias, ks, ell, r, r)
                # high l couples to field modes above lmax; there the sample is held to
                # the band-limited expectation instead of the full one
                if abs(trunc[ell] - full) <= TRUNC_BIAS_REL * abs(full):
                    exp, tag = full, "Phi_lm_var"
                else:
                    exp, tag = float(trunc[ell]), "Phi_lm_var_truncated"
                for m in range(-ell, ell + 1):
                    k = ell * ell + ell + m
                    zz = _z(cov[k, k], exp, se[k, k])
                    diag.append(Check(f"{tag}[{ell},{m}]", cov[k, k], exp, zz, abs(zz) < Z_GATE))
        return DiagonalityResult(L, i, cov, se, z, frac, diag)


def mc_mode_diagonality(laws: ModeLawSet, L: int, N: int | None = None, seed: int = 0,
                        coeffs=None, radius_index: int | None = None,
                        batch: int = 500) -> DiagonalityResult:
    """Empirical covariance of projected Phi_lm, l <= L, at one grid radius.

    Off-diagonal entries are tested against zero; diagonal entries against
    chi2stats.mode_cov. The truncated sample only carries modes up to lmax,
    so diagonal expectations are compared only where the unrecovered
    fraction 1 - Sigma_lmax is below 1e-4. By default the outermost such
    radius is used. Modes whose band-limited variance differs from mode_cov
    by more than TRUNC_BIAS_REL are checked against the band-limited value.
    """
    if coeffs is None:
        if N is None:
            raise ValueError("N is required when no coefficients are supplied")
        batches = _seeded(sample_batches(laws, N, seed, batch))
    else:
        N = np.shape(coeffs)[0]
        batches = _chunks(coeffs, batch)
    acc = _DiagAccumulator(laws, L, N, radius_index)
    for s, c in batches:
        acc.add(c, s)
    return acc.result()


def _seeded(batches):
    start = 0
    for c in batches:
        yield start, c
        start += c.shape[0]


def summarize(checks) -> dict:
    zs = np.array([abs(c.z) for c in checks]) if checks else np.zeros(0)
    return {"count": len(checks), "pass_fraction": float(np.mean(zs < Z_GATE)) if len(zs) else 1.0,
            "max_abs_z": float(zs.max()) if len(zs) else 0.0}


def random_gaussian4(rng):
    """A random non-central 4-d Gaussian (means, covariance) for Wick checks."""
    B = rng.standard_normal((4, 4))
    return rng.normal(0.0, 1.0, 4), B @ B.T / 4 + 0.1 * np.eye(4)


def default_points(r_max: float):
    fr = np.array([0.1, 0.25, 0.5, 0.9]) * r_max
    return np.column_stack([fr, [1.0, 0.6, -0.2, 0.8]])


def validation_suite(laws: ModeLawSet, N: int, seed: int, points=None,
                     wick_cases: int = 3, wick_N: int | None = None) -> dict:
    """Run every oracle against one mode-law set; returns the JSON report dict.

    ``laws.kernels`` must carry a radial grid. Point statistics use N draws,
    the Wick checks ``wick_N`` (default 10 N) and the mode checks N seeds.
    """
    ks, bias = laws.kernels, laws.bias
    points = default_points(ks.grid.r_max) if points is None else points
    groups = {}
    stats = mc_biased_point_stats(bias, ks, points, N, seed)
    groups["point_stats"] = point_checks(bias, ks, stats)
    rng = _rng(seed, 0xA11CE)
    wick = []
    for k in range(wick_cases):
        mu, cov = random_gaussian4(rng)
        exp = wick4(mu, cov)
        stat, se = mc_wick4(mu, cov, wick_N or 10 * N, seed + k + 1)
        z = float(_z(stat, exp, se))
        wick.append(Check(f"wick4[{k}]", stat, exp, z, abs(z) < Z_GATE))
    groups["wick4"] = wick
    # one pass over the draws feeds every mode-level oracle; memory stays O(batch)
    law_acc, p00_acc = _LawAccumulator(laws, N), _Phi00Accumulator(laws, N)
    diag_acc = _DiagAccumulator(laws, laws.lmax, N, None)
    for start, c in _seeded(sample_batches(laws, N, seed)):
        for acc in (law_acc, p00_acc, diag_acc):
            acc.add(c, start)
    groups["mode_laws"] = law_acc.checks()
    groups["phi00_mean"] = p00_acc.checks()
    diag = diag_acc.result()
    groups["mode_diag_variances"] = diag.diag_checks
    passed = diag.passed
    report = {"N": int(N), "seed": int(seed), "underpowered": N < MIN_SAMPLES, "groups": {},
              "diagonality": {"L": diag.L, "radius_index": diag.radius_index,
                              "offdiag_pass_fraction": diag.offdiag_pass_fraction,
                              "required": PASS_FRACTION, "pass": diag.offdiag_pass_fraction >= PASS_FRACTION}}
    for name, checks in groups.items():
        summ = summarize(checks)
        ok = summ["pass_fraction"] >= PASS_FRACTION
        passed = passed and ok
        report["groups"][name] = {**summ, "pass": ok, "checks": [c.to_dict() for c in checks]}
    report["pass"] = bool(passed)
    return report
