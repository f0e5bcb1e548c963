"""End-to-end acceptance criteria, one test per criterion.

Each test prints a single ``ACCEPTANCE <k> PASS|FAIL`` line (also collected
in the terminal summary). Failures are never masked: the line is recorded and
the assertion error propagates.
"""
import contextlib
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy.special import spherical_jn
from sympy.physics.wigner import wigner_3j

from chi2peaks import chi2stats as cs
from chi2peaks import cli
from chi2peaks import mc_oracle as mc
from chi2peaks.gaussian_bias import (BiasSpec, ZeroAmplitudeError, biased_mode_cov, biased_mode_mean,
                                     biased_phi_cov, biased_phi_mean, condition, condition_or_prior,
                                     mode_partition, point_partition, wick4)
from chi2peaks.harmonics import angles_from_xyz, legendre_all, real_ylm_all
from chi2peaks.kernels import RadialGrid, build_kernel_set, ctilde_legendre, ctilde_spectral
from chi2peaks.sampler import FIRST, build_mode_laws, sigma_stack, truncation_correction
from chi2peaks.spectrum import SpectralMoments, spectral_moments

import conftest
from conftest import bias_for

A = 1 / 8.0


def c_closed(r):
    return A ** 4 / (A * A + r * r) ** 2


@contextlib.contextmanager
def criterion(k, title):
    t0 = time.perf_counter()
    try:
        yield
    except BaseException as exc:
        line = f"ACCEPTANCE {k:2d} FAIL  {title}  ({type(exc).__name__})"
        conftest.ACCEPTANCE[k] = line
        print(line)
        raise
    line = f"ACCEPTANCE {k:2d} PASS  {title}  [{time.perf_counter() - t0:.1f}s]"
    conftest.ACCEPTANCE[k] = line
    print(line)


def test_01_kernel_route_equivalence(expspec, kfun):
    with criterion(1, "C~_l spectral vs Legendre route, l <= 16, 50 pairs, 1e-6"):
        rng = np.random.default_rng(101)
        worst = 0.0
        for _ in range(50):
            r, rp = rng.uniform(0, 2.5, 2)
            r, rp = max(r, 1e-3), max(rp, 1e-3)
            for ell in range(17):
                a = ctilde_spectral(expspec, ell, r, rp)
                b = ctilde_legendre(kfun.C, ell, r, rp)
                worst = max(worst, abs(a - b))
        assert worst <= 1e-6, worst


def test_02_identity_suite(kfun, ks8):
    with criterion(2, "mode-sum, reconstruction, squared-kernel, Gaunt and harmonic identities"):
        # partial sums of (2l+1) C~_l(r, r): non-decreasing and bounded by sigma_0^2
        for r in ks8.grid.radii:
            ct = kfun.ctilde_all(64, r, r)
            part = np.cumsum((2 * np.arange(65) + 1) * ct)
            assert np.all(np.diff(part) >= -1e-12) and part[-1] <= 1 + 1e-8
        # reconstruction of C(|r - r'|) at 20 random triples
        rng = np.random.default_rng(102)
        for _ in range(20):
            r, rp = rng.uniform(0, 0.4, 2)
            u = rng.uniform(-1, 1)
            ct = kfun.ctilde_all(64, r, rp)
            lhs = np.sum((2 * np.arange(65) + 1) * legendre_all(64, u) * ct)
            assert abs(lhs - c_closed(math.sqrt(r * r + rp * rp - 2 * r * rp * u))) <= 1e-5
        # squared kernel and its Gaunt expansion for l = 0, 1, 2
        L = 30
        for r, rp in [(0.05, 0.1), (0.2, 0.15), (0.3, 0.3)]:
            ct = kfun.ctilde_all(64, r, rp)
            lhs = kfun.c2_moments(2, r, rp)
            assert abs(lhs[0] - 2 * np.sum((2 * np.arange(65) + 1) * ct ** 2)) <= 1e-5
            w = (2 * np.arange(L + 1) + 1) * ct[:L + 1]
            for ell in range(3):
                rhs = sum(w[a] * w[b] * 2 * float(wigner_3j(ell, a, b, 0, 0, 0)) ** 2
                          for a in range(L + 1) for b in range(abs(a - ell), min(L, a + ell) + 1))
                assert abs(lhs[ell] - rhs) <= 1e-5
        # addition theorem and Unsold at 1e-10
        v = rng.standard_normal((2, 40, 3))
        v /= np.linalg.norm(v, axis=2, keepdims=True)
        Ya, Yb = (real_ylm_all(16, *angles_from_xyz(x)) for x in v)
        P = legendre_all(16, np.sum(v[0] * v[1], axis=1))
        for ell in range(17):
            sl = slice(ell * ell, (ell + 1) ** 2)
            assert np.max(np.abs(np.sum(Ya[sl] * Yb[sl], 0) - (2 * ell + 1) / (4 * math.pi) * P[ell])) <= 1e-10
            assert np.max(np.abs(np.sum(Ya[sl] ** 2, 0) - (2 * ell + 1) / (4 * math.pi))) <= 1e-10


def test_03_numeric_conditioning(moments, kfun):
    with criterion(3, "numerically conditioned partitions vs closed forms, 100 arguments, 1e-10"):
        rng = np.random.default_rng(103)
        for _ in range(100):
            b = bias_for(float(rng.uniform(0.1, 10)), moments, n=int(rng.integers(2, 7)))
            r, rp = rng.uniform(0.001, 1.0, 2)
            c = rng.uniform(-1, 1)
            pts = np.array([[0, 0, r], [rp * math.sqrt(1 - c * c), 0, rp * c]])
            radii = rng.uniform(0.001, 0.7, 2)
            ell = int(rng.integers(0, 5))
            for alpha in (1, 2):
                mean, cov = condition(*point_partition(b, kfun, alpha, pts))
                ref_mu = [biased_phi_mean(b, kfun, alpha, x) for x in (r, rp)]
                off = biased_phi_cov(b, kfun, alpha, alpha, r, rp, c)
                ref_cov = [[biased_phi_cov(b, kfun, alpha, alpha, r, r, 1.0), off],
                           [off, biased_phi_cov(b, kfun, alpha, alpha, rp, rp, 1.0)]]
                assert np.max(np.abs(mean - ref_mu)) <= 1e-10
                assert np.max(np.abs(cov - np.array(ref_cov))) <= 1e-10
                mean, cov = condition_or_prior(*mode_partition(b, kfun, alpha, ell, radii))
                assert np.max(np.abs(mean - [biased_mode_mean(b, kfun, alpha, ell, 0, x) for x in radii])) <= 1e-10
                ref = [[biased_mode_cov(b, kfun, alpha, ell, x, y) for y in radii] for x in radii]
                assert np.max(np.abs(cov - np.array(ref))) <= 1e-10


def test_04_closed_form_spot_values(moments, kfun):
    with criterion(4, "spot values 5.1875 / 10.53125, background (5, 10), envelope ratios"):
        b = bias_for(3, moments)
        assert abs(cs.biased_mean(b, kfun, 0.125) - 5.1875) <= 1e-10
        assert abs(cs.biased_variance(b, kfun, 0.125) - 10.53125) <= 1e-10
        exact = SpectralMoments(1.0, 768.0)
        assert cs.unbiased_mean(5, exact) == 5.0
        assert abs(cs.unbiased_cov(5, kfun, 0.0) - 10.0) <= 1e-10
        for nb in (0.5, 3.0, 10.0):
            for n in (1, 2, 5, 8):
                env = cs.envelope_estimates(BiasSpec(n, nb, exact), kfun, 1.0)
                assert env.peak_ratio == 2 / nb
                assert env.trough_ratio == 1 / (1 + math.sqrt(n / 2))


def test_05_mc_point_statistics(moments, kfun):
    with criterion(5, "point-set Monte Carlo vs biased mean/cov, N=1e5, nubar in {0.1, 3, 10}"):
        checks = []
        for k, nb in enumerate((0.1, 3.0, 10.0)):
            b = bias_for(nb, moments)
            st = mc.mc_biased_point_stats(b, kfun, mc.default_points(0.3), 100_000, 500 + k)
            checks += mc.point_checks(b, kfun, st, f"nubar={nb}:")
        s = mc.summarize(checks)
        bad = [(c.name, round(c.z, 2)) for c in checks if not c.passed]
        assert s["pass_fraction"] >= mc.PASS_FRACTION, bad


def test_06_mc_mode_sampler(expspec, moments):
    with criterion(6, "mode sampler laws, corrected Phi_00 mean, diagonality; 8-point grid, lmax 8, N=2e4"):
        ks = build_kernel_set(expspec, RadialGrid.uniform(0.48, 8), 8)
        laws = build_mode_laws(bias_for(3, moments), ks, lmax=8)
        coeffs = np.concatenate(list(mc.sample_batches(laws, 20_000, 1)))
        law_checks = mc.mc_mode_laws(laws, coeffs)
        assert mc.summarize(law_checks)["pass_fraction"] >= mc.PASS_FRACTION
        assert all(c.passed for c in mc.mc_phi00_mean(laws, coeffs))
        diag = mc.mc_mode_diagonality(laws, 8, coeffs=coeffs)
        assert diag.offdiag_pass_fraction >= mc.PASS_FRACTION
        assert diag.diag_checks and diag.passed


def test_07_truncation_behavior(expspec, monospec, moments, ks8):
    with criterion(7, "Sigma monotone in lmax, -> 1 at r -> 0, E_trunc >= 0, monochromatic Bessel sums"):
        st = sigma_stack(ks8, 9)
        assert np.all(np.diff(st, axis=0) >= -1e-15) and np.all(st <= 1 + 1e-8)
        tiny = build_kernel_set(expspec, RadialGrid.uniform(4e-6, 4), 6)
        assert np.all(np.abs(sigma_stack(tiny, 6) - 1) <= 1e-8)
        for lmax in range(10):
            assert np.all(truncation_correction(ks8, bias_for(3, moments), lmax) >= 0)
        mono = build_kernel_set(monospec, RadialGrid.uniform(1.0, 10), 8)
        x = monospec.k0 * mono.grid.radii
        ref = np.cumsum([(2 * l + 1) * spherical_jn(l, x) ** 2 for l in range(10)], axis=0)
        assert np.max(np.abs(sigma_stack(mono, 9) - ref)) <= 1e-10


def test_08_wick_oracle():
    with criterion(8, "wick4 vs Monte Carlo, 10 random non-central 4-d Gaussians, N=1e6"):
        rng = np.random.default_rng(108)
        zs = []
        for k in range(10):
            mu, cov = mc.random_gaussian4(rng)
            stat, se = mc.mc_wick4(mu, cov, 1_000_000, 800 + k)
            zs.append((stat - wick4(mu, cov)) / se)
        assert max(abs(z) for z in zs) < mc.Z_GATE, zs


def test_09_degenerate_cases(monospec, tmp_path):
    with criterion(9, "monochromatic l=1 first-field law is zero; nu = 0 rejected"):
        mono = build_kernel_set(monospec, RadialGrid.uniform(1.0, 10), 4)
        laws = build_mode_laws(BiasSpec(3, 1.0, spectral_moments(monospec)), mono)
        assert np.all(laws.laws[(FIRST, 1)].A == 0)
        with pytest.raises(ZeroAmplitudeError):
            BiasSpec(5, 0.0, spectral_moments(monospec))
        with pytest.raises(ZeroAmplitudeError):
            cli.load_config(None, ["nu=0"])
        assert cli.main(["moments", "--set", "nu=0", "-o", str(tmp_path)]) == cli.EXIT_CONFIG


def test_10_cli_sample_determinism(tmp_path):
    with criterion(10, "cmd_sample byte-identical across runs and CHI2PEAKS_THREADS=1/4"):
        args = ["sample", "--seed", "42", "--count", "2", "--set", "grid.r_max=0.3", "--set", "grid.points=10",
                "--set", "lmax=8"]
        outs = []
        for i, threads in enumerate(("1", "4", "4")):
            env = {**os.environ, "CHI2PEAKS_THREADS": threads}
            out = tmp_path / f"run{i}"
            proc = subprocess.run([sys.executable, "-m", "chi2peaks", *args, "-o", str(out)], env=env,
                                  capture_output=True, text=True)
            assert proc.returncode == 0, proc.stderr
            outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        assert len(outs[0]) == 6
        assert outs[0] == outs[1] == outs[2]
