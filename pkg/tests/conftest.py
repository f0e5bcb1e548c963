import numpy as np
import pytest
from hypothesis import settings

from chi2peaks.gaussian_bias import BiasSpec
from chi2peaks.kernels import RadialGrid, build_kernel_set, kernel_functions
from chi2peaks.spectrum import PowerSpectrum, spectral_moments

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

KTILDE = 8.0


@pytest.fixture(scope="session")
def expspec():
    # sigma_0^2 = 1, m = 0, ktilde = 8
    return PowerSpectrum.exponential(1 / (8 * np.pi * KTILDE ** 3), 0.0, KTILDE)


@pytest.fixture(scope="session")
def monospec():
    return PowerSpectrum.monochromatic(8.0, 1.0)


@pytest.fixture(scope="session")
def moments(expspec):
    return spectral_moments(expspec)


@pytest.fixture(scope="session")
def kfun(expspec):
    return kernel_functions(expspec)


@pytest.fixture(scope="session")
def grid8():
    return RadialGrid.uniform(0.48, 8)


@pytest.fixture(scope="session")
def ks8(expspec, grid8):
    return build_kernel_set(expspec, grid8, 8)


def bias_for(nubar, moments, n=5):
    return BiasSpec.from_nubar(n, nubar, moments)


# acceptance criteria record one PASS/FAIL line each; printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
