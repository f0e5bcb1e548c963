import csv
import json
import logging
import math

import numpy as np
import pytest

from chi2peaks import cli
from chi2peaks.gaussian_bias import ZeroAmplitudeError

SMALL = ["--set", "grid.r_max=0.2", "--set", "grid.points=6", "--set", "lmax=6"]


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(x) if x else math.nan for x in r] for r in rows[1:]])


def run(*argv):
    return cli.main(list(argv))


# --- config ----------------------------------------------------------------

def test_defaults_and_overrides():
    cfg = cli.load_config(None, ["n=3", "grid.points=16", "spectrum.ktilde=4"])
    assert cfg.n == 3 and cfg.grid["points"] == 16 and cfg.spectrum["ktilde"] == 4
    assert cfg.nubar == 3.0 and cfg.nu is None
    cfg = cli.load_config(None, ["nu=2.5"])
    assert cfg.nu == 2.5 and cfg.nubar is None


def test_config_file(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text("n: 4\nnubar: 2\ngrid:\n  r_max: 0.3\n  points: 12\n  spacing: log\n  r_min: 0.001\n")
    cfg = cli.load_config(p)
    g = cfg.build_grid()
    assert len(g) == 12 and g.radii[0] == pytest.approx(0.001) and g.radii[-1] == pytest.approx(0.3)


@pytest.mark.parametrize("overrides,exc", [
    (["bogus=1"], cli.ConfigError),
    (["grid=3"], cli.ConfigError),
    (["n=0"], cli.ConfigError),
    (["nu=1", "nubar=2"], cli.ConfigError),
    (["nubar=0"], ZeroAmplitudeError),
    (["spectrum.kind=flat"], cli.ConfigError),
    (["grid.spacing=cubic"], cli.ConfigError),
    (["lmax=1"], cli.ConfigError),
    (["seed=-4"], cli.ConfigError),
    (["noequals"], cli.ConfigError),
])
def test_config_rejections(overrides, exc):
    with pytest.raises(exc):
        cli.load_config(None, overrides)


def test_zero_nu_is_rejected_with_exit_2(tmp_path, caplog):
    assert run("moments", "--set", "nu=0", "-o", str(tmp_path)) == cli.EXIT_CONFIG
    assert "nu = 0" in caplog.text or "zero" in caplog.text.lower()


def test_auto_lmax():
    cfg = cli.load_config(None, ["grid.r_max=0.5"])
    lmax, raw = cfg.resolve_lmax(cfg.build_spectrum())
    assert raw == pytest.approx((50.366349 * 0.5 - 5.2) / 1.05, rel=1e-6)
    assert lmax == math.ceil(raw) + 1


# --- serialization ---------------------------------------------------------

def test_json_is_deterministic():
    a = cli.dumps_json({"b": [1.0, float("nan")], "a": {"y": True, "x": None}, "c": np.float64(0.1)})
    assert a == cli.dumps_json({"c": 0.1, "a": {"x": None, "y": True}, "b": [1.0, math.nan]})
    doc = json.loads(a)
    assert list(doc) == ["a", "b", "c"] and doc["b"][1] is None and doc["c"] == 0.1


def test_fmt():
    assert cli.fmt(0.1) == "0.10000000000000001"
    assert cli.fmt(3) == "3" and cli.fmt(None) == ""


def test_write_atomic(tmp_path):
    p = cli.write_atomic(tmp_path / "sub" / "f.txt", "hello\n")
    assert p.read_text() == "hello\n"
    assert [x.name for x in p.parent.iterdir()] == ["f.txt"]


# --- commands --------------------------------------------------------------

def test_moments(capsys):
    assert run("moments") == cli.EXIT_OK
    out = dict(line.split("=") for line in capsys.readouterr().out.split())
    assert float(out["sigma0sq"]) == pytest.approx(1.0, rel=1e-12)
    assert float(out["sigma1sq"]) == pytest.approx(768.0, rel=1e-12)
    assert float(out["k_eff"]) == pytest.approx(50.366349, rel=1e-7)


def test_moments_monochromatic(capsys):
    assert run("moments", "--set", "spectrum.kind=monochromatic", "--set", "spectrum.k0=3",
               "--set", "spectrum.sigma0sq=2") == 0
    out = dict(line.split("=") for line in capsys.readouterr().out.split())
    assert float(out["sigma1sq"]) == pytest.approx(18.0)


def test_malformed_csv_exit_2(tmp_path):
    bad = tmp_path / "p.csv"
    bad.write_text("k,P\n0.1,1.0\n0.2,abc\n")
    assert run("moments", "--set", "spectrum.kind=tabulated", "--set", f"spectrum.csv={bad}") == cli.EXIT_CONFIG
    assert run("moments", "--set", "spectrum.kind=tabulated", "--set",
               f"spectrum.csv={tmp_path / 'missing.csv'}") == cli.EXIT_CONFIG
    assert run("moments", "-c", str(tmp_path / "nope.yaml")) == cli.EXIT_CONFIG


def test_numerical_failure_exit_3(monkeypatch, tmp_path):
    def boom(*a, **k):
        raise ArithmeticError("quadrature did not converge")
    monkeypatch.setattr(cli.chi2stats, "profile_report", boom)
    assert run("profile", "-o", str(tmp_path), *SMALL) == cli.EXIT_NUMERIC


def test_profile(tmp_path):
    out = tmp_path / "p"
    assert run("profile", "-o", str(out), "--set", "grid.spacing=log", "--set", "grid.r_min=1e-4",
               "--set", "grid.points=40", "--set", "grid.r_max=0.3") == 0
    header, data = read_csv(out / "profile.csv")
    assert tuple(header) == ("r", "mean", "var", "env_lo", "env_hi", "rhoC", "rhoD", "sigma_as2", "As")
    cfg = cli.load_config(None, ["grid.spacing=log", "grid.r_min=1e-4", "grid.points=40", "grid.r_max=0.3"])
    assert np.allclose(data[:, 0], cfg.build_grid().radii, rtol=1e-15)
    assert data[0, 1] == pytest.approx(9.0, rel=1e-3)
    assert np.all((data[:, 8] >= 0) & (data[:, 8] <= 1))
    sc = json.loads((out / "profile_scalars.json").read_text())
    assert {"r_half", "dr_half_left", "dr_half_right", "r_sph", "beta"} <= set(sc)


def test_modes(tmp_path):
    assert run("modes", "-o", str(tmp_path), "-L", "6", *SMALL) == 0
    header, data = read_csv(tmp_path / "modes.csv")
    assert header == ["r", "ell", "var", "recovered_fraction"]
    assert len(data) == 6 * 7
    # sorted by radius then l
    assert np.all(np.diff(data[:, 0]) >= 0)
    frac = data[:, 3].reshape(6, 7)
    assert np.all(frac <= 1 + 1e-6) and np.all(np.diff(frac, axis=1) >= -1e-10)
    # the spherical mode dominates inside the half-height radius (about 0.049)
    var = data[:, 2].reshape(6, 7)
    r = data[::7, 0]
    for i in np.nonzero(r <= 0.049)[0]:
        assert np.argmax(var[i]) == 0


def test_diagnostics(tmp_path):
    assert run("diagnostics", "-o", str(tmp_path), "--set", "grid.r_max=0.2", "--set", "grid.points=8") == 0
    header, data = read_csv(tmp_path / "sigma_stack.csv")
    assert header[0] == "r" and header[-1] == "E_trunc" and header[1] == "Sigma_0"
    stack = data[:, 1:-1]
    assert np.all(np.diff(stack, axis=1) >= -1e-15)
    assert np.all(stack[:, -1] <= 1 + 1e-8)
    assert stack[0, -1] == pytest.approx(1.0, abs=1e-6)
    assert np.all(data[:, -1] >= 0)


def test_sample(tmp_path):
    out = tmp_path / "s"
    assert run("sample", "--seed", "5", "--count", "2", "-o", str(out), *SMALL) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["phi00_5.csv", "phi00_6.csv", "phi_5.csv", "phi_6.csv", "sample_5.json", "sample_6.json"]
    h, d = read_csv(out / "phi00_5.csv")
    assert h == ["r", "Phi00", "Phi00_corrected", "E_trunc"]
    assert np.allclose(d[:, 2], d[:, 1] + d[:, 3], rtol=1e-14)
    assert d[0, 0] == 0 and d[0, 1] == pytest.approx(math.sqrt(4 * math.pi) * 9, rel=1e-12)
    h, d = read_csv(out / "phi_5.csv")
    assert h == ["r", "theta", "phi", "Phi", "Phi_corrected"]
    assert np.all(d[:, 3] >= 0)
    doc = json.loads((out / "sample_5.json").read_text())
    assert doc["seed"] == 5 and doc["lmax"] == 6 and len(doc["coefficients"]) == 5
    assert len(doc["plan"]["E_trunc"]) == 6


def test_sample_is_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    cache = tmp_path / "cache"
    assert run("sample", "--seed", "1", "-o", str(a), "--kernel-cache", str(cache), *SMALL) == 0
    assert run("sample", "--seed", "1", "-o", str(b), "--kernel-cache", str(cache), *SMALL) == 0
    for name in ("sample_1.json", "phi_1.csv", "phi00_1.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_sample_needs_seed(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("sample", "-o", str(tmp_path))
    assert exc.value.code == 2


def test_validate_underpowered(tmp_path, caplog):
    caplog.set_level(logging.WARNING, logger="chi2peaks")
    code = run("validate", "--N", "10", "--seed", "2", "-o", str(tmp_path), "--set", "grid.r_max=0.2",
               "--set", "grid.points=4", "--set", "lmax=4")
    assert code in (cli.EXIT_OK, cli.EXIT_VALIDATION)
    assert "underpowered" in caplog.text
    rep = json.loads((tmp_path / "validation.json").read_text())
    assert rep["underpowered"] is True and rep["N"] == 10
    assert set(rep) == {"N", "seed", "underpowered", "groups", "diagonality", "pass"}
    for g in rep["groups"].values():
        for c in g["checks"]:
            assert set(c) == {"name", "statistic", "expected", "z", "pass"}


def test_validate_small_passes(tmp_path):
    code = run("validate", "--N", "3000", "--seed", "1", "-o", str(tmp_path), "--set", "grid.r_max=0.2",
               "--set", "grid.points=4", "--set", "lmax=8")
    rep = json.loads((tmp_path / "validation.json").read_text())
    assert code == cli.EXIT_OK and rep["pass"] is True


def test_validate_default_config_passes(tmp_path):
    # the full default run: auto lmax (21 on r_max 0.5), 32 radii, N = 20000; several minutes
    assert run("validate", "-o", str(tmp_path)) == cli.EXIT_OK
    rep = json.loads((tmp_path / "validation.json").read_text())
    assert rep["pass"] is True and rep["N"] == 20000 and rep["diagonality"]["L"] == 21
