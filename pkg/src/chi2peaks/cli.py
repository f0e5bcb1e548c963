"""Config-driven command line: moments, profile, modes, diagnostics, sample, validate.

Configuration is a YAML file of nested sections; ``--set a.b=value``
overrides any key (values are parsed as YAML scalars). Every output file is
written atomically and floats are printed with 17 significant digits, so a
run is byte-reproducible given its config and seed.

Exit codes: 0 ok, 1 validation failure, 2 config or IO error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import chi2stats, mc_oracle, sampler
from ._parallel import thread_count
from .gaussian_bias import BiasSpec, SingularConstraintError, ZeroAmplitudeError
from .harmonics import angles_from_xyz
from .kernels import (DEFAULT_TOL, GridError, KernelSet, QuadratureError, RadialGrid,
                      cached_kernel_set)
from .spectrum import NonIntegrableSpectrum, PowerSpectrum, SpectrumError, effective_kmax, spectral_moments

log = logging.getLogger("chi2peaks")

EXIT_OK, EXIT_VALIDATION, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    "spectrum": {"kind": "exponential", "sigma0sq": 1.0, "power": 0.0, "ktilde": 8.0,
                 "amplitude": None, "k0": None, "csv": None},
    "n": 5,
    "nu": None,
    "nubar": 3.0,
    "grid": {"r_max": 0.5, "points": 32, "spacing": "uniform", "r_min": None},
    "lmax": "auto",
    "seed": None,
    "tolerances": {"kernel": DEFAULT_TOL, "eps_clip": sampler.EPS_CLIP},
    "output": "chi2peaks_out",
    "kernel_cache": None,
    "modes": {"L": 8},
    "sample": {"count": 1, "direction": [0.0, 0.0, 1.0]},
    "validate": {"N": 20000},
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config

def _merge(base: dict, extra: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in (extra or {}).items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where!r} must be a section")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = val
    return out


def apply_override(raw: dict, assignment: str) -> None:
    """Apply ``a.b.c=value`` to a nested dict in place."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, _, text = assignment.partition("=")
    parts = key.strip().split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a scalar")
    try:
        node[parts[-1]] = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {assignment!r}: {exc}") from exc


@dataclass
class RunConfig:
    spectrum: dict
    n: int
    nu: float | None
    nubar: float | None
    grid: dict
    lmax: object
    seed: int | None
    tolerances: dict
    output: Path
    kernel_cache: Path | None
    modes: dict = field(default_factory=dict)
    sample: dict = field(default_factory=dict)
    validate: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    @classmethod
    def from_dict(cls, raw: dict, base_dir=".") -> "RunConfig":
        d = _merge(DEFAULTS, raw)
        if d["nu"] is not None and raw.get("nubar") is None:
            d["nubar"] = None
        try:
            cfg = cls(spectrum=d["spectrum"], n=int(d["n"]),
                      nu=None if d["nu"] is None else float(d["nu"]),
                      nubar=None if d["nubar"] is None else float(d["nubar"]),
                      grid=d["grid"], lmax=d["lmax"],
                      seed=None if d["seed"] is None else int(d["seed"]),
                      tolerances={k: float(v) for k, v in d["tolerances"].items()},
                      output=Path(d["output"]),
                      kernel_cache=None if d["kernel_cache"] is None else Path(d["kernel_cache"]),
                      modes=d["modes"], sample=d["sample"], validate=d["validate"],
                      base_dir=Path(base_dir))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad config value: {exc}") from exc
        cfg.validate_schema()
        return cfg

    def validate_schema(self):
        if self.n < 1:
            raise ConfigError("n must be a positive integer")
        if (self.nu is None) == (self.nubar is None):
            raise ConfigError("give exactly one of nu and nubar")
        if (self.nu if self.nu is not None else self.nubar) == 0:
            raise ZeroAmplitudeError()
        if self.spectrum["kind"] not in ("exponential", "monochromatic", "tabulated"):
            raise ConfigError(f"unknown spectrum kind {self.spectrum['kind']!r}")
        if self.grid["spacing"] not in ("uniform", "log"):
            raise ConfigError("grid.spacing must be 'uniform' or 'log'")
        if int(self.grid["points"]) < 2 or not float(self.grid["r_max"]) > 0:
            raise ConfigError("grid needs points >= 2 and r_max > 0")
        if self.lmax != "auto" and (not isinstance(self.lmax, int) or self.lmax < 2):
            raise ConfigError("lmax must be 'auto' or an integer >= 2")
        if self.seed is not None and not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must lie in [0, 2**64)")

    # builders -------------------------------------------------------------

    def build_spectrum(self) -> PowerSpectrum:
        s = self.spectrum
        kind = s["kind"]
        if kind == "monochromatic":
            if s["k0"] is None:
                raise ConfigError("monochromatic spectrum needs spectrum.k0")
            return PowerSpectrum.monochromatic(float(s["k0"]), float(s["sigma0sq"]))
        if kind == "tabulated":
            if not s["csv"]:
                raise ConfigError("tabulated spectrum needs spectrum.csv")
            path = Path(s["csv"])
            return PowerSpectrum.from_csv(path if path.is_absolute() else self.base_dir / path)
        if s["amplitude"] is not None:
            return PowerSpectrum.exponential(float(s["amplitude"]), float(s["power"]), float(s["ktilde"]))
        return PowerSpectrum.exponential_normalized(float(s["sigma0sq"]), float(s["power"]), float(s["ktilde"]))

    def build_grid(self) -> RadialGrid:
        g = self.grid
        r_max, pts = float(g["r_max"]), int(g["points"])
        if g["spacing"] == "log":
            return RadialGrid.log(r_max, pts, None if g["r_min"] is None else float(g["r_min"]))
        return RadialGrid.uniform(r_max, pts)

    def bias(self, spec: PowerSpectrum) -> BiasSpec:
        mo = spectral_moments(spec)
        if self.nu is not None:
            return BiasSpec(self.n, self.nu, mo)
        return BiasSpec.from_nubar(self.n, self.nubar, mo)

    def resolve_lmax(self, spec: PowerSpectrum) -> tuple[int, float | None]:
        if self.lmax == "auto":
            raw, suggested = sampler.lmax_rule(effective_kmax(spec, 0.95), float(self.grid["r_max"]))
            return suggested, raw
        return int(self.lmax), None


def load_config(path, overrides=()) -> RunConfig:
    raw = {}
    base = Path(".")
    if path is not None:
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a mapping")
        base = path.parent
    for item in overrides:
        apply_override(raw, item)
    return RunConfig.from_dict(raw, base)


# ---------------------------------------------------------------------------
# output

def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return format(float(x), ".17g")


def _json(x, level: int = 0) -> str:
    # deterministic JSON with floats at 17 significant digits; non-finite -> null
    pad, inner = " " * level, " " * (level + 1)
    if isinstance(x, dict):
        if not x:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {_json(x[k], level + 1)}" for k in sorted(x, key=str)]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(x, (list, tuple, np.ndarray)):
        if len(x) == 0:
            return "[]"
        return "[\n" + ",\n".join(inner + _json(v, level + 1) for v in x) + "\n" + pad + "]"
    if x is None:
        return "null"
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, str):
        return json.dumps(x)
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return format(x, ".17g") if math.isfinite(x) else "null"


def dumps_json(obj) -> str:
    return _json(obj) + "\n"


def write_atomic(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def csv_text(header, rows) -> str:
    lines = [",".join(header)]
    lines += [",".join(fmt(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands

def _kernels(cfg: RunConfig, spec, lmax: int) -> KernelSet:
    return cached_kernel_set(spec, cfg.build_grid(), max(2, lmax), cfg.kernel_cache,
                             cfg.tolerances["kernel"], workers=thread_count())


def cmd_moments(cfg: RunConfig, out=None) -> int:
    out = sys.stdout if out is None else out
    spec = cfg.build_spectrum()
    mo = spectral_moments(spec)
    out.write(f"sigma0sq={fmt(mo.sigma0sq)}\nsigma1sq={fmt(mo.sigma1sq)}\n"
              f"k_eff={fmt(effective_kmax(spec, 0.95))}\n")
    return EXIT_OK


def cmd_profile(cfg: RunConfig) -> int:
    spec = cfg.build_spectrum()
    bias = cfg.bias(spec)
    ks = _kernels(cfg, spec, 2)
    rep = chi2stats.profile_report(bias, ks)
    write_atomic(cfg.output / "profile.csv", csv_text(rep.COLUMNS, rep.rows()))
    write_atomic(cfg.output / "profile_scalars.json", dumps_json(rep.scalars))
    return EXIT_OK


def cmd_modes(cfg: RunConfig, L: int | None = None) -> int:
    spec = cfg.build_spectrum()
    bias = cfg.bias(spec)
    L = int(cfg.modes["L"] if L is None else L)
    ks = _kernels(cfg, spec, 2)
    rows = []
    ell = np.arange(L + 1)
    for r in ks.grid.radii:
        v = chi2stats.mode_variances(bias, ks, float(r), L)
        total = float(chi2stats.biased_variance(bias, ks, float(r)))
        frac = np.cumsum((2 * ell + 1) * v) / (4 * math.pi) / total if total > 0 else np.ones(L + 1)
        rows += [(float(r), int(l), float(v[l]), float(frac[l])) for l in ell]
    write_atomic(cfg.output / "modes.csv", csv_text(("r", "ell", "var", "recovered_fraction"), rows))
    return EXIT_OK


def cmd_diagnostics(cfg: RunConfig) -> int:
    spec = cfg.build_spectrum()
    bias = cfg.bias(spec)
    lmax, _ = cfg.resolve_lmax(spec)
    ks = _kernels(cfg, spec, lmax)
    stack = sampler.sigma_stack(ks, lmax)
    etr = sampler.truncation_correction(ks, bias, lmax)
    header = ["r"] + [f"Sigma_{l}" for l in range(lmax + 1)] + ["E_trunc"]
    rows = [[r, *stack[:, i], etr[i]] for i, r in enumerate(ks.grid.radii)]
    write_atomic(cfg.output / "sigma_stack.csv", csv_text(header, rows))
    return EXIT_OK


def _mode_laws(cfg: RunConfig):
    spec = cfg.build_spectrum()
    bias = cfg.bias(spec)
    lmax, raw = cfg.resolve_lmax(spec)
    ks = _kernels(cfg, spec, lmax)
    return sampler.build_mode_laws(bias, ks, lmax=lmax, eps_clip=cfg.tolerances["eps_clip"]), raw


def cmd_sample(cfg: RunConfig, count: int | None = None) -> int:
    if cfg.seed is None:
        raise ConfigError("sample needs a seed (--seed or seed: in the config)")
    count = int(cfg.sample["count"] if count is None else count)
    laws, raw = _mode_laws(cfg)
    direction = np.asarray(cfg.sample["direction"], dtype=float)
    for seed in range(cfg.seed, cfg.seed + count):
        s = sampler.draw_sample(laws, seed)
        doc = s.to_dict()
        doc["plan"]["lmax_raw"] = raw
        doc["direction"] = direction.tolist()
        write_atomic(cfg.output / f"sample_{seed}.json", dumps_json(doc))
        phi = sampler.assemble_phi(s, direction)
        phic = sampler.assemble_phi(s, direction, corrected=True)
        # the origin is pinned by the constraint: Phi(0) = nu^2, Phi_00(0) = sqrt(4 pi) nu^2
        nu2 = s.nu ** 2
        th, ph = (float(x) for x in angles_from_xyz(direction))
        write_atomic(cfg.output / f"phi_{seed}.csv",
                     csv_text(("r", "theta", "phi", "Phi", "Phi_corrected"),
                              [(0.0, th, ph, nu2, nu2), *((r, th, ph, a, b) for r, a, b in zip(s.radii, phi, phic))]))
        p00 = sampler.assemble_phi00(s)
        p00c = sampler.assemble_phi00(s, corrected=True)
        o00 = sampler.SQRT_4PI * nu2
        write_atomic(cfg.output / f"phi00_{seed}.csv",
                     csv_text(("r", "Phi00", "Phi00_corrected", "E_trunc"),
                              [(0.0, o00, o00, 0.0), *zip(s.radii, p00, p00c, s.plan.E_trunc)]))
    return EXIT_OK


def cmd_validate(cfg: RunConfig, N: int | None = None) -> int:
    N = int(cfg.validate["N"] if N is None else N)
    if N < mc_oracle.MIN_SAMPLES:
        log.warning("N=%d is underpowered (below %d); gate outcomes are not meaningful",
                    N, mc_oracle.MIN_SAMPLES)
    laws, _ = _mode_laws(cfg)
    report = mc_oracle.validation_suite(laws, N, 0 if cfg.seed is None else cfg.seed)
    write_atomic(cfg.output / "validation.json", dumps_json(report))
    for name, g in report["groups"].items():
        log.info("%s: %s (%d checks, max |z| %.2f)", name, "PASS" if g["pass"] else "FAIL",
                 g["count"], g["max_abs_z"])
        for c in g["checks"]:
            if not c["pass"]:
                log.info("  %s z=%s", c["name"], c["z"])
    return EXIT_OK if report["pass"] else EXIT_VALIDATION


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chi2peaks", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("-c", "--config", help="YAML config file")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. --set grid.points=64")
        sp.add_argument("-o", "--output", help="output directory")
        sp.add_argument("--kernel-cache", metavar="PATH", help="directory for cached kernel tables")
        return sp

    common(sub.add_parser("moments", help="print sigma_0^2, sigma_1^2 and k_eff"))
    common(sub.add_parser("profile", help="profile CSV and scalars JSON"))
    sp = common(sub.add_parser("modes", help="per-l variance table"))
    sp.add_argument("-L", type=int)
    common(sub.add_parser("diagnostics", help="Sigma_lmax(r) recovery stack"))
    sp = common(sub.add_parser("sample", help="draw biased field samples"))
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--count", type=int)
    sp = common(sub.add_parser("validate", help="run the Monte Carlo oracle suite"))
    sp.add_argument("--N", type=int)
    sp.add_argument("--seed", type=int)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "validate" else logging.WARNING,
                        format="%(levelname)s %(message)s")
    overrides = list(args.overrides)
    for flag, key in (("output", "output"), ("kernel_cache", "kernel_cache"), ("seed", "seed")):
        val = getattr(args, flag, None)
        if val is not None:
            overrides.append(f"{key}={json.dumps(val) if not isinstance(val, str) else val}")
    try:
        cfg = load_config(args.config, overrides)
        # BLAS pinned to one thread so results never depend on the machine's thread settings
        with threadpool_limits(limits=1):
            if args.command == "moments":
                return cmd_moments(cfg)
            if args.command == "profile":
                return cmd_profile(cfg)
            if args.command == "modes":
                return cmd_modes(cfg, args.L)
            if args.command == "diagnostics":
                return cmd_diagnostics(cfg)
            if args.command == "sample":
                return cmd_sample(cfg, args.count)
            return cmd_validate(cfg, args.N)
    except (ConfigError, SpectrumError, GridError, ZeroAmplitudeError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (NonIntegrableSpectrum, QuadratureError, SingularConstraintError, np.linalg.LinAlgError,
            chi2stats.MonotonicityError, ArithmeticError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
