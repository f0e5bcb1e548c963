#!/usr/bin/env python3
"""Run the Monte Carlo oracle suite and print a one-line verdict per group.

Extra arguments are passed through as config overrides, e.g.

    python3 scripts/run_validation.py --N 20000 grid.points=8 grid.r_max=0.48
"""
import argparse
import json
import sys
from pathlib import Path

from chi2peaks import cli


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--N", type=int, default=20000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("-o", "--output", type=Path, default=Path("validation_out"))
    ap.add_argument("overrides", nargs="*", metavar="KEY=VALUE")
    args = ap.parse_args()

    argv = ["validate", "--N", str(args.N), "--seed", str(args.seed), "-o", str(args.output)]
    for ov in args.overrides:
        argv += ["--set", ov]
    code = cli.main(argv)
    report_path = args.output / "validation.json"
    if report_path.exists():
        rep = json.loads(report_path.read_text())
        for name, g in rep["groups"].items():
            print(f"{name:<22} {'PASS' if g['pass'] else 'FAIL'}  "
                  f"{g['count']:>5} checks  pass fraction {g['pass_fraction']:.4f}  max|z| {g['max_abs_z']:.2f}")
        d = rep["diagonality"]
        print(f"{'off-diagonal Phi_lm':<22} {'PASS' if d['pass'] else 'FAIL'}  "
              f"L={d['L']}  pass fraction {d['offdiag_pass_fraction']:.4f}")
    sys.exit(code)


if __name__ == "__main__":
    main()
