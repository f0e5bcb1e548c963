#!/usr/bin/env python3
"""Print the recovered-power stack Sigma_l(r) and the suggested truncation.

    python3 scripts/sigma_stack.py --ktilde 8 --r-max 2.5
"""
import argparse

import numpy as np

from chi2peaks.kernels import RadialGrid, build_kernel_set
from chi2peaks.sampler import lmax_rule, sigma_stack
from chi2peaks.spectrum import PowerSpectrum, effective_kmax


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ktilde", type=float, default=8.0)
    ap.add_argument("--r-max", type=float, default=2.5)
    ap.add_argument("--lmax", type=int, default=None, help="defaults to the rule's suggestion")
    ap.add_argument("--rows", type=int, default=10)
    args = ap.parse_args()

    spec = PowerSpectrum.exponential_normalized(1.0, 0.0, args.ktilde)
    keff = effective_kmax(spec, 0.95)
    raw, lmax = lmax_rule(keff, args.r_max)
    print(f"k_eff(0.95) = {keff:.6f}")
    print(f"rule with ktilde={args.ktilde:g}: raw = {lmax_rule(args.ktilde, args.r_max)[0]:.3f}")
    print(f"rule with k_eff:         raw = {raw:.3f}, suggested lmax = {lmax}")
    lmax = args.lmax or lmax

    # the grid must resolve pi / k_eff
    points = max(args.rows, int(np.ceil(args.r_max * keff / np.pi)) + 1)
    ks = build_kernel_set(spec, RadialGrid.uniform(args.r_max, points), lmax)
    stack = sigma_stack(ks, lmax)
    pick = np.unique(np.linspace(0, points - 1, args.rows).astype(int))
    ells = sorted({0, 1, 2, 4, lmax // 2, lmax})
    print("r        " + " ".join(f"S_{l:<7d}" for l in ells))
    for i in pick:
        print(f"{ks.grid.radii[i]:<8.4f} " + " ".join(f"{stack[l, i]:<9.6f}" for l in ells))


if __name__ == "__main__":
    main()
