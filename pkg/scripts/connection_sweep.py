"""Relative Frobenius error between sampled and Matérn correlation as the domain extension grows.

Example: python3 scripts/connection_sweep.py --n 32 --ell 0.25 --samples 20000
"""

import argparse

from wmprior.grid import Grid2D
from wmprior.spde import PrecisionSpec, extension_factor, validate_connection


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=32)
    ap.add_argument("--nu", type=float, default=1.0)
    ap.add_argument("--ell", type=float, default=0.25)
    ap.add_argument("--boundary", choices=["periodic", "dirichlet"], default="periodic")
    ap.add_argument("--samples", type=int, default=20000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--extensions", type=float, nargs="+", default=[1.0, 1.2, 1.4, 1.6, 1.8])
    args = ap.parse_args()
    print(f"suggested extension a = {extension_factor(args.nu, args.ell, args.boundary):.3f}")
    print(f"{'a':>6} {'error':>8}")
    for a in args.extensions:
        spec = PrecisionSpec.isotropic(args.nu, args.ell, Grid2D(args.n, a), args.boundary)
        print(f"{a:6.2f} {validate_connection(spec, args.samples, args.seed):8.4f}", flush=True)


if __name__ == "__main__":
    main()
