"""Compare Tikhonov, isotropic, anisotropic and regional priors on the bundled synthetic benchmarks.

Prints one statistics panel per benchmark. By default alpha maximises the
correlation with the truth so that differences come from the prior alone.

Example: python3 scripts/method_ordering.py --seed 0 --out results/
"""

import argparse
from pathlib import Path

from wmprior.metrics import format_statistics, report_statistics, save_image, write_statistics_csv
from wmprior.pipelines import PIPELINES, SolveConfig, anisotropic_benchmark, regional_benchmark, run_regional_pipeline


def panel(name, bm, methods, cfg, out):
    columns = {}
    for method in methods:
        if method == "regional":
            rep = run_regional_pipeline(bm.data, bm.regions, bm.blur, cfg, truth=bm.truth)
        else:
            rep = PIPELINES[method](bm.data, bm.blur, cfg, truth=bm.truth)
        columns[method] = report_statistics(rep.estimate, bm.truth)
        if out:
            save_image(out / f"{name}_{method}.png", rep.estimate)
    columns["truth"] = report_statistics(bm.truth)
    print(f"\n{name} benchmark\n{format_statistics(columns)}", flush=True)
    if out:
        write_statistics_csv(out / f"{name}_statistics.csv", columns)
        save_image(out / f"{name}_truth.png", bm.truth.values)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--alpha", default="oracle", help="'oracle', 'auto' (GCV) or a number")
    ap.add_argument("--out", type=Path, default=None, help="directory for PNGs and statistics CSVs")
    args = ap.parse_args()
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
    cfg = SolveConfig(alpha=args.alpha)
    panel("regional", regional_benchmark(seed=args.seed), ["tikhonov", "isotropic", "anisotropic", "regional"],
          cfg, args.out)
    panel("anisotropic", anisotropic_benchmark(seed=args.seed), ["tikhonov", "isotropic", "anisotropic"],
          cfg, args.out)


if __name__ == "__main__":
    main()
