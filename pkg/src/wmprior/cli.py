"""Command-line interface: validate-connection, fit, solve, sample.

Every parameter can come from an INI file (``--config``; one section per
subcommand) and be overridden on the command line. The fully resolved
parameters are written to ``<out>/config.ini``; wall-clock timings go to
``<out>/timings.json`` so that the JSON reports stay byte-reproducible.

Exit codes: 0 success, 1 validation failure, 2 usage or configuration
error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import configparser
import io
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

from . import metrics
from .grid import Field, Grid2D
from .linalg import CGNotConvergedError, NotPositiveDefiniteError
from .semivariogram import (SemivariogramError, empirical_semivariogram, estimate_anisotropy,
                            fit_matern_semivariogram, write_semivariogram_csv)
from .solver import BlurKernel

EXIT_OK, EXIT_VALIDATION, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- parameters


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _floats(v) -> tuple:
    if isinstance(v, (tuple, list)):
        return tuple(float(x) for x in v)
    return tuple(float(x) for x in str(v).split(",") if x.strip())


def _opt_float(v):
    if v is None or str(v).strip().lower() in ("", "none", "auto"):
        return None
    return float(v)


def _opt_str(v):
    if v is None or str(v).strip().lower() in ("", "none"):
        return None
    return str(v)


@dataclass(frozen=True)
class Param:
    name: str
    kind: Callable[[Any], Any]
    default: Any
    help: str
    choices: Optional[tuple] = None
    flag: bool = False  # boolean switch on the command line


SOLVER_PARAMS = [
    Param("alpha", str, "auto", "regularization: a positive number, 'auto' (GCV) or 'oracle' (needs truth)"),
    Param("alpha_min", float, 1e-8, "smallest alpha on the search grid"),
    Param("alpha_max", float, 1e2, "largest alpha on the search grid"),
    Param("alpha_points", int, 21, "number of log-spaced alpha grid points"),
    Param("gcv_trace", str, "auto", "GCV trace evaluation", ("auto", "exact", "data-space", "stochastic")),
    Param("n_probes", int, 20, "Rademacher probes for the stochastic trace"),
    Param("cg_tol", float, 1e-8, "relative residual tolerance of the MAP solve"),
    Param("max_outer", int, 10, "cap on outer (hyperparameter) iterations"),
    Param("nu_candidates", _floats, (1.0, 2.0, 3.0), "comma-separated smoothness candidates"),
    Param("max_lag", float, math.sqrt(2.0) / 10.0, "largest semivariogram lag"),
    Param("n_bins", int, 25, "semivariogram lag bins"),
    Param("boundary", str, "periodic", "boundary condition of the prior", ("periodic", "dirichlet")),
    Param("extension", _opt_float, None, "extension factor a (default: from the fitted range)"),
    Param("psi_step", float, 15.0, "direction step in degrees"),
    Param("gamma_crit_fraction", float, 0.75, "gamma_crit position between nugget and sill"),
    Param("directional_max_lag", float, 0.2, "largest lag of directional semivariograms"),
    Param("anisotropy_threshold", float, 1.3, "tau above which a field is treated as anisotropic"),
]

COMMANDS: dict[str, list[Param]] = {
    "validate-connection": [
        Param("nu", float, 1.0, "Matérn smoothness"),
        Param("ell", float, 0.25, "Matérn range parameter"),
        Param("boundary", str, "dirichlet", "boundary condition", ("periodic", "dirichlet")),
        Param("a", _opt_float, 1.5, "extension factor ('auto' sizes it from nu, ell)"),
        Param("n", int, 50, "grid points per side of the unit square"),
        Param("samples", int, 50_000, "number of prior draws"),
        Param("seed", int, 0, "random seed"),
        Param("threshold", float, 0.05, "pass if the relative Frobenius error is below this"),
    ],
    "fit": [
        Param("input", _opt_str, None, "input PNG or CSV field"),
        Param("mask", _opt_str, None, "observation mask (PNG/CSV, nonzero = observed)"),
        Param("nu_candidates", _floats, (1.0, 2.0, 3.0), "comma-separated smoothness candidates"),
        Param("max_lag", float, math.sqrt(2.0) / 10.0, "largest lag"),
        Param("n_bins", int, 25, "number of lag bins"),
        Param("directional", _bool, False, "also compute directional semivariograms and anisotropy", flag=True),
        Param("psi_step", float, 15.0, "direction step in degrees"),
        Param("gamma_crit_fraction", float, 0.75, "gamma_crit position between nugget and sill"),
        Param("directional_max_lag", float, 0.2, "largest lag of directional semivariograms"),
    ],
    "solve": [
        Param("input", _opt_str, None, "input PNG or CSV image (omit with --benchmark)"),
        Param("benchmark", _opt_str, None, "bundled synthetic benchmark instead of an input file",
              ("isotropic", "anisotropic", "regional")),
        Param("seed", int, 0, "seed for benchmarks and stochastic traces"),
        Param("prior", str, "isotropic", "prior model", ("isotropic", "anisotropic", "regional", "tikhonov")),
        Param("mask", _opt_str, None, "observation mask (PNG/CSV, nonzero = observed)"),
        Param("truth", _opt_str, None, "ground-truth image enabling metrics and oracle alpha"),
        Param("regions", _opt_str, None, "region label image (PNG/CSV) for --prior regional"),
        Param("blur_std", float, 1.5, "Gaussian blur std in pixels (0 disables blur)"),
        Param("blur_size", int, 9, "blur support in pixels (odd)"),
    ] + SOLVER_PARAMS,
    "sample": [
        Param("prior", str, "isotropic", "prior model", ("isotropic", "anisotropic")),
        Param("nu", float, 1.0, "Matérn smoothness"),
        Param("ell", float, 0.1, "range (isotropic) or major range ell1 (anisotropic)"),
        Param("theta", float, 0.0, "direction of maximal correlation in degrees (anisotropic)"),
        Param("tau", float, 1.0, "range ratio ell1/ell2 (anisotropic)"),
        Param("n", int, 64, "grid points per side"),
        Param("a", _opt_float, None, "extension factor ('auto' sizes it from nu, ell)"),
        Param("boundary", str, "periodic", "boundary condition", ("periodic", "dirichlet")),
        Param("count", int, 4, "number of samples"),
        Param("seed", int, 0, "random seed"),
        Param("extended", _bool, False, "write the extended domain instead of the unit square", flag=True),
    ],
}


@dataclass
class RunConfig:
    """Resolved parameters of one subcommand run."""

    command: str
    params: dict = field(default_factory=dict)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp[self.command] = {k: _format_value(v) for k, v in sorted(self.params.items())}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def resolve(cls, command: str, cli: dict, config_path: Optional[str] = None) -> "RunConfig":
        """Defaults, then the INI section named after ``command``, then explicit CLI values."""
        specs = {p.name: p for p in COMMANDS[command]}
        values = {name: p.default for name, p in specs.items()}
        if config_path:
            cp = configparser.ConfigParser()
            if not cp.read(config_path):
                raise UsageError(f"cannot read config file {config_path}")
            if cp.has_section(command):
                for key, raw in cp[command].items():
                    key = key.replace("-", "_")
                    if key not in specs:
                        raise UsageError(f"unknown key {key!r} in section [{command}]")
                    values[key] = raw
        for key, v in cli.items():
            if v is not None and key in specs:
                values[key] = v
        out = {}
        for key, p in specs.items():
            try:
                val = p.kind(values[key]) if values[key] is not None else None
            except (TypeError, ValueError) as exc:
                raise UsageError(f"bad value for {key}: {values[key]!r} ({exc})")
            if p.choices and val is not None and val not in p.choices:
                raise UsageError(f"{key} must be one of {', '.join(p.choices)}; got {val!r}")
            out[key] = val
        return cls(command, out)


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# --------------------------------------------------------------------------- helpers


def _dump_json(path: Path, payload) -> None:
    from .pipelines import _plain

    path.write_text(json.dumps(_plain(payload), sort_keys=True, indent=2, ensure_ascii=False) + "\n",
                    encoding="utf-8")


def _heatmap(path: Path, values: np.ndarray, lo: float = -1.0, hi: float = 1.0) -> None:
    metrics.save_image(path, (np.asarray(values, dtype=float) - lo) / (hi - lo))


def _read_input(path: str, mask_path: Optional[str]) -> list[Field]:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"input file {path} does not exist")
    fields = metrics.load_field(p)
    if mask_path:
        mp = Path(mask_path)
        if not mp.exists():
            raise UsageError(f"mask file {mask_path} does not exist")
        mask = metrics.load_mask(mp)
        if mask.shape != fields[0].shape:
            raise UsageError("mask and input differ in size")
        fields = [Field(np.where(mask, f.values, 0.0), mask & f.mask, band=f.band) for f in fields]
    for f in fields:
        if f.shape[0] != f.shape[1]:
            raise UsageError(f"input must be square, got {f.shape}")
    return fields


# --------------------------------------------------------------------------- commands


def cmd_validate_connection(cfg: RunConfig, out: Path, timings: dict) -> int:
    """Compare empirical prior correlations with the Matérn correlation."""
    from .spde import PrecisionSpec, extension_factor, validate_connection

    p = cfg.params
    a = p["a"] if p["a"] is not None else extension_factor(p["nu"], p["ell"], p["boundary"])
    spec = PrecisionSpec.isotropic(p["nu"], p["ell"], Grid2D(p["n"], a), p["boundary"])
    t0 = time.perf_counter()
    err, ref, emp = validate_connection(spec, p["samples"], p["seed"], return_maps=True)
    timings["validate_connection_s"] = time.perf_counter() - t0
    passed = err < p["threshold"]
    _heatmap(out / "correlation_matern.png", ref)
    _heatmap(out / "correlation_empirical.png", emp)
    n = p["n"]
    centre = (n // 2) * n + n // 2
    np.savetxt(out / "centre_matern.csv", ref[centre].reshape(n, n), delimiter=",", fmt="%.10g")
    np.savetxt(out / "centre_empirical.csv", emp[centre].reshape(n, n), delimiter=",", fmt="%.10g")
    _dump_json(out / "report.json", {"relative_frobenius_error": err, "threshold": p["threshold"],
                                     "passed": passed, "a": a, "extended_n": spec.grid.extended_n,
                                     "parameters": p})
    print(f"relative Frobenius error {err:.4f} ({'pass' if passed else 'fail'}, threshold {p['threshold']})")
    return EXIT_OK if passed else EXIT_VALIDATION


def cmd_fit(cfg: RunConfig, out: Path, timings: dict) -> int:
    """Fit Matérn semivariograms (and optionally anisotropy) to an image or field."""
    p = cfg.params
    if p["input"] is None:
        raise UsageError("fit needs an input file")
    fields = _read_input(p["input"], p["mask"])
    results, series = [], []
    t0 = time.perf_counter()
    for f in fields:
        emp = empirical_semivariogram(f, p["max_lag"], p["n_bins"])
        fit = fit_matern_semivariogram(emp, p["nu_candidates"])
        series.append(emp)
        entry = {"band": f.band, "fit": fit.as_dict()}
        if p["directional"]:
            est, prof = estimate_anisotropy(f, math.radians(p["psi_step"]), p["gamma_crit_fraction"],
                                            p["directional_max_lag"], p["n_bins"], p["nu_candidates"],
                                            return_profile=True)
            write_semivariogram_csv(out / f"directional_{f.band or 'field'}.csv", prof.semivariograms)
            entry["anisotropy"] = {"theta_degrees": est.theta_degrees, "tau": est.tau,
                                   "range_major": est.ell1, "range_minor": est.ell2,
                                   "gamma_crit": prof.gamma_crit,
                                   "ranges": {f"{math.degrees(a):g}": r
                                              for a, r in zip(prof.psi, prof.range_at_crit)}}
        results.append(entry)
    timings["fit_s"] = time.perf_counter() - t0
    write_semivariogram_csv(out / "semivariogram.csv", series)
    _dump_json(out / "fit.json", {"bands": results, "parameters": p})
    for r in results:
        f = r["fit"]
        print(f"{r['band'] or 'field'}: nu={f['nu']:g} ell={f['ell']:.4g} nugget={f['nugget']:.4g} "
              f"sill={f['sill']:.4g}")
    return EXIT_OK


def cmd_solve(cfg: RunConfig, out: Path, timings: dict) -> int:
    """Reconstruct an image with a Whittle-Matérn or Tikhonov prior."""
    from . import pipelines as pl

    p = cfg.params
    blur = BlurKernel(p["blur_std"], p["blur_size"]) if p["blur_std"] > 0 else None
    regions = None
    if p["benchmark"] is not None:
        maker = {"isotropic": pl.isotropic_benchmark, "anisotropic": pl.anisotropic_benchmark,
                 "regional": pl.regional_benchmark}[p["benchmark"]]
        bm = maker(seed=p["seed"])
        bands, truths, blur, regions = [bm.data], [bm.truth], bm.blur, bm.regions
        metrics.save_image(out / "data.png", np.where(bm.data.mask, bm.data.values, 0.0))
        metrics.save_image(out / "truth.png", bm.truth.values)
    else:
        if p["input"] is None:
            raise UsageError("solve needs an input file or --benchmark")
        bands = _read_input(p["input"], p["mask"])
        truths = [None] * len(bands)
        if p["truth"]:
            truths = _read_input(p["truth"], None)
            if len(truths) != len(bands) or truths[0].shape != bands[0].shape:
                raise UsageError("truth image does not match the input bands")
    if p["prior"] == "regional":
        if p["regions"] is not None:
            regions = metrics.load_labels(p["regions"])
        if regions is None:
            raise UsageError("--prior regional needs --regions")
    if p["alpha"] == "oracle" and truths[0] is None:
        raise UsageError("--alpha oracle needs --truth")
    config = pl.SolveConfig(
        alpha=p["alpha"], alpha_min=p["alpha_min"], alpha_max=p["alpha_max"], alpha_points=p["alpha_points"],
        gcv_trace=p["gcv_trace"], n_probes=p["n_probes"], cg_tol=p["cg_tol"], max_outer=p["max_outer"],
        nu_candidates=p["nu_candidates"], max_lag=p["max_lag"], n_bins=p["n_bins"], boundary=p["boundary"],
        extension=p["extension"], psi_step_degrees=p["psi_step"], gamma_crit_fraction=p["gamma_crit_fraction"],
        directional_max_lag=p["directional_max_lag"], anisotropy_threshold=p["anisotropy_threshold"],
        seed=p["seed"])
    reports, stats = [], {}
    for i, (b, t) in enumerate(zip(bands, truths)):
        t0 = time.perf_counter()
        if p["prior"] == "regional":
            rep = pl.run_regional_pipeline(b, regions, blur, config, truth=t)
        else:
            rep = pl.PIPELINES[p["prior"]](b, blur, config, truth=t)
        timings[f"band_{i}_{b.band or 'field'}_s"] = time.perf_counter() - t0
        reports.append(rep)
        name = b.band or "field"
        np.savetxt(out / f"estimate_{name}.csv", rep.estimate, delimiter=",", fmt="%.10g")
        if rep.metrics is not None:
            stats[name] = metrics.report_statistics(rep.estimate, t)
    if len(reports) == 3:
        metrics.save_image(out / "estimate.png", [r.estimate for r in reports])
    else:
        metrics.save_image(out / "estimate.png", reports[0].estimate)
    _dump_json(out / "report.json", {"prior": p["prior"], "bands": [r.as_dict() for r in reports]})
    if stats:
        metrics.write_statistics_csv(out / "statistics.csv", stats)
        metrics.write_statistics_json(out / "statistics.json", stats)
        print(metrics.format_statistics(stats))
    for r in reports:
        print(f"{r.band or 'field'}: prior={r.prior} alpha={r.alpha:.4g} iterations={r.iterations} "
              f"converged={r.converged}")
    return EXIT_OK


def cmd_sample(cfg: RunConfig, out: Path, timings: dict) -> int:
    """Draw prior realisations."""
    from .spde import PrecisionSpec, image_extension_factor, sample_prior

    p = cfg.params
    a = p["a"] if p["a"] is not None else image_extension_factor(p["nu"], p["ell"], p["boundary"])
    grid = Grid2D(p["n"], a)
    if p["prior"] == "isotropic":
        spec = PrecisionSpec.isotropic(p["nu"], p["ell"], grid, p["boundary"])
    else:
        spec = PrecisionSpec.anisotropic(p["nu"], math.radians(p["theta"]), p["ell"], p["ell"] / p["tau"],
                                         grid, p["boundary"])
    t0 = time.perf_counter()
    xs = sample_prior(spec, p["count"], p["seed"])
    timings["sample_s"] = time.perf_counter() - t0
    for i, x in enumerate(xs):
        img = x if p["extended"] else grid.restrict(x)
        np.savetxt(out / f"sample_{i:03d}.csv", img, delimiter=",", fmt="%.17g")
        lo, hi = float(img.min()), float(img.max())
        metrics.save_image(out / f"sample_{i:03d}.png", (img - lo) / (hi - lo) if hi > lo else img * 0)
    _dump_json(out / "report.json", {"prior": spec.as_dict(), "count": p["count"], "seed": p["seed"]})
    print(f"wrote {p['count']} samples on a {img.shape[0]}x{img.shape[1]} grid")
    return EXIT_OK


HANDLERS = {"validate-connection": cmd_validate_connection, "fit": cmd_fit, "solve": cmd_solve,
            "sample": cmd_sample}


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wmprior", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, params in COMMANDS.items():
        sp = sub.add_parser(name, help=HANDLERS[name].__doc__)
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--config", help="INI file; section [%s] supplies defaults" % name)
        for prm in params:
            if prm.name == "input":
                sp.add_argument("input", nargs="?", default=None, help=prm.help)
                continue
            opt = "--" + prm.name.replace("_", "-")
            if prm.flag:
                sp.add_argument(opt, dest=prm.name, action="store_const", const=True, default=None,
                                help=prm.help)
            else:
                sp.add_argument(opt, dest=prm.name, default=None, choices=prm.choices,
                                help=f"{prm.help} (default: {_format_value(prm.default)})")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        cfg = RunConfig.resolve(args.command, vars(args), args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(cfg.to_ini(), encoding="utf-8")
        timings: dict = {}
        code = HANDLERS[args.command](cfg, out, timings)
        _dump_json(out / "timings.json", timings)
        return code
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CGNotConvergedError, NotPositiveDefiniteError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except SemivariogramError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
