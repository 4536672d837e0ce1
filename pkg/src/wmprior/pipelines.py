"""Iterative hyperparameter/MAP drivers and synthetic benchmarks.

Each outer iteration builds a prior from the current hyperparameters,
selects alpha, computes the MAP estimate, and re-estimates the
hyperparameters from that estimate. The loop stops once the smoothness
(and direction) repeat and the ranges change by less than ``ell_rtol``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .grid import Field, Grid2D
from .matern import AnisotropyEstimate, MaternFit, wrap_angle
from .metrics import report_statistics
from .regional import RegionPartition, build_regional_operator
from .semivariogram import (DEFAULT_MAX_LAG, DEFAULT_N_BINS, empirical_semivariogram,
                            estimate_anisotropy, fit_matern_semivariogram, isotropy_transform)
from .solver import BlurKernel, ForwardModel, gcv_alpha, map_estimate, oracle_alpha
from .spde import PrecisionSpec, PriorOperator, image_extension_factor, sample_prior

log = logging.getLogger(__name__)


@dataclass
class SolveConfig:
    """Knobs shared by all pipelines.

    ``alpha`` is a positive number, "auto" (GCV) or "oracle" (maximise the
    correlation with a supplied truth).
    """

    alpha: Union[float, str] = "auto"
    alpha_min: float = 1e-8
    alpha_max: float = 1e2
    alpha_points: int = 21
    refine_alpha: bool = True
    gcv_trace: str = "auto"
    n_probes: int = 20
    cg_tol: float = 1e-8
    cg_maxiter: int = 20000
    selection_tol: float = 1e-6
    max_outer: int = 10
    ell_rtol: float = 0.01
    nu_candidates: tuple = (1.0, 2.0, 3.0)
    max_lag: float = DEFAULT_MAX_LAG
    n_bins: int = DEFAULT_N_BINS
    boundary: str = "periodic"
    extension: Optional[float] = None
    psi_step_degrees: float = 15.0
    gamma_crit_fraction: float = 0.75
    directional_max_lag: float = 0.2
    loess_span: float = 0.5
    anisotropy_threshold: float = 1.3
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.alpha, str):
            if self.alpha not in ("auto", "oracle"):
                try:
                    self.alpha = float(self.alpha)
                except ValueError:
                    raise ValueError(f"alpha must be a number, 'auto' or 'oracle', got {self.alpha!r}")
        if not isinstance(self.alpha, str) and not self.alpha > 0:
            raise ValueError("fixed alpha must be positive")
        if not 0 < self.cg_tol < 1:
            raise ValueError("cg_tol must lie in (0, 1)")
        if self.max_outer < 1:
            raise ValueError("max_outer must be at least 1")
        self.nu_candidates = tuple(float(v) for v in self.nu_candidates)

    def alpha_grid(self) -> np.ndarray:
        return np.logspace(math.log10(self.alpha_min), math.log10(self.alpha_max), self.alpha_points)

    @property
    def psi_step(self) -> float:
        return math.radians(self.psi_step_degrees)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class SolveReport:
    """Outcome of a pipeline run; ``estimate`` is the original-domain MAP image."""

    prior: str
    estimate: np.ndarray
    alpha: float
    history: list
    cg_iterations: list
    converged: bool
    band: str = ""
    alpha_selection: Optional[dict] = None
    metrics: Optional[dict] = None
    config: Optional[dict] = None
    extra: dict = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        """Number of MAP solves performed."""
        return len(self.cg_iterations)

    def as_dict(self, include_estimate: bool = False) -> dict:
        out = {
            "prior": self.prior, "band": self.band, "alpha": self.alpha,
            "iterations": self.iterations, "converged": self.converged,
            "history": self.history, "cg_iterations": self.cg_iterations,
            "alpha_selection": self.alpha_selection, "metrics": self.metrics,
            "config": self.config, "extra": self.extra,
        }
        if include_estimate:
            out["estimate"] = self.estimate.tolist()
        return out

    def to_json(self, include_estimate: bool = False) -> str:
        """Deterministic JSON (sorted keys, no timings)."""
        return json.dumps(_plain(self.as_dict(include_estimate)), sort_keys=True, indent=2)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


# --------------------------------------------------------------------------- shared steps


def _grid_for(n: int, nu: float, ell: float, config: SolveConfig) -> Grid2D:
    a = config.extension if config.extension is not None else image_extension_factor(nu, ell, config.boundary)
    return Grid2D(n, float(a))


def _choose_alpha(model: ForwardModel, prior, data: np.ndarray, config: SolveConfig,
                  truth: Optional[np.ndarray]):
    if not isinstance(config.alpha, str):
        return float(config.alpha), {"mode": "fixed", "alpha": float(config.alpha)}
    grid = config.alpha_grid()
    if config.alpha == "oracle":
        if truth is None:
            raise ValueError("alpha='oracle' needs a truth image")
        sel = oracle_alpha(model, prior, data, truth, grid, config.refine_alpha, config.selection_tol)
    else:
        sel = gcv_alpha(model, prior, data, grid, config.gcv_trace, config.n_probes, config.seed,
                        config.refine_alpha, config.selection_tol)
    return sel.alpha, sel.as_dict()


def _solve(field_b: Field, prior, grid: Grid2D, blur: Optional[BlurKernel], config: SolveConfig,
           truth: Optional[np.ndarray], x0: Optional[np.ndarray] = None):
    model = ForwardModel(grid, field_b.mask, blur)
    data = model.data_from_image(field_b.values)
    alpha, sel = _choose_alpha(model, prior, data, config, truth)
    res = map_estimate(model, prior, data, alpha, tol=config.cg_tol, maxiter=config.cg_maxiter, x0=x0)
    return grid.restrict(res.x).copy(), alpha, sel, res


def _fit(field_x: Field, config: SolveConfig, transform=None) -> MaternFit:
    emp = empirical_semivariogram(field_x, config.max_lag, config.n_bins, transform)
    return fit_matern_semivariogram(emp, config.nu_candidates)


def _finish(prior: str, field_b: Field, estimate, alpha, sel, history, cg, converged, config,
            truth, extra=None) -> SolveReport:
    metrics = report_statistics(estimate, truth).as_dict() if truth is not None else None
    return SolveReport(prior, estimate, float(alpha), history, cg, converged, field_b.band, sel,
                       metrics, config.as_dict(), extra or {})


def _truth_array(truth) -> Optional[np.ndarray]:
    if truth is None:
        return None
    return np.asarray(truth.values if isinstance(truth, Field) else truth, dtype=float)


# --------------------------------------------------------------------------- isotropic pipeline


def run_isotropic_pipeline(b: Field, blur: Optional[BlurKernel] = None, config: Optional[SolveConfig] = None,
                           truth=None) -> SolveReport:
    """Alternate Matérn semivariogram fits and isotropic Whittle-Matérn MAP estimates."""
    config = config or SolveConfig()
    truth = _truth_array(truth)
    n = b.shape[0]
    fit = _fit(b, config)
    history = [{"iteration": 0, "source": "data", "nu": fit.nu, "ell": fit.ell,
                "nugget": fit.nugget, "sill": fit.sill}]
    nu, ell = fit.nu, fit.ell
    cg, converged = [], False
    for j in range(1, config.max_outer + 1):
        grid = _grid_for(n, nu, ell, config)
        prior = PriorOperator(PrecisionSpec.isotropic(nu, ell, grid, config.boundary))
        estimate, alpha, sel, res = _solve(b, prior, grid, blur, config, truth)
        cg.append(res.iterations)
        fit = _fit(Field(estimate), config)
        history.append({"iteration": j, "source": "map", "nu": fit.nu, "ell": fit.ell,
                        "nugget": fit.nugget, "sill": fit.sill, "alpha": alpha, "a": grid.a,
                        "prior_nu": nu, "prior_ell": ell})
        if fit.nu == nu and abs(fit.ell - ell) / ell < config.ell_rtol:
            converged = True
            break
        nu, ell = fit.nu, fit.ell
    if not converged:
        log.warning("isotropic pipeline did not converge in %d iterations", config.max_outer)
    return _finish("isotropic", b, estimate, alpha, sel, history, cg, converged, config, truth,
                   {"nu": nu, "ell": ell})


# --------------------------------------------------------------------------- anisotropic pipeline


@dataclass(frozen=True)
class AnisotropicParameters:
    nu: float
    theta: float
    ell1: float
    ell2: float
    tau_raw: float
    anisotropic: bool

    @property
    def tau(self) -> float:
        return self.ell1 / self.ell2

    def spec(self, grid: Grid2D, boundary: str) -> PrecisionSpec:
        if not self.anisotropic:
            return PrecisionSpec.isotropic(self.nu, self.ell1, grid, boundary)
        return PrecisionSpec.anisotropic(self.nu, self.theta, self.ell1, self.ell2, grid, boundary)

    def record(self) -> dict:
        return {"nu": self.nu, "theta_degrees": math.degrees(self.theta), "tau": self.tau,
                "tau_estimate": self.tau_raw, "ell1": self.ell1, "ell2": self.ell2,
                "anisotropic": self.anisotropic}


def estimate_anisotropic_parameters(f: Field, config: SolveConfig) -> AnisotropicParameters:
    """Directional ranges give (theta, tau); an omnidirectional fit in isotropised lags gives (nu, ell1)."""
    est = estimate_anisotropy(f, config.psi_step, config.gamma_crit_fraction, config.directional_max_lag,
                              config.n_bins, config.nu_candidates, config.loess_span)
    theta = wrap_angle(est.theta)
    if est.tau <= config.anisotropy_threshold:
        fit = _fit(f, config)
        return AnisotropicParameters(fit.nu, 0.0, fit.ell, fit.ell, est.tau, False)
    iso = AnisotropyEstimate(theta=theta, tau=est.tau, ell1=est.tau, ell2=1.0)
    fit = _fit(f, config, isotropy_transform(iso))
    return AnisotropicParameters(fit.nu, theta, fit.ell, fit.ell / est.tau, est.tau, True)


def _same_parameters(new: AnisotropicParameters, old: AnisotropicParameters, rtol: float) -> bool:
    return (new.anisotropic == old.anisotropic
            and abs(wrap_angle(new.theta - old.theta)) < 1e-9
            and new.nu == old.nu
            and abs(new.ell1 - old.ell1) / old.ell1 < rtol
            and abs(new.ell2 - old.ell2) / old.ell2 < rtol)


def run_anisotropic_pipeline(b: Field, blur: Optional[BlurKernel] = None, config: Optional[SolveConfig] = None,
                             truth=None) -> SolveReport:
    """Alternate directional-semivariogram anisotropy estimates and anisotropic MAP estimates."""
    config = config or SolveConfig()
    truth = _truth_array(truth)
    n = b.shape[0]
    par = estimate_anisotropic_parameters(b, config)
    history = [dict(iteration=0, source="data", **par.record())]
    cg, converged = [], False
    for j in range(1, config.max_outer + 1):
        grid = _grid_for(n, par.nu, par.ell1, config)
        prior = PriorOperator(par.spec(grid, config.boundary))
        estimate, alpha, sel, res = _solve(b, prior, grid, blur, config, truth)
        cg.append(res.iterations)
        new = estimate_anisotropic_parameters(Field(estimate), config)
        history.append(dict(iteration=j, source="map", alpha=alpha, a=grid.a, **new.record()))
        if _same_parameters(new, par, config.ell_rtol):
            converged = True
            break
        par = new
    if not converged:
        log.warning("anisotropic pipeline did not converge in %d iterations", config.max_outer)
    return _finish("anisotropic", b, estimate, alpha, sel, history, cg, converged, config, truth,
                   par.record())


# --------------------------------------------------------------------------- regional


class _RegionalPrior:
    """Adapter giving a RegionalOperator the prior interface used by the solver."""

    spectral = False

    def __init__(self, op):
        self.op = op

    def matvec(self, x):
        return self.op.matvec(x)

    @property
    def has_inverse(self):
        return self.op.has_inverse

    def solve(self, x):
        return self.op.solve(x)

    def diagonal(self):
        return self.op.diagonal()

    def dense(self):
        return self.op.dense()


def run_regional_pipeline(b: Field, region_labels: np.ndarray, blur: Optional[BlurKernel] = None,
                          config: Optional[SolveConfig] = None, truth=None) -> SolveReport:
    """Per-region anisotropy estimation combined through the regional precision operator."""
    config = config or SolveConfig()
    truth = _truth_array(truth)
    partition = RegionPartition(region_labels)
    if partition.n != b.shape[0]:
        raise ValueError("region labels and field differ in size")
    n = b.shape[0]
    masks = partition.masks()
    pars = [estimate_anisotropic_parameters(b.restricted_to(m), config) for m in masks]
    history = [{"iteration": 0, "source": "data", "regions": [p.record() for p in pars]}]
    cg, converged = [], False
    x0 = None
    for j in range(1, config.max_outer + 1):
        if config.extension is not None:
            a = config.extension
        else:
            a = max(image_extension_factor(p.nu, p.ell1, config.boundary) for p in pars)
        grid = Grid2D(n, float(a))
        op = build_regional_operator(partition, [p.spec(grid, config.boundary) for p in pars])
        estimate, alpha, sel, res = _solve(b, _RegionalPrior(op), grid, blur, config, truth)
        cg.append(res.iterations)
        new = [estimate_anisotropic_parameters(Field(estimate).restricted_to(m), config) for m in masks]
        history.append({"iteration": j, "source": "map", "alpha": alpha, "a": grid.a,
                        "regions": [p.record() for p in new]})
        if all(_same_parameters(q, p, config.ell_rtol) for q, p in zip(new, pars)):
            converged = True
            break
        pars = new
    if not converged:
        log.warning("regional pipeline did not converge in %d iterations", config.max_outer)
    return _finish("regional", b, estimate, alpha, sel, history, cg, converged, config, truth,
                   {"regions": [p.record() for p in pars]})


# --------------------------------------------------------------------------- Tikhonov


def run_tikhonov(b: Field, blur: Optional[BlurKernel] = None, config: Optional[SolveConfig] = None,
                 truth=None) -> SolveReport:
    """Baseline with P = I on the standard extended domain."""
    config = config or SolveConfig()
    truth = _truth_array(truth)
    a = config.extension if config.extension is not None else 1.5
    grid = Grid2D(b.shape[0], float(a))
    prior = PriorOperator(PrecisionSpec.identity(grid, "periodic"))
    estimate, alpha, sel, res = _solve(b, prior, grid, blur, config, truth)
    history = [{"iteration": 1, "source": "map", "alpha": alpha, "a": grid.a}]
    return _finish("tikhonov", b, estimate, alpha, sel, history, [res.iterations], True, config, truth)


PIPELINES = {
    "isotropic": run_isotropic_pipeline,
    "anisotropic": run_anisotropic_pipeline,
    "tikhonov": run_tikhonov,
}


# --------------------------------------------------------------------------- benchmarks


def make_synthetic_benchmark(image, blur: Optional[BlurKernel], mask_fraction: float, noise_level: float,
                             seed: int = 0, grid: Optional[Grid2D] = None):
    """Blur, restrict, mask and perturb a truth image; returns (data Field, truth Field).

    ``image`` is either an original-domain array/Field, which is extended by
    reflection onto ``grid`` (default a = 1.5), or an extended-domain array
    matching ``grid``. Exactly round((1 - mask_fraction) N) pixels stay observed.
    """
    if not 0 <= mask_fraction < 1:
        raise ValueError("mask_fraction must lie in [0, 1)")
    if noise_level < 0:
        raise ValueError("noise_level must be non-negative")
    vals = np.asarray(image.values if isinstance(image, Field) else image, dtype=float)
    band = image.band if isinstance(image, Field) else ""
    if grid is None:
        grid = Grid2D(vals.shape[0], 1.5)
    m = grid.extended_n
    if vals.shape == (m, m):
        ext = vals
    elif vals.shape == (grid.n, grid.n):
        pad = grid.offset
        ext = np.pad(vals, ((pad, m - grid.n - pad),) * 2, mode="reflect" if pad < grid.n else "wrap")
    else:
        raise ValueError("image matches neither the original nor the extended grid")
    truth = grid.restrict(ext).copy()
    model = ForwardModel(grid, None, blur)
    blurred = grid.restrict(model.blur_field(ext))
    rng = np.random.default_rng(seed)
    n_obs = int(round((1.0 - mask_fraction) * grid.size))
    mask = np.zeros(grid.size, dtype=bool)
    mask[rng.permutation(grid.size)[:n_obs]] = True
    mask = mask.reshape(grid.n, grid.n)
    noisy = blurred + noise_level * rng.standard_normal(blurred.shape)
    data = np.where(mask, noisy, 0.0)
    return Field(data, mask, band=band), Field(truth, band=band)


def standardized_sample(spec: PrecisionSpec, seed: int, offset: float = 0.5, scale: float = 0.15) -> np.ndarray:
    """One prior draw on the extended grid, affinely mapped so its original-domain part has mean ``offset`` and std ``scale``."""
    x = sample_prior(spec, 1, seed)[0]
    inner = spec.grid.restrict(x)
    return offset + scale * (x - inner.mean()) / inner.std()


@dataclass
class Benchmark:
    name: str
    data: Field
    truth: Field
    blur: Optional[BlurKernel]
    regions: Optional[np.ndarray] = None
    parameters: dict = field(default_factory=dict)


def isotropic_benchmark(seed: int = 0, n: int = 64, nu: float = 1.0, ell: float = 0.05,
                        mask_fraction: float = 0.4, noise_level: float = 0.01,
                        blur: Optional[BlurKernel] = BlurKernel(0.5)) -> Benchmark:
    """Prior draw (nu, ell) on an n x n image, masked, lightly blurred and noisy."""
    grid = Grid2D(n, image_extension_factor(nu, ell))
    x = standardized_sample(PrecisionSpec.isotropic(nu, ell, grid), seed)
    b, t = make_synthetic_benchmark(x, blur, mask_fraction, noise_level, seed + 10_000, grid)
    return Benchmark("isotropic", b, t, blur, parameters={"nu": nu, "ell": ell, "n": n})


def anisotropic_benchmark(seed: int = 0, n: int = 64, nu: float = 1.0, theta_degrees: float = 45.0,
                          ell1: float = 0.06, tau: float = 3.0, mask_fraction: float = 0.4,
                          noise_level: float = 0.01, blur: Optional[BlurKernel] = None) -> Benchmark:
    """Prior draw with geometric anisotropy (theta, ell1, ell1 / tau)."""
    grid = Grid2D(n, image_extension_factor(nu, ell1))
    spec = PrecisionSpec.anisotropic(nu, math.radians(theta_degrees), ell1, ell1 / tau, grid)
    x = standardized_sample(spec, seed)
    b, t = make_synthetic_benchmark(x, blur, mask_fraction, noise_level, seed + 10_000, grid)
    return Benchmark("anisotropic", b, t, blur,
                     parameters={"nu": nu, "theta_degrees": theta_degrees, "ell1": ell1, "tau": tau, "n": n})


def regional_benchmark(seed: int = 0, n: int = 64, nu: float = 1.0,
                       thetas_degrees: Sequence[float] = (-30.0, -75.0), ell1: float = 0.05, tau: float = 3.0,
                       mask_fraction: float = 0.6, noise_level: float = 0.01,
                       blur: Optional[BlurKernel] = BlurKernel(0.5)) -> Benchmark:
    """Top and bottom halves drawn from priors that differ in direction, stitched along the split."""
    grid = Grid2D(n, image_extension_factor(nu, ell1))
    labels = np.zeros((n, n), dtype=int)
    labels[n // 2:, :] = 1
    ext_labels = RegionPartition(labels).extended_labels(grid)
    x = np.zeros((grid.extended_n,) * 2)
    for i, th in enumerate(thetas_degrees):
        spec = PrecisionSpec.anisotropic(nu, math.radians(th), ell1, ell1 / tau, grid)
        x = np.where(ext_labels == i, standardized_sample(spec, seed + 97 * i), x)
    b, t = make_synthetic_benchmark(x, blur, mask_fraction, noise_level, seed + 10_000, grid)
    return Benchmark("regional", b, t, blur, labels,
                     parameters={"nu": nu, "thetas_degrees": list(thetas_degrees), "ell1": ell1,
                                 "tau": tau, "n": n})
