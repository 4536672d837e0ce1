import json
import math

import numpy as np
import pytest

from wmprior.grid import Field, Grid2D
from wmprior.pipelines import (PIPELINES, AnisotropicParameters, SolveConfig, anisotropic_benchmark,
                               isotropic_benchmark, make_synthetic_benchmark, regional_benchmark,
                               run_isotropic_pipeline, run_regional_pipeline, run_tikhonov, standardized_sample)
from wmprior.solver import BlurKernel
from wmprior.spde import PrecisionSpec


def small_problem(seed=0, n=32):
    grid = Grid2D(n, 1.5)
    x = standardized_sample(PrecisionSpec.isotropic(1.0, 0.08, grid), seed)
    return make_synthetic_benchmark(x, None, 0.4, 0.01, seed + 1, grid)


def test_solve_config_validation():
    assert SolveConfig(alpha="0.5").alpha == 0.5
    for bad in ["gcv", -1.0, 0.0]:
        with pytest.raises(ValueError):
            SolveConfig(alpha=bad)
    grid = SolveConfig(alpha_points=5).alpha_grid()
    assert len(grid) == 5 and grid[0] == pytest.approx(1e-8) and grid[-1] == pytest.approx(1e2)
    assert SolveConfig().psi_step == pytest.approx(math.radians(15))


@pytest.mark.parametrize("mask_fraction", [0.0, 0.4, 0.6])
def test_synthetic_benchmark_observed_count(mask_fraction):
    grid = Grid2D(20, 1.5)
    x = np.random.default_rng(0).random((20, 20))
    data, truth = make_synthetic_benchmark(x, None, mask_fraction, 0.0, 3, grid)
    assert data.mask.sum() == round((1 - mask_fraction) * 400)
    np.testing.assert_array_equal(truth.values, x)
    np.testing.assert_allclose(data.values[data.mask], x[data.mask])
    with pytest.raises(ValueError):
        make_synthetic_benchmark(x, None, 1.0, 0.0)
    with pytest.raises(ValueError):
        make_synthetic_benchmark(np.zeros((7, 7)), None, 0.1, 0.0, grid=grid)


def test_benchmark_noise_level():
    grid = Grid2D(40, 1.5)
    x = np.zeros((40, 40))
    data, _ = make_synthetic_benchmark(x, BlurKernel(1.0), 0.0, 0.05, 0, grid)
    assert np.std(data.values) == pytest.approx(0.05, rel=0.1)


def test_standardized_sample_moments():
    spec = PrecisionSpec.isotropic(1.0, 0.1, Grid2D(24, 1.5))
    inner = spec.grid.restrict(standardized_sample(spec, 4))
    assert inner.mean() == pytest.approx(0.5) and inner.std() == pytest.approx(0.15)


@pytest.mark.parametrize("make", [isotropic_benchmark, anisotropic_benchmark, regional_benchmark])
def test_benchmarks_are_seeded(make):
    a, b = make(seed=1, n=24), make(seed=1, n=24)
    np.testing.assert_array_equal(a.data.values, b.data.values)
    np.testing.assert_array_equal(a.truth.values, b.truth.values)
    assert not np.array_equal(make(seed=2, n=24).truth.values, a.truth.values)


def test_regional_benchmark_labels():
    bm = regional_benchmark(seed=0, n=24)
    assert bm.regions.shape == (24, 24)
    assert set(np.unique(bm.regions)) == {0, 1}
    assert np.all(bm.regions[:12] == 0) and np.all(bm.regions[12:] == 1)


@pytest.fixture(scope="module")
def problem():
    return small_problem()


def test_isotropic_pipeline_history_and_report(problem):
    data, truth = problem
    rep = run_isotropic_pipeline(data, None, SolveConfig(max_outer=3), truth)
    assert rep.history[0]["source"] == "data"
    assert len(rep.history) == rep.iterations + 1 == len(rep.cg_iterations) + 1
    assert rep.estimate.shape == (32, 32)
    assert rep.metrics["rho"] > 0.8
    assert rep.history[-1]["nu"] in (1.0, 2.0, 3.0)
    payload = json.loads(rep.to_json())
    assert payload["prior"] == "isotropic" and "estimate" not in payload
    assert len(json.loads(rep.to_json(include_estimate=True))["estimate"]) == 32


def test_report_json_is_deterministic(problem):
    data, truth = problem
    cfg = SolveConfig(max_outer=2)
    assert (run_isotropic_pipeline(data, None, cfg, truth).to_json()
            == run_isotropic_pipeline(data, None, cfg, truth).to_json())


def test_fixed_alpha_and_oracle(problem):
    data, truth = problem
    fixed = run_tikhonov(data, None, SolveConfig(alpha=1e-2), truth)
    assert fixed.alpha == 1e-2 and fixed.alpha_selection["mode"] == "fixed"
    oracle = run_tikhonov(data, None, SolveConfig(alpha="oracle"), truth)
    assert oracle.metrics["rho"] >= fixed.metrics["rho"] - 1e-9
    with pytest.raises(ValueError):
        run_tikhonov(data, None, SolveConfig(alpha="oracle"))


def test_whittle_matern_prior_beats_identity(problem):
    data, truth = problem
    cfg = SolveConfig(max_outer=2)
    iso = run_isotropic_pipeline(data, None, cfg, truth)
    tik = run_tikhonov(data, None, cfg, truth)
    assert iso.metrics["rho"] > tik.metrics["rho"]
    assert set(PIPELINES) == {"isotropic", "anisotropic", "tikhonov"}


def test_anisotropic_parameters_record():
    par = AnisotropicParameters(1.0, math.radians(45), 0.06, 0.02, 3.0, True)
    rec = par.record()
    assert rec["tau"] == pytest.approx(3.0) and rec["theta_degrees"] == pytest.approx(45.0)
    spec = par.spec(Grid2D(8, 1.0), "periodic")
    assert spec.kind == "anisotropic"
    flat = AnisotropicParameters(1.0, 0.0, 0.05, 0.05, 1.1, False)
    assert flat.spec(Grid2D(8, 1.0), "periodic").kind == "isotropic"


def test_regional_pipeline_rejects_mismatched_labels(problem):
    data, _ = problem
    with pytest.raises(ValueError):
        run_regional_pipeline(data, np.zeros((8, 8), dtype=int))


def test_field_is_passed_through_as_truth(problem):
    data, truth = problem
    a = run_tikhonov(data, None, SolveConfig(alpha=1e-2), truth)
    b = run_tikhonov(data, None, SolveConfig(alpha=1e-2), Field(truth.values))
    assert a.metrics == b.metrics
