"""Acceptance criteria, each run at its stated tolerance and runtime budget.

Every test records one PASS/FAIL line (shown in the terminal summary) before
asserting, so a full run lists the status of all criteria even when some fail.
Run with ``pytest tests/test_acceptance.py -v``.
"""

import json
import math
import time

import numpy as np
import pytest

from acceptance_log import record
from conftest import masked_deblur_toy
from oracles import dense_precision, regional_oracle, rel_fro
from wmprior.cli import main
from wmprior.grid import Grid2D
from wmprior.matern import matern_correlation, practical_range, range_approximation
from wmprior.metrics import STAT_LABELS, format_statistics, report_statistics, statistics_table
from wmprior.pipelines import (PIPELINES, SolveConfig, anisotropic_benchmark, isotropic_benchmark,
                               regional_benchmark, run_anisotropic_pipeline, run_isotropic_pipeline,
                               run_regional_pipeline)
from wmprior.regional import RegionPartition, build_regional_operator
from wmprior.solver import (ExactGCV, StochasticGCV, default_alpha_grid, dense_map_estimate, gcv_alpha,
                            map_estimate)
from wmprior.spde import (PrecisionSpec, PriorOperator, assemble_anisotropic_precision,
                          assemble_isotropic_precision, assemble_precision)

pytestmark = pytest.mark.acceptance

SEEDS = range(5)
# JSON reports of criteria 3, 7 and 8, kept for the determinism rerun
REPORTS: dict = {}


def _connection_report(out_dir, a):
    code = main(["validate-connection", "--n", "32", "--nu", "1", "--ell", "0.25", "--boundary", "periodic",
                 "--a", str(a), "--samples", "20000", "--seed", "0", "--out", str(out_dir)])
    path = out_dir / "report.json"
    return code, path.read_bytes()


def _isotropic_run(seed):
    bm = isotropic_benchmark(seed=seed)
    return run_isotropic_pipeline(bm.data, bm.blur, SolveConfig(), truth=bm.truth)


def _anisotropic_run(seed):
    bm = anisotropic_benchmark(seed=seed)
    return run_anisotropic_pipeline(bm.data, bm.blur, SolveConfig(), truth=bm.truth)


def test_criterion_01_matern_closed_form():
    # one-time JIT compilation (cached on disk afterwards) is reported but not charged to the budget
    t_jit = time.perf_counter()
    matern_correlation(1.0, 0.5, 1.0)
    jit = time.perf_counter() - t_jit
    t0 = time.perf_counter()
    ell = 0.37
    r = np.logspace(-4, 1, 100) * ell
    got = matern_correlation(r, 0.5, ell)
    err = float(np.max(np.abs(got - np.exp(-r / ell)) / np.exp(-r / ell)))
    elapsed = time.perf_counter() - t0
    ok = err <= 1e-9 and elapsed < 1.0
    record(1, "Matern nu=1/2 closed form", ok, f"max rel err {err:.2e} (<= 1e-9), {elapsed:.2f}s (< 1s), first-call compile/load {jit:.2f}s")
    assert ok


def test_criterion_02_practical_range():
    t0 = time.perf_counter()
    pr = practical_range(2.0, 0.019)
    approx = {nu: float(matern_correlation(range_approximation(nu, 1.0), nu, 1.0)) for nu in (1.0, 2.0, 3.0)}
    elapsed = time.perf_counter() - t0
    ok_range = abs(pr - 0.102) <= 0.003
    ok_approx = all(0.08 <= c <= 0.12 for c in approx.values())
    ok = ok_range and ok_approx and elapsed < 1.0
    detail = (f"practical_range(2, 0.019) = {pr:.4f} (0.102 +- 0.003: {'ok' if ok_range else 'no'}); "
              f"correlation at ell*sqrt(8 nu) = "
              + ", ".join(f"nu={nu:g}: {c:.4f}" for nu, c in approx.items())
              + f" (in [0.08, 0.12]: {'ok' if ok_approx else 'no'}); {elapsed:.2f}s")
    record(2, "practical range", ok, detail)
    assert ok


def test_criterion_03_connection(tmp_path):
    t0 = time.perf_counter()
    code_ext, rep_ext = _connection_report(tmp_path / "ext", 1.6)
    code_raw, rep_raw = _connection_report(tmp_path / "raw", 1.0)
    elapsed = time.perf_counter() - t0
    REPORTS["c3"] = (rep_ext, rep_raw)
    err_ext = json.loads(rep_ext)["relative_frobenius_error"]
    err_raw = json.loads(rep_raw)["relative_frobenius_error"]
    ok = err_ext < 0.08 and err_raw > 0.08 and elapsed < 300 and code_ext in (0, 1) and code_raw in (0, 1)
    record(3, "SPDE/Matern connection", ok,
           f"a=1.6 error {err_ext:.4f} (< 0.08), a=1 error {err_raw:.4f} (> 0.08), {elapsed:.0f}s (< 300s)")
    assert ok


def test_criterion_04_precision_oracles():
    t0 = time.perf_counter()
    worst_dense, worst_fft, worst_equal = 0.0, 0.0, 0.0
    rng = np.random.default_rng(0)
    for n in (4, 7, 8):
        for boundary in ("periodic", "dirichlet"):
            grid = Grid2D(n, 1.0)
            for nu in (1.0, 2.0, 3.0):
                spec = PrecisionSpec.isotropic(nu, 0.3, grid, boundary)
                ref = dense_precision(n, grid.h, nu, 0.3, 0.3, 0.0, boundary)
                worst_dense = max(worst_dense, rel_fro(assemble_isotropic_precision(spec), ref))
            for deg in (0, 30, 45, -60, 90):
                th = math.radians(deg)
                spec = PrecisionSpec.anisotropic(1.0, th, 0.2, 0.1, grid, boundary)
                ref = dense_precision(n, grid.h, 1.0, 0.2, 0.1, th, boundary)
                worst_dense = max(worst_dense, rel_fro(assemble_anisotropic_precision(spec), ref))
                same = PrecisionSpec.anisotropic(2.0, th, 0.15, 0.15, grid, boundary)
                iso = assemble_isotropic_precision(PrecisionSpec.isotropic(2.0, 0.15, grid, boundary)).toarray()
                diff = np.abs(assemble_anisotropic_precision(same).toarray() - iso).max() / np.abs(iso).max()
                worst_equal = max(worst_equal, diff)
            for spec in (PrecisionSpec.isotropic(2.0, 0.2, grid),
                         PrecisionSpec.anisotropic(1.0, math.radians(45), 0.3, 0.1, grid)):
                x = rng.standard_normal(n * n)
                sparse = assemble_precision(spec) @ x
                fft = PriorOperator(spec).matvec(x)
                worst_fft = max(worst_fft, np.linalg.norm(fft - sparse) / np.linalg.norm(sparse))
    elapsed = time.perf_counter() - t0
    ok = worst_dense < 1e-10 and worst_fft < 1e-10 and worst_equal < 1e-12 and elapsed < 30
    record(4, "precision-operator oracles", ok,
           f"sparse vs dense {worst_dense:.1e}, FFT vs sparse {worst_fft:.1e}, "
           f"equal lengths vs isotropic {worst_equal:.1e}, {elapsed:.1f}s (< 30s)")
    assert ok


def test_criterion_05_regional_oracle():
    t0 = time.perf_counter()
    grid = Grid2D(8, 1.0)
    two = np.zeros((8, 8), dtype=int)
    two[:, 4:] = 1
    three = np.zeros((8, 8), dtype=int)
    three[2:, :] = 1
    three[2:, 4:] = 2
    angles = (30, -60, 0)
    worst = 0.0
    for labels in (two, three):
        specs = [PrecisionSpec.anisotropic(1.0, math.radians(angles[i]), 0.25, 0.1, grid)
                 for i in range(labels.max() + 1)]
        op = build_regional_operator(RegionPartition(labels), specs)
        ref = regional_oracle(labels, specs)
        x = np.random.default_rng(1).standard_normal((20, 64))
        y = x @ ref.T
        worst = max(worst, float(np.max(np.linalg.norm(op.matvec(x) - y, axis=1) / np.linalg.norm(y, axis=1))))
    single = PrecisionSpec.anisotropic(1.0, math.radians(30), 0.25, 0.1, grid)
    op1 = build_regional_operator(RegionPartition(np.zeros((8, 8), dtype=int)), [single])
    exact_k1 = bool(np.array_equal(op1.dense(), assemble_precision(single).toarray()))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-8 and exact_k1 and elapsed < 30
    record(5, "regional block-identity oracle", ok,
           f"worst rel err {worst:.1e} over k=2,3 (< 1e-8), k=1 equals P1 exactly: {exact_k1}, {elapsed:.1f}s")
    assert ok


def test_criterion_06_solver_oracle():
    t0 = time.perf_counter()
    toy = masked_deblur_toy(seed=0)
    p = toy.prior.matrix.toarray()
    chosen = gcv_alpha(toy.model, toy.prior, toy.b).alpha
    cg_err = 0.0
    for alpha in (1e-4, chosen, 1e-2, 1.0):
        ref = dense_map_estimate(toy.model, p, toy.b, alpha)
        x = map_estimate(toy.model, toy.prior, toy.b, alpha, tol=1e-10).x
        cg_err = max(cg_err, np.linalg.norm(x - ref) / np.linalg.norm(ref))
    exact = ExactGCV(toy.model, p, toy.b)
    stoch = StochasticGCV(toy.model, toy.prior, toy.b, 20, seed=0)
    grid = default_alpha_grid()
    gcv_err = max(abs(stoch(a) - exact(a)) / exact(a) for a in grid)
    elapsed = time.perf_counter() - t0
    ok = cg_err < 1e-6 and gcv_err < 0.05 and elapsed < 120
    record(6, "solver oracle", ok,
           f"CG vs dense {cg_err:.1e} (< 1e-6), stochastic vs exact GCV worst {100 * gcv_err:.2f}% over "
           f"{len(grid)} grid points (< 5%), {elapsed:.1f}s (< 120s)")
    assert ok


def test_criterion_07_isotropic_self_consistency():
    t0 = time.perf_counter()
    rows, hits, REPORTS["c7"] = [], 0, []
    for seed in SEEDS:
        rep = _isotropic_run(seed)
        REPORTS["c7"].append(rep.to_json())
        last = rep.history[-1]
        good = (last["nu"] == 1.0 and abs(last["ell"] - 0.05) / 0.05 <= 0.25
                and rep.converged and rep.iterations <= 3)
        hits += good
        rows.append(f"seed {seed}: nu {last['nu']:g}, ell {last['ell']:.4f}, {rep.iterations} it"
                    f"{'' if rep.converged else ' (no conv.)'} {'ok' if good else 'miss'}")
    elapsed = time.perf_counter() - t0
    ok = hits >= 4 and elapsed < 600
    record(7, "isotropic pipeline self-consistency", ok,
           f"{hits}/5 seeds (need 4), {elapsed:.0f}s (< 600s); " + "; ".join(rows))
    assert ok


def test_criterion_08_anisotropic_self_consistency():
    t0 = time.perf_counter()
    rows, hits, REPORTS["c8"] = [], 0, []
    for seed in SEEDS:
        rep = _anisotropic_run(seed)
        REPORTS["c8"].append(rep.to_json())
        last = rep.history[-1]
        good = (abs(last["theta_degrees"] - 45.0) < 1e-9 and 2.1 <= last["tau"] <= 3.9
                and rep.converged and rep.iterations <= 4)
        hits += good
        rows.append(f"seed {seed}: theta {last['theta_degrees']:g}, tau {last['tau']:.2f}, {rep.iterations} it"
                    f"{'' if rep.converged else ' (no conv.)'} {'ok' if good else 'miss'}")
    elapsed = time.perf_counter() - t0
    ok = hits >= 4 and elapsed < 900
    record(8, "anisotropic pipeline self-consistency", ok,
           f"{hits}/5 seeds (need 4), {elapsed:.0f}s (< 900s); " + "; ".join(rows))
    assert ok


def test_criterion_09_method_ordering():
    t0 = time.perf_counter()
    # alpha maximises truth correlation, so the comparison isolates the prior
    cfg = SolveConfig(alpha="oracle")
    bm = regional_benchmark(seed=0)
    runs = {name: PIPELINES[name](bm.data, bm.blur, cfg, truth=bm.truth)
            for name in ("tikhonov", "isotropic", "anisotropic")}
    runs["regional"] = run_regional_pipeline(bm.data, bm.regions, bm.blur, cfg, truth=bm.truth)
    rho = {k: v.metrics["rho"] for k, v in runs.items()}
    single = anisotropic_benchmark(seed=0)
    rho1 = {name: PIPELINES[name](single.data, single.blur, cfg, truth=single.truth).metrics["rho"]
            for name in ("isotropic", "anisotropic")}
    columns = {k: report_statistics(v.estimate, bm.truth) for k, v in runs.items()}
    columns["truth"] = report_statistics(bm.truth)
    rows = statistics_table(columns)
    labels_ok = [r[0] for r in rows[1:]] == list(STAT_LABELS)
    print(format_statistics(columns))
    elapsed = time.perf_counter() - t0
    order_ok = rho["regional"] >= rho["anisotropic"] >= rho["isotropic"] > rho["tikhonov"]
    single_ok = rho1["anisotropic"] > rho1["isotropic"]
    ok = order_ok and single_ok and labels_ok and elapsed < 1200
    record(9, "method ordering", ok,
           "regional benchmark rho " + ", ".join(f"{k} {v:.4f}" for k, v in rho.items())
           + f" (regional >= anisotropic >= isotropic > tikhonov: {order_ok}); single-theta benchmark "
           + f"anisotropic {rho1['anisotropic']:.4f} vs isotropic {rho1['isotropic']:.4f} ({single_ok}); "
           + f"all statistic rows present: {labels_ok}; {elapsed:.0f}s (< 1200s)")
    assert ok


def test_criterion_10_determinism(tmp_path):
    t0 = time.perf_counter()
    if "c3" not in REPORTS:
        REPORTS["c3"] = (_connection_report(tmp_path / "e0", 1.6)[1], _connection_report(tmp_path / "r0", 1.0)[1])
    if "c7" not in REPORTS:
        REPORTS["c7"] = [_isotropic_run(s).to_json() for s in SEEDS]
    if "c8" not in REPORTS:
        REPORTS["c8"] = [_anisotropic_run(s).to_json() for s in SEEDS]
    same3 = (_connection_report(tmp_path / "e", 1.6)[1], _connection_report(tmp_path / "r", 1.0)[1]) == REPORTS["c3"]
    same7 = [_isotropic_run(s).to_json() for s in SEEDS] == REPORTS["c7"]
    same8 = [_anisotropic_run(s).to_json() for s in SEEDS] == REPORTS["c8"]
    elapsed = time.perf_counter() - t0
    ok = same3 and same7 and same8
    record(10, "determinism", ok,
           f"byte-identical reports: criterion 3 {same3}, criterion 7 {same7}, criterion 8 {same8}; "
           f"{elapsed:.0f}s")
    assert ok
