import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from wmprior.grid import Grid2D
from wmprior.linalg import CGNotConvergedError
from wmprior.solver import (BlurKernel, DataSpaceGCV, ExactGCV, ForwardModel, StochasticGCV, _golden_refine,
                            correlation, dense_map_estimate, gcv_alpha, map_estimate, oracle_alpha,
                            rademacher_probes, sign_orthogonal)
from wmprior.spde import PrecisionSpec, PriorOperator


def brute_gcv(a, p, b, alpha):
    """GCV from the explicit influence matrix."""
    h = a @ np.linalg.solve(a.T @ a + alpha * p, a.T)
    r = b - h @ b
    return (r @ r) / (len(b) - np.trace(h)) ** 2


def test_blur_kernel_normalised_and_symmetric():
    w = BlurKernel(1.5, 9).weights()
    assert w.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(w, w.T)
    np.testing.assert_allclose(w, w[::-1, ::-1])
    with pytest.raises(ValueError):
        BlurKernel(1.0, 4)


def test_blur_matches_periodic_convolution():
    grid = Grid2D(12, 1.5)
    model = ForwardModel(grid, blur=BlurKernel(1.2, 5))
    x = np.random.default_rng(0).standard_normal((grid.extended_n,) * 2)
    ref = ndimage.convolve(x, BlurKernel(1.2, 5).weights(), mode="wrap")
    np.testing.assert_allclose(model.blur_field(x), ref, atol=1e-12)


def test_forward_selects_observed_interior_pixels():
    grid = Grid2D(8, 1.5)
    mask = np.random.default_rng(1).random((8, 8)) > 0.3
    model = ForwardModel(grid, mask)
    x = np.arange(grid.extended_size, dtype=float)
    np.testing.assert_array_equal(model.forward(x), grid.restrict(x)[mask])
    assert model.shape == (mask.sum(), grid.extended_size)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), std=st.floats(0.3, 3.0))
def test_adjoint_identity(seed, std):
    grid = Grid2D(10, 1.5)
    rng = np.random.default_rng(seed)
    model = ForwardModel(grid, rng.random((10, 10)) > 0.4, BlurKernel(std))
    x = rng.standard_normal(grid.extended_size)
    d = rng.standard_normal(model.n_data)
    assert model.forward(x) @ d == pytest.approx(x @ model.adjoint(d), rel=1e-10, abs=1e-10)


def test_batched_forward_and_adjoint(toy):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, toy.model.shape[1]))
    d = rng.standard_normal((3, toy.model.n_data))
    np.testing.assert_allclose(toy.model.forward(x), np.stack([toy.model.forward(v) for v in x]))
    np.testing.assert_allclose(toy.model.adjoint(d), np.stack([toy.model.adjoint(v) for v in d]))


def test_normal_diagonal_and_data_covariance(toy):
    a = toy.model.dense()
    np.testing.assert_allclose(toy.model.normal_diagonal(), np.sum(a * a, axis=0), atol=1e-12)
    pinv = np.linalg.inv(toy.prior.matrix.toarray())
    np.testing.assert_allclose(toy.model.data_covariance(toy.prior), a @ pinv @ a.T, rtol=1e-8, atol=1e-12)


@pytest.mark.parametrize("alpha", [1e-4, 1e-2, 1.0])
def test_cg_matches_dense_solve(toy, alpha):
    ref = dense_map_estimate(toy.model, toy.prior.matrix.toarray(), toy.b, alpha)
    res = map_estimate(toy.model, toy.prior, toy.b, alpha, tol=1e-10)
    assert np.linalg.norm(res.x - ref) / np.linalg.norm(ref) < 1e-6
    assert res.residuals[-1] <= 1e-10


def test_cg_with_jacobi_for_non_spectral_prior(toy):
    spec = PrecisionSpec.isotropic(1.0, 0.2, toy.grid, "dirichlet")
    prior = PriorOperator(spec)
    ref = dense_map_estimate(toy.model, prior.matrix.toarray(), toy.b, 1e-2)
    res = map_estimate(toy.model, prior, toy.b, 1e-2, tol=1e-10, maxiter=20000)
    assert np.linalg.norm(res.x - ref) / np.linalg.norm(ref) < 1e-6


def test_cg_failure_is_reported(toy):
    with pytest.raises(CGNotConvergedError) as info:
        map_estimate(toy.model, toy.prior, toy.b, 1e-6, tol=1e-12, maxiter=2)
    assert len(info.value.residuals) >= 2
    with pytest.raises(ValueError):
        map_estimate(toy.model, toy.prior, toy.b, 0.0)


@pytest.mark.parametrize("alpha", [1e-6, 1e-3, 1.0])
def test_exact_gcv_matches_influence_matrix(toy, alpha):
    p = toy.prior.matrix.toarray()
    gcv = ExactGCV(toy.model, p, toy.b)
    assert gcv(alpha) == pytest.approx(brute_gcv(toy.model.dense(), p, toy.b, alpha), rel=1e-8)


@pytest.mark.parametrize("alpha", [1e-6, 1e-3, 1.0])
def test_data_space_gcv_matches_exact(toy, alpha):
    exact = ExactGCV(toy.model, toy.prior.matrix.toarray(), toy.b)
    dual = DataSpaceGCV(toy.model, toy.prior, toy.b)
    assert dual(alpha) == pytest.approx(exact(alpha), rel=1e-7)
    ref = dense_map_estimate(toy.model, toy.prior.matrix.toarray(), toy.b, alpha)
    np.testing.assert_allclose(dual.estimate(alpha), ref, rtol=1e-7, atol=1e-9)


@pytest.mark.parametrize("k", [1, 2, 4, 8, 12, 16, 20, 24])
def test_sign_orthogonal(k):
    w = sign_orthogonal(k)
    assert set(np.unique(w)) <= {-1.0, 1.0}
    np.testing.assert_array_equal(w.T @ w, k * np.eye(k))


@pytest.mark.parametrize("k", [3, 6, 10])
def test_sign_orthogonal_unknown_orders(k):
    assert sign_orthogonal(k) is None


def test_colored_probes_cancel_neighbour_cross_terms():
    pos = np.column_stack(np.divmod(np.arange(100), 10))
    z = rademacher_probes(pos, 20, seed=3)
    assert set(np.unique(z)) == {-1.0, 1.0}
    gram = z.T @ z
    np.testing.assert_array_equal(np.diag(gram), 20.0)
    # pixels closer than the 4 x 5 tile never interact
    near = (np.abs(pos[:, None, 0] - pos[None, :, 0]) < 4) & (np.abs(pos[:, None, 1] - pos[None, :, 1]) < 5)
    off = near & ~np.eye(100, dtype=bool)
    np.testing.assert_array_equal(gram[off], 0.0)


def test_probe_entries_are_fair_signs():
    pos = np.column_stack(np.divmod(np.arange(40), 8))
    mean = np.mean([rademacher_probes(pos, 20, seed=s) for s in range(400)], axis=0)
    assert np.abs(mean).max() < 0.25


@pytest.mark.parametrize("colored", [True, False])
def test_stochastic_trace_is_unbiased(toy, colored):
    alpha = 1e-2
    exact = ExactGCV(toy.model, toy.prior.matrix.toarray(), toy.b)
    target = toy.model.n_data - exact.influence_trace(alpha)
    est = [StochasticGCV(toy.model, toy.prior, toy.b, 20, seed=s, colored=colored).evaluate(alpha)[1]
           for s in range(6)]
    assert np.mean(est) == pytest.approx(target, rel=0.05)
    resid = StochasticGCV(toy.model, toy.prior, toy.b, 4).evaluate(alpha)[0]
    assert resid == pytest.approx(exact.residual_sq(alpha), rel=1e-5)


def test_golden_refine_finds_log_parabola_minimum():
    pts = _golden_refine(lambda a: (math.log10(a) + 3.3) ** 2, 1e-5, 1e-1, iters=30)
    best = min(pts, key=lambda p: p[1])
    assert math.log10(best[0]) == pytest.approx(-3.3, abs=1e-4)


def test_gcv_alpha_auto_and_refinement(toy):
    sel = gcv_alpha(toy.model, toy.prior, toy.b)
    assert sel.trace == "exact"
    exact = ExactGCV(toy.model, toy.prior.matrix.toarray(), toy.b)
    assert exact(sel.alpha) <= sel.values.min() * (1 + 1e-12)
    assert sel.as_dict()["method"] == "exact"
    dual = gcv_alpha(toy.model, toy.prior, toy.b, trace="data-space")
    assert dual.alpha == pytest.approx(sel.alpha, rel=1e-3)
    with pytest.raises(ValueError):
        gcv_alpha(toy.model, toy.prior, toy.b, trace="magic")
    with pytest.raises(ValueError):
        gcv_alpha(toy.model, toy.prior, toy.b, alpha_grid=[1.0, 0.1])


def test_oracle_alpha_maximises_truth_correlation(toy):
    sel = oracle_alpha(toy.model, toy.prior, toy.b, toy.truth)
    x = dense_map_estimate(toy.model, toy.prior.matrix.toarray(), toy.b, sel.alpha)
    rho = correlation(toy.grid.restrict(x), toy.truth)
    assert rho >= sel.values.max() - 1e-12
    cg = oracle_alpha(toy.model, toy.prior, toy.b, toy.truth, alpha_grid=np.logspace(-4, 0, 5),
                      refine=False, data_space_limit=0)
    assert cg.trace == "cg"
    grid_sel = oracle_alpha(toy.model, toy.prior, toy.b, toy.truth, alpha_grid=np.logspace(-4, 0, 5),
                            refine=False)
    assert cg.alpha == grid_sel.alpha


def test_correlation_helper():
    x = np.arange(10.0)
    assert correlation(x, 3 * x + 1) == pytest.approx(1.0)
    assert correlation(x, -x) == pytest.approx(-1.0)
    assert correlation(x, np.ones(10)) == 0.0
