"""Forward models, MAP solves and regularization-parameter selection.

Unknowns live on the extended grid (flattened row-major); data are the
observed original-domain pixels of the blurred field, in row-major order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .grid import Grid2D
from .linalg import CGNotConvergedError, pcg


# --------------------------------------------------------------------------- forward model


@dataclass(frozen=True)
class BlurKernel:
    """Isotropic Gaussian kernel, normalised to unit sum, on a ``size`` x ``size`` support."""

    std: float = 1.5
    size: int = 9

    def __post_init__(self):
        if self.std <= 0 or self.size < 1 or self.size % 2 == 0:
            raise ValueError("blur needs std > 0 and an odd support size")

    def weights(self) -> np.ndarray:
        r = np.arange(self.size) - self.size // 2
        g = np.exp(-0.5 * (r / self.std) ** 2)
        k = np.outer(g, g)
        return k / k.sum()

    def transfer(self, m: int, power: int = 1) -> np.ndarray:
        """2-D DFT of the (elementwise ``power`` of the) kernel centred at the origin of an m x m periodic grid."""
        if self.size > m:
            raise ValueError("blur support exceeds the grid")
        buf = np.zeros((m, m))
        w = self.weights() ** power
        half = self.size // 2
        idx = (np.arange(self.size) - half) % m
        buf[np.ix_(idx, idx)] = w
        return np.fft.fft2(buf)


class ForwardModel:
    """A = S R G: periodic blur G on the extended grid, restriction R, pixel selection S."""

    def __init__(self, grid: Grid2D, mask: Optional[np.ndarray] = None, blur: Optional[BlurKernel] = None):
        self.grid = grid
        n = grid.n
        self.mask = np.ones((n, n), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        if self.mask.shape != (n, n):
            raise ValueError("mask shape does not match the grid")
        self.blur = blur
        self._transfer = blur.transfer(grid.extended_n) if blur is not None else None
        self._obs = np.flatnonzero(self.mask.ravel())

    @property
    def shape(self) -> tuple[int, int]:
        return len(self._obs), self.grid.extended_size

    @property
    def n_data(self) -> int:
        return len(self._obs)

    def _conv(self, x: np.ndarray, adjoint: bool = False) -> np.ndarray:
        if self._transfer is None:
            return x
        t = np.conj(self._transfer) if adjoint else self._transfer
        return np.real(np.fft.ifft2(np.fft.fft2(x) * t))

    def blur_field(self, x_ext: np.ndarray) -> np.ndarray:
        """Blurred extended-domain field(s), shape (..., m, m)."""
        x_ext = np.asarray(x_ext, dtype=float)
        m = self.grid.extended_n
        lead = x_ext.shape[:-2] if x_ext.shape[-2:] == (m, m) else x_ext.shape[:-1]
        return self._conv(x_ext.reshape(lead + (m, m)))

    def forward(self, x: np.ndarray) -> np.ndarray:
        """A x for a flat extended-grid vector or a batch of shape (k, N)."""
        y = self.blur_field(x)[..., self.grid.interior[0], self.grid.interior[1]]
        return y.reshape(y.shape[:-2] + (-1,))[..., self._obs]

    def adjoint(self, d: np.ndarray) -> np.ndarray:
        """A^T d for a data vector or a batch of shape (k, n_data)."""
        d = np.asarray(d, dtype=float)
        n, m = self.grid.n, self.grid.extended_n
        img = np.zeros(d.shape[:-1] + (n * n,))
        img[..., self._obs] = d
        ext = np.zeros(d.shape[:-1] + (m, m))
        ext[..., self.grid.interior[0], self.grid.interior[1]] = img.reshape(d.shape[:-1] + (n, n))
        return self._conv(ext, adjoint=True).reshape(d.shape[:-1] + (m * m,))

    __call__ = forward

    def normal(self, x: np.ndarray) -> np.ndarray:
        return self.adjoint(self.forward(x))

    def covariance_kernel(self, prior) -> np.ndarray:
        """First column of the circulant G P^{-1} G^T on the extended grid (spectral priors)."""
        gain = np.abs(self._transfer) ** 2 if self._transfer is not None else 1.0
        return np.real(np.fft.ifft2(gain / prior.symbol))

    def data_covariance(self, prior, chunk: int = 256) -> np.ndarray:
        """Dense C = A P^{-1} A^T between observed pixels.

        FFT-diagonal priors read C off one circulant kernel; any other prior
        with a direct ``solve`` is applied to A^T e_j in batches of ``chunk``.
        """
        if not getattr(prior, "spectral", False):
            c = np.empty((self.n_data, self.n_data))
            for start in range(0, self.n_data, chunk):
                e = np.zeros((min(chunk, self.n_data - start), self.n_data))
                e[np.arange(len(e)), start + np.arange(len(e))] = 1.0
                c[start:start + len(e)] = self.forward(prior.solve(self.adjoint(e)))
            return 0.5 * (c + c.T)
        k = self.covariance_kernel(prior)
        m = self.grid.extended_n
        rows, cols = np.divmod(self._obs, self.grid.n)
        dr = (rows[:, None] - rows[None, :]) % m
        dc = (cols[:, None] - cols[None, :]) % m
        return k[dr, dc]

    def pixel_positions(self) -> np.ndarray:
        """(row, col) of each datum on the original grid."""
        return np.column_stack(np.divmod(self._obs, self.grid.n))

    def normal_diagonal(self) -> np.ndarray:
        """diag(A^T A): each unknown's summed squared kernel weight over observed pixels."""
        obs = self.grid.embed(self.mask.astype(float))
        if self._transfer is None:
            return obs.ravel()
        m = self.grid.extended_n
        sq = self.blur.transfer(m, power=2)
        return np.real(np.fft.ifft2(np.fft.fft2(obs) * np.conj(sq))).ravel()

    def dense(self) -> np.ndarray:
        """Explicit matrix (small grids only)."""
        return self.forward(np.eye(self.shape[1])).T

    def data_from_image(self, image: np.ndarray) -> np.ndarray:
        """Observed entries of an original-domain image, in data order."""
        return np.asarray(image, dtype=float).ravel()[self._obs]

    def image_from_data(self, d: np.ndarray, fill: float = np.nan) -> np.ndarray:
        n = self.grid.n
        out = np.full(n * n, fill)
        out[self._obs] = d
        return out.reshape(n, n)


# --------------------------------------------------------------------------- MAP


@dataclass
class MapResult:
    x: np.ndarray  # extended-grid estimate, flat
    alpha: float
    iterations: int
    residuals: list

    def image(self, grid: Grid2D) -> np.ndarray:
        return grid.restrict(self.x)


def _preconditioner(model: ForwardModel, prior, alpha: float) -> Callable:
    """P^{-1} for priors with a direct inverse, Jacobi otherwise.

    With P^{-1} as preconditioner, CG effectively runs on
    alpha I + P^{-1/2} A^T A P^{-1/2}, whose non-trivial part has rank at most
    the number of data, so iteration counts stay bounded as alpha -> 0.
    """
    if getattr(prior, "has_inverse", False):
        return prior.solve
    diag = model.normal_diagonal() + alpha * prior.diagonal()
    inv = 1.0 / diag
    return lambda r: r * inv


def system_operator(model: ForwardModel, prior, alpha: float) -> Callable:
    return lambda x: model.normal(x) + alpha * prior.matvec(x)


def map_estimate(model: ForwardModel, prior, b: np.ndarray, alpha: float, tol: float = 1e-8,
                 maxiter: int = 5000, x0: Optional[np.ndarray] = None) -> MapResult:
    """Solve (A^T A + alpha P) x = A^T b by preconditioned CG.

    Raises ``CGNotConvergedError`` (with the residual history) if the
    relative normal-equation residual does not reach ``tol``.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if not 0 < tol < 1:
        raise ValueError("CG tolerance must lie in (0, 1)")
    rhs = model.adjoint(np.asarray(b, dtype=float))
    res = pcg(system_operator(model, prior, alpha), rhs, _preconditioner(model, prior, alpha),
              tol=tol, maxiter=maxiter, x0=x0)
    return MapResult(res.x, float(alpha), res.iterations, res.residuals)


def dense_map_estimate(model: ForwardModel, prior_matrix: np.ndarray, b: np.ndarray, alpha: float) -> np.ndarray:
    a = model.dense()
    return np.linalg.solve(a.T @ a + alpha * prior_matrix, a.T @ b)


# --------------------------------------------------------------------------- alpha selection


def default_alpha_grid() -> np.ndarray:
    return np.logspace(-8, 2, 21)


@dataclass
class AlphaSelection:
    alpha: float
    grid: np.ndarray
    values: np.ndarray
    mode: str
    refined: list = field(default_factory=list)  # (alpha, value) pairs from refinement
    trace: str = ""

    def as_dict(self) -> dict:
        return {"alpha": self.alpha, "mode": self.mode, "method": self.trace,
                "grid": [float(a) for a in self.grid],
                "values": [float(v) for v in self.values],
                "refined": [[float(a), float(v)] for a, v in self.refined]}


class ExactGCV:
    """Closed-form GCV curve from the SVD of A L^{-T}, where P = L L^T (small problems)."""

    def __init__(self, model: ForwardModel, prior_matrix: np.ndarray, b: np.ndarray):
        a = model.dense()
        chol = np.linalg.cholesky(prior_matrix)
        bmat = np.linalg.solve(chol, a.T).T  # A L^{-T}
        u, s, _ = np.linalg.svd(bmat, full_matrices=False)
        self.s2 = s ** 2
        self.ub = u.T @ b
        self.perp = float(b @ b - self.ub @ self.ub)
        self.m = len(b)

    def influence_trace(self, alpha: float) -> float:
        return float(np.sum(self.s2 / (self.s2 + alpha)))

    def residual_sq(self, alpha: float) -> float:
        f = alpha / (self.s2 + alpha)
        return float(np.sum((f * self.ub) ** 2) + max(self.perp, 0.0))

    def __call__(self, alpha: float) -> float:
        return self.residual_sq(alpha) / (self.m - self.influence_trace(alpha)) ** 2


class DataSpaceGCV(ExactGCV):
    """Exact GCV for priors with a direct inverse via the data covariance C = A P^{-1} A^T.

    The influence matrix is H = C (C + alpha I)^{-1}, so one symmetric
    eigendecomposition of C gives the GCV curve and every MAP estimate
    x = P^{-1} A^T (C + alpha I)^{-1} b in closed form.
    """

    def __init__(self, model: ForwardModel, prior, b: np.ndarray):
        self.model, self.prior = model, prior
        c = model.data_covariance(prior)
        s2, u = np.linalg.eigh(c)
        self.s2 = np.clip(s2, 0.0, None)
        self.u = u
        self.ub = u.T @ b
        self.perp = 0.0
        self.m = len(b)

    def estimate(self, alpha: float) -> np.ndarray:
        w = self.u @ (self.ub / (self.s2 + alpha))
        return self.prior.solve(self.model.adjoint(w))


def sign_orthogonal(k: int) -> Optional[np.ndarray]:
    """A k x k matrix with entries +-1 and orthogonal columns, if a construction is known.

    Sylvester doubling covers powers of two; the Paley construction covers
    k = q + 1 with q a prime congruent to 3 mod 4 (e.g. 12, 20, 24).
    """
    if k >= 1 and k & (k - 1) == 0:
        h = np.ones((1, 1))
        while h.shape[0] < k:
            h = np.block([[h, h], [h, -h]])
        return h
    q = k - 1
    if q > 2 and q % 4 == 3 and all(q % d for d in range(2, int(math.isqrt(q)) + 1)):
        residues = {(x * x) % q for x in range(1, q)}
        chi = np.array([0] + [1 if a in residues else -1 for a in range(1, q)])
        jac = chi[(np.arange(q)[None, :] - np.arange(q)[:, None]) % q]
        s = np.zeros((k, k))
        s[0, 1:] = 1.0
        s[1:, 0] = -1.0
        s[1:, 1:] = jac
        return np.eye(k) + s
    return None


def rademacher_probes(positions: np.ndarray, n_probes: int, seed: int = 0, colored: bool = True) -> np.ndarray:
    """Rademacher probe vectors (n_probes, n_data) for trace estimation.

    With ``colored`` the pixels are tiled into ``n_probes`` colours and probe
    t takes the value s_i * W[t, colour(i)], with s_i independent random
    signs and W a +-1 matrix with orthogonal columns. Every entry is still a
    fair +-1 sign, so the estimator stays unbiased, but cross terms between
    pixels of different colours (all near neighbours) cancel exactly.
    Falls back to independent signs when no such W is available.
    """
    rng = np.random.default_rng(seed)
    signs = rng.choice([-1.0, 1.0], size=(n_probes, len(positions)))
    w = sign_orthogonal(n_probes) if colored else None
    if w is None:
        return signs
    p = max(d for d in range(1, int(math.isqrt(n_probes)) + 1) if n_probes % d == 0)
    q = n_probes // p
    color = (positions[:, 0] % p) * q + (positions[:, 1] % q)
    return signs[0][None, :] * w[:, color]


class StochasticGCV:
    """GCV with the influence trace estimated from ``n_probes`` Rademacher probes.

    tr(A M^{-1} A^T) is averaged over quadratic forms z^T A M^{-1} A^T z.
    The probes are fixed at construction so the curve is smooth in alpha;
    the data solve and the probe solves run as one batched CG warm-started
    from the nearest previously evaluated alpha.
    """

    def __init__(self, model: ForwardModel, prior, b: np.ndarray, n_probes: int = 20, seed: int = 0,
                 tol: float = 1e-6, maxiter: int = 5000, colored: bool = True):
        self.model, self.prior, self.b = model, prior, np.asarray(b, dtype=float)
        self.probes = rademacher_probes(model.pixel_positions(), n_probes, seed, colored)
        self.rhs = model.adjoint(np.vstack([self.b[None, :], self.probes]))
        self.tol, self.maxiter = tol, maxiter
        self._cache: dict[float, tuple] = {}
        self.cg_iterations = 0

    def evaluate(self, alpha: float) -> tuple[float, float]:
        """(residual norm squared, estimate of tr(I - H))."""
        alpha = float(alpha)
        if alpha in self._cache:
            return self._cache[alpha][:2]
        warm = None
        if self._cache:
            key = min(self._cache, key=lambda a: abs(math.log(a) - math.log(alpha)))
            warm = self._cache[key][2]
        res = pcg(system_operator(self.model, self.prior, alpha), self.rhs,
                  _preconditioner(self.model, self.prior, alpha), tol=self.tol,
                  maxiter=self.maxiter, x0=warm)
        self.cg_iterations += res.iterations
        ax = self.model.forward(res.x)
        resid = float(np.sum((ax[0] - self.b) ** 2))
        quad = np.einsum("ij,ij->i", self.probes, ax[1:])
        trace = self.model.n_data - float(np.mean(quad))
        self._cache[alpha] = (resid, trace, res.x)
        return resid, trace

    def estimate(self, alpha: float) -> np.ndarray:
        self.evaluate(alpha)
        return self._cache[float(alpha)][2][0]

    def __call__(self, alpha: float) -> float:
        resid, trace = self.evaluate(alpha)
        return resid / trace ** 2


def _golden_refine(fun: Callable[[float], float], lo: float, hi: float, iters: int = 12):
    """Golden-section search for a minimum of ``fun`` over log10(alpha) in [lo, hi]."""
    g = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = math.log10(lo), math.log10(hi)
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = fun(10 ** c), fun(10 ** d)
    pts = [(10 ** c, fc), (10 ** d, fd)]
    for _ in range(iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = fun(10 ** c)
            pts.append((10 ** c, fc))
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = fun(10 ** d)
            pts.append((10 ** d, fd))
    return pts


def _select(fun: Callable[[float], float], grid: np.ndarray, refine: bool, mode: str) -> AlphaSelection:
    grid = np.asarray(grid, dtype=float)
    if np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise ValueError("alpha grid must be positive and increasing")
    values = np.array([fun(a) for a in grid])
    if not np.any(np.isfinite(values)):
        raise FloatingPointError(f"{mode} objective is not finite anywhere on the alpha grid")
    values_f = np.where(np.isfinite(values), values, np.inf)
    k = int(np.argmin(values_f))
    best_a, best_v = float(grid[k]), float(values_f[k])
    refined = []
    if refine and len(grid) > 1:
        lo = grid[max(k - 1, 0)]
        hi = grid[min(k + 1, len(grid) - 1)]
        refined = _golden_refine(fun, lo, hi)
        for a, v in refined:
            if np.isfinite(v) and v < best_v:
                best_a, best_v = float(a), float(v)
    return AlphaSelection(best_a, grid, values, mode, refined)


DATA_SPACE_LIMIT = 4096


def _use_data_space(model: ForwardModel, prior, limit: int) -> bool:
    return bool(getattr(prior, "has_inverse", False)) and model.n_data <= limit


def gcv_alpha(model: ForwardModel, prior, b: np.ndarray, alpha_grid: Optional[Sequence[float]] = None,
              trace: str = "auto", n_probes: int = 20, seed: int = 0, refine: bool = True,
              tol: float = 1e-6, exact_limit: int = 1024, data_space_limit: int = DATA_SPACE_LIMIT,
              colored: bool = True) -> AlphaSelection:
    """Minimise ||A x_alpha - b||^2 / tr(I - H_alpha)^2 over a log grid, then golden-section refine.

    ``trace`` selects how tr(I - H) is obtained:

    - "exact": dense SVD of A L^{-T} (needs an explicit prior matrix);
    - "data-space": eigendecomposition of A P^{-1} A^T (priors with a direct inverse);
    - "stochastic": Rademacher probes with batched CG;
    - "auto": exact when there are at most ``exact_limit`` unknowns, else
      data-space when the prior has a direct inverse and there are at most
      ``data_space_limit`` data, else stochastic.
    """
    grid = default_alpha_grid() if alpha_grid is None else np.asarray(alpha_grid, dtype=float)
    b = np.asarray(b, dtype=float)
    if trace == "auto":
        if model.shape[1] <= exact_limit:
            trace = "exact"
        elif _use_data_space(model, prior, data_space_limit):
            trace = "data-space"
        else:
            trace = "stochastic"
    if trace == "exact":
        fun = ExactGCV(model, dense_prior(prior), b)
    elif trace == "data-space":
        fun = DataSpaceGCV(model, prior, b)
    elif trace == "stochastic":
        fun = StochasticGCV(model, prior, b, n_probes, seed, tol, colored=colored)
    else:
        raise ValueError(f"unknown trace mode {trace!r}")
    sel = _select(fun, grid, refine, "gcv")
    sel.trace = trace
    return sel


def dense_prior(prior) -> np.ndarray:
    if hasattr(prior, "matrix"):
        return prior.matrix.toarray()
    return prior.dense()


def correlation(a: np.ndarray, b: np.ndarray) -> float:
    a = np.ravel(a) - np.mean(a)
    b = np.ravel(b) - np.mean(b)
    den = np.sqrt((a @ a) * (b @ b))
    return float(a @ b / den) if den > 0 else 0.0


def oracle_alpha(model: ForwardModel, prior, b: np.ndarray, truth: np.ndarray,
                 alpha_grid: Optional[Sequence[float]] = None, refine: bool = True,
                 tol: float = 1e-6, data_space_limit: int = DATA_SPACE_LIMIT) -> AlphaSelection:
    """Alpha maximising the Pearson correlation between the MAP image and ``truth``.

    Candidate estimates come from the closed-form data-space solution when
    the prior has a direct inverse and the data are few enough, otherwise from warm-started CG.
    """
    grid = default_alpha_grid() if alpha_grid is None else np.asarray(alpha_grid, dtype=float)
    truth = np.asarray(truth, dtype=float)
    b = np.asarray(b, dtype=float)
    cache: dict[float, np.ndarray] = {}
    dual = DataSpaceGCV(model, prior, b) if _use_data_space(model, prior, data_space_limit) else None

    def neg_corr(alpha: float) -> float:
        if dual is not None:
            x = dual.estimate(alpha)
        else:
            warm = None
            if cache:
                key = min(cache, key=lambda a: abs(math.log(a) - math.log(alpha)))
                warm = cache[key]
            x = map_estimate(model, prior, b, alpha, tol=tol, x0=warm).x
        cache[float(alpha)] = x
        return -correlation(model.grid.restrict(x), truth)

    sel = _select(neg_corr, grid, refine, "oracle")
    sel.values = -sel.values
    sel.refined = [(a, -v) for a, v in sel.refined]
    sel.trace = "data-space" if dual is not None else "cg"
    return sel


__all__ = [
    "BlurKernel", "ForwardModel", "MapResult", "map_estimate", "dense_map_estimate",
    "AlphaSelection", "ExactGCV", "DataSpaceGCV", "StochasticGCV", "rademacher_probes", "sign_orthogonal", "gcv_alpha", "oracle_alpha",
    "default_alpha_grid", "correlation", "CGNotConvergedError",
]
