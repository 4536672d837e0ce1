"""Sparse Cholesky factors and preconditioned conjugate gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


class CGNotConvergedError(RuntimeError):
    def __init__(self, message: str, residuals: list[float]):
        super().__init__(message)
        self.residuals = residuals


@dataclass
class CholeskyFactor:
    """A[perm][:, perm] = R.T @ R with R upper triangular.

    The factor comes from SuperLU run without pivoting under a symmetric
    fill-reducing (minimum degree on A + A^T) ordering, which for an SPD
    matrix is an LDL^T factorisation; R = sqrt(D) L^T.
    """

    perm: np.ndarray
    lu: object

    @property
    def n(self) -> int:
        return len(self.perm)

    @property
    def upper(self) -> sp.csr_matrix:
        u = self.lu.U.tocsr()
        d = u.diagonal()
        return sp.diags(1.0 / np.sqrt(d)) @ u

    @property
    def nnz(self) -> int:
        return int(self.lu.U.nnz)

    def solve(self, b: np.ndarray) -> np.ndarray:
        """A^{-1} b via forward then backward substitution with the stored factor."""
        return self.lu.solve(np.asarray(b, dtype=float))


def sparse_cholesky(a: sp.spmatrix, ordering: str = "MMD_AT_PLUS_A") -> CholeskyFactor:
    a = sp.csc_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise ValueError("Cholesky needs a square matrix")
    try:
        lu = splu(a, permc_spec=ordering, diag_pivot_thresh=0.0,
                  options={"SymmetricMode": True})
    except RuntimeError as exc:  # exactly singular
        raise NotPositiveDefiniteError(str(exc)) from exc
    if not np.array_equal(lu.perm_r, lu.perm_c):
        raise NotPositiveDefiniteError("factorisation pivoted; matrix is not SPD")
    d = lu.U.diagonal()
    if np.any(~np.isfinite(d)) or np.any(d <= 0):
        raise NotPositiveDefiniteError("non-positive pivot; matrix is not positive definite")
    perm = np.empty_like(lu.perm_c)
    perm[lu.perm_c] = np.arange(len(perm))
    return CholeskyFactor(perm=perm, lu=lu)


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residuals: list = field(default_factory=list)
    converged: bool = True


def pcg(matvec: Callable[[np.ndarray], np.ndarray], b: np.ndarray, precond: Optional[Callable] = None,
        tol: float = 1e-8, maxiter: int = 2000, x0: Optional[np.ndarray] = None,
        raise_on_failure: bool = True) -> CGResult:
    """Preconditioned conjugate gradients for SPD ``matvec``.

    Stops when ||b - A x|| <= tol ||b||. ``b`` may be a batch of shape
    (k, N); the k systems then run in lockstep (``matvec`` and ``precond``
    must accept batches), each column freezing once it converges, and the
    recorded residual is the worst relative residual of the batch.
    """
    b = np.asarray(b, dtype=float)
    single = b.ndim == 1
    bb = b[None, :] if single else b
    nb = np.linalg.norm(bb, axis=1)
    nb_safe = np.where(nb > 0, nb, 1.0)
    x = np.zeros_like(bb) if x0 is None else np.array(np.reshape(x0, bb.shape), dtype=float)
    r = bb - matvec(x.ravel() if single else x).reshape(bb.shape) if x0 is not None else bb.copy()

    def pre(v):
        if precond is None:
            return v
        return precond(v.ravel() if single else v).reshape(v.shape)

    z = pre(r)
    p = z.copy()
    rz = np.einsum("ij,ij->i", r, z)
    rel = np.linalg.norm(r, axis=1) / nb_safe
    hist = [float(rel.max())]
    active = rel > tol
    it = 0
    while it < maxiter and active.any():
        it += 1
        ap = matvec(p.ravel() if single else p).reshape(bb.shape)
        pap = np.einsum("ij,ij->i", p, ap)
        if np.any(pap[active] <= 0):
            raise NotPositiveDefiniteError("operator is not positive definite along a CG direction")
        step = np.where(active, rz / np.where(active, pap, 1.0), 0.0)
        x += step[:, None] * p
        r -= step[:, None] * ap
        rel = np.linalg.norm(r, axis=1) / nb_safe
        hist.append(float(rel.max()))
        active = rel > tol
        z = pre(r)
        rz_new = np.einsum("ij,ij->i", r, z)
        beta = np.where(active, rz_new / np.where(rz != 0, rz, 1.0), 0.0)
        p = z + beta[:, None] * p
        rz = rz_new
    out = x[0] if single else x
    if not active.any():
        return CGResult(out, it, hist)
    if raise_on_failure:
        raise CGNotConvergedError(
            f"CG did not reach tol={tol:g} in {maxiter} iterations (residual {hist[-1]:.3g})", hist)
    return CGResult(out, it, hist, converged=False)
