"""Piecewise prior built from per-region Whittle-Matérn precisions.

For disjoint regions with indicator diagonals D_i and full-domain
precisions P_i, the combined operator is

    P = sum_i D_i (P_i - P_i E_i (E_i^T P_i E_i)^{-1} E_i^T P_i) D_i,

where E_i selects the pixels outside region i. Each summand is the Schur
complement of P_i onto region i, i.e. the inverse of the region-i block of
P_i^{-1}, so P equals the inverse of the block-diagonal covariance.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from .grid import Grid2D
from .linalg import CholeskyFactor, NotPositiveDefiniteError, sparse_cholesky
from .spde import PrecisionSpec, PriorError, PriorOperator, assemble_precision

log = logging.getLogger(__name__)


@dataclass
class RegionPartition:
    """Integer labels 0..k-1 on the original n x n domain."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2 or lab.shape[0] != lab.shape[1]:
            raise ValueError("region labels must be a square 2-D array")
        if not np.issubdtype(lab.dtype, np.integer):
            if not np.all(lab == np.round(lab)):
                raise ValueError("region labels must be integers")
            lab = lab.astype(int)
        uniq = np.unique(lab)
        # relabel to 0..k-1 preserving order
        self.labels = np.searchsorted(uniq, lab)
        self.values = uniq

    @property
    def k(self) -> int:
        return len(self.values)

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    def masks(self) -> list[np.ndarray]:
        return [self.labels == i for i in range(self.k)]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.k)

    def extended_labels(self, grid: Grid2D) -> np.ndarray:
        """Labels on the extended domain; outside pixels take the nearest region's label."""
        if grid.n != self.n:
            raise ValueError("partition and grid sizes differ")
        m = grid.extended_n
        known = np.zeros((m, m), dtype=bool)
        known[grid.interior] = True
        full = np.zeros((m, m), dtype=int)
        full[grid.interior] = self.labels
        _, (ri, ci) = ndimage.distance_transform_edt(~known, return_indices=True)
        return full[ri, ci]


@dataclass
class _RegionBlock:
    mask: np.ndarray  # bool over extended pixels (flat)
    precision: sp.csr_matrix
    outside: np.ndarray  # flat indices of pixels not in the region
    cross: sp.csr_matrix | None  # P_i[:, outside]
    factor: CholeskyFactor | None  # Cholesky of P_i[outside, outside]


@dataclass
class RegionalOperator:
    """Matrix-free combined precision on the extended grid."""

    grid: Grid2D
    specs: list
    blocks: list = field(repr=False)
    extended_labels: np.ndarray = field(repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        m = self.grid.extended_size
        return m, m

    @property
    def k(self) -> int:
        return len(self.blocks)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        """P v for a flat vector or a batch of shape (k, N)."""
        v = np.asarray(v, dtype=float)
        if v.shape[-1] != self.shape[0]:
            raise ValueError(f"vector length {v.shape[-1]} does not match operator size {self.shape[0]}")
        cols = v.T  # (N,) or (N, k)
        out = np.zeros_like(cols)
        for blk in self.blocks:
            sel = blk.mask[:, None] if cols.ndim == 2 else blk.mask
            y = blk.precision @ np.where(sel, cols, 0.0)  # y_i = P_i D_i v
            if blk.factor is not None:
                z = blk.factor.solve(y[blk.outside])  # R_i \ (R_i^T \ y_i(ind))
                y = y - blk.cross @ z  # P_i z_i, z_i scattered onto ind
            out += np.where(sel, y, 0.0)  # D_i (...)
        return out.T

    __call__ = matvec

    @cached_property
    def _priors(self) -> list:
        return [PriorOperator(s) for s in self.specs]

    @property
    def has_inverse(self) -> bool:
        """True when every regional prior is FFT-diagonal, so the covariance is cheap to apply."""
        return all(p.spectral for p in self._priors)

    def solve(self, v: np.ndarray) -> np.ndarray:
        """P^{-1} v = sum_i D_i C_i D_i v with C_i = P_i^{-1} applied by FFT."""
        v = np.asarray(v, dtype=float)
        if not self.has_inverse:
            raise PriorError("the regional covariance is available only for periodic priors")
        out = np.zeros_like(v)
        for blk, prior in zip(self.blocks, self._priors):
            out += np.where(blk.mask, prior.solve(np.where(blk.mask, v, 0.0)), 0.0)
        return out

    def diagonal(self) -> np.ndarray:
        """diag(sum_i D_i P_i D_i), used as a Jacobi preconditioner."""
        d = np.zeros(self.shape[0])
        for blk in self.blocks:
            d[blk.mask] = blk.precision.diagonal()[blk.mask]
        return d

    def dense(self) -> np.ndarray:
        """Explicit matrix, for small grids only."""
        return self.matvec(np.eye(self.shape[0])).T


def build_regional_operator(partition: RegionPartition, specs: Sequence[PrecisionSpec],
                            warn_fraction: float = 0.5) -> RegionalOperator:
    """Assemble per-region precisions and factor their off-region blocks.

    All specs must share one grid (same ``n`` and extension). A region whose
    off-region block holds more than ``warn_fraction`` of the extended pixels
    is logged as a warning, since that block is what gets factored.
    """
    if len(specs) != partition.k:
        raise PriorError(f"{partition.k} regions but {len(specs)} prior specs")
    grid = specs[0].grid
    if any(s.grid != grid for s in specs):
        raise PriorError("all regional priors must share the same extended grid")
    ext = partition.extended_labels(grid).ravel()
    total = ext.size
    blocks = []
    for i, spec in enumerate(specs):
        prec = assemble_precision(spec)
        mask = ext == i
        outside = np.flatnonzero(~mask)
        if not mask.any():
            raise PriorError(f"region {i} is empty")
        if len(outside) > warn_fraction * total:
            log.warning("region %d covers %d of %d extended pixels; its off-region factor is large",
                        i, int(mask.sum()), total)
        if len(outside):
            cross = prec[:, outside].tocsr()
            try:
                factor = sparse_cholesky(prec[outside][:, outside])
            except NotPositiveDefiniteError as exc:
                raise NotPositiveDefiniteError(
                    f"Cholesky of the off-region block failed for region {i}: {exc}") from exc
        else:
            cross, factor = None, None
        blocks.append(_RegionBlock(mask, prec, outside, cross, factor))
    return RegionalOperator(grid, list(specs), blocks, ext.reshape(grid.extended_n, -1))


def dense_regional_precision(partition: RegionPartition, specs: Sequence[PrecisionSpec]) -> np.ndarray:
    """Reference: inverse of the block-diagonal covariance sum_i D_i P_i^{-1} D_i."""
    grid = specs[0].grid
    ext = partition.extended_labels(grid).ravel()
    cov = np.zeros((grid.extended_size,) * 2)
    for i, spec in enumerate(specs):
        c = np.linalg.inv(assemble_precision(spec).toarray())
        d = (ext == i).astype(float)
        cov += d[:, None] * c * d[None, :]
    return np.linalg.inv(cov)
