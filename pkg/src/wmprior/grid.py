"""Uniform grids on the unit square, their extensions, and masked fields.

Arrays are indexed ``[row, col]``. Physical coordinates put ``x`` along
columns and ``y`` upward, i.e. against the row index, so angles measured
counter-clockwise from the x-axis look counter-clockwise in an image shown
with row 0 on top.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class Grid2D:
    """``n`` x ``n`` mesh on [0, 1]^2 with step ``h = 1/n``, embedded in [1-a, a]^2."""

    n: int
    a: float = 1.0

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("grid needs at least 2 points per side")
        if self.a < 1.0:
            raise ValueError(f"extension factor must be >= 1, got {self.a}")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def extended_n(self) -> int:
        return max(self.n, int(round((2.0 * self.a - 1.0) * self.n)))

    @property
    def offset(self) -> int:
        return (self.extended_n - self.n) // 2

    @property
    def size(self) -> int:
        return self.n * self.n

    @property
    def extended_size(self) -> int:
        return self.extended_n ** 2

    @property
    def interior(self) -> tuple[slice, slice]:
        """Slices selecting the original domain inside the extended array."""
        s = slice(self.offset, self.offset + self.n)
        return s, s

    def restrict(self, x: np.ndarray) -> np.ndarray:
        """Extended-domain array (2-D or flat) -> original-domain 2-D array."""
        x = np.asarray(x)
        m = self.extended_n
        if x.ndim == 1:
            x = x.reshape(m, m)
        return x[self.interior]

    def embed(self, x: np.ndarray) -> np.ndarray:
        """Zero-extend an original-domain array to the extended domain (adjoint of restrict)."""
        x = np.asarray(x)
        if x.ndim == 1:
            x = x.reshape(self.n, self.n)
        out = np.zeros((self.extended_n, self.extended_n), dtype=x.dtype)
        out[self.interior] = x
        return out

    def interior_indices(self) -> np.ndarray:
        """Flat extended-domain indices of the original-domain pixels (row-major)."""
        m = self.extended_n
        rows = np.arange(self.n) + self.offset
        return (rows[:, None] * m + rows[None, :]).ravel()

    def coordinates(self, extended: bool = False) -> np.ndarray:
        """(N, 2) array of physical (x, y) pixel positions, original-domain origin."""
        m = self.extended_n if extended else self.n
        shift = self.offset if extended else 0
        ii, jj = np.meshgrid(np.arange(m) - shift, np.arange(m) - shift, indexing="ij")
        return np.column_stack([jj.ravel() * self.h, -ii.ravel() * self.h])

    def with_extension(self, a: float) -> "Grid2D":
        return Grid2D(self.n, a)


@dataclass
class Field:
    """Scalar values on a square grid with an observation mask (True = observed)."""

    values: np.ndarray
    mask: Optional[np.ndarray] = None
    h: Optional[float] = None
    band: str = ""
    extra: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError("field values must be a 2-D array")
        if self.mask is None:
            self.mask = np.ones(self.values.shape, dtype=bool)
        else:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.values.shape:
                raise ValueError("mask shape does not match values")
        if self.h is None:
            self.h = 1.0 / self.values.shape[0]
        if not np.all(np.isfinite(self.values[self.mask])):
            raise ValueError("observed field values must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())

    def observed(self) -> np.ndarray:
        return self.values[self.mask]

    def coordinates(self) -> np.ndarray:
        """(N, 2) physical (x, y) positions of every pixel, row-major."""
        ii, jj = np.indices(self.shape)
        return np.column_stack([jj.ravel() * self.h, -ii.ravel() * self.h])

    def with_values(self, values: np.ndarray, mask: Optional[np.ndarray] = None) -> "Field":
        return Field(values, self.mask.copy() if mask is None else mask, self.h, self.band)

    def restricted_to(self, region: np.ndarray) -> "Field":
        """Same values, observation mask intersected with ``region``."""
        return Field(self.values, self.mask & np.asarray(region, dtype=bool), self.h, self.band)
