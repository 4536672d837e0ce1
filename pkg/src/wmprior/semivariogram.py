"""Empirical semivariograms, Matérn model fitting and anisotropy estimation.

Gridded fields are handled by enumerating integer pixel offsets: every pair
of observed pixels separated by a given offset shares the same (possibly
transformed) lag vector, so the sums over pairs reduce to shifted-array
products. This is exact and costs O(#offsets * N) instead of O(N^2).
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .grid import Field
from numba import njit

from .matern import AnisotropyEstimate, MaternFit, _correlation_scalar, matern_semivariogram, wrap_angle

log = logging.getLogger(__name__)

DEFAULT_MAX_LAG = math.sqrt(2.0) / 10.0
DEFAULT_N_BINS = 25
DEFAULT_NU_CANDIDATES = (1.0, 2.0, 3.0)
DEFAULT_PSI_STEP = math.radians(15.0)


class SemivariogramError(ValueError):
    """Raised when a semivariogram cannot be formed or fitted."""


@dataclass
class EmpiricalSemivariogram:
    lags: np.ndarray
    gamma: np.ndarray
    counts: np.ndarray
    psi: Optional[float] = None
    angular_tolerance: Optional[float] = None

    def __post_init__(self):
        if (self.psi is None) != (self.angular_tolerance is None):
            raise ValueError("psi and angular_tolerance come together")

    def __len__(self) -> int:
        return len(self.lags)

    def rows(self) -> list[tuple[float, float, int, str]]:
        psi = "" if self.psi is None else f"{math.degrees(self.psi):g}"
        return [(float(r), float(g), int(c), psi) for r, g, c in zip(self.lags, self.gamma, self.counts)]


def write_semivariogram_csv(path, semivariograms: Sequence[EmpiricalSemivariogram]) -> None:
    """Write one or more semivariograms as rows ``lag, gamma_hat, pair_count, psi_degrees``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lag", "gamma_hat", "pair_count", "psi_degrees"])
        for sv in semivariograms:
            for lag, g, c, psi in sv.rows():
                w.writerow([repr(lag), repr(g), c, psi])


def read_semivariogram_csv(path) -> list[EmpiricalSemivariogram]:
    groups: dict[str, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            groups.setdefault(row["psi_degrees"], []).append(row)
    out = []
    for key, rows in groups.items():
        psi = None if key == "" else math.radians(float(key))
        out.append(EmpiricalSemivariogram(
            lags=np.array([float(r["lag"]) for r in rows]),
            gamma=np.array([float(r["gamma_hat"]) for r in rows]),
            counts=np.array([int(r["pair_count"]) for r in rows]),
            psi=psi,
            angular_tolerance=None if psi is None else DEFAULT_PSI_STEP / 2,
        ))
    return out


# --------------------------------------------------------------------------- pairs


@dataclass
class _OffsetTable:
    """Per-offset lag length, axial angle, sum of squared differences and pair count."""

    dist: np.ndarray
    angle: np.ndarray
    sumsq: np.ndarray
    count: np.ndarray


def _offset_table(field: Field, max_lag: float, transform: Optional[np.ndarray] = None) -> _OffsetTable:
    h = field.h
    m = np.eye(2) if transform is None else np.asarray(transform, dtype=float)
    smin = np.linalg.svd(m, compute_uv=False).min()
    reach = int(math.floor(max_lag / (smin * h))) + 1
    nr, nc = field.shape
    di, dj = np.meshgrid(np.arange(-reach, reach + 1), np.arange(0, reach + 1), indexing="ij")
    di, dj = di.ravel(), dj.ravel()
    # one representative per unordered pair: dj > 0, or dj == 0 and di > 0
    half = (dj > 0) | ((dj == 0) & (di > 0))
    di, dj = di[half], dj[half]
    vec = np.column_stack([dj * h, -di * h]) @ m.T
    dist = np.hypot(vec[:, 0], vec[:, 1])
    keep = (dist <= max_lag * (1 + 1e-12)) & (np.abs(di) < nr) & (dj < nc)
    di, dj, vec, dist = di[keep], dj[keep], vec[keep], dist[keep]
    angle = np.arctan2(vec[:, 1], vec[:, 0])
    angle = np.where(angle <= -np.pi / 2, angle + np.pi, angle)
    angle = np.where(angle > np.pi / 2, angle - np.pi, angle)

    z = np.where(field.mask, field.values, 0.0)
    w = field.mask.astype(float)
    sumsq = np.empty(len(di))
    count = np.empty(len(di))
    for k, (a, b) in enumerate(zip(di, dj)):
        r0, r1 = max(0, -a), nr - max(0, a)
        c1 = nc - b
        za, wa = z[r0:r1, 0:c1], w[r0:r1, 0:c1]
        zb, wb = z[r0 + a:r1 + a, b:b + c1], w[r0 + a:r1 + a, b:b + c1]
        ww = wa * wb
        count[k] = ww.sum()
        sumsq[k] = (ww * (za - zb) ** 2).sum()
    nz = count > 0
    return _OffsetTable(dist[nz], angle[nz], sumsq[nz], count[nz].astype(np.int64))


def _bin(dist, sumsq, count, max_lag, n_bins, psi=None, tol=None) -> EmpiricalSemivariogram:
    if n_bins < 2:
        raise ValueError("need at least two lag bins")
    edges = np.linspace(0.0, max_lag, n_bins + 1)
    # bins are right-closed; lattice distances that sit on an edge up to rounding stay in the lower bin
    idx = np.clip(np.searchsorted(edges, dist * (1.0 - 1e-12), side="left") - 1, 0, n_bins - 1)
    cnt = np.bincount(idx, weights=count, minlength=n_bins)
    ssq = np.bincount(idx, weights=sumsq, minlength=n_bins)
    sdist = np.bincount(idx, weights=dist * count, minlength=n_bins)
    used = cnt > 0
    if not used.any():
        raise SemivariogramError("no observed pair falls within max_lag")
    return EmpiricalSemivariogram(
        lags=sdist[used] / cnt[used],
        gamma=ssq[used] / (2.0 * cnt[used]),
        counts=cnt[used].astype(np.int64),
        psi=psi,
        angular_tolerance=tol,
    )


def _direction_mask(angle: np.ndarray, psi: float, tol: float) -> np.ndarray:
    """Axial angles within (psi - tol, psi + tol], modulo pi."""
    d = (angle - psi + np.pi / 2) % np.pi - np.pi / 2
    # exact lower edge belongs to the neighbouring direction
    return (d > -tol) & (d <= tol)


def _check_field(field: Field):
    if field.n_observed < 2:
        raise SemivariogramError("field needs at least two observed values")


def empirical_semivariogram(field: Field, max_lag: float = DEFAULT_MAX_LAG,
                            n_bins: int = DEFAULT_N_BINS,
                            transform: Optional[np.ndarray] = None) -> EmpiricalSemivariogram:
    """Omnidirectional empirical semivariogram over observed pixel pairs.

    Masked pixels take part in no pair. ``transform`` is an optional 2x2
    matrix applied to lag vectors (see :func:`isotropy_transform`).
    """
    if max_lag <= 0:
        raise ValueError("max_lag must be positive")
    _check_field(field)
    t = _offset_table(field, max_lag, transform)
    return _bin(t.dist, t.sumsq, t.count, max_lag, n_bins)


def directional_semivariogram(field: Field, psi: float, angular_tol: float = DEFAULT_PSI_STEP / 2,
                              max_lag: float = DEFAULT_MAX_LAG, n_bins: int = DEFAULT_N_BINS,
                              transform: Optional[np.ndarray] = None) -> EmpiricalSemivariogram:
    """Empirical semivariogram restricted to pairs whose axial angle is within ``angular_tol`` of ``psi``."""
    _check_field(field)
    t = _offset_table(field, max_lag, transform)
    return _directional_from_table(t, psi, angular_tol, max_lag, n_bins)


def _directional_from_table(t: _OffsetTable, psi, tol, max_lag, n_bins):
    sel = _direction_mask(t.angle, psi, tol)
    if not sel.any():
        raise SemivariogramError(f"direction {math.degrees(psi):g} deg collects no pairs")
    return _bin(t.dist[sel], t.sumsq[sel], t.count[sel], max_lag, n_bins, psi=psi, tol=tol)


def direction_grid(step: float = DEFAULT_PSI_STEP) -> np.ndarray:
    """Directions in (-pi/2, pi/2] spaced by ``step`` (12 directions for 15 degrees)."""
    k = int(round(math.pi / step))
    return np.array([-math.pi / 2 + step * (i + 1) for i in range(k)])


def pairwise_semivariogram(coords: np.ndarray, values: np.ndarray, max_lag: float, n_bins: int,
                           psi: Optional[float] = None, angular_tol: Optional[float] = None,
                           max_points: int = 3000, seed: int = 0) -> EmpiricalSemivariogram:
    """Semivariogram of scattered points by explicit pair enumeration.

    More than ``max_points`` points are subsampled uniformly at random.
    """
    coords = np.asarray(coords, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(values) < 2:
        raise SemivariogramError("need at least two points")
    if len(values) > max_points:
        keep = np.sort(np.random.default_rng(seed).choice(len(values), max_points, replace=False))
        coords, values = coords[keep], values[keep]
    i, j = np.triu_indices(len(values), k=1)
    d = coords[j] - coords[i]
    dist = np.hypot(d[:, 0], d[:, 1])
    sel = (dist > 0) & (dist <= max_lag * (1 + 1e-12))
    if psi is not None:
        ang = np.arctan2(d[:, 1], d[:, 0])
        sel &= _direction_mask(ang, psi, angular_tol)
    sq = (values[i] - values[j]) ** 2
    return _bin(dist[sel], sq[sel], np.ones(sel.sum()), max_lag, n_bins, psi=psi,
                tol=angular_tol if psi is not None else None)


# --------------------------------------------------------------------------- fitting


def wls_objective(emp: EmpiricalSemivariogram, nugget, sill, nu, ell) -> float:
    """Weighted least-squares criterion sum n(r) / (2 gamma^2) (gamma_hat - gamma)^2."""
    model = matern_semivariogram(emp.lags, nugget, sill, nu, ell)
    denom = np.maximum(model, 1e-12) ** 2
    return float(np.sum(emp.counts / (2.0 * denom) * (emp.gamma - model) ** 2))


@njit(cache=True)
def _wls_kernel(lags, gamma, counts, nugget, sill, nu, lognorm, ell):
    total = 0.0
    for i in range(lags.size):
        model = nugget + (sill - nugget) * (1.0 - _correlation_scalar(lags[i] / ell, nu, lognorm))
        d = max(model, 1e-12)
        total += counts[i] / (2.0 * d * d) * (gamma[i] - model) ** 2
    return total


def _fit_fixed_nu(emp: EmpiricalSemivariogram, nu: float, n_starts: int = 5):
    lags, g = emp.lags, emp.gamma
    counts = emp.counts.astype(float)
    lognorm = (nu - 1.0) * math.log(2.0) + math.lgamma(nu)
    scale = max(float(np.max(g)), 1e-300)
    ell_lo = 0.5 * float(lags[0])
    ell_hi = 10.0 * float(lags[-1])
    sill0 = float(np.average(g[len(g) // 2:], weights=emp.counts[len(g) // 2:]))
    sill0 = max(sill0, 1e-6 * scale)
    nug0 = max(0.5 * float(g[0]), 1e-3 * sill0)
    nug0 = min(nug0, 0.9 * sill0)

    def unpack(p):
        return math.exp(p[2]), math.exp(p[2]) + math.exp(p[1]), math.exp(p[0])

    def obj(p):
        if not (-700 < p[0] < 700 and -700 < p[1] < 700 and -700 < p[2] < 700):
            return 1e300
        nugget, sill, ell = unpack(p)
        if not ell_lo <= ell <= ell_hi:
            return 1e300
        val = _wls_kernel(lags, g, counts, nugget, sill, nu, lognorm, ell)
        return val if math.isfinite(val) else 1e300

    best = None
    fracs = np.geomspace(0.02, 0.5, n_starts)
    for f in fracs:
        ell0 = float(np.clip(f * lags[-1] / math.sqrt(8 * nu), ell_lo * 1.01, ell_hi * 0.99))
        p0 = np.array([math.log(ell0), math.log(max(sill0 - nug0, 1e-6 * sill0)), math.log(nug0)])
        opts = {"xatol": 1e-9, "fatol": 1e-12 * max(obj(p0), 1.0), "maxiter": 4000, "maxfev": 8000}
        res = minimize(obj, p0, method="Nelder-Mead", options=opts)
        res = minimize(obj, res.x, method="Nelder-Mead", options=opts)
        if best is None or res.fun < best.fun:
            best = res
    nugget, sill, ell = unpack(best.x)
    return MaternFit(nugget=nugget, sill=sill, nu=float(nu), ell=ell, wls=float(best.fun))


def fit_matern_semivariogram(emp: EmpiricalSemivariogram,
                             nu_candidates: Sequence[float] = DEFAULT_NU_CANDIDATES,
                             n_starts: int = 5) -> MaternFit:
    """Fit nugget, sill and range for every candidate smoothness; keep the smallest WLS value."""
    if len(emp) < 4:
        raise SemivariogramError(f"need at least 4 lag bins to fit, got {len(emp)}")
    if not len(nu_candidates):
        raise ValueError("nu_candidates is empty")
    if float(np.max(emp.gamma)) <= 0:
        raise SemivariogramError("degenerate field: semivariogram is identically zero")
    fits = []
    for nu in nu_candidates:
        try:
            fit = _fit_fixed_nu(emp, float(nu), n_starts)
        except (ValueError, FloatingPointError) as exc:
            log.debug("fit failed for nu=%s: %s", nu, exc)
            continue
        if math.isfinite(fit.wls) and fit.wls < 1e299:
            fits.append(fit)
    if not fits:
        raise SemivariogramError("Matérn fit failed for every smoothness candidate")
    return min(fits, key=lambda f: f.wls)


# --------------------------------------------------------------------------- anisotropy


def loess(x: np.ndarray, y: np.ndarray, x_eval: np.ndarray, span: float = 0.5) -> np.ndarray:
    """Tricube-weighted local linear regression."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    k = max(2, int(math.ceil(span * len(x))))
    out = np.empty(len(x_eval))
    for i, x0 in enumerate(x_eval):
        d = np.abs(x - x0)
        radius = np.partition(d, k - 1)[k - 1] * 1.000001 + 1e-300
        w = np.clip(1.0 - (d / radius) ** 3, 0.0, None) ** 3
        sw = w.sum()
        xm = (w * x).sum() / sw
        ym = (w * y).sum() / sw
        sxx = (w * (x - xm) ** 2).sum()
        slope = (w * (x - xm) * (y - ym)).sum() / sxx if sxx > 0 else 0.0
        out[i] = ym + slope * (x0 - xm)
    return out


def first_crossing(x: np.ndarray, y: np.ndarray, level: float, y0: float = 0.0) -> Optional[float]:
    """Smallest x where the piecewise-linear curve (0, y0), (x_i, y_i) reaches ``level``."""
    xs = np.concatenate([[0.0], x])
    ys = np.concatenate([[y0], y])
    above = np.nonzero(ys >= level)[0]
    if len(above) == 0:
        return None
    k = above[0]
    if k == 0:
        return 0.0
    x0, x1, a, b = xs[k - 1], xs[k], ys[k - 1], ys[k]
    return float(x0 + (level - a) * (x1 - x0) / (b - a)) if b != a else float(x1)


@dataclass
class DirectionalRangeProfile:
    psi: np.ndarray
    range_at_crit: np.ndarray
    gamma_crit: float
    semivariograms: list
    curves: list


def isotropy_transform(est: AnisotropyEstimate) -> np.ndarray:
    """Rotate by -theta, then stretch the new y-axis by tau."""
    c, s = math.cos(est.theta), math.sin(est.theta)
    return np.array([[c, s], [-est.tau * s, est.tau * c]])


def isotropize_coordinates(coords, est: AnisotropyEstimate) -> np.ndarray:
    """Map anisotropic coordinates w to isotropic ones u = M w."""
    return np.asarray(coords, dtype=float) @ isotropy_transform(est).T


def anisotropize_coordinates(coords, est: AnisotropyEstimate) -> np.ndarray:
    """Inverse of :func:`isotropize_coordinates`."""
    c, s = math.cos(est.theta), math.sin(est.theta)
    inv = np.array([[c, -s / est.tau], [s, c / est.tau]])
    return np.asarray(coords, dtype=float) @ inv.T


def directional_range_profile(field: Field, gamma_crit: float, psi_step: float = DEFAULT_PSI_STEP,
                              max_lag: float = 0.2, n_bins: int = DEFAULT_N_BINS, span: float = 0.5,
                              n_eval: int = 200, nugget: float = 0.0,
                              transform: Optional[np.ndarray] = None) -> DirectionalRangeProfile:
    """Loess-smoothed directional semivariograms and their first crossing of ``gamma_crit``."""
    _check_field(field)
    t = _offset_table(field, max_lag, transform)
    psis = direction_grid(psi_step)
    ranges, svs, curves = [], [], []
    for psi in psis:
        sv = _directional_from_table(t, psi, psi_step / 2, max_lag, n_bins)
        xe = np.linspace(sv.lags[0], sv.lags[-1], n_eval)
        ye = loess(sv.lags, sv.gamma, xe, span) if len(sv) >= 3 else np.interp(xe, sv.lags, sv.gamma)
        cross = first_crossing(xe, ye, gamma_crit, y0=min(nugget, gamma_crit))
        if cross is None:
            raise SemivariogramError(
                f"loess curve at psi={math.degrees(psi):g} deg never reaches gamma_crit={gamma_crit:.4g} "
                f"within max_lag={max_lag:g}")
        ranges.append(cross)
        svs.append(sv)
        curves.append((xe, ye))
    return DirectionalRangeProfile(psis, np.array(ranges), gamma_crit, svs, curves)


def estimate_anisotropy(field: Field, psi_step: float = DEFAULT_PSI_STEP,
                        gamma_crit_fraction: float = 0.75, max_lag: float = 0.2,
                        n_bins: int = DEFAULT_N_BINS, nu_candidates=DEFAULT_NU_CANDIDATES,
                        span: float = 0.5, transform: Optional[np.ndarray] = None,
                        return_profile: bool = False):
    """Estimate the direction of maximal correlation and the range ratio.

    ``gamma_crit`` sits ``gamma_crit_fraction`` of the way from nugget to sill of an
    omnidirectional Matérn pre-fit. ``ell1``/``ell2`` of the result are the crossing
    distances along ``theta`` and the perpendicular direction.
    """
    if not 0 < gamma_crit_fraction < 1:
        raise ValueError("gamma_crit_fraction must lie in (0, 1)")
    omni = empirical_semivariogram(field, max_lag, n_bins, transform)
    pre = fit_matern_semivariogram(omni, nu_candidates)
    gamma_crit = pre.nugget + gamma_crit_fraction * (pre.sill - pre.nugget)
    prof = directional_range_profile(field, gamma_crit, psi_step, max_lag, n_bins, span,
                                     nugget=pre.nugget, transform=transform)
    k = int(np.argmax(prof.range_at_crit))
    theta = float(prof.psi[k])
    perp = wrap_angle(theta + math.pi / 2)
    kp = int(np.argmin(np.abs(((prof.psi - perp) + math.pi / 2) % math.pi - math.pi / 2)))
    r1, r2 = float(prof.range_at_crit[k]), float(prof.range_at_crit[kp])
    if r2 > r1:
        theta, r1, r2 = float(prof.psi[kp]), r2, r1
    if r2 <= 0:
        raise SemivariogramError("perpendicular crossing distance is zero")
    est = AnisotropyEstimate.from_lengths(theta, r1, r2)
    return (est, prof) if return_profile else est
