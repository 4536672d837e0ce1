"""Matérn correlation functions and the modified Bessel function K_nu.

K_nu is evaluated with Temme's series for x < 2 and Steed's continued
fraction for x >= 2, both at fractional order |mu| <= 1/2, followed by the
(stable) forward recurrence in the order. Everything is vectorised over the
argument; the order is a scalar.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

_EPS = 1e-16
_MAXIT = 10_000
_XMIN = 2.0

# Taylor coefficients of 1/Gamma(1 + z) around z = 0 (Abramowitz & Stegun 6.1.34).
_RGAMMA = np.array([
    1.0, 0.5772156649015329, -0.6558780715202538, -0.0420026350340952,
    0.1665386113822915, -0.0421977345555443, -0.0096219715278770,
    0.0072189432466630, -0.0011651675918591, -0.0002152416741149,
    0.0001280502823882, -0.0000201348547807, -0.0000012504934821,
    0.0000011330272320, -0.0000002056338417, 0.0000000061160950,
    0.0000000050020075, -0.0000000011812746, 0.0000000001043427,
    0.0000000000077823, -0.0000000000036968, 0.0000000000005100,
    -0.0000000000000206, -0.0000000000000054, 0.0000000000000014,
    0.0000000000000001,
])


@njit(cache=True)
def _temme_gammas(mu):
    """gam1, gam2, 1/Gamma(1+mu), 1/Gamma(1-mu) for |mu| <= 1/2."""
    # f(z) = sum c_j z^j;  gam1 = (f(-mu) - f(mu)) / (2 mu),  gam2 = (f(-mu) + f(mu)) / 2
    gam1 = 0.0
    gam2 = 0.0
    p = 1.0
    for j in range(_RGAMMA.size):
        if j % 2 == 0:
            gam2 += _RGAMMA[j] * p
        else:
            gam1 -= _RGAMMA[j] * p
            p *= mu * mu
    return gam1, gam2, gam2 - mu * gam1, gam2 + mu * gam1


@njit(cache=True)
def _k_small(mu, x):
    """K_mu(x), K_{mu+1}(x) by Temme's series, 0 < x < 2."""
    x2 = 0.5 * x
    pimu = math.pi * mu
    fact = 1.0 if abs(pimu) < _EPS else pimu / math.sin(pimu)
    d = math.log(2.0) - math.log(x)  # log(2/x); 0.5 * x underflows for subnormal x
    e = mu * d
    fact2 = 1.0 if abs(e) < _EPS else math.sinh(e) / e
    gam1, gam2, gampl, gammi = _temme_gammas(mu)
    ff = fact * (gam1 * math.cosh(e) + gam2 * fact2 * d)
    total = ff
    ee = math.exp(e)
    p = 0.5 * ee / gampl
    q = 0.5 / (ee * gammi)
    c = 1.0
    dd = x2 * x2
    total1 = p
    mu2 = mu * mu
    for i in range(1, _MAXIT):
        ff = (i * ff + p + q) / (i * i - mu2)
        c *= dd / i
        p /= i - mu
        q /= i + mu
        delta = c * ff
        total += delta
        total1 += c * (p - i * ff)
        if abs(delta) < abs(total) * _EPS:
            break
    return total, total1 * 2.0 / x


@njit(cache=True)
def _k_large(mu, x):
    """K_mu(x), K_{mu+1}(x) by Steed's continued fraction, x >= 2."""
    mu2 = mu * mu
    b = 2.0 * (1.0 + x)
    d = 1.0 / b
    h = d
    delh = d
    q1 = 0.0
    q2 = 1.0
    a1 = 0.25 - mu2
    q = a1
    c = a1
    a = -a1
    s = 1.0 + q * delh
    for i in range(2, _MAXIT):
        a -= 2 * (i - 1)
        c = -a * c / i
        qnew = (q1 - b * q2) / a
        q1 = q2
        q2 = qnew
        q += c * qnew
        b += 2.0
        d = 1.0 / (b + a * d)
        delh = (b * d - 1.0) * delh
        h += delh
        dels = q * delh
        s += dels
        if abs(dels / s) < _EPS:
            break
    h = a1 * h
    kmu = math.sqrt(math.pi / (2.0 * x)) * math.exp(-x) / s
    return kmu, kmu * (mu + x + 0.5 - h) / x


@njit(cache=True)
def _bessel_k_scalar(nu, x):
    nl = int(nu + 0.5)
    mu = nu - nl
    if x < _XMIN:
        kmu, k1 = _k_small(mu, x)
    else:
        kmu, k1 = _k_large(mu, x)
    for i in range(1, nl + 1):
        knext = (mu + i) * 2.0 / x * k1 + kmu
        kmu = k1
        k1 = knext
    return kmu


@njit(cache=True)
def _bessel_k_array(nu, x):
    out = np.empty_like(x)
    for i in range(x.size):
        out[i] = _bessel_k_scalar(nu, x[i])
    return out


@njit(cache=True)
def _correlation_scalar(x, nu, lognorm):
    """Matérn correlation at scaled lag x = r / ell with precomputed log(2^(nu-1) Gamma(nu))."""
    if x <= 0.0:
        return 1.0
    k = _bessel_k_scalar(nu, x)
    if k == 0.0:
        return 0.0
    val = math.exp(nu * math.log(x) - lognorm + math.log(k))
    return min(val, 1.0)


def bessel_k(nu, x):
    """Modified Bessel function of the second kind, K_nu(x).

    Parameters
    ----------
    nu : float
        Order (scalar). K_nu = K_{-nu}, so the sign is ignored.
    x : float or array_like
        Argument, strictly positive and finite.

    Returns
    -------
    float or np.ndarray
        K_nu(x), with the shape of ``x``.
    """
    nu = float(nu)
    if not math.isfinite(nu):
        raise ValueError(f"order must be finite, got {nu}")
    xa = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(xa)) or np.any(xa <= 0):
        raise ValueError("bessel_k requires finite x > 0")
    out = _bessel_k_array(abs(nu), np.ascontiguousarray(xa).ravel()).reshape(xa.shape)
    return float(out) if out.ndim == 0 else out


def matern_correlation(r, nu: float, ell: float):
    """Matérn correlation (r/ell)^nu K_nu(r/ell) / (2^(nu-1) Gamma(nu)).

    Returns 1 at r = 0, where the closed form is 0/0.
    """
    if not nu > 0 or not ell > 0:
        raise ValueError(f"need nu > 0 and ell > 0, got nu={nu}, ell={ell}")
    ra = np.asarray(r, dtype=float)
    if np.any(ra < 0) or not np.all(np.isfinite(ra)):
        raise ValueError("lag distances must be finite and non-negative")
    xs = np.atleast_1d(ra / ell).ravel()
    out = np.ones_like(xs)
    pos = xs > 0
    if pos.any():
        xp = xs[pos]
        lognorm = (nu - 1.0) * math.log(2.0) + math.lgamma(nu)
        with np.errstate(over="ignore", invalid="ignore", under="ignore"):
            val = np.exp(nu * np.log(xp) - lognorm) * bessel_k(nu, xp)
        val = np.where(np.isfinite(val), val, 1.0)
        out[pos] = np.minimum(val, 1.0)
    out = out.reshape(ra.shape)
    return float(out) if out.ndim == 0 else out


def matern_covariance(r, sill: float, nu: float, ell: float):
    return sill * matern_correlation(r, nu, ell)


def matern_semivariogram(r, nugget: float, sill: float, nu: float, ell: float):
    """Matérn semivariogram model: 0 at r = 0, nugget + (sill - nugget)(1 - corr) for r > 0."""
    ra = np.asarray(r, dtype=float)
    gam = nugget + (sill - nugget) * (1.0 - matern_correlation(ra, nu, ell))
    return np.where(ra > 0, gam, 0.0) if np.ndim(gam) else (float(gam) if ra > 0 else 0.0)


def correlation_distance(level: float, nu: float, ell: float, tol: float = 1e-12) -> float:
    """Distance r at which matern_correlation(r, nu, ell) equals ``level``.

    Bisection on [1e-8 ell, 50 ell sqrt(8 nu)]; the correlation is monotone.
    """
    if not 0 < level < 1:
        raise ValueError(f"correlation level must lie in (0, 1), got {level}")
    lo = 1e-8 * ell
    hi = 50.0 * ell * math.sqrt(8.0 * nu)
    while matern_correlation(hi, nu, ell) > level:
        hi *= 2.0
    if matern_correlation(lo, nu, ell) <= level:
        return lo
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        f = matern_correlation(mid, nu, ell) - level
        if f > 0:
            lo = mid
        else:
            hi = mid
        if abs(f) < tol or hi - lo <= 1e-15 * hi:
            break
    return 0.5 * (lo + hi)


def practical_range(nu: float, ell: float) -> float:
    """Distance at which the Matérn correlation drops to 0.05."""
    return correlation_distance(0.05, nu, ell)


def range_approximation(nu: float, ell: float) -> float:
    """The shorthand range ell * sqrt(8 nu).

    The Matérn correlation there is roughly 0.14 for nu in {1, 2, 3}.
    """
    return ell * math.sqrt(8.0 * nu)


def directional_range(psi, theta: float, ell1: float, ell2: float):
    """Effective Matérn range in direction ``psi`` for a geometrically anisotropic field."""
    dpsi = np.asarray(psi, dtype=float) - theta
    return ell1 / np.sqrt(np.cos(dpsi) ** 2 + (ell1 / ell2) ** 2 * np.sin(dpsi) ** 2)


@dataclass(frozen=True)
class MaternFit:
    """Fitted Matérn semivariogram parameters and the weighted least-squares objective."""

    nugget: float
    sill: float
    nu: float
    ell: float
    wls: float = 0.0

    def __post_init__(self):
        if not (self.ell > 0 and self.nu > 0):
            raise ValueError("MaternFit needs ell > 0 and nu > 0")
        if self.nugget < 0 or self.sill < self.nugget:
            raise ValueError("MaternFit needs 0 <= nugget <= sill")

    def semivariogram(self, r):
        return matern_semivariogram(r, self.nugget, self.sill, self.nu, self.ell)

    @property
    def practical_range(self) -> float:
        return practical_range(self.nu, self.ell)

    def as_dict(self) -> dict:
        return {"nugget": self.nugget, "sill": self.sill, "nu": self.nu,
                "ell": self.ell, "wls": self.wls}


@dataclass(frozen=True)
class AnisotropyEstimate:
    """Direction of maximal correlation ``theta`` (radians) and the range ratio ``tau``.

    ``ell1`` and ``ell2`` are the lengths along ``theta`` and perpendicular to it;
    ``tau = ell1 / ell2 >= 1``.
    """

    theta: float
    tau: float
    ell1: float
    ell2: float

    def __post_init__(self):
        if not (self.ell1 > 0 and self.ell2 > 0):
            raise ValueError("anisotropy lengths must be positive")
        if self.ell1 < self.ell2 * (1 - 1e-12):
            raise ValueError("ell1 must be the larger length")
        if abs(self.tau - self.ell1 / self.ell2) > 1e-12 * self.tau:
            raise ValueError("tau must equal ell1 / ell2")
        if not -math.pi / 2 < self.theta <= math.pi / 2 + 1e-15:
            raise ValueError("theta must lie in (-pi/2, pi/2]")

    @classmethod
    def from_lengths(cls, theta: float, ell1: float, ell2: float) -> "AnisotropyEstimate":
        return cls(theta=wrap_angle(theta), tau=ell1 / ell2, ell1=ell1, ell2=ell2)

    @classmethod
    def isotropic(cls, ell: float = 1.0) -> "AnisotropyEstimate":
        return cls(theta=0.0, tau=1.0, ell1=ell, ell2=ell)

    @property
    def theta_degrees(self) -> float:
        return math.degrees(self.theta)


def wrap_angle(theta: float) -> float:
    """Map an axis direction onto (-pi/2, pi/2]."""
    t = math.fmod(theta, math.pi)
    if t <= -math.pi / 2:
        t += math.pi
    elif t > math.pi / 2:
        t -= math.pi
    return t


def anisotropic_matern_correlation(r_w, psi, est: AnisotropyEstimate, nu: float):
    """Matérn correlation at distance ``r_w`` along direction ``psi`` of an anisotropic field."""
    zeta = directional_range(psi, est.theta, est.ell1, est.ell2)
    ra = np.asarray(r_w, dtype=float)
    if np.ndim(zeta) == 0:
        return matern_correlation(ra, nu, float(zeta))
    ra, zeta = np.broadcast_arrays(ra, zeta)
    out = np.empty(ra.shape)
    for z in np.unique(zeta):
        sel = zeta == z
        out[sel] = matern_correlation(ra[sel], nu, float(z))
    return out
