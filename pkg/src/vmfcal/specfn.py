"""Log-domain special functions for von Mises-Fisher normalisation.

For a vMF distribution on S^{d-1} with order nu = d/2 - 1:

    log C_d(kappa) = nu * log(kappa) - (d/2) * log(2 pi) - log I_nu(kappa)
    A_d(kappa)     = I_{nu+1}(kappa) / I_nu(kappa)

``C_d`` itself is never formed; at d = 512 it under/overflows for most kappa.
All public functions accept a scalar or an array of kappa and return the same
shape (a plain ``float`` for scalar input).
"""

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
import math

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import DomainError, NumericalError

__all__ = [
    "SpecFnConfig",
    "DEFAULT_CONFIG",
    "bessel_ratio",
    "bessel_ratio_deriv",
    "log_bessel_i",
    "log_norm_const",
    "debye_polynomials",
]

# Orders at or above this use the uniform large-order expansion for log I_nu.
DEBYE_MIN_ORDER = 32.0
# Number of Debye correction terms U_1..U_K kept.
DEBYE_TERMS = 8
# Small-argument branch of A_d is taken when kappa < nu * SMALL_KAPPA_FACTOR.
SMALL_KAPPA_FACTOR = 1e-4

_TINY = 1e-300


@dataclass(frozen=True)
class SpecFnConfig:
    """Numerical controls for the Bessel routines."""

    series_terms: int = 64
    cf_tolerance: float = 1e-15
    cf_max_iters: int = 10_000

    def __post_init__(self):
        if self.series_terms < 16:
            raise DomainError(f"series_terms must be >= 16, got {self.series_terms}")
        if not (0.0 < self.cf_tolerance <= 1e-8):
            raise DomainError(f"cf_tolerance must lie in (0, 1e-8], got {self.cf_tolerance}")
        if self.cf_max_iters < 64:
            raise DomainError(f"cf_max_iters must be >= 64, got {self.cf_max_iters}")


DEFAULT_CONFIG = SpecFnConfig()


def _check_dim(d):
    if isinstance(d, bool) or int(d) != d or d < 2:
        raise DomainError(f"dimension must be an integer >= 2, got {d!r}")
    return int(d)


def _check_kappa(kappa):
    arr = np.asarray(kappa, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"kappa must be finite, got {kappa!r}")
    if not np.all(arr > 0.0):
        raise DomainError(f"kappa must be positive, got {kappa!r}")
    return arr


def _shape_like(result, kappa):
    if np.ndim(kappa) == 0:
        return float(result.reshape(()))
    return result


def _ratio_small(nu, x, n_terms):
    # I_{nu+1}/I_nu = (x/2)/(nu+1) * S_{nu+1}(t) / S_nu(t),  S_v(t) = sum t^k / (k! (v+1)_k)
    t = 0.25 * x * x
    s_num = np.ones_like(x)
    s_den = np.ones_like(x)
    term_num = np.ones_like(x)
    term_den = np.ones_like(x)
    for k in range(1, n_terms + 1):
        term_num = term_num * t / (k * (nu + 1.0 + k))
        term_den = term_den * t / (k * (nu + k))
        s_num = s_num + term_num
        s_den = s_den + term_den
    return 0.5 * x / (nu + 1.0) * s_num / s_den


def _ratio_cf(nu, x, tol, max_iters):
    # Gauss continued fraction, evaluated with the modified Lentz algorithm:
    #   I_{nu+1}/I_nu = x / (2(nu+1) + x^2 / (2(nu+2) + x^2 / (2(nu+3) + ...)))
    f = np.full_like(x, _TINY)
    c = f.copy()
    dd = np.zeros_like(x)
    done = np.zeros(x.shape, dtype=bool)
    x2 = x * x
    resid = np.full_like(x, np.inf)
    for k in range(1, max_iters + 1):
        a = x if k == 1 else x2
        b = 2.0 * (nu + k)
        dd = b + a * dd
        dd = np.where(dd == 0.0, _TINY, dd)
        c = b + a / c
        c = np.where(c == 0.0, _TINY, c)
        dd = 1.0 / dd
        delta = c * dd
        f = np.where(done, f, f * delta)
        resid = np.where(done, resid, np.abs(delta - 1.0))
        done |= resid < tol
        if done.all():
            return f
    raise NumericalError(
        f"Bessel ratio continued fraction did not converge in {max_iters} iterations "
        f"(nu={nu}, max residual {resid.max():.3e})",
        residual=float(resid.max()),
    )


def bessel_ratio(d, kappa, config=DEFAULT_CONFIG):
    """Mean resultant length A_d(kappa) = I_{d/2}(kappa) / I_{d/2-1}(kappa).

    Strictly inside (0, 1) and increasing in kappa.
    """
    d = _check_dim(d)
    x = np.atleast_1d(_check_kappa(kappa)).astype(np.float64)
    nu = 0.5 * d - 1.0
    out = np.empty_like(x)
    small = x < nu * SMALL_KAPPA_FACTOR
    if small.any():
        out[small] = _ratio_small(nu, x[small], config.series_terms)
    if (~small).any():
        out[~small] = _ratio_cf(nu, x[~small], config.cf_tolerance, config.cf_max_iters)
    return _shape_like(out, kappa)


def bessel_ratio_deriv(d, kappa, config=DEFAULT_CONFIG):
    """Derivative dA_d/dkappa = 1 - A^2 - (d - 1) A / kappa."""
    a = np.asarray(bessel_ratio(d, kappa, config))
    k = np.asarray(kappa, dtype=np.float64)
    out = 1.0 - a * a - (d - 1) * a / k
    return _shape_like(np.atleast_1d(out), kappa)


@lru_cache(maxsize=None)
def debye_polynomials(n_terms=DEBYE_TERMS):
    """Coefficients of the Debye polynomials U_0..U_n as tuples of Fractions.

    Built from U_{k+1}(p) = p^2 (1 - p^2) U_k'(p) / 2 + (1/8) int_0^p (1 - 5 t^2) U_k(t) dt.
    Entry ``i`` of each tuple is the coefficient of p**i.
    """
    polys = [(Fraction(1),)]
    for _ in range(n_terms):
        u = polys[-1]
        du = [i * c for i, c in enumerate(u)][1:]
        nxt = [Fraction(0)] * (len(u) + 3)
        for i, c in enumerate(du):
            nxt[i + 2] += c / 2
            nxt[i + 4] -= c / 2
        for i, c in enumerate(u):
            # (1 - 5 t^2) * c t^i integrated from 0 to p
            nxt[i + 1] += c / (8 * (i + 1))
            nxt[i + 3] -= 5 * c / (8 * (i + 3))
        while len(nxt) > 1 and nxt[-1] == 0:
            nxt.pop()
        polys.append(tuple(nxt))
    return tuple(polys)


@lru_cache(maxsize=None)
def _debye_float_coeffs(n_terms):
    return tuple(np.array([float(c) for c in u][::-1]) for u in debye_polynomials(n_terms))


def _log_i_debye(nu, x):
    z = x / nu
    sq = np.sqrt(1.0 + z * z)
    eta = sq + np.log(z) - np.log1p(sq)
    p = 1.0 / sq
    total = np.zeros_like(x)
    for k, coeffs in enumerate(_debye_float_coeffs(DEBYE_TERMS)):
        total += np.polyval(coeffs, p) / nu**k
    return nu * eta - 0.5 * math.log(2.0 * math.pi * nu) - 0.25 * np.log1p(z * z) + np.log(total)


def _log_i_series(nu, x, min_terms):
    # terms peak near k = (sqrt(nu^2 + x^2) - nu) / 2 with width ~ sqrt(peak)
    x_max = float(x.max())
    peak = 0.5 * (math.sqrt(nu * nu + x_max * x_max) - nu)
    n = int(peak + 30.0 * math.sqrt(peak + 1.0)) + min_terms
    k = np.arange(n, dtype=np.float64)
    log_half = np.log(0.5 * x)
    log_terms = 2.0 * np.outer(log_half, k) - (gammaln(k + 1.0) + gammaln(nu + k + 1.0))
    return nu * log_half + logsumexp(log_terms, axis=1)


def log_bessel_i(nu, x, config=DEFAULT_CONFIG, method="auto"):
    """log I_nu(x) for real order nu >= 0 and x > 0.

    ``method`` is ``"auto"``, ``"series"`` or ``"debye"``; the explicit choices
    exist for cross-checking the two branches.
    """
    if nu < 0:
        raise DomainError(f"order must be non-negative, got {nu}")
    arr = np.atleast_1d(_check_kappa(x)).astype(np.float64)
    if method == "auto":
        method = "debye" if nu >= DEBYE_MIN_ORDER else "series"
    if method == "debye":
        if nu <= 0:
            raise DomainError("Debye expansion requires a positive order")
        out = _log_i_debye(float(nu), arr)
    elif method == "series":
        out = _log_i_series(float(nu), arr, config.series_terms)
    else:
        raise DomainError(f"unknown method {method!r}")
    return _shape_like(out, x)


def log_norm_const(d, kappa, config=DEFAULT_CONFIG):
    """log C_d(kappa), the log normaliser of the vMF density on S^{d-1}."""
    d = _check_dim(d)
    x = np.atleast_1d(_check_kappa(kappa)).astype(np.float64)
    nu = 0.5 * d - 1.0
    out = nu * np.log(x) - 0.5 * d * math.log(2.0 * math.pi) - log_bessel_i(nu, x, config)
    if not np.all(np.isfinite(out)):
        bad = x[~np.isfinite(out)]
        raise NumericalError(f"log C_{d}(kappa) is not finite for kappa={bad.tolist()}")
    return _shape_like(out, kappa)
