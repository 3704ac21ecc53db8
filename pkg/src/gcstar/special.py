"""Special functions and quadrature used by the gamma-count machinery.

The regularized incomplete gamma function is evaluated natively in log space:
a power series below ``x = a + 1`` and a Lentz continued fraction above it.
Kernels are compiled with numba and operate elementwise on broadcast arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy import integrate

from .errors import ConvergenceError, DomainError

LOG_HALF = math.log(0.5)
_TINY = 1e-300
_EPS = 2.220446049250313e-16


@dataclass(frozen=True)
class Tolerance:
    rel_tol: float = 1e-10
    abs_tol: float = 0.0
    max_iter: int = 100_000

    def __post_init__(self):
        if not self.rel_tol > 0:
            raise DomainError(f"rel_tol must be > 0, got {self.rel_tol}")
        if not self.abs_tol >= 0:
            raise DomainError(f"abs_tol must be >= 0, got {self.abs_tol}")
        if self.max_iter < 1:
            raise DomainError(f"max_iter must be >= 1, got {self.max_iter}")


DEFAULT_TOL = Tolerance()


# ---------------------------------------------------------------------------
# compiled scalar kernels


@numba.njit(cache=True)
def _log1mexp(u):
    # log(1 - exp(u)) for u <= 0
    if u >= 0.0:
        return -np.inf
    if u > -0.6931471805599453:
        return math.log(-math.expm1(u))
    return math.log1p(-math.exp(u))


@numba.njit(cache=True)
def _log_series(a, x, max_iter):
    # log P(a, x) by the power series; returns nan when not converged
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(max_iter):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-17:
            return a * math.log(x) - x - math.lgamma(a) + math.log(total)
    return np.nan


@numba.njit(cache=True)
def _log_contfrac_rest(a, x, max_iter):
    # log Q(a, x) + x by modified Lentz on the Legendre continued fraction;
    # the -x term is left out so tail ratios at huge x stay exact
    b = x + 1.0 - a
    c = 1.0 / 1e-300
    d = 1.0 / b
    h = d
    for i in range(1, max_iter + 1):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < 1e-300:
            d = 1e-300
        c = b + an / c
        if abs(c) < 1e-300:
            c = 1e-300
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return a * math.log(x) - math.lgamma(a) + math.log(h)
    return np.nan


@numba.njit(cache=True)
def _log_contfrac(a, x, max_iter):
    return _log_contfrac_rest(a, x, max_iter) - x


@numba.njit(cache=True)
def _log_pq_scalar(a, x, max_iter):
    if x == 0.0:
        return -np.inf, 0.0
    if x == np.inf:
        return 0.0, -np.inf
    if x < a + 1.0:
        lp = _log_series(a, x, max_iter)
        return lp, _log1mexp(lp)
    lq = _log_contfrac(a, x, max_iter)
    return _log1mexp(lq), lq


@numba.njit(cache=True)
def _log_pq_array(a, x, max_iter):
    n = a.size
    lp = np.empty(n)
    lq = np.empty(n)
    for i in range(n):
        lp[i], lq[i] = _log_pq_scalar(a[i], x[i], max_iter)
    return lp, lq


@numba.njit(cache=True)
def _log_diff_array(a_lo, a_hi, x, max_iter):
    # log(P(a_lo, x) - P(a_hi, x)); a_lo == 0 means P(0, x) := 1
    n = x.size
    out = np.empty(n)
    for i in range(n):
        lp_hi, lq_hi = _log_pq_scalar(a_hi[i], x[i], max_iter)
        if a_lo[i] == 0.0:
            out[i] = lq_hi
            continue
        if x[i] == np.inf:
            out[i] = -np.inf
            continue
        if x[i] >= a_hi[i] + 1.0:
            # both upper tails from the continued fraction: Q_hi - Q_lo
            r_hi = _log_contfrac_rest(a_hi[i], x[i], max_iter)
            r_lo = _log_contfrac_rest(a_lo[i], x[i], max_iter)
            out[i] = -x[i] + r_hi + _log1mexp(min(r_lo - r_hi, 0.0))
            continue
        lp_lo, lq_lo = _log_pq_scalar(a_lo[i], x[i], max_iter)
        if lp_hi > -0.6931471805599453:
            # both above 1/2: difference of upper tails Q_hi - Q_lo
            out[i] = lq_hi + _log1mexp(min(lq_lo - lq_hi, 0.0))
        elif lp_lo == -np.inf:
            out[i] = -np.inf
        else:
            out[i] = lp_lo + _log1mexp(min(lp_hi - lp_lo, 0.0))
    return out


@numba.njit(cache=True)
def _log_gamma_density(a, x):
    # log of x^(a-1) e^(-x) / Gamma(a), i.e. dP(a, x)/dx
    if x == 0.0:
        if a == 1.0:
            return 0.0
        return np.inf if a < 1.0 else -np.inf
    return (a - 1.0) * math.log(x) - x - math.lgamma(a)


@numba.njit(cache=True)
def _digamma_scalar(x):
    result = 0.0
    while x < 8.0:
        result -= 1.0 / x
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (
        1.0 / 240 - inv2 * (1.0 / 132 - inv2 * (691.0 / 32760 - inv2 / 12))))))
    return result + math.log(x) - 0.5 * inv - series


@numba.njit(cache=True)
def _trigamma_scalar(x):
    result = 0.0
    while x < 8.0:
        result += 1.0 / (x * x)
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv * (1.0 + inv * (0.5 + inv * (1.0 / 6 - inv2 * (1.0 / 30 - inv2 * (
        1.0 / 42 - inv2 * (1.0 / 30 - inv2 * (5.0 / 66 - inv2 * (
            691.0 / 2730 - inv2 * 7.0 / 6))))))))
    return result + series


@numba.njit(cache=True)
def _map_scalar_digamma(x):
    out = np.empty(x.size)
    for i in range(x.size):
        out[i] = _digamma_scalar(x[i])
    return out


@numba.njit(cache=True)
def _map_scalar_trigamma(x):
    out = np.empty(x.size)
    for i in range(x.size):
        out[i] = _trigamma_scalar(x[i])
    return out


# ---------------------------------------------------------------------------
# public API


def _as_float_arrays(*args):
    arrays = np.broadcast_arrays(*[np.asarray(v, dtype=float) for v in args])
    shape = arrays[0].shape
    return shape, [np.ascontiguousarray(v).ravel() for v in arrays]


def _finish(values, shape):
    if shape == ():
        return float(values[0])
    return values.reshape(shape)


def _check_finite(name, v):
    if not np.all(np.isfinite(v)):
        raise DomainError(f"{name} must be finite")


def log_reg_lower_gamma(a, x, tol: Tolerance = DEFAULT_TOL):
    """Return ``(log P(a, x), log Q(a, x))`` with P the regularized lower gamma."""
    shape, (a_, x_) = _as_float_arrays(a, x)
    _check_finite("a", a_)
    _check_finite("x", x_)
    if np.any(a_ <= 0):
        raise DomainError("reg_lower_gamma requires a > 0")
    if np.any(x_ < 0):
        raise DomainError("reg_lower_gamma requires x >= 0")
    lp, lq = _log_pq_array(a_, x_, tol.max_iter)
    if np.any(np.isnan(lp)):
        bad = int(np.flatnonzero(np.isnan(lp))[0])
        raise ConvergenceError(
            f"incomplete gamma did not converge for a={a_[bad]}, x={x_[bad]} "
            f"within {tol.max_iter} iterations")
    return _finish(lp, shape), _finish(lq, shape)


def reg_lower_gamma(a, x, tol: Tolerance = DEFAULT_TOL):
    """Regularized lower incomplete gamma ``P(a, x) = gamma(a, x) / Gamma(a)``.

    Both arguments broadcast.  Raises :class:`DomainError` for ``a <= 0``,
    ``x < 0`` or non-finite input.
    """
    lp, _ = log_reg_lower_gamma(a, x, tol)
    return np.exp(lp) if np.ndim(lp) else math.exp(lp)


def reg_upper_gamma(a, x, tol: Tolerance = DEFAULT_TOL):
    _, lq = log_reg_lower_gamma(a, x, tol)
    return np.exp(lq) if np.ndim(lq) else math.exp(lq)


def log_reg_gamma_diff(a_lo, a_hi, x, tol: Tolerance = DEFAULT_TOL):
    """``log(P(a_lo, x) - P(a_hi, x))`` evaluated without leaving log space.

    ``a_lo == 0`` is accepted and follows the convention ``P(0, x) = 1``;
    ``x = inf`` gives ``-inf``.
    When both regularized values exceed 1/2 the difference is taken between
    upper tails instead, which keeps precision for large ``x``.  Returns
    ``-inf`` when the difference underflows.
    """
    shape, (lo, hi, x_) = _as_float_arrays(a_lo, a_hi, x)
    for name, v in (("a_lo", lo), ("a_hi", hi)):
        _check_finite(name, v)
    if np.any(np.isnan(x_)):
        raise DomainError("x must not be nan")
    if np.any(lo < 0) or np.any(x_ < 0):
        raise DomainError("log_reg_gamma_diff requires a_lo >= 0 and x >= 0")
    if np.any(lo >= hi):
        raise DomainError("log_reg_gamma_diff requires a_lo < a_hi")
    out = _log_diff_array(lo, hi, x_, tol.max_iter)
    if np.any(np.isnan(out)):
        raise ConvergenceError("incomplete gamma difference did not converge")
    return _finish(out, shape)


def log_gamma_density(a, x):
    """log of the Gamma(a, 1) density at x (the x-derivative of P(a, x))."""
    shape, (a_, x_) = _as_float_arrays(a, x)
    out = np.empty(a_.size)
    for i in range(a_.size):
        out[i] = _log_gamma_density(a_[i], x_[i])
    return _finish(out, shape)


def digamma(x):
    """Digamma function for positive real arguments (scalar or array)."""
    shape, (x_,) = _as_float_arrays(x)
    _check_finite("x", x_)
    if np.any(x_ <= 0):
        raise DomainError("digamma requires x > 0")
    return _finish(_map_scalar_digamma(x_), shape)


def trigamma(x):
    """First derivative of the digamma function, ``x > 0``."""
    shape, (x_,) = _as_float_arrays(x)
    _check_finite("x", x_)
    if np.any(x_ <= 0):
        raise DomainError("trigamma requires x > 0")
    return _finish(_map_scalar_trigamma(x_), shape)


def integrate_semi_infinite(f, tol: Tolerance = DEFAULT_TOL, limit: int | None = None):
    """Integrate ``f`` over ``(0, inf)``.

    QUADPACK's ``qagi`` maps the half line onto (0, 1] and subdivides
    adaptively with a 15-point Gauss-Kronrod rule.  Raises
    :class:`ConvergenceError` when the error estimate stays above the
    requested tolerance.
    """
    limit = limit or min(tol.max_iter, 500)
    value, err, info = integrate.quad(
        f, 0.0, np.inf, epsabs=tol.abs_tol, epsrel=max(tol.rel_tol, 5e-14),
        limit=limit, full_output=True)[:3]
    bound = max(tol.abs_tol, tol.rel_tol * abs(value))
    if err > max(bound, 50 * _EPS * abs(value)):
        raise ConvergenceError(
            f"semi-infinite quadrature error estimate {err:.3g} exceeds tolerance {bound:.3g}")
    return float(value)
