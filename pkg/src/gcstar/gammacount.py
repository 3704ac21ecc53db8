"""The gamma-count law: counts of a renewal process with Gamma(alpha, beta) gaps.

``P(Y = n) = P(n*alpha, beta*t) - P((n+1)*alpha, beta*t)`` where ``P`` is the
regularized lower incomplete gamma and ``P(0, x) = 1``.  ``alpha = 1`` gives
the Poisson law; ``alpha < 1`` over-disperses and ``alpha > 1`` under-disperses.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DomainError, TruncationError
from .special import (
    DEFAULT_TOL,
    Tolerance,
    integrate_semi_infinite,
    log_reg_gamma_diff,
    log_reg_lower_gamma,
)

MOMENT_TERM_CAP = 100_000


@dataclass(frozen=True)
class GCParams:
    alpha: float
    beta: float
    t: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "t"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise DomainError(f"GCParams.{name} must be finite and > 0, got {v}")

    @property
    def rate(self) -> float:
        """Gamma argument ``beta * t`` shared by every term of the pmf."""
        return self.beta * self.t


class DispersionClass(enum.Enum):
    OVER = "over"
    EQUI = "equi"
    UNDER = "under"


def classify_dispersion(alpha: float) -> DispersionClass:
    if not alpha > 0:
        raise DomainError(f"alpha must be > 0, got {alpha}")
    if alpha < 1:
        return DispersionClass.OVER
    if alpha == 1:
        return DispersionClass.EQUI
    return DispersionClass.UNDER


def _check_counts(n):
    n = np.asarray(n)
    if np.any(n < 0) or np.any(np.floor(n) != n):
        raise DomainError("counts must be nonnegative integers")
    return n.astype(float)


def log_pmf(n, p: GCParams):
    """Log-probability of ``n`` events in ``(0, t]``; vectorized over ``n``."""
    n = _check_counts(n)
    return log_reg_gamma_diff(n * p.alpha, (n + 1) * p.alpha,
                              np.broadcast_to(p.rate, n.shape))


def pmf(n, p: GCParams):
    lp = log_pmf(n, p)
    return np.exp(lp) if np.ndim(lp) else math.exp(lp)


def _tail_sum(p: GCParams, eps: float, weight, cap: int):
    # sum_{k>=1} weight(k) * P(k*alpha, rate), stopping once P(k*alpha, rate) < eps
    if not eps > 0:
        raise DomainError("eps must be > 0")
    total = 0.0
    k0 = 1
    block = 64
    while k0 <= cap:
        k = np.arange(k0, min(k0 + block, cap + 1), dtype=float)
        lp, _ = log_reg_lower_gamma(k * p.alpha, np.full(k.size, p.rate))
        tail = np.exp(lp)
        below = np.flatnonzero(tail < eps)
        if below.size:
            stop = below[0]
            total += float(np.sum(weight(k[:stop]) * tail[:stop]))
            K = int(k[stop])
            # P(k*alpha, x) decays at least geometrically past the mean;
            # bound the remainder by the ratio of the last two terms
            last = tail[stop]
            prev = tail[stop - 1] if stop > 0 else 1.0
            ratio = min(last / prev, 0.999) if prev > 0 else 0.0
            bound = float(weight(np.array([K]))[0]) * last / (1 - ratio) ** 2
            return total, bound, K
        total += float(np.sum(weight(k) * tail))
        k0 += block
        block = min(block * 2, 8192)
    raise TruncationError(
        f"gamma-count moment series needs more than {cap} terms "
        f"(beta*t/alpha = {p.rate / p.alpha:.3g} too large for direct summation)")


def mean_with_error(p: GCParams, eps: float = 1e-12, cap: int = MOMENT_TERM_CAP):
    """Truncated ``E[Y] = sum_k P(k*alpha, beta*t)``.

    Returns ``(value, truncation_bound, n_terms)``.
    """
    return _tail_sum(p, eps, lambda k: np.ones_like(k), cap)


def mean(p: GCParams, eps: float = 1e-12, cap: int = MOMENT_TERM_CAP) -> float:
    return mean_with_error(p, eps, cap)[0]


def variance(p: GCParams, eps: float = 1e-12, cap: int = MOMENT_TERM_CAP) -> float:
    """``E[Y^2] - E[Y]^2`` with ``E[Y^2] = sum_k (2k - 1) P(Y >= k)``."""
    m = mean(p, eps, cap)
    second, _, _ = _tail_sum(p, eps, lambda k: 2 * k - 1, cap)
    return max(second - m * m, 0.0)


def sample(p: GCParams, rng: np.random.Generator, size=None):
    """Draw counts by simulating the renewal process.

    Gamma(alpha, rate=beta) waiting times are accumulated until the arrival
    time passes ``t``; the number of arrivals inside the window is returned.
    """
    out = sample_counts(p.alpha, p.beta, rng, size=size, t=p.t)
    return int(out) if size is None else out


def sample_counts(alpha, beta, rng: np.random.Generator, size=None, t: float = 1.0):
    """Vectorized renewal sampler; ``alpha`` and ``beta`` broadcast to ``size``."""
    if size is None:
        shape = np.broadcast(np.asarray(alpha), np.asarray(beta)).shape
    else:
        shape = (size,) if np.isscalar(size) else tuple(size)
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), shape).ravel()
    beta = np.broadcast_to(np.asarray(beta, dtype=float), shape).ravel()
    if np.any(alpha <= 0) or np.any(beta <= 0):
        raise DomainError("alpha and beta must be > 0")
    counts = np.zeros(alpha.size, dtype=np.int64)
    clock = np.zeros(alpha.size)
    alive = np.arange(alpha.size)
    while alive.size:
        clock[alive] += rng.gamma(alpha[alive], 1.0 / beta[alive])
        arrived = clock[alive] <= t
        counts[alive[arrived]] += 1
        alive = alive[arrived]
    if shape == ():
        return int(counts[0])
    return counts.reshape(shape)


def gamma_hazard_ratio(u, alpha: float, rate: float):
    """Hazard ``f(u) / S(u)`` of the Gamma(alpha, rate) waiting-time law."""
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0) or alpha <= 0 or rate <= 0:
        raise DomainError("gamma_hazard requires u > 0, alpha > 0, rate > 0")
    x = rate * u
    _, log_surv = log_reg_lower_gamma(np.full(x.shape, alpha), x)
    log_dens = math.log(rate) + (alpha - 1) * np.log(x) - x - math.lgamma(alpha)
    out = np.exp(log_dens - log_surv)
    return float(out) if out.ndim == 0 else out


def gamma_hazard_integral(u, alpha: float, rate: float, tol: Tolerance = DEFAULT_TOL):
    """Hazard from ``1/h(u) = int_0^inf exp(-rate*v) (1 + v/u)^(alpha-1) dv``."""
    u_arr = np.atleast_1d(np.asarray(u, dtype=float))
    out = np.empty(u_arr.size)
    for i, ui in enumerate(u_arr):
        recip = integrate_semi_infinite(
            lambda v, ui=ui: math.exp(-rate * v) * (1 + v / ui) ** (alpha - 1), tol)
        out[i] = 1.0 / recip
    return float(out[0]) if np.ndim(u) == 0 else out


def gamma_hazard(u, alpha: float, rate: float, check: bool = True, rtol: float = 1e-8):
    """Gamma waiting-time hazard at elapsed time ``u``.

    The density/survival ratio is returned.  With ``check`` the integral
    representation is also evaluated and the two must agree to ``rtol``.
    """
    h = gamma_hazard_ratio(u, alpha, rate)
    if check:
        hi = gamma_hazard_integral(u, alpha, rate, Tolerance(rel_tol=1e-12))
        if not np.allclose(h, hi, rtol=rtol, atol=0):
            raise ConvergenceError(
                "hazard quadrature disagrees with the density/survival ratio")
    return h
