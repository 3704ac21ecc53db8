"""Observation models: log-likelihood and its first two derivatives in eta.

Every model is parameterized through the linear predictor ``eta`` (offsets
already absorbed).  The GC model maps ``eta`` to the waiting-time rate
``beta = alpha * exp(eta)``; the others use ``E[Y] = exp(eta)``.

Generalized Poisson follows Consul's form

    P(y) = theta (theta + phi y)^(y-1) exp(-theta - phi y) / y!

with ``theta = exp(eta) (1 - phi)`` so that ``E[Y] = exp(eta)`` and
``Var[Y] = E[Y] / (1 - phi)^2``, restricted to ``0 <= phi < 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import special as sp

from .errors import DomainError
from .gammacount import sample_counts
from .special import log_gamma_density, log_reg_gamma_diff

CURVATURE_CLAMP = -1e-10
KINDS = ("gc", "poisson", "negbin", "genpoisson", "gaussian")


class EtaDerivatives(NamedTuple):
    loglik: np.ndarray
    d1: np.ndarray
    d2: np.ndarray


def _counts(y):
    y = np.asarray(y, dtype=float)
    if np.any(y < 0) or np.any(np.floor(y) != y):
        raise DomainError("counts must be nonnegative integers")
    return y


def _clamp(d2, clamp):
    return np.minimum(d2, CURVATURE_CLAMP) if clamp else d2


def gc_loglik_eta(y, eta, alpha, clamp: bool = True) -> EtaDerivatives:
    """Gamma-count log-likelihood with rate ``alpha * exp(eta)``.

    ``d1`` and ``d2`` are analytic: with ``x = alpha e^eta`` and
    ``D = P(y a, x) - P((y+1) a, x)``, each density term ``r = x g(a, x) / D``
    gives ``d1 = r_lo - r_hi`` and
    ``d2 = d1 + r_lo (a_lo - 1 - x) - r_hi (a_hi - 1 - x) - d1^2``.
    """
    if not alpha > 0:
        raise DomainError(f"alpha must be > 0, got {alpha}")
    y = _counts(y)
    eta = np.asarray(eta, dtype=float)
    y, eta = np.broadcast_arrays(y, eta)
    a_lo = y * alpha
    a_hi = a_lo + alpha
    log_x = math.log(alpha) + eta
    x = np.exp(log_x)
    ll = np.asarray(log_reg_gamma_diff(a_lo, a_hi, x))
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        r_hi = np.exp(np.asarray(log_gamma_density(a_hi, x)) + log_x - ll)
        r_lo = np.where(a_lo > 0,
                        np.exp(np.asarray(log_gamma_density(np.where(a_lo > 0, a_lo, 1.0), x))
                               + log_x - ll),
                        0.0)
        d1 = r_lo - r_hi
        d2 = d1 + r_lo * (a_lo - 1 - x) - r_hi * (a_hi - 1 - x) - d1 * d1
    return EtaDerivatives(ll, d1, _clamp(d2, clamp))


def poisson_loglik_eta(y, eta, clamp: bool = True) -> EtaDerivatives:
    y = _counts(y)
    eta = np.asarray(eta, dtype=float)
    mu = np.exp(eta)
    ll = y * eta - mu - sp.gammaln(y + 1)
    d1 = y - mu
    return EtaDerivatives(ll, d1, _clamp(-mu, clamp))


def negbin_loglik_eta(y, eta, size, clamp: bool = True) -> EtaDerivatives:
    """NB2 with mean ``exp(eta)`` and variance ``mu + mu^2 / size``."""
    if not size > 0:
        raise DomainError(f"negative binomial size must be > 0, got {size}")
    y = _counts(y)
    eta = np.asarray(eta, dtype=float)
    mu = np.exp(eta)
    # log Gamma(y + r) - log Gamma(r), stable for huge r
    with np.errstate(divide="ignore"):
        lg_ratio = np.where(y > 0, sp.gammaln(np.maximum(y, 1)) - sp.betaln(np.maximum(y, 1), size), 0.0)
    ll = (lg_ratio - sp.gammaln(y + 1) - size * np.log1p(mu / size)
          + y * (eta - np.log(size + mu)))
    d1 = size * (y - mu) / (size + mu)
    d2 = -size * mu * (size + y) / (size + mu) ** 2
    return EtaDerivatives(ll, d1, _clamp(d2, clamp))


def genpoisson_admissible(y, eta, phi) -> np.ndarray:
    """Rows where the Consul pmf term is strictly positive."""
    theta = np.exp(np.asarray(eta, dtype=float)) * (1 - phi)
    return (theta > 0) & (theta + phi * np.asarray(y, dtype=float) > 0)


def genpoisson_loglik_eta(y, eta, phi, clamp: bool = True) -> EtaDerivatives:
    if not 0 <= phi < 1:
        raise DomainError(f"generalized Poisson phi must lie in [0, 1), got {phi}")
    y = _counts(y)
    eta = np.asarray(eta, dtype=float)
    if not np.all(genpoisson_admissible(y, eta, phi)):
        raise DomainError("(y, eta, phi) outside the generalized Poisson positivity region")
    theta = np.exp(eta) * (1 - phi)
    c = theta + phi * y
    ll = np.log(theta) + (y - 1) * np.log(c) - c - sp.gammaln(y + 1)
    d1 = 1 + (y - 1) * theta / c - theta
    d2 = (y - 1) * theta * phi * y / (c * c) - theta
    return EtaDerivatives(ll, d1, _clamp(d2, clamp))


def gaussian_loglik_eta(y, eta, precision, clamp: bool = True) -> EtaDerivatives:
    y = np.asarray(y, dtype=float)
    r = y - np.asarray(eta, dtype=float)
    ll = 0.5 * (math.log(precision) - math.log(2 * math.pi)) - 0.5 * precision * r * r
    d2 = np.full(np.shape(r), -float(precision))
    return EtaDerivatives(ll, precision * r, _clamp(d2, clamp))


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObsModel:
    """A likelihood family plus its hyperparameter value (``None`` for Poisson).

    Hyperparameters live on an unconstrained internal scale during inference:
    log for alpha, size and precision, logit for the GP ``phi``.
    """

    kind: str
    hyper: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown likelihood kind {self.kind!r}")
        if self.kind == "poisson":
            return
        h = self.hyper
        if h is None or not np.isfinite(h) or h <= 0:
            raise DomainError(f"{self.kind} requires a positive hyperparameter, got {h}")
        if self.kind == "genpoisson" and not h < 1:
            raise DomainError("generalized Poisson phi must be < 1")

    @property
    def has_hyper(self) -> bool:
        return self.kind != "poisson"

    @property
    def hyper_name(self) -> str | None:
        return {"gc": "alpha", "negbin": "size", "genpoisson": "phi",
                "gaussian": "precision"}.get(self.kind)

    @staticmethod
    def to_internal(kind: str, value: float) -> float:
        if kind == "genpoisson":
            return math.log(value / (1 - value))
        return math.log(value)

    @staticmethod
    def from_internal(kind: str, z):
        if kind == "genpoisson":
            return sp.expit(z)
        return np.exp(z)

    def with_internal(self, z: float) -> "ObsModel":
        return ObsModel(self.kind, float(self.from_internal(self.kind, z)))

    def derivs(self, y, eta, clamp: bool = True) -> EtaDerivatives:
        if self.kind == "gc":
            return gc_loglik_eta(y, eta, self.hyper, clamp)
        if self.kind == "poisson":
            return poisson_loglik_eta(y, eta, clamp)
        if self.kind == "negbin":
            return negbin_loglik_eta(y, eta, self.hyper, clamp)
        if self.kind == "genpoisson":
            return genpoisson_loglik_eta(y, eta, self.hyper, clamp)
        return gaussian_loglik_eta(y, eta, self.hyper, clamp)

    def loglik(self, y, eta) -> np.ndarray:
        """Pointwise log-likelihood; invalid GP regions give ``-inf`` rather than raising."""
        if self.kind == "gc":
            y = _counts(y)
            y, eta = np.broadcast_arrays(y, np.asarray(eta, dtype=float))
            return np.asarray(log_reg_gamma_diff(y * self.hyper, (y + 1) * self.hyper,
                                                 self.hyper * np.exp(eta)))
        if self.kind == "genpoisson":
            y = _counts(y)
            y, eta = np.broadcast_arrays(y, np.asarray(eta, dtype=float))
            ok = genpoisson_admissible(y, eta, self.hyper)
            out = np.full(y.shape, -np.inf)
            if np.any(ok):
                out[ok] = genpoisson_loglik_eta(y[ok], eta[ok], self.hyper).loglik
            return out
        return self.derivs(y, eta, clamp=False).loglik

    def sample(self, eta, rng: np.random.Generator) -> np.ndarray:
        """Draw one response per entry of ``eta``."""
        eta = np.asarray(eta, dtype=float)
        mu = np.exp(eta)
        if self.kind == "gc":
            return sample_counts(self.hyper, self.hyper * mu, rng)
        if self.kind == "poisson":
            return rng.poisson(mu)
        if self.kind == "negbin":
            return rng.negative_binomial(self.hyper, self.hyper / (self.hyper + mu))
        if self.kind == "gaussian":
            return eta + rng.standard_normal(eta.shape) / math.sqrt(self.hyper)
        return _genpoisson_sample(mu, self.hyper, rng)


def _genpoisson_sample(mu, phi, rng):
    # inversion against the cumulative pmf; support truncated far in the tail
    mu = np.atleast_1d(mu)
    u = rng.random(mu.shape)
    out = np.zeros(mu.shape, dtype=np.int64)
    theta = mu * (1 - phi)
    cdf = np.exp(-theta)
    done = u <= cdf
    y = 0
    sd = np.sqrt(mu) / (1 - phi)
    ymax = int(np.max(mu + 40 * sd + 50))
    while not np.all(done) and y < ymax:
        y += 1
        c = theta + phi * y
        lp = np.log(theta) + (y - 1) * np.log(c) - c - math.lgamma(y + 1)
        cdf = cdf + np.exp(lp)
        newly = (~done) & (u <= cdf)
        out[newly] = y
        done |= newly
    out[~done] = y
    return out
