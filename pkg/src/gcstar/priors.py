"""Hyperprior densities.

The dispersion prior penalizes the distance ``d(alpha)`` of GC(alpha) from the
Poisson base model (``alpha = 1``)::

    d(alpha)^2 = 2 (alpha - 1) digamma(alpha) - 2 log Gamma(alpha)

``d`` is exponential with rate ``lam`` and its mass is split evenly between the
over-dispersed (alpha < 1) and under-dispersed (alpha > 1) branches, so the
density in alpha is ``(lam / 2) exp(-lam d) |d'(alpha)|`` with
``d'(alpha) = (alpha - 1) trigamma(alpha) / d(alpha)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, zeta

from .errors import DomainError
from .special import digamma, trigamma

FIXED_EFFECT_VARIANCE = 100.0

# d^2 / (alpha - 1)^2 = sum_{k>=2} 2 (-1)^k (k - 1) / k * zeta(k) (alpha - 1)^(k - 2)
_SERIES_RADIUS = 0.2
_K = np.arange(2, 44)
_SERIES_COEF = 2.0 * (-1.0) ** _K * (_K - 1) / _K * zeta(_K)
_SERIES_COEF_REV = tuple(float(c) for c in _SERIES_COEF[::-1])


@dataclass(frozen=True)
class PcAlphaPrior:
    lam: float = 1.0

    def __post_init__(self):
        if not self.lam > 0:
            raise DomainError(f"PC prior rate must be > 0, got {self.lam}")


@dataclass(frozen=True)
class PcPrecisionPrior:
    """``sigma = tau^(-1/2)`` is exponential with ``P(sigma > u_sigma) = a_tail``."""

    u_sigma: float = 1.0
    a_tail: float = 0.01

    def __post_init__(self):
        if not self.u_sigma > 0:
            raise DomainError("u_sigma must be > 0")
        if not 0 < self.a_tail < 1:
            raise DomainError("a_tail must lie in (0, 1)")

    @property
    def rate(self) -> float:
        return -math.log(self.a_tail) / self.u_sigma


def _scaled_sq_distance(alpha):
    # d(alpha)^2 / (alpha - 1)^2, smooth through alpha = 1
    alpha = np.asarray(alpha, dtype=float)
    e = alpha - 1.0
    near = np.abs(e) < _SERIES_RADIUS
    out = np.empty(alpha.shape)
    if np.any(near):
        out[near] = np.polynomial.polynomial.polyval(e[near], _SERIES_COEF)
    far = ~near
    if np.any(far):
        a = alpha[far]
        out[far] = (2 * (a - 1) * digamma(a) - 2 * gammaln(a)) / (a - 1) ** 2
    return out


def pc_alpha_distance(alpha):
    """Distance ``d(alpha)`` from the Poisson base model; ``d(1) = 0``."""
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0):
        raise DomainError("alpha must be > 0")
    d = np.abs(alpha - 1) * np.sqrt(_scaled_sq_distance(alpha))
    return float(d) if d.ndim == 0 else d


def _pc_alpha_log_density_scalar(alpha: float, lam: float) -> float:
    e = alpha - 1.0
    if abs(e) < _SERIES_RADIUS:
        g = 0.0
        for c in _SERIES_COEF_REV:
            g = g * e + c
    else:
        g = (2 * e * float(digamma(alpha)) - 2 * math.lgamma(alpha)) / (e * e)
    d = abs(e) * math.sqrt(g)
    return math.log(lam / 2) - lam * d + math.log(float(trigamma(alpha))) - 0.5 * math.log(g)


def pc_alpha_log_density(alpha, prior: PcAlphaPrior = PcAlphaPrior()):
    if np.ndim(alpha) == 0:
        a = float(alpha)
        if not (a > 0 and math.isfinite(a)):
            raise DomainError("alpha must be finite and > 0")
        return _pc_alpha_log_density_scalar(a, prior.lam)
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0) or not np.all(np.isfinite(alpha)):
        raise DomainError("alpha must be finite and > 0")
    g = _scaled_sq_distance(alpha)
    d = np.abs(alpha - 1) * np.sqrt(g)
    # |d'(alpha)| = trigamma(alpha) / sqrt(g): no singularity at alpha = 1
    out = (math.log(prior.lam / 2) - prior.lam * d
           + np.log(trigamma(alpha)) - 0.5 * np.log(g))
    return float(out) if out.ndim == 0 else out


def pc_alpha_jacobian_at_base() -> float:
    """``lim_{alpha -> 1} |d'(alpha)| = sqrt(trigamma(1)) = pi / sqrt(6)``."""
    return math.pi / math.sqrt(6)


def pc_precision_log_density(tau, prior: PcPrecisionPrior = PcPrecisionPrior()):
    tau = np.asarray(tau, dtype=float)
    if np.any(tau <= 0):
        raise DomainError("precision must be > 0")
    lam = prior.rate
    out = math.log(lam / 2) - 1.5 * np.log(tau) - lam / np.sqrt(tau)
    return float(out) if out.ndim == 0 else out


def gaussian_fixed_log_density(b, variance: float = FIXED_EFFECT_VARIANCE):
    b = np.asarray(b, dtype=float)
    out = -0.5 * np.log(2 * math.pi * variance) - 0.5 * b * b / variance
    return float(out) if out.ndim == 0 else out


# internal (log / logit) scale versions including the change-of-variable term


def log_prior_log_alpha(z, prior: PcAlphaPrior = PcAlphaPrior()):
    if np.ndim(z) == 0:
        return pc_alpha_log_density(math.exp(z), prior) + float(z)
    return pc_alpha_log_density(np.exp(z), prior) + z


def log_prior_log_precision(z, prior: PcPrecisionPrior = PcPrecisionPrior()):
    if np.ndim(z) == 0:
        # tau = e^z: log(lam/2) - 1.5 z - lam e^(-z/2) + z
        lam = prior.rate
        return math.log(lam / 2) - 0.5 * float(z) - lam * math.exp(-0.5 * float(z))
    return pc_precision_log_density(np.exp(z), prior) + z


def log_prior_logit_phi(z, prior: PcPrecisionPrior = PcPrecisionPrior(1.0, 0.1)):
    """GP dispersion: ``phi / (1 - phi) = exp(z)`` exponential with the prior's rate."""
    lam = prior.rate
    return math.log(lam) - lam * np.exp(z) + z


@dataclass(frozen=True)
class PriorConfig:
    """All hyperprior and fixed-effect prior settings for one model.

    ``lik_hyper`` is used for the NB size and the Gaussian observation
    precision (PC precision form) and for the GP ``phi`` odds (exponential
    with the same rate).
    """

    alpha: PcAlphaPrior = PcAlphaPrior(1.0)
    precision: PcPrecisionPrior = PcPrecisionPrior(1.0, 0.01)
    lik_hyper: PcPrecisionPrior = PcPrecisionPrior(1.0, 0.1)
    fixed_variance: float = FIXED_EFFECT_VARIANCE
    intercept_variance: float = FIXED_EFFECT_VARIANCE

    def to_dict(self) -> dict:
        return {
            "alpha_lambda": self.alpha.lam,
            "precision_u": self.precision.u_sigma, "precision_a": self.precision.a_tail,
            "lik_hyper_u": self.lik_hyper.u_sigma, "lik_hyper_a": self.lik_hyper.a_tail,
            "fixed_variance": self.fixed_variance, "intercept_variance": self.intercept_variance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PriorConfig":
        dflt = cls().to_dict()
        unknown = set(d) - set(dflt)
        if unknown:
            raise DomainError(f"unknown prior keys: {sorted(unknown)}")
        v = {**dflt, **{k: float(x) for k, x in d.items()}}
        return cls(PcAlphaPrior(v["alpha_lambda"]),
                   PcPrecisionPrior(v["precision_u"], v["precision_a"]),
                   PcPrecisionPrior(v["lik_hyper_u"], v["lik_hyper_a"]),
                   v["fixed_variance"], v["intercept_variance"])


def log_prior_lik_hyper(kind: str, z, config: PriorConfig = PriorConfig()):
    """Log prior of the likelihood hyperparameter on its internal scale."""
    if kind == "gc":
        return log_prior_log_alpha(z, config.alpha)
    if kind == "genpoisson":
        return log_prior_logit_phi(z, config.lik_hyper)
    if kind in ("negbin", "gaussian"):
        return log_prior_log_precision(z, config.lik_hyper)
    raise DomainError(f"likelihood {kind!r} has no hyperparameter")
