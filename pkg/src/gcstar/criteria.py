"""Model comparison and accuracy metrics.

All criteria take the pointwise log-likelihood matrix ``pll`` with one row
per posterior draw and one column per observed response.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy.special import logsumexp

from .errors import DomainError

WAIC_VAR_WARN = 0.4
CPO_DOMINANCE = 0.5


def _check_pll(pll, min_draws=2):
    pll = np.asarray(pll, dtype=float)
    if pll.ndim != 2:
        raise DomainError("pointwise log-likelihood must be a (draws, observations) matrix")
    if pll.shape[0] < min_draws:
        raise DomainError(f"at least {min_draws} draws are required")
    if np.any(np.isnan(pll)) or np.any(pll == np.inf):
        raise DomainError("pointwise log-likelihood entries must be finite or -inf")
    return pll


def dic(pll, loglik_at_mean: float) -> dict:
    """Deviance information criterion.

    ``mean_deviance = -2 mean_s sum_i pll``, ``p_d = mean_deviance + 2 loglik_at_mean``.
    """
    pll = _check_pll(pll)
    if not np.isfinite(loglik_at_mean):
        raise DomainError("log-likelihood at the posterior mean is not finite")
    dbar = float(-2 * np.mean(pll.sum(axis=1)))
    p_d = dbar + 2 * float(loglik_at_mean)
    return {"dic": dbar + p_d, "p_d": p_d, "mean_deviance": dbar}


def waic(pll) -> dict:
    pll = _check_pll(pll)
    s = pll.shape[0]
    lppd_i = logsumexp(pll, axis=0) - np.log(s)
    with np.errstate(invalid="ignore"):
        var_i = np.var(pll, axis=0, ddof=1)
    if np.any(~np.isfinite(var_i)):
        raise DomainError("WAIC undefined: a draw gives zero likelihood to an observation")
    if np.any(var_i > WAIC_VAR_WARN):
        warnings.warn(f"{int(np.sum(var_i > WAIC_VAR_WARN))} WAIC terms have posterior variance "
                      f"above {WAIC_VAR_WARN}; the estimate may be unreliable", RuntimeWarning,
                      stacklevel=2)
    lppd = float(lppd_i.sum())
    p_waic = float(var_i.sum())
    return {"waic": -2 * (lppd - p_waic), "p_waic": p_waic, "lppd": lppd}


def cpo_ls(pll) -> dict:
    """Harmonic-mean CPO per observation and the log-score ``LS = -sum log CPO``.

    ``flagged`` lists columns where one draw carries more than half of the
    importance weight, a sign the harmonic-mean estimate is unstable.
    """
    pll = _check_pll(pll)
    s = pll.shape[0]
    neg = -pll
    lse = logsumexp(neg, axis=0)
    log_cpo = np.log(s) - lse
    top = np.max(neg, axis=0) - lse
    flagged = np.flatnonzero(np.exp(top) > CPO_DOMINANCE)
    return {"cpo": np.exp(log_cpo), "log_cpo": log_cpo, "ls": float(-log_cpo.sum()),
            "flagged": flagged}


def mse_curve(f_hat, f_true) -> dict:
    """Pointwise MSE over replications.

    ``f_hat`` is ``(R, n_points)``; ``f_true`` is ``(n_points,)`` or ``(R, n_points)``.
    """
    f_hat = np.asarray(f_hat, dtype=float)
    f_true = np.asarray(f_true, dtype=float)
    if f_hat.ndim != 2:
        raise DomainError("f_hat must be (replications, points)")
    try:
        err = f_hat - np.broadcast_to(f_true, f_hat.shape)
    except ValueError:
        raise DomainError(f"shape mismatch: {f_hat.shape} vs {f_true.shape}") from None
    mse = np.mean(err ** 2, axis=0)
    return {"mse": mse, "mean": float(mse.mean())}


def se_alpha(alpha_hat, alpha_true):
    out = (np.asarray(alpha_hat, dtype=float) - np.asarray(alpha_true, dtype=float)) ** 2
    return float(out) if np.ndim(out) == 0 else out
