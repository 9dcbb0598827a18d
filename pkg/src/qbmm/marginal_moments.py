"""Approximate marginal mean and variance implied by the mixed model."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit
from scipy.stats import norm

C_PROBIT = np.sqrt(3.41) / np.pi


def attenuation(sigma0_sq):
    """``a = (1 + c^2 sigma0^2)^(-1/2)`` with ``c = sqrt(3.41) / pi``."""
    return 1.0 / np.sqrt(1.0 + C_PROBIT**2 * np.asarray(sigma0_sq, dtype=float))


def marginal_mean(eta, sigma0_sq):
    """Population-averaged mean ``g(a eta)``."""
    return expit(attenuation(sigma0_sq) * np.asarray(eta, dtype=float))


def conditional_from_marginal(pi_m, sigma0_sq):
    """Map a marginal mean back to the RE-at-zero mean ``g(g^-1(pi_m) / a)``."""
    return expit(logit(np.asarray(pi_m, dtype=float)) / attenuation(sigma0_sq))


@dataclass
class MarginalSummary:
    pi_star: np.ndarray
    pi_marginal: np.ndarray
    attenuation: float
    var_marginal: np.ndarray
    phi_star: np.ndarray
    floored: bool


def marginal_variance(eta, X, phi, sigma0_sq):
    """Second-order marginal variance of S.

    ``X pi*(1 - pi*) phi*`` with
    ``phi* = phi + s2 (X - phi) v + s2/2 (1 - 2 pi*)^2 [1 + s2 v (X - phi - 1/2)]``,
    ``v = pi*(1 - pi*)`` and ``pi* = g(eta)``. Negative values (a truncation
    artifact at extreme ``sigma0_sq``) are floored at the binomial variance
    with a warning.

    Returns
    -------
    MarginalSummary
    """
    eta = np.asarray(eta, dtype=float)
    X = np.asarray(X, dtype=float)
    s2 = float(sigma0_sq)
    ps = expit(eta)
    v = ps * (1 - ps)
    phi_star = phi + s2 * (X - phi) * v + 0.5 * s2 * (1 - 2 * ps) ** 2 * (1 + s2 * v * (X - phi - 0.5))
    var = X * v * phi_star
    neg = var < 0
    if np.any(neg):
        warnings.warn("negative marginal variance approximation floored at binomial variance")
        var = np.where(neg, X * v, var)
    return MarginalSummary(
        pi_star=ps, pi_marginal=marginal_mean(eta, s2), attenuation=float(attenuation(s2)),
        var_marginal=var, phi_star=phi_star, floored=bool(np.any(neg)),
    )


def normal_logistic_gap(lo=-10.0, hi=10.0, step=1e-4):
    """Largest ``|g(x) - Phi(c x)|`` on a grid over ``[lo, hi]``."""
    x = np.arange(lo, hi + step / 2, step)
    return float(np.max(np.abs(expit(x) - norm.cdf(C_PROBIT * x))))
