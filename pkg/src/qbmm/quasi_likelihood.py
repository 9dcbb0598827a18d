"""Quasi-binomial deviance, score, Hessian and the Laplace objective.

Variance components are stored on a dispersion-free scale: the penalty
matrix is ``Sigma = Diag{lam_0 A_0, ..., lam_P A_P, I / sigma0_sq}`` and the
penalized quasi-likelihood is ``-(D(B) + B' Sigma B) / (2 phi)``. With this
parameterization the mode B_hat does not depend on phi. The random-effect
variance on the data scale is ``phi * sigma0_sq``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import expit, xlogy

from .exceptions import DomainError, NumericError

PI_CLAMP = 1e-8


@dataclass(frozen=True)
class VarianceComponents:
    """Smoothing parameters ``lam`` (one per term) and RE scale ``sigma0_sq``.

    ``sigma0_sq`` is dispersion-free; ``None`` or 0 means the random effect
    has been profiled out.
    """

    lam: tuple
    sigma0_sq: float | None = 1.0

    def __post_init__(self):
        lam = tuple(float(v) for v in np.atleast_1d(self.lam))
        if any(not np.isfinite(v) or v <= 0 for v in lam):
            raise DomainError("smoothing parameters must be positive and finite")
        if self.sigma0_sq is not None and self.sigma0_sq < 0:
            raise DomainError("sigma0_sq must be non-negative")
        object.__setattr__(self, "lam", lam)

    def penalty(self, design):
        return design.penalty(self.lam, self.sigma0_sq)


def fitted_mean(eta):
    """Inverse logit clamped to [1e-8, 1 - 1e-8]."""
    eta = np.asarray(eta, dtype=float)
    if not np.all(np.isfinite(eta)):
        raise NumericError("non-finite linear predictor")
    return np.clip(expit(eta), PI_CLAMP, 1.0 - PI_CLAMP)


def quasi_deviance(S, X, pi):
    """Binomial quasi-deviance per observation (0 log 0 = 0).

    Parameters
    ----------
    S : array_like
        Counts; need not be integer.
    X : array_like
        Depths.
    pi : array_like
        Means strictly inside (0, 1).

    Returns
    -------
    ndarray
        ``2 [S log(S / (X pi)) + (X - S) log((X - S) / (X (1 - pi)))]``.
    """
    S = np.asarray(S, dtype=float)
    X = np.asarray(X, dtype=float)
    pi = np.asarray(pi, dtype=float)
    if np.any(~(pi > 0) | ~(pi < 1)):
        raise DomainError("pi must lie strictly inside (0, 1)")
    R = X - S
    d = 2.0 * (xlogy(S, S) - xlogy(S, X * pi) + xlogy(R, R) - xlogy(R, X * (1.0 - pi)))
    return np.maximum(d, 0.0)


def _sigma(design, theta):
    return theta if isinstance(theta, np.ndarray) else theta.penalty(design)


def quasi_score(B, design, S, theta, phi=1.0):
    """Penalized quasi-score ``(X'(S - X pi) - Sigma B) / phi``."""
    B = np.asarray(B, dtype=float)
    pi = fitted_mean(design.linear_predictor(B))
    resid = S - design.depth * pi
    return (design.rmatvec(resid) - _sigma(design, theta) @ B) / phi


def working_weights(pi, depth):
    return depth * pi * (1.0 - pi)


def score_hessian(B, design, theta, phi=1.0):
    """``(X' W X + Sigma) / phi``, minus the Jacobian of the score."""
    pi = fitted_mean(design.linear_predictor(np.asarray(B, dtype=float)))
    H = design.gram(working_weights(pi, design.depth)) + _sigma(design, theta)
    return H / phi


def penalized_objective(B, design, S, theta, phi=1.0):
    """Joint penalized quasi-log-likelihood ``-(D + B' Sigma B) / (2 phi)``."""
    B = np.asarray(B, dtype=float)
    pi = fitted_mean(design.linear_predictor(B))
    D = quasi_deviance(S, design.depth, pi).sum()
    return -(D + B @ _sigma(design, theta) @ B) / (2.0 * phi)


def laplace_objective(B_hat, design, S, theta, phi=1.0):
    """Log Laplace-approximated marginal quasi-likelihood, up to a constant.

    ``-(M/2) log phi - (D + B'Sigma B)/(2 phi) + 1/2 log|Sigma/phi|_+
    - 1/2 log|(X'WX + Sigma)/phi|``, evaluated at the inner mode ``B_hat``.

    Raises
    ------
    NumericError
        The Hessian at ``B_hat`` is not positive definite.
    """
    if not isinstance(theta, VarianceComponents):
        raise TypeError("theta must be VarianceComponents")
    B_hat = np.asarray(B_hat, dtype=float)
    Sigma = theta.penalty(design)
    pi = fitted_mean(design.linear_predictor(B_hat))
    D = quasi_deviance(S, design.depth, pi).sum()
    H = design.gram(working_weights(pi, design.depth)) + Sigma
    logdet_H = _chol_logdet(H)
    logdet_S, rank_S = design.penalty_logdet(theta.lam, theta.sigma0_sq)
    M, q = design.n_obs, design.n_coef
    logphi = np.log(phi)
    return float(
        -0.5 * M * logphi
        - (D + B_hat @ Sigma @ B_hat) / (2.0 * phi)
        + 0.5 * (logdet_S - rank_S * logphi)
        - 0.5 * (logdet_H - q * logphi)
    )


def _chol_logdet(H):
    try:
        c, low = linalg.cho_factor(H, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise NumericError("Hessian is not positive definite at the inner mode") from exc
    d = np.diag(c)
    if not np.all(np.isfinite(d)) or np.any(d <= 0):
        raise NumericError("Hessian is not positive definite at the inner mode")
    return float(2.0 * np.sum(np.log(d)))
