"""Measurement-error layer: expected counts, dispersion mapping and the ES fit."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConvergenceError, DegenerateError, DomainError, FeasibilityError, IdentifiabilityError

BAND_EPS = 1e-6


@dataclass(frozen=True)
class ErrorRates:
    """False-positive call rate ``p0`` and true-positive call rate ``p1``."""

    p0: float = 0.0
    p1: float = 1.0

    def __post_init__(self):
        p0, p1 = float(self.p0), float(self.p1)
        if p0 == p1:
            raise IdentifiabilityError("p0 == p1: observed counts carry no information")
        if not (0.0 <= p0 < p1 <= 1.0):
            raise DomainError(f"need 0 <= p0 < p1 <= 1, got p0={p0:g}, p1={p1:g}")
        object.__setattr__(self, "p0", p0)
        object.__setattr__(self, "p1", p1)

    @property
    def is_identity(self):
        return self.p0 == 0.0 and self.p1 == 1.0

    @classmethod
    def coerce(cls, rates):
        if isinstance(rates, cls):
            return rates
        p0, p1 = rates
        return cls(p0, p1)

    def observed_mean(self, pi):
        """Mean call probability ``p0 + (p1 - p0) pi`` on the observed scale."""
        return self.p0 + (self.p1 - self.p0) * np.asarray(pi, dtype=float)


def e_step(Y, X, pi_star, rates):
    """Expected true counts given observed counts.

    ``eta = Y p1 pi / (p1 pi + p0 (1 - pi))
    + (X - Y)(1 - p1) pi / ((1 - p1) pi + (1 - p0)(1 - pi))``.
    """
    r = ErrorRates.coerce(rates)
    Y = np.asarray(Y, dtype=float)
    X = np.asarray(X, dtype=float)
    pi = np.asarray(pi_star, dtype=float)
    if r.is_identity:
        return Y.copy()
    with np.errstate(divide="ignore", invalid="ignore"):
        num1 = r.p1 * pi
        f1 = np.where(num1 > 0, num1 / (num1 + r.p0 * (1 - pi)), 0.0)
        num2 = (1 - r.p1) * pi
        f2 = np.where(num2 > 0, num2 / (num2 + (1 - r.p0) * (1 - pi)), 0.0)
    return np.clip(Y * f1 + (X - Y) * f2, 0.0, X)


def _band_ratio(pi_y, r):
    return (pi_y - r.p0) * (r.p1 - pi_y) / (pi_y * (1 - pi_y))


def _check_band(pi_y, r):
    pi_y = np.asarray(pi_y, dtype=float)
    if np.any(pi_y <= r.p0) or np.any(pi_y >= r.p1) or np.any(pi_y <= 0) or np.any(pi_y >= 1):
        raise FeasibilityError(
            f"observed-scale mean outside the feasible band ({r.p0:g}, {r.p1:g})"
        )
    return pi_y


def phi_y_from_phi(phi, pi_y, rates):
    """Site-level dispersion of the observed counts given the true dispersion."""
    r = ErrorRates.coerce(rates)
    if r.is_identity:
        return np.full(np.shape(pi_y), float(phi))
    pi_y = _check_band(pi_y, r)
    return 1.0 + (phi - 1.0) * _band_ratio(pi_y, r)


def phi_from_phi_y(phi_y, pi_y, rates):
    """Inverse of :func:`phi_y_from_phi`."""
    r = ErrorRates.coerce(rates)
    if r.is_identity:
        return np.asarray(phi_y, dtype=float)
    pi_y = _check_band(pi_y, r)
    return 1.0 + (np.asarray(phi_y, dtype=float) - 1.0) / _band_ratio(pi_y, r)


def plugin_phi(phi_y_hat, pi_y_hat, rates):
    """Plug-in true-count dispersion from an observed-scale estimate.

    ``phi = (phi_y - 1) / mean(ratio) + 1`` where the ratio is evaluated at
    ``pi_y_hat`` clamped into ``(p0 + 1e-6, p1 - 1e-6)``.

    Raises
    ------
    DegenerateError
        Mean ratio is not positive.
    """
    r = ErrorRates.coerce(rates)
    if r.is_identity:
        return float(phi_y_hat)
    pi_y = np.clip(np.asarray(pi_y_hat, dtype=float), r.p0 + BAND_EPS, r.p1 - BAND_EPS)
    pi_y = np.clip(pi_y, BAND_EPS, 1 - BAND_EPS)
    m = float(np.mean(_band_ratio(pi_y, r)))
    if not m > 0:
        raise DegenerateError("mean dispersion ratio is not positive")
    return (float(phi_y_hat) - 1.0) / m + 1.0


def fit_with_error(region, spec=None):
    """Hybrid ES fit for error-prone counts.

    Step 1 fits the complete-data model to the observed counts, giving the
    observed-scale dispersion. Step 2 maps it to the plug-in true-count
    dispersion, which is then frozen. Step 3 alternates expected counts and
    penalized solves (variance components re-estimated, phi fixed) until the
    coefficient change drops below ``spec.tol``.

    Returns
    -------
    FitResult
        ``phi`` is the plug-in estimate, ``phi_y`` the Step-1 estimate and
        ``n_es`` the number of ES iterations.

    Raises
    ------
    ConvergenceError
        ES loop exceeded ``spec.max_es_iter``.
    """
    from .fit_complete import fit, fit_counts
    from .region_data import ModelSpec

    spec = spec or ModelSpec()
    rates = ErrorRates(*spec.error_rates)
    first = fit(region, spec)
    first.phi_y = first.phi_fletcher
    first.n_es = 0
    if rates.is_identity:
        return first
    Y = region.flat_meth
    X = region.flat_total
    if first.degenerate:
        counts = np.zeros_like(Y) if np.all(Y <= 0) else X.astype(float)
        first.counts = counts
        return first
    phi = plugin_phi(first.phi_fletcher, first.pi_hat, rates)
    phi = max(phi, spec.phi_floor)
    cur = first
    design = first.design
    names = first.term_names
    for it in range(1, spec.max_es_iter + 1):
        eta = e_step(Y, X, cur.pi_hat, rates)
        nxt = fit_counts(design, eta, spec, init=cur, fixed_phi=phi, term_names=names,
                         region_name=region.name)
        design = nxt.design
        dB = _coef_change(nxt, cur)
        cur = nxt
        if dB < spec.tol:
            cur.n_es = it
            cur.phi_y = first.phi_fletcher
            cur.phi_lik = first.phi_lik
            cur.observed = Y
            return cur
    raise ConvergenceError(f"ES loop did not converge in {spec.max_es_iter} iterations", last=cur.B)


def _coef_change(a, b):
    if a.B.size == b.B.size:
        return float(np.linalg.norm(a.B - b.B))
    K = a.design.n_fixed
    return float(np.linalg.norm(a.B[:K] - b.B[:K]) + np.linalg.norm(b.B[K:]))
