"""Coefficient covariance, pointwise bands, regional F-tests and bootstrap."""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, stats

from .error_model import ErrorRates, fit_with_error, phi_y_from_phi
from .exceptions import CalibrationError, DegenerateError, NumericError, QBMMError
from .simulate import contaminate, gen_counts

SCHEMA_VERSION = 1
PINV_RTOL = 1e-8


def delta_weights(Y, X, pi, rates):
    """Missing-information factor delta per observation.

    ``delta = Y p1 p0 / [p1 pi + p0 (1 - pi)]^2
    + (X - Y)(1 - p1)(1 - p0) / [(1 - p1) pi + (1 - p0)(1 - pi)]^2``.
    """
    r = ErrorRates.coerce(rates)
    Y = np.asarray(Y, dtype=float)
    X = np.asarray(X, dtype=float)
    pi = np.asarray(pi, dtype=float)
    a = r.p1 * pi + r.p0 * (1 - pi)
    b = (1 - r.p1) * pi + (1 - r.p0) * (1 - pi)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = np.where(a > 0, Y * r.p1 * r.p0 / a**2, 0.0)
        t2 = np.where(b > 0, (X - Y) * (1 - r.p1) * (1 - r.p0) / b**2, 0.0)
    return t1 + t2


def eta_variance(X, pi, phi, rates):
    """Variance of the E-step pseudo-count ``eta_hat`` given ``S ~ phi``-overdispersed.

    ``eta_hat = a Y + b (X - Y)`` is linear in ``Y``, so
    ``Var(eta_hat) = (a - b)^2 phi_Y X pi_Y (1 - pi_Y)`` with
    ``a = p1 pi / pi_Y``, ``b = (1 - p1) pi / (1 - pi_Y)`` and
    ``pi_Y = p0 + (p1 - p0) pi``.
    """
    r = ErrorRates.coerce(rates)
    X = np.asarray(X, dtype=float)
    pi = np.asarray(pi, dtype=float)
    pi_y = r.observed_mean(pi)
    a = r.p1 * pi / pi_y
    b = (1 - r.p1) * pi / (1 - pi_y)
    phi_y = phi_y_from_phi(phi, pi_y, r)
    return (a - b) ** 2 * phi_y * X * pi_y * (1 - pi_y)


def coef_covariance(fit, rates=(0.0, 1.0), Y=None, method="sandwich"):
    """Covariance of B_hat under an error channel.

    ``D = X'(W - W_delta)X + Sigma`` is the observed-data information, with
    ``W_delta = diag(delta pi (1 - pi))`` the information lost to the error
    channel. ``method="plugin"`` returns ``D^-1 phi``. ``method="sandwich"``
    (default) returns ``D^-1 [X' V_eta X + phi Sigma] D^-1`` with ``V_eta``
    from :func:`eta_variance`; overdispersion generated before the error
    channel is damped by it, so ``phi D^-1`` overstates the variance when
    ``phi > 1``. Both forms equal ``phi H^-1`` for error-free rates and agree
    in expectation when ``phi = 1``.

    Raises
    ------
    NumericError
        ``D`` is not positive definite, which points at misspecified error
        rates.
    """
    if method not in ("sandwich", "plugin"):
        raise ValueError(f"unknown covariance method {method!r}")
    r = ErrorRates.coerce(rates)
    if r.is_identity:
        return fit.hessian_inv * fit.phi
    Y = fit.observed if Y is None else np.asarray(Y, dtype=float)
    if Y is None:
        raise ValueError("observed counts are needed for the error-corrected covariance")
    d = fit.design
    pi = fit.pi_hat
    w = d.depth * pi * (1 - pi) - delta_weights(Y, d.depth, pi, r) * pi * (1 - pi)
    pen = fit.theta.penalty(d)
    info = d.gram(w) + pen
    try:
        c = linalg.cho_factor(info, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise NumericError(
            "error-corrected information is not positive definite; check p0 and p1"
        ) from exc
    Dinv = linalg.cho_solve(c, np.eye(info.shape[0]), check_finite=False)
    if method == "plugin":
        return Dinv * fit.phi
    meat = d.gram(eta_variance(d.depth, pi, fit.phi, r)) + fit.phi * pen
    V = Dinv @ meat @ Dinv
    return 0.5 * (V + V.T)


@dataclass
class CurveBand:
    """Pointwise band for one smooth term on a position grid."""

    name: str
    position: np.ndarray
    estimate: np.ndarray
    se: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float


def pointwise_ci(fit, p, grid=None, level=0.95, cov=None, name=None):
    """Pointwise confidence band ``beta_p(t) +- z sqrt(b(t)' V_p b(t))``."""
    d = fit.design
    if grid is None:
        knots = d.bases[p].knots
        grid = np.linspace(knots[0], knots[-1], 101)
    grid = np.asarray(grid, dtype=float)
    Bt = d.term_matrix(p, grid)
    a, b = d.blocks[p]
    V = (coef_covariance(fit) if cov is None else cov)[a:b, a:b]
    est = Bt @ fit.alpha[p]
    se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", Bt, V, Bt), 0.0))
    z = stats.norm.ppf(0.5 + level / 2.0)
    nm = name or (fit.term_names[p] if p < len(fit.term_names) else f"beta{p}")
    return CurveBand(nm, grid, est, se, est - z * se, est + z * se, level)


@dataclass
class CovariateTest:
    name: str
    index: int
    statistic: float
    df_num: float
    df_den: float
    p_value: float
    rank: int
    bootstrap_p: float | None = None
    bootstrap_failures: int | None = None

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def region_f_test(fit, p, cov=None, M=None):
    """Regional F-test of H0: beta_p(t) = 0.

    ``T_p = alpha_p' V_p^+ alpha_p / tau_p`` with a Moore-Penrose inverse
    (relative tolerance 1e-8), referred to F(tau_p, M - tau).

    Raises
    ------
    DegenerateError
        ``tau_p <= 0`` or ``M <= tau``.
    """
    d = fit.design
    M = d.n_obs if M is None else int(M)
    tau_p = float(fit.edf_per_term[p])
    df2 = M - float(fit.edf_total)
    if not tau_p > 0:
        raise DegenerateError(f"tau_p = {tau_p:g} is not positive")
    if not df2 > 0:
        raise DegenerateError(f"M - tau = {df2:g} is not positive")
    a, b = d.blocks[p]
    V = (coef_covariance(fit) if cov is None else cov)[a:b, a:b]
    V = 0.5 * (V + V.T)
    ev = np.linalg.eigvalsh(V)
    top = float(np.max(np.abs(ev), initial=0.0))
    rank = int(np.sum(ev > PINV_RTOL * top)) if top > 0 else 0
    Vp = np.linalg.pinv(V, rcond=PINV_RTOL, hermitian=True)
    al = fit.alpha[p]
    T = float(al @ Vp @ al) / tau_p
    pval = float(stats.f.sf(T, tau_p, df2)) if T > 0 else 1.0
    name = fit.term_names[p] if p < len(fit.term_names) else f"Z{p}"
    return CovariateTest(name, p, T, tau_p, df2, min(max(pval, 0.0), 1.0), rank)


@dataclass
class RegionTest:
    """Tests and curve bands for one region."""

    region: str
    tests: list
    curves: list
    fit: object = field(repr=False)
    n_obs: int = 0

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "region": self.region,
            "n_obs": self.n_obs,
            "fit": _jsonable(self.fit.summary()),
            "tests": [_jsonable(t.to_dict()) for t in self.tests],
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def select_terms(fit, covariates=None):
    """Indices of covariate terms (p >= 1), optionally filtered by name."""
    idx = list(range(1, fit.design.n_terms))
    if covariates:
        wanted = set(covariates)
        names = fit.term_names
        unknown = wanted - set(names[1:])
        if unknown:
            raise ValueError(f"unknown covariate(s): {', '.join(sorted(unknown))}")
        idx = [p for p in idx if names[p] in wanted]
    return idx


def analyze_region(region, spec, covariates=None, level=0.95, grid=None, fit=None):
    """Fit (unless given) and test every covariate term of ``region``."""
    fit = fit or fit_with_error(region, spec)
    cov = coef_covariance(fit, spec.error_rates)
    tests = [region_f_test(fit, p, cov) for p in select_terms(fit, covariates)]
    if grid is None:
        grid = region.distinct_positions
    curves = [pointwise_ci(fit, p, grid, level, cov) for p in range(fit.design.n_terms)]
    return RegionTest(region.name, tests, curves, fit, fit.design.n_obs)


def write_test_json(result, path):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(result.to_dict(), fh, indent=2)
    os.replace(tmp, path)


def write_curves_tsv(curves, path):
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["term", "position", "estimate", "se", "lo", "hi"])
        for c in curves:
            for row in zip(c.position, c.estimate, c.se, c.lower, c.upper):
                w.writerow([c.name] + [f"{v:.10g}" for v in row])
    os.replace(tmp, path)


# parametric bootstrap -----------------------------------------------------

def _null_spec(spec, p):
    if spec.basis_ranks is None:
        return spec
    ranks = list(spec.basis_ranks)
    del ranks[p]
    return replace(spec, basis_ranks=tuple(ranks))


@dataclass(frozen=True)
class _Generator:
    eta: np.ndarray
    depth: np.ndarray
    sample_index: np.ndarray
    n_samples: int
    phi: float
    sigma0_sq: float
    rates: tuple

    def draw(self, rng):
        u = rng.normal(0.0, np.sqrt(self.sigma0_sq), self.n_samples) if self.sigma0_sq > 0 else 0.0
        eta = self.eta + (u[self.sample_index] if self.sigma0_sq > 0 else 0.0)
        pi = 1.0 / (1.0 + np.exp(-eta))
        S = gen_counts(pi, self.depth.astype(int), self.phi, rng)
        return contaminate(S, self.depth.astype(int), self.rates, rng).astype(float)


def null_generator(region, spec, p):
    """Fit the model without covariate ``p`` and return its generator."""
    null_region = region.drop_covariate(p - 1)
    nf = fit_with_error(null_region, _null_spec(spec, p))
    d = nf.design
    eta = d.XB @ nf.B[: d.n_fixed]
    gen = _Generator(
        eta=eta, depth=region.flat_total, sample_index=region.sample_index,
        n_samples=region.n_samples, phi=max(float(nf.phi), 1.0),
        sigma0_sq=float(nf.sigma0_sq), rates=tuple(spec.error_rates),
    )
    return gen, nf


def _replicate(args):
    region, spec, p, gen, seed, idx = args
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(int(idx),)))
    try:
        Y = gen.draw(rng)
        rep = region.with_meth(Y)
        f = fit_with_error(rep, spec)
        cov = coef_covariance(f, spec.error_rates)
        return region_f_test(f, p, cov).statistic
    except (QBMMError, np.linalg.LinAlgError, FloatingPointError, ValueError):
        return None


def bootstrap_pvalue(region, spec, p, n_boot=199, seed=0, t_obs=None, n_workers=1):
    """Parametric-bootstrap p-value for covariate term ``p`` (1-based over Z).

    Returns
    -------
    dict
        ``p_value = (1 + #{T* >= T_obs}) / (B_ok + 1)``, ``t_obs``,
        ``t_boot`` (successful draws) and ``failures``.

    Raises
    ------
    CalibrationError
        More than 20% of bootstrap refits failed.
    """
    if n_boot < 99:
        raise ValueError("need at least 99 bootstrap replicates")
    if t_obs is None:
        f = fit_with_error(region, spec)
        t_obs = region_f_test(f, p, coef_covariance(f, spec.error_rates)).statistic
    gen, _ = null_generator(region, spec, p)
    jobs = [(region, spec, p, gen, seed, b) for b in range(n_boot)]
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as ex:
            draws = list(ex.map(_replicate, jobs, chunksize=max(1, n_boot // (4 * n_workers))))
    else:
        draws = [_replicate(j) for j in jobs]
    ok = np.array([t for t in draws if t is not None], dtype=float)
    failures = n_boot - ok.size
    if failures > 0.2 * n_boot:
        raise CalibrationError(f"{failures} of {n_boot} bootstrap refits failed")
    pval = (1.0 + float(np.sum(ok >= t_obs))) / (ok.size + 1.0)
    return {"p_value": pval, "t_obs": float(t_obs), "t_boot": ok, "failures": int(failures)}
