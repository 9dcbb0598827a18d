"""Numerical self-checks behind the ``validate`` command."""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from . import fit_complete as fc
from .error_model import e_step, phi_from_phi_y, phi_y_from_phi
from .marginal_moments import marginal_mean, normal_logistic_gap
from .quasi_likelihood import penalized_objective, quasi_score
from .region_data import ModelSpec
from .simulate import SimScenario, gen_counts, replicate_seed, scenario_curves, simulate_region


def _check(name, value, passed, **extra):
    out = {"name": name, "value": value, "pass": bool(passed)}
    out.update(extra)
    return out


def check_gap():
    g = normal_logistic_gap()
    return _check("normal_logistic_gap", g, abs(g - 0.00948) <= 2e-4, target=0.00948, tol=2e-4)


def toy_regions(n, seed, n_samples=10, n_sites=20):
    """``n`` small simulated regions; draws with collinear covariates are skipped."""
    sc = SimScenario(scenario_curves(1), n_samples=n_samples, n_sites=n_sites, phi=2.0, sigma0_sq=1.0)
    out, k = [], 0
    while len(out) < n:
        reg = simulate_region(sc, seed=replicate_seed(seed, k))[0]
        k += 1
        Z = np.hstack([np.ones((reg.n_samples, 1)), reg.covariates])
        if np.linalg.matrix_rank(Z) == Z.shape[1]:
            out.append(reg)
    return out


def score_fd_error(region, rng, h=1e-6):
    """Max relative error of the quasi-score against central differences."""
    spec = ModelSpec()
    d = fc.prepare_design(region, spec)
    prob = fc._Problem(d, region.flat_meth, spec)
    theta = prob.theta(fc.initial_rho(prob))
    S = region.flat_meth
    B = rng.normal(0, 0.3, d.n_coef)
    phi = 1.7
    g = quasi_score(B, d, S, theta, phi)
    fd = np.empty_like(g)
    for k in range(B.size):
        e = np.zeros_like(B)
        e[k] = h
        fd[k] = (penalized_objective(B + e, d, S, theta, phi) - penalized_objective(B - e, d, S, theta, phi)) / (2 * h)
    scale = max(np.max(np.abs(fd)), 1.0)
    return float(np.max(np.abs(g - fd)) / scale)


def laplace_fd_error(region, rng, h=1e-5):
    """Max relative error of the outer gradient against central differences."""
    spec = ModelSpec(tol=1e-10)
    d = fc.prepare_design(region, spec)
    prob = fc._Problem(d, region.flat_meth, spec)
    rho = fc.initial_rho(prob) + rng.normal(0, 0.5, prob.n)
    rho = np.clip(rho, prob.lo + 1.0, prob.hi - 1.0)
    st = prob.evaluate(rho, None)
    g, _ = prob.derivatives(st)
    fd = np.empty(prob.n)
    for k in range(prob.n):
        e = np.zeros(prob.n)
        e[k] = h
        fd[k] = (prob.evaluate(rho + e, st.B).L - prob.evaluate(rho - e, st.B).L) / (2 * h)
    scale = max(np.max(np.abs(fd)), 1.0)
    return float(np.max(np.abs(g - fd)) / scale)


def check_gradients(seed, n=5):
    regions = toy_regions(n, seed)
    rng = np.random.default_rng(seed)
    s = max(score_fd_error(r, rng) for r in regions)
    lap = max(laplace_fd_error(r, rng) for r in regions)
    return [
        _check("quasi_score_fd", s, s <= 1e-4, tol=1e-4),
        _check("laplace_gradient_fd", lap, lap <= 1e-3, tol=1e-3),
    ]


def check_generator(seed, draws=100_000):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for phi in (1.0, 3.0):
        for X in (20, 30):
            for pi in (0.3, 0.5):
                S = gen_counts(np.full(draws, pi), np.full(draws, X), phi, rng)
                target = phi * X * pi * (1 - pi)
                worst = max(worst, abs(S.var(ddof=1) / target - 1))
    return _check("beta_binomial_variance", worst, worst <= 0.03, tol=0.03)


def check_error_model():
    eta = float(e_step(5, 10, 0.5, (0.003, 0.9)))
    py = float(phi_y_from_phi(3.0, 0.45, (0.003, 0.9)))
    grid = np.linspace(0.01, 0.89, 50)
    rt = float(np.max(np.abs(phi_from_phi_y(phi_y_from_phi(2.5, grid, (0.003, 0.9)), grid, (0.003, 0.9)) - 2.5)))
    return [
        _check("e_step_example", eta, abs(eta - 5.4392) < 1e-4, target=5.4392),
        _check("phi_y_example", py, abs(py - 2.6254) < 1e-4, target=2.6254),
        _check("phi_y_round_trip", rt, rt < 1e-12, tol=1e-12),
    ]


def marginal_mean_surface(seed, draws=200_000):
    """Error of the closed-form marginal mean over a grid (informational)."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(draws)
    etas = np.arange(-6, 7)
    s2s = np.array([0.0, 1.0, 3.0, 9.0])
    err = np.empty((s2s.size, etas.size))
    for a, s2 in enumerate(s2s):
        u = np.sqrt(s2) * z
        for b, eta in enumerate(etas):
            err[a, b] = abs(float(marginal_mean(eta, s2)) - float(expit(eta + u).mean()))
    return {
        "name": "marginal_mean_error_surface",
        "informational": True,
        "eta": etas.tolist(),
        "sigma0_sq": s2s.tolist(),
        "abs_error": err.tolist(),
        "within_0.001": (err <= 1e-3).tolist(),
        "max_error": float(err.max()),
    }


def check_fletcher(seed, n_rep=30):
    sc = SimScenario(scenario_curves(1), n_samples=50, n_sites=60, phi=3.0, sigma0_sq=0.0)
    vals = []
    for k in range(n_rep):
        reg, _ = simulate_region(sc, seed=replicate_seed(seed, k))
        vals.append(fc.fit(reg).phi_fletcher)
    m = float(np.mean(vals))
    return _check("fletcher_mean_phi3", m, abs(m / 3.0 - 1) <= 0.05, target=3.0, tol=0.05,
                  replicates=n_rep)


def run_validation(seed=0, quick=False):
    """Run every check; returns ``(report, all_passed)``."""
    checks = [check_gap()]
    checks += check_gradients(seed, n=3 if quick else 10)
    checks.append(check_generator(seed, draws=20_000 if quick else 100_000))
    checks += check_error_model()
    checks.append(check_fletcher(seed, n_rep=10 if quick else 30))
    info = [marginal_mean_surface(seed)]
    ok = all(c["pass"] for c in checks)
    report = {
        "schema_version": 1,
        "seed": seed,
        "all_pass": ok,
        "checks": checks,
        "informational": info,
    }
    return report, ok
