import json
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from qbmm import inference
from qbmm.error_model import fit_with_error
from qbmm.exceptions import CalibrationError, DegenerateError, NumericError
from qbmm.fit_complete import fit
from qbmm.inference import (
    analyze_region, bootstrap_pvalue, coef_covariance, delta_weights, eta_variance, pointwise_ci,
    region_f_test, write_curves_tsv, write_test_json,
)
from qbmm.region_data import ModelSpec
from qbmm.simulate import contaminate, gen_counts

from conftest import toy_region


@pytest.fixture(scope="module")
def fitted():
    reg, _ = toy_region(seed=21, n_samples=20, n_sites=20)
    return reg, fit(reg)


def test_error_free_covariance(fitted):
    reg, f = fitted
    V = coef_covariance(f)
    H = f.xtwx + f.theta.penalty(f.design)
    np.testing.assert_allclose(V, np.linalg.inv(H) * f.phi, rtol=1e-8, atol=1e-12)
    np.testing.assert_array_equal(delta_weights(reg.flat_meth, reg.flat_total, f.pi_hat, (0.0, 1.0)), 0.0)


def test_error_covariance_larger(fitted):
    reg, f = fitted
    V0 = coef_covariance(f)
    V1 = coef_covariance(f, (0.003, 0.9), reg.flat_meth, method="plugin")
    assert np.all(np.diag(V1) >= np.diag(V0) - 1e-12)


def test_misspecified_rates_flagged(fitted):
    reg, f = fitted
    with pytest.raises(NumericError, match="p0 and p1"):
        coef_covariance(f, (0.01, 0.02), reg.flat_meth)


def test_band_multiplier(fitted):
    _, f = fitted
    band = pointwise_ci(f, 1, level=0.95)
    np.testing.assert_allclose((band.upper - band.estimate) / band.se, 1.959964, atol=1e-6)
    assert band.position.size == 101


def test_band_out_of_range(fitted):
    _, f = fitted
    with pytest.raises(Exception, match="outside"):
        pointwise_ci(f, 1, grid=[-1e6])


def test_zero_coefficients_null_statistic(fitted):
    _, f = fitted
    a, b = f.design.blocks[2]
    B = f.B.copy()
    B[a:b] = 0
    g = replace(f, B=B, alpha=tuple(B[x:y] for x, y in f.design.blocks))
    t = region_f_test(g, 2)
    assert t.statistic == 0 and t.p_value == 1.0


def test_f_test_fields(fitted):
    _, f = fitted
    t = region_f_test(f, 1)
    assert t.df_num == pytest.approx(f.edf_per_term[1])
    assert t.df_den == pytest.approx(f.n_obs - f.edf_total)
    assert t.p_value == pytest.approx(stats.f.sf(t.statistic, t.df_num, t.df_den))


def test_degenerate_df(fitted):
    _, f = fitted
    with pytest.raises(DegenerateError):
        region_f_test(f, 1, M=int(f.edf_total))
    g = replace(f, edf_per_term=(0.0,) * f.design.n_terms)
    with pytest.raises(DegenerateError):
        region_f_test(g, 1)


def test_rank_deficient_matches_reduced(fitted, rng):
    _, f = fitted
    p = 1
    a, b = f.design.blocks[p]
    L = b - a
    al = f.alpha[p]
    Q, _ = np.linalg.qr(np.column_stack([al, rng.normal(size=(L, L - 1))]))
    U = Q[:, :3]
    C = np.diag([0.7, 1.3, 2.1])
    cov = np.zeros((f.design.n_coef,) * 2)
    cov[a:b, a:b] = U @ C @ U.T
    t = region_f_test(f, p, cov)
    coords = U.T @ al
    reduced = coords @ np.linalg.solve(C, coords) / f.edf_per_term[p]
    assert t.rank == 3
    assert t.statistic == pytest.approx(reduced, rel=1e-8)


def test_analyze_and_write(fitted, tmp_path):
    reg, f = fitted
    res = analyze_region(reg, ModelSpec(), fit=f)
    assert [t.name for t in res.tests] == ["Z1", "Z2", "Z3"]
    assert len(res.curves) == 4
    res2 = analyze_region(reg, ModelSpec(), covariates=["Z2"], fit=f)
    assert [t.name for t in res2.tests] == ["Z2"]
    with pytest.raises(ValueError):
        analyze_region(reg, ModelSpec(), covariates=["nope"], fit=f)
    write_test_json(res, tmp_path / "r.json")
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["schema_version"] == 1 and len(doc["tests"]) == 3
    write_curves_tsv(res.curves, tmp_path / "c.tsv")
    lines = (tmp_path / "c.tsv").read_text().splitlines()
    assert lines[0].split("\t") == ["term", "position", "estimate", "se", "lo", "hi"]
    assert len(lines) == 1 + 4 * reg.distinct_positions.size


def test_delta_example():
    d = delta_weights(5, 10, 0.5, (0.003, 0.9))
    assert d == pytest.approx(1.7232, abs=1e-4)
    p1, p0 = 0.9, 0.003
    part1 = 5 * p1 * p0 / (p1 * 0.5 + p0 * 0.5) ** 2
    part2 = 5 * (1 - p1) * (1 - p0) / ((1 - p1) * 0.5 + (1 - p0) * 0.5) ** 2
    assert part1 == pytest.approx(0.06624, abs=5e-5)
    assert part2 == pytest.approx(1.65695, abs=5e-5)


def test_covariance_scales_with_phi(fitted):
    reg, f = fitted
    g = replace(f, phi=3.0 * f.phi)
    for method in ("plugin", "sandwich"):
        V = coef_covariance(f, (0.003, 0.9), reg.flat_meth, method=method)
        Vc = coef_covariance(g, (0.003, 0.9), reg.flat_meth, method=method)
        if method == "plugin":
            np.testing.assert_allclose(Vc, 3.0 * V, rtol=1e-10)
        else:
            assert np.trace(Vc) > np.trace(V)
    np.testing.assert_allclose(coef_covariance(g), 3.0 * coef_covariance(f), rtol=1e-10)


def test_unknown_covariance_method(fitted):
    reg, f = fitted
    with pytest.raises(ValueError, match="method"):
        coef_covariance(f, (0.003, 0.9), reg.flat_meth, method="bogus")


def test_sandwich_equals_plugin_at_unit_phi_and_mean_counts(fitted):
    reg, f = fitted
    g = replace(f, phi=1.0)
    rates = (0.003, 0.9)
    Y = f.design.depth * (0.003 + 0.897 * f.pi_hat)
    Vp = coef_covariance(g, rates, Y, method="plugin")
    Vs = coef_covariance(g, rates, Y, method="sandwich")
    np.testing.assert_allclose(Vs, Vp, rtol=1e-6, atol=1e-10)


@pytest.mark.parametrize("phi,pi", [(1.0, 0.3), (3.0, 0.2), (3.0, 0.5), (3.0, 0.8)])
def test_eta_variance_monte_carlo(phi, pi):
    from qbmm.error_model import e_step

    rng = np.random.default_rng(7)
    n, X, rates = 200_000, 30, (0.003, 0.9)
    S = gen_counts(np.full(n, pi), np.full(n, X), phi, rng)
    Y = contaminate(S, np.full(n, X), rates, rng)
    eta = e_step(Y, X, pi, rates)
    assert float(eta_variance(X, pi, phi, rates)) == pytest.approx(eta.var(), rel=0.02)
    delta = delta_weights(X * (0.003 + 0.897 * pi), X, pi, rates)
    ratio = float(eta_variance(X, pi, phi, rates) / (pi * (1 - pi) * (X - delta)))
    if phi == 1.0:
        assert ratio == pytest.approx(1.0, abs=1e-9)
    else:
        assert 1.0 < ratio < phi


def test_statistic_invariant_to_rotation(fitted, rng):
    _, f = fitted
    p = 1
    a, b = f.design.blocks[p]
    V = coef_covariance(f)
    Q, _ = np.linalg.qr(rng.normal(size=(b - a, b - a)))
    R = np.eye(V.shape[0])
    R[a:b, a:b] = Q
    B = f.B.copy()
    B[a:b] = Q @ f.alpha[p]
    alpha = list(f.alpha)
    alpha[p] = B[a:b]
    g = replace(f, B=B, alpha=tuple(alpha))
    t0 = region_f_test(f, p, V)
    t1 = region_f_test(g, p, R @ V @ R.T)
    assert t1.statistic == pytest.approx(t0.statistic, rel=1e-8)
    assert t1.p_value == pytest.approx(t0.p_value, rel=1e-8)


@pytest.fixture(scope="module")
def small():
    reg, _ = toy_region(seed=8, n_samples=12, n_sites=10, phi=1.5, sigma0_sq=0.5)
    return reg


def test_bootstrap_rank_extremes(small):
    spec = ModelSpec()
    lo = bootstrap_pvalue(small, spec, 3, n_boot=99, seed=1, t_obs=0.0)
    assert lo["p_value"] == 1.0
    hi = bootstrap_pvalue(small, spec, 3, n_boot=99, seed=1, t_obs=1e12)
    assert hi["p_value"] == pytest.approx(1.0 / (99 - hi["failures"] + 1))
    np.testing.assert_array_equal(lo["t_boot"], hi["t_boot"])


def test_bootstrap_needs_replicates(small):
    with pytest.raises(ValueError):
        bootstrap_pvalue(small, ModelSpec(), 1, n_boot=50)


def test_bootstrap_failures(small, monkeypatch):
    monkeypatch.setattr(inference, "_replicate", lambda job: None if job[-1] % 3 == 0 else 1.0)
    with pytest.raises(CalibrationError):
        bootstrap_pvalue(small, ModelSpec(), 1, n_boot=99, t_obs=2.0)
    monkeypatch.setattr(inference, "_replicate", lambda job: None if job[-1] % 10 == 0 else 1.0)
    out = bootstrap_pvalue(small, ModelSpec(), 1, n_boot=99, t_obs=2.0)
    assert out["failures"] == 10 and out["p_value"] == pytest.approx(1 / 90)


def test_null_generator_drops_covariate(small):
    gen, nf = inference.null_generator(small, ModelSpec(), 2)
    assert nf.design.n_terms == small.n_covariates
    assert gen.phi >= 1.0
    spec = ModelSpec(basis_ranks=(5, 4, 3, 3))
    assert inference._null_spec(spec, 1).basis_ranks == (5, 3, 3)


def test_error_rates_route(small):
    spec = ModelSpec(error_rates=(0.003, 0.9))
    res = analyze_region(small, spec)
    assert res.fit.n_es >= 1
