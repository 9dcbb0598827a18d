"""Simulation engine: depths, beta-binomial counts, random effects, errors."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import expit, logit

from .error_model import ErrorRates
from .exceptions import DomainError
from .region_data import region_from_arrays


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def gen_depths(profile, n_samples, seed=None):
    """Read depths ``X_ij = profile_j + Bernoulli(0.5)``; shape (N, m)."""
    profile = np.asarray(profile, dtype=int)
    if np.any(profile < 1):
        raise DomainError("depth profile must be positive at every site")
    rng = _rng(seed)
    return profile[None, :] + rng.integers(0, 2, size=(int(n_samples), profile.size))


def gen_counts(pi, X, phi, seed=None):
    """Beta-binomial counts with mean ``X pi`` and variance ``phi X pi (1 - pi)``.

    Uses ``rho = (phi - 1) / (X - 1)``; sites with ``X = 1`` or ``phi = 1`` are
    drawn binomially.

    Raises
    ------
    DomainError
        ``phi < 1`` or ``phi >= X`` at a site with ``X > 1``.
    """
    pi = np.asarray(pi, dtype=float)
    X = np.asarray(X)
    pi, X = np.broadcast_arrays(pi, X)
    if phi < 1:
        raise DomainError(f"phi = {phi:g} < 1 cannot be generated by a beta-binomial")
    rng = _rng(seed)
    p = np.clip(pi, 0.0, 1.0).astype(float)
    if phi > 1:
        over = X > 1
        with np.errstate(divide="ignore", invalid="ignore"):
            rho = np.where(over, (phi - 1.0) / (X - 1.0), 0.0)
        if np.any(rho[over] >= 1):
            raise DomainError(f"phi = {phi:g} needs depth > phi for a valid beta-binomial")
        inner = over & (p > 0) & (p < 1)
        if np.any(inner):
            r = rho[inner]
            a = p[inner] * (1 - r) / r
            b = (1 - p[inner]) * (1 - r) / r
            p = p.copy()
            p[inner] = rng.beta(a, b)
    return rng.binomial(X, p)


def contaminate(S, X, rates, seed=None):
    """Observed counts ``Y = Bin(S, p1) + Bin(X - S, p0)``."""
    rates = ErrorRates.coerce(rates)
    S = np.asarray(S)
    X = np.asarray(X)
    if rates.is_identity:
        return S.copy()
    rng = _rng(seed)
    return rng.binomial(S, rates.p1) + rng.binomial(X - S, rates.p0)


@lru_cache(maxsize=None)
def _table(scenario):
    name = f"scenario{scenario}.json"
    with resources.files("qbmm.data").joinpath(name).open("r", encoding="utf-8") as fh:
        return json.load(fh)


@dataclass(frozen=True)
class CurveSet:
    """Smooth effects on relative position s in [0, 1] (logit scale)."""

    terms: tuple
    covariate_probs: tuple
    label: str = ""
    max_difference: float | None = None

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        return np.stack([f(s) for f in self.terms])

    @property
    def n_covariates(self):
        return len(self.terms) - 1


def _spline(grid, values):
    return CubicSpline(grid, values, bc_type="natural")


def _zero(s):
    return np.zeros_like(np.asarray(s, dtype=float))


def n_settings(scenario):
    if scenario == 1:
        return 1
    if scenario == 2:
        return len(_table(2)["max_difference"])
    raise DomainError(f"unknown scenario {scenario!r}")


def scenario_curves(scenario, setting=0):
    """Curve set for scenario 1, or for setting ``setting`` of scenario 2.

    Scenario 2 setting 0 is the null (identical group curves); settings are
    ordered by increasing maximum group difference on the probability scale.
    """
    if scenario == 1:
        if setting != 0:
            raise DomainError("scenario 1 has a single setting (0)")
        tab = _table(1)
        g = np.asarray(tab["grid"])
        terms = []
        for key in ("beta0", "beta1", "beta2", "beta3"):
            v = np.asarray(tab["terms"][key], dtype=float)
            terms.append(_zero if not np.any(v) else _spline(g, v))
        return CurveSet(tuple(terms), tuple(tab["covariate_probs"]), label="scenario1")
    if scenario == 2:
        tab = _table(2)
        diffs = tab["max_difference"]
        if not 0 <= setting < len(diffs):
            raise DomainError(f"scenario 2 setting must be in 0..{len(diffs) - 1}")
        g = np.asarray(tab["grid"])
        pi1 = np.asarray(tab["pi1"])
        d = float(diffs[setting])
        pi0 = pi1 - d * np.asarray(tab["bump"])
        b0 = logit(pi0)
        b1 = logit(pi1) - b0
        t1 = _zero if not np.any(np.abs(b1) > 0) else _spline(g, b1)
        return CurveSet((_spline(g, b0), t1), tuple(tab["covariate_probs"]),
                        label=f"scenario2/{setting}", max_difference=d)
    raise DomainError(f"unknown scenario {scenario!r}")


@dataclass(frozen=True)
class SimScenario:
    """Generator settings for one simulated region."""

    curves: CurveSet
    n_samples: int = 100
    n_sites: int = 123
    rates: tuple = (0.0, 1.0)
    phi: float = 1.0
    sigma0_sq: float = 0.0
    depth: int = 30
    profile: tuple | None = None
    spacing: float = 10.0
    name: str = "sim"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.phi < 1:
            raise DomainError("phi must be >= 1 for the beta-binomial generator")
        if self.sigma0_sq < 0:
            raise DomainError("sigma0_sq must be non-negative")
        if self.n_samples < 2:
            raise DomainError("need at least two samples")
        ErrorRates.coerce(self.rates)

    @property
    def positions(self):
        return 1.0 + self.spacing * np.arange(self.n_sites)

    @property
    def depth_profile(self):
        if self.profile is not None:
            return np.asarray(self.profile, dtype=int)
        return np.full(self.n_sites, int(self.depth))

    def relative(self, t):
        pos = self.positions
        return (np.asarray(t, dtype=float) - pos[0]) / (pos[-1] - pos[0])

    def true_curves(self, t):
        return self.curves(self.relative(t))

    def manifest(self, seed=None):
        return {
            "curves": self.curves.label,
            "max_difference": self.curves.max_difference,
            "n_samples": self.n_samples,
            "n_sites": self.n_sites,
            "p0": float(ErrorRates.coerce(self.rates).p0),
            "p1": float(ErrorRates.coerce(self.rates).p1),
            "phi": self.phi,
            "sigma0_sq": self.sigma0_sq,
            "depth": self.depth,
            "spacing": self.spacing,
            "seed": seed,
            **self.extra,
        }

    def with_(self, **kw):
        return replace(self, **kw)


def simulate_region(scenario, seed=None, covariates=None):
    """Draw one region.

    Returns
    -------
    region : RegionData
        Observed (possibly contaminated) counts.
    truth : dict
        ``S`` (true counts, flat), ``u`` (random effects), ``pi`` (flat
        conditional means) and ``Z`` (covariates).
    """
    rng = _rng(seed)
    N, m = scenario.n_samples, scenario.n_sites
    cs = scenario.curves
    P = cs.n_covariates
    if covariates is None:
        Z = np.column_stack([rng.binomial(1, pz, size=N) for pz in cs.covariate_probs]).astype(float)
        Z = Z.reshape(N, P)
    else:
        Z = np.asarray(covariates, dtype=float).reshape(N, P)
    X = gen_depths(scenario.depth_profile, N, rng)
    t = scenario.positions
    beta = scenario.true_curves(t)
    u = rng.normal(0.0, np.sqrt(scenario.sigma0_sq), size=N) if scenario.sigma0_sq > 0 else np.zeros(N)
    Zf = np.hstack([np.ones((N, 1)), Z])
    eta = Zf @ beta + u[:, None]
    pi = expit(eta)
    S = gen_counts(pi, X, scenario.phi, rng)
    Y = contaminate(S, X, scenario.rates, rng)
    sidx = np.repeat(np.arange(N), m)
    region = region_from_arrays(
        sidx, np.tile(t, N), X.ravel(), Y.ravel(), Z,
        covariate_names=[f"Z{p + 1}" for p in range(P)], name=scenario.name,
    )
    truth = {"S": S.ravel().astype(float), "u": u, "pi": pi.ravel(), "Z": Z, "beta": beta}
    return region, truth


def replicate_seed(seed, index):
    """Independent child seed for replicate ``index``."""
    return np.random.SeedSequence(seed, spawn_key=(int(index),))
