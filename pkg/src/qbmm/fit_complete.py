"""Nested optimization of the Laplace objective on complete counts.

The inner loop is a penalized Newton (P-IRLS) solve for B given the variance
components. The outer loop is a safeguarded Newton ascent on
``rho = (log lam_0, ..., log lam_P, log sigma0_sq, log phi)`` using the exact
implicit-differentiation gradient and a fixed-weight analytic Hessian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .basis import bases_for_region, build_design
from .exceptions import ConvergenceError, DegenerateError, NumericError
from .quasi_likelihood import (
    PI_CLAMP,
    VarianceComponents,
    fitted_mean,
    quasi_deviance,
    working_weights,
)
from .region_data import ModelSpec

SIGMA_BOUNDARY = 1e-8
LOG_LAM_SPAN = 15.0
LOG_SIGMA_BOUNDS = (math.log(SIGMA_BOUNDARY), math.log(1e4))
LOG_PHI_BOUNDS = (math.log(1e-4), math.log(1e4))
MAX_STEP = 5.0
MAX_HALVINGS = 30
GRAD_TOL = 1e-4


@dataclass
class FitResult:
    """Estimates from one region fit.

    ``theta`` is on the dispersion-free scale; :attr:`sigma0_sq` gives the
    random-effect variance on the logit scale, ``phi * theta.sigma0_sq``.
    """

    B: np.ndarray
    alpha: tuple
    u: np.ndarray
    theta: VarianceComponents
    phi: float
    phi_lik: float | None
    phi_fletcher: float
    phi_pearson: float
    a_bar: float
    phi_floored: bool
    edf_total: float
    edf_per_term: tuple
    design: object = field(repr=False)
    counts: np.ndarray = field(repr=False)
    pi_hat: np.ndarray = field(repr=False)
    xtwx: np.ndarray = field(repr=False)
    hessian_inv: np.ndarray = field(repr=False)
    rho: np.ndarray = field(repr=False)
    laplace: float = float("nan")
    converged: bool = True
    n_outer: int = 0
    n_inner: int = 0
    objective_trace: list = field(default_factory=list, repr=False)
    re_profiled: bool = False
    degenerate: bool = False
    n_es: int | None = None
    phi_y: float | None = None
    term_names: tuple = ()
    region_name: str = "region"
    observed: np.ndarray | None = field(default=None, repr=False)

    @property
    def sigma0_sq(self):
        if self.re_profiled or self.theta.sigma0_sq is None:
            return 0.0
        return float(self.phi * self.theta.sigma0_sq)

    @property
    def n_obs(self):
        return self.design.n_obs

    @property
    def resid_df(self):
        return self.n_obs - self.edf_total

    def curve(self, p, t):
        """Fitted beta_p at positions ``t``."""
        return self.design.term_matrix(p, t) @ self.alpha[p]

    def summary(self):
        return {
            "region": self.region_name,
            "phi_fletcher": self.phi_fletcher,
            "phi_lik": self.phi_lik,
            "phi": self.phi,
            "phi_floored": self.phi_floored,
            "sigma0_sq": self.sigma0_sq,
            "lambda": list(self.theta.lam),
            "edf_total": self.edf_total,
            "edf_per_term": list(self.edf_per_term),
            "converged": self.converged,
            "n_outer": self.n_outer,
            "n_inner": self.n_inner,
            "n_es": self.n_es,
            "re_profiled": self.re_profiled,
            "degenerate": self.degenerate,
            "laplace": self.laplace,
        }


def _objective(design, S, Sigma, B):
    pi = fitted_mean(design.linear_predictor(B))
    return quasi_deviance(S, design.depth, pi).sum() + B @ Sigma @ B


def inner_solve(design, S, theta, phi=1.0, B_init=None, tol=1e-6, max_iter=100):
    """Penalized Newton solve for the mode of the joint quasi-likelihood.

    ``phi`` is accepted for symmetry with the score; the mode does not depend
    on it. ``theta`` may be VarianceComponents or the penalty matrix itself.

    Returns
    -------
    B : ndarray
        Mode with ``max|X'(S - X pi) - Sigma B| < tol (1 + max S)`` or Newton
        decrement ``g' H^-1 g < tol^2 (1 + |J|)``.
    n_iter : int
        Newton steps taken.

    Raises
    ------
    ConvergenceError
        ``max_iter`` reached; ``last`` carries the final iterate.
    """
    Sigma = theta if isinstance(theta, np.ndarray) else theta.penalty(design)
    q = design.n_coef
    B = np.zeros(q) if B_init is None else np.array(B_init, dtype=float)
    S = np.asarray(S, dtype=float)
    thresh = tol * (1.0 + float(np.max(S, initial=0.0)))
    J = _objective(design, S, Sigma, B)
    for it in range(max_iter + 1):
        pi = fitted_mean(design.linear_predictor(B))
        g = design.rmatvec(S - design.depth * pi) - Sigma @ B
        gmax = float(np.max(np.abs(g)))
        if gmax < thresh:
            return B, it
        if it == max_iter:
            break
        H = design.gram(working_weights(pi, design.depth)) + Sigma
        try:
            step = linalg.cho_solve(linalg.cho_factor(H, check_finite=False), g, check_finite=False)
        except linalg.LinAlgError as exc:
            raise NumericError("penalized Hessian is not positive definite") from exc
        if float(g @ step) < tol**2 * (1.0 + abs(J)):
            # Newton decrement below tolerance: a huge penalty can leave the raw
            # gradient at a roundoff floor above ``thresh``
            return B, it
        t = 1.0
        for _ in range(MAX_HALVINGS + 1):
            Bn = B + t * step
            try:
                Jn = _objective(design, S, Sigma, Bn)
            except NumericError:
                Jn = np.inf
            if Jn <= J + 1e-9 * (1.0 + abs(J)):
                break
            t *= 0.5
        else:
            # no descent left: accept only if at the floating point floor, judged by
            # the raw gradient or by the scale-free Newton decrement (a huge penalty
            # leaves roundoff in Sigma B that the raw gradient cannot shed)
            if gmax < 1e3 * thresh or float(g @ step) < 1e-8 * (1.0 + abs(J)):
                return B, it
            raise ConvergenceError("inner step-halving failed", last=B)
        B, J = Bn, Jn
    raise ConvergenceError(f"inner solve did not converge in {max_iter} iterations", last=B)


@dataclass
class _State:
    rho: np.ndarray
    B: np.ndarray
    pi: np.ndarray
    w: np.ndarray
    Sigma: np.ndarray
    Hinv: np.ndarray
    logdet_H: float
    P: float
    L: float
    phi: float
    n_inner: int


class _Problem:
    """Outer objective over public rho for one design and count vector."""

    def __init__(self, design, S, spec, fixed_phi=None, scale=None):
        self.design = design
        self.S = np.asarray(S, dtype=float)
        self.spec = spec
        self.fixed_phi = fixed_phi
        T = design.n_terms
        self.n_lam = T
        self.has_re = design.has_re
        n = T + int(self.has_re) + int(fixed_phi is None)
        self.n = n
        self.scale = penalty_scale(design) if scale is None else np.asarray(scale)
        lo = np.empty(n)
        hi = np.empty(n)
        lo[:T] = np.log(self.scale) - LOG_LAM_SPAN
        hi[:T] = np.log(self.scale) + LOG_LAM_SPAN
        k = T
        if self.has_re:
            lo[k], hi[k] = LOG_SIGMA_BOUNDS
            k += 1
        if fixed_phi is None:
            lo[k], hi[k] = LOG_PHI_BOUNDS
        self.lo, self.hi = lo, hi
        # internal log theta = sign * public rho
        self.sign = np.ones(n)
        if self.has_re:
            self.sign[T] = -1.0

    def theta(self, rho):
        lam = np.exp(rho[: self.n_lam])
        sig = float(np.exp(rho[self.n_lam])) if self.has_re else None
        return VarianceComponents(tuple(lam), sig)

    def phi(self, rho):
        return float(np.exp(rho[-1])) if self.fixed_phi is None else float(self.fixed_phi)

    def evaluate(self, rho, B_init):
        d = self.design
        theta = self.theta(rho)
        phi = self.phi(rho)
        Sigma = theta.penalty(d)
        B, nit = inner_solve(d, self.S, Sigma, B_init=B_init, tol=self.spec.tol,
                             max_iter=self.spec.max_inner_iter)
        pi = fitted_mean(d.linear_predictor(B))
        w = working_weights(pi, d.depth)
        H = d.gram(w) + Sigma
        try:
            c = linalg.cho_factor(H, lower=True, check_finite=False)
        except linalg.LinAlgError as exc:
            raise NumericError("Hessian is not positive definite at the inner mode") from exc
        logdet_H = 2.0 * float(np.sum(np.log(np.diag(c[0]))))
        Hinv = linalg.cho_solve(c, np.eye(d.n_coef), check_finite=False)
        P = float(quasi_deviance(self.S, d.depth, pi).sum() + B @ Sigma @ B)
        logdet_S, rank_S = d.penalty_logdet(theta.lam, theta.sigma0_sq)
        M, q = d.n_obs, d.n_coef
        lp = math.log(phi)
        L = -0.5 * M * lp - P / (2 * phi) + 0.5 * (logdet_S - rank_S * lp) - 0.5 * (logdet_H - q * lp)
        if not np.isfinite(L):
            raise NumericError("non-finite Laplace objective")
        return _State(rho=np.array(rho, dtype=float), B=B, pi=pi, w=w, Sigma=Sigma, Hinv=Hinv,
                      logdet_H=logdet_H, P=P, L=float(L), phi=phi, n_inner=nit)

    def _components(self):
        """(block slice, penalty matrix, rank) for every internal log theta."""
        d = self.design
        out = [(slice(a, b), A, r) for (a, b), A, (_, r) in zip(d.blocks, d.penalties, d.penalty_logdets)]
        if self.has_re:
            K = d.n_fixed
            out.append((slice(K, K + d.n_samples), None, d.n_samples))
        return out

    def derivatives(self, st):
        """Gradient and fixed-weight Hessian of L with respect to public rho."""
        d = self.design
        comps = self._components()
        nk = len(comps)
        phi = st.phi
        B, Hinv = st.B, st.Hinv
        theta_int = np.exp(self.sign[:nk] * st.rho[:nk])
        lev = d.leverages(Hinv)
        wprime = st.w * (1.0 - 2.0 * st.pi)
        SB, quad, tr1, HSB = [], np.empty(nk), np.empty(nk), []
        T = []
        for k, (sl, A, _) in enumerate(comps):
            v = np.zeros_like(B)
            v[sl] = B[sl] if A is None else A @ B[sl]
            SB.append(v)
            quad[k] = B @ v
            Tk = Hinv[:, sl] if A is None else Hinv[:, sl] @ A
            T.append(Tk)
            tr1[k] = np.trace(Tk[sl])
            HSB.append(Hinv @ v)
        g = np.empty(self.n)
        Hs = np.zeros((self.n, self.n))
        for k, (sl, _, rank) in enumerate(comps):
            th = theta_int[k]
            dB = -th * HSB[k]
            dw_term = float(np.sum(lev * wprime * d.linear_predictor(dB)))
            g[k] = -th * quad[k] / (2 * phi) + 0.5 * rank - 0.5 * (th * tr1[k] + dw_term)
            for j in range(k + 1):
                slj = comps[j][0]
                thj = theta_int[j]
                cross = SB[k] @ HSB[j]
                tr2 = float(np.sum(T[k][slj] * T[j][sl].T))
                h = (2 * th * thj * cross) / (2 * phi) + 0.5 * th * thj * tr2
                if j == k:
                    h += -th * quad[k] / (2 * phi) - 0.5 * th * tr1[k]
                Hs[k, j] = Hs[j, k] = h
        if self.fixed_phi is None:
            M, q = d.n_obs, d.n_coef
            r_sigma = sum(c[2] for c in comps)
            g[-1] = -0.5 * M + st.P / (2 * phi) - 0.5 * r_sigma + 0.5 * q
            Hs[-1, -1] = -st.P / (2 * phi)
            for k in range(nk):
                Hs[k, -1] = Hs[-1, k] = theta_int[k] * quad[k] / (2 * phi)
        s = self.sign
        return s * g, np.outer(s, s) * Hs

    def free_mask(self, rho, g):
        at_lo = (rho <= self.lo + 1e-10) & (g <= 0)
        at_hi = (rho >= self.hi - 1e-10) & (g >= 0)
        return ~(at_lo | at_hi)


def penalty_scale(design):
    """Normalizer c_p = ||X_p' W0 X_p||_F / ||A_p||_F with W0 = X / 4."""
    w0 = design.depth * 0.25
    out = []
    for (a, b), A in zip(design.blocks, design.penalties):
        Xp = design.XB[:, a:b]
        G = Xp.T @ (Xp * w0[:, None])
        na = np.linalg.norm(A)
        out.append(np.linalg.norm(G) / na if na > 0 else 1.0)
    return np.maximum(np.array(out), 1e-12)


def ascent_direction(g, Hs, free):
    """Newton direction for maximization with eigenvalue flooring and a step cap."""
    d = np.zeros_like(g)
    if not np.any(free):
        return d
    gf = g[free]
    N = -Hs[np.ix_(free, free)]
    N = 0.5 * (N + N.T)
    ev, V = np.linalg.eigh(N)
    floor = max(1e-8, 1e-7 * float(np.max(np.abs(ev), initial=0.0)))
    ev = np.maximum(np.abs(ev), floor)
    df = V @ ((V.T @ gf) / ev)
    big = float(np.max(np.abs(df), initial=0.0))
    if big > MAX_STEP:
        df *= MAX_STEP / big
    d[free] = df
    return d


def outer_step(prob, st, derivs=None):
    """One safeguarded Newton ascent step on the Laplace objective.

    Returns ``(new_state, gradient, accepted)``; when no halving improves the
    objective, or the predicted gain is below floating point resolution, the
    current state is returned with ``accepted=False``.
    """
    g, Hs = prob.derivatives(st) if derivs is None else derivs
    free = prob.free_mask(st.rho, g)
    if not np.any(free) or float(np.max(np.abs(g[free]))) < 1e-8:
        return st, g, False
    d = ascent_direction(g, Hs, free)
    resolution = 1e-10 * (1.0 + abs(st.L))
    if float(g @ d) < resolution:
        return st, g, False
    t = 1.0
    for _ in range(MAX_HALVINGS + 1):
        trial = np.clip(st.rho + t * d, prob.lo, prob.hi)
        try:
            new = prob.evaluate(trial, st.B)
        except (NumericError, ConvergenceError):
            new = None
        if new is not None and new.L >= st.L:
            return new, g, True
        t *= 0.5
        if t * float(g @ d) < resolution:
            break
    return st, g, False


def initial_rho(prob, phi0=1.0, sigma0=1.0):
    rho = list(np.log(prob.scale))
    if prob.has_re:
        rho.append(math.log(sigma0))
    if prob.fixed_phi is None:
        rho.append(math.log(phi0))
    return np.clip(np.array(rho), prob.lo, prob.hi)


def _run_outer(prob, rho0, B0, spec, trace):
    st = prob.evaluate(rho0, B0)
    trace.append(st.L)
    n_inner = st.n_inner
    last_dB = np.inf
    for it in range(1, spec.max_outer_iter + 1):
        if prob.has_re and st.rho[prob.n_lam] <= prob.lo[prob.n_lam] + 1e-10:
            return st, it - 1, n_inner, True, "boundary"
        derivs = prob.derivatives(st)
        g = derivs[0]
        free = prob.free_mask(st.rho, g)
        gmax = float(np.max(np.abs(g[free]), initial=0.0))
        if gmax < 1e-8 or (last_dB < spec.tol and gmax < GRAD_TOL):
            return st, it - 1, n_inner, True, "converged"
        new, _, accepted = outer_step(prob, st, derivs)
        if not accepted:
            return st, it - 1, n_inner, True, "stalled"
        n_inner += new.n_inner
        last_dB = float(np.linalg.norm(new.B - st.B))
        st = new
        trace.append(st.L)
    err = ConvergenceError(
        f"outer loop did not converge in {spec.max_outer_iter} iterations", last=st.rho, trace=trace
    )
    raise err


def _drop_re(B, design):
    return B[: design.n_fixed].copy()


def edf(design, w, Sigma, Hinv=None):
    """Effective degrees of freedom.

    Returns
    -------
    tau : float
        trace(F) with ``F = (X'WX + Sigma)^-1 X'WX``.
    tau_p : tuple
        Per smooth term, the sum of diag(2F - FF) over the term's block.
    """
    XtWX = design.gram(w)
    if Hinv is None:
        Hinv = np.linalg.inv(XtWX + Sigma)
    F = Hinv @ XtWX
    tau = float(np.trace(F))
    tau_p = []
    for a, b in design.blocks:
        Fb = F[a:b]
        tau_p.append(float(2.0 * np.trace(Fb[:, a:b]) - np.einsum("ij,ji->", Fb, F[:, a:b])))
    return tau, tuple(tau_p)


def fletcher_phi(S, X, pi_hat, tau, floor=0.05):
    """Fletcher dispersion estimate.

    Returns
    -------
    dict
        ``phi`` (floored at ``floor``), ``phi_pearson``, ``a_bar`` and
        ``floored``.

    Raises
    ------
    DegenerateError
        ``tau >= M`` or ``1 + a_bar <= 0``.
    """
    S = np.asarray(S, dtype=float)
    X = np.asarray(X, dtype=float)
    pi = np.asarray(pi_hat, dtype=float)
    M = S.size
    if tau >= M:
        raise DegenerateError(f"tau = {tau:g} leaves no residual degrees of freedom (M = {M})")
    v = X * pi * (1.0 - pi)
    r = S - X * pi
    phi_p = float(np.sum(r * r / v) / (M - tau))
    a_bar = float(np.mean((1.0 - 2.0 * pi) * r / v))
    if 1.0 + a_bar <= 0:
        raise DegenerateError(f"1 + a_bar = {1 + a_bar:g} <= 0; the mean model fits very poorly")
    phi = phi_p / (1.0 + a_bar)
    floored = bool(phi < floor)
    return {"phi": max(phi, floor), "phi_pearson": phi_p, "a_bar": a_bar, "floored": floored}


def _split(B, design):
    alpha = tuple(B[a:b].copy() for a, b in design.blocks)
    u = B[design.n_fixed:].copy() if design.has_re else np.zeros(design.n_samples)
    return alpha, u


def _degenerate_fit(design, S, spec, phi_fixed, names, region_name):
    lo = math.log(PI_CLAMP / (1 - PI_CLAMP))
    level = lo if np.all(S <= 0) else -lo
    B = np.zeros(design.n_coef)
    a, b = design.blocks[0]
    B[a:b] = design.bases[0].linear_coefficients(level, 0.0)
    prob = _Problem(design, S, spec, fixed_phi=phi_fixed)
    rho = initial_rho(prob)
    theta = prob.theta(rho)
    Sigma = theta.penalty(design)
    pi = fitted_mean(design.linear_predictor(B))
    w = working_weights(pi, design.depth)
    XtWX = design.gram(w)
    Hinv = np.linalg.inv(XtWX + Sigma)
    tau, tau_p = edf(design, w, Sigma, Hinv)
    fl = fletcher_phi(S, design.depth, pi, tau, spec.phi_floor)
    alpha, u = _split(B, design)
    phi = fl["phi"] if phi_fixed is None else float(phi_fixed)
    return FitResult(
        B=B, alpha=alpha, u=u, theta=theta, phi=phi, phi_lik=None,
        phi_fletcher=fl["phi"], phi_pearson=fl["phi_pearson"], a_bar=fl["a_bar"],
        phi_floored=True, edf_total=tau, edf_per_term=tau_p, design=design,
        counts=np.asarray(S, dtype=float), pi_hat=pi, xtwx=XtWX, hessian_inv=Hinv,
        rho=rho, converged=True, degenerate=True, term_names=names, region_name=region_name,
    )


def fit_counts(design, S, spec=None, init=None, fixed_phi=None, term_names=(), region_name="region"):
    """Fit the model to counts ``S`` on a prepared design.

    Parameters
    ----------
    design : DesignSystem
    S : array_like
        Complete (or expected) methylated counts, one per design row.
    spec : ModelSpec, optional
    init : FitResult, optional
        Warm start; its ``rho`` and ``B`` seed the outer and inner loops.
    fixed_phi : float, optional
        Hold phi fixed and optimize the variance components only.

    Returns
    -------
    FitResult
    """
    spec = spec or ModelSpec()
    S = np.asarray(S, dtype=float)
    X = design.depth
    if np.all(S <= 0) or np.all(S >= X):
        return _degenerate_fit(design, S, spec, fixed_phi, tuple(term_names), region_name)

    trace = []
    re_profiled = False
    if init is not None and init.re_profiled and design.has_re:
        design = design.without_re()
        re_profiled = True
    prob = _Problem(design, S, spec, fixed_phi=fixed_phi)
    if init is not None and not init.degenerate:
        rho0 = _warm_rho(prob, init)
        B0 = init.B if init.design.has_re == design.has_re else _drop_re(init.B, init.design)
    else:
        rho0, B0 = initial_rho(prob), None
    st, n_outer, n_inner, ok, why = _run_outer(prob, rho0, B0, spec, trace)
    if why == "boundary":
        design = design.without_re()
        re_profiled = True
        prob2 = _Problem(design, S, spec, fixed_phi=fixed_phi, scale=prob.scale)
        rho1 = np.delete(st.rho, prob.n_lam)
        st, n2, i2, ok, why = _run_outer(prob2, rho1, _drop_re(st.B, prob.design), spec, trace)
        n_outer += n2
        n_inner += i2
        prob = prob2
    return _finish(prob, st, spec, fixed_phi, n_outer, n_inner, trace, re_profiled,
                   tuple(term_names), region_name)


def _warm_rho(prob, init):
    T = prob.n_lam
    rho = list(np.log(init.theta.lam))
    if prob.has_re:
        rho.append(math.log(max(init.theta.sigma0_sq or 1.0, SIGMA_BOUNDARY * 10)))
    if prob.fixed_phi is None:
        rho.append(math.log(init.phi_lik if init.phi_lik else init.phi))
    rho = np.array(rho[: T + int(prob.has_re) + int(prob.fixed_phi is None)])
    return np.clip(rho, prob.lo, prob.hi)


def _finish(prob, st, spec, fixed_phi, n_outer, n_inner, trace, re_profiled, names, region_name):
    design = prob.design
    XtWX = design.gram(st.w)
    tau, tau_p = edf(design, st.w, st.Sigma, st.Hinv)
    fl = fletcher_phi(prob.S, design.depth, st.pi, tau, spec.phi_floor)
    alpha, u = _split(st.B, design)
    theta = prob.theta(st.rho)
    if fixed_phi is None:
        phi_lik, phi = st.phi, fl["phi"]
    else:
        phi_lik, phi = None, float(fixed_phi)
    return FitResult(
        B=st.B, alpha=alpha, u=u, theta=theta, phi=phi, phi_lik=phi_lik,
        phi_fletcher=fl["phi"], phi_pearson=fl["phi_pearson"], a_bar=fl["a_bar"],
        phi_floored=fl["floored"], edf_total=tau, edf_per_term=tau_p, design=design,
        counts=prob.S, pi_hat=st.pi, xtwx=XtWX, hessian_inv=st.Hinv, rho=st.rho,
        laplace=st.L, converged=True, n_outer=n_outer, n_inner=n_inner,
        objective_trace=trace, re_profiled=re_profiled, term_names=names,
        region_name=region_name,
    )


def prepare_design(region, spec):
    bases = bases_for_region(region, spec.ranks_for(region), natural=spec.natural)
    return build_design(region, bases, random_effect=spec.random_effect)


def fit(region, spec=None, init=None):
    """Fit the smoothed quasi-binomial mixed model to error-free counts.

    Parameters
    ----------
    region : RegionData
        Observed counts are treated as the true counts S.
    spec : ModelSpec, optional

    Returns
    -------
    FitResult
        ``phi`` is the Fletcher estimate; ``phi_lik`` the Laplace one.
    """
    spec = spec or ModelSpec()
    design = prepare_design(region, spec)
    names = ("intercept",) + tuple(region.covariate_names)
    res = fit_counts(design, region.flat_meth, spec, init=init, term_names=names,
                     region_name=region.name)
    res.observed = region.flat_meth
    return res
