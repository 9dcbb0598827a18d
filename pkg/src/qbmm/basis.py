"""Spline bases, second-derivative penalties and the spanned design system."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.interpolate import BSpline

from .exceptions import RangeError, RankError

_RANGE_EPS = 1e-9


def _natural_second_derivs(knots):
    """Matrix F with F @ beta = second derivatives at the knots.

    For the natural cubic spline interpolating values ``beta`` at ``knots``
    (second derivative zero at both ends).
    """
    k = knots.size
    h = np.diff(knots)
    F = np.zeros((k, k))
    if k < 3:
        return F
    D = np.zeros((k - 2, k))
    Bm = np.zeros((k - 2, k - 2))
    for i in range(k - 2):
        D[i, i] = 1.0 / h[i]
        D[i, i + 1] = -1.0 / h[i] - 1.0 / h[i + 1]
        D[i, i + 2] = 1.0 / h[i + 1]
        Bm[i, i] = (h[i] + h[i + 1]) / 3.0
        if i + 1 < k - 2:
            Bm[i, i + 1] = Bm[i + 1, i] = h[i + 1] / 6.0
    F[1:-1] = np.linalg.solve(Bm, D)
    return F


@dataclass(frozen=True, eq=False)
class SplineBasis:
    """A rank-L cubic spline basis on [knots[0], knots[-1]].

    With ``natural=True`` (the default) this is a cubic regression spline:
    natural cubic splines with L knots, parameterized by the curve values at
    the knots. With ``natural=False`` it is a cubic B-spline basis with L-2
    breakpoints (needs L >= 4).
    """

    knots: np.ndarray
    rank: int
    natural: bool = True
    _F: np.ndarray = field(default=None, repr=False)
    _spline: BSpline = field(default=None, repr=False)

    @property
    def lower(self):
        return float(self.knots[0])

    @property
    def upper(self):
        return float(self.knots[-1])

    @property
    def breakpoints(self):
        """Points between which the basis second derivatives are linear."""
        return self.knots

    def _check_range(self, t):
        span = self.upper - self.lower
        eps = _RANGE_EPS * max(1.0, span)
        bad = (t < self.lower - eps) | (t > self.upper + eps)
        if np.any(bad):
            first = float(t[np.flatnonzero(bad)[0]])
            raise RangeError(
                f"position {first:g} outside basis range [{self.lower:g}, {self.upper:g}]"
            )
        return np.clip(t, self.lower, self.upper)

    def __call__(self, t, deriv=0):
        """Evaluate all L basis functions at ``t``; returns shape (len(t), L)."""
        t = self._check_range(np.atleast_1d(np.asarray(t, dtype=float)))
        if not self.natural:
            return self._spline(t, nu=deriv)
        x = self.knots
        k = x.size
        j = np.clip(np.searchsorted(x, t, side="right") - 1, 0, k - 2)
        h = x[j + 1] - x[j]
        lo = x[j + 1] - t
        hi = t - x[j]
        if deriv == 0:
            am, ap = lo / h, hi / h
            cm = (lo**3 / h - h * lo) / 6.0
            cp = (hi**3 / h - h * hi) / 6.0
        elif deriv == 1:
            am, ap = -1.0 / h, 1.0 / h
            cm = -(3 * lo**2 / h - h) / 6.0
            cp = (3 * hi**2 / h - h) / 6.0
        elif deriv == 2:
            am = ap = np.zeros_like(t)
            cm, cp = lo / h, hi / h
        else:
            raise ValueError("deriv must be 0, 1 or 2")
        out = cm[:, None] * self._F[j] + cp[:, None] * self._F[j + 1]
        rows = np.arange(t.size)
        out[rows, j] += am
        out[rows, j + 1] += ap
        return out

    def second_derivs_at_breaks(self):
        """Second derivatives of every basis function at the breakpoints."""
        if self.natural:
            return self._F.copy()
        return self._spline(self.breakpoints, nu=2)

    def linear_coefficients(self, intercept, slope):
        """Coefficients representing the straight line intercept + slope*t."""
        if self.natural:
            return intercept + slope * self.knots
        grid = np.linspace(self.lower, self.upper, 4 * self.rank)
        coef, *_ = np.linalg.lstsq(self(grid), intercept + slope * grid, rcond=None)
        return coef


def build_basis(positions, L, natural=True):
    """Cubic regression spline basis of rank ``L`` with quantile knots.

    Knots sit at evenly spaced quantiles of the distinct positions, so for
    L = 5 they are the 0, 25, 50, 75 and 100th percentiles.

    Raises
    ------
    RankError
        Fewer distinct positions than ``L``.
    """
    distinct = np.unique(np.asarray(positions, dtype=float))
    L = int(L)
    if L < 3:
        raise RankError("basis rank must be at least 3 for a cubic basis")
    if distinct.size < L:
        raise RankError(
            f"only {distinct.size} distinct positions for rank {L}; use a rank <= {distinct.size}"
        )
    if natural:
        knots = np.quantile(distinct, np.linspace(0.0, 1.0, L))
        return SplineBasis(knots=knots, rank=L, natural=True, _F=_natural_second_derivs(knots))
    if L < 4:
        raise RankError("a non-natural cubic B-spline basis needs rank >= 4")
    breaks = np.quantile(distinct, np.linspace(0.0, 1.0, L - 2))
    t = np.concatenate([[breaks[0]] * 3, breaks, [breaks[-1]] * 3])
    spline = BSpline(t, np.eye(L), 3, extrapolate=False)
    return SplineBasis(knots=breaks, rank=L, natural=False, _spline=spline)


def penalty_matrix(basis):
    """Exact second-derivative penalty A with A[l, m] = int B_l'' B_m'' dt.

    Second derivatives of cubic pieces are linear between breakpoints, so the
    integral is a sum of closed-form Simpson-exact terms per interval.
    """
    G = basis.second_derivs_at_breaks()
    h = np.diff(basis.breakpoints)
    k = h.size + 1
    Q = np.zeros((k, k))
    for j, hj in enumerate(h):
        Q[j, j] += hj / 3.0
        Q[j + 1, j + 1] += hj / 3.0
        Q[j, j + 1] += hj / 6.0
        Q[j + 1, j] += hj / 6.0
    A = G.T @ Q @ G
    return 0.5 * (A + A.T)


def generalized_logdet(A, rel_tol=1e-10):
    """log of the product of eigenvalues above ``rel_tol`` * largest; also the rank."""
    if A.size == 0:
        return 0.0, 0
    ev = np.linalg.eigvalsh(0.5 * (A + A.T))
    top = ev.max()
    if top <= 0:
        return 0.0, 0
    keep = ev > rel_tol * top
    return float(np.sum(np.log(ev[keep]))), int(keep.sum())


@dataclass(frozen=True, eq=False)
class DesignSystem:
    """Spanned design X = [X_B, X_1] for one region.

    ``XB`` is M x K with entries B_l^(p)(t_ij) * Z_pi (Z_0i = 1). The random
    effect block X_1 is the M x N sample incidence matrix, stored implicitly
    through ``sample_index``; ``has_re=False`` drops it.
    """

    XB: np.ndarray
    sample_index: np.ndarray
    n_samples: int
    depth: np.ndarray
    blocks: tuple
    penalties: tuple
    bases: tuple
    rows: tuple = ()
    has_re: bool = True

    @property
    def n_obs(self):
        return self.XB.shape[0]

    @property
    def n_fixed(self):
        return self.XB.shape[1]

    @property
    def n_re(self):
        return self.n_samples if self.has_re else 0

    @property
    def n_coef(self):
        return self.n_fixed + self.n_re

    @property
    def n_terms(self):
        return len(self.blocks)

    @cached_property
    def X1(self):
        """Sparse M x N incidence matrix of the random intercepts."""
        m = self.n_obs
        return sparse.csr_matrix(
            (np.ones(m), (np.arange(m), self.sample_index)), shape=(m, self.n_samples)
        )

    def dense(self):
        """Full X as a dense array."""
        if not self.has_re:
            return self.XB.copy()
        return np.hstack([self.XB, self.X1.toarray()])

    def without_re(self):
        return DesignSystem(
            XB=self.XB, sample_index=self.sample_index, n_samples=self.n_samples,
            depth=self.depth, blocks=self.blocks, penalties=self.penalties,
            bases=self.bases, rows=self.rows, has_re=False,
        )

    @cached_property
    def _run_starts(self):
        s = self.sample_index
        if s.size and np.all(np.diff(s) >= 0) and np.array_equal(np.unique(s), np.arange(self.n_samples)):
            return np.flatnonzero(np.r_[True, np.diff(s) > 0])
        return None

    def _sample_sums(self, A):
        """Per-sample column sums of the rows of A."""
        if self._run_starts is not None:
            return np.add.reduceat(A, self._run_starts, axis=0)
        return np.asarray(self.X1.T @ A)

    def linear_predictor(self, B):
        eta = self.XB @ B[: self.n_fixed]
        if self.has_re:
            eta = eta + B[self.n_fixed:][self.sample_index]
        return eta

    def rmatvec(self, v):
        """X^T v."""
        top = self.XB.T @ v
        if not self.has_re:
            return top
        return np.concatenate([top, np.bincount(self.sample_index, v, self.n_samples)])

    def gram(self, w):
        """X^T diag(w) X."""
        K = self.n_fixed
        XBw = self.XB * w[:, None]
        top = self.XB.T @ XBw
        top = 0.5 * (top + top.T)
        if not self.has_re:
            return top
        N = self.n_samples
        G = np.empty((K + N, K + N))
        G[:K, :K] = top
        cross = self._sample_sums(XBw)
        G[K:, :K] = cross
        G[:K, K:] = cross.T
        G[K:, K:] = np.diag(np.bincount(self.sample_index, w, N))
        return G

    def leverages(self, Hinv):
        """diag(X Hinv X^T) without forming X."""
        K = self.n_fixed
        XB = self.XB
        h = np.einsum("ij,ij->i", XB @ Hinv[:K, :K], XB)
        if self.has_re:
            s = self.sample_index
            h += 2.0 * np.einsum("ij,ji->i", XB, Hinv[:K, K:][:, s])
            h += np.diag(Hinv)[K:][s]
        return h

    def penalty(self, lam, sigma0_sq=None):
        """Block-diagonal penalty: lam_p * A_p per term, 1/sigma0_sq on the REs."""
        S = np.zeros((self.n_coef, self.n_coef))
        for (a, b), A, lp in zip(self.blocks, self.penalties, lam):
            S[a:b, a:b] = lp * A
        if self.has_re:
            K = self.n_fixed
            S[K:, K:] = np.eye(self.n_samples) / float(sigma0_sq)
        return S

    @cached_property
    def penalty_logdets(self):
        """(log|A_p|_+, rank A_p) for every smooth term."""
        return tuple(generalized_logdet(A) for A in self.penalties)

    def penalty_logdet(self, lam, sigma0_sq=None):
        """log|Sigma|_+ and its rank, evaluated blockwise."""
        total, rank = 0.0, 0
        for (ld, r), lp in zip(self.penalty_logdets, lam):
            total += ld + r * np.log(lp)
            rank += r
        if self.has_re:
            total -= self.n_samples * np.log(sigma0_sq)
            rank += self.n_samples
        return total, rank

    def term_matrix(self, p, t):
        """Basis of term ``p`` evaluated at positions ``t``."""
        return self.bases[p](t)


def build_design(region, bases, random_effect=True):
    """Assemble the design system for ``region`` given one basis per term.

    Raises
    ------
    RangeError
        An observed position lies outside a basis range; names sample i and
        site j (both 1-based).
    RankError
        The sample covariates together with the intercept are rank
        deficient, so some curve is not identifiable.
    """
    if len(bases) != region.n_covariates + 1:
        raise ValueError(f"need {region.n_covariates + 1} bases, got {len(bases)}")
    t = region.flat_positions
    sidx = region.sample_index
    for basis in bases:
        out = (t < basis.lower - _RANGE_EPS * max(1.0, basis.upper - basis.lower)) | (
            t > basis.upper + _RANGE_EPS * max(1.0, basis.upper - basis.lower)
        )
        if np.any(out):
            row = int(np.flatnonzero(out)[0])
            i = int(sidx[row])
            j = int(row - np.flatnonzero(sidx == i)[0])
            raise RangeError(
                f"observation (i={i + 1}, j={j + 1}) at position {t[row]:g} outside "
                f"basis range [{basis.lower:g}, {basis.upper:g}]"
            )
    Z = np.hstack([np.ones((region.n_samples, 1)), region.covariates])
    for p in range(1, Z.shape[1]):
        if np.linalg.matrix_rank(Z[:, : p + 1]) <= p:
            raise RankError(
                f"covariate {region.covariate_names[p - 1]} is constant or collinear with "
                "earlier covariates; its curve is not identifiable"
            )
    cols, blocks, start = [], [], 0
    for p, basis in enumerate(bases):
        Bt = basis(t)
        cols.append(Bt * Z[sidx, p][:, None])
        blocks.append((start, start + basis.rank))
        start += basis.rank
    XB = np.hstack(cols)
    rows = tuple(
        (int(i), int(j)) for i, n in enumerate(p.size for p in region.positions) for j in range(n)
    )
    return DesignSystem(
        XB=XB,
        sample_index=sidx,
        n_samples=region.n_samples,
        depth=region.flat_total.copy(),
        blocks=tuple(blocks),
        penalties=tuple(penalty_matrix(b) for b in bases),
        bases=tuple(bases),
        rows=rows,
        has_re=bool(random_effect),
    )


def bases_for_region(region, ranks, natural=True):
    """One basis per smooth term, all built on the region's distinct positions."""
    pos = region.distinct_positions
    return [build_basis(pos, L, natural=natural) for L in ranks]
