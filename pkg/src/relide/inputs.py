"""Probabilistic input models.

A :class:`ProbInput` is a list of marginal distributions tied together by a
Gaussian copula.  The isoprobabilistic map to standard-normal space is

    u = L^{-1} Phi^{-1}(F_i(x_i))        (componentwise F_i, copula Cholesky L)

and its inverse.  Because ``L`` is a Cholesky factor, the standard-space
coordinates depend on the order of the marginal list; the joint law of ``x``
does not.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import ndtr, ndtri
from scipy.stats import qmc

QUANTILE_TOL = 1e-12


class DomainError(ValueError):
    """A physical point lies outside the support of its marginal."""


class Marginal:
    """Base class for one-dimensional marginals.

    Subclasses provide ``cdf``, ``sf``, ``pdf`` and the standard-normal maps.
    ``quantile`` is shared: a closed-form or library starting value polished by
    Newton steps, with bisection whenever a Newton step leaves the bracket.
    """

    name: str = "marginal"
    lower = -np.inf
    upper = np.inf
    open_lower = False

    def support_check(self, x):
        x = np.asarray(x, dtype=float)
        low_ok = x > self.lower if self.open_lower else x >= self.lower
        bad = ~(low_ok & (x <= self.upper) & np.isfinite(x))
        if np.any(bad):
            raise DomainError(
                f"{self.name}: {np.count_nonzero(bad)} value(s) outside support "
                f"[{self.lower}, {self.upper}], e.g. {x[bad].ravel()[0]!r}")
        return x

    def _start(self, p):
        raise NotImplementedError

    def quantile(self, p):
        p = np.asarray(p, dtype=float)
        if np.any((p <= 0) | (p >= 1)):
            raise ValueError("quantile probabilities must lie in (0, 1)")
        q = np.array(self._start(p), dtype=float, copy=True)
        scalar = q.ndim == 0
        q = np.atleast_1d(q)
        pp = np.atleast_1d(p)
        for i in np.flatnonzero(np.abs(self.cdf(q) - pp) >= QUANTILE_TOL):
            q[i] = self._polish(q[i], pp[i])
        return q[0] if scalar else q

    def _polish(self, q, p):
        lo, hi = self._bracket(q, p)
        for _ in range(200):
            err = float(self.cdf(q)) - p
            if abs(err) < QUANTILE_TOL:
                break
            if err > 0:
                hi = q
            else:
                lo = q
            d = float(self.pdf(q))
            step = q - err / d if d > 0 else np.nan
            q = step if lo < step < hi else 0.5 * (lo + hi)
        return q

    def _bracket(self, q, p):
        span = max(abs(q), 1.0)
        lo, hi = q - span, q + span
        lo = max(lo, self.lower) if self.lower > -np.inf else lo
        hi = min(hi, self.upper) if self.upper < np.inf else hi
        while self.cdf(lo) > p and lo > self.lower:
            lo = lo - 2 * span if self.lower == -np.inf else 0.5 * (lo + self.lower)
        while self.cdf(hi) < p:
            hi = hi + 2 * span if self.upper == np.inf else 0.5 * (hi + self.upper)
        return lo, hi


@dataclass(frozen=True)
class Gaussian(Marginal):
    mean: float
    std: float
    name: str = field(default="Gaussian", compare=False)

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"Gaussian std must be positive, got {self.std}")

    def cdf(self, x):
        return ndtr((np.asarray(x, dtype=float) - self.mean) / self.std)

    def sf(self, x):
        return ndtr(-(np.asarray(x, dtype=float) - self.mean) / self.std)

    def pdf(self, x):
        return stats.norm.pdf(x, self.mean, self.std)

    def _start(self, p):
        return self.mean + self.std * ndtri(p)

    def to_std(self, x):
        return (self.support_check(x) - self.mean) / self.std

    def from_std(self, u):
        return self.mean + self.std * np.asarray(u, dtype=float)

    def draw(self, n, rng):
        return rng.normal(self.mean, self.std, size=n)


@dataclass(frozen=True)
class Lognormal(Marginal):
    """Lognormal variable parameterised by its own mean and standard deviation."""

    mean: float
    std: float
    name: str = field(default="Lognormal", compare=False)
    lower = 0.0
    open_lower = True

    def __post_init__(self):
        if not (self.std > 0 and self.mean > 0):
            raise ValueError("Lognormal mean and std must be positive")

    @property
    def zeta(self):
        return float(np.sqrt(np.log1p((self.std / self.mean) ** 2)))

    @property
    def lam(self):
        return float(np.log(self.mean) - 0.5 * self.zeta ** 2)

    def _z(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.log(x) - self.lam) / self.zeta

    def cdf(self, x):
        return ndtr(self._z(x))

    def sf(self, x):
        return ndtr(-self._z(x))

    def pdf(self, x):
        return stats.lognorm.pdf(x, self.zeta, scale=np.exp(self.lam))

    def _start(self, p):
        return np.exp(self.lam + self.zeta * ndtri(p))

    def to_std(self, x):
        return self._z(self.support_check(x))

    def from_std(self, u):
        return np.exp(self.lam + self.zeta * np.asarray(u, dtype=float))

    def draw(self, n, rng):
        return rng.lognormal(self.lam, self.zeta, size=n)


_GL_X, _GL_W = np.polynomial.legendre.leggauss(16)


def _norm_between(lo, width):
    """``Phi(lo + width) - Phi(lo)`` accurate for small ``width``."""
    lo = np.asarray(lo, dtype=float)
    width = np.asarray(width, dtype=float)
    hi = lo + width
    # CDF differences taken on the side of zero where they do not cancel
    direct = np.where(lo > 0, ndtr(-lo) - ndtr(-hi), ndtr(hi) - ndtr(lo))
    half = 0.5 * np.minimum(width, 0.5)
    mid = lo + half
    nodes = mid[..., None] + half[..., None] * _GL_X
    quad = half * np.sum(_GL_W * np.exp(-0.5 * nodes ** 2), axis=-1) / np.sqrt(2 * np.pi)
    out = np.where(width < 0.5, quad, direct)
    return out[()] if out.ndim == 0 else out


@dataclass(frozen=True)
class TruncatedGaussian(Marginal):
    """Gaussian restricted to ``[lower, upper]``.

    ``mean`` and ``std`` are the parameters of the untruncated parent; the
    density is renormalised over the interval.
    """

    mean: float
    std: float
    lower: float = 0.0
    upper: float = np.inf
    name: str = field(default="TruncatedGaussian", compare=False)

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"TruncatedGaussian std must be positive, got {self.std}")
        if not self.lower < self.upper:
            raise ValueError("TruncatedGaussian requires lower < upper")

    @property
    def _ab(self):
        return (self.lower - self.mean) / self.std, (self.upper - self.mean) / self.std

    @property
    def _mass(self):
        a, b = self._ab
        # whichever difference avoids cancellation
        return float(ndtr(-a) - ndtr(-b)) if a > 0 else float(ndtr(b) - ndtr(a))

    def _zs(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def _lower_mass(self, x):
        """``Phi(z) - Phi(a)`` for standardized ``z`` of ``x``, without cancellation."""
        a, b = self._ab
        x = np.asarray(x, dtype=float)
        if np.isinf(a):
            return ndtr(np.clip(self._zs(x), a, b))
        return _norm_between(a, np.clip((x - self.lower) / self.std, 0.0, b - a))

    def _upper_mass(self, x):
        """``Phi(b) - Phi(z)``, the complement of :meth:`_lower_mass` on the interval."""
        a, b = self._ab
        x = np.asarray(x, dtype=float)
        if np.isinf(b):
            return ndtr(-np.clip(self._zs(x), a, b))
        d = np.clip((self.upper - x) / self.std, 0.0, b - a)
        return _norm_between(b - d, d)

    def cdf(self, x):
        return self._lower_mass(x) / self._mass

    def sf(self, x):
        return self._upper_mass(x) / self._mass

    def pdf(self, x):
        a, b = self._ab
        z = self._zs(x)
        inside = (z >= a) & (z <= b)
        return np.where(inside, stats.norm.pdf(z) / (self.std * self._mass), 0.0)

    def _start(self, p):
        return self.from_std(ndtri(p))

    def to_std(self, x):
        x = self.support_check(x)
        c = self.cdf(x)
        # upper half through the survival function to keep tail precision
        with np.errstate(divide="ignore"):
            return np.where(c < 0.5, ndtri(c), -ndtri(self.sf(x)))

    def _offset(self, edge, t):
        """Distance ``d >= 0`` (standardized) from ``edge`` holding normal mass ``t``.

        Solves ``Phi(edge + d) - Phi(edge) = t``: the closed-form estimate is
        refined by safeguarded Newton steps on the cancellation-free mass.
        """
        a, b = self._ab
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            if edge > 0:
                z0 = -ndtri(ndtr(-edge) - t)
            else:
                z0 = ndtri(ndtr(edge) + t)
        d = z0 - edge
        first = t / max(float(stats.norm.pdf(edge)), 1e-300)
        d = np.where(np.isfinite(d) & (d > 0), d, first)
        if np.isfinite(b - a):
            d = np.minimum(d, b - a)
        # away from the bound the closed form does not cancel
        near = np.flatnonzero(d < 0.5)
        if near.size:
            d = np.array(d, dtype=float, copy=True)
            d[near] = self._polish_offset(edge, d[near], t[near] if t.ndim else t)
        return d

    def _polish_offset(self, edge, d, t):
        lo = np.zeros_like(d)
        hi = np.full_like(d, 0.5 + 1.0)
        for _ in range(40):
            f = _norm_between(edge, d) - t
            lo = np.where(f < 0, d, lo)
            hi = np.where(f > 0, d, hi)
            nxt = d - f / np.maximum(stats.norm.pdf(edge + d), 1e-300)
            out = ~((nxt > lo) & (nxt < hi))
            nxt = np.where(out, 0.5 * (lo + hi), nxt)
            done = np.abs(nxt - d) <= 1e-15 * np.abs(d)
            d = nxt
            if np.all(done):
                break
        return d

    def from_std(self, u):
        u = np.asarray(u, dtype=float)
        scalar = u.ndim == 0
        u = np.atleast_1d(u)
        a, b = self._ab
        low = u < 0
        # each half is measured from its own bound so both tails stay precise
        t_lo = ndtr(np.where(low, u, -1.0)) * self._mass
        t_hi = ndtr(-np.where(low, 1.0, u)) * self._mass
        if np.isinf(a):
            x_lo = self.mean + self.std * ndtri(t_lo)
        else:
            x_lo = self.lower + self.std * self._offset(a, t_lo)
        if np.isinf(b):
            x_hi = self.mean - self.std * ndtri(t_hi)
        else:
            # mirror: mass t next to b equals mass t next to -b of the reflected normal
            x_hi = self.upper - self.std * self._offset(-b, t_hi)
        out = np.clip(np.where(low, x_lo, x_hi), self.lower, self.upper)
        return out[0] if scalar else out

    def draw(self, n, rng):
        return self.from_std(rng.standard_normal(n))


def _as_corr(corr, m):
    if corr is None:
        return np.eye(m)
    r = np.array(corr, dtype=float)
    if r.shape != (m, m):
        raise ValueError(f"correlation matrix must be {m}x{m}, got {r.shape}")
    if not np.allclose(r, r.T, atol=1e-12):
        raise ValueError("correlation matrix must be symmetric")
    if not np.allclose(np.diag(r), 1.0, atol=1e-12):
        raise ValueError("correlation matrix must have unit diagonal")
    if np.any(np.abs(r) > 1):
        raise ValueError("correlation coefficients must lie in [-1, 1]")
    return r


class ProbInput:
    """Joint input distribution: marginals plus Gaussian-copula correlation.

    Parameters
    ----------
    marginals : sequence of Marginal
    corr : (M, M) array_like, optional
        Copula correlation matrix; identity when omitted.  Must be symmetric
        positive definite with unit diagonal.
    names : sequence of str, optional
    """

    def __init__(self, marginals, corr=None, names=None):
        self.marginals = tuple(marginals)
        if not self.marginals:
            raise ValueError("at least one marginal is required")
        m = len(self.marginals)
        self.corr = _as_corr(corr, m)
        self.corr.setflags(write=False)
        try:
            self.chol = np.linalg.cholesky(self.corr)
        except np.linalg.LinAlgError as exc:
            raise ValueError("copula correlation matrix is not positive definite") from exc
        self.chol.setflags(write=False)
        self.independent = bool(np.array_equal(self.corr, np.eye(m)))
        self.names = tuple(names) if names is not None else tuple(f"x{i + 1}" for i in range(m))
        if len(self.names) != m:
            raise ValueError("names and marginals differ in length")

    @property
    def dim(self):
        return len(self.marginals)

    @classmethod
    def standard(cls, m):
        return cls([Gaussian(0.0, 1.0) for _ in range(m)])

    def __repr__(self):
        return f"ProbInput(dim={self.dim}, independent={self.independent})"

    def _check(self, a):
        a = np.asarray(a, dtype=float)
        one = a.ndim == 1
        a = np.atleast_2d(a)
        if a.shape[1] != self.dim:
            raise ValueError(f"expected points with {self.dim} coordinates, got {a.shape[1]}")
        return a, one

    def from_standard(self, u):
        """Map standard-normal points to physical space."""
        u, one = self._check(u)
        z = u if self.independent else u @ self.chol.T
        x = np.column_stack([mg.from_std(z[:, i]) for i, mg in enumerate(self.marginals)])
        return x[0] if one else x

    def to_standard(self, x):
        """Map physical points to standard-normal space (raises DomainError off-support)."""
        x, one = self._check(x)
        z = np.column_stack([mg.to_std(x[:, i]) for i, mg in enumerate(self.marginals)])
        if not self.independent:
            from scipy.linalg import solve_triangular
            z = solve_triangular(self.chol, z.T, lower=True).T
        return z[0] if one else z

    def sample(self, n, rng):
        """``n`` i.i.d. draws from the joint distribution, shape ``(n, M)``."""
        if n < 1:
            raise ValueError("n must be at least 1")
        if self.independent:
            return np.column_stack([mg.draw(n, rng) for mg in self.marginals])
        return self.from_standard(rng.standard_normal((n, self.dim)))

    def lhs(self, n, rng):
        """Latin hypercube design in physical space.

        Each marginal's ``n`` equiprobable strata hold exactly one point.  For
        dependent inputs the columns are reordered by the ranks of correlated
        normal scores (Iman-Conover), which induces the copula's rank
        dependence without disturbing the stratification.
        """
        if n < 2:
            raise ValueError("a Latin hypercube needs at least 2 points")
        p = qmc.LatinHypercube(d=self.dim, seed=rng).random(n)
        # keep strictly inside (0, 1)
        p = np.clip(p, 1e-15, 1 - 1e-15)
        if not self.independent:
            scores = rng.standard_normal((n, self.dim)) @ self.chol.T
            for j in range(self.dim):
                col = np.sort(p[:, j])
                p[:, j] = col[np.argsort(np.argsort(scores[:, j]))]
        u = ndtri(p)
        # upper half mirrored for symmetric precision
        up = p > 0.5
        u[up] = -ndtri(1 - p[up])
        x = np.column_stack([mg.from_std(u[:, i]) for i, mg in enumerate(self.marginals)])
        return x


def lhs_design(prob_input, n, rng):
    return prob_input.lhs(n, rng)


def marginal_cdf(prob_input, x):
    """Per-column marginal CDF values of physical points ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return np.column_stack([mg.cdf(x[:, i]) for i, mg in enumerate(prob_input.marginals)])


# -- built-in input models -------------------------------------------------

def rs_input(mu_r=5.0, sig_r=0.8, mu_s=2.0, sig_s=0.6):
    return ProbInput([Gaussian(mu_r, sig_r), Gaussian(mu_s, sig_s)], names=("R", "S"))


def four_branch_input():
    return ProbInput([Gaussian(0.0, 1.0), Gaussian(0.0, 1.0)], names=("x1", "x2"))


def hat_input():
    return ProbInput([Gaussian(0.25, 1.0), Gaussian(0.25, 1.0)], names=("x1", "x2"))


FRAME_MARGINALS = [
    ("P1", "lognormal", 133.454, 40.04),
    ("P2", "lognormal", 88.97, 35.59),
    ("P3", "lognormal", 71.175, 28.47),
    ("E4", "truncated_gaussian", 2.1738e7, 3.8304e6),
    ("E5", "truncated_gaussian", 2.3796e7, 3.8304e6),
    ("I6", "truncated_gaussian", 8.1344e-3, 1.0834e-3),
    ("I7", "truncated_gaussian", 1.1509e-2, 1.2980e-3),
    ("I8", "truncated_gaussian", 2.1375e-2, 2.5961e-3),
    ("I9", "truncated_gaussian", 2.5961e-2, 3.0288e-3),
    ("I10", "truncated_gaussian", 1.0812e-2, 2.5961e-3),
    ("I11", "truncated_gaussian", 1.4105e-2, 3.4615e-3),
    ("I12", "truncated_gaussian", 2.3279e-2, 5.6249e-3),
    ("I13", "truncated_gaussian", 2.5961e-2, 6.4902e-3),
    ("A14", "truncated_gaussian", 3.1256e-1, 5.5815e-2),
    ("A15", "truncated_gaussian", 3.7210e-1, 7.4420e-2),
    ("A16", "truncated_gaussian", 5.0606e-1, 9.3025e-2),
    ("A17", "truncated_gaussian", 5.5815e-1, 1.1163e-1),
    ("A18", "truncated_gaussian", 2.5302e-1, 9.3025e-2),
    ("A19", "truncated_gaussian", 2.9117e-1, 1.0232e-1),
    ("A20", "truncated_gaussian", 3.7303e-1, 1.2093e-1),
    ("A21", "truncated_gaussian", 4.1860e-1, 1.9537e-1),
]


def frame_correlation():
    """Copula correlation of the 21-variable, 3-span 5-story frame input.

    Element ``k`` owns inertia ``I_{6+k}`` and area ``A_{14+k}``: 0.95 between
    the two, 0.13 between any I/A properties of different elements, 0.90
    between the two Young's moduli, 0 elsewhere.
    """
    r = np.eye(21)
    props = [(5 + k, 13 + k) for k in range(8)]
    for k, (ik, ak) in enumerate(props):
        r[ik, ak] = r[ak, ik] = 0.95
        for j, (ij, aj) in enumerate(props):
            if j == k:
                continue
            for a in (ik, ak):
                for b in (ij, aj):
                    r[a, b] = 0.13
    r[3, 4] = r[4, 3] = 0.90
    return r


def frame_input():
    margs = []
    for _, kind, mean, std in FRAME_MARGINALS:
        if kind == "lognormal":
            margs.append(Lognormal(mean, std))
        else:
            margs.append(TruncatedGaussian(mean, std, 0.0, np.inf))
    return ProbInput(margs, frame_correlation(), names=[row[0] for row in FRAME_MARGINALS])
