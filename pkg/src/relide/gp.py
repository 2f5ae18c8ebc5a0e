"""Gaussian process regression with a homoskedastic nugget.

Simple kriging (zero trend) on standardised outputs with a Matern 5/2
ellipsoidal correlation.  The nugget is parameterised through the noise
ratio ``tau = sigma_n^2 / sigma_total^2``, so that

    R_tilde = (1 - tau) R + tau I,      r_tilde = (1 - tau) r,
    mean(x) = r_tilde^T R_tilde^{-1} Y,
    var(x)  = sigma_total^2 (1 - r_tilde^T R_tilde^{-1} r_tilde),

and ``sigma_total^2`` has the closed-form ML estimate ``Y^T R_tilde^{-1} Y / N``.
``theta`` and ``tau`` minimise the concentrated negative log-likelihood.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import lapack, solve_triangular
from scipy.optimize import minimize
from scipy.spatial.distance import cdist
from scipy.stats import qmc

from ._kernels import matern_lower

log = logging.getLogger(__name__)

SQRT5 = np.sqrt(5.0)
JITTER_LADDER = (1e-10, 1e-8, 1e-6)
BAD_NLL = 1e25

# process-wide tallies, handy when diagnosing ill-conditioned designs
STATS = {"jitter": 0, "clamp": 0}


class NumericalError(np.linalg.LinAlgError):
    pass


class TrainingError(RuntimeError):
    pass


def matern52(h):
    """Matern 5/2 correlation of the (already theta-scaled) distance ``h``."""
    a = SQRT5 * np.asarray(h, dtype=float)
    return (1.0 + a + a * a / 3.0) * np.exp(-a)


def _matern_inplace(h):
    h *= SQRT5
    e = np.exp(-h)
    h *= (1.0 + h / 3.0)
    h += 1.0
    h *= e
    return h


def correlation(xa, xb, theta, chunk=256):
    """Cross-correlation matrix between point sets ``xa`` and ``xb``."""
    theta = np.asarray(theta, dtype=float)
    a = np.atleast_2d(xa) / theta
    b = np.atleast_2d(xb) / theta
    out = np.empty((len(a), len(b)))
    for i in range(0, len(a), chunk):
        blk = cdist(a[i:i + chunk], b)
        out[i:i + chunk] = _matern_inplace(blk)
    return out


@dataclass
class Design:
    """Experimental design in standard-normal input space.

    Outputs are standardised to zero mean and unit variance; ``y_std`` is
    what the likelihood and the predictor see.  Replicated rows are allowed.
    """

    points: np.ndarray
    y: np.ndarray
    shift: float = field(init=False)
    scale: float = field(init=False)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.y = np.asarray(self.y, dtype=float).ravel()
        if len(self.points) != len(self.y):
            raise ValueError("points and observations differ in length")
        if len(self.y) < 2:
            raise ValueError("a design needs at least two observations")
        if not np.all(np.isfinite(self.y)) or not np.all(np.isfinite(self.points)):
            raise ValueError("design contains non-finite values")
        self.shift = float(np.mean(self.y))
        sd = float(np.std(self.y))
        self.scale = sd if sd > 0 else 1.0

    @property
    def n(self):
        return len(self.y)

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def y_std(self):
        return (self.y - self.shift) / self.scale

    def extend(self, points, y):
        return Design(np.vstack([self.points, np.atleast_2d(points)]),
                      np.concatenate([self.y, np.atleast_1d(y)]))


def _factor(points, theta, tau):
    """Cholesky factor of R_tilde, walking the jitter ladder on failure."""
    scaled = points / np.asarray(theta, dtype=float)
    for extra in (0.0, *JITTER_LADDER):
        r = matern_lower(scaled)
        r *= (1.0 - tau)
        r.flat[::len(r) + 1] += tau + extra
        c, info = lapack.dpotrf(r, lower=1, clean=1, overwrite_a=1)
        if info == 0:
            if extra > 0:
                STATS["jitter"] += 1
            return c, extra
    r = correlation(points, points, theta) * (1.0 - tau)
    r.flat[::len(r) + 1] += tau
    cond = np.linalg.cond(r) if len(r) <= 3000 else float("nan")
    raise NumericalError(f"R_tilde not positive definite after jitter (cond ~ {cond:.3e})")


def _sigma_floor(y_std):
    v = float(np.var(y_std))
    return 1e-12 * (v if v > 0 else 1.0)


def _nll_from_factor(chol, y_std):
    n = len(y_std)
    alpha, info = lapack.dpotrs(chol, y_std, lower=1)
    if info != 0:
        raise NumericalError("triangular solve failed")
    s2 = max(float(y_std @ alpha) / n, _sigma_floor(y_std))
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return 0.5 * (logdet + n * np.log(2 * np.pi * s2) + n), s2, alpha


def neg_log_likelihood(design, theta, tau, return_sigma2=False):
    """Concentrated negative log-likelihood of ``(theta, tau)``.

    Returns the value, and with ``return_sigma2`` also the ML estimate of
    the total variance in standardised output units.
    """
    theta = np.asarray(theta, dtype=float)
    if np.any(theta <= 0):
        raise ValueError("theta must be positive")
    if not 0 <= tau < 1:
        raise ValueError("tau must lie in [0, 1)")
    chol, _ = _factor(design.points, theta, tau)
    val, s2, _ = _nll_from_factor(chol, design.y_std)
    return (val, s2) if return_sigma2 else val


@dataclass
class FitOptions:
    """Hyperparameter search settings.

    The search runs in ``(log theta, logit tau)`` with bounded Nelder-Mead
    from ``n_starts`` Latin-hypercube starts plus any ``starts`` given.
    ``tau`` set to a number fixes the noise ratio (0 gives interpolation).
    ``max_points`` caps the number of design rows used for the likelihood;
    the returned model is always conditioned on the full design.
    """

    n_starts: int = 10
    theta_bounds: tuple = (0.1, 10.0)
    tau_bounds: tuple = (1e-6, 1 - 1e-6)
    tau: float | None = None
    seed: int = 0
    maxfev: int = 400
    xatol: float = 1e-3
    fatol: float = 1e-6
    simplex_step: float = 0.5
    max_points: int | None = None
    starts: list = field(default_factory=list)


@dataclass(frozen=True)
class Prediction:
    mean: float | np.ndarray
    variance: float | np.ndarray

    @property
    def std(self):
        return np.sqrt(self.variance)


@dataclass
class GpModel:
    theta: np.ndarray
    tau: float
    sigma2_total: float
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    design: Design = field(repr=False)
    nll: float = float("nan")
    jitter: float = 0.0

    @property
    def sigma2_noise(self):
        return self.tau * self.sigma2_total

    @property
    def sigma2_process(self):
        return (1.0 - self.tau) * self.sigma2_total

    @property
    def params(self):
        """Hyperparameters in the optimiser's coordinates."""
        p = list(np.log(self.theta))
        if 0 < self.tau < 1:
            p.append(float(np.log(self.tau / (1 - self.tau))))
        return np.array(p)

    def to_record(self):
        return {
            "theta": [float(t) for t in self.theta],
            "tau": float(self.tau),
            "sigma2_total": float(self.sigma2_total),
            "design": {"points": self.design.points.tolist(), "y": self.design.y.tolist()},
        }

    def predict_mean(self, xs, chunk=256):
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        out = np.empty(len(xs))
        w = (1.0 - self.tau) * self.alpha
        for i in range(0, len(xs), chunk):
            out[i:i + chunk] = correlation(xs[i:i + chunk], self.design.points, self.theta) @ w
        return self.design.shift + self.design.scale * out

    def predict_batch(self, xs, chunk=1024):
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        mean = np.empty(len(xs))
        var = np.empty(len(xs))
        for i in range(0, len(xs), chunk):
            rt = (1.0 - self.tau) * correlation(xs[i:i + chunk], self.design.points, self.theta)
            mean[i:i + chunk] = rt @ self.alpha
            v = solve_triangular(self.chol, rt.T, lower=True, check_finite=False)
            var[i:i + chunk] = 1.0 - np.einsum("ij,ij->j", v, v)
        neg = var < 0
        if neg.any():
            STATS["clamp"] += int(neg.sum())
            var[neg] = 0.0
        return Prediction(self.design.shift + self.design.scale * mean,
                          self.sigma2_total * var)

    def predict(self, x):
        p = self.predict_batch(np.atleast_2d(x))
        return Prediction(float(p.mean[0]), float(p.variance[0]))


def predict(model, x):
    return model.predict(x)


def predict_batch(model, xs):
    return model.predict_batch(xs)


def condition(design, theta, tau):
    """Model with the given hyperparameters conditioned on ``design``."""
    theta = np.asarray(theta, dtype=float)
    chol, jitter = _factor(design.points, theta, tau)
    nll, s2, alpha = _nll_from_factor(chol, design.y_std)
    return GpModel(theta=theta, tau=float(tau), sigma2_total=s2 * design.scale ** 2,
                   chol=chol, alpha=alpha, design=design, nll=nll, jitter=jitter)


def _unpack(p, m, fixed_tau):
    theta = np.exp(p[:m])
    tau = fixed_tau if fixed_tau is not None else 1.0 / (1.0 + np.exp(-p[m]))
    return theta, float(tau)


def _simplex(x0, lo, hi, step):
    pts = [x0]
    for k in range(len(x0)):
        v = x0.copy()
        v[k] = v[k] + step if v[k] + step <= hi[k] else v[k] - step
        pts.append(v)
    return np.array(pts)


def fit(design, opts=None):
    """Maximum-likelihood fit of ``theta`` and ``tau`` followed by conditioning.

    Deterministic for a fixed ``opts.seed``.  Raises ``TrainingError`` when no
    start yields a factorizable correlation matrix.
    """
    opts = opts or FitOptions()
    m = design.dim
    fixed_tau = opts.tau
    lo = [np.log(opts.theta_bounds[0])] * m
    hi = [np.log(opts.theta_bounds[1])] * m
    if fixed_tau is None:
        t0, t1 = opts.tau_bounds
        lo.append(np.log(t0 / (1 - t0)))
        hi.append(np.log(t1 / (1 - t1)))
    lo, hi = np.array(lo), np.array(hi)

    rng = np.random.default_rng(opts.seed)
    mle = design
    if opts.max_points is not None and design.n > opts.max_points:
        keep = np.sort(rng.choice(design.n, opts.max_points, replace=False))
        mle = Design(design.points[keep], design.y[keep])
    y_std = mle.y_std

    def objective(p):
        theta, tau = _unpack(p, m, fixed_tau)
        try:
            chol, _ = _factor(mle.points, theta, tau)
            return _nll_from_factor(chol, y_std)[0]
        except np.linalg.LinAlgError:
            return BAD_NLL

    starts = [np.clip(np.asarray(s, dtype=float)[:len(lo)], lo, hi)
              for s in opts.starts if len(s) >= len(lo)]
    if opts.n_starts > 0:
        u = qmc.LatinHypercube(d=len(lo), seed=rng).random(opts.n_starts)
        starts += list(lo + u * (hi - lo))
    if not starts:
        raise ValueError("no optimisation starts")

    best_p, best_f = None, np.inf
    for x0 in starts:
        res = minimize(objective, x0, method="Nelder-Mead", bounds=list(zip(lo, hi)),
                       options={"maxfev": opts.maxfev, "xatol": opts.xatol,
                                "fatol": opts.fatol,
                                "initial_simplex": _simplex(x0, lo, hi, opts.simplex_step)})
        if res.fun < best_f:
            best_p, best_f = res.x, float(res.fun)
    if best_p is None or best_f >= BAD_NLL:
        raise TrainingError("no start produced a factorizable correlation matrix")
    theta, tau = _unpack(best_p, m, fixed_tau)
    model = condition(design, theta, tau)
    log.debug("fit N=%d theta=%s tau=%.3g nll=%.4f", design.n, theta, tau, model.nll)
    return model


def refit_options(opts, model, n_starts=None):
    """Options warm-started from ``model``'s hyperparameters."""
    kw = {"starts": [model.params]}
    if n_starts is not None:
        kw["n_starts"] = n_starts
    return replace(opts, **kw)
