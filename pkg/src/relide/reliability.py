"""Failure-probability estimators and closed-form R-S references."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri


class SubsetError(RuntimeError):
    """Subset simulation ran out of levels before reaching the failure domain.

    The partial run is attached so callers can still reuse its samples.
    """

    def __init__(self, message, threshold, result):
        super().__init__(message)
        self.threshold = threshold
        self.result = result


@dataclass
class RelResult:
    pf: float
    cov: float
    n_evals: int
    no_failures: bool = False
    pf_upper: float | None = None
    thresholds: list = field(default_factory=list)
    samples_near_surface: np.ndarray | None = field(default=None, repr=False)

    @property
    def beta(self):
        return float(-ndtri(self.pf)) if 0 < self.pf < 1 else (np.inf if self.pf == 0 else -np.inf)

    def to_record(self):
        return {"pf": self.pf, "beta": self.beta, "cov": self.cov, "n_evals": self.n_evals}


def mcs(fn, prob_input, rng, n=None, target_cov=None, max_n=10**7, block=10**5):
    """Crude Monte Carlo estimate of ``P(fn(X) <= 0)``.

    With ``n`` a fixed sample size is used.  With ``target_cov`` samples are
    drawn in blocks until the coefficient of variation drops below the target
    or ``max_n`` is reached.  Zero observed failures give ``pf = 0`` with the
    ``no_failures`` flag and ``pf_upper = 1/n``.
    """
    if n is None and target_cov is None:
        raise ValueError("give n or target_cov")
    if n is not None and n < 1000:
        raise ValueError("n must be at least 1000")
    if target_cov is not None and not 0 < target_cov < 1:
        raise ValueError("target_cov must lie in (0, 1)")
    goal = n if n is not None else max_n
    fails = 0
    done = 0
    while done < goal:
        m = min(block, goal - done)
        fails += int(np.count_nonzero(np.asarray(fn(prob_input.sample(m, rng))) <= 0))
        done += m
        if target_cov is not None and fails > 0:
            pf = fails / done
            if np.sqrt((1 - pf) / (done * pf)) <= target_cov:
                break
    pf = fails / done
    if fails == 0:
        return RelResult(0.0, np.inf, done, no_failures=True, pf_upper=1.0 / done)
    cov = float(np.sqrt((1 - pf) / (done * pf))) if pf < 1 else 0.0
    return RelResult(pf, cov, done)


def _chain_gamma(ind, p):
    """Correlation factor of one level's estimator from chain indicators.

    ``ind`` has shape ``(n_chains, chain_length)``.
    """
    nc, ns = ind.shape
    n = nc * ns
    if ns < 2 or p <= 0 or p >= 1:
        return 0.0
    r0 = p * (1 - p)
    g = 0.0
    for k in range(1, ns):
        rk = np.sum(ind[:, :ns - k] * ind[:, k:]) / (n - k * nc) - p * p
        g += 2 * (1 - k * nc / n) * rk / r0
    return max(g, 0.0)


def subset(fn, prob_input, rng, n_per_level=10**5, p0=0.1, max_levels=12,
           spread=1.0, keep_samples=True):
    """Subset simulation in standard-normal space.

    Intermediate thresholds are the empirical ``p0``-quantiles of ``fn``;
    conditional samples come from component-wise Metropolis chains (uniform
    proposal ``u_k + U(-spread, spread)``) started at the seeds of the
    previous level.  The coefficient of variation aggregates the per-level
    delta approximations including within-chain correlation.

    Raises ``SubsetError`` when ``max_levels`` levels do not reach ``fn <= 0``.
    """
    if n_per_level < 1000:
        raise ValueError("n_per_level must be at least 1000")
    if not 0 < p0 <= 0.5:
        raise ValueError("p0 must lie in (0, 0.5]")
    n_seeds = int(round(n_per_level * p0))
    chain_len = n_per_level // n_seeds
    if n_seeds * chain_len != n_per_level:
        raise ValueError("n_per_level * p0 and 1/p0 must be integers")
    dim = prob_input.dim

    def g(u):
        return np.asarray(fn(prob_input.from_standard(u)), dtype=float)

    u = rng.standard_normal((n_per_level, dim))
    y = g(u)
    n_evals = n_per_level
    kept = [u] if keep_samples else []
    thresholds = []
    probs = []
    deltas2 = []
    ind = None

    def result(pf):
        cov = float(np.sqrt(np.sum(deltas2))) if deltas2 else 0.0
        pool = np.vstack(kept) if keep_samples else None
        return RelResult(float(pf), cov, n_evals, thresholds=list(thresholds),
                         samples_near_surface=pool)

    for level in range(max_levels):
        order = np.argsort(y, kind="stable")
        ys = y[order]
        b = 0.5 * (ys[n_seeds - 1] + ys[n_seeds])
        if b <= 0:
            frac = np.count_nonzero(y <= 0) / n_per_level
            thresholds.append(0.0)
            if frac > 0:
                gam = _chain_gamma(ind, frac) if ind is not None else 0.0
                deltas2.append((1 - frac) / (n_per_level * frac) * (1 + gam))
            pf = np.prod(probs) * frac if probs else frac
            return result(pf)
        thresholds.append(float(b))
        probs.append(p0)
        gam = _chain_gamma(ind, p0) if ind is not None else 0.0
        deltas2.append((1 - p0) / (n_per_level * p0) * (1 + gam))

        seeds = u[order[:n_seeds]]
        seed_y = ys[:n_seeds]
        cur, cur_y = seeds.copy(), seed_y.copy()
        us = np.empty((n_seeds, chain_len, dim))
        yv = np.empty((n_seeds, chain_len))
        us[:, 0], yv[:, 0] = cur, cur_y
        for step in range(1, chain_len):
            cand = cur + rng.uniform(-spread, spread, size=cur.shape)
            ratio = np.exp(0.5 * (cur ** 2 - cand ** 2))
            take = rng.random(cur.shape) < ratio
            prop = np.where(take, cand, cur)
            moved = np.any(take, axis=1)
            py = cur_y.copy()
            if moved.any():
                py[moved] = g(prop[moved])
                n_evals += int(moved.sum())
            ok = moved & (py <= b)
            cur = np.where(ok[:, None], prop, cur)
            cur_y = np.where(ok, py, cur_y)
            us[:, step], yv[:, step] = cur, cur_y
        u = us.reshape(n_per_level, dim)
        y = yv.reshape(n_per_level)
        if keep_samples:
            kept.append(u)
        # indicators of the next threshold evaluated along each chain
        nxt = np.sort(y)
        b_next = max(0.5 * (nxt[n_seeds - 1] + nxt[n_seeds]), 0.0)
        ind = (yv <= b_next).astype(float)

    partial = result(np.prod(probs) * np.count_nonzero(y <= 0) / n_per_level)
    raise SubsetError(f"no convergence after {max_levels} levels (last threshold {thresholds[-1]:.4g})",
                      thresholds[-1], partial)


def rs_analytic(mu_r, sig_r, mu_s, sig_s, sigma_eps=0.0, gamma=1.0):
    """Noise-free and noisy failure probabilities of ``gamma (R - S) + eps``."""
    if not (sig_r > 0 and sig_s > 0):
        raise ValueError("standard deviations must be positive")
    if sigma_eps < 0 or not gamma > 0:
        raise ValueError("need sigma_eps >= 0 and gamma > 0")
    var = sig_r ** 2 + sig_s ** 2
    pf_free = float(ndtr(-(mu_r - mu_s) / np.sqrt(var)))
    pf_noisy = float(ndtr(-gamma * (mu_r - mu_s) / np.sqrt(gamma ** 2 * var + sigma_eps ** 2)))
    return pf_free, pf_noisy
