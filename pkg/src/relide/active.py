"""Active-learning reliability analysis with the noise-aware U_N criterion.

Each iteration fits the GP on the current design, estimates the failure
probability of the GP mean by subset simulation, scores the subset samples
by the expected drop in misclassification probability after one more noisy
observation, and enriches the design with the best point (or the best point
of each of K clusters).  The loop stops when the evaluation budget is spent.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtr

from . import gp
from .inputs import ProbInput
from .reliability import SubsetError, subset
from .rng import lanes

log = logging.getLogger(__name__)


# -- learning function ---------------------------------------------------------

def pm(mean, variance):
    """Probability that the sign of the GP prediction is wrong."""
    mean = np.asarray(mean, dtype=float)
    variance = np.asarray(variance, dtype=float)
    sd = np.sqrt(np.maximum(variance, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        p = ndtr(-np.abs(mean) / sd)
    p = np.where(sd > 0, p, np.where(mean == 0, 0.5, 0.0))
    return p[()] if p.ndim == 0 else p


def lookahead_var(sigma2_g, sigma2_n):
    """Predictive variance after one more observation with noise ``sigma2_n``."""
    s2g = np.asarray(sigma2_g, dtype=float)
    s2n = np.asarray(sigma2_n, dtype=float)
    tot = s2g + s2n
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.where(tot > 0, s2g * s2n / tot, 0.0)
    return v[()] if v.ndim == 0 else v


@dataclass(frozen=True)
class LearnScore:
    pm: np.ndarray
    un: np.ndarray

    @property
    def best(self):
        return int(np.argmax(self.un))


def un_score(prediction, sigma2_n):
    """U_N scores: current minus look-ahead misclassification probability.

    The look-ahead keeps the current mean and shrinks the variance with
    :func:`lookahead_var`.  Without noise (``sigma2_n == 0``) the score is
    the plain misclassification probability.
    """
    mean = np.atleast_1d(np.asarray(prediction.mean, dtype=float))
    var = np.atleast_1d(np.asarray(prediction.variance, dtype=float))
    p_now = pm(mean, var)
    p_now = np.atleast_1d(p_now)
    if sigma2_n <= 0:
        return LearnScore(p_now, p_now.copy())
    p_next = np.atleast_1d(pm(mean, lookahead_var(var, sigma2_n)))
    un = np.clip(p_now - p_next, 0.0, None)
    return LearnScore(p_now, un)


def select_batch(un, candidates, k, rng, keep_frac=0.05):
    """Indices of ``k`` enrichment points among ``candidates``.

    ``k == 1`` is the plain argmax (lowest index on ties).  Otherwise the
    candidates scoring at least ``keep_frac * max(un)`` are clustered with
    K-means and the best-scoring member of each cluster is returned.
    Returns ``(indices, short)`` where ``short`` flags fewer than ``k``
    distinct candidates.
    """
    un = np.asarray(un, dtype=float)
    candidates = np.atleast_2d(candidates)
    if k < 1:
        raise ValueError("k must be at least 1")
    if len(un) == 0:
        raise ValueError("empty candidate set")
    if k == 1:
        return np.array([int(np.argmax(un))]), False
    top = un.max()
    keep = np.flatnonzero(un >= keep_frac * top) if top > 0 else np.arange(len(un))
    # first occurrence of each distinct row
    _, first = np.unique(candidates[keep], axis=0, return_index=True)
    keep = keep[np.sort(first)]
    if len(keep) <= k:
        return keep, len(keep) < k
    from sklearn.cluster import KMeans
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=50,
                random_state=int(rng.integers(2**31 - 1)))
    labels = km.fit_predict(candidates[keep])
    picked = []
    for c in range(k):
        members = keep[labels == c]
        if len(members):
            picked.append(members[int(np.argmax(un[members]))])
    picked = np.array(sorted(picked, key=lambda i: (-un[i], i)))
    return picked, len(picked) < k


# -- loop ---------------------------------------------------------------------------

@dataclass
class LoopConfig:
    """Settings of one active-learning run.

    ``limitstate`` maps physical points to (possibly noisy) outputs.  The GP
    lives in standard-normal space.  Hyperparameters are re-optimised at every
    iteration while the design has at most ``retrain_below`` points and every
    ``retrain_every`` iterations afterwards; in between the model is
    re-conditioned with the previous hyperparameters.
    """

    limitstate: object
    prob_input: object
    n_ini: int = 10
    k: int = 1
    budget: int = 600
    seed: int = 0
    fit: gp.FitOptions = field(default_factory=gp.FitOptions)
    loop_starts: int = 2
    retrain_every: int = 5
    retrain_below: int = 60
    n_per_level: int = 10**4
    n_per_level_final: int = 10**5
    p0: float = 0.1
    max_levels: int = 12
    spread: float = 1.0
    candidate_cap: int = 10**4
    keep_frac: float = 0.05
    sigma2_n: float | None = None
    early_stop: bool = False
    early_stop_tol: float = 0.01
    early_stop_window: int = 5
    duplicate_tol: float = 1e-8
    initial_points: np.ndarray | None = None


@dataclass
class LoopState:
    iteration: int
    design: gp.Design
    model: gp.GpModel
    history: list
    budget: int
    k: int
    x_phys: np.ndarray = field(repr=False)
    added: int = 0
    short_batches: int = 0
    replicated: int = 0
    final: dict | None = None
    batches: list = field(default_factory=list, repr=False)


class LoopAborted(RuntimeError):
    def __init__(self, message, state):
        super().__init__(message)
        self.state = state


def _reliability(model, cfg, n_per_level, seed):
    std = ProbInput.standard(model.design.dim)
    try:
        res = subset(model.predict_mean, std, np.random.default_rng(seed),
                     n_per_level=n_per_level, p0=cfg.p0, max_levels=cfg.max_levels,
                     spread=cfg.spread)
        return res, False
    except SubsetError as exc:
        return exc.result, True


def _beta_stable(history, tol, window):
    if len(history) <= window:
        return False
    b = [h["beta"] for h in history]
    last = b[-1]
    return all(np.isfinite(last) and abs(last - b[-1 - j]) < tol for j in range(1, window + 1))


def run(cfg, on_iteration=None):
    """Run the active-learning loop to the end of the budget.

    Returns the final :class:`LoopState`; ``state.final`` holds the closing
    estimate obtained with ``n_per_level_final`` samples per subset level.
    """
    if cfg.budget < 0:
        raise ValueError("budget must be non-negative")
    if cfg.budget and cfg.budget < cfg.k:
        raise ValueError("budget must be at least the batch size")
    rngs = lanes(cfg.seed, ["design", "fit", "select", "reliability"])
    rel_seed = int(rngs["reliability"].integers(2**63 - 1))
    fit_seed = int(rngs["fit"].integers(2**31 - 1))
    t0 = time.perf_counter()
    ls = cfg.limitstate
    pin = cfg.prob_input
    evals0 = ls.eval_count

    if cfg.initial_points is not None:
        x0 = np.atleast_2d(np.asarray(cfg.initial_points, dtype=float))
    else:
        x0 = pin.lhs(cfg.n_ini, rngs["design"])
    u0 = pin.to_standard(x0)
    y0 = ls(x0)
    design = gp.Design(u0, y0)
    fopts = replace(cfg.fit, seed=fit_seed)

    def train(design, prev, it):
        full = prev is None
        if not full and design.n > cfg.retrain_below and it % cfg.retrain_every:
            return gp.condition(design, prev.theta, prev.tau)
        opts = replace(fopts, seed=fit_seed + it)
        if not full:
            opts = replace(opts, n_starts=cfg.loop_starts, starts=[prev.params])
        try:
            return gp.fit(design, opts)
        except (gp.TrainingError, np.linalg.LinAlgError):
            log.warning("GP training failed at iteration %d; retrying with fresh starts", it)
            return gp.fit(design, replace(fopts, seed=fit_seed + 7919 * (it + 1)))

    try:
        model = train(design, None, 0)
    except (gp.TrainingError, np.linalg.LinAlgError) as exc:
        raise LoopAborted(f"initial GP training failed: {exc}", None) from exc
    state = LoopState(0, design, model, [], cfg.budget, cfg.k, x_phys=x0)

    while True:
        rel, unresolved = _reliability(state.model, cfg, cfg.n_per_level, rel_seed)
        row = {
            "iteration": state.iteration,
            "N": state.design.n,
            "pf": rel.pf,
            "beta": rel.beta,
            "cov": rel.cov,
            "evals": ls.eval_count - evals0,
            "seconds": time.perf_counter() - t0,
            "theta": [float(t) for t in state.model.theta],
            "tau": state.model.tau,
            "unresolved": unresolved,
        }
        state.history.append(row)
        if on_iteration is not None:
            on_iteration(state, row)
        if state.added >= cfg.budget:
            break
        if cfg.early_stop and _beta_stable(state.history, cfg.early_stop_tol, cfg.early_stop_window):
            break

        cands = rel.samples_near_surface
        if len(cands) > cfg.candidate_cap:
            pick = rngs["select"].choice(len(cands), cfg.candidate_cap, replace=False)
            cands = cands[np.sort(pick)]
        pred = state.model.predict_batch(cands)
        s2n = state.model.sigma2_noise if cfg.sigma2_n is None else cfg.sigma2_n
        scores = un_score(pred, s2n)
        k = min(cfg.k, cfg.budget - state.added)
        idx, short = select_batch(scores.un, cands, k, rngs["select"], cfg.keep_frac)
        state.short_batches += int(short)
        new_u = cands[idx]
        # points coinciding with existing ones are simply evaluated again
        d = np.min(np.linalg.norm(new_u[:, None, :] - state.design.points[None], axis=2), axis=1)
        state.replicated += int(np.count_nonzero(d < cfg.duplicate_tol))
        new_x = pin.from_standard(new_u)
        new_y = np.atleast_1d(ls(new_x))
        state.batches.append({"iteration": state.iteration, "un": scores.un[idx].tolist()})
        state.design = state.design.extend(new_u, new_y)
        state.x_phys = np.vstack([state.x_phys, new_x])
        state.added += len(idx)
        state.iteration += 1
        try:
            state.model = train(state.design, state.model, state.iteration)
        except (gp.TrainingError, np.linalg.LinAlgError) as exc:
            raise LoopAborted(f"GP training failed at iteration {state.iteration}: {exc}", state) from exc

    last = state.history[-1]
    if cfg.n_per_level_final != cfg.n_per_level or last["unresolved"]:
        final_model = gp.fit(state.design, replace(fopts, seed=fit_seed + 104729,
                                                   starts=[state.model.params]))
        state.model = final_model
        rel, unresolved = _reliability(final_model, cfg, cfg.n_per_level_final, rel_seed)
        state.final = {"pf": rel.pf, "beta": rel.beta, "cov": rel.cov, "unresolved": unresolved,
                       "n_evals_surrogate": rel.n_evals}
    else:
        state.final = {k: last[k] for k in ("pf", "beta", "cov", "unresolved")}
    state.final["N"] = state.design.n
    state.final["evals"] = ls.eval_count - evals0
    state.final["seconds"] = time.perf_counter() - t0
    return state


def run_record(state):
    """Serializable summary of a finished loop."""
    hist = [{k: v for k, v in row.items()} for row in state.history]
    return {
        "history": hist,
        "final": state.final,
        "design": {"x": state.x_phys.tolist(), "u": state.design.points.tolist(),
                   "y": state.design.y.tolist()},
        "gp": {k: v for k, v in state.model.to_record().items() if k != "design"},
        "evals": state.final["evals"] if state.final else None,
        "added": state.added,
        "short_batches": state.short_batches,
        "replicated": state.replicated,
    }
