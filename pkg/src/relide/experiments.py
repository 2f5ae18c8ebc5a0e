"""Replicated experiments driven by a parsed configuration.

Output layout for an experiment with output directory ``out``::

    out/summary.json                 box-plot statistics of every case
    out/failures.json                only when some replication failed
    out/<case>/results.csv           one row per iteration and replication
    out/<case>/summary.json          statistics of this case
    out/<case>/runs/rep_000.json     full record of replication 0

Every file is written to a temporary name and renamed into place.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path

import numpy as np

from . import gp
from .active import LoopAborted, LoopConfig, run, run_record
from .config import Case
from .inputs import ProbInput
from .limitstate import calibrate_noise, corrupt
from .reliability import SubsetError, mcs, subset
from .rng import lanes

log = logging.getLogger(__name__)

COLUMNS = ["replication", "iteration", "N", "pf", "beta", "cov", "evals", "seconds"]
FINAL = "final"


def atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "w") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def dump_json(path, obj):
    atomic_write(path, json.dumps(_jsonable(obj), indent=1, sort_keys=True) + "\n")


def default_workers():
    env = os.environ.get("RELIDE_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


# -- single replications -----------------------------------------------------------

def noise_level(case, cache=None):
    """``sigma_eps`` of a case, calibrating on the noise-free problem if needed."""
    sig = case.noise_sigma()
    if sig is not None:
        return sig
    key = json.dumps([case.problem, case.input, case.noise], sort_keys=True)
    if cache is not None and key in cache:
        return cache[key]
    seed = case.noise.get("calibration_seed", case.method.get("base_seed", 0))
    rng = lanes(int(seed), ["calibration"])["calibration"]
    base = case.build_problem()
    try:
        sig = calibrate_noise(base, case.build_input(), case.noise["alpha"], rng,
                              n=int(case.noise.get("calibration_samples", 10**6)))
    finally:
        if hasattr(base, "close"):
            base.close()
    if cache is not None:
        cache[key] = sig
    return sig


def _noisy(base, sigma_eps, rng):
    return base if sigma_eps == 0 else corrupt(base, sigma_eps, rng)


def _row(r, it, n, pf, beta, cov, evals, seconds):
    return {"replication": r, "iteration": it, "N": n, "pf": pf, "beta": beta,
            "cov": cov, "evals": evals, "seconds": seconds}


def run_replication(case_echo, r, seed, sigma_eps):
    """Run replication ``r`` of a case; returns ``(rows, record)``.

    Raises on failure; a :class:`LoopAborted` carries the partial state.
    """
    case = Case(**case_echo)
    m = case.method
    t0 = time.perf_counter()
    streams = lanes(seed, ["noise", "method"])
    pin = case.build_input()
    base = case.build_problem()
    try:
        ls = _noisy(base, sigma_eps, streams["noise"])
        record = {"config": case.echo(), "replication": r, "seed": seed,
                  "sigma_eps": sigma_eps}
        if case.kind == "mcs":
            res = mcs(ls, pin, streams["method"], n=m.get("n"), target_cov=m.get("target_cov"),
                      max_n=m.get("max_n", 10**7))
            rows = [_row(r, 0, res.n_evals, res.pf, res.beta, res.cov, ls.eval_count,
                         time.perf_counter() - t0)]
            record["result"] = {**res.to_record(), "no_failures": res.no_failures,
                                "pf_upper": res.pf_upper}
        elif case.kind == "subset":
            try:
                res = subset(ls, pin, streams["method"], n_per_level=m.get("n_per_level", 10**5),
                             p0=m.get("p0", 0.1), max_levels=m.get("max_levels", 12),
                             keep_samples=False)
            except SubsetError as exc:
                raise RuntimeError(str(exc)) from None
            rows = [_row(r, 0, res.n_evals, res.pf, res.beta, res.cov, ls.eval_count,
                         time.perf_counter() - t0)]
            record["result"] = {**res.to_record(), "thresholds": res.thresholds}
        elif case.kind == "gp":
            rows, extra = _gp_denoise(case, r, ls, pin, streams["method"], t0)
            record.update(extra)
        else:
            rows, extra = _active(case, r, ls, pin, seed, t0)
            record.update(extra)
        record["evals"] = ls.eval_count
        record["seconds"] = time.perf_counter() - t0
        return rows, record
    finally:
        if hasattr(base, "close"):
            base.close()


def _gp_denoise(case, r, ls, pin, rng, t0):
    """Fit the GP once on an LHS design and estimate pf on its mean by MCS."""
    m = case.method
    x = pin.lhs(int(m["n_train"]), rng)
    y = ls(x)
    design = gp.Design(pin.to_standard(x), y)
    opts = gp.FitOptions(n_starts=int(m.get("n_starts", 10)), seed=int(rng.integers(2**31 - 1)),
                         max_points=m.get("max_points"), tau=m.get("tau"))
    model = gp.fit(design, opts)
    std = ProbInput.standard(pin.dim)
    res = mcs(model.predict_mean, std, rng, n=int(m.get("n_mcs", 10**5)))
    rows = [_row(r, 0, design.n, res.pf, res.beta, res.cov, ls.eval_count,
                 time.perf_counter() - t0)]
    hyper = {k: v for k, v in model.to_record().items() if k != "design"}
    return rows, {"result": res.to_record(), "gp": hyper}


def loop_config(case, ls, pin, seed):
    m = case.method
    fit = gp.FitOptions(n_starts=int(m.get("n_starts", 10)), tau=m.get("tau"))
    return LoopConfig(
        ls, pin, n_ini=int(m.get("n_ini", 10)), k=int(m.get("k", 1)),
        budget=int(m.get("budget", 600)), seed=seed, fit=fit,
        loop_starts=int(m.get("loop_starts", 2)), retrain_every=int(m.get("retrain_every", 5)),
        retrain_below=int(m.get("retrain_below", 60)),
        n_per_level=int(m.get("n_per_level", 10**4)),
        n_per_level_final=int(m.get("n_per_level_final", 10**5)),
        candidate_cap=int(m.get("candidate_cap", 10**4)),
        keep_frac=float(m.get("keep_frac", 0.05)), sigma2_n=m.get("sigma2_n"),
        early_stop=bool(m.get("early_stop", False)))


def _history_rows(r, history):
    return [_row(r, h["iteration"], h["N"], h["pf"], h["beta"], h["cov"], h["evals"],
                 h["seconds"]) for h in history]


def _active(case, r, ls, pin, seed, t0):
    state = run(loop_config(case, ls, pin, seed))
    rows = _history_rows(r, state.history)
    f = state.final
    rows.append(_row(r, FINAL, f["N"], f["pf"], f["beta"], f["cov"], f["evals"], f["seconds"]))
    return rows, run_record(state)


# -- campaigns ---------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in COLUMNS])
    return buf.getvalue()


def read_rows(path):
    """Rows of a results file with numeric fields converted."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            conv = {}
            for k, v in row.items():
                if k == "iteration" and v == FINAL:
                    conv[k] = v
                elif k in ("replication", "iteration", "N", "evals"):
                    conv[k] = int(v)
                else:
                    conv[k] = float(v)
            out.append(conv)
    return out


def final_rows(rows):
    """The closing row of each replication (the ``final`` row when present)."""
    by_rep = {}
    for row in rows:
        r = row["replication"]
        if r not in by_rep or row["iteration"] == FINAL or by_rep[r]["iteration"] != FINAL:
            by_rep[r] = row
    return [by_rep[r] for r in sorted(by_rep)]


def box_stats(values):
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return None
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"median": float(med), "q1": float(q1), "q3": float(q3),
            "min": float(v.min()), "max": float(v.max()), "iqr": float(q3 - q1)}


def summarize(rows, failures=0):
    fin = final_rows(rows)
    return {
        "replications": len(fin),
        "failures": failures,
        "pf": box_stats([r["pf"] for r in fin]),
        "beta": box_stats([r["beta"] for r in fin]),
        "evals": box_stats([r["evals"] for r in fin]),
    }


def _tasks(cfg, cache):
    tasks = []
    for ci, case in enumerate(cfg.cases):
        sig = noise_level(case, cache)
        for r, seed in enumerate(case.seeds()):
            tasks.append((ci, case.echo(), r, seed, sig))
    return tasks


def _call(task):
    ci, echo, r, seed, sig = task
    try:
        rows, record = run_replication(echo, r, seed, sig)
        return ci, r, rows, record, None
    except LoopAborted as exc:
        partial = None
        if exc.state is not None:
            partial = {"history": exc.state.history, "added": exc.state.added}
        return ci, r, None, partial, _failure(echo, r, seed, exc)
    except Exception as exc:  # noqa: BLE001 -- recorded in the failure manifest
        return ci, r, None, None, _failure(echo, r, seed, exc)


def _failure(echo, r, seed, exc):
    return {"case": echo["name"], "replication": r, "seed": seed,
            "error": f"{type(exc).__name__}: {exc}",
            "traceback": traceback.format_exc()}


def run_experiment(cfg, workers=None, progress=None):
    """Run every replication of every case and write the result files.

    Returns ``(summary, failures)``.  Replications that fail are listed in
    ``failures.json``; results of the others are still written.
    """
    workers = default_workers() if workers is None else max(1, int(workers))
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    cache = {}
    tasks = _tasks(cfg, cache)
    rows = {ci: {} for ci in range(len(cfg.cases))}
    failures = []

    def collect(res):
        ci, r, rs, record, fail = res
        case = cfg.cases[ci]
        rundir = out / case.name / "runs"
        if fail is None:
            rows[ci][r] = rs
            dump_json(rundir / f"rep_{r:03d}.json", record)
        else:
            failures.append(fail)
            if record is not None:
                dump_json(rundir / f"rep_{r:03d}.partial.json", record)
        if progress is not None:
            progress(case, r, rs, fail)

    if workers == 1 or len(tasks) == 1:
        for t in tasks:
            collect(_call(t))
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
            futs = [pool.submit(_call, t) for t in tasks]
            for f in as_completed(futs):
                collect(f.result())

    summary = {"name": cfg.name, "config": cfg.source, "cases": {}}
    for ci, case in enumerate(cfg.cases):
        all_rows = [row for r in sorted(rows[ci]) for row in rows[ci][r]]
        atomic_write(out / case.name / "results.csv", rows_csv(all_rows))
        nfail = sum(1 for f in failures if f["case"] == case.name)
        stats = summarize(all_rows, nfail)
        stats["sigma_eps"] = noise_level(case, cache)
        stats["kind"] = case.kind
        dump_json(out / case.name / "summary.json", stats)
        summary["cases"][case.name] = stats
    dump_json(out / "summary.json", summary)
    failures.sort(key=lambda f: (f["case"], f["replication"]))
    if failures:
        dump_json(out / "failures.json", failures)
    elif (out / "failures.json").exists():
        (out / "failures.json").unlink()
    return summary, failures


REPORT_COLUMNS = ["case", "reps", "pf_median", "pf_q1", "pf_q3", "beta_median", "beta_iqr",
                  "evals_median", "failures"]


def report(directory):
    """Summary table (list of dicts with :data:`REPORT_COLUMNS`) of a run directory.

    Statistics are recomputed from each case's ``results.csv``.
    """
    directory = Path(directory)
    files = sorted(directory.glob("*/results.csv"))
    if not files:
        raise FileNotFoundError(f"no results.csv below {directory}")
    table = []
    for f in files:
        rows = read_rows(f)
        nfail = 0
        side = f.parent / "summary.json"
        if side.exists():
            nfail = json.loads(side.read_text()).get("failures", 0)
        s = summarize(rows, nfail)
        pf, beta, ev = s["pf"] or {}, s["beta"] or {}, s["evals"] or {}
        table.append({
            "case": f.parent.name, "reps": s["replications"],
            "pf_median": pf.get("median", np.nan), "pf_q1": pf.get("q1", np.nan),
            "pf_q3": pf.get("q3", np.nan), "beta_median": beta.get("median", np.nan),
            "beta_iqr": beta.get("iqr", np.nan), "evals_median": ev.get("median", np.nan),
            "failures": nfail,
        })
    return table


def format_report(table):
    head = f"{'case':<24} {'reps':>4} {'pf_median':>11} {'pf_q1':>11} {'pf_q3':>11} " \
           f"{'beta_med':>8} {'beta_iqr':>8} {'evals_med':>10} {'fail':>4}"
    lines = [head]
    for t in table:
        lines.append(
            f"{t['case']:<24} {t['reps']:>4d} {t['pf_median']:>11.4e} {t['pf_q1']:>11.4e} "
            f"{t['pf_q3']:>11.4e} {t['beta_median']:>8.4f} {t['beta_iqr']:>8.4f} "
            f"{t['evals_median']:>10.0f} {t['failures']:>4d}")
    return "\n".join(lines)
