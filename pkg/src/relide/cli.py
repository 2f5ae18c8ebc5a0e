"""Command-line entry point.

    relide run CONFIG [--workers N] [--output DIR]
    relide report DIR [--json]
    relide calibrate CONFIG
    relide oracle rs [--mu-r 5 --sig-r 0.8 --mu-s 2 --sig-s 0.6 --sigma-eps 0 --gamma 1]

Exit status: 0 on success, 2 for configuration errors, 3 for runtime failures.
The worker count defaults to the number of logical cores and can be set with
the ``RELIDE_WORKERS`` environment variable or ``--workers``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from . import experiments

OK, CONFIG_ERROR, RUNTIME_ERROR = 0, 2, 3


def _run(args):
    cfg = cfgmod.load(args.config)
    if args.output:
        cfg.output = Path(args.output)

    def progress(case, r, rows, fail):
        if args.quiet:
            return
        if fail is None:
            last = rows[-1]
            print(f"{case.name} rep {r:03d}: pf={last['pf']:.4e} beta={last['beta']:.4f} "
                  f"evals={last['evals']}", flush=True)
        else:
            print(f"{case.name} rep {r:03d}: FAILED {fail['error']}", file=sys.stderr, flush=True)

    summary, failures = experiments.run_experiment(cfg, workers=args.workers, progress=progress)
    if not args.quiet:
        print(experiments.format_report(experiments.report(cfg.output)))
    if failures:
        print(f"{len(failures)} replication(s) failed; see {cfg.output / 'failures.json'}",
              file=sys.stderr)
        return RUNTIME_ERROR
    return OK


def _report(args):
    table = experiments.report(args.directory)
    if args.json:
        print(json.dumps(table, indent=1))
    else:
        print(experiments.format_report(table))
    return OK


def _calibrate(args):
    cfg = cfgmod.load(args.config)
    cache = {}
    for case in cfg.cases:
        sig = experiments.noise_level(case, cache)
        mode = next(k for k in cfgmod.NOISE_KEYS if k in case.noise)
        print(f"{case.name}: {mode}={case.noise[mode]:g} sigma_eps={sig:.6g} "
              f"variance={sig * sig:.6g}")
    return OK


def _oracle(args):
    from .reliability import rs_analytic
    free, noisy = rs_analytic(args.mu_r, args.sig_r, args.mu_s, args.sig_s,
                              args.sigma_eps, args.gamma)
    print(f"pf_free={free:.12e}")
    print(f"pf_noisy={noisy:.12e}")
    return OK


def parser():
    ap = argparse.ArgumentParser(prog="relide", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="run every replication of an experiment")
    p.add_argument("config")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--output", default=None, help="override the output directory")
    p.add_argument("-q", "--quiet", action="store_true")
    p.set_defaults(func=_run)

    p = sub.add_parser("report", help="summary table of a run directory")
    p.add_argument("directory")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_report)

    p = sub.add_parser("calibrate", help="print the calibrated noise level of each case")
    p.add_argument("config")
    p.set_defaults(func=_calibrate)

    p = sub.add_parser("oracle", help="closed-form references")
    osub = p.add_subparsers(dest="oracle", required=True)
    o = osub.add_parser("rs", help="noise-free and noisy pf of gamma (R - S) + eps")
    o.add_argument("--mu-r", type=float, default=5.0)
    o.add_argument("--sig-r", type=float, default=0.8)
    o.add_argument("--mu-s", type=float, default=2.0)
    o.add_argument("--sig-s", type=float, default=0.6)
    o.add_argument("--sigma-eps", type=float, default=0.0)
    o.add_argument("--gamma", type=float, default=1.0)
    o.set_defaults(func=_oracle)
    return ap


def main(argv=None):
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return CONFIG_ERROR
    except ValueError as exc:
        if args.verb == "oracle":
            print(f"config error: {exc}", file=sys.stderr)
            return CONFIG_ERROR
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    except (OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
