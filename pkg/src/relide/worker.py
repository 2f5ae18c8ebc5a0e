"""Reference worker for the external-model line protocol.

    python -m relide.worker hat
    python -m relide.worker rs --gamma 2
    python -m relide.worker first        # echoes the first coordinate

Prints ``READY``, then one float per request line until stdin closes.
``--die-after N`` exits abruptly after N replies (used to test failure paths).
"""

import argparse
import sys

import numpy as np

from . import limitstate


def _first(x):
    return x[:, 0]


def main(argv=None):
    ap = argparse.ArgumentParser(prog="python -m relide.worker")
    ap.add_argument("problem", choices=["hat", "four_branch", "rs", "first", "garbage"])
    ap.add_argument("--gamma", type=float, default=1.0)
    ap.add_argument("--die-after", type=int, default=None)
    args = ap.parse_args(argv)

    if args.problem == "rs":
        g = limitstate.rs(args.gamma).func
    elif args.problem == "first":
        g = _first
    elif args.problem == "garbage":
        g = None
    else:
        g = limitstate.BUILTIN[args.problem]().func

    out = sys.stdout
    out.write("READY\n")
    out.flush()
    served = 0
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        if args.die_after is not None and served >= args.die_after:
            sys.exit(1)
        if g is None:
            out.write("not-a-number\n")
        else:
            x = np.array([[float(t) for t in line.split()]])
            out.write(repr(float(g(x)[0])) + "\n")
        out.flush()
        served += 1


if __name__ == "__main__":
    main()
