"""Experiment configuration files.

Configurations are TOML documents.  A minimal active-learning campaign::

    name = "fourbranch"
    output = "results/fourbranch"

    [problem]
    builtin = "four_branch"

    [input]
    builtin = "four_branch"

    [noise]
    alpha = 0.05

    [method]
    kind = "active"
    replications = 20
    base_seed = 1
    n_ini = 10
    k = 1
    budget = 600

The full schema is documented in the README.  Every validation error names
the offending field and, when it can be found, the line it sits on.
"""

from __future__ import annotations

import copy
import itertools
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import inputs
from .limitstate import BUILTIN

KINDS = ("mcs", "subset", "gp", "active")
NOISE_KEYS = ("sigma_eps", "variance", "alpha")
BUILTIN_INPUTS = {
    "rs": inputs.rs_input,
    "four_branch": inputs.four_branch_input,
    "hat": inputs.hat_input,
    "frame": inputs.frame_input,
}
DISTS = {
    "gaussian": inputs.Gaussian,
    "normal": inputs.Gaussian,
    "lognormal": inputs.Lognormal,
    "truncated_gaussian": inputs.TruncatedGaussian,
}

# method keys and their defaults per kind; None means "required"
METHOD_KEYS = {
    "common": {"kind": None, "replications": 1, "base_seed": 0, "seeds": None},
    "mcs": {"n": 10**6, "target_cov": None, "max_n": 10**7},
    "subset": {"n_per_level": 10**5, "p0": 0.1, "max_levels": 12},
    "gp": {"n_train": None, "n_mcs": 10**5, "n_starts": 10, "max_points": None, "tau": None},
    "active": {
        "n_ini": 10, "k": 1, "budget": 600, "n_per_level": 10**4,
        "n_per_level_final": 10**5, "candidate_cap": 10**4, "n_starts": 10,
        "loop_starts": 2, "retrain_every": 5, "retrain_below": 60, "tau": None,
        "sigma2_n": None, "early_stop": False, "keep_frac": 0.05,
    },
}
PROBLEM_KEYS = {"builtin", "gamma", "command", "dim", "timeout", "workers", "cwd"}
NOISE_EXTRA = {"calibration_samples", "calibration_seed"}


class ConfigError(ValueError):
    """Invalid configuration; ``where`` is ``path:line`` when known."""

    def __init__(self, message, field_name=None, where=None):
        loc = f"{where}: " if where else ""
        fld = f"[{field_name}] " if field_name else ""
        super().__init__(f"{loc}{fld}{message}")
        self.field = field_name
        self.where = where


@dataclass
class Case:
    """One fully resolved experiment setting (one point of a sweep)."""

    name: str
    problem: dict
    input: dict
    noise: dict
    method: dict

    def echo(self):
        return {"name": self.name, "problem": self.problem, "input": self.input,
                "noise": self.noise, "method": self.method}

    @property
    def kind(self):
        return self.method["kind"]

    def seeds(self):
        from .rng import replication_seed
        m = self.method
        if m.get("seeds") is not None:
            return [int(s) for s in m["seeds"]]
        return [replication_seed(int(m["base_seed"]), r) for r in range(int(m["replications"]))]

    def noise_sigma(self):
        """``sigma_eps`` when fixed directly, else ``None`` (calibration needed)."""
        if "sigma_eps" in self.noise:
            return float(self.noise["sigma_eps"])
        if "variance" in self.noise:
            return float(self.noise["variance"]) ** 0.5
        return None

    def build_input(self):
        return build_input(self.input)

    def build_problem(self):
        return build_problem(self.problem)


@dataclass
class ExperimentConfig:
    name: str
    output: Path
    cases: list = field(default_factory=list)
    source: str | None = None


class _Locator:
    """Find the line of ``key`` inside ``[section]`` of the raw text."""

    def __init__(self, text, path):
        self.lines = text.splitlines()
        self.path = path

    def __call__(self, section, key=None):
        current = ""
        head_line = None
        for i, line in enumerate(self.lines, 1):
            s = line.strip()
            m = re.match(r"^\[+\s*([^\]]+?)\s*\]+", s)
            if m:
                current = m.group(1)
                if current == section and key is None:
                    return f"{self.path}:{i}"
                if current == section:
                    head_line = i
                continue
            if current == section and key is not None:
                if re.match(rf'^["\']?{re.escape(key)}["\']?\s*=', s):
                    return f"{self.path}:{i}"
        if head_line is not None:
            return f"{self.path}:{head_line}"
        return str(self.path)


def _err(loc, section, key, message):
    name = f"{section}.{key}" if section and key else (section or key)
    return ConfigError(message, name, loc(section, key) if loc else None)


def build_input(spec):
    if "builtin" in spec:
        return BUILTIN_INPUTS[spec["builtin"]]()
    margs = []
    for v in spec["variables"]:
        kw = {k: v[k] for k in v if k not in ("dist", "name")}
        margs.append(DISTS[v["dist"]](**kw))
    names = [v.get("name", f"x{i + 1}") for i, v in enumerate(spec["variables"])]
    return inputs.ProbInput(margs, spec.get("correlation"), names=names)


def build_problem(spec, **kwargs):
    """Limit state described by a ``[problem]`` table (external ones must be closed)."""
    if "builtin" in spec:
        fn = BUILTIN[spec["builtin"]]
        return fn(spec["gamma"]) if "gamma" in spec else fn()
    from .limitstate import ExternalModel
    return ExternalModel(spec["command"], int(spec["dim"]), timeout=float(spec.get("timeout", 60)),
                         workers=int(spec.get("workers", 1)), cwd=spec.get("cwd"), **kwargs)


def _check_problem(p, loc):
    unknown = set(p) - PROBLEM_KEYS
    if unknown:
        raise _err(loc, "problem", sorted(unknown)[0], "unknown key")
    if ("builtin" in p) == ("command" in p):
        raise _err(loc, "problem", None, "give exactly one of 'builtin' or 'command'")
    if "builtin" in p:
        if p["builtin"] not in BUILTIN:
            raise _err(loc, "problem", "builtin",
                       f"unknown problem {p['builtin']!r}; choose from {sorted(BUILTIN)}")
        if "gamma" in p and (p["builtin"] != "rs" or not _num(p["gamma"]) or p["gamma"] <= 0):
            raise _err(loc, "problem", "gamma", "gamma is a positive number and only applies to 'rs'")
    else:
        if not isinstance(p["command"], (str, list)) or not p["command"]:
            raise _err(loc, "problem", "command", "command must be a string or list")
        if not isinstance(p.get("dim"), int) or p["dim"] < 1:
            raise _err(loc, "problem", "dim", "external problems need a positive integer 'dim'")
        for key in ("timeout", "workers"):
            if key in p and (not _num(p[key]) or p[key] <= 0):
                raise _err(loc, "problem", key, f"{key} must be positive")


def _num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_input(spec, loc):
    if ("builtin" in spec) == ("variables" in spec):
        raise _err(loc, "input", None, "give exactly one of 'builtin' or 'variables'")
    if "builtin" in spec:
        if spec["builtin"] not in BUILTIN_INPUTS:
            raise _err(loc, "input", "builtin",
                       f"unknown input {spec['builtin']!r}; choose from {sorted(BUILTIN_INPUTS)}")
        return
    vs = spec["variables"]
    if not isinstance(vs, list) or not vs:
        raise _err(loc, "input", "variables", "variables must be a non-empty list of tables")
    for i, v in enumerate(vs):
        if not isinstance(v, dict) or v.get("dist") not in DISTS:
            raise _err(loc, "input", "variables",
                       f"variable {i}: 'dist' must be one of {sorted(DISTS)}")
    try:
        build_input(spec)
    except (TypeError, ValueError) as exc:
        key = "correlation" if "correlation" in str(exc).lower() else "variables"
        raise _err(loc, "input", key, str(exc)) from None


def _check_noise(n, loc):
    unknown = set(n) - set(NOISE_KEYS) - NOISE_EXTRA
    if unknown:
        raise _err(loc, "noise", sorted(unknown)[0], "unknown key")
    given = [k for k in NOISE_KEYS if k in n]
    if len(given) != 1:
        raise _err(loc, "noise", None,
                   f"give exactly one of {', '.join(NOISE_KEYS)} (found {given or 'none'})")
    key = given[0]
    v = n[key]
    if not _num(v):
        raise _err(loc, "noise", key, "must be a number")
    if key == "alpha" and not 0 < v < 1:
        raise _err(loc, "noise", key, "alpha must lie in (0, 1)")
    if key != "alpha" and v < 0:
        raise _err(loc, "noise", key, "must be non-negative")


def _check_method(m, loc):
    kind = m.get("kind")
    if kind not in KINDS:
        raise _err(loc, "method", "kind", f"kind must be one of {KINDS}")
    allowed = set(METHOD_KEYS["common"]) | set(METHOD_KEYS[kind])
    unknown = set(m) - allowed
    if unknown:
        raise _err(loc, "method", sorted(unknown)[0], f"unknown key for kind {kind!r}")
    for key, default in METHOD_KEYS[kind].items():
        if default is None and key not in ("target_cov", "max_points", "tau", "sigma2_n") \
                and m.get(key) is None:
            raise _err(loc, "method", key, f"required for kind {kind!r}")
    reps = m.get("replications", 1)
    if not isinstance(reps, int) or reps < 1:
        raise _err(loc, "method", "replications", "replications must be an integer >= 1")
    if m.get("seeds") is not None:
        s = m["seeds"]
        if not isinstance(s, list) or not all(isinstance(v, int) and v >= 0 for v in s):
            raise _err(loc, "method", "seeds", "seeds must be a list of non-negative integers")
        if len(s) != reps:
            raise _err(loc, "method", "seeds", f"{len(s)} seeds for {reps} replications")
    if not isinstance(m.get("base_seed", 0), int) or m.get("base_seed", 0) < 0:
        raise _err(loc, "method", "base_seed", "base_seed must be a non-negative integer")
    for key in ("n", "n_per_level", "n_train", "n_mcs", "budget", "k", "n_ini", "n_starts",
                "max_levels", "candidate_cap", "loop_starts", "retrain_every", "max_points"):
        if key in m and m[key] is not None and (not isinstance(m[key], int) or m[key] < 0):
            raise _err(loc, "method", key, "must be a non-negative integer")
    if kind == "active":
        if m.get("k", 1) < 1:
            raise _err(loc, "method", "k", "k must be at least 1")
        if m.get("n_ini", 10) < 2:
            raise _err(loc, "method", "n_ini", "n_ini must be at least 2")
        b = m.get("budget", 600)
        if b and b < m.get("k", 1):
            raise _err(loc, "method", "budget", "budget must be at least k")
    if kind == "mcs" and m.get("n") is not None and m["n"] < 1000:
        raise _err(loc, "method", "n", "n must be at least 1000")
    if kind in ("subset", "active"):
        for key in ("n_per_level", "n_per_level_final"):
            if key in m and m[key] < 1000:
                raise _err(loc, "method", key, "must be at least 1000")
    if kind == "gp" and m["n_train"] < 2:
        raise _err(loc, "method", "n_train", "n_train must be at least 2")
    tau = m.get("tau")
    if tau is not None and (not _num(tau) or not 0 <= tau < 1):
        raise _err(loc, "method", "tau", "tau must lie in [0, 1)")


def _set_path(doc, path, value):
    parts = path.split(".")
    if len(parts) != 2 or parts[0] not in ("problem", "input", "noise", "method"):
        raise KeyError(path)
    table = doc.setdefault(parts[0], {})
    if parts[0] == "noise":
        # a swept noise level replaces whatever mode the base file uses
        for k in NOISE_KEYS:
            if k != parts[1]:
                table.pop(k, None)
    table[parts[1]] = value


def _label(value):
    return f"{value:g}" if _num(value) else str(value)


def parse(text, path="<config>", base_dir=None):
    """Parse and validate configuration text into an :class:`ExperimentConfig`."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"syntax error: {exc}", where=str(path)) from None
    loc = _Locator(text, path)
    top = set(doc) - {"name", "output", "problem", "input", "noise", "method", "sweep"}
    if top:
        raise _err(loc, None, sorted(top)[0], "unknown top-level key")
    for sec in ("problem", "input", "noise", "method"):
        if not isinstance(doc.get(sec), dict):
            raise ConfigError("missing section", sec, str(path))
    name = doc.get("name") or Path(str(path)).stem
    out = Path(doc.get("output", f"results/{name}"))
    if base_dir is not None and not out.is_absolute():
        out = Path(base_dir) / out

    sweep = doc.get("sweep", {})
    if not isinstance(sweep, dict):
        raise ConfigError("sweep must be a table", "sweep", loc("sweep"))
    keys = list(sweep)
    for k in keys:
        if not isinstance(sweep[k], list) or not sweep[k]:
            raise _err(loc, "sweep", k, "sweep values must be a non-empty list")
    combos = list(itertools.product(*(sweep[k] for k in keys))) if keys else [()]
    cases = []
    for combo in combos:
        d = {sec: copy.deepcopy(doc[sec]) for sec in ("problem", "input", "noise", "method")}
        for k, v in zip(keys, combo):
            try:
                _set_path(d, k, v)
            except KeyError:
                raise _err(loc, "sweep", k,
                           "sweep keys look like 'method.k' or 'noise.variance'") from None
        _check_problem(d["problem"], loc)
        _check_input(d["input"], loc)
        _check_noise(d["noise"], loc)
        _check_method(d["method"], loc)
        pin = build_input(d["input"])
        dim = d["problem"].get("dim", 2)
        if pin.dim != dim:
            raise _err(loc, "input", None, f"input has {pin.dim} variables, problem needs {dim}")
        label = ",".join(f"{k.split('.')[1]}={_label(v)}" for k, v in zip(keys, combo)) or "main"
        cases.append(Case(label, d["problem"], d["input"], d["noise"], d["method"]))
    return ExperimentConfig(name, out, cases, str(path))


def load(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", where=str(path)) from None
    return parse(text, path, base_dir=None)
