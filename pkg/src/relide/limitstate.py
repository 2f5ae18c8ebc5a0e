"""Limit-state functions: benchmarks, additive noise, noise calibration and
an adapter for limit states computed by an external process."""

from __future__ import annotations

import queue
import shlex
import subprocess
import threading
from dataclasses import dataclass

import numpy as np

SQRT2 = np.sqrt(2.0)


class ConfigurationError(ValueError):
    pass


class CalibrationError(RuntimeError):
    pass


class EvaluationError(RuntimeError):
    """An external evaluation failed; ``raw`` holds whatever the worker sent."""

    def __init__(self, message, raw=None):
        super().__init__(message if raw is None else f"{message} (raw reply: {raw!r})")
        self.raw = raw


@dataclass(frozen=True)
class NoiseSpec:
    sigma_eps: float
    rng: np.random.Generator

    def __post_init__(self):
        if not self.sigma_eps >= 0:
            raise ConfigurationError(f"sigma_eps must be non-negative, got {self.sigma_eps}")


class LimitState:
    """Scalar limit state ``g(x)`` over physical points.

    ``func`` receives an ``(n, M)`` array and returns ``n`` values.  Calling
    the object accepts a single point or a batch; ``eval_count`` counts the
    points evaluated, under a lock so parallel callers stay consistent.
    """

    def __init__(self, func, dim, name="g", noise=None, base=None):
        self.func = func
        self.dim = int(dim)
        self.name = name
        self.noise = noise
        self.base = base
        self._count = 0
        self._lock = threading.Lock()

    def __repr__(self):
        extra = f", sigma_eps={self.noise.sigma_eps}" if self.noise else ""
        return f"LimitState({self.name!r}, dim={self.dim}{extra})"

    @property
    def deterministic(self):
        return self.noise is None

    @property
    def eval_count(self):
        return self._count

    def _add(self, n):
        with self._lock:
            self._count += n

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        one = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.dim:
            raise ValueError(f"{self.name} expects {self.dim} coordinates, got {x.shape[1]}")
        y = np.asarray(self.func(x), dtype=float).reshape(len(x))
        if self.noise is not None and self.noise.sigma_eps > 0:
            with self._lock:
                eps = self.noise.rng.normal(0.0, self.noise.sigma_eps, size=len(x))
            y = y + eps
        self._add(len(x))
        return y[0] if one else y


def rs(gamma=1.0):
    """``gamma * (r - s)``."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    return LimitState(lambda x: gamma * (x[:, 0] - x[:, 1]), 2, name=f"rs(gamma={gamma:g})")


def four_branch_terms(x):
    x = np.atleast_2d(x)
    s = x[:, 0] + x[:, 1]
    d = x[:, 0] - x[:, 1]
    return np.stack([
        3 + 0.1 * d ** 2 - s / SQRT2,
        3 + 0.1 * d ** 2 + s / SQRT2,
        d + 6 / SQRT2,
        -d + 6 / SQRT2,
    ], axis=1)


def four_branch():
    """Series system with four failure regions (Waarts' four-branch)."""
    return LimitState(lambda x: four_branch_terms(x).min(axis=1), 2, name="four_branch")


def hat_value(x):
    x = np.atleast_2d(x)
    return 12 - (x[:, 0] - x[:, 1]) ** 2 - 8 * (x[:, 0] + x[:, 1] - 4) ** 3


def hat():
    return LimitState(hat_value, 2, name="hat")


def corrupt(base, sigma_eps, rng):
    """Noisy version ``g(x) + eps`` with i.i.d. ``eps ~ N(0, sigma_eps^2)``.

    ``rng`` should be a stream reserved for noise so that noise and design
    randomness vary independently across replications.
    """
    if not base.deterministic:
        raise ConfigurationError(f"{base.name} is already noisy")
    noise = NoiseSpec(float(sigma_eps), rng)

    def func(x):
        return base(x)

    return LimitState(func, base.dim, name=f"{base.name}+noise", noise=noise, base=base)


def calibrate_noise(base, prob_input, alpha, rng, n=10**6, min_roi=100):
    """Noise level from the output spread near the limit-state surface.

    Draws ``n`` inputs, takes ``q`` as the empirical ``alpha``-quantile of
    ``|g(X)|`` (linear interpolation of order statistics) and returns the
    standard deviation of the outputs with ``|y| < q``.
    """
    if not base.deterministic:
        raise ConfigurationError("noise calibration needs the noise-free model")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    y = base(prob_input.sample(n, rng))
    q = np.quantile(np.abs(y), alpha)
    roi = y[np.abs(y) < q]
    if roi.size < min_roi:
        raise CalibrationError(
            f"region of interest holds {roi.size} samples (< {min_roi}); increase n")
    return float(np.std(roi, ddof=1))


# -- external process ---------------------------------------------------------

_EOF = object()


class _Worker:
    def __init__(self, command, timeout, startup_timeout, cwd=None, env=None):
        args = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self.proc = subprocess.Popen(
            args, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True,
            bufsize=1, cwd=cwd, env=env)
        self.lines = queue.Queue()
        self.reader = threading.Thread(target=self._pump, daemon=True)
        self.reader.start()
        first = self._read(startup_timeout)
        if first != "READY":
            self.close()
            raise EvaluationError("worker did not announce READY", first)

    def _pump(self):
        for line in self.proc.stdout:
            self.lines.put(line.rstrip("\r\n"))
        self.lines.put(_EOF)

    def _read(self, timeout):
        try:
            line = self.lines.get(timeout=timeout)
        except queue.Empty:
            self.close()
            raise EvaluationError(f"no reply within {timeout} s") from None
        if line is _EOF:
            code = self.proc.poll()
            raise EvaluationError(f"worker exited (status {code})", None)
        return line

    def evaluate(self, point):
        request = " ".join(repr(float(v)) for v in point) + "\n"
        try:
            self.proc.stdin.write(request)
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise EvaluationError(f"worker not accepting input: {exc}") from exc
        raw = self._read(self.timeout)
        try:
            value = float(raw.strip())
        except ValueError:
            raise EvaluationError("non-numeric reply", raw) from None
        return value

    def close(self):
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
            except OSError:
                pass
            try:
                self.proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()


class ExternalModel(LimitState):
    """Limit state evaluated by long-running worker processes.

    Line protocol on the worker's standard streams: the worker prints
    ``READY`` once, then answers every request line of ``M`` whitespace
    separated floats with one float line.  With ``workers > 1`` points of a
    batch are spread over several processes; each process has at most one
    request in flight.
    """

    def __init__(self, command, dim, timeout=60.0, workers=1, startup_timeout=None,
                 name="external", cwd=None, env=None):
        super().__init__(self._evaluate, dim, name=name)
        self.command = command
        startup_timeout = timeout if startup_timeout is None else startup_timeout
        self._workers = []
        try:
            for _ in range(max(1, int(workers))):
                self._workers.append(_Worker(command, timeout, startup_timeout, cwd, env))
        except Exception:
            self.close()
            raise
        self._worker_locks = [threading.Lock() for _ in self._workers]

    def _run_chunk(self, k, points, out, idx):
        with self._worker_locks[k]:
            for i in idx:
                out[i] = self._workers[k].evaluate(points[i])
                self._add(1)

    def _evaluate(self, x):
        out = np.empty(len(x))
        nw = len(self._workers)
        chunks = [range(k, len(x), nw) for k in range(nw)]
        if nw == 1:
            self._run_chunk(0, x, out, chunks[0])
            return out
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(nw) as pool:
            futs = [pool.submit(self._run_chunk, k, x, out, chunks[k]) for k in range(nw)]
            for f in futs:
                f.result()
        return out

    def __call__(self, x):
        # counting happens per completed reply inside _run_chunk
        x = np.asarray(x, dtype=float)
        one = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.dim:
            raise ValueError(f"{self.name} expects {self.dim} coordinates, got {x.shape[1]}")
        y = self._evaluate(x)
        return y[0] if one else y

    def close(self):
        for w in self._workers:
            w.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def external_model(command, dim, **kwargs):
    return ExternalModel(command, dim, **kwargs)


BUILTIN = {
    "rs": rs,
    "four_branch": four_branch,
    "hat": hat,
}
