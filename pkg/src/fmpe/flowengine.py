"""Continuous-flow runtime: adaptive Dormand-Prince integration of ``d theta/dt = v(t, theta)``.

Sampling pushes base draws from ``t=0`` to ``t=1``. Exact log-densities integrate
the state together with the accumulated divergence of the field. A whole batch
of trajectories shares one step size; the error norm is the maximum over all
components, so every trajectory meets the tolerance on every step.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from fmpe.errors import IntegrationError, NumericError

LOG_2PI = float(np.log(2.0 * np.pi))

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


@dataclass(frozen=True)
class ODESolverConfig:
    atol: float = 1e-7
    rtol: float = 1e-7
    max_steps: int = 100_000
    initial_step: float | None = None
    safety: float = 0.9
    min_factor: float = 0.2
    max_factor: float = 10.0

    def __post_init__(self):
        if not (self.atol > 0 and self.rtol > 0):
            raise ValueError("atol and rtol must be positive")
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")


@dataclass
class IntegrationResult:
    state: np.ndarray
    steps: int
    rejected: int
    evaluations: int
    passes: int = 0


def _error_ratio(err, y0, y1, cfg):
    scale = cfg.atol + cfg.rtol * np.maximum(np.abs(y0), np.abs(y1))
    return float(np.max(np.abs(err) / scale)) if err.size else 0.0


def _initial_step(fun, t0, y0, f0, direction, cfg):
    # Hairer, Norsett & Wanner, "Solving ODEs I", sec. II.4
    scale = cfg.atol + cfg.rtol * np.abs(y0)
    d0 = np.max(np.abs(y0) / scale)
    d1 = np.max(np.abs(f0) / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    y1 = y0 + direction * h0 * f0
    f1 = fun(t0 + direction * h0, y1)
    d2 = np.max(np.abs(f1 - f0) / scale) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / 5.0)
    return min(100 * h0, h1)


def dopri5(fun, t0, t1, y0, config=None):
    """Integrate ``y' = fun(t, y)`` from ``t0`` to ``t1``; ``y`` is any float array."""
    cfg = config or ODESolverConfig()
    y = np.array(y0, dtype=np.float64, copy=True)
    if not np.all(np.isfinite(y)):
        raise NumericError("non-finite initial state")
    span = t1 - t0
    if span == 0 or y.size == 0:
        return IntegrationResult(y, 0, 0, 0)
    direction = 1.0 if span > 0 else -1.0
    evals = 0

    def f(t, yy):
        nonlocal evals
        evals += 1
        out = fun(t, yy)
        if not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite field value at t={t:.6g}")
        return out

    k1 = f(t0, y)
    h = cfg.initial_step if cfg.initial_step else _initial_step(f, t0, y, k1, direction, cfg)
    h = min(abs(h), abs(span))
    t = t0
    steps = rejected = 0
    prev_err = 1e-4
    ks = [None] * 7
    while direction * (t1 - t) > 0:
        if steps + rejected >= cfg.max_steps:
            raise IntegrationError(f"max_steps={cfg.max_steps} exceeded at t={t:.6g}")
        if abs(t1 - t) <= h * (1 + 1e-12):
            h = abs(t1 - t)
            t_new = t1
        else:
            t_new = t + direction * h
        hs = direction * h
        ks[0] = k1
        for i in range(1, 7):
            incr = sum(a * ks[j] for j, a in enumerate(_A[i]) if a != 0.0)
            ks[i] = f(t + _C[i] * hs, y + hs * incr)
        y_new = y + hs * sum(b * ks[j] for j, b in enumerate(_B5) if b != 0.0)
        err = hs * sum(e * ks[j] for j, e in enumerate(_E) if e != 0.0)
        ratio = _error_ratio(err, y, y_new, cfg)
        if not np.isfinite(ratio):
            raise NumericError(f"non-finite error estimate at t={t:.6g}")
        if ratio <= 1.0:
            t, y, k1 = t_new, y_new, ks[6]
            steps += 1
            if ratio == 0.0:
                factor = cfg.max_factor
            else:
                factor = cfg.safety * ratio ** (-0.7 / 5) * prev_err ** (0.4 / 5)
                factor = min(cfg.max_factor, max(cfg.min_factor, factor))
            prev_err = max(ratio, 1e-4)
            h *= factor
        else:
            rejected += 1
            h *= max(cfg.min_factor, cfg.safety * ratio ** (-1 / 5))
        if h < 1e-14 * max(1.0, abs(t)):
            raise IntegrationError(f"step size underflow at t={t:.6g}")
    return IntegrationResult(y, steps, rejected, evals)


def standard_normal_logpdf(theta):
    theta = np.atleast_2d(theta)
    return -0.5 * np.sum(theta * theta, axis=1) - 0.5 * theta.shape[1] * LOG_2PI


class PassCounter:
    """Thread-safe tally of network passes."""

    def __init__(self):
        self._lock = threading.Lock()
        self.value = 0

    def add(self, k):
        with self._lock:
            self.value += int(k)

    def reset(self):
        with self._lock:
            self.value = 0


def _velocity_fn(field, x, counter):
    def fun(t, theta):
        counter.add(1)
        return field(t, theta, x)
    return fun


def _augmented_fn(field, x, counter, dim):
    # state columns: theta (dim), accumulated divergence (1)
    def fun(t, state):
        counter.add(1 + dim)
        v, div = field.divergence(t, state[:, :dim], x)
        return np.concatenate([v, np.reshape(div, (-1, 1))], axis=1)
    return fun


def integrate(field, x, theta0, t_span=(0.0, 1.0), config=None, counter=None):
    """Solve the flow ODE for a batch of states; returns the end state and solver statistics."""
    counter = counter if counter is not None else PassCounter()
    theta0 = np.atleast_2d(np.asarray(theta0, dtype=np.float64))
    start = counter.value
    res = dopri5(_velocity_fn(field, x, counter), t_span[0], t_span[1], theta0, config)
    res.passes = counter.value - start
    return res


def integrate_with_divergence(field, x, theta, t_span, config=None, counter=None):
    """Integrate state and ``int div v dt`` jointly. Returns ``(state_end, divergence_integral, result)``.

    The divergence integral is signed along ``t_span`` (negative when integrating backwards).
    """
    counter = counter if counter is not None else PassCounter()
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    dim = theta.shape[1]
    state0 = np.concatenate([theta, np.zeros((theta.shape[0], 1))], axis=1)
    start = counter.value
    res = dopri5(_augmented_fn(field, x, counter, dim), t_span[0], t_span[1], state0, config)
    res.passes = counter.value - start
    return res.state[:, :dim], res.state[:, dim], res


class Posterior:
    """Flow-defined density ``q(theta | x)`` over a standard-normal base.

    ``field`` is any callable ``field(t, theta, x) -> v`` that also provides
    ``field.divergence(t, theta, x) -> (v, div)``: a trained
    :class:`~fmpe.netcore.VectorFieldNetwork`, a :class:`~fmpe.paths.GaussianFlowField`
    or a :class:`~fmpe.paths.ScoreVelocity`.

    ``passes`` counts network passes: one per velocity evaluation, and ``1 + dim``
    per divergence evaluation (one primal pass plus one directional pass per coordinate).

    ``theta_shift`` and ``theta_scale`` map the flow's space to parameter space,
    ``theta = shift + scale * z``; log-densities include the Jacobian.
    """

    def __init__(self, field, dim, solver=None, chunk_size=None, theta_shift=None, theta_scale=None):
        self.field = field
        self.dim = int(dim)
        self.solver = solver or ODESolverConfig()
        self.chunk_size = chunk_size
        self.counter = PassCounter()
        self.theta_shift = np.zeros(self.dim) if theta_shift is None else np.asarray(theta_shift, dtype=np.float64)
        self.theta_scale = np.ones(self.dim) if theta_scale is None else np.asarray(theta_scale, dtype=np.float64)
        if np.any(self.theta_scale <= 0):
            raise ValueError("theta_scale must be positive")
        self._log_scale = float(np.sum(np.log(self.theta_scale)))

    @property
    def passes(self):
        return self.counter.value

    def _chunks(self, n):
        size = self.chunk_size or max(n, 1)
        return [(i, min(i + size, n)) for i in range(0, n, size)]

    def _base_draws(self, n, seed):
        rng = np.random.default_rng(seed)
        return rng.standard_normal((n, self.dim))

    def sample(self, x, n, seed=0):
        if n < 0:
            raise ValueError("n must be non-negative")
        theta0 = self._base_draws(n, seed)
        out = np.empty_like(theta0)
        for lo, hi in self._chunks(n):
            out[lo:hi] = integrate(self.field, x, theta0[lo:hi], (0.0, 1.0), self.solver, self.counter).state
        return self.theta_shift + self.theta_scale * out

    def log_prob(self, theta, x):
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        if theta.shape[1] != self.dim:
            raise ValueError(f"theta must have {self.dim} columns")
        if not np.all(np.isfinite(theta)):
            raise NumericError("non-finite theta")
        theta = (theta - self.theta_shift) / self.theta_scale
        out = np.empty(theta.shape[0])
        for lo, hi in self._chunks(theta.shape[0]):
            theta0, div_int, _ = integrate_with_divergence(
                self.field, x, theta[lo:hi], (1.0, 0.0), self.solver, self.counter)
            # div_int = int_1^0 div dt = -int_0^1 div dt
            out[lo:hi] = standard_normal_logpdf(theta0) + div_int
        return out - self._log_scale

    def sample_and_log_prob(self, x, n, seed=0):
        theta0 = self._base_draws(n, seed)
        samples = np.empty_like(theta0)
        logq = np.empty(n)
        for lo, hi in self._chunks(n):
            theta1, div_int, _ = integrate_with_divergence(
                self.field, x, theta0[lo:hi], (0.0, 1.0), self.solver, self.counter)
            samples[lo:hi] = theta1
            logq[lo:hi] = standard_normal_logpdf(theta0[lo:hi]) - div_int
        return self.theta_shift + self.theta_scale * samples, logq - self._log_scale
