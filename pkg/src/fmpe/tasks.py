"""Inference tasks: prior, simulator and an exact reference posterior for each.

Every task exposes ten fixed observations (seeded) and a reference sampler
that can cache its draws as CSV under ``$FMPE_CACHE_DIR`` (default
``~/.cache/fmpe``), one file per ``(task, observation)`` digest::

    <cache>/reference/<task>-<sha256(x)[:16]>-n<count>-s<seed>.csv
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import norm

from fmpe.errors import NumericError, StorageError

N_OBSERVATIONS = 10
OBSERVATION_SEED = 20_231_017


def cache_dir():
    return Path(os.environ.get("FMPE_CACHE_DIR", Path.home() / ".cache" / "fmpe"))


@dataclass
class Task:
    """A simulator with a prior and an exact reference posterior.

    ``prior(rng, n) -> (n, theta_dim)``, ``simulator(theta, rng) -> (n, x_dim)``,
    ``reference(x, n, rng) -> (n, theta_dim)``. ``log_posterior(theta, x)`` is set
    when the posterior density is available in closed form.
    """

    name: str
    theta_dim: int
    x_dim: int
    prior: Callable
    simulator: Callable
    reference: Callable
    log_posterior: Callable | None = None
    sharp_boundaries: bool = False
    params: dict = field(default_factory=dict)

    def simulate(self, theta, rng):
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        x = np.asarray(self.simulator(theta, rng), dtype=np.float64)
        if x.shape != (theta.shape[0], self.x_dim):
            raise ValueError(f"{self.name}: simulator returned shape {x.shape}")
        bad = ~np.all(np.isfinite(x), axis=1)
        if bad.any():
            raise NumericError(f"{self.name}: simulator produced non-finite output", index=int(np.flatnonzero(bad)[0]))
        return x

    def observations(self, n=N_OBSERVATIONS, seed=OBSERVATION_SEED):
        """Fixed ``(theta_true, x_obs)`` pairs, identical on every call."""
        rng = np.random.default_rng([seed, _name_key(self.name)])
        theta = self.prior(rng, n)
        return theta, self.simulate(theta, rng)

    def reference_samples(self, x, n, seed=0, use_cache=True):
        x = np.asarray(x, dtype=np.float64).reshape(self.x_dim)
        path = None
        if use_cache:
            digest = hashlib.sha256(x.astype("<f8").tobytes()).hexdigest()[:16]
            path = cache_dir() / "reference" / f"{self.name}-{digest}-n{n}-s{seed}.csv"
            if path.exists():
                return read_samples_csv(path)
        samples = self.reference(x, n, np.random.default_rng(seed))
        if path is not None:
            try:
                write_samples_csv(path, samples)
            except OSError:
                pass  # cache is best effort
        return samples


def _name_key(name):
    return int(hashlib.sha256(name.encode()).hexdigest()[:8], 16)


def write_samples_csv(path, samples, extra=None, extra_name="log_prob"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    dim = samples.shape[1] if samples.size else samples.shape[-1]
    header = [f"theta_{i}" for i in range(dim)]
    cols = [samples]
    if extra is not None:
        header.append(extra_name)
        cols.append(np.reshape(extra, (-1, 1)))
    table = np.concatenate(cols, axis=1) if samples.shape[0] else np.empty((0, len(header)))
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in table:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    return path


def read_samples_csv(path, with_extra=False):
    try:
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            rows = [[float(v) for v in line.split(",")] for line in fh if line.strip()]
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    table = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    n_theta = sum(1 for h in header if h.startswith("theta_"))
    if with_extra:
        return table[:, :n_theta], (table[:, n_theta] if table.shape[1] > n_theta else None)
    return table[:, :n_theta]


# ----------------------------------------------------------------------------
# tasks


def gaussian_linear(d=2, noise_var=0.1):
    """Prior ``N(0, I)``, likelihood ``N(theta, noise_var I)``; conjugate posterior."""
    if d < 1:
        raise ValueError("d must be >= 1")
    post_var = noise_var / (1.0 + noise_var)
    shrink = 1.0 / (1.0 + noise_var)

    def prior(rng, n):
        return rng.standard_normal((n, d))

    def simulator(theta, rng):
        return theta + np.sqrt(noise_var) * rng.standard_normal(theta.shape)

    def reference(x, n, rng):
        return shrink * x + np.sqrt(post_var) * rng.standard_normal((n, d))

    def log_posterior(theta, x):
        theta = np.atleast_2d(theta)
        r = theta - shrink * np.asarray(x)
        return -0.5 * np.sum(r * r, axis=1) / post_var - 0.5 * d * np.log(2 * np.pi * post_var)

    return Task(f"gaussian_linear_{d}d", d, d, prior, simulator, reference, log_posterior,
                params={"d": d, "noise_var": noise_var, "posterior_var": post_var, "shrink": shrink})


def gaussian_linear_posterior(x, noise_var=0.1):
    """Mean and (isotropic) variance of the gaussian_linear posterior."""
    x = np.asarray(x, dtype=np.float64)
    return x / (1.0 + noise_var), noise_var / (1.0 + noise_var)


def gaussian_mixture(d=2, bound=10.0, scales=(1.0, 0.1)):
    """Uniform box prior; ``x ~ 0.5 N(theta, I) + 0.5 N(theta, 0.01 I)``.

    The likelihood depends on ``x - theta`` only, so the posterior is the same
    mixture centred at ``x`` and truncated to the box; the reference sampler
    draws it exactly by rejection.
    """
    scales = np.asarray(scales, dtype=np.float64)

    def prior(rng, n):
        return rng.uniform(-bound, bound, size=(n, d))

    def simulator(theta, rng):
        comp = rng.integers(0, 2, size=theta.shape[0])
        return theta + scales[comp][:, None] * rng.standard_normal(theta.shape)

    def reference(x, n, rng):
        out = np.empty((0, d))
        while out.shape[0] < n:
            m = 2 * (n - out.shape[0]) + 16
            comp = rng.integers(0, 2, size=m)
            prop = x + scales[comp][:, None] * rng.standard_normal((m, d))
            keep = np.all(np.abs(prop) <= bound, axis=1)
            out = np.concatenate([out, prop[keep]])
        return out[:n]

    def log_likelihood(x, theta):
        theta = np.atleast_2d(theta)
        r2 = np.sum((np.asarray(x) - theta) ** 2, axis=1)
        comps = [np.log(0.5) - 0.5 * r2 / s ** 2 - d * np.log(s) - 0.5 * d * np.log(2 * np.pi) for s in scales]
        return np.logaddexp(*comps)

    task = Task(f"gaussian_mixture_{d}d", d, d, prior, simulator, reference,
                params={"d": d, "bound": bound, "scales": tuple(scales)})
    task.log_likelihood = log_likelihood
    return task


def two_moons_simulator(theta, a, r):
    """Deterministic two-moons map given the angle ``a`` and radius ``r`` draws."""
    theta = np.atleast_2d(theta)
    p = np.stack([r * np.cos(a) + 0.25, r * np.sin(a)], axis=1)
    return p + np.stack([-np.abs(theta[:, 0] + theta[:, 1]) / np.sqrt(2.0),
                         (-theta[:, 0] + theta[:, 1]) / np.sqrt(2.0)], axis=1)


def two_moons():
    """Two-moons task with the exact inverse-map reference sampler."""
    r_mean, r_std = 0.1, 0.01

    def prior(rng, n):
        return rng.uniform(-1.0, 1.0, size=(n, 2))

    def simulator(theta, rng):
        n = theta.shape[0]
        a = rng.uniform(-np.pi / 2, np.pi / 2, size=n)
        r = r_mean + r_std * rng.standard_normal(n)
        return two_moons_simulator(theta, a, r)

    def reference(x, n, rng):
        # invert the simulator for fresh noise, pick a branch of |theta1 + theta2| at random,
        # and reject draws outside the prior box
        out = np.empty((0, 2))
        while out.shape[0] < n:
            m = 4 * (n - out.shape[0]) + 64
            a = rng.uniform(-np.pi / 2, np.pi / 2, size=m)
            r = r_mean + r_std * rng.standard_normal(m)
            p0 = x[0] - (r * np.cos(a) + 0.25)
            p1 = x[1] - r * np.sin(a)
            u = -p0 * np.sqrt(2.0)
            ok = u >= 0
            sign = np.where(rng.integers(0, 2, size=m) == 1, 1.0, -1.0)
            s = sign * u
            dlt = p1 * np.sqrt(2.0)
            th = np.stack([(s - dlt) / 2.0, (s + dlt) / 2.0], axis=1)
            keep = ok & np.all(np.abs(th) <= 1.0, axis=1)
            out = np.concatenate([out, th[keep]])
        return out[:n]

    def log_noise_density(x, theta):
        # density of (r cos a, r sin a) at x - g(theta); the polar Jacobian is 1/r
        theta = np.atleast_2d(theta)
        g = two_moons_simulator(theta, np.zeros(theta.shape[0]), np.zeros(theta.shape[0]))
        u = np.asarray(x) - g
        r = np.hypot(u[:, 0], u[:, 1])
        valid = u[:, 0] > 0
        with np.errstate(divide="ignore"):
            val = norm.logpdf(r, r_mean, r_std) - np.log(np.pi) - np.log(r)
        return np.where(valid, val, -np.inf)

    task = Task("two_moons", 2, 2, prior, simulator, reference, sharp_boundaries=True,
                params={"r_mean": r_mean, "r_std": r_std})
    task.log_likelihood = log_noise_density
    return task


def bimodal_1d_target(m, s):
    """Sampler for ``0.5 N(-m, s^2) + 0.5 N(m, s^2)``: ``draw(rng, n) -> (n,)``."""
    if s <= 0:
        raise ValueError("s must be positive")

    def draw(rng, n):
        sign = np.where(rng.integers(0, 2, size=n) == 1, 1.0, -1.0)
        return sign * m + s * rng.standard_normal(n)

    return draw


TASKS = {
    "gaussian_linear": gaussian_linear,
    "gaussian_mixture": gaussian_mixture,
    "two_moons": two_moons,
}


def get_task(name):
    """Resolve ``name`` (optionally ``gaussian_linear_3d`` style) to a Task."""
    if name in TASKS:
        return TASKS[name]()
    for prefix in ("gaussian_linear", "gaussian_mixture"):
        if name.startswith(prefix + "_") and name.endswith("d"):
            return TASKS[prefix](int(name[len(prefix) + 1:-1]))
    raise KeyError(f"unknown task {name!r}; choose from {sorted(TASKS)}")
