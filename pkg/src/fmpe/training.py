"""Simulation datasets, flow-matching and score-matching objectives, and the training loop."""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from fmpe.errors import ConfigError, NumericError
from fmpe.flowengine import ODESolverConfig, Posterior
from fmpe.netcore import AdamState, VectorFieldNetwork, adam_step, load_checkpoint, save_checkpoint
from fmpe.paths import (
    SIGMA_MIN_DEFAULT,
    GaussianFlowField,
    OTPath,
    ScoreVelocity,
    VPPath,
    ot_conditional_field,
    sample_conditional,
)

VP_T_MAX = 1.0 - 1e-3
VALIDATION_STREAM = 7919


@dataclass(frozen=True)
class TimePrior:
    """Training-time distribution with density ``(1 + alpha) t^alpha`` on [0, 1]."""

    alpha: float = 0.0

    def __post_init__(self):
        if not self.alpha > -1.0:
            raise ConfigError(f"time prior needs alpha > -1, got {self.alpha}")

    def density(self, t):
        t = np.asarray(t, dtype=np.float64)
        return (1.0 + self.alpha) * t ** self.alpha

    def sample(self, rng, n):
        return sample_time_prior(self, rng.uniform(size=n))


def sample_time_prior(prior, u):
    """Inverse-CDF draw: ``t = u ** (1 / (1 + alpha))``."""
    u = np.asarray(u, dtype=np.float64)
    if np.any(u < 0) or np.any(u > 1):
        raise ValueError("u must lie in [0, 1]")
    return u ** (1.0 / (1.0 + prior.alpha))


@dataclass
class SimulationDataset:
    theta: np.ndarray
    x: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray

    def __post_init__(self):
        if self.theta.shape[0] != self.x.shape[0]:
            raise ValueError("theta and x must have the same number of rows")

    def __len__(self):
        return self.theta.shape[0]


def split_indices(n, validation_fraction, rng):
    if not 0.0 < validation_fraction < 1.0:
        raise ConfigError("validation_fraction must lie in (0, 1)")
    n_val = int(round(n * validation_fraction))
    if n_val < 1 or n_val >= n:
        raise ConfigError(f"{n} rows cannot be split with validation fraction {validation_fraction}")
    perm = rng.permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def generate_dataset(task, n, seed, validation_fraction=0.05):
    """Draw ``n`` pairs ``theta ~ prior``, ``x ~ simulator(theta)`` and split off a validation set."""
    if n < 20:
        raise ConfigError("need at least 20 simulations")
    rng = np.random.default_rng(seed)
    theta = task.prior(rng, n)
    x = task.simulate(theta, rng)
    train_idx, val_idx = split_indices(n, validation_fraction, rng)
    return SimulationDataset(theta, x, train_idx, val_idx)


# ----------------------------------------------------------------------------
# objectives


def _draw_path_point(path, t, theta1, noise):
    if isinstance(path, VPPath):
        return path.sample(t, theta1, noise)
    return sample_conditional(path, t, theta1, noise)


def regression_loss(net, path, theta1, x, t, noise, with_grad=True):
    """Mean squared regression of the network onto the path's conditional target."""
    with np.errstate(invalid="ignore", over="ignore"):
        theta_t = _draw_path_point(path, t, theta1, noise)
        target = path.regression_target(t, theta_t, theta1)
    bad = ~(np.all(np.isfinite(theta_t), axis=1) & np.all(np.isfinite(target), axis=1))
    if bad.any():
        raise NumericError("non-finite loss", index=int(np.flatnonzero(bad)[0]))
    if with_grad:
        v, cache = net.forward_with_cache(t, theta_t, x)
    else:
        v, cache = net(t, theta_t, x), None
    diff = v - target
    per_row = np.sum(diff * diff, axis=1)
    if not np.all(np.isfinite(per_row)):
        raise NumericError("non-finite loss", index=int(np.flatnonzero(~np.isfinite(per_row))[0]))
    loss = float(per_row.mean())
    if not with_grad:
        return loss, None
    return loss, net.backward_from_cache(cache, 2.0 * diff / diff.shape[0])


def _draw_t_noise(path, time_prior, rng, shape):
    t = time_prior.sample(rng, shape[0])
    if isinstance(path, VPPath):
        t = t * VP_T_MAX
    return t, rng.standard_normal(shape)


def fmpe_loss_batch(net, path, time_prior, theta1, x, rng, t=None, noise=None):
    """Flow-matching loss on one batch and its parameter gradient.

    ``t`` and ``noise`` are drawn from ``rng`` unless supplied.
    """
    theta1 = np.atleast_2d(np.asarray(theta1, dtype=np.float64))
    if theta1.shape[0] == 0:
        raise ValueError("empty batch")
    if t is None or noise is None:
        t_d, n_d = _draw_t_noise(path, time_prior, rng, theta1.shape)
        t = t_d if t is None else t
        noise = n_d if noise is None else noise
    return regression_loss(net, path, theta1, x, np.asarray(t, dtype=np.float64), noise)


def score_loss_batch(net, vp_path, time_prior, theta1, x, rng, t=None, noise=None):
    """Denoising score-matching loss for the VP path (same contract as :func:`fmpe_loss_batch`)."""
    if not isinstance(vp_path, VPPath):
        raise TypeError("score_loss_batch needs a VPPath")
    return fmpe_loss_batch(net, vp_path, time_prior, theta1, x, rng, t, noise)


# ----------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    batch_size: int = 256
    learning_rate: float = 5e-4
    epochs: int = 100
    validation_fraction: float = 0.05
    time_prior_alpha: float = 0.0
    path: str = "ot"
    sigma_min: float = SIGMA_MIN_DEFAULT
    beta_min: float = 0.1
    beta_max: float = 10.0
    lr_schedule: str = "cosine"
    standardize: bool = True
    seed: int = 0
    checkpoint_dir: str = ""

    def __post_init__(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.path not in ("ot", "vp"):
            raise ConfigError(f"path must be 'ot' or 'vp', got {self.path!r}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError("lr_schedule must be 'cosine' or 'constant'")
        TimePrior(self.time_prior_alpha)

    def make_path(self):
        if self.path == "vp":
            return VPPath(self.beta_min, self.beta_max)
        return OTPath(self.sigma_min)

    def to_dict(self):
        return {f.name: str(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            raw = d[f.name]
            if f.type in ("int",):
                kw[f.name] = int(raw)
            elif f.type in ("float",):
                kw[f.name] = float(raw)
            elif f.type in ("bool",):
                kw[f.name] = str(raw).strip().lower() in ("1", "true", "yes", "on")
            else:
                kw[f.name] = str(raw)
        return cls(**kw)


@dataclass
class Standardizer:
    theta_shift: np.ndarray
    theta_scale: np.ndarray
    x_shift: np.ndarray
    x_scale: np.ndarray

    @classmethod
    def identity(cls, n, m):
        return cls(np.zeros(n), np.ones(n), np.zeros(m), np.ones(m))

    @classmethod
    def fit(cls, theta, x):
        def stats(a):
            sd = a.std(axis=0)
            return a.mean(axis=0), np.where(sd > 0, sd, 1.0)
        ts, tc = stats(theta)
        xs, xc = stats(x)
        return cls(ts, tc, xs, xc)

    def to_dict(self):
        return {k: ",".join(repr(float(v)) for v in getattr(self, k))
                for k in ("theta_shift", "theta_scale", "x_shift", "x_scale")}

    @classmethod
    def from_dict(cls, d, n, m):
        if "theta_shift" not in d:
            return cls.identity(n, m)
        return cls(*(np.array([float(v) for v in d[k].split(",")])
                     for k in ("theta_shift", "theta_scale", "x_shift", "x_scale")))


class ConditionedField:
    """Network wrapped with x-standardization, exposing the flow-engine interface."""

    def __init__(self, net, x_shift, x_scale):
        self.net = net
        self.x_shift = x_shift
        self.x_scale = x_scale
        self.config = net.config

    def _x(self, x):
        return (np.asarray(x, dtype=np.float64) - self.x_shift) / self.x_scale

    def __call__(self, t, theta, x):
        return self.net(t, theta, self._x(x))

    def divergence(self, t, theta, x):
        return self.net.divergence(t, theta, self._x(x))


def build_posterior(net, standardizer, path_kind="ot", vp_path=None, solver=None):
    field_ = ConditionedField(net, standardizer.x_shift, standardizer.x_scale)
    if path_kind == "vp":
        field_ = ScoreVelocity(field_, vp_path or VPPath())
    return Posterior(field_, net.config.output_dim, solver or ODESolverConfig(),
                     theta_shift=standardizer.theta_shift, theta_scale=standardizer.theta_scale)


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)

    def append(self, epoch, train_loss, val_loss, wall_seconds):
        self.rows.append((epoch, train_loss, val_loss, wall_seconds))

    @property
    def val_losses(self):
        return [r[2] for r in self.rows]

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("epoch,train_loss,val_loss,wall_seconds\n")
            for e, tr, va, w in self.rows:
                fh.write(f"{e},{tr!r},{va!r},{w:.3f}\n")
        return path


@dataclass
class TrainResult:
    network: VectorFieldNetwork
    posterior: Posterior
    standardizer: Standardizer
    log: TrainingLog
    best_epoch: int
    best_val_loss: float
    snapshots: dict = field(default_factory=dict)


def _lr_at(cfg, epoch):
    if cfg.lr_schedule == "constant":
        return cfg.learning_rate
    return 0.5 * cfg.learning_rate * (1.0 + math.cos(math.pi * epoch / cfg.epochs))


def validation_loss(net, path, time_prior, theta, x, seed, batch_size=1024):
    """Loss on a fixed stream of ``(t, noise)`` draws, so epochs are comparable."""
    if theta.shape[0] == 0:
        return float("nan")
    rng = np.random.default_rng([seed, VALIDATION_STREAM])
    t, noise = _draw_t_noise(path, time_prior, rng, theta.shape)
    total = 0.0
    for lo in range(0, theta.shape[0], batch_size):
        hi = lo + batch_size
        loss, _ = regression_loss(net, path, theta[lo:hi], x[lo:hi], t[lo:hi], noise[lo:hi], with_grad=False)
        total += loss * (min(hi, theta.shape[0]) - lo)
    return total / theta.shape[0]


def train(task, net_config, train_config, dataset=None, n_simulations=None, snapshot_epochs=(), progress=None):
    """Minibatch Adam on the regression objective; returns the lowest-validation-loss model.

    ``snapshot_epochs`` keeps parameter copies after those epochs (1-based) in
    ``TrainResult.snapshots``.
    """
    cfg = train_config
    if dataset is None:
        if n_simulations is None:
            raise ConfigError("need a dataset or a simulation budget")
        dataset = generate_dataset(task, n_simulations, cfg.seed, cfg.validation_fraction)
    if cfg.batch_size > len(dataset.train_idx):
        raise ConfigError("batch_size exceeds the number of training rows")
    if net_config.output_dim != dataset.theta.shape[1] or net_config.input_dim != dataset.x.shape[1]:
        raise ConfigError("network dimensions do not match the dataset")
    path = cfg.make_path()
    time_prior = TimePrior(cfg.time_prior_alpha)
    theta_tr, x_tr = dataset.theta[dataset.train_idx], dataset.x[dataset.train_idx]
    theta_va, x_va = dataset.theta[dataset.val_idx], dataset.x[dataset.val_idx]
    if cfg.standardize:
        std = Standardizer.fit(theta_tr, x_tr)
    else:
        std = Standardizer.identity(theta_tr.shape[1], x_tr.shape[1])
    theta_tr = (theta_tr - std.theta_shift) / std.theta_scale
    theta_va = (theta_va - std.theta_shift) / std.theta_scale
    x_tr = (x_tr - std.x_shift) / std.x_scale
    x_va = (x_va - std.x_shift) / std.x_scale

    net = VectorFieldNetwork(net_config, seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    state = AdamState.zeros(net.n_params)
    log = TrainingLog()
    best = (math.inf, 0, net.params.data.copy())
    snapshots = {}
    n_tr = theta_tr.shape[0]
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        lr = _lr_at(cfg, epoch - 1)
        perm = rng.permutation(n_tr)
        total = 0.0
        for lo in range(0, n_tr - cfg.batch_size + 1, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            try:
                loss, grad = fmpe_loss_batch(net, path, time_prior, theta_tr[idx], x_tr[idx], rng)
            except NumericError as exc:
                raise NumericError(f"training diverged in epoch {epoch}: {exc}", index=epoch) from exc
            _, state = adam_step(net.params.data, grad, state, lr, out=net.params.data)
            total += loss * len(idx)
        n_used = (n_tr // cfg.batch_size) * cfg.batch_size
        train_loss = total / n_used
        val_loss = validation_loss(net, path, time_prior, theta_va, x_va, cfg.seed)
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise NumericError(f"training diverged in epoch {epoch}", index=epoch)
        log.append(epoch, train_loss, val_loss, time.perf_counter() - start)
        if val_loss < best[0]:
            best = (val_loss, epoch, net.params.data.copy())
        if epoch in snapshot_epochs:
            snapshots[epoch] = net.params.data.copy()
        if progress is not None:
            progress(epoch, train_loss, val_loss)
    net.params.data[:] = best[2]
    posterior = build_posterior(net, std, cfg.path, path if cfg.path == "vp" else None)
    return TrainResult(net, posterior, std, log, best[1], best[0], snapshots)


def network_from_snapshot(result, epoch):
    net = copy.deepcopy(result.network)
    net.params.data[:] = result.snapshots[epoch]
    return net


# ----------------------------------------------------------------------------
# closed-form Gaussian flow fit


def _gaussian_field_grads(mu, s, sigma_min, t, theta):
    """Value and partials of the Gaussian marginal field in ``mu`` and ``s = sigma_hat^2``."""
    sig = 1.0 - (1.0 - sigma_min) * t
    var = sig * sig + t * t * s
    v = GaussianFlowField(mu, math.sqrt(s), sigma_min)(t, theta)
    dv_dmu = sig / var
    dv_ds = t * sig * (theta - t * mu) / (var * var)
    return v, dv_dmu, dv_ds


def fit_gaussian_flow(target_samples, sigma_min=SIGMA_MIN_DEFAULT, steps=3000, lr=0.02,
                      batch_size=1024, seed=0, init=(0.0, 1.0)):
    """Fit ``(mu_hat, sigma_hat)`` of the closed-form Gaussian flow by flow matching.

    Minimizes the sample-conditional OT loss with Adam on ``(mu_hat, log sigma_hat)``;
    the step size follows a cosine decay to zero so the estimate settles.
    """
    target = np.asarray(target_samples, dtype=np.float64).ravel()
    if target.size < 1000:
        raise ConfigError("need at least 1000 target samples")
    rng = np.random.default_rng(seed)
    path = OTPath(sigma_min)
    params = np.array([init[0], math.log(init[1])])
    state = AdamState.zeros(2)
    for step in range(steps):
        theta1 = target[rng.integers(0, target.size, size=batch_size)]
        t = rng.uniform(size=batch_size)
        noise = rng.standard_normal(batch_size)
        theta_t = sample_conditional(path, t, theta1, noise)
        u = ot_conditional_field(path, t, theta_t, theta1)
        mu, log_sd = params
        s = math.exp(2.0 * log_sd)
        v, dmu, ds = _gaussian_field_grads(mu, s, sigma_min, t, theta_t)
        r = 2.0 * (v - u) / batch_size
        grad = np.array([np.sum(r * dmu), np.sum(r * ds) * 2.0 * s])
        params, state = adam_step(params, grad, state, 0.5 * lr * (1.0 + math.cos(math.pi * step / steps)))
        if params[1] < math.log(1e-8):
            raise NumericError("sigma_hat underflow while fitting the Gaussian flow")
    return GaussianFlowField(float(params[0]), float(math.exp(params[1])), sigma_min)


def gaussian_flow_loss(field_, target_samples, n=200_000, seed=0):
    """Monte Carlo estimate of the sample-conditional loss for a Gaussian flow."""
    rng = np.random.default_rng(seed)
    target = np.asarray(target_samples, dtype=np.float64).ravel()
    path = OTPath(field_.sigma_min)
    theta1 = target[rng.integers(0, target.size, size=n)]
    t = rng.uniform(size=n)
    theta_t = sample_conditional(path, t, theta1, rng.standard_normal(n))
    u = ot_conditional_field(path, t, theta_t, theta1)
    return float(np.mean((field_(t, theta_t) - u) ** 2))


# ----------------------------------------------------------------------------
# persistence of trained posteriors


def posterior_metadata(task_name, train_config, standardizer, extra=None):
    meta = {"task": task_name}
    meta.update({f"train.{k}": v for k, v in train_config.to_dict().items()})
    meta.update({f"std.{k}": v for k, v in standardizer.to_dict().items()})
    meta.update(extra or {})
    return meta


def save_trained(path, result, task_name, train_config, extra=None):
    return save_checkpoint(path, result.network,
                           posterior_metadata(task_name, train_config, result.standardizer, extra))


def load_trained(path, solver=None):
    """Rebuild ``(posterior, network, metadata)`` from a checkpoint written by :func:`save_trained`."""
    net, meta = load_checkpoint(path)
    cfg = TrainConfig.from_dict({k[len("train."):]: v for k, v in meta.items() if k.startswith("train.")})
    std = Standardizer.from_dict({k[len("std."):]: v for k, v in meta.items() if k.startswith("std.")},
                                 net.config.output_dim, net.config.input_dim)
    posterior = build_posterior(net, std, cfg.path, cfg.make_path() if cfg.path == "vp" else None, solver)
    return posterior, net, meta
