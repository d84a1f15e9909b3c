"""Sample-conditional probability paths and their vector fields.

Time runs from the standard-normal base at ``t=0`` to the data at ``t=1`` for
every path here, including the variance-preserving diffusion path, so that all
of them share the training loop and the ODE engine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fmpe.errors import ConfigError

SIGMA_MIN_DEFAULT = 1e-4
T_EPS = 1e-3
VP_VARIANCE_FLOOR = 1e-10


def _check_t(t):
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0) or not np.all(np.isfinite(t_arr)):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return t_arr


def _col(t, like):
    """Broadcast per-row times against ``(N, n)`` arrays."""
    t = np.asarray(t, dtype=np.float64)
    like = np.asarray(like)
    if t.ndim == 1 and like.ndim == 2 and t.shape[0] == like.shape[0]:
        return t[:, None]
    return t


@dataclass(frozen=True)
class OTPath:
    """Optimal-transport Gaussian path: mean ``t * theta1``, std ``1 - (1 - sigma_min) t``."""

    sigma_min: float = SIGMA_MIN_DEFAULT

    def __post_init__(self):
        if not 0.0 <= self.sigma_min <= 1.0:
            raise ConfigError(f"sigma_min must lie in [0, 1], got {self.sigma_min}")

    kind = "ot"

    def std(self, t):
        return 1.0 - (1.0 - self.sigma_min) * np.asarray(t, dtype=np.float64)

    def regression_target(self, t, theta, theta1):
        return ot_conditional_field(self, t, theta, theta1)


def ot_mean_std(path, t, theta1):
    t = _check_t(t)
    theta1 = np.asarray(theta1, dtype=np.float64)
    return _col(t, theta1) * theta1, path.std(t)


def ot_conditional_field(path, t, theta, theta1):
    t = _check_t(t)
    theta = np.asarray(theta, dtype=np.float64)
    theta1 = np.asarray(theta1, dtype=np.float64)
    c = 1.0 - path.sigma_min
    return (theta1 - c * theta) / _col(path.std(t), theta)


def sample_conditional(path, t, theta1, noise):
    """``theta_t = mu_t + sigma_t * noise``; the caller supplies ``noise ~ N(0, I)``."""
    mu, sigma = ot_mean_std(path, t, theta1)
    return mu + _col(sigma, mu) * np.asarray(noise, dtype=np.float64)


@dataclass(frozen=True)
class VPPath:
    """Variance-preserving diffusion path with a linear noise schedule.

    In diffusion time ``s = 1 - t`` the mean scale is
    ``m = exp(-0.5 * (beta_min s + 0.5 (beta_max - beta_min) s^2))`` and the
    conditional variance is ``1 - m^2``.
    """

    beta_min: float = 0.1
    beta_max: float = 10.0

    kind = "vp"

    def __post_init__(self):
        if not (0 < self.beta_min <= self.beta_max):
            raise ConfigError("VP path needs 0 < beta_min <= beta_max")

    def beta(self, t):
        s = 1.0 - np.asarray(t, dtype=np.float64)
        return self.beta_min + s * (self.beta_max - self.beta_min)

    def mean_scale(self, t):
        s = 1.0 - np.asarray(t, dtype=np.float64)
        return np.exp(-0.5 * (self.beta_min * s + 0.5 * (self.beta_max - self.beta_min) * s * s))

    def variance(self, t):
        m = self.mean_scale(t)
        return np.maximum(1.0 - m * m, VP_VARIANCE_FLOOR)

    def sample(self, t, theta1, noise):
        t = _check_t(t)
        theta1 = np.asarray(theta1, dtype=np.float64)
        m = _col(self.mean_scale(t), theta1)
        sd = _col(np.sqrt(self.variance(t)), theta1)
        return m * theta1 + sd * np.asarray(noise, dtype=np.float64)

    def regression_target(self, t, theta, theta1):
        return vp_conditional_score(self, t, theta, theta1)


def vp_conditional_score(path, t, theta, theta1):
    """Score of ``N(theta | m(t) theta1, (1 - m(t)^2) I)`` with respect to ``theta``."""
    t = _check_t(t)
    theta = np.asarray(theta, dtype=np.float64)
    theta1 = np.asarray(theta1, dtype=np.float64)
    m = _col(path.mean_scale(t), theta)
    var = _col(path.variance(t), theta)
    return -(theta - m * theta1) / var


class ScoreVelocity:
    """Probability-flow velocity of the VP path built from a score model.

    ``v(t, theta) = 0.5 * beta(1 - t) * (theta + score(t, theta))``. ``score`` is any
    object with the network call / divergence interface.
    """

    def __init__(self, score_model, path):
        self.model = score_model
        self.path = path
        self.dim = score_model.config.output_dim

    def __call__(self, t, theta, x):
        half_beta = 0.5 * self.path.beta(t)
        return half_beta * (theta + self.model(t, theta, x))

    def divergence(self, t, theta, x):
        s, div_s = self.model.divergence(t, theta, x)
        half_beta = 0.5 * self.path.beta(t)
        return half_beta * (theta + s), half_beta * (theta.shape[-1] + div_s)


# ----------------------------------------------------------------------------
# closed-form Gaussian flow


@dataclass(frozen=True)
class GaussianFlowField:
    """Marginal OT-path field whose time-1 marginal is ``N(mu_hat, sigma_t(1)^2 + sigma_hat^2)``."""

    mu_hat: float
    sigma_hat: float
    sigma_min: float = SIGMA_MIN_DEFAULT

    dim = 1

    def __post_init__(self):
        if not self.sigma_hat > 0:
            raise ConfigError("sigma_hat must be positive")

    def _std_and_var(self, t):
        sig = 1.0 - (1.0 - self.sigma_min) * t
        return sig, sig * sig + (t * self.sigma_hat) ** 2

    def slope(self, t):
        """d u_t / d theta (constant in theta), i.e. the divergence of the field."""
        t = np.asarray(t, dtype=np.float64)
        sig, var = self._std_and_var(t)
        c = 1.0 - self.sigma_min
        with np.errstate(divide="ignore", invalid="ignore"):
            big = (var - sig) / (t * var)
            small = (t * self.sigma_hat ** 2 - c * var) / (sig * var)
        return np.where(t >= T_EPS, big, small)

    def intercept(self, t):
        t = np.asarray(t, dtype=np.float64)
        sig, var = self._std_and_var(t)
        return self.mu_hat * sig / var

    # flow-engine interface: field(t, theta, x) and field.divergence(t, theta, x)
    def __call__(self, t, theta, x=None):
        return gaussian_marginal_field(self, t, theta)

    def divergence(self, t, theta, x=None):
        theta = np.asarray(theta, dtype=np.float64)
        v = gaussian_marginal_field(self, t, theta)
        slope = np.asarray(self.slope(t), dtype=np.float64)
        if theta.ndim == 2:
            return v, np.broadcast_to(slope.reshape(-1), (theta.shape[0],)).copy()
        return v, slope

    def final_std(self):
        return float(np.sqrt(self.sigma_min ** 2 + self.sigma_hat ** 2))


def gaussian_marginal_density(field, t, theta):
    t = float(_check_t(t))
    sig, var = field._std_and_var(t)
    theta = np.asarray(theta, dtype=np.float64)
    return np.exp(-0.5 * (theta - t * field.mu_hat) ** 2 / var) / np.sqrt(2.0 * np.pi * var)


def gaussian_marginal_field(field, t, theta):
    """Marginal vector field of the OT path for a Gaussian target.

    For ``t >= T_EPS`` this is ``((V - s) theta + t mu s) / (t V)`` with ``s`` the
    conditional std and ``V = s^2 + (t sigma_hat)^2``. Below ``T_EPS`` an
    algebraically identical form without the ``1/t`` factor is used; at ``t=0``
    it equals ``mu_hat - (1 - sigma_min) theta``.
    """
    t = _check_t(t)
    theta = np.asarray(theta, dtype=np.float64)
    tt = _col(t, theta) if theta.ndim == 2 and t.ndim == 1 else t
    return field.slope(tt) * theta + field.intercept(tt)
