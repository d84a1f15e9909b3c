"""One-dimensional counterexamples relating the flow-matching loss to forward KL.

Both constructions start from ``U[-1, 1]``, take the reference field ``u = 0`` (so
the reference flow is the identity) and perturb it on a small interval
``[0, 2 eps)``:

* ``holes``: a step field ``v = eps`` on ``[0, eps)``. Its flow piles the interval
  onto the point ``eps`` and leaves a gap, so the KL divergence is infinite while
  the loss is ``eps^3 / 2``.
* ``lipschitz``: the tent ``v = 2 theta`` on ``[0, eps)``, ``v = 2 (2 eps - theta)``
  on ``[eps, 2 eps)``. The flow is continuous, and the KL divergence is of order
  ``eps`` while the loss is of order ``eps^3``.

Fields are autonomous and piecewise linear, so flow maps are available in closed
form by hopping from piece to piece.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from fmpe.errors import ConfigError
from fmpe.flowengine import ODESolverConfig, integrate_with_divergence

E2 = math.exp(-2.0)


@dataclass(frozen=True)
class PiecewiseFlow1D:
    """Autonomous field ``v(theta) = a_i theta + b_i`` on ``[edges[i], edges[i+1])``, zero outside.

    The base distribution is ``U[-1, 1]``.
    """

    edges: tuple
    slopes: tuple
    offsets: tuple

    def __post_init__(self):
        if len(self.edges) != len(self.slopes) + 1 or len(self.slopes) != len(self.offsets):
            raise ValueError("need len(edges) == len(slopes) + 1 == len(offsets) + 1")

    def _piece(self, theta):
        e = self.edges
        if theta < e[0] or theta >= e[-1]:
            return -1
        return int(np.searchsorted(e, theta, side="right")) - 1

    def _coef(self, k):
        return (0.0, 0.0) if k < 0 else (self.slopes[k], self.offsets[k])

    def field(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        out = np.zeros_like(theta)
        for k in range(len(self.slopes)):
            m = (theta >= self.edges[k]) & (theta < self.edges[k + 1])
            out[m] = self.slopes[k] * theta[m] + self.offsets[k]
        return out

    def divergence_1d(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        out = np.zeros_like(theta)
        for k in range(len(self.slopes)):
            m = (theta >= self.edges[k]) & (theta < self.edges[k + 1])
            out[m] = self.slopes[k]
        return out

    # flow-engine interface (the field does not depend on t or x)
    def __call__(self, t, theta, x=None):
        return self.field(theta)

    def divergence(self, t, theta, x=None):
        return self.field(theta), self.divergence_1d(theta)[:, 0]

    def _neighbour(self, k, boundary, direction):
        probe = boundary if direction > 0 else np.nextafter(boundary, -np.inf)
        return self._piece(probe)

    def flow_scalar(self, theta, t):
        """``(psi_t(theta), log psi_t'(theta))`` by exact piece hopping; ``t`` may be negative."""
        y, rem, logd = float(theta), float(t), 0.0
        sgn = 1.0 if t >= 0 else -1.0
        rem = abs(rem)
        k = self._piece(y)
        for _ in range(4 * len(self.slopes) + 4):
            if rem <= 0:
                break
            a, b = self._coef(k)
            a, b = sgn * a, sgn * b
            v = a * y + b
            if v == 0.0:
                break
            direction = 1.0 if v > 0 else -1.0
            if k < 0:
                break
            bound = self.edges[k + 1] if direction > 0 else self.edges[k]
            tau = _hit_time(a, b, y, bound)
            if tau >= rem:
                y, logd = _advance(a, b, y, rem), logd + a * rem
                rem = 0.0
                break
            # reach the piece edge; continue in the neighbour unless it pushes back
            logd += a * tau
            rem -= tau
            nxt = self._neighbour(k, bound, direction)
            an, bn = self._coef(nxt)
            vn = sgn * (an * bound + bn)
            v = a * bound + b
            y = bound
            if vn * direction <= 0:
                # trajectory stops at the edge; the Jacobian there is degenerate
                logd = -math.inf
                break
            if v != vn:
                logd += math.log(vn / v)
            k = nxt
        return y, logd

    def flow(self, theta, t):
        theta = np.asarray(theta, dtype=np.float64)
        out = np.empty_like(theta)
        logd = np.empty_like(theta)
        for i, th in np.ndenumerate(theta):
            out[i], logd[i] = self.flow_scalar(th, t)
        return out, logd

    def pushforward_density(self, y, t=1.0):
        """Density of ``psi_t`` applied to ``U[-1, 1]``, for fields whose flow is invertible.

        ``y`` must lie where the time-``t`` flow is a diffeomorphism.
        """
        y = np.asarray(y, dtype=np.float64)
        theta, logd_back = self.flow(y, -t)
        base = np.where(np.abs(theta) <= 1.0, 0.5, 0.0)
        return base * np.exp(logd_back)


def _hit_time(a, b, y, bound):
    """Time for ``y' = a y + b`` started at ``y`` to reach ``bound`` (``inf`` if never)."""
    if a == 0.0:
        tau = (bound - y) / b
        return tau if tau >= 0 else math.inf
    fixed = -b / a
    ratio = (bound - fixed) / (y - fixed) if y != fixed else math.inf
    if not ratio > 0 or not math.isfinite(ratio):
        return math.inf
    tau = math.log(ratio) / a
    return tau if tau >= 0 else math.inf


def _advance(a, b, y, tau):
    if a == 0.0:
        return y + b * tau
    fixed = -b / a
    return fixed + (y - fixed) * math.exp(a * tau)


# ----------------------------------------------------------------------------
# quadrature


def adaptive_simpson(f, a, b, tol=1e-13, max_depth=50):
    """Adaptive Simpson rule on ``[a, b]`` (``f`` must be smooth on the interval).

    The end values are taken one ulp inside the interval, so ``f`` may jump at
    ``a`` or ``b``.
    """
    if a == b:
        return 0.0
    fa, fm, fb = f(np.nextafter(a, b)), f(0.5 * (a + b)), f(np.nextafter(b, a))
    whole = (b - a) * (fa + 4 * fm + fb) / 6.0
    return _simpson_rec(f, a, b, fa, fm, fb, whole, tol, max_depth)


def _simpson_rec(f, a, b, fa, fm, fb, whole, tol, depth):
    m = 0.5 * (a + b)
    lm, rm = 0.5 * (a + m), 0.5 * (m + b)
    flm, frm = f(lm), f(rm)
    left = (m - a) * (fa + 4 * flm + fm) / 6.0
    right = (b - m) * (fm + 4 * frm + fb) / 6.0
    if depth <= 0 or abs(left + right - whole) <= 15 * tol:
        return left + right + (left + right - whole) / 15.0
    return (_simpson_rec(f, a, m, fa, flm, fm, left, tol / 2, depth - 1)
            + _simpson_rec(f, m, b, fm, frm, fb, right, tol / 2, depth - 1))


def piecewise_quad(f, breakpoints, tol=1e-13):
    bp = sorted(breakpoints)
    return sum(adaptive_simpson(f, lo, hi, tol) for lo, hi in zip(bp[:-1], bp[1:]))


def mse_quadrature(flow, breakpoints, tol=1e-13):
    """``int_0^1 dt int p_t(theta) (u - v)^2`` with ``u = 0`` and ``p_t = U[-1, 1]``."""
    def inner(t):
        return piecewise_quad(lambda th: 0.5 * float(flow.field(np.array(th))) ** 2, breakpoints, tol)
    return adaptive_simpson(inner, 0.0, 1.0, tol)


# ----------------------------------------------------------------------------
# the two constructions


def holes_flow(eps):
    return PiecewiseFlow1D((0.0, eps), (0.0,), (eps,))


def lipschitz_flow(eps):
    return PiecewiseFlow1D((0.0, eps, 2 * eps), (2.0, -2.0), (0.0, 4 * eps))


@dataclass
class HolesResult:
    eps: float
    mse: float
    mse_quadrature: float
    kl: float | None
    kl_infinite: bool
    support_gap: tuple


@dataclass
class LipschitzResult:
    eps: float
    mse: float
    mse_quadrature: float
    kl_lower: float
    kl_lower_quadrature: float
    kl: float
    kl_quadrature: float
    q1_mass: float
    bound_ratio: float
    mse_stated: float

    @property
    def kl_infinite(self):
        return False


def holes_example(eps):
    """Step-field construction: loss ``eps^3 / 2``, infinite KL, gap ``(0, eps)`` in ``q_1``."""
    if not 0.0 < eps < 1.0:
        raise ConfigError("holes_example needs 0 < eps < 1")
    flow = holes_flow(eps)
    quad = mse_quadrature(flow, (-1.0, 0.0, eps, 1.0))
    return HolesResult(eps, eps ** 3 / 2.0, quad, None, True, (0.0, eps))


def lipschitz_q1(eps, y):
    """Closed-form density of ``q_1`` for the tent construction."""
    y = np.asarray(y, dtype=np.float64)
    with np.errstate(divide="ignore"):
        mid = 0.5 * eps * eps * E2 / (2 * eps - y) ** 2
    out = np.full_like(y, 0.5)
    out = np.where((y >= 0) & (y < eps), 0.5 * E2, out)
    out = np.where((y >= eps) & (y < 2 * eps - eps * E2), mid, out)
    out = np.where((y >= 2 * eps - eps * E2) & (y < 2 * eps), 0.5 / E2, out)
    return np.where(np.abs(y) <= 1.0, out, 0.0)


def lipschitz_example(eps):
    """Tent-field construction: KL of order ``eps`` against a loss of order ``eps^3``.

    ``mse = 4 eps^3 / 3`` is the loss of this tent; ``mse_stated = eps^3 / 3`` is
    kept for comparison with the value usually quoted for it. ``kl_lower`` is the
    contribution of the two constant-density regions, ``eps (1 - e^-2)``; the full
    divergence is ``eps (1 + e^-2)``. ``bound_ratio = kl_lower / (mse^(1/3) / 2)``.
    """
    if not 0.0 < eps <= 0.25:
        raise ConfigError("lipschitz_example needs 0 < eps <= 1/4")
    flow = lipschitz_flow(eps)
    y_lo, y_hi = 2 * eps - eps * E2, 2 * eps
    mse = 4.0 * eps ** 3 / 3.0
    quad = mse_quadrature(flow, (-1.0, 0.0, eps, 2 * eps, 1.0))

    def q1(y):
        return float(flow.pushforward_density(np.array(y)))

    def kl_density(y):
        return 0.5 * math.log(0.5 / q1(y))

    kl_lower_quad = piecewise_quad(kl_density, (0.0, eps)) + piecewise_quad(kl_density, (y_lo, y_hi))
    breaks = (-1.0, 0.0, eps, y_lo, y_hi, 1.0)
    kl_quad = piecewise_quad(kl_density, breaks)
    mass = piecewise_quad(q1, breaks)
    kl_lower = eps * (1.0 - E2)
    return LipschitzResult(
        eps=eps, mse=mse, mse_quadrature=quad, kl_lower=kl_lower, kl_lower_quadrature=kl_lower_quad,
        kl=eps * (1.0 + E2), kl_quadrature=kl_quad, q1_mass=mass,
        bound_ratio=kl_lower / (0.5 * mse ** (1.0 / 3.0)), mse_stated=eps ** 3 / 3.0)


def q1_by_ode(flow, theta0, config=None):
    """Push base points through the flow with the ODE engine; returns ``(theta_1, q_1(theta_1))``."""
    theta0 = np.asarray(theta0, dtype=np.float64).reshape(-1, 1)
    cfg = config or ODESolverConfig(atol=1e-10, rtol=1e-10)
    theta1, div_int, _ = integrate_with_divergence(flow, None, theta0, (0.0, 1.0), cfg)
    return theta1[:, 0], 0.5 * np.exp(-div_int)


def support_gap_count(eps, n=100_000, seed=0, margin=1e-9):
    """Number of holes-flow pushforward samples landing inside ``(0, eps - margin)``."""
    theta = np.random.default_rng(seed).uniform(-1.0, 1.0, size=n)
    y, _ = holes_flow(eps).flow(theta, 1.0)
    return int(np.sum((y > 0) & (y < eps - margin)))


# ----------------------------------------------------------------------------
# empirical trend between loss and forward KL


@dataclass
class TrendResult:
    kl: list
    loss: list
    correlation: float | None

    @property
    def defined(self):
        return self.correlation is not None


def forward_kl_estimate(task, posterior, x, n=2000, seed=0):
    """Monte Carlo ``E_p[log p - log q]`` over reference draws (needs an analytic posterior)."""
    if task.log_posterior is None:
        raise ConfigError(f"{task.name} has no analytic posterior density")
    ref = task.reference(np.asarray(x, dtype=np.float64), n, np.random.default_rng(seed))
    return float(np.mean(task.log_posterior(ref, x) - posterior.log_prob(ref, x)))


def kl_mse_trend(task, checkpoints, x, n=2000, seed=0):
    """Rank correlation between validation loss and forward KL across checkpoints.

    ``checkpoints`` is a sequence of ``(posterior, validation_loss)`` pairs. The
    correlation is ``None`` when either sequence is constant.
    """
    if len(checkpoints) < 3:
        raise ConfigError("kl_mse_trend needs at least 3 checkpoints")
    kl = [forward_kl_estimate(task, post, x, n, seed) for post, _ in checkpoints]
    loss = [float(v) for _, v in checkpoints]
    if np.ptp(kl) == 0 or np.ptp(loss) == 0:
        return TrendResult(kl, loss, None)
    rho = spearmanr(loss, kl)[0]
    return TrendResult(kl, loss, None if not np.isfinite(rho) else float(rho))


def format_table(rows, header):
    """Plain fixed-width text table."""
    cells = [[str(h) for h in header]] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(v):
    if v is None:
        return "-"
    if isinstance(v, float):
        return "inf" if math.isinf(v) else f"{v:.6g}"
    return str(v)
