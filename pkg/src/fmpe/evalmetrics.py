"""Sample-based comparison metrics: C2ST, unbiased MMD, histogram JSD, mass coverage and P-P data."""

from __future__ import annotations

import csv
import hashlib
import math
import os
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np

from fmpe.errors import ConfigError, ShapeError
from fmpe.kernels import rbf_pair_sum
from fmpe.netcore import AdamState, MLPClassifier, adam_step

C2ST_HIDDEN = (64, 64)
C2ST_EPOCHS = 20
C2ST_LR = 1e-3
C2ST_BATCH = 128
C2ST_FOLDS = 5
JSD_BINS = 50
JSD_SMOOTHING = 1e-12


@dataclass
class MetricReport:
    task: str
    observation: int
    metric: str
    value: float
    n_p: int
    n_q: int
    config_digest: str = ""
    note: str = ""


def append_reports(path, reports):
    """Append rows to a CSV ledger, writing the header when the file is new."""
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    names = [f.name for f in fields(MetricReport)]
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=names)
        if new:
            w.writeheader()
        for r in reports:
            row = asdict(r)
            row["value"] = repr(float(row["value"]))
            w.writerow(row)
    return path


def config_digest(mapping):
    text = "\n".join(f"{k}={mapping[k]}" for k in sorted(mapping))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _as_2d(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 1-D or 2-D")
    return a


# ----------------------------------------------------------------------------
# C2ST


def c2st(samples_p, samples_q, seed=0, folds=C2ST_FOLDS, epochs=C2ST_EPOCHS):
    """Classifier two-sample test accuracy, folded to ``max(acc, 1 - acc)``.

    Features are standardized on the pooled set; features with zero variance are
    dropped. A 2x64 ReLU classifier is trained per fold and the held-out
    accuracies of a stratified ``folds``-fold split are averaged.
    """
    p = _as_2d(samples_p, "samples_p")
    q = _as_2d(samples_q, "samples_q")
    if p.shape[1] != q.shape[1]:
        raise ShapeError("samples must have the same dimension")
    if min(p.shape[0], q.shape[0]) < 100:
        raise ConfigError("c2st needs at least 100 samples per set")
    data = np.concatenate([p, q])
    labels = np.concatenate([np.zeros(p.shape[0]), np.ones(q.shape[0])])
    sd = data.std(axis=0)
    keep = sd > 0
    if not keep.all():
        warnings.warn(f"c2st: dropping {int((~keep).sum())} zero-variance feature(s)")
        if not keep.any():
            return 0.5
        data = data[:, keep]
        sd = sd[keep]
    data = (data - data.mean(axis=0)) / sd
    rng = np.random.default_rng(seed)
    fold_of = np.empty(data.shape[0], dtype=int)
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        fold_of[rng.permutation(idx)] = np.arange(idx.size) % folds
    accs = []
    for k in range(folds):
        tr, te = fold_of != k, fold_of == k
        clf = _fit_classifier(data[tr], labels[tr], rng, epochs)
        pred = clf.logits(data[te]) > 0
        accs.append(float(np.mean(pred == labels[te].astype(bool))))
    acc = float(np.mean(accs))
    return max(acc, 1.0 - acc)


def _fit_classifier(x, y, rng, epochs):
    clf = MLPClassifier(x.shape[1], hidden=C2ST_HIDDEN, seed=int(rng.integers(2**31)))
    state = AdamState.zeros(clf.params.count)
    n = x.shape[0]
    for _ in range(epochs):
        perm = rng.permutation(n)
        for lo in range(0, n, C2ST_BATCH):
            idx = perm[lo:lo + C2ST_BATCH]
            _, grad = clf.loss_and_grad(x[idx], y[idx])
            _, state = adam_step(clf.params.data, grad, state, C2ST_LR, out=clf.params.data)
    return clf


# ----------------------------------------------------------------------------
# MMD


def median_bandwidth(pooled, max_points=2000, seed=0):
    """Median pairwise Euclidean distance (on a random subset for large sets)."""
    pooled = _as_2d(pooled, "pooled")
    if pooled.shape[0] > max_points:
        pooled = pooled[np.random.default_rng(seed).choice(pooled.shape[0], max_points, replace=False)]
    d2 = np.sum((pooled[:, None, :] - pooled[None, :, :]) ** 2, axis=-1)
    iu = np.triu_indices(pooled.shape[0], k=1)
    h = float(np.sqrt(np.median(d2[iu])))
    return h if h > 0 else 1.0


def mmd_unbiased(samples_p, samples_q, bandwidth=None):
    """Unbiased U-statistic estimate of squared MMD with ``k(a, b) = exp(-|a - b|^2 / (2 h^2))``.

    ``bandwidth`` defaults to the median pairwise distance of the pooled set.
    """
    p = _as_2d(samples_p, "samples_p")
    q = _as_2d(samples_q, "samples_q")
    if p.shape[1] != q.shape[1]:
        raise ShapeError("samples must have the same dimension")
    m, n = p.shape[0], q.shape[0]
    if min(m, n) < 2:
        raise ConfigError("mmd needs at least 2 samples per set")
    if bandwidth is None:
        bandwidth = median_bandwidth(np.concatenate([p, q]))
    kpp = rbf_pair_sum(p, p, bandwidth, True) / (m * (m - 1))
    kqq = rbf_pair_sum(q, q, bandwidth, True) / (n * (n - 1))
    kpq = rbf_pair_sum(p, q, bandwidth, False) / (m * n)
    return float(kpp + kqq - 2.0 * kpq)


# ----------------------------------------------------------------------------
# JSD


def jsd_1d_hist(samples_p, samples_q, bins=JSD_BINS, smoothing=JSD_SMOOTHING):
    """Jensen-Shannon divergence (nats) between histograms on a shared binning."""
    p = np.asarray(samples_p, dtype=np.float64).ravel()
    q = np.asarray(samples_q, dtype=np.float64).ravel()
    if p.size == 0 or q.size == 0:
        raise ConfigError("jsd needs nonempty sample sets")
    lo = min(p.min(), q.min())
    hi = max(p.max(), q.max())
    if hi == lo:
        return 0.0
    edges = np.linspace(lo, hi, bins + 1)
    hp = np.histogram(p, edges)[0] + smoothing
    hq = np.histogram(q, edges)[0] + smoothing
    hp /= hp.sum()
    hq /= hq.sum()
    return jsd_discrete(hp, hq)


def jsd_discrete(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / m[nz])))

    return min(max(0.5 * (kl(p) + kl(q)), 0.0), math.log(2.0))


# ----------------------------------------------------------------------------
# mass coverage


@dataclass
class CoverageReport:
    logq_reference: np.ndarray
    logq_model: np.ndarray
    delta: float
    finite_fraction: float
    bins: int = 50

    def histograms(self):
        """Shared-edge histograms of both log-density sets: ``(edges, counts_ref, counts_model)``."""
        fin_r = self.logq_reference[np.isfinite(self.logq_reference)]
        both = np.concatenate([fin_r, self.logq_model])
        edges = np.linspace(both.min(), both.max(), self.bins + 1)
        return edges, np.histogram(fin_r, edges)[0], np.histogram(self.logq_model, edges)[0]

    def histogram_rows(self):
        edges, cr, cm = self.histograms()
        return [(edges[i], edges[i + 1], int(cr[i]), int(cm[i])) for i in range(len(cr))]


def mass_coverage_report(posterior, x, reference_samples, n_model=None, seed=0):
    """Log-densities of reference and model samples under ``posterior``.

    ``delta = min(log q on reference) - min(log q on model samples)``; it is
    ``-inf`` when some reference sample gets zero density.
    """
    ref = _as_2d(reference_samples, "reference_samples")
    n_model = ref.shape[0] if n_model is None else n_model
    logq_ref = posterior.log_prob(ref, x)
    _, logq_model = posterior.sample_and_log_prob(x, n_model, seed=seed)
    finite = np.isfinite(logq_ref)
    delta = float(np.min(logq_ref) - np.min(logq_model)) if finite.all() else -math.inf
    return CoverageReport(logq_ref, logq_model, delta, float(finite.mean()))


# ----------------------------------------------------------------------------
# P-P calibration


def marginal_ranks(samples, truth):
    """Fraction of posterior samples below the true value, per dimension.

    ``samples``: ``(n_obs, n_samples, dim)``; ``truth``: ``(n_obs, dim)``.
    """
    samples = np.asarray(samples, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if samples.ndim != 3 or truth.shape != (samples.shape[0], samples.shape[2]):
        raise ShapeError("expected samples (n_obs, n_samples, dim) and truth (n_obs, dim)")
    return np.mean(samples < truth[:, None, :], axis=1)


def pp_curves(ranks, grid=None):
    """Empirical CDF of ranks on ``grid`` per dimension: ``(grid, ecdf (len(grid), dim))``."""
    ranks = np.asarray(ranks, dtype=np.float64)
    grid = np.linspace(0.0, 1.0, 101) if grid is None else np.asarray(grid)
    ecdf = np.mean(ranks[None, :, :] <= grid[:, None, None], axis=1)
    return grid, ecdf


def pp_plot_data(posterior, task, n_observations=100, n_samples=500, seed=0):
    """Rank-based P-P curves from fresh ``(theta, x)`` pairs of ``task``.

    ``posterior`` is anything with ``sample(x, n, seed)``.
    Returns ``(grid, ecdf, ranks)``.
    """
    rng = np.random.default_rng([seed, 11])
    theta = task.prior(rng, n_observations)
    x = task.simulate(theta, rng)
    draws = np.stack([posterior.sample(x[i], n_samples, seed=seed + i) for i in range(n_observations)])
    ranks = marginal_ranks(draws, theta)
    grid, ecdf = pp_curves(ranks)
    return grid, ecdf, ranks


def write_rows_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return path
