"""Numpy implementations of the hot kernels (fallback for :mod:`fmpe._ckernels`)."""

import numpy as np
from scipy.special import expit, ndtr

_INV_SQRT_2PI = 0.3989422804014327


def gelu(z):
    """Return ``(gelu(z), gelu'(z))``."""
    z = np.asarray(z, dtype=np.float64)
    cdf = ndtr(z)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    return z * cdf, cdf + z * pdf


def sigmoid(z):
    return expit(np.asarray(z, dtype=np.float64))


def rbf_pair_sum(x, y, bandwidth, exclude_diagonal=False, block=1024):
    """Blocked Gram-matrix sum; memory is O(block * len(y))."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if x.shape[1] != y.shape[1]:
        raise ValueError("dimension mismatch")
    scale = -0.5 / (bandwidth * bandwidth)
    y2 = np.einsum("ij,ij->i", y, y)
    total = 0.0
    for start in range(0, x.shape[0], block):
        xb = x[start:start + block]
        d2 = np.einsum("ij,ij->i", xb, xb)[:, None] + y2[None, :] - 2.0 * xb @ y.T
        np.maximum(d2, 0.0, out=d2)
        k = np.exp(scale * d2)
        if exclude_diagonal:
            rows = np.arange(xb.shape[0])
            cols = rows + start
            keep = cols < y.shape[0]
            k[rows[keep], cols[keep]] = 0.0
        total += float(k.sum())
    return total
