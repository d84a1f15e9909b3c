import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import erf

from fmpe import _kernels_py as py
from fmpe import kernels

BACKENDS = kernels.available_backends()
finite = st.floats(-30, 30, allow_nan=False)


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_gelu_matches_erf_formula(name):
    z = np.linspace(-8, 8, 1001)
    a, da = BACKENDS[name].gelu(z)
    ref = 0.5 * z * (1 + erf(z / np.sqrt(2)))
    np.testing.assert_allclose(a, ref, rtol=1e-12, atol=1e-14)
    h = 1e-6
    fd = (BACKENDS[name].gelu(z + h)[0] - BACKENDS[name].gelu(z - h)[0]) / (2 * h)
    np.testing.assert_allclose(da, fd, atol=1e-8)


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_sigmoid_extremes(name):
    s = BACKENDS[name].sigmoid(np.array([-800.0, 0.0, 800.0]))
    assert s[0] == 0.0 and s[1] == 0.5 and s[2] == 1.0


@pytest.mark.parametrize("name", sorted(BACKENDS))
@pytest.mark.parametrize("exclude", [False, True])
def test_rbf_pair_sum_brute_force(name, exclude, rng):
    x = rng.standard_normal((37, 3))
    y = x if exclude else rng.standard_normal((29, 3))
    d2 = ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)
    k = np.exp(-d2 / (2 * 0.7 ** 2))
    if exclude:
        np.fill_diagonal(k, 0.0)
    assert BACKENDS[name].rbf_pair_sum(x, y, 0.7, exclude) == pytest.approx(k.sum(), rel=1e-12)


@pytest.mark.skipif("compiled" not in BACKENDS, reason="extension not built")
@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=finite))
def test_backends_agree(z):
    ck = BACKENDS["compiled"]
    np.testing.assert_allclose(ck.gelu(z)[0], py.gelu(z)[0], rtol=1e-12, atol=1e-300)
    np.testing.assert_allclose(ck.gelu(z)[1], py.gelu(z)[1], rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(ck.sigmoid(z), py.sigmoid(z), rtol=1e-13, atol=1e-300)


@pytest.mark.skipif("compiled" not in BACKENDS, reason="extension not built")
def test_rbf_backends_agree_blocked(rng):
    x = rng.standard_normal((3000, 2))
    y = rng.standard_normal((2100, 2))
    ck = BACKENDS["compiled"]
    for ex, b in ((False, y), (True, x)):
        assert ck.rbf_pair_sum(x, b, 1.3, ex) == pytest.approx(py.rbf_pair_sum(x, b, 1.3, ex), rel=1e-10)


def test_env_var_forces_fallback():
    env = dict(os.environ, FMPE_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import fmpe.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
