import math

import numpy as np
import pytest
from conftest import central_diff, rel_err

from fmpe.errors import ConfigError, NumericError, ShapeError, StorageError
from fmpe.netcore import (
    AdamState,
    Dense,
    MLPClassifier,
    ParameterStore,
    ResidualBlock,
    ResidualMLPConfig,
    VectorFieldNetwork,
    adam_step,
    checkpoint_bytes,
    glu_condition,
    parse_checkpoint,
)

MODES = ["glu", "concat"]


def small_config(mode, activation="gelu", **kw):
    return ResidualMLPConfig(input_dim=3, output_dim=2, hidden_widths=(8, 6, 6), activation=activation,
                             conditioning_mode=mode, context_widths=(5, 4), **kw)


def batch(rng, n=4, nt=2, nx=3):
    return rng.uniform(size=n), rng.standard_normal((n, nt)), rng.standard_normal((n, nx))


# ---------------------------------------------------------------- store


def test_store_offsets_partition():
    store = ParameterStore([("a", (2, 3)), ("b", (4,)), ("c", (1, 1))])
    spans = sorted((lo, hi) for lo, hi, _ in store.offsets.values())
    assert spans[0][0] == 0 and spans[-1][1] == store.count == 11
    assert all(spans[i][1] == spans[i + 1][0] for i in range(len(spans) - 1))
    store.view("b")[...] = 7.0
    assert np.all(store.data[6:10] == 7.0)


def test_store_rejects_empty_and_nonfinite():
    with pytest.raises(ValueError):
        ParameterStore([])
    store = ParameterStore([("a", (3,))])
    store.data[1] = np.nan
    with pytest.raises(NumericError, match="index 1"):
        store.check_finite()


# ---------------------------------------------------------------- forward


@pytest.mark.parametrize("mode", MODES)
def test_zero_params_give_zero_output(mode, rng):
    net = VectorFieldNetwork(small_config(mode))
    net.params.data[:] = 0.0
    assert np.all(net(*batch(rng)) == 0.0)


def test_identity_passthrough_selects_theta(rng):
    cfg = ResidualMLPConfig(input_dim=3, output_dim=2, hidden_widths=(6,), conditioning_mode="concat")
    net = VectorFieldNetwork(cfg)
    p = net.params
    p.data[:] = 0.0
    p.view("trunk.proj0.weight")[...] = np.eye(6)
    p.view("head.weight")[...] = np.eye(6)[1:3]
    t, th, x = batch(rng)
    np.testing.assert_array_equal(net(t, th, x), th)


def _oracle_forward(net, t, theta, x):
    """Row-by-row scalar re-implementation of the network."""
    cfg = net.config
    p = net.params

    def act(z):
        if cfg.activation == "gelu":
            return 0.5 * z * (1.0 + math.erf(z / math.sqrt(2.0)))
        return math.tanh(z)

    def dense(name, v):
        w, b = p.view(name + ".weight"), p.view(name + ".bias")
        return [sum(w[i, j] * v[j] for j in range(len(v))) + b[i] for i in range(w.shape[0])]

    def block(name, h, c):
        a0 = [act(z) for z in h]
        a1 = [act(z) for z in dense(name + ".lin1", a0)]
        r = dense(name + ".lin2", a1)
        if c is not None:
            g = dense(name + ".gate", c)
            r = [ri / (1.0 + math.exp(-gi)) for ri, gi in zip(r, g)]
        return [hi + ri for hi, ri in zip(h, r)]

    def stack(prefix, h, widths, c=None, gated_from=0):
        prev = len(h)
        for i, w in enumerate(widths):
            if i == 0 or w != prev:
                h = dense(f"{prefix}.proj{i}", h)
            h = block(f"{prefix}.block{i}", h, c if (c is not None and i >= gated_from) else None)
            prev = w
        return h

    out = []
    for r in range(theta.shape[0]):
        tt, th, xx = [t[r]], list(theta[r]), list(x[r])
        if cfg.conditioning_mode == "glu":
            c = stack("embed", tt + th, cfg.context_widths)
            h = stack("trunk", xx, cfg.hidden_widths, c, cfg.glu_start_block)
        else:
            h = stack("trunk", tt + th + xx, cfg.hidden_widths)
        out.append(dense("head", h))
    return np.array(out)


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("activation", ["gelu", "tanh"])
def test_forward_matches_scalar_oracle(mode, activation, rng):
    net = VectorFieldNetwork(small_config(mode, activation, glu_start_block=1 if mode == "glu" else 0), seed=3)
    t, th, x = batch(rng)
    np.testing.assert_allclose(net(t, th, x), _oracle_forward(net, t, th, x), rtol=0, atol=1e-12)


@pytest.mark.parametrize("mode", MODES)
def test_forward_deterministic_and_same_signature(mode, rng):
    net = VectorFieldNetwork(small_config(mode), seed=1)
    t, th, x = batch(rng)
    a, b = net(t, th, x), VectorFieldNetwork(small_config(mode), seed=1)(t, th, x)
    assert a.shape == (4, 2)
    np.testing.assert_array_equal(a, b)
    # single row in, single row out; scalar t broadcast
    assert net(0.3, th[0], x[0]).shape == (2,)
    np.testing.assert_array_equal(net(0.3, th, x[0]), net(np.full(4, 0.3), th, np.tile(x[0], (4, 1))))


def test_forward_errors(rng):
    net = VectorFieldNetwork(small_config("glu"))
    t, th, x = batch(rng)
    with pytest.raises(ShapeError):
        net(t, th[:, :1], x)
    with pytest.raises(ShapeError):
        net(t, th, x[:2])
    bad = th.copy()
    bad[1, 0] = np.inf
    with pytest.raises(NumericError):
        net(t, bad, x)


@pytest.mark.parametrize("kw", [dict(hidden_widths=()), dict(conditioning_mode="film"),
                                dict(glu_start_block=5), dict(output_dim=0), dict(activation="swish9")])
def test_config_validation(kw):
    base = dict(input_dim=2, output_dim=2)
    base.update(kw)
    with pytest.raises((ConfigError, ValueError)):
        ResidualMLPConfig(**base)


# ---------------------------------------------------------------- gradients


def test_dense_linear_case():
    d = Dense("f", 1, 1)
    store = ParameterStore(d.specs())
    store.view("f.weight")[...] = 0.8
    grad = store.zeros_like()
    t = np.array([[0.37]])
    d.backward(store, grad, t, np.array([[2.5]]))
    assert store.view("f.weight", grad)[0, 0] == pytest.approx(0.37 * 2.5)
    assert store.view("f.bias", grad)[0] == pytest.approx(2.5)


def _layer_fd_check(layer, forward, inputs, rng):
    store = ParameterStore([s for lay in layer for s in lay.specs()])
    for lay in layer:
        lay.init(store, rng)
    up = rng.standard_normal(forward(store, *inputs).shape)

    def f(flat):
        old = store.data.copy()
        store.data[:] = flat
        val = float(np.sum(up * forward(store, *inputs)))
        store.data[:] = old
        return val
    return store, up, central_diff(f, store.data)


def test_dense_gradient(rng):
    d = Dense("d", 4, 3)
    h = rng.standard_normal((5, 4))
    store, up, fd = _layer_fd_check([d], lambda s, hh: d.forward(s, hh), (h,), rng)
    grad = store.zeros_like()
    dh = d.backward(store, grad, h, up)
    assert rel_err(grad, fd) < 1e-5
    np.testing.assert_allclose(dh, up @ store.view("d.weight"))


@pytest.mark.parametrize("gated", [False, True])
@pytest.mark.parametrize("activation", ["gelu", "tanh", "silu"])
def test_residual_block_gradient(gated, activation, rng):
    blk = ResidualBlock("b", 5, activation, context_dim=3 if gated else None)
    h = rng.standard_normal((6, 5))
    c = rng.standard_normal((6, 3)) if gated else None
    store, up, fd = _layer_fd_check(blk.layers(), lambda s, hh, cc: blk.forward(s, hh, cc)[0], (h, c), rng)
    grad = store.zeros_like()
    _, cache = blk.forward(store, h, c)
    dh, dc = blk.backward(store, grad, cache, up)
    assert rel_err(grad, fd) < 1e-5
    fd_h = central_diff(lambda hh: float(np.sum(up * blk.forward(store, hh.reshape(h.shape), c)[0])), h.ravel())
    assert rel_err(dh.ravel(), fd_h) < 1e-5
    if gated:
        fd_c = central_diff(lambda cc: float(np.sum(up * blk.forward(store, h, cc.reshape(c.shape))[0])), c.ravel())
        assert rel_err(dc.ravel(), fd_c) < 1e-5


@pytest.mark.parametrize("mode", MODES)
def test_network_gradient_matches_finite_differences(mode, rng):
    net = VectorFieldNetwork(small_config(mode), seed=2)
    t, th, x = batch(rng)
    up = rng.standard_normal((4, 2))
    grad = net.backward(t, th, x, up)
    base = net.params.data.copy()

    def f(flat):
        net.params.data[:] = flat
        val = float(np.sum(up * net(t, th, x)))
        net.params.data[:] = base
        return val
    fd = central_diff(f, base)
    assert rel_err(grad, fd, floor=1e-6) < 1e-5


def test_zero_upstream_gives_zero_gradient(rng):
    net = VectorFieldNetwork(small_config("glu"))
    t, th, x = batch(rng)
    assert np.all(net.backward(t, th, x, np.zeros((4, 2))) == 0.0)


@pytest.mark.parametrize("mode", MODES)
def test_jvp_and_divergence_match_finite_differences(mode, rng):
    net = VectorFieldNetwork(small_config(mode), seed=4)
    t, th, x = batch(rng, n=3)
    dirs = rng.standard_normal((2, 3, 2))
    v, dv = net.jvp(t, th, x, dirs)
    np.testing.assert_allclose(v, net(t, th, x), atol=1e-14)
    h = 1e-6
    for k in range(2):
        fd = (net(t, th + h * dirs[k], x) - net(t, th - h * dirs[k], x)) / (2 * h)
        np.testing.assert_allclose(dv[k], fd, atol=1e-8)
    _, div = net.divergence(t, th, x)
    trace = sum((net(t, th + h * e, x)[:, i] - net(t, th - h * e, x)[:, i]) / (2 * h)
                for i, e in enumerate(np.eye(2)))
    np.testing.assert_allclose(div, trace, atol=1e-8)


# ---------------------------------------------------------------- GLU


def test_glu_condition_cases(rng):
    hidden = rng.standard_normal((3, 4))
    ctx = rng.standard_normal((3, 2))
    np.testing.assert_allclose(glu_condition(hidden, ctx, np.zeros((4, 2)), np.zeros(4)), 0.5 * hidden)
    np.testing.assert_allclose(glu_condition(hidden, ctx, np.zeros((4, 2)), np.full(4, 1e3)), hidden)
    w, b = rng.standard_normal((4, 2)), rng.standard_normal(4)
    got = glu_condition(hidden, ctx, w, b)
    for r in range(3):
        for i in range(4):
            z = sum(w[i, j] * ctx[r, j] for j in range(2)) + b[i]
            assert got[r, i] == pytest.approx(hidden[r, i] / (1 + math.exp(-z)), abs=1e-12)
    with pytest.raises(ShapeError):
        glu_condition(hidden, ctx, np.zeros((3, 2)), np.zeros(3))


# ---------------------------------------------------------------- Adam


def test_adam_zero_grad_and_first_step():
    p = np.array([1.0, -2.0])
    new, st = adam_step(p, np.zeros(2), AdamState.zeros(2), 0.1)
    np.testing.assert_array_equal(new, p)
    assert st.step == 1
    new, st = adam_step(np.array([0.5]), np.array([1.0]), AdamState.zeros(1), 0.01)
    assert new[0] == pytest.approx(0.5 - 0.01 / (1 + 1e-8), abs=1e-15)


def test_adam_rejects_nonfinite_and_is_deterministic(rng):
    with pytest.raises(NumericError):
        adam_step(np.zeros(2), np.array([0.0, np.nan]), AdamState.zeros(2), 0.1)
    g = rng.standard_normal((5, 3))
    runs = []
    for _ in range(2):
        p, st = np.ones(3), AdamState.zeros(3)
        for gi in g:
            p, st = adam_step(p, gi, st, 0.05)
        runs.append(p)
    np.testing.assert_array_equal(*runs)


def test_adam_minimizes_quadratic():
    p, st = np.array([3.0, -4.0]), AdamState.zeros(2)
    for _ in range(2000):
        p, st = adam_step(p, 2 * p, st, 0.05)
    assert np.all(np.abs(p) < 1e-3)


# ---------------------------------------------------------------- classifier and checkpoints


def test_classifier_gradient(rng):
    clf = MLPClassifier(3, hidden=(5, 4), activation="tanh", seed=0)
    x = rng.standard_normal((7, 3))
    y = (rng.uniform(size=7) > 0.5).astype(float)
    _, grad = clf.loss_and_grad(x, y)
    base = clf.params.data.copy()

    def f(flat):
        clf.params.data[:] = flat
        val = clf.loss_and_grad(x, y)[0]
        clf.params.data[:] = base
        return val
    assert rel_err(grad, central_diff(f, base), floor=1e-6) < 1e-5


@pytest.mark.parametrize("mode", MODES)
def test_checkpoint_round_trip_is_byte_exact(mode):
    net = VectorFieldNetwork(small_config(mode), seed=9)
    blob = checkpoint_bytes(net, {"task": "demo", "note": "x y"})
    net2, meta = parse_checkpoint(blob)
    assert meta == {"task": "demo", "note": "x y"}
    np.testing.assert_array_equal(net2.params.data, net.params.data)
    assert checkpoint_bytes(net2, meta) == blob


def test_checkpoint_rejects_garbage_and_truncation():
    net = VectorFieldNetwork(small_config("glu"))
    blob = checkpoint_bytes(net)
    with pytest.raises(StorageError):
        parse_checkpoint(b"hello")
    with pytest.raises(StorageError):
        parse_checkpoint(blob[:-8])
