import numpy as np
import pytest
from scipy import stats

from conftest import rel_err
from fmpe.errors import ConfigError, NumericError
from fmpe.netcore import ResidualMLPConfig, VectorFieldNetwork
from fmpe.paths import OTPath, VPPath, vp_conditional_score
from fmpe.tasks import Task, bimodal_1d_target, gaussian_linear
from fmpe.training import (
    TimePrior,
    TrainConfig,
    _gaussian_field_grads,
    fit_gaussian_flow,
    fmpe_loss_batch,
    generate_dataset,
    load_trained,
    sample_time_prior,
    save_trained,
    score_loss_batch,
    split_indices,
    train,
)


# ---------------------------------------------------------------- time prior


def test_time_prior_examples():
    u = np.linspace(0, 1, 11)
    np.testing.assert_array_equal(sample_time_prior(TimePrior(0.0), u), u)
    assert sample_time_prior(TimePrior(1.0), 0.25) == pytest.approx(0.5)
    assert TimePrior(1.0).density(0.3) == pytest.approx(0.6)
    with pytest.raises(ValueError):
        sample_time_prior(TimePrior(1.0), 1.5)
    with pytest.raises(ConfigError):
        TimePrior(-1.0)


@pytest.mark.parametrize("alpha", [0.0, 1.0, 4.0])
def test_time_prior_histogram(alpha):
    t = TimePrior(alpha).sample(np.random.default_rng(11), 100_000)
    edges = np.linspace(0, 1, 21)
    counts = np.histogram(t, edges)[0]
    expected = t.size * np.diff(edges ** (1 + alpha))
    assert stats.chisquare(counts, expected).pvalue > 0.01


def test_time_prior_mean_alpha4():
    t = TimePrior(4.0).sample(np.random.default_rng(1), 100_000)
    sd = np.sqrt(5 / 7 - (5 / 6) ** 2)
    assert abs(t.mean() - 5 / 6) < 3 * sd / np.sqrt(t.size)


# ---------------------------------------------------------------- datasets


def test_dataset_split_and_determinism():
    task = gaussian_linear(2)
    ds = generate_dataset(task, 100, seed=4)
    assert len(ds.train_idx) == 95 and len(ds.val_idx) == 5
    assert set(ds.train_idx).isdisjoint(ds.val_idx)
    assert sorted(np.concatenate([ds.train_idx, ds.val_idx])) == list(range(100))
    ds2 = generate_dataset(task, 100, seed=4)
    np.testing.assert_array_equal(ds.theta, ds2.theta)
    np.testing.assert_array_equal(ds.val_idx, ds2.val_idx)
    with pytest.raises(ConfigError):
        generate_dataset(task, 19, seed=0)


def test_dataset_noise_is_centred():
    ds = generate_dataset(gaussian_linear(2), 20_000, seed=0)
    r = ds.x - ds.theta
    assert np.all(np.abs(r.mean(axis=0)) < 4 * np.sqrt(0.1 / r.shape[0]))


def test_split_sizes_do_not_depend_on_order():
    a = split_indices(200, 0.05, np.random.default_rng(0))
    b = split_indices(200, 0.05, np.random.default_rng(99))
    assert (len(a[0]), len(a[1])) == (len(b[0]), len(b[1])) == (190, 10)


def test_simulator_failure_reports_row():
    def bad_sim(theta, rng):
        x = theta.copy()
        x[3] = np.nan
        return x
    task = Task("bad", 1, 1, lambda rng, n: rng.standard_normal((n, 1)), bad_sim, None)
    with pytest.raises(NumericError) as err:
        generate_dataset(task, 50, seed=0)
    assert err.value.index == 3


# ---------------------------------------------------------------- losses


class OracleNet:
    """Outputs the regression target exactly, given the theta1 it was built with."""

    def __init__(self, path, theta1, t):
        self.path, self.theta1, self.t = path, theta1, t

    def forward_with_cache(self, t, theta_t, x):
        return self.path.regression_target(t, theta_t, self.theta1), None

    def backward_from_cache(self, cache, upstream):
        return np.zeros(1)


@pytest.mark.parametrize("path", [OTPath(), VPPath()], ids=["ot", "vp"])
def test_perfect_network_has_zero_loss(path, rng):
    theta1 = rng.standard_normal((16, 2))
    x = rng.standard_normal((16, 3))
    t = rng.uniform(0, 0.99, 16)
    net = OracleNet(path, theta1, t)
    loss, _ = fmpe_loss_batch(net, path, TimePrior(), theta1, x, rng, t=t)
    assert loss == 0.0


def _small_net(path_seed=0):
    return VectorFieldNetwork(ResidualMLPConfig(2, 2, hidden_widths=(8, 8), context_widths=(4,)), seed=path_seed)


def test_fmpe_loss_single_row_hand_computed():
    net = _small_net()
    path = OTPath(1e-4)
    theta1 = np.array([[0.4, -0.7]])
    x = np.array([[0.1, 0.2]])
    t, noise = 0.37, np.array([[0.5, -1.1]])
    loss, _ = fmpe_loss_batch(net, path, TimePrior(), theta1, x, None, t=np.array([t]), noise=noise)
    sig = 1 - (1 - 1e-4) * t
    theta_t = [t * theta1[0, i] + sig * noise[0, i] for i in range(2)]
    v = net(np.array([t]), np.array([theta_t]), x)[0]
    total = 0.0
    for i in range(2):
        u = (theta1[0, i] - (1 - 1e-4) * theta_t[i]) / sig
        total += (v[i] - u) ** 2
    assert loss == pytest.approx(total, rel=1e-12)


def test_score_loss_single_row_hand_computed():
    net = _small_net()
    path = VPPath()
    theta1 = np.array([[0.4, -0.7]])
    x = np.array([[0.1, 0.2]])
    t, noise = np.array([0.6]), np.array([[0.5, -1.1]])
    loss, _ = score_loss_batch(net, path, TimePrior(), theta1, x, None, t=t, noise=noise)
    m = path.mean_scale(0.6)
    sd = np.sqrt(1 - m * m)
    theta_t = m * theta1 + sd * noise
    v = net(t, theta_t, x)
    # score of N(m theta1, sd^2) at theta_t is -noise / sd
    assert loss == pytest.approx(np.sum((v + noise / sd) ** 2), rel=1e-10)
    np.testing.assert_allclose(vp_conditional_score(path, 0.6, theta_t, theta1), -noise / sd, rtol=1e-10)
    with pytest.raises(TypeError):
        score_loss_batch(net, OTPath(), TimePrior(), theta1, x, None)


@pytest.mark.parametrize("path", [OTPath(), VPPath()], ids=["ot", "vp"])
def test_loss_gradient_matches_finite_differences(path):
    rng = np.random.default_rng(3)
    net = _small_net(1)
    theta1 = rng.standard_normal((6, 2))
    x = rng.standard_normal((6, 2))
    t = rng.uniform(0.05, 0.95, 6)
    noise = rng.standard_normal((6, 2))
    fn = fmpe_loss_batch if isinstance(path, OTPath) else score_loss_batch
    _, grad = fn(net, path, TimePrior(), theta1, x, None, t=t, noise=noise)
    p = net.params.data
    h = 1e-5
    # entries far below the gradient's scale are dominated by FD roundoff
    floor = 1e-3 * np.max(np.abs(grad))
    idx = np.random.default_rng(0).choice(p.size, 40, replace=False)
    for i in idx:
        old = p[i]
        p[i] = old + h
        up = fn(net, path, TimePrior(), theta1, x, None, t=t, noise=noise)[0]
        p[i] = old - h
        dn = fn(net, path, TimePrior(), theta1, x, None, t=t, noise=noise)[0]
        p[i] = old
        fd = (up - dn) / (2 * h)
        assert rel_err(grad[i], fd, floor=floor) < 1e-4


def test_loss_is_nonnegative_and_rejects_empty(rng):
    net = _small_net()
    for _ in range(5):
        loss, _ = fmpe_loss_batch(net, OTPath(), TimePrior(1.0), rng.standard_normal((8, 2)),
                                  rng.standard_normal((8, 2)), rng)
        assert loss >= 0
    with pytest.raises(ValueError):
        fmpe_loss_batch(net, OTPath(), TimePrior(), np.empty((0, 2)), np.empty((0, 2)), rng)


def test_nonfinite_loss_reports_row(rng):
    net = _small_net()
    theta1 = rng.standard_normal((4, 2))
    theta1[2, 0] = np.inf
    with pytest.raises(NumericError) as err:
        fmpe_loss_batch(net, OTPath(), TimePrior(), theta1, rng.standard_normal((4, 2)), rng)
    assert err.value.index == 2


# ---------------------------------------------------------------- training loop


def _identity_task():
    return Task("identity_1d", 1, 1, lambda rng, n: rng.standard_normal((n, 1)),
                lambda theta, rng: theta.copy(), None)


def test_degenerate_task_posterior_concentrates():
    cfg = TrainConfig(batch_size=128, learning_rate=1e-3, epochs=30, seed=0)
    net_cfg = ResidualMLPConfig(1, 1, hidden_widths=(32, 32), conditioning_mode="concat")
    res = train(_identity_task(), net_cfg, cfg, n_simulations=4000)
    s = res.posterior.sample(np.array([0.7]), 500, seed=0)
    assert abs(s.mean() - 0.7) < 0.1
    assert res.best_val_loss <= min(res.log.val_losses)
    assert res.best_val_loss == res.log.val_losses[res.best_epoch - 1]


def test_training_is_deterministic(tmp_path):
    cfg = TrainConfig(batch_size=64, epochs=3, seed=7)
    net_cfg = ResidualMLPConfig(2, 2, hidden_widths=(16, 16), context_widths=(8,))
    a = train(gaussian_linear(2), net_cfg, cfg, n_simulations=600)
    b = train(gaussian_linear(2), net_cfg, cfg, n_simulations=600)
    pa = save_trained(tmp_path / "a.fmpe", a, "gaussian_linear_2d", cfg)
    pb = save_trained(tmp_path / "b.fmpe", b, "gaussian_linear_2d", cfg)
    assert pa.read_bytes() == pb.read_bytes()
    post, _, meta = load_trained(pa)
    assert meta["task"] == "gaussian_linear_2d"
    th = np.array([[0.1, 0.2]])
    x = np.array([0.3, 0.3])
    np.testing.assert_allclose(post.log_prob(th, x), a.posterior.log_prob(th, x), rtol=1e-12)


def test_vp_training_runs():
    cfg = TrainConfig(batch_size=64, epochs=2, path="vp", seed=1)
    net_cfg = ResidualMLPConfig(2, 2, hidden_widths=(16,), context_widths=(8,))
    res = train(gaussian_linear(2), net_cfg, cfg, n_simulations=400)
    assert np.all(np.isfinite(res.posterior.sample(np.zeros(2), 20, seed=0)))


def test_train_config_validation_and_round_trip():
    cfg = TrainConfig(time_prior_alpha=1.0, path="vp", epochs=7)
    assert TrainConfig.from_dict({k: str(v) for k, v in cfg.to_dict().items()}) == cfg
    for bad in (dict(validation_fraction=1.0), dict(path="sde"), dict(time_prior_alpha=-2.0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    with pytest.raises(ConfigError):
        train(gaussian_linear(2), ResidualMLPConfig(2, 2), TrainConfig(batch_size=500), n_simulations=100)


# ---------------------------------------------------------------- Gaussian flow fit


def test_gaussian_field_grads_match_finite_differences():
    mu, s, smin = 0.3, 1.7, 1e-4
    t = np.array([0.0, 0.2, 0.7, 1.0])
    theta = np.array([0.5, -1.0, 2.0, 0.1])
    _, dmu, ds = _gaussian_field_grads(mu, s, smin, t, theta)
    h = 1e-6
    f = _gaussian_field_grads
    np.testing.assert_allclose(dmu, (f(mu + h, s, smin, t, theta)[0] - f(mu - h, s, smin, t, theta)[0]) / (2 * h),
                               rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(ds, (f(mu, s + h, smin, t, theta)[0] - f(mu, s - h, smin, t, theta)[0]) / (2 * h),
                               rtol=1e-6, atol=1e-9)


def test_fit_gaussian_target():
    target = np.random.default_rng(0).normal(3.0, 1.0, 20_000)
    f = fit_gaussian_flow(target, steps=1500)
    assert abs(f.mu_hat - 3.0) < 0.1


def test_fit_bimodal_target_covers_both_modes():
    m = 2.0
    target = bimodal_1d_target(m, 0.5)(np.random.default_rng(0), 20_000)
    f = fit_gaussian_flow(target, steps=1500)
    assert abs(f.mu_hat) < 0.1
    assert f.sigma_hat >= m


def test_fit_needs_enough_samples():
    with pytest.raises(ConfigError):
        fit_gaussian_flow(np.zeros(10))
