import numpy as np
import pytest

from residiff.data import Normalizer, SequenceDataset
from residiff.diffusion import (
    DiffusionModel,
    TrainConfig,
    TrainingError,
    cosine_schedule,
    diffusion_loss,
    forward_diffuse,
    forward_step,
    load_checkpoint,
    predict_noise,
    sample_normalized,
    save_checkpoint,
    train_baseline_mlp,
    train_diffusion,
    write_loss_csv,
)
from residiff.networks import MLPConfig, NoisePredictorConfig, TemporalUNet

# closed-form cosine schedule at K = 20, s = 0.008, evaluated once with math.cos
BETA_1 = 0.007992721315781437
ALPHA_BAR_10 = 0.49384359044063775
ALPHA_BAR_20 = 6.059644621451176e-06

SMALL = NoisePredictorConfig(horizon=4, widths=(8, 16), kernel_size=3, emb_dim=8, emb_hidden=16, groups=4)


def _identity_normalizer():
    lo = {"zeta": -np.ones(9), "u": -np.ones(3), "h": -np.ones(3)}
    hi = {"zeta": np.ones(9), "u": np.ones(3), "h": np.ones(3)}
    return Normalizer(lo, hi, {"zeta": [], "u": [], "h": []})


def _dataset(h, n, horizon, seed=0):
    rng = np.random.default_rng(seed)
    return SequenceDataset(rng.uniform(-1, 1, (n, horizon, 9)), rng.uniform(-1, 1, (n, horizon, 3)),
                           np.broadcast_to(h, (n, horizon, 3)).copy())


# -- schedule and forward process ------------------------------------------------------

def test_schedule_invariants_and_constants():
    sc = cosine_schedule(20)
    assert sc.K == 20
    assert np.all(sc.beta > 0) and np.all(sc.beta <= 0.999)
    assert np.all((sc.alpha > 0) & (sc.alpha < 1))
    assert np.all(np.diff(sc.alpha_bar) < 0)
    assert sc.alpha_bar[-1] < 0.05
    assert sc.beta[0] == pytest.approx(BETA_1, rel=1e-12)
    assert sc.alpha_bar[9] == pytest.approx(ALPHA_BAR_10, rel=1e-12)
    assert sc.alpha_bar[-1] == pytest.approx(ALPHA_BAR_20, rel=1e-9)
    assert sc.alpha_bar_at(0) == 1.0
    with pytest.raises(ValueError):
        cosine_schedule(0)


def test_forward_diffuse_special_cases():
    sc = cosine_schedule(20)
    rng = np.random.default_rng(0)
    eps = rng.normal(size=(5, 4, 3))
    assert np.allclose(forward_diffuse(np.zeros_like(eps), 7, eps, sc), np.sqrt(1 - sc.alpha_bar[6]) * eps)
    # per-row steps broadcast over the sequence
    h0 = rng.normal(size=(5, 4, 3))
    k = np.array([1, 5, 9, 13, 20])
    out = forward_diffuse(h0, k, eps, sc)
    for i, ki in enumerate(k):
        assert np.allclose(out[i], forward_diffuse(h0[i], ki, eps[i], sc))
    for bad in (0, 21):
        with pytest.raises(ValueError):
            forward_diffuse(h0, bad, eps, sc)
    with pytest.raises(ValueError):
        forward_diffuse(h0, 3, eps[:2], sc)


def test_forward_marginal_monte_carlo():
    sc = cosine_schedule(20)
    n = 100_000
    h0 = np.array([0.7, -0.3, 1.0])
    eps = np.random.default_rng(1).standard_normal((n, 3))
    x = forward_diffuse(np.broadcast_to(h0, (n, 3)), 20, eps, sc)
    tol = 3 * np.sqrt((1 - sc.alpha_bar[-1]) / n)
    assert np.all(np.abs(x.mean(0) - np.sqrt(sc.alpha_bar[-1]) * h0) < tol)


def test_composed_kernels_match_marginal():
    sc = cosine_schedule(20)
    n, k0 = 100_000, 8
    rng = np.random.default_rng(2)
    h0 = np.array([1.0, -0.5, 0.25])
    x = np.broadcast_to(h0, (n, 3)).copy()
    for k in range(1, k0 + 1):
        x = forward_step(x, k, rng.standard_normal((n, 3)), sc)
    ab = sc.alpha_bar[k0 - 1]
    mean_tol = 3 * np.sqrt((1 - ab) / n)
    var_tol = 3 * (1 - ab) * np.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(x.mean(0) - np.sqrt(ab) * h0) < mean_tol)
    assert np.all(np.abs(x.var(0, ddof=1) - (1 - ab)) < var_tol)


# -- network and loss --------------------------------------------------------------------

def test_zero_initialised_output_and_batch_independence():
    net = TemporalUNet(SMALL, dtype=np.float64)
    theta = net.init(0)
    rng = np.random.default_rng(0)
    cond, h, k = rng.normal(size=(6, 12)), rng.normal(size=(6, 4, 3)), rng.integers(1, 21, 6)
    assert np.all(predict_noise(net, theta, cond, h, k) == 0.0)
    theta = theta + 0.05 * rng.normal(size=theta.shape)
    out = predict_noise(net, theta, cond, h, k)
    perm = rng.permutation(6)
    assert np.allclose(predict_noise(net, theta, cond[perm], h[perm], k[perm]), out[perm], atol=1e-12)
    assert out.shape == h.shape
    with pytest.raises(ValueError):
        predict_noise(net, theta, cond[:, :5], h, k)


def test_gradient_matches_central_differences():
    net = TemporalUNet(SMALL, dtype=np.float64)
    rng = np.random.default_rng(4)
    theta = net.init(1) + 0.1 * rng.normal(size=net.n_params)
    sc = cosine_schedule(20)
    cond, h0 = rng.normal(size=(3, 12)), rng.normal(size=(3, 4, 3))
    k, eps = rng.integers(1, 21, 3), rng.normal(size=(3, 4, 3))
    grad = np.zeros_like(theta)
    diffusion_loss(net, theta, cond, h0, k, eps, sc, grad)
    idx = rng.choice(net.n_params, 60, replace=False)
    step = 1e-5
    fd = []
    for i in idx:
        tp, tm = theta.copy(), theta.copy()
        tp[i] += step
        tm[i] -= step
        fd.append((diffusion_loss(net, tp, cond, h0, k, eps, sc) - diffusion_loss(net, tm, cond, h0, k, eps, sc))
                  / (2 * step))
    fd = np.array(fd)
    assert np.linalg.norm(grad[idx] - fd) / np.linalg.norm(fd) < 1e-4


def test_loss_oracle_and_zero_predictor():
    sc = cosine_schedule(20)
    net = TemporalUNet(NoisePredictorConfig(horizon=16), dtype=np.float64)
    theta = net.init(0)  # zero output layer: the predictor returns 0
    rng = np.random.default_rng(3)
    h0, eps = rng.uniform(-1, 1, (256, 16, 3)), rng.standard_normal((256, 16, 3))
    loss = diffusion_loss(net, theta, rng.normal(size=(256, 12)), h0, rng.integers(1, 21, 256), eps, sc)
    assert loss == pytest.approx(48.0, rel=0.05)
    # a perfect predictor has zero loss; with h0 = eps = 0 the zero predictor is perfect
    z = np.zeros((4, 16, 3))
    assert diffusion_loss(net, theta, np.zeros((4, 12)), z, np.full(4, 3), z, sc) == 0.0


def test_overfit_single_record():
    ds = _dataset(np.array([0.5, -0.3, 0.8]), 1, 16)
    cfg = TrainConfig(lr=2e-3, batch_size=1, steps=2000, log_every=0, seed=0)
    model = train_diffusion(ds, _identity_normalizer(), cfg, NoisePredictorConfig(horizon=16))
    first, last = np.mean(model.losses[:50]), np.mean(model.losses[-200:])
    assert last < 0.1 * first


def test_sampling_with_zero_predictor_is_rescaled_start():
    net = TemporalUNet(SMALL, dtype=np.float64)
    sc = cosine_schedule(20)
    h_init = np.random.default_rng(0).standard_normal((2, 4, 3))
    out = sample_normalized(net, net.init(0), sc, np.zeros((2, 12)), np.random.default_rng(1),
                            stochastic=False, h_init=h_init, clip=None)
    assert np.allclose(out, h_init / np.sqrt(sc.alpha_bar[-1]), rtol=1e-10)


def test_train_to_constant_and_determinism():
    c = np.array([0.5, -0.25, 0.1])
    ds = _dataset(c, 64, 4, seed=1)
    cfg = TrainConfig(lr=2e-3, batch_size=32, steps=1500, log_every=0, seed=2)
    norm = _identity_normalizer()
    m1 = train_diffusion(ds, norm, cfg, SMALL)
    m2 = train_diffusion(ds, norm, cfg, SMALL)
    assert np.array_equal(m1.theta, m2.theta)
    s = m1.sample(np.zeros(9), np.zeros(3), np.random.default_rng(5), n=200)
    assert np.all(np.abs(s.mean(axis=(0, 1)) - c) < 0.05)
    s2 = m1.sample(np.zeros(9), np.zeros(3), np.random.default_rng(5), n=200)
    assert np.array_equal(s, s2)


def test_ema_and_resume(tmp_path):
    ds = _dataset(np.array([0.2, 0.1, -0.4]), 16, 4)
    norm = _identity_normalizer()
    full = train_diffusion(ds, norm, TrainConfig(lr=1e-3, batch_size=8, steps=40, log_every=0, ema_decay=0.9),
                           SMALL)
    half = train_diffusion(ds, norm, TrainConfig(lr=1e-3, batch_size=8, steps=20, log_every=0, ema_decay=0.9),
                           SMALL)
    path = tmp_path / "half.npz"
    save_checkpoint(path, half)
    back = load_checkpoint(path)
    resumed = train_diffusion(ds, norm, TrainConfig(lr=1e-3, batch_size=8, steps=40, log_every=0, ema_decay=0.9),
                              SMALL, resume=back)
    assert np.array_equal(resumed.theta, full.theta)
    assert resumed.losses == full.losses
    assert not np.array_equal(full.theta, full.resume_state["theta"])  # saved weights are the average


def test_nan_loss_aborts():
    ds = _dataset(np.array([np.nan, 0.0, 0.0]), 4, 4)
    with pytest.raises(TrainingError, match="non-finite"):
        train_diffusion(ds, _identity_normalizer(), TrainConfig(steps=3, batch_size=2, log_every=0), SMALL)


def test_train_config_validation():
    for kw in (dict(lr=0), dict(batch_size=0), dict(steps=-1), dict(ema_decay=1.0), dict(lr_floor=2.0)):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


def test_checkpoint_round_trip(tmp_path):
    ds = _dataset(np.array([0.1, 0.2, 0.3]), 8, 4)
    model = train_diffusion(ds, _identity_normalizer(), TrainConfig(steps=5, batch_size=4, log_every=0), SMALL)
    path = tmp_path / "m.npz"
    save_checkpoint(path, model)
    back = load_checkpoint(path)
    assert isinstance(back, DiffusionModel)
    assert np.array_equal(back.theta, model.theta) and back.sched.K == 20
    a = model.sample(np.zeros(9), np.zeros(3), np.random.default_rng(0))
    b = back.sample(np.zeros(9), np.zeros(3), np.random.default_rng(0))
    assert np.array_equal(a, b)
    write_loss_csv(tmp_path / "loss.csv", model.losses)
    assert len((tmp_path / "loss.csv").read_text().splitlines()) == 6


def test_checkpoint_schema_check(tmp_path):
    path = tmp_path / "x.npz"
    np.savez(path, header=np.array('{"schema": "nope"}'), theta=np.zeros(2), losses=np.zeros(0))
    with pytest.raises(ValueError, match="schema"):
        load_checkpoint(path)


# -- baseline regressor ------------------------------------------------------------------

def test_mlp_constant_target():
    c = np.array([0.4, -0.6, 0.2])
    ds = _dataset(c, 128, 1, seed=3)
    mlp = train_baseline_mlp(ds, _identity_normalizer(), TrainConfig(lr=3e-3, batch_size=64, steps=2000,
                                                                      log_every=0, lr_floor=1e-3))
    pred = mlp.predict(ds.zeta[:, 0], ds.u[:, 0])
    assert np.all(np.abs(pred - c) <= 0.01 * np.abs(c))


def test_mlp_linear_teacher():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 9)) * 0.1
    zeta = rng.uniform(-1, 1, (1024, 1, 9))
    h = np.einsum("ij,nkj->nki", A, zeta)
    ds = SequenceDataset(zeta, rng.uniform(-1, 1, (1024, 1, 3)), h)
    mlp = train_baseline_mlp(ds, _identity_normalizer(), TrainConfig(lr=1e-3, batch_size=128, steps=1500,
                                                                      log_every=0))
    zt = rng.uniform(-1, 1, (500, 9))
    mse = np.mean((mlp.predict(zt, np.zeros((500, 3))) - zt @ A.T) ** 2)
    assert mse < 1e-3


def test_mlp_collapses_on_bimodal_data():
    rng = np.random.default_rng(1)
    n = 2048
    modes = np.where(rng.random(n) < 0.5, -0.8, 0.8)
    h = np.repeat(modes[:, None, None], 3, axis=2)
    ds = SequenceDataset(rng.uniform(-1, 1, (n, 1, 9)), rng.uniform(-1, 1, (n, 1, 3)), h)
    mlp = train_baseline_mlp(ds, _identity_normalizer(), TrainConfig(lr=1e-3, batch_size=256, steps=600,
                                                                      log_every=0))
    pred = mlp.predict(rng.uniform(-1, 1, (100, 9)), rng.uniform(-1, 1, (100, 3)))
    # near the conditional mean 0, never close to either mode at +-0.8
    assert np.all(np.abs(pred).mean(axis=0) < 0.25)
    assert np.all(np.abs(pred) < 0.6)
