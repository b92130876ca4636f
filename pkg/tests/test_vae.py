import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from scvae import autodiff as ad
from scvae.models import FrozenModel, build, build_scvae
from scvae.vae import (
    GaussianParams,
    TrainConfig,
    TrainingError,
    anomaly_score,
    elbo,
    encode,
    gaussian_log_likelihood,
    kl_divergence,
    reparameterize,
    score_from_loglik,
    score_windows,
    split_gaussian,
    train,
    window_noise,
)

LOG2PI = math.log(2 * math.pi)
finite = st.floats(-5, 5, allow_nan=False)


def tiny(kind="SCVAE", tw=4, f=3, z=2, seed=0):
    return build(kind, tw, f, latent_dim=z, seed=seed)


def test_train_config_defaults():
    c = TrainConfig()
    assert (c.batch_size, c.learning_rate, c.latent_dim) == (64, 2e-4, 100)
    assert (c.mc_samples_train, c.mc_samples_score, c.epochs) == (1, 16, 50)
    with pytest.raises(ValueError):
        TrainConfig(mc_samples_score=0)


def test_gaussian_params_shape_check():
    with pytest.raises(ad.ShapeError):
        GaussianParams(np.zeros(2), np.zeros(3))


def test_split_clamps_log_variance():
    q = split_gaussian(np.array([[0.0, 1.0, -50.0, 50.0]]))
    np.testing.assert_array_equal(q.log_variance, [[-10.0, 10.0]])


# --- encode ---------------------------------------------------------------------


def test_encode_length_and_determinism(rng):
    m = build_scvae(4, 6, latent_dim=100)
    x = rng.standard_normal((4, 6))
    a, b = encode(m, x), encode(m, x)
    assert a.mean.shape == (100,) and a.log_variance.shape == (100,)
    np.testing.assert_array_equal(a.mean, b.mean)
    np.testing.assert_array_equal(a.log_variance, b.log_variance)


@pytest.mark.parametrize("kind", ["CNN_VAE", "SCVAE"])
def test_encode_zero_input_finite(kind):
    q = encode(build(kind, 8, 6), np.zeros((8, 6)))
    assert np.all(np.isfinite(q.mean)) and np.all(np.isfinite(q.log_variance))


def test_encode_rejects_shape():
    with pytest.raises(ad.ShapeError):
        encode(tiny(), np.zeros((5, 3)))


# --- reparameterize ---------------------------------------------------------------


def test_reparameterize_identities(rng):
    q = GaussianParams(rng.standard_normal(5), rng.standard_normal(5))
    np.testing.assert_array_equal(reparameterize(q, np.zeros(5)), q.mean)
    unit = GaussianParams(q.mean, np.zeros(5))
    n = rng.standard_normal(5)
    np.testing.assert_allclose(reparameterize(unit, n), q.mean + n)
    with pytest.raises(ad.ShapeError):
        reparameterize(q, np.zeros(4))


def test_reparameterize_sample_variance(rng):
    lv = np.array([-1.0, 0.0, 1.5])
    q = GaussianParams(np.zeros((100_000, 3)), np.tile(lv, (100_000, 1)))
    z = reparameterize(q, rng.standard_normal((100_000, 3)))
    np.testing.assert_allclose(z.var(axis=0), np.exp(lv), rtol=0.02)


# --- log likelihood / KL ---------------------------------------------------------


def test_loglik_closed_forms():
    d = 7
    p = GaussianParams(np.zeros(d), np.zeros(d))
    assert gaussian_log_likelihood(np.zeros(d), p) == pytest.approx(-d / 2 * LOG2PI, abs=1e-12)
    lv = np.log(np.full(d, 2.5))
    q = GaussianParams(np.zeros(d), lv)
    x = np.zeros(d)
    x[3] = math.sqrt(2.5)
    assert gaussian_log_likelihood(np.zeros(d), q) - gaussian_log_likelihood(x, q) == pytest.approx(0.5)


@given(
    x=arrays(np.float64, 4, elements=finite),
    m=arrays(np.float64, 4, elements=finite),
    lv=arrays(np.float64, 4, elements=st.floats(-3, 3)),
    t=st.floats(1.0, 3.0),
)
def test_loglik_monotone_in_distance(x, m, lv, t):
    p = GaussianParams(m, lv)
    far = m + t * (x - m)
    assert gaussian_log_likelihood(far, p) <= gaussian_log_likelihood(x, p) + 1e-9


def test_kl_closed_forms():
    assert kl_divergence(GaussianParams(np.zeros(3), np.zeros(3))) == 0.0
    assert kl_divergence(GaussianParams(np.ones(1), np.zeros(1))) == pytest.approx(0.5)


@given(m=arrays(np.float64, 5, elements=finite), lv=arrays(np.float64, 5, elements=st.floats(-10, 10)))
def test_kl_nonnegative(m, lv):
    assert kl_divergence(GaussianParams(m, lv)) >= 0.0


def test_graph_and_array_terms_agree(rng):
    x, m, lv = rng.standard_normal((3, 2, 5))
    node = ad.gaussian_log_likelihood(x, m, lv).value
    assert node.sum() == pytest.approx(gaussian_log_likelihood(x, GaussianParams(m, lv)))
    assert ad.kl_divergence(m, lv).value.sum() == pytest.approx(kl_divergence(GaussianParams(m, lv)))


# --- ELBO -------------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["CNN_VAE", "SCVAE"])
def test_elbo_decomposition_with_zero_noise(kind, rng):
    m = tiny(kind, seed=2)
    x = rng.standard_normal((3, 4, 3))
    loss = elbo(m, x, noise=np.zeros((1, 3, 2)), train=False)
    frozen = FrozenModel.from_model(m, np.float64)
    q = split_gaussian(frozen.encode(x))
    p = split_gaussian(frozen.decode(q.mean))
    per_row = [
        gaussian_log_likelihood(x[i].ravel(), GaussianParams(p.mean[i], p.log_variance[i]))
        - kl_divergence(GaussianParams(q.mean[i], q.log_variance[i]))
        for i in range(3)
    ]
    assert loss == pytest.approx(-np.mean(per_row), rel=1e-12)


def test_elbo_kl_shift_is_additive(rng):
    """With the decoder cut off from z, shifting the encoder mean changes the loss by the KL change."""
    m = tiny("SCVAE", seed=5)
    m.params["decoder.0.squeeze.kernel"][:] = 0.0
    x = rng.standard_normal((4, 4, 3))
    noise = rng.standard_normal((1, 4, 2))
    base = elbo(m, x, noise=noise)
    q0 = encode(m, x)
    shifted = m.copy()
    shifted.params["encoder.1.bias"][:2] += 1.5
    q1 = encode(shifted, x)
    dkl = np.mean([kl_divergence(GaussianParams(q1.mean[i], q1.log_variance[i]))
                   - kl_divergence(GaussianParams(q0.mean[i], q0.log_variance[i])) for i in range(4)])
    assert elbo(shifted, x, noise=noise) - base == pytest.approx(dkl, rel=1e-10)


def test_elbo_rejects_empty():
    with pytest.raises(ad.ShapeError):
        elbo(tiny(), np.zeros((0, 4, 3)))


# --- training ----------------------------------------------------------------------


def test_loss_decreases_on_identical_windows(rng):
    w = np.tile(rng.standard_normal((1, 4, 3)), (32, 1, 1))
    m = tiny("SCVAE", seed=1)
    res = train(m, w, TrainConfig(batch_size=8, learning_rate=2e-3, epochs=50, latent_dim=2, seed=0))
    assert len(res.history) == 50
    assert res.history[-1] < res.history[0]
    assert np.mean(res.history[-5:]) < np.mean(res.history[:5])


@pytest.mark.parametrize("kind", ["CNN_VAE", "SCVAE"])
def test_training_deterministic(kind, rng):
    w = rng.standard_normal((20, 4, 3))
    cfg = TrainConfig(batch_size=8, epochs=2, latent_dim=2, seed=3)
    a = train(tiny(kind), w, cfg).model
    b = train(tiny(kind), w, cfg).model
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    assert all(a.bn[k].running_mean.tobytes() == b.bn[k].running_mean.tobytes() for k in a.bn)


def test_training_updates_running_stats(rng):
    w = rng.standard_normal((20, 4, 3)) * 3 + 1
    m = tiny()
    before = {k: s.running_mean.copy() for k, s in m.bn.items()}
    train(m, w, TrainConfig(batch_size=8, epochs=1, latent_dim=2))
    assert any(not np.array_equal(before[k], s.running_mean) for k, s in m.bn.items())


def test_trailing_singleton_batch_is_merged(rng):
    # 17 windows with batch 8 would leave a batch of one, which batch norm cannot train on
    train(tiny(), rng.standard_normal((17, 4, 3)), TrainConfig(batch_size=8, epochs=1, latent_dim=2))


def test_non_finite_loss_names_batch(rng):
    w = rng.standard_normal((16, 4, 3))
    w[5, 0, 0] = np.nan
    with pytest.raises(TrainingError) as info:
        train(tiny(), w, TrainConfig(batch_size=4, epochs=1, latent_dim=2))
    assert info.value.diagnostics["epoch"] == 0
    assert "batch" in info.value.diagnostics and "batch" in str(info.value)


def test_train_rejects_mismatched_windows(rng):
    with pytest.raises(ad.ShapeError):
        train(tiny(), rng.standard_normal((8, 5, 3)), TrainConfig(batch_size=4, epochs=1, latent_dim=2))


# --- scoring -----------------------------------------------------------------------


def perfect_decoder(model, x):
    """Make the decoder emit mean == x and log-variance 0 whatever z is."""
    d = x.size
    name = [k for k in model.params if k.startswith("decoder") and k.endswith("weights")][0]
    model.params[name][:] = 0.0
    bias = name.replace("weights", "bias")
    model.params[bias][:] = np.concatenate([x.ravel(), np.zeros(d)])
    return model


def test_perfect_reconstruction_score_closed_form(rng):
    x = rng.standard_normal((4, 3))
    m = perfect_decoder(tiny(), x)
    s = anomaly_score(m, x, n_samples=1, noise=np.zeros((1, 2)), dtype=np.float64)
    assert s == pytest.approx(12 / 2 * LOG2PI, rel=1e-12)


def test_single_sample_is_negative_loglik(rng):
    m = tiny(seed=4)
    x = rng.standard_normal((4, 3))
    n = rng.standard_normal((1, 2))
    frozen = FrozenModel.from_model(m, np.float64)
    q = split_gaussian(frozen.encode(x[None]))
    z = q.mean + np.exp(0.5 * q.log_variance) * n
    p = split_gaussian(frozen.decode(z))
    expected = -gaussian_log_likelihood(x.ravel(), GaussianParams(p.mean[0], p.log_variance[0]))
    assert anomaly_score(m, x, n_samples=1, noise=n, dtype=np.float64) == pytest.approx(expected, rel=1e-12)


@given(ll=arrays(np.float64, (6, 5), elements=st.floats(-8, 2)))
def test_log_mean_exp_ranks_like_one_minus_density(ll):
    ours = score_from_loglik(ll)
    literal = 1.0 - np.exp(ll).mean(axis=1)
    for i in range(6):
        for j in range(6):
            # the surrogate is a strictly increasing transform of 1 - E[p]
            if literal[i] < literal[j] - 1e-12:
                assert ours[i] < ours[j]


def test_score_monotone_in_expected_density():
    a = score_from_loglik(np.array([[-1.0, -2.0]]))
    b = score_from_loglik(np.array([[-3.0, -2.5]]))
    assert a[0] < b[0]


def test_score_batching_and_index_streams(rng):
    m = tiny(seed=6)
    w = rng.standard_normal((10, 4, 3))
    full = score_windows(m, w, n_samples=4, seed=9, dtype=np.float64)
    one_by_one = score_windows(m, w, n_samples=4, seed=9, dtype=np.float64, batch_size=1)
    np.testing.assert_allclose(full, one_by_one, rtol=1e-12)
    assert anomaly_score(m, w[7], n_samples=4, seed=9, index=7, dtype=np.float64) == pytest.approx(full[7], rel=1e-12)
    np.testing.assert_array_equal(window_noise(9, 7, 4, 2), window_noise(9, 7, 4, 2))
    assert not np.array_equal(window_noise(9, 7, 4, 2), window_noise(9, 8, 4, 2))


def test_float32_scores_close_to_float64(rng):
    m = tiny(seed=6)
    w = rng.standard_normal((10, 4, 3))
    s32 = score_windows(m, w, n_samples=4)
    s64 = score_windows(m, w, n_samples=4, dtype=np.float64)
    np.testing.assert_allclose(s32, s64, rtol=1e-4)
