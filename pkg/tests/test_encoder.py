import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from probes import (ENCODER_LATENT_EXPECTED, ENCODER_OBS_EXPECTED, SAMPLER_EXPECTED,
                    encoder_latent_mask, encoder_observation_mask, expected_mask,
                    sampler_noise_mask)
from rvae import autodiff as ad
from rvae.encoder import (EncoderParams, PosteriorParams, encode_step, features, kl_tensor,
                          kl_to_prior, posterior, sample_posterior)
from rvae.gradcheck import LAYER_TOL, check_posterior_recursion, compare
from rvae.params import VAR_FLOOR
from rvae.prior import LatentSequence

VARIANTS = ("ffnn", "rnn", "brnn")


def _setup(variant, seed=0, L=3, F=8, H=5):
    rng = np.random.default_rng(seed)
    return EncoderParams(variant, L, F, H, rng), rng


def test_features_monotone_and_zero_at_silence():
    p = np.array([0.0, 1e-12, 1e-6, 1.0])
    f = features(p)
    assert f[0] == 0.0
    assert np.all(np.diff(f) > 0)


def test_ffnn_identical_frames_identical_moments():
    enc, rng = _setup("ffnn")
    power = rng.gamma(1.0, 1e-3, size=(5, 8))
    power[4] = power[1]
    m1, v1 = encode_step(enc, None, power, 1)
    m4, v4 = encode_step(enc, None, power, 4)
    np.testing.assert_array_equal(m1, m4)
    np.testing.assert_array_equal(v1, v4)


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("seed", range(10))
def test_observation_dependency_mask(backend, variant, seed):
    mask = encoder_observation_mask(variant, seed)
    np.testing.assert_array_equal(mask, expected_mask(ENCODER_OBS_EXPECTED[variant]))


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("seed", range(10))
def test_latent_dependency_mask(backend, variant, seed):
    mask = encoder_latent_mask(variant, seed)
    np.testing.assert_array_equal(mask, expected_mask(ENCODER_LATENT_EXPECTED[variant]))


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("seed", range(5))
def test_sampler_noise_dependency_mask(backend, variant, seed):
    mask = sampler_noise_mask(variant, seed)
    np.testing.assert_array_equal(mask, expected_mask(SAMPLER_EXPECTED[variant]))


@pytest.mark.parametrize("variant", VARIANTS)
def test_fused_sampler_matches_teacher_forced_steps(backend, variant):
    enc, rng = _setup(variant, 3)
    power = rng.gamma(1.0, 1e-3, size=(7, 8))
    eps = rng.standard_normal((7, 1, 3))
    z, mu, var = (t.data[:, 0] for t in posterior(enc, power[:, None, :], eps))
    for n in range(7):
        m, v = encode_step(enc, z[:n], power, n)
        np.testing.assert_allclose(m, mu[n], rtol=0, atol=1e-12)
        np.testing.assert_allclose(v, var[n], rtol=1e-12, atol=0)
    np.testing.assert_allclose(z, mu + np.sqrt(var) * eps[:, 0], rtol=0, atol=1e-12)


def test_encode_step_index_errors():
    enc, rng = _setup("rnn")
    power = rng.gamma(1.0, 1e-3, size=(4, 8))
    with pytest.raises(IndexError):
        encode_step(enc, np.zeros((4, 3)), power, 4)
    with pytest.raises(ValueError):
        encode_step(enc, np.zeros((1, 3)), power, 2)


@pytest.mark.parametrize("variant", VARIANTS)
def test_vanishing_variance_gives_mean(variant):
    enc, rng = _setup(variant, 4)
    enc["logv.b"].data[:] = -200.0
    power = rng.gamma(1.0, 1e-3, size=(5, 8))
    z, post = sample_posterior(enc, power, rng)
    assert np.all(post.var == VAR_FLOOR)
    np.testing.assert_allclose(z.z, post.mu, rtol=0, atol=1e-4)


@pytest.mark.parametrize("variant", VARIANTS)
def test_sample_posterior_reproducible(variant):
    enc, rng = _setup(variant, 5)
    power = rng.gamma(1.0, 1e-3, size=(5, 8))
    a, pa = sample_posterior(enc, power, np.random.default_rng(1))
    b, pb = sample_posterior(enc, power, np.random.default_rng(1))
    assert isinstance(a, LatentSequence) and isinstance(pa, PosteriorParams)
    np.testing.assert_array_equal(a.z, b.z)
    np.testing.assert_array_equal(pa.var, pb.var)


@pytest.mark.parametrize("variant", VARIANTS)
def test_first_frame_monte_carlo(variant):
    enc, rng = _setup(variant, 6)
    B = 100_000
    power = np.broadcast_to(rng.gamma(1.0, 1e-3, size=(2, 1, 8)), (2, B, 8)).copy()
    z, mu, var = posterior(enc, power, rng.standard_normal((2, B, 3)))
    z0 = z.data[0]
    mu0, v0 = mu.data[0, 0], var.data[0, 0]
    se_mean = np.sqrt(v0 / B)
    assert np.all(np.abs(z0.mean(axis=0) - mu0) < 4 * se_mean)
    se_var = v0 * np.sqrt(2.0 / (B - 1))
    assert np.all(np.abs(z0.var(axis=0, ddof=1) - v0) < 4 * se_var)


@pytest.mark.parametrize("variant", ["rnn", "brnn"])
def test_conditional_given_frozen_past(backend, variant):
    enc, rng = _setup(variant, 7)
    B, n = 100_000, 3
    power = np.broadcast_to(rng.gamma(1.0, 1e-3, size=(5, 1, 8)), (5, B, 8)).copy()
    eps = np.empty((5, B, 3))
    eps[:n] = rng.standard_normal((n, 1, 3))
    eps[n:] = rng.standard_normal((5 - n, B, 3))
    z = posterior(enc, power, eps)[0].data
    m, v = encode_step(enc, z[:n, 0], power[:, 0], n)
    zn = z[n]
    assert np.all(np.abs(zn.mean(axis=0) - m) < 4 * np.sqrt(v / B))
    assert np.all(np.abs(zn.var(axis=0, ddof=1) - v) < 4 * v * np.sqrt(2.0 / (B - 1)))


@pytest.mark.parametrize("seed", range(20))
def test_posterior_recursion_finite_differences(backend, seed):
    assert check_posterior_recursion(seed) < LAYER_TOL


@pytest.mark.parametrize("variant", VARIANTS)
def test_reparameterized_gradient(backend, variant):
    enc, rng = _setup(variant, 8, L=2, F=4, H=3)
    power = rng.gamma(1.0, 1e-3, size=(4, 4))

    def objective():
        z, _ = sample_posterior(enc, power, np.random.default_rng(3), reparameterized=True)
        return ad.tsum(z * z)
    assert compare(objective, enc.parameters(), rng, max_coords=80) < LAYER_TOL


# KL

def test_kl_zero_at_prior():
    assert kl_to_prior(np.zeros((3, 4)), np.ones((3, 4))) == 0.0


def test_kl_single_entry():
    assert kl_to_prior(PosteriorParams(np.array([[1.0]]), np.array([[1.0]]))) == 0.5


def test_kl_scalar_oracle(rng):
    mu, var = rng.standard_normal((3, 4)), rng.uniform(0.1, 3.0, (3, 4))
    ref = 0.0
    for i in range(3):
        for j in range(4):
            ref += 0.5 * (mu[i, j] ** 2 + var[i, j] - np.log(var[i, j]) - 1.0)
    assert kl_to_prior(mu, var) == pytest.approx(ref, rel=0, abs=1e-12)


def test_kl_tensor_matches_closed_form(rng):
    mu, var = rng.standard_normal((4, 2, 3)), rng.uniform(0.1, 3.0, (4, 2, 3))
    mask = np.array([[1, 1], [1, 1], [1, 0], [1, 0]], dtype=float)
    ref = kl_to_prior(mu[:, 0], var[:, 0]) + kl_to_prior(mu[:2, 1], var[:2, 1])
    assert kl_tensor(ad.Tensor(mu), ad.Tensor(var), mask).item() == pytest.approx(ref, rel=1e-14)


def test_kl_monte_carlo(rng):
    mu, var = rng.standard_normal((3, 4)), rng.uniform(0.2, 2.0, (3, 4))
    S = 100_000
    z = mu + np.sqrt(var) * rng.standard_normal((S, 3, 4))
    log_q = -0.5 * (np.log(2 * np.pi * var) + (z - mu) ** 2 / var)
    log_p = -0.5 * (np.log(2 * np.pi) + z ** 2)
    samples = (log_q - log_p).sum(axis=(1, 2))
    se = samples.std(ddof=1) / np.sqrt(S)
    assert abs(samples.mean() - kl_to_prior(mu, var)) < 3 * se


@settings(max_examples=100, deadline=None)
@given(mu=st.floats(-10, 10), var=st.floats(1e-6, 1e3))
def test_kl_nonnegative(mu, var):
    kl = kl_to_prior(np.array([mu]), np.array([var]))
    assert kl >= 0.0
    if mu == 0.0 and var == 1.0:
        assert kl == 0.0


def test_kl_rejects_nonpositive_variance():
    with pytest.raises(ValueError):
        kl_to_prior(np.zeros(2), np.array([1.0, 0.0]))
