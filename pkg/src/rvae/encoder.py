"""Structured inference networks q(z | s) for the three decoder variants.

Recurrent variants are built from three blocks:

* prediction: an LSTM over the past latents ``z_{0:n-1}`` (zero state at n=0);
* observation: an anti-causal LSTM (``rnn``) or a bidirectional LSTM
  (``brnn``) over the spectral features;
* update: ``u = tanh(dense([h_pred, obs_n]))`` followed by two dense heads for
  the mean and the log-variance.

Sampling is ancestral, frame by frame, and runs as a single fused tape node
(see :func:`posterior_recursion`). The ``ffnn`` variant maps each frame on its
own and is sampled in parallel.

Network input is ``log1p(|s|^2)``.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .params import VAR_FLOOR, ConfigError, ParamSet
from .prior import LatentSequence


@dataclass
class PosteriorParams:
    mu: object  # (N, L) array, or a Tensor when reparameterized
    var: object


class EncoderParams(ParamSet):
    kind = "enc"

    def __init__(self, variant, L=16, F=513, H=128, rng=None):
        super().__init__(variant, L, F, H)
        rng = np.random.default_rng(1) if rng is None else rng
        if self.variant == "ffnn":
            self._dense(rng, "dense_in", F, H)
        else:
            if self.variant == "rnn":
                self._lstm(rng, "obs", F, H)
                n_obs = H
            else:
                self._lstm(rng, "obs_f", F, H)
                self._lstm(rng, "obs_b", F, H)
                n_obs = 2 * H
            s = 1.0 / np.sqrt(H)
            b = np.zeros(4 * H)
            b[H:2 * H] = 1.0
            self.tensors["pred.Wz"] = ad.Tensor(rng.uniform(-s, s, (L, 4 * H)), True)
            self.tensors["pred.Wh"] = ad.Tensor(rng.uniform(-s, s, (H, 4 * H)), True)
            self.tensors["pred.b"] = ad.Tensor(b, True)
            self._dense(rng, "upd_obs", n_obs, H)
            sh = np.sqrt(6.0 / (2 * H))
            self.tensors["upd_pred.W"] = ad.Tensor(rng.uniform(-sh, sh, (H, H)), True)
        self._dense(rng, "mu", H, L)
        self._dense(rng, "logv", H, L)


# power on the 16-bit PCM scale, so log1p acts as a log above the quantization floor
PCM_POWER_SCALE = 2.0 ** 30
FEATURE_GAIN = 0.1


def features(power):
    """Encoder input transform of a power spectrogram."""
    return FEATURE_GAIN * np.log1p(PCM_POWER_SCALE * np.asarray(power, dtype=np.float64))


def observe(params, feats, mask=None):
    """Observation block output for features of shape (N, B, F)."""
    if feats.shape[-1] != params.F:
        raise ConfigError(f"encoder expects {params.F} bins, got {feats.shape[-1]}")
    t = params.tensors
    if params.variant == "ffnn":
        return ad.tanh(ad.dense(feats, t["dense_in.W"], t["dense_in.b"]))
    if params.variant == "rnn":
        return ad.lstm(feats, *params.lstm_weights("obs"), reverse=True, mask=mask)
    return ad.bilstm(feats, params.lstm_weights("obs_f"), params.lstm_weights("obs_b"),
                     mask=mask)


def posterior_recursion(P, eps, Wz, Wh, bp, Wuh, Wm, bm, Wv, bv):
    """Fused ancestral sampler; returns Tensors ``(z, mu, var)``, each (N, B, L).

    ``P`` (N, B, U) is the observation contribution to the update block,
    including its bias; ``eps`` (N, B, L) are the standard normal draws.
    """
    Pd = np.ascontiguousarray(ad._data(P))
    epsd = np.ascontiguousarray(eps, dtype=np.float64)
    ws = [np.ascontiguousarray(ad._data(w)) for w in (Wz, Wh, bp, Wuh, Wm, bm, Wv, bv)]
    Wzd, Whd, bpd, Wuhd, Wmd, bmd, Wvd, bvd = ws
    z, mu, var, cache = kernels.posterior_forward(Pd, epsd, *ws, VAR_FLOOR)

    def bw(dz, dmu, dvar):
        dpre, dmt, dlogv, da = kernels.posterior_backward(
            np.ascontiguousarray(dz), np.ascontiguousarray(dmu),
            np.ascontiguousarray(dvar), z, var, epsd, cache, Wzd, Whd, Wuhd, Wmd, Wvd)
        hs, u = cache[0], cache[4]
        H, U, L = Whd.shape[0], u.shape[2], z.shape[2]
        G = 4 * H
        u2 = u.reshape(-1, U)
        da_next = da[1:].reshape(-1, G)
        dWz = z[:-1].reshape(-1, L).T @ da_next
        dWh = hs[:-1].reshape(-1, H).T @ da_next
        dbp = da.sum(axis=(0, 1))
        dWuh = hs.reshape(-1, H).T @ dpre.reshape(-1, U)
        dWm = u2.T @ dmt.reshape(-1, L)
        dWv = u2.T @ dlogv.reshape(-1, L)
        return (dpre, dWz, dWh, dbp, dWuh, dWm, dmt.sum(axis=(0, 1)),
                dWv, dlogv.sum(axis=(0, 1)))

    return ad.apply_op((z, mu, var), (P, Wz, Wh, bp, Wuh, Wm, bm, Wv, bv), bw)


def posterior(params, power, eps, mask=None):
    """Reparameterized sample and posterior moments for a power batch.

    Parameters
    ----------
    power : ndarray, shape (N, B, F)
    eps : ndarray, shape (N, B, L)
        Standard normal draws (zeros give the recursive posterior mean).

    Returns
    -------
    z, mu, var : Tensor, each (N, B, L)
    """
    feats = features(power)
    obs = observe(params, feats, mask)
    t = params.tensors
    if params.variant == "ffnn":
        mu = ad.dense(obs, t["mu.W"], t["mu.b"])
        var = ad.clamp_min(ad.exp(ad.dense(obs, t["logv.W"], t["logv.b"])), VAR_FLOOR)
        z = mu + ad.sqrt(var) * eps
        return z, mu, var
    P = ad.dense(obs, t["upd_obs.W"], t["upd_obs.b"])
    return posterior_recursion(P, eps, t["pred.Wz"], t["pred.Wh"], t["pred.b"],
                               t["upd_pred.W"], t["mu.W"], t["mu.b"],
                               t["logv.W"], t["logv.b"])


def _power_of(spec):
    if hasattr(spec, "frames"):
        return np.abs(spec.frames.T) ** 2
    return np.asarray(spec, dtype=np.float64)


def encode_step(params, z_past, spec, n):
    """Posterior moments ``(mu_n, var_n)`` given the past latents explicitly.

    ``spec`` is a ComplexSpectrogram (F x N) or a power array (N, F).
    ``z_past`` holds ``z_0 .. z_{n-1}`` as an (n, L) array. This path
    runs the prediction LSTM as an ordinary sequence layer, independently of
    the fused sampler.
    """
    power = _power_of(spec)
    N = power.shape[0]
    if not 0 <= n < N:
        raise IndexError(f"frame {n} out of range for {N} frames")
    if z_past is None:
        z_past = np.zeros((0, params.L))
    z_past = np.asarray(z_past, dtype=np.float64).reshape(-1, params.L)
    if params.variant != "ffnn" and z_past.shape[0] != n:
        raise ValueError(f"need {n} past latent frames, got {z_past.shape[0]}")
    t = params.tensors
    if params.variant == "ffnn":
        obs = observe(params, features(power[n:n + 1, None, :])).data[0]
        u = obs
    else:
        obs = observe(params, features(power[:, None, :])).data[n]
        pre = obs @ t["upd_obs.W"].data + t["upd_obs.b"].data
        if n > 0:
            h = ad.lstm(z_past[:, None, :], t["pred.Wz"], t["pred.Wh"], t["pred.b"]).data
            pre = pre + h[-1] @ t["upd_pred.W"].data
        u = np.tanh(pre)
    mu = u @ t["mu.W"].data + t["mu.b"].data
    var = np.maximum(np.exp(u @ t["logv.W"].data + t["logv.b"].data), VAR_FLOOR)
    return mu[0], var[0]


def sample_posterior(params, spec, rng, reparameterized=False):
    """Draw one latent sequence from q(z | s) for a single spectrogram.

    With ``reparameterized=True`` (inside a Tape) the returned ``z``, ``mu``
    and ``var`` are Tensors through which gradients reach the encoder.
    """
    power = _power_of(spec)[:, None, :]
    eps = rng.standard_normal((power.shape[0], 1, params.L))
    z, mu, var = posterior(params, power, eps)
    if reparameterized:
        return z[:, 0, :], PosteriorParams(mu[:, 0, :], var[:, 0, :])
    return (LatentSequence(z.data[:, 0, :].copy()),
            PosteriorParams(mu.data[:, 0, :].copy(), var.data[:, 0, :].copy()))


def kl_to_prior(post, var=None):
    """KL(q || N(0, I)) summed over entries: ``sum 1/2 (mu^2 + v - ln v - 1)``.

    Accepts a :class:`PosteriorParams` or the two arrays ``(mu, var)``.
    """
    if var is None:
        mu, var = post.mu, post.var
    else:
        mu = post
    mu = np.asarray(ad._data(mu), dtype=np.float64)
    var = np.asarray(ad._data(var), dtype=np.float64)
    if np.any(var <= 0):
        raise ValueError("posterior variances must be strictly positive")
    return float(0.5 * np.sum(mu * mu + var - np.log(var) - 1.0))


def kl_tensor(mu, var, mask=None):
    """Differentiable KL term; ``mask`` (N, B) zeroes padded frames."""
    terms = 0.5 * (mu * mu + var - ad.log(var) - 1.0)
    if mask is not None:
        terms = terms * np.asarray(mask, dtype=np.float64)[:, :, None]
    return ad.tsum(terms)
