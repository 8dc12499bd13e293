"""Generative speech models: latent sequences to speech variances.

Three decoders share a ``dense(L -> H, tanh)`` input layer and a log-variance
output head ``dense(-> F)`` followed by ``exp`` and a variance floor:

* ``ffnn``: frame n depends on ``z_n`` only.
* ``rnn``: a causal LSTM in between, so frame n depends on ``z_{0:n}``.
* ``brnn``: a bidirectional LSTM merged by ``dense(2H -> H, tanh)``; every
  frame may depend on the whole sequence.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .params import VAR_FLOOR, ConfigError, ParamSet


@dataclass
class LatentSequence:
    z: np.ndarray  # (N, L)

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        if self.z.ndim != 2:
            raise ValueError("latent sequence must be (N, L)")


@dataclass
class VarianceField:
    values: np.ndarray  # (F, N), entries >= VAR_FLOOR


class DecoderParams(ParamSet):
    kind = "dec"

    def __init__(self, variant, L=16, F=513, H=128, rng=None):
        super().__init__(variant, L, F, H)
        rng = np.random.default_rng(0) if rng is None else rng
        self._dense(rng, "dense_in", L, H)
        if self.variant == "rnn":
            self._lstm(rng, "lstm", H, H)
        elif self.variant == "brnn":
            self._lstm(rng, "lstm_f", H, H)
            self._lstm(rng, "lstm_b", H, H)
            self._dense(rng, "merge", 2 * H, H)
        self._dense(rng, "out", H, F)


def decode_log_variance(params, z, mask=None):
    """Log-variance head output, Tensor (N, B, F), for z of shape (N, B, L)."""
    z = ad.as_tensor(z)
    if z.ndim != 3 or z.shape[-1] != params.L:
        raise ConfigError(f"decoder expects (N, B, {params.L}) latents, got {z.shape}")
    t = params.tensors
    h = ad.tanh(ad.dense(z, t["dense_in.W"], t["dense_in.b"]))
    if params.variant == "rnn":
        h = ad.lstm(h, *params.lstm_weights("lstm"), mask=mask)
    elif params.variant == "brnn":
        h = ad.bilstm(h, params.lstm_weights("lstm_f"), params.lstm_weights("lstm_b"),
                      mask=mask)
        h = ad.tanh(ad.dense(h, t["merge.W"], t["merge.b"]))
    return ad.dense(h, t["out.W"], t["out.b"])


def decode_tensor(params, z, mask=None):
    """Speech variances, Tensor (N, B, F), floored at ``VAR_FLOOR``."""
    return ad.clamp_min(ad.exp(decode_log_variance(params, z, mask)), VAR_FLOOR)


def decode(params, z):
    """Variance field (F x N) for a single latent sequence."""
    zz = z.z if isinstance(z, LatentSequence) else np.asarray(z, dtype=np.float64)
    if zz.ndim != 2 or zz.shape[1] != params.L:
        raise ConfigError(f"expected (N, {params.L}) latents, got {zz.shape}")
    v = decode_tensor(params, zz[:, None, :]).data[:, 0, :]
    return VarianceField(v.T.copy())


def sample_prior(N, L, rng):
    """i.i.d. standard normal latent sequence."""
    return LatentSequence(rng.standard_normal((N, L)))


def log_likelihood(spec, v):
    """``sum_{f,n} -ln(pi) - ln v_fn - |s_fn|^2 / v_fn`` for complex Gaussian frames."""
    frames = spec.frames if hasattr(spec, "frames") else np.asarray(spec)
    vv = v.values if isinstance(v, VarianceField) else np.asarray(v, dtype=np.float64)
    if frames.shape != vv.shape:
        raise ValueError(f"spectrogram {frames.shape} and variance {vv.shape} differ")
    if np.any(vv <= 0):
        raise ValueError("variances must be strictly positive")
    p = np.abs(frames) ** 2
    return float(np.sum(-np.log(np.pi) - np.log(vv) - p / vv))
