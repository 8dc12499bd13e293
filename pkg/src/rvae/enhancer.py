"""Test-time speech enhancement with a trained speech prior.

The mixture is modelled per time-frequency bin as a zero-mean complex
Gaussian with variance ``g_n v_s,fn(z) + (W H)_fn``: a gain-scaled speech
variance from the frozen decoder plus an NMF noise variance. Each outer
iteration runs an E-step (fine-tune a private copy of the encoder for VEM, or
a MAP ascent on ``z`` for PEEM) followed by one sweep of multiplicative
updates of ``H``, ``W`` and ``g``. The speech estimate is the Wiener-like
filtered mixture ``E[g v_s / v_x] x``.
"""

from dataclasses import dataclass, field
import logging

import numpy as np

from . import autodiff as ad
from .encoder import kl_tensor, posterior
from .prior import LatentSequence, decode_tensor
from .signal import ComplexSpectrogram, Waveform, istft, stft
from .training import is_divergence, is_divergence_tensor

log = logging.getLogger(__name__)

PHI_FLOOR = 1e-12
DEFAULT_GRAD_STEPS = {"ffnn": 10, "rnn": 1, "brnn": 1}


@dataclass
class NoiseMixtureParams:
    W: np.ndarray  # (F, K)
    H: np.ndarray  # (K, N)
    g: np.ndarray  # (N,)

    def copy(self):
        return NoiseMixtureParams(self.W.copy(), self.H.copy(), self.g.copy())

    def noise_variance(self):
        return self.W @ self.H

    @classmethod
    def init(cls, F, N, K, rng):
        W = np.maximum(rng.random((F, K)), PHI_FLOOR)
        H = np.maximum(rng.random((K, N)), PHI_FLOOR)
        return cls(W, H, np.ones(N))


@dataclass
class EnhanceConfig:
    algorithm: str = "vem"
    iterations: int = 500
    K: int = 8
    estep_grad_steps: int = 0  # 0: 10 for ffnn, 1 for rnn/brnn
    estep_lr: float = 1e-2
    R: int = 1
    seed: int = 0

    def __post_init__(self):
        self.algorithm = str(self.algorithm).lower()
        if self.algorithm not in ("vem", "peem"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}; use vem or peem")
        if self.iterations < 0 or self.K < 1 or self.R < 1 or self.estep_grad_steps < 0:
            raise ValueError("iterations, K, R and estep_grad_steps must be positive")

    def grad_steps(self, variant):
        return self.estep_grad_steps or DEFAULT_GRAD_STEPS[variant]


@dataclass
class EnhanceResult:
    wave: Waveform
    estimate: ComplexSpectrogram
    phi: NoiseMixtureParams
    trace: list = field(default_factory=list)


# mixture model and M-step

def mixture_variance(v_s, phi):
    """``g_n v_s,fn + (W H)_fn`` for an (F, N) speech variance."""
    v_s = getattr(v_s, "values", v_s)
    if v_s.shape != (phi.W.shape[0], phi.H.shape[1]) or phi.g.shape != (v_s.shape[1],):
        raise ValueError(f"speech variance {v_s.shape} does not match the noise model")
    return phi.g[None, :] * v_s + phi.W @ phi.H


def mstep_cost(phi, x_power, vs_list):
    """``sum_r sum_{f,n} d_IS(|x_fn|^2, v_x,fn(z^(r)))``."""
    return float(sum(np.sum(is_divergence(x_power, mixture_variance(vs, phi)))
                     for vs in vs_list))


def _inv_sums(phi, vs_list):
    vx = [mixture_variance(vs, phi) for vs in vs_list]
    return sum(v ** -2 for v in vx), sum(1.0 / v for v in vx)


def mstep_update(phi, x_power, vs_list):
    """One multiplicative sweep over H, then W, then g.

    ``vs_list`` holds the R speech-variance samples (each F x N). The
    mixture variance is recomputed between the three sub-updates.
    """
    vs_list = [getattr(v, "values", v) for v in vs_list]
    W, H, g = phi.W.copy(), phi.H.copy(), phi.g.copy()
    P = np.asarray(x_power, dtype=np.float64)

    cur = NoiseMixtureParams(W, H, g)
    inv2, inv1 = _inv_sums(cur, vs_list)
    H = np.maximum(H * np.sqrt((W.T @ (P * inv2)) / (W.T @ inv1)), PHI_FLOOR)

    cur = NoiseMixtureParams(W, H, g)
    inv2, inv1 = _inv_sums(cur, vs_list)
    W = np.maximum(W * np.sqrt(((P * inv2) @ H.T) / (inv1 @ H.T)), PHI_FLOOR)

    cur = NoiseMixtureParams(W, H, g)
    vx = [mixture_variance(vs, cur) for vs in vs_list]
    num = sum(np.sum(P * vs / v ** 2, axis=0) for vs, v in zip(vs_list, vx))
    den = sum(np.sum(vs / v, axis=0) for vs, v in zip(vs_list, vx))
    g = np.maximum(g * np.sqrt(num / den), PHI_FLOOR)
    return NoiseMixtureParams(W, H, g)


# E-steps

def mixture_vfe_terms(enc, dec, phi, x_power, eps):
    """Tensors ``(sum d_IS(|x|^2, v_x), KL, v_s)`` for the test-time VFE.

    ``x_power`` is (N, F); the encoder sees the mixture in place of clean speech.
    """
    power = x_power[:, None, :]
    z, mu, var = posterior(enc, power, eps)
    vs = decode_tensor(dec, z)
    vx = vs * phi.g[:, None, None] + (phi.W @ phi.H).T[:, None, :]
    return is_divergence_tensor(power, vx), kl_tensor(mu, var), vs


def _finite_grads(params):
    return all(p.grad is None or np.all(np.isfinite(p.grad)) for p in params)


def _guarded_ascent(opt, params, objective, state):
    """Run one Adam step on ``-objective``; returns the objective value or None.

    Non-finite losses or parameters revert the step and halve the step size
    once; a second failure flags ``state["abort"]``.
    """
    backup = [p.data.copy() for p in params]
    m_backup = [m.copy() for m in opt.state.m]
    v_backup = [v.copy() for v in opt.state.v]
    step_backup = opt.state.step
    opt.zero_grad()
    with ad.Tape() as tape:
        obj = objective()
        value = obj.item()
        ok = np.isfinite(value)
        if ok:
            tape.backward(-obj)
    ok = ok and _finite_grads(params)
    if ok:
        opt.step()
        ok = all(np.all(np.isfinite(p.data)) for p in params)
    if ok:
        return value
    for p, b in zip(params, backup):
        p.data = b
    opt.state.m, opt.state.v, opt.state.step = m_backup, v_backup, step_backup
    if state.get("halved"):
        log.warning("non-finite E-step objective twice; aborting the E-step")
        state["abort"] = True
    else:
        log.warning("non-finite E-step objective; halving the step size")
        opt.state.lr *= 0.5
        state["halved"] = True
    return None


def estep_vem(enc, dec, phi, x_power, cfg, rng, opt=None, steps=None, state=None):
    """Fine-tune ``enc`` (modified in place) by Adam ascent on the test-time VFE.

    ``enc`` must be a private copy; ``dec`` and ``phi`` stay fixed. Returns the
    last VFE estimate (or None when no step succeeded).
    """
    params = enc.parameters()
    if opt is None:
        opt = ad.Adam(params, lr=cfg.estep_lr)
    steps = cfg.grad_steps(enc.variant) if steps is None else steps
    state = {} if state is None else state
    N = x_power.shape[0]
    value = None
    for _ in range(steps):
        if state.get("abort"):
            break
        eps = rng.standard_normal((N, 1, enc.L))

        def objective():
            rec, kl, _ = mixture_vfe_terms(enc, dec, phi, x_power, eps)
            return -(rec + kl)
        out = _guarded_ascent(opt, params, objective, state)
        if out is not None:
            value = out
    return value


def peem_objective(dec, phi, x_power, z, prior_weight=1.0, lik_weight=1.0):
    """``ln p(x | z) + ln p(z)`` up to constants, as a Tensor; ``z`` is (N, 1, L)."""
    power = x_power[:, None, :]
    vs = decode_tensor(dec, z)
    vx = vs * phi.g[:, None, None] + (phi.W @ phi.H).T[:, None, :]
    lik = -is_divergence_tensor(power, vx)
    prior = -0.5 * ad.tsum(z * z)
    return lik * lik_weight + prior * prior_weight


def estep_peem(dec, phi, x_power, z_init, cfg, steps=None):
    """Adam ascent on ``ln p(x|z) + ln p(z)`` w.r.t. ``z``.

    ``z_init`` is a LatentSequence or an (N, L) array. Returns the updated
    LatentSequence.
    """
    z = _peem_ascent(dec, phi, x_power, z_init, cfg, steps=steps)
    return LatentSequence(z.data[:, 0, :].copy())


def _peem_ascent(dec, phi, x_power, z_init, cfg, opt=None, steps=None, state=None,
                 z=None):
    if z is None:
        z0 = getattr(z_init, "z", z_init)
        z0 = np.asarray(z0, dtype=np.float64)
        if z0.ndim == 2:
            z0 = z0[:, None, :]
        z = ad.Tensor(z0.copy(), requires_grad=True)
    if opt is None:
        opt = ad.Adam([z], lr=cfg.estep_lr)
    steps = cfg.grad_steps(dec.variant) if steps is None else steps
    state = {} if state is None else state
    for _ in range(steps):
        if state.get("abort"):
            break
        _guarded_ascent(opt, [z], lambda: peem_objective(dec, phi, x_power, z), state)
    return z


# reconstruction

def wiener_gain(vs_list, phi):
    """Average over samples of ``g_n v_s / v_x`` (F x N)."""
    vs_list = [getattr(v, "values", v) for v in vs_list]
    gains = [phi.g[None, :] * vs / mixture_variance(vs, phi) for vs in vs_list]
    return sum(gains) / len(gains)


def wiener_reconstruct(x, vs_list, phi):
    """Scaled speech estimate ``sqrt(g) * s_hat`` as a ComplexSpectrogram."""
    frames = x.frames if isinstance(x, ComplexSpectrogram) else np.asarray(x)
    out = wiener_gain(vs_list, phi) * frames
    if isinstance(x, ComplexSpectrogram):
        return ComplexSpectrogram(out, x.window_size, x.hop)
    return ComplexSpectrogram(out)


def _speech_variance(dec, z):
    return decode_tensor(dec, z).data[:, 0, :].T


def _sample_vs(enc, dec, x_power, rng):
    eps = rng.standard_normal((x_power.shape[0], 1, enc.L))
    z, _, _ = posterior(enc, x_power[:, None, :], eps)
    return _speech_variance(dec, z)


def enhance_spectrogram(x, ckpt, cfg, trace=None):
    """Run VEM or PEEM on a mixture spectrogram; returns an EnhanceResult."""
    variant = ckpt.variant
    dec = ckpt.dec.copy().requires_grad_(False)
    x_power = np.abs(x.frames.T) ** 2  # (N, F)
    N, F = x_power.shape
    if F != dec.F:
        raise ValueError(f"mixture has {F} bins, model expects {dec.F}")
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    phi = NoiseMixtureParams.init(F, N, cfg.K, np.random.default_rng(seeds[0]))
    rng = np.random.default_rng(seeds[1])
    steps = cfg.grad_steps(variant)
    state = {}
    P = x_power.T

    if cfg.algorithm == "vem":
        enc = ckpt.enc.copy().requires_grad_(True)
        opt = ad.Adam(enc.parameters(), lr=cfg.estep_lr)
        for it in range(cfg.iterations):
            value = estep_vem(enc, dec, phi, x_power, cfg, rng, opt, steps, state)
            vs_list = [_sample_vs(enc, dec, x_power, rng) for _ in range(cfg.R)]
            phi = mstep_update(phi, P, vs_list)
            if trace is not None:
                trace.append((it + 1, mstep_cost(phi, P, vs_list), value))
        vs_list = [_sample_vs(enc, dec, x_power, rng) for _ in range(cfg.R)]
    else:
        enc = ckpt.enc
        _, mu, _ = posterior(enc, x_power[:, None, :], np.zeros((N, 1, enc.L)))
        z = ad.Tensor(mu.data.copy(), requires_grad=True)
        opt = ad.Adam([z], lr=cfg.estep_lr)
        for it in range(cfg.iterations):
            z = _peem_ascent(dec, phi, x_power, None, cfg, opt, steps, state, z=z)
            vs_list = [_speech_variance(dec, z.data)]
            phi = mstep_update(phi, P, vs_list)
            if trace is not None:
                obj = peem_objective(dec, phi, x_power, z.data).item()
                trace.append((it + 1, mstep_cost(phi, P, vs_list), obj))
        vs_list = [_speech_variance(dec, z.data)]
    est = wiener_reconstruct(x, vs_list, phi)
    return EnhanceResult(None, est, phi, trace if trace is not None else [])


def enhance(x_wave, ckpt, cfg, trace=None):
    """Enhance a noisy waveform; the output has the input's length."""
    if isinstance(x_wave, np.ndarray):
        x_wave = Waveform(x_wave)
    x = stft(x_wave)
    res = enhance_spectrogram(x, ckpt, cfg, trace)
    res.wave = istft(res.estimate, len(x_wave), x_wave.sample_rate)
    return res.wave


def enhance_full(x_wave, ckpt, cfg):
    """Like :func:`enhance` but returns the EnhanceResult with the trace."""
    x = stft(x_wave)
    res = enhance_spectrogram(x, ckpt, cfg, trace=[])
    res.wave = istft(res.estimate, len(x_wave), x_wave.sample_rate)
    return res
