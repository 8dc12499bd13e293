"""Synthetic speech-like and noise signals for desk-scale experiments.

Utterances are strings of voiced "syllables": additive harmonic synthesis
with a drifting, slightly jittered fundamental (80-300 Hz), harmonic
amplitudes falling as 1/k and shaped by a cascade of three AR(2) resonators
(formant-like envelope), formant-shaped aspiration noise 10-20 dB below the
harmonics, and a smooth amplitude envelope with 3-6 Hz modulation. Short
unvoiced bursts of resonator-filtered noise and pauses separate syllables. A
-70 dB white floor keeps every STFT bin strictly positive.
"""

import numpy as np
from scipy.signal import lfilter

from .signal import SAMPLE_RATE, Waveform

NOISE_TYPES = ("white", "pink", "car", "cafe")
FLOOR_DB = -70.0
F0_RANGE = (80.0, 300.0)
HNR_RANGE_DB = (10.0, 20.0)


def _ar2(freq, bw, sr):
    r = np.exp(-np.pi * bw / sr)
    return np.array([1.0, -2.0 * r * np.cos(2 * np.pi * freq / sr), r * r])


def _envelope_gain(freqs, formants, sr):
    """Magnitude response of the resonator cascade at ``freqs`` (Hz)."""
    w = np.exp(-2j * np.pi * np.asarray(freqs) / sr)
    gain = np.ones(np.shape(freqs))
    for freq, bw in formants:
        a = _ar2(freq, bw, sr)
        gain = gain / np.abs(a[0] + a[1] * w + a[2] * w * w)
    return gain


def _formants(rng):
    return [(rng.uniform(300, 900), rng.uniform(60, 160)),
            (rng.uniform(900, 2500), rng.uniform(80, 200)),
            (rng.uniform(2300, 3500), rng.uniform(100, 250))]


def _smooth_noise(rng, n, knots):
    """Random smooth curve with about ``knots`` degrees of freedom over n samples."""
    pts = rng.standard_normal(max(2, knots))
    return np.interp(np.linspace(0, len(pts) - 1, n), np.arange(len(pts)), pts)


def _voiced(rng, n, f0_base, sr):
    t = np.arange(n) / sr
    f0 = f0_base * np.exp(0.06 * _smooth_noise(rng, n, 4) - 0.05 * t / max(t[-1], 1e-3))
    f0 = f0 * (1.0 + 0.01 * np.sin(2 * np.pi * rng.uniform(4, 6) * t))
    # jitter: fast 0.5% pitch perturbation that smears the upper harmonics
    f0 = f0 * (1.0 + 0.005 * _smooth_noise(rng, n, n * 200 // sr))
    f0 = np.clip(f0, F0_RANGE[0], F0_RANGE[1])
    phase = 2 * np.pi * np.cumsum(f0) / sr
    formants = _formants(rng)
    out = np.zeros(n)
    f0_mean = float(f0.mean())
    for k in range(1, int((sr / 2 - 200) / f0.max()) + 1):
        amp = _envelope_gain(k * f0_mean, formants, sr) / k
        out += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    # aspiration: formant-shaped noise at a harmonics-to-noise ratio of 10-20 dB
    asp = rng.standard_normal(n)
    for freq, bw in formants:
        asp = lfilter([1.0], _ar2(freq, bw, sr), asp)
    hnr = rng.uniform(*HNR_RANGE_DB)
    out += asp * np.sqrt(np.mean(out * out) / np.mean(asp * asp)) * 10 ** (-hnr / 20)
    ramp = min(n // 4, int(0.04 * sr))
    env = np.ones(n)
    env[:ramp] = np.sin(np.linspace(0, np.pi / 2, ramp)) ** 2
    env[n - ramp:] = np.cos(np.linspace(0, np.pi / 2, ramp)) ** 2
    env *= 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(3, 6) * t + rng.uniform(0, 2 * np.pi))
    return out * env


def _unvoiced(rng, n, sr):
    a = _ar2(rng.uniform(2500, 6000), rng.uniform(800, 2000), sr)
    x = lfilter([1.0], a, rng.standard_normal(n))
    return x * np.hanning(n)


def _normalize(x, rms):
    cur = np.sqrt(np.mean(x * x))
    return x * (rms / cur) if cur > 0 else x


def synth_utterance(rng, duration, sr=SAMPLE_RATE):
    """One speech-like utterance of ``duration`` seconds."""
    n_total = int(round(duration * sr))
    out = np.zeros(n_total)
    f0_base = np.exp(rng.uniform(*np.log(F0_RANGE)))
    pos = int(rng.uniform(0.02, 0.1) * sr)
    while pos < n_total:
        if rng.random() < 0.2:
            n = int(rng.uniform(0.05, 0.12) * sr)
            seg = 0.3 * _normalize(_unvoiced(rng, n, sr), 1.0)
        else:
            n = int(rng.uniform(0.1, 0.35) * sr)
            f0 = f0_base * np.exp(0.1 * rng.standard_normal())
            seg = _normalize(_voiced(rng, n, f0, sr), 1.0)
        seg *= 10 ** (rng.uniform(-6, 0) / 20)
        end = min(n_total, pos + n)
        out[pos:end] += seg[:end - pos]
        pos = end + int(rng.uniform(0.03, 0.15) * sr)
    level = 10 ** (rng.uniform(-32, -20) / 20)
    out = _normalize(out, level)
    out += rng.standard_normal(n_total) * level * 10 ** (FLOOR_DB / 20)
    return Waveform(out, sr)


def synth_noise(rng, kind, duration, sr=SAMPLE_RATE):
    """Noise signal of a given type at unit RMS."""
    n = int(round(duration * sr))
    white = rng.standard_normal(n)
    if kind == "white":
        x = white
    elif kind == "pink":
        x = _pink(white)
    elif kind == "car":
        brown = lfilter([1.0], [1.0, -0.995], white)
        brown -= np.mean(brown)
        t = np.arange(n) / sr
        hum = sum(np.sin(2 * np.pi * k * rng.uniform(25, 45) * t) / k for k in range(1, 5))
        x = _normalize(brown, 1.0) + 0.3 * hum
    elif kind == "cafe":
        x = _pink(white) * (1.0 + 0.4 * np.tanh(_smooth_noise(rng, n, int(duration * 3) + 2)))
        for _ in range(int(duration * 2)):
            start = rng.integers(0, max(1, n - 800))
            m = min(800, n - start)
            x[start:start + m] += 4.0 * _unvoiced(rng, m, sr)
    else:
        raise ValueError(f"unknown noise type {kind!r}; expected one of {NOISE_TYPES}")
    return Waveform(_normalize(x, 1.0), sr)


def _pink(white):
    # 3 dB/octave IIR approximation of 1/f noise
    b = [0.049922035, -0.095993537, 0.050612699, -0.004408786]
    a = [1.0, -2.494956002, 2.017265875, -0.522189400]
    return lfilter(b, a, white)


def synth_corpus(seed, total_seconds, min_dur=1.5, max_dur=4.0, sr=SAMPLE_RATE):
    """Utterances whose durations add up to ``total_seconds`` exactly (to a sample).

    Each utterance draws from its own child seed, so a corpus prefix does not
    depend on the requested total.
    """
    waves = []
    remaining = int(round(total_seconds * sr))
    min_len = int(min_dur * sr)
    root = np.random.SeedSequence(seed)
    while remaining > 0:
        rng = np.random.default_rng(root.spawn(1)[0])
        n = int(rng.uniform(min_dur, max_dur) * sr)
        if remaining - n < min_len:
            n = remaining
        waves.append(synth_utterance(rng, n / sr, sr))
        remaining -= n
    return waves
