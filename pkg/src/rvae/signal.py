"""STFT analysis/synthesis with a sine window, and mono WAV I/O.

Frames are left-aligned: frame ``n`` covers samples ``[n*hop, n*hop + win)``
and the tail is zero-padded to complete the last frame. Analysis and
synthesis both use the sine window, whose square overlap-adds to 2 at 75%
overlap.
"""

from dataclasses import dataclass
import math

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 16000
WINDOW_SIZE = 1024  # 64 ms at 16 kHz
HOP = WINDOW_SIZE // 4
N_FREQ = WINDOW_SIZE // 2 + 1


class ConfigError(ValueError):
    """Incompatible STFT geometry."""


class WavError(IOError):
    """Unsupported or malformed WAV file."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.samples.ndim != 1:
            raise ValueError("Waveform holds mono samples only")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self):
        return len(self) / self.sample_rate


@dataclass
class ComplexSpectrogram:
    frames: np.ndarray  # (F, N) complex
    window_size: int = WINDOW_SIZE
    hop: int = HOP

    @property
    def n_freq(self):
        return self.frames.shape[0]

    @property
    def n_frames(self):
        return self.frames.shape[1]

    def power(self):
        return np.abs(self.frames) ** 2


def sine_window(size):
    """``w[k] = sin(pi (k + 0.5) / size)``."""
    if size <= 0 or size % 4:
        raise ConfigError(f"window size {size} must be a positive multiple of 4")
    half = np.sin(np.pi * (np.arange(size // 2) + 0.5) / size)
    # mirror the first half so the window is exactly symmetric
    return np.concatenate([half, half[::-1]])


def n_frames(length, window_size=WINDOW_SIZE, hop=HOP):
    """Number of frames covering ``length`` samples with tail padding."""
    if length <= 0:
        raise ValueError("empty signal")
    if length <= window_size:
        return 1
    return math.ceil((length - window_size) / hop) + 1


def stft(wave, window_size=WINDOW_SIZE, hop=None):
    """Short-time Fourier transform of a waveform (or a 1-D array)."""
    hop = window_size // 4 if hop is None else hop
    if hop * 4 != window_size:
        raise ConfigError("hop must be a quarter of the window (75% overlap)")
    x = wave.samples if isinstance(wave, Waveform) else np.asarray(wave, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot transform an empty signal")
    N = n_frames(x.size, window_size, hop)
    padded = np.zeros((N - 1) * hop + window_size)
    padded[:x.size] = x
    idx = np.arange(window_size)[None, :] + hop * np.arange(N)[:, None]
    frames = padded[idx] * sine_window(window_size)
    return ComplexSpectrogram(np.fft.rfft(frames, axis=1).T, window_size, hop)


def istft(spec, length=None, sample_rate=SAMPLE_RATE):
    """Weighted overlap-add inverse of :func:`stft`, trimmed to ``length``."""
    frames = spec.frames if isinstance(spec, ComplexSpectrogram) else np.asarray(spec)
    window_size = spec.window_size if isinstance(spec, ComplexSpectrogram) else WINDOW_SIZE
    hop = spec.hop if isinstance(spec, ComplexSpectrogram) else window_size // 4
    if frames.shape[0] != window_size // 2 + 1 or hop * 4 != window_size:
        raise ConfigError(
            f"spectrogram with {frames.shape[0]} bins does not match window {window_size}")
    w = sine_window(window_size)
    N = frames.shape[1]
    seg = np.fft.irfft(frames.T, n=window_size, axis=1) * w
    out = np.zeros((N - 1) * hop + window_size)
    for n in range(N):
        out[n * hop:n * hop + window_size] += seg[n]
    # sum of squared sine windows at 75% overlap
    out /= 2.0
    if length is not None:
        if length > out.size:
            out = np.concatenate([out, np.zeros(length - out.size)])
        out = out[:length]
    return Waveform(out, sample_rate)


def read_wav(path, sample_rate=SAMPLE_RATE):
    """Read a mono PCM16 or float32 WAV file; no resampling is done."""
    try:
        rate, data = wavfile.read(path)
    except (ValueError, EOFError) as exc:
        raise WavError(f"{path}: malformed WAV ({exc})") from exc
    if data.ndim != 1:
        raise WavError(f"{path}: {data.shape[1]} channels, only mono is supported")
    if sample_rate is not None and rate != sample_rate:
        raise WavError(f"{path}: sample rate {rate} Hz, expected {sample_rate} Hz")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise WavError(f"{path}: sample format {data.dtype} is not PCM16 or float32")
    if not np.all(np.isfinite(samples)):
        raise WavError(f"{path}: non-finite samples")
    return Waveform(samples, rate)


def write_wav(path, wave, subtype="float32"):
    """Write a mono WAV file as ``"float32"`` or ``"pcm16"``."""
    x = wave.samples
    if subtype == "float32":
        data = x.astype(np.float32)
    elif subtype == "pcm16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unknown WAV subtype {subtype!r}")
    wavfile.write(path, wave.sample_rate, data)
