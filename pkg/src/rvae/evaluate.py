"""Mixture synthesis at a target SNR, SI-SDR scoring and summary statistics.

SNR is the plain energy ratio ``10 log10(||s||^2 / ||b||^2)``. Loudness-based
protocols such as ITU-R BS.1770 give values roughly 2.5 dB lower on speech
and are not used here.
"""

import csv
from dataclasses import dataclass
import os

import numpy as np

from .signal import WINDOW_SIZE, Waveform

SDR_CAP = 100.0
CSV_FIELDS = ["utterance_id", "noise_type", "snr", "algorithm", "variant",
              "si_sdr_noisy", "si_sdr_enhanced"]


@dataclass
class MixSpec:
    clean: Waveform
    noise: Waveform
    snr_db: float
    seed: int = 0


def _samples(w):
    return w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)


def mix_at_snr(spec):
    """Scale a random crop of the noise to the requested SNR and add it.

    Returns ``(mixture, clean, noise)`` with ``mixture == clean + noise``
    sample for sample. All three are attenuated together when the mixture
    would clip.
    """
    if spec.clean.sample_rate != spec.noise.sample_rate:
        raise ValueError("clean and noise sample rates differ")
    s = spec.clean.samples
    b = spec.noise.samples
    if b.size < s.size:
        raise ValueError("noise is shorter than the clean signal")
    es = float(np.dot(s, s))
    if es == 0.0:
        raise ValueError("clean signal has zero energy")
    rng = np.random.default_rng(spec.seed)
    start = int(rng.integers(0, b.size - s.size + 1))
    b = b[start:start + s.size]
    eb = float(np.dot(b, b))
    if eb == 0.0:
        raise ValueError("noise segment has zero energy")
    b = b * np.sqrt(es / (eb * 10.0 ** (spec.snr_db / 10.0)))
    peak = np.max(np.abs(s + b))
    if peak > 0.99:
        s = s * (0.99 / peak)
        b = b * (0.99 / peak)
    x = s + b
    sr = spec.clean.sample_rate
    return Waveform(x, sr), Waveform(s.copy(), sr), Waveform(b, sr)


def snr_db(clean, noise):
    s, b = _samples(clean), _samples(noise)
    return 10.0 * np.log10(np.dot(s, s) / np.dot(b, b))


def si_sdr(reference, estimate):
    """Scale-invariant SDR in dB, capped to [-100, 100]."""
    s, e = _samples(reference), _samples(estimate)
    if s.shape != e.shape:
        raise ValueError(f"length mismatch: {s.shape} vs {e.shape}")
    es = float(np.dot(s, s))
    if es == 0.0:
        raise ValueError("reference has zero energy")
    if not np.any(e):
        return -SDR_CAP
    alpha = float(np.dot(e, s)) / es
    target = alpha * s
    resid = e - target
    num = float(np.dot(target, target))
    den = float(np.dot(resid, resid))
    if den == 0.0 or num / den > 10 ** (SDR_CAP / 10):
        return SDR_CAP
    if num == 0.0:
        return -SDR_CAP
    return float(np.clip(10.0 * np.log10(num / den), -SDR_CAP, SDR_CAP))


def trim_edges(x, margin=WINDOW_SIZE):
    """Drop ``margin`` samples at each end (iSTFT edge frames)."""
    x = _samples(x)
    if x.size <= 2 * margin:
        return x
    return x[margin:x.size - margin]


def summarize(scores, n_boot=10000, seed=0):
    """Median and bootstrap 95% confidence interval of the median."""
    x = np.asarray(scores, dtype=np.float64)
    if x.size == 0:
        raise ValueError("no scores to summarize")
    rng = np.random.default_rng(seed)
    meds = np.empty(n_boot)
    chunk = max(1, 2_000_000 // x.size)
    for i in range(0, n_boot, chunk):
        m = min(chunk, n_boot - i)
        meds[i:i + m] = np.median(x[rng.integers(0, x.size, (m, x.size))], axis=1)
    lo, hi = np.percentile(meds, [2.5, 97.5])
    return float(np.median(x)), (float(lo), float(hi))


def write_report(path, rows):
    """Write evaluation rows (dicts keyed by ``CSV_FIELDS``) as CSV."""
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            out = dict(r)
            for k in ("si_sdr_noisy", "si_sdr_enhanced"):
                out[k] = f"{float(r[k]):.6f}"
            w.writerow(out)
    os.replace(tmp, path)


def read_report(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
