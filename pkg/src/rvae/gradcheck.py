"""Central finite-difference checks of the analytic gradients.

Each check builds a small random instance, computes a scalar objective and
its gradient with the tape, and compares against central differences on a
random subset of coordinates. The error measure is the norm-wise relative
error ``||g_a - g_n|| / max(||g_a||, ||g_n||)``.
"""

from dataclasses import dataclass
import time

import numpy as np

from . import autodiff as ad
from .encoder import EncoderParams, posterior_recursion
from .enhancer import NoiseMixtureParams, peem_objective
from .prior import DecoderParams
from .training import vfe_terms

LAYER_TOL = 1e-4
MODEL_TOL = 1e-3
STEP = 1e-5


@dataclass
class GradCheckResult:
    name: str
    seed: int
    rel_error: float
    tol: float

    @property
    def passed(self):
        return bool(self.rel_error < self.tol)


def rel_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def compare(objective, tensors, rng, max_coords=60, step=STEP):
    """Relative error between tape and finite-difference gradients.

    ``objective`` takes no arguments and returns a scalar Tensor built from
    ``tensors`` (each with ``requires_grad=True``).
    """
    for t in tensors:
        t.grad = None
    with ad.Tape() as tape:
        tape.backward(objective())
    slots = [(k, i) for k, t in enumerate(tensors) for i in range(t.data.size)]
    if len(slots) > max_coords:
        pick = rng.choice(len(slots), size=max_coords, replace=False)
        slots = [slots[j] for j in np.sort(pick)]
    analytic, numeric = [], []
    for k, i in slots:
        t = tensors[k]
        flat = t.data.reshape(-1)
        old = flat[i]
        flat[i] = old + step
        fp = objective().item()
        flat[i] = old - step
        fm = objective().item()
        flat[i] = old
        numeric.append((fp - fm) / (2 * step))
        g = t.grad
        analytic.append(0.0 if g is None else g.reshape(-1)[i])
    return rel_error(analytic, numeric)


def _param(rng, *shape, scale=0.5):
    return ad.Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _probe(out, rng):
    return ad.tsum(out * rng.standard_normal(out.shape))


def check_dense(seed, max_coords=60):
    rng = np.random.default_rng(seed)
    x, W, b = _param(rng, 4, 3, 5), _param(rng, 5, 6), _param(rng, 6)
    R = rng.standard_normal((4, 3, 6))
    return compare(lambda: ad.tsum(ad.tanh(ad.dense(x, W, b)) * R), [x, W, b], rng,
                   max_coords)


def _lstm_instance(rng, D, H):
    return _param(rng, D, 4 * H), _param(rng, H, 4 * H), _param(rng, 4 * H, scale=0.2)


def _mask(rng, N, B):
    mask = np.ones((N, B))
    for j in range(B):
        mask[rng.integers(N // 2, N + 1):, j] = 0.0
    return mask


def check_lstm(seed, reverse=False, max_coords=60):
    rng = np.random.default_rng(seed)
    N, B, D, H = 6, 3, 4, 3
    x = _param(rng, N, B, D)
    w = _lstm_instance(rng, D, H)
    mask = _mask(rng, N, B)
    R = rng.standard_normal((N, B, H))
    return compare(lambda: ad.tsum(ad.lstm(x, *w, reverse=reverse, mask=mask) * R),
                   [x, *w], rng, max_coords)


def check_bilstm(seed, max_coords=60):
    rng = np.random.default_rng(seed)
    N, B, D, H = 6, 2, 4, 3
    x = _param(rng, N, B, D)
    fw, bw = _lstm_instance(rng, D, H), _lstm_instance(rng, D, H)
    mask = _mask(rng, N, B)
    R = rng.standard_normal((N, B, 2 * H))
    return compare(lambda: ad.tsum(ad.bilstm(x, fw, bw, mask) * R),
                   [x, *fw, *bw], rng, max_coords)


def check_posterior_recursion(seed, max_coords=60):
    rng = np.random.default_rng(seed)
    N, B, L, H = 5, 2, 3, 4
    P = _param(rng, N, B, H)
    eps = rng.standard_normal((N, B, L))
    Wz, Wh, bp = _lstm_instance(rng, L, H)
    Wuh = _param(rng, H, H)
    Wm, bm, Wv, bv = _param(rng, H, L), _param(rng, L), _param(rng, H, L), _param(rng, L)
    args = [P, Wz, Wh, bp, Wuh, Wm, bm, Wv, bv]
    Rz, Rm, Rv = (rng.standard_normal((N, B, L)) for _ in range(3))

    def objective():
        z, mu, var = posterior_recursion(P, eps, Wz, Wh, bp, Wuh, Wm, bm, Wv, bv)
        return ad.tsum(z * Rz) + ad.tsum(mu * Rm) + ad.tsum(var * Rv)
    return compare(objective, args, rng, max_coords)


def _small_models(variant, rng):
    L, F, H = 3, 6, 4
    dec = DecoderParams(variant, L, F, H, rng)
    enc = EncoderParams(variant, L, F, H, rng)
    return dec, enc


def check_vfe(seed, variant="rnn", max_coords=60):
    rng = np.random.default_rng(seed)
    dec, enc = _small_models(variant, rng)
    N, B = 5, 2
    power = rng.gamma(1.0, 2.0, size=(N, B, dec.F))
    eps = rng.standard_normal((N, B, enc.L))
    mask = _mask(rng, N, B)

    def objective():
        rec, kl, _ = vfe_terms(power, dec, enc, eps, mask)
        return -(rec + kl)
    return compare(objective, dec.parameters() + enc.parameters(), rng, max_coords)


def check_peem(seed, variant="rnn", max_coords=60):
    rng = np.random.default_rng(seed)
    dec, _ = _small_models(variant, rng)
    dec.requires_grad_(False)
    N = 5
    phi = NoiseMixtureParams.init(dec.F, N, 2, rng)
    phi.g = rng.uniform(0.5, 2.0, N)
    x_power = rng.gamma(1.0, 2.0, size=(N, dec.F))
    z = ad.Tensor(rng.standard_normal((N, 1, dec.L)), requires_grad=True)
    return compare(lambda: peem_objective(dec, phi, x_power, z), [z], rng, max_coords)


CHECKS = [
    ("dense", LAYER_TOL, check_dense),
    ("lstm_forward", LAYER_TOL, lambda s, m: check_lstm(s, False, m)),
    ("lstm_reverse", LAYER_TOL, lambda s, m: check_lstm(s, True, m)),
    ("bilstm", LAYER_TOL, check_bilstm),
    ("posterior_recursion", LAYER_TOL, check_posterior_recursion),
    ("vfe_ffnn", MODEL_TOL, lambda s, m: check_vfe(s, "ffnn", m)),
    ("vfe_rnn", MODEL_TOL, lambda s, m: check_vfe(s, "rnn", m)),
    ("vfe_brnn", MODEL_TOL, lambda s, m: check_vfe(s, "brnn", m)),
    ("peem_ffnn", MODEL_TOL, lambda s, m: check_peem(s, "ffnn", m)),
    ("peem_rnn", MODEL_TOL, lambda s, m: check_peem(s, "rnn", m)),
    ("peem_brnn", MODEL_TOL, lambda s, m: check_peem(s, "brnn", m)),
]


def run_suite(seeds=range(20), max_coords=60, names=None):
    """Run every check for every seed; returns ``(results, seconds)``."""
    t0 = time.perf_counter()
    results = []
    for name, tol, fn in CHECKS:
        if names is not None and name not in names:
            continue
        for seed in seeds:
            results.append(GradCheckResult(name, int(seed), fn(int(seed), max_coords), tol))
    return results, time.perf_counter() - t0


def worst_by_check(results):
    """Largest error per check name, in suite order."""
    out = {}
    for r in results:
        if r.name not in out or r.rel_error > out[r.name].rel_error:
            out[r.name] = r
    return list(out.values())
