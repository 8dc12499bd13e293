"""Maximum-VFE training of encoder/decoder pairs on clean speech.

The objective per sequence is

    VFE = - sum_{f,n} d_IS(|s_fn|^2, v_s,fn(z)) - KL(q(z|s) || p(z))

with one reparameterized sample ``z``. It differs from the exact evidence
lower bound by the data-only constant ``sum ln|s|^2 + FN (1 + ln pi)``.
"""

import configparser
import dataclasses
from dataclasses import dataclass, field
import hashlib
import json
import logging
import os

import numpy as np

from . import autodiff as ad
from .encoder import EncoderParams, kl_tensor, posterior
from .params import VAR_FLOOR, ConfigError, check_variant
from .prior import DecoderParams, decode_tensor

log = logging.getLogger(__name__)

POWER_FLOOR = 1e-10
CHECKPOINT_FORMAT = "rvae-checkpoint"
CHECKPOINT_VERSION = 1
GATE_ORDER = ["input", "forget", "cell", "output"]


class CheckpointFormatError(ValueError):
    pass


class TrainingNumericError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    variant: str = "rnn"
    L: int = 16
    H: int = 128
    F: int = 513
    batch_frames: int = 128  # ffnn: frames per batch
    batch_size: int = 32  # rnn/brnn: sequences per batch
    seq_len: int = 50
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 20
    max_epochs: int = 200
    max_steps: int = 0  # 0: no step limit
    clip_norm: float = 100.0
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.variant = check_variant(self.variant)
        for name in ("L", "H", "F", "batch_frames", "batch_size", "seq_len",
                     "max_epochs"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")

    @classmethod
    def from_file(cls, path, **overrides):
        """Read ``[train]`` key = value pairs; keyword overrides win."""
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise FileNotFoundError(path)
        section = parser["train"] if parser.has_section("train") else parser.defaults()
        return cls.from_mapping(dict(section), **overrides)

    @classmethod
    def from_mapping(cls, values, **overrides):
        kwargs = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        merged = dict(values)
        merged.update({k: v for k, v in overrides.items() if v is not None})
        by_lower = {name.lower(): name for name in types}
        for key, raw in merged.items():
            if key not in types:
                if key.lower() not in by_lower:
                    raise ConfigError(f"unknown training option {key!r}")
                key = by_lower[key.lower()]
            typ = types[key]
            kwargs[key] = typ(raw) if typ in (int, float, str) else raw
        return cls(**kwargs)

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class ModelCheckpoint:
    dec: DecoderParams
    enc: EncoderParams
    meta: dict = field(default_factory=dict)

    @property
    def variant(self):
        return self.dec.variant


# objective

def is_divergence(a, b):
    """Elementwise ``a/b - ln(a/b) - 1`` (numpy); ``a`` is floored at POWER_FLOOR."""
    a = np.maximum(np.asarray(a, dtype=np.float64), POWER_FLOOR)
    r = a / np.asarray(b, dtype=np.float64)
    return r - np.log(r) - 1.0


def is_divergence_tensor(power, v, mask=None):
    """Differentiable ``sum d_IS(power, v)`` over (N, B, F) arrays."""
    a = np.maximum(power, POWER_FLOOR)
    const = -np.log(a) - 1.0
    terms = a / v + ad.log(v) + const
    if mask is not None:
        terms = terms * mask[:, :, None]
    return ad.tsum(terms)


def vfe_terms(power, dec, enc, eps, mask=None):
    """Return ``(sum d_IS, KL, (z, mu, var, v_s))`` as Tensors for one batch.

    ``power`` is (N, B, F); ``mask`` (N, B) marks valid frames.
    """
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
    z, mu, var = posterior(enc, power, eps, mask)
    vs = decode_tensor(dec, z, mask)
    rec = is_divergence_tensor(power, vs, mask)
    kl = kl_tensor(mu, var, mask)
    return rec, kl, (z, mu, var, vs)


def vfe(spec, dec, enc, rng):
    """Single-sample VFE estimate (to maximize) for one spectrogram."""
    power = np.abs(spec.frames.T) ** 2 if hasattr(spec, "frames") else np.asarray(spec)
    power = power[:, None, :]
    eps = rng.standard_normal((power.shape[0], 1, enc.L))
    if not np.all(np.isfinite(power)):
        bad = np.flatnonzero(~np.all(np.isfinite(power[:, 0]), axis=1))
        raise TrainingNumericError(f"non-finite power in frames {bad[:10].tolist()}")
    rec, kl, (_, _, _, vs) = vfe_terms(power, dec, enc, eps)
    value = -rec.item() - kl.item()
    if not np.isfinite(value):
        bad = np.flatnonzero(~np.all(np.isfinite(vs.data[:, 0]), axis=1))
        raise TrainingNumericError(
            f"non-finite VFE; speech variance not finite in frames {bad[:10].tolist()}")
    return value


# batching

def _as_power(item):
    if hasattr(item, "frames"):
        return np.abs(item.frames.T) ** 2
    return np.asarray(item, dtype=np.float64)


def make_segments(powers, seq_len):
    """Cut (N, F) power arrays into ``seq_len`` segments, tail padded and masked."""
    segs, masks = [], []
    for p in powers:
        for start in range(0, p.shape[0], seq_len):
            chunk = p[start:start + seq_len]
            m = np.zeros(seq_len)
            m[:chunk.shape[0]] = 1.0
            if chunk.shape[0] < seq_len:
                chunk = np.concatenate([chunk, np.zeros((seq_len - chunk.shape[0], p.shape[1]))])
            segs.append(chunk)
            masks.append(m)
    return np.stack(segs), np.stack(masks)


def iter_batches(data, masks, batch, rng, recurrent):
    order = rng.permutation(data.shape[0]) if rng is not None else np.arange(data.shape[0])
    for i in range(0, len(order), batch):
        idx = np.sort(order[i:i + batch])
        if recurrent:
            yield (np.ascontiguousarray(data[idx].transpose(1, 0, 2)),
                   np.ascontiguousarray(masks[idx].T))
        else:
            yield data[idx][None, :, :], None


def _prepare(powers, cfg):
    if cfg.variant == "ffnn":
        frames = np.concatenate(powers, axis=0)
        return frames, np.ones(frames.shape[0])
    return make_segments(powers, cfg.seq_len)


def _dataset_vfe(data, masks, dec, enc, cfg, seed):
    rng = np.random.default_rng(seed)
    recurrent = cfg.variant != "ffnn"
    batch = cfg.batch_size if recurrent else cfg.batch_frames
    total, frames = 0.0, 0.0
    for power, mask in iter_batches(data, masks, batch, None, recurrent):
        eps = rng.standard_normal(power.shape[:2] + (cfg.L,))
        rec, kl, _ = vfe_terms(power, dec, enc, eps, mask)
        total += -rec.item() - kl.item()
        frames += mask.sum() if mask is not None else power.shape[1]
    return total / frames


def _snapshot(dec, enc):
    return ({k: t.data.copy() for k, t in dec.tensors.items()},
            {k: t.data.copy() for k, t in enc.tensors.items()})


def train(corpus, cfg, val_corpus=None, progress=None):
    """Fit encoder and decoder by stochastic VFE ascent.

    Parameters
    ----------
    corpus : list of ComplexSpectrogram or (N, F) power arrays
    cfg : TrainConfig
    val_corpus : list, optional
        Held-out sequences for early stopping. When omitted, the last
        ``cfg.val_fraction`` of the corpus is held out (at least one item).
    progress : callable, optional
        Called as ``progress(epoch, step, train_vfe, val_vfe)`` after every epoch.

    Returns
    -------
    ModelCheckpoint
        Parameters with the best validation VFE per frame.
    """
    powers = [_as_power(c) for c in corpus]
    if not powers:
        raise ValueError("empty training corpus")
    if val_corpus is None:
        if len(powers) > 1:
            n_val = max(1, int(round(cfg.val_fraction * len(powers))))
            powers, val_powers = powers[:-n_val], powers[-n_val:]
        else:
            val_powers = powers
    else:
        val_powers = [_as_power(c) for c in val_corpus]
    F = powers[0].shape[1]
    if F != cfg.F:
        raise ConfigError(f"corpus has {F} frequency bins, config expects {cfg.F}")

    seeds = np.random.SeedSequence(cfg.seed).spawn(5)
    dec = DecoderParams(cfg.variant, cfg.L, cfg.F, cfg.H, np.random.default_rng(seeds[0]))
    enc = EncoderParams(cfg.variant, cfg.L, cfg.F, cfg.H, np.random.default_rng(seeds[1]))
    shuffle_rng = np.random.default_rng(seeds[2])
    eps_rng = np.random.default_rng(seeds[3])
    val_seed = int(seeds[4].generate_state(1)[0])

    # start the log-variance head at the IS-optimal constant: the mean power per bin
    allp = np.concatenate(powers, axis=0)
    dec["out.b"].data[:] = np.log(np.maximum(allp.mean(axis=0), POWER_FLOOR))

    data, masks = _prepare(powers, cfg)
    vdata, vmasks = _prepare(val_powers, cfg)
    recurrent = cfg.variant != "ffnn"
    batch = cfg.batch_size if recurrent else cfg.batch_frames
    params = dec.parameters() + enc.parameters()
    opt = ad.Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)

    best_val = _dataset_vfe(vdata, vmasks, dec, enc, cfg, val_seed)
    best = _snapshot(dec, enc)
    best_epoch, step, stale = 0, 0, 0
    history = []
    stopped = "max_epochs"
    for epoch in range(1, cfg.max_epochs + 1):
        ep_total, ep_frames = 0.0, 0.0
        for power, mask in iter_batches(data, masks, batch, shuffle_rng, recurrent):
            eps = eps_rng.standard_normal(power.shape[:2] + (cfg.L,))
            n_valid = mask.sum() if mask is not None else power.shape[1]
            opt.zero_grad()
            with ad.Tape() as tape:
                rec, kl, _ = vfe_terms(power, dec, enc, eps, mask)
                loss = (rec + kl) * (1.0 / n_valid)
                if not np.isfinite(loss.item()):
                    stopped = "nan"
                    break
                tape.backward(loss)
            ad.clip_grad_norm(params, cfg.clip_norm)
            opt.step()
            step += 1
            ep_total -= loss.item() * n_valid
            ep_frames += n_valid
            if cfg.max_steps and step >= cfg.max_steps:
                stopped = "max_steps"
                break
        if stopped == "nan":
            log.warning("non-finite loss at step %d; returning epoch %d parameters",
                        step, best_epoch)
            break
        val = _dataset_vfe(vdata, vmasks, dec, enc, cfg, val_seed)
        train_vfe = ep_total / max(ep_frames, 1.0)
        history.append([epoch, step, train_vfe, val])
        if progress is not None:
            progress(epoch, step, train_vfe, val)
        log.info("epoch %d step %d train VFE/frame %.4f val %.4f", epoch, step, train_vfe, val)
        if np.isfinite(val) and val > best_val:
            best_val, best_epoch, stale = val, epoch, 0
            best = _snapshot(dec, enc)
        else:
            stale += 1
        if stopped == "max_steps":
            break
        if stale >= cfg.patience:
            stopped = "early_stopping"
            break

    dec.load_arrays(best[0])
    enc.load_arrays(best[1])
    meta = {
        "epoch": best_epoch,
        "val_vfe_per_frame": float(best_val),
        "steps": step,
        "epochs_run": len(history),
        "stopped": stopped,
        "config": cfg.to_dict(),
        "history": history,
    }
    return ModelCheckpoint(dec, enc, meta)


# checkpoint files

def _manifest(ckpt):
    tensors, offset = [], 0
    for prefix, ps in (("dec", ckpt.dec), ("enc", ckpt.enc)):
        for name, t in ps.tensors.items():
            nbytes = t.data.size * 8
            tensors.append({"name": f"{prefix}.{name}", "shape": list(t.data.shape),
                            "offset": offset, "nbytes": nbytes})
            offset += nbytes
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "variant": ckpt.variant,
        "dims": ckpt.dec.dims(),
        "gate_order": GATE_ORDER,
        "dtype": "<f8",
        "var_floor": VAR_FLOOR,
        "tensors": tensors,
        "blob_bytes": offset,
        "training": ckpt.meta,
    }


def checkpoint_bytes(ckpt):
    """Serialized ``(manifest.json, weights.bin)`` contents."""
    manifest = json.dumps(_manifest(ckpt), indent=2, sort_keys=True).encode() + b"\n"
    blob = b"".join(t.data.astype("<f8").tobytes()
                    for ps in (ckpt.dec, ckpt.enc) for t in ps.tensors.values())
    return manifest, blob


def _atomic_write(path, data):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_checkpoint(ckpt, path):
    """Write ``manifest.json`` and ``weights.bin`` into directory ``path``."""
    os.makedirs(path, exist_ok=True)
    manifest, blob = checkpoint_bytes(ckpt)
    _atomic_write(os.path.join(path, "weights.bin"), blob)
    _atomic_write(os.path.join(path, "manifest.json"), manifest)
    return path


def checkpoint_hash(path):
    """SHA-256 over manifest and weights; changes iff the checkpoint bytes do."""
    h = hashlib.sha256()
    for name in ("manifest.json", "weights.bin"):
        with open(os.path.join(path, name), "rb") as fh:
            data = fh.read()
        h.update(name.encode() + b"\0" + len(data).to_bytes(8, "little") + data)
    return h.hexdigest()


def load_checkpoint(path):
    try:
        with open(os.path.join(path, "manifest.json"), "rb") as fh:
            manifest = json.loads(fh.read())
        with open(os.path.join(path, "weights.bin"), "rb") as fh:
            blob = fh.read()
    except FileNotFoundError as exc:
        raise CheckpointFormatError(f"{path}: missing checkpoint file ({exc.filename})") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(f"{path}: manifest is not valid JSON ({exc})") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointFormatError(f"{path}: not an {CHECKPOINT_FORMAT} manifest")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"{path}: checkpoint version {manifest.get('version')!r} is not supported "
            f"(expected {CHECKPOINT_VERSION})")
    if manifest.get("gate_order") != GATE_ORDER:
        raise CheckpointFormatError(f"{path}: unsupported LSTM gate order")
    dims = manifest["dims"]
    variant = manifest["variant"]
    dec = DecoderParams(variant, dims["L"], dims["F"], dims["H"])
    enc = EncoderParams(variant, dims["L"], dims["F"], dims["H"])
    expected = [f"dec.{k}" for k in dec.tensors] + [f"enc.{k}" for k in enc.tensors]
    entries = manifest["tensors"]
    if [e["name"] for e in entries] != expected:
        raise CheckpointFormatError(f"{path}: tensor list does not match a {variant} model")
    offset = 0
    arrays = {}
    for e in entries:
        size = int(np.prod(e["shape"])) * 8
        if e["offset"] != offset or e.get("nbytes", size) != size:
            raise CheckpointFormatError(f"{path}: tensor {e['name']} is not contiguous")
        arrays[e["name"]] = np.frombuffer(blob, dtype="<f8", count=size // 8,
                                          offset=offset).reshape(e["shape"]) \
            if offset + size <= len(blob) else None
        offset += size
    if offset != manifest.get("blob_bytes") or len(blob) != offset:
        raise CheckpointFormatError(
            f"{path}: weights.bin has {len(blob)} bytes, manifest describes {offset}")
    dec.load_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("dec.")})
    enc.load_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("enc.")})
    return ModelCheckpoint(dec, enc, manifest.get("training", {}))
