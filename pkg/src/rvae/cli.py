"""Command-line entry point: ``rvae <command> [options]``.

Commands
--------
synth-corpus   write a synthetic clean corpus with train/val list files
synth-testset  write clean/noise/mixture triples and an index.csv
train          fit a model on a corpus directory
mix            mix a clean and a noise WAV at a target SNR
enhance        enhance one noisy WAV
evaluate       enhance every mixture of a test set and write a CSV report
gradcheck      run the finite-difference gradient suite

Every command writes a JSON run manifest next to its outputs. Timestamps
come from ``SOURCE_DATE_EPOCH`` when it is set, which makes repeated runs
byte-identical.
"""

import argparse
import csv
from datetime import datetime, timezone
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__, kernels
from .corpus import NOISE_TYPES, synth_corpus, synth_noise
from .enhancer import EnhanceConfig, enhance, enhance_full
from .evaluate import MixSpec, mix_at_snr, si_sdr, summarize, trim_edges, write_report
from .params import VARIANTS, ConfigError
from .signal import SAMPLE_RATE, WavError, read_wav, stft, write_wav
from .training import (CheckpointFormatError, TrainConfig, checkpoint_hash, load_checkpoint,
                       save_checkpoint, train)

log = logging.getLogger("rvae")

MANIFEST_NAME = "run_manifest.json"


class CommandError(Exception):
    """A user-facing failure; reported on stderr with exit status 2."""


# run manifests

def _timestamp():
    sde = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(sde) if sde else time.time()
    return datetime.fromtimestamp(t, tz=timezone.utc).isoformat()


def _atomic_text(path, text):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_manifest(path, command, config, seed, ckpt_dir=None, started=None, extra=None):
    """Write the run manifest for one command atomically."""
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "checkpoint_sha256": checkpoint_hash(ckpt_dir) if ckpt_dir else None,
        "started": started or _timestamp(),
        "finished": _timestamp(),
        "version": __version__,
    }
    if extra:
        manifest.update(extra)
    _atomic_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _manifest_path(out_path):
    if os.path.isdir(out_path):
        return os.path.join(out_path, MANIFEST_NAME)
    return os.path.splitext(out_path)[0] + ".manifest.json"


def _child_seeds(seed, n):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


# commands

def cmd_synth_corpus(args):
    started = _timestamp()
    os.makedirs(args.out_dir, exist_ok=True)
    waves = synth_corpus(args.seed, args.minutes * 60.0)
    names = [f"utt{i:04d}.wav" for i in range(len(waves))]
    for name, w in zip(names, waves):
        write_wav(os.path.join(args.out_dir, name), w)
    n_val = max(1, int(round(args.val_fraction * len(names)))) if len(names) > 1 else 0
    split = len(names) - n_val
    _atomic_text(os.path.join(args.out_dir, "train.txt"), "".join(n + "\n" for n in names[:split]))
    _atomic_text(os.path.join(args.out_dir, "val.txt"), "".join(n + "\n" for n in names[split:]))
    total = sum(len(w) for w in waves) / SAMPLE_RATE
    write_manifest(os.path.join(args.out_dir, MANIFEST_NAME), "synth-corpus",
                   {"minutes": args.minutes, "val_fraction": args.val_fraction},
                   args.seed, started=started,
                   extra={"files": len(names), "seconds": total})
    print(f"wrote {len(names)} utterances ({total:.1f} s) to {args.out_dir}")


def cmd_synth_testset(args):
    started = _timestamp()
    os.makedirs(args.out_dir, exist_ok=True)
    waves = synth_corpus(args.seed, args.count * args.max_dur * 2,
                         min_dur=args.min_dur, max_dur=args.max_dur)[:args.count]
    if len(waves) < args.count:
        raise CommandError("could not synthesize enough test utterances")
    seeds = _child_seeds(args.seed + 1, args.count)
    snrs = [float(s) for s in args.snr]
    rows = []
    for i, (w, s) in enumerate(zip(waves, seeds)):
        rng = np.random.default_rng(s)
        kind = NOISE_TYPES[i % len(NOISE_TYPES)]
        snr = snrs[i % len(snrs)]
        noise = synth_noise(rng, kind, len(w) / SAMPLE_RATE + 1.0)
        x, sc, b = mix_at_snr(MixSpec(w, noise, snr, seed=s))
        uid = f"t{i:04d}"
        for suffix, wav in (("mix", x), ("clean", sc), ("noise", b)):
            write_wav(os.path.join(args.out_dir, f"{uid}_{suffix}.wav"), wav)
        rows.append({"utterance_id": uid, "noise_type": kind, "snr": f"{snr:g}",
                     "mixture": f"{uid}_mix.wav", "clean": f"{uid}_clean.wav"})
    tmp = os.path.join(args.out_dir, "index.csv.tmp")
    with open(tmp, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        wr.writeheader()
        wr.writerows(rows)
    os.replace(tmp, os.path.join(args.out_dir, "index.csv"))
    write_manifest(os.path.join(args.out_dir, MANIFEST_NAME), "synth-testset",
                   {"count": args.count, "snr": snrs}, args.seed, started=started)
    print(f"wrote {len(rows)} mixtures to {args.out_dir}")


def _read_list(corpus_dir, name):
    path = os.path.join(corpus_dir, name)
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        files = [ln.strip() for ln in fh if ln.strip()]
    return [stft(read_wav(os.path.join(corpus_dir, f))) for f in files]


def _train_config(args):
    overrides = {}
    for key in ("variant", "L", "H", "seed", "max_epochs", "max_steps", "patience",
                "lr", "batch_size"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if args.config:
        if not os.path.exists(args.config):
            raise CommandError(f"config file not found: {args.config}")
        return TrainConfig.from_file(args.config, **overrides)
    return TrainConfig.from_mapping({}, **overrides)


def cmd_train(args):
    started = _timestamp()
    cfg = _train_config(args)
    if not os.path.isdir(args.corpus):
        raise CommandError(f"corpus directory not found: {args.corpus}")
    corpus = _read_list(args.corpus, "train.txt")
    if corpus is None:
        files = sorted(f for f in os.listdir(args.corpus) if f.endswith(".wav"))
        corpus = [stft(read_wav(os.path.join(args.corpus, f))) for f in files]
    if not corpus:
        raise CommandError(f"no training files in {args.corpus}")
    val = _read_list(args.corpus, "val.txt") or None
    ckpt = train(corpus, cfg, val)
    save_checkpoint(ckpt, args.out)
    write_manifest(os.path.join(args.out, MANIFEST_NAME), "train", cfg.to_dict(), cfg.seed,
                   ckpt_dir=args.out, started=started,
                   extra={"epoch": ckpt.meta["epoch"], "stopped": ckpt.meta["stopped"],
                          "val_vfe_per_frame": ckpt.meta["val_vfe_per_frame"]})
    print(f"saved {cfg.variant} checkpoint to {args.out} "
          f"(epoch {ckpt.meta['epoch']}, val VFE/frame {ckpt.meta['val_vfe_per_frame']:.3f})")


def cmd_mix(args):
    started = _timestamp()
    clean, noise = read_wav(args.clean), read_wav(args.noise)
    x, sc, b = mix_at_snr(MixSpec(clean, noise, args.snr, seed=args.seed))
    write_wav(args.out, x)
    if args.clean_out:
        write_wav(args.clean_out, sc)
    if args.noise_out:
        write_wav(args.noise_out, b)
    write_manifest(_manifest_path(args.out), "mix", {"snr": args.snr}, args.seed,
                   started=started)


def _load_model(args):
    ckpt = load_checkpoint(args.checkpoint)
    if args.variant is not None and args.variant != ckpt.variant:
        raise CommandError(f"--variant {args.variant} does not match the checkpoint "
                           f"variant {ckpt.variant}")
    return ckpt


def _enhance_config(args, seed=None):
    return EnhanceConfig(algorithm=args.alg, iterations=args.iters, K=args.K,
                         estep_lr=args.estep_lr, seed=args.seed if seed is None else seed)


def cmd_enhance(args):
    started = _timestamp()
    ckpt = _load_model(args)
    cfg = _enhance_config(args)
    x = read_wav(args.input)
    res = enhance_full(x, ckpt, cfg)
    write_wav(args.output, res.wave)
    if args.trace_csv:
        tmp = args.trace_csv + ".tmp"
        with open(tmp, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["iteration", "mstep_cost", "objective"])
            for it, cost, obj in res.trace:
                wr.writerow([it, repr(float(cost)), "" if obj is None else repr(float(obj))])
        os.replace(tmp, args.trace_csv)
    write_manifest(_manifest_path(args.output), "enhance", _config_dict(cfg), args.seed,
                   ckpt_dir=args.checkpoint, started=started)


def _config_dict(cfg):
    return {k: getattr(cfg, k) for k in ("algorithm", "iterations", "K", "estep_lr", "R")}


def cmd_evaluate(args):
    started = _timestamp()
    index = os.path.join(args.testset, "index.csv")
    if not os.path.isdir(args.testset) or not os.path.exists(index):
        raise CommandError(f"no test set (index.csv) in {args.testset}")
    with open(index, newline="") as fh:
        items = list(csv.DictReader(fh))
    if not items:
        raise CommandError(f"test set {args.testset} is empty")
    ckpt = _load_model(args)
    seeds = _child_seeds(args.seed, len(items))
    rows = []
    for item, seed in zip(items, seeds):
        clean = read_wav(os.path.join(args.testset, item["clean"]))
        x = read_wav(os.path.join(args.testset, item["mixture"]))
        y = enhance(x, ckpt, _enhance_config(args, seed))
        ref = trim_edges(clean)
        rows.append({"utterance_id": item["utterance_id"], "noise_type": item["noise_type"],
                     "snr": item["snr"], "algorithm": args.alg, "variant": ckpt.variant,
                     "si_sdr_noisy": si_sdr(ref, trim_edges(x)),
                     "si_sdr_enhanced": si_sdr(ref, trim_edges(y))})
        log.info("%s  noisy %.2f dB  enhanced %.2f dB", item["utterance_id"],
                 rows[-1]["si_sdr_noisy"], rows[-1]["si_sdr_enhanced"])
    write_report(args.report, rows)
    gains = [r["si_sdr_enhanced"] - r["si_sdr_noisy"] for r in rows]
    med, (lo, hi) = summarize(gains)
    write_manifest(_manifest_path(args.report), "evaluate", _config_dict(_enhance_config(args)),
                   args.seed, ckpt_dir=args.checkpoint, started=started,
                   extra={"items": len(rows), "median_improvement_db": med,
                          "ci95_db": [lo, hi]})
    print(f"{len(rows)} utterances: median SI-SDR improvement {med:.2f} dB "
          f"(95% CI {lo:.2f} to {hi:.2f})")


def cmd_gradcheck(args):
    from .gradcheck import run_suite, worst_by_check
    results, secs = run_suite(range(args.seeds), args.max_coords)
    failed = [r for r in results if not r.passed]
    for r in worst_by_check(results):
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:<22s} worst rel. error {r.rel_error:.2e}"
              f" (tol {r.tol:.0e}, seed {r.seed})")
    print(f"{len(results)} checks over {args.seeds} seeds in {secs:.1f} s; "
          f"{len(failed)} failed")
    if failed:
        raise SystemExit(1)


# argument parsing

def _add_enhance_flags(p):
    p.add_argument("--alg", choices=("vem", "peem"), default="vem")
    p.add_argument("--variant", choices=VARIANTS, default=None,
                   help="expected checkpoint variant; a mismatch is an error")
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--K", type=int, default=8, help="NMF rank of the noise model")
    p.add_argument("--estep-lr", type=float, default=1e-2)
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    # global flags are accepted before or after the command name
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    common.add_argument("--backend", choices=("cython", "python"), default=argparse.SUPPRESS,
                        help="kernel backend (default: compiled when available)")
    p = argparse.ArgumentParser(prog="rvae", description=__doc__.splitlines()[0],
                                parents=[common])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.set_defaults(verbose=False, backend=None)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-corpus", parents=[common],
                       help="write a synthetic clean corpus")
    s.add_argument("out_dir")
    s.add_argument("--minutes", type=float, default=10.0)
    s.add_argument("--val-fraction", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth_corpus)

    s = sub.add_parser("synth-testset", parents=[common], help="write noisy test mixtures")
    s.add_argument("out_dir")
    s.add_argument("--count", type=int, default=20)
    s.add_argument("--snr", type=float, nargs="+", default=[0.0])
    s.add_argument("--min-dur", type=float, default=2.0)
    s.add_argument("--max-dur", type=float, default=4.0)
    s.add_argument("--seed", type=int, default=1000)
    s.set_defaults(func=cmd_synth_testset)

    s = sub.add_parser("train", parents=[common], help="train a model")
    s.add_argument("corpus", help="directory of WAV files (train.txt/val.txt if present)")
    s.add_argument("out", help="checkpoint directory")
    s.add_argument("--config", help="INI file with a [train] section")
    s.add_argument("--variant", choices=VARIANTS)
    s.add_argument("--L", type=int)
    s.add_argument("--H", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--max-steps", type=int)
    s.add_argument("--patience", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("mix", parents=[common],
                       help="mix clean speech and noise at an SNR")
    s.add_argument("clean")
    s.add_argument("noise")
    s.add_argument("out")
    s.add_argument("--snr", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--clean-out")
    s.add_argument("--noise-out")
    s.set_defaults(func=cmd_mix)

    s = sub.add_parser("enhance", parents=[common], help="enhance a noisy WAV")
    s.add_argument("checkpoint")
    s.add_argument("input")
    s.add_argument("output")
    _add_enhance_flags(s)
    s.add_argument("--trace-csv", help="write per-iteration M-step cost and objective")
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("evaluate", parents=[common], help="score a model on a test set")
    s.add_argument("checkpoint")
    s.add_argument("testset")
    s.add_argument("report", help="output CSV")
    _add_enhance_flags(s)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference gradient suite")
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--max-coords", type=int, default=60)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    prev = kernels.BACKEND
    try:
        if args.backend:
            kernels.use(args.backend)
        args.func(args)
    except (CommandError, ConfigError, CheckpointFormatError, WavError,
            FileNotFoundError, ValueError) as exc:
        print(f"rvae {args.command}: error: {exc}", file=sys.stderr)
        return 2
    finally:
        kernels.use(prev)
    return 0


if __name__ == "__main__":
    sys.exit(main())
