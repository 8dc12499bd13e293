import csv
import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from rvae import kernels
from rvae.cli import main, write_manifest
from rvae.signal import SAMPLE_RATE, read_wav
from rvae.training import TrainConfig, save_checkpoint, train

SDE = "1700000000"


@pytest.fixture(autouse=True)
def fixed_clock(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", SDE)


def _files(d):
    return {p: open(os.path.join(d, p), "rb").read() for p in sorted(os.listdir(d))}


@pytest.fixture(scope="module")
def tiny_ckpt(tmp_path_factory):
    from rvae.corpus import synth_corpus
    from rvae.signal import stft
    root = tmp_path_factory.mktemp("ck")
    specs = [stft(w) for w in synth_corpus(0, 12)]
    ck = train(specs, TrainConfig(variant="rnn", H=8, L=4, max_steps=3, seed=0))
    save_checkpoint(ck, root / "ck")
    return str(root / "ck")


@pytest.fixture(scope="module")
def tiny_testset(tmp_path_factory):
    d = tmp_path_factory.mktemp("ts") / "ts"
    os.environ["SOURCE_DATE_EPOCH"] = SDE
    assert main(["synth-testset", str(d), "--count", "2", "--min-dur", "1.5",
                 "--max-dur", "2"]) == 0
    return str(d)


# synth-corpus

def test_synth_corpus_duration_and_split(tmp_path):
    assert main(["synth-corpus", str(tmp_path), "--minutes", "1", "--seed", "3"]) == 0
    wavs = [f for f in os.listdir(tmp_path) if f.endswith(".wav")]
    total = sum(len(read_wav(tmp_path / f)) for f in wavs) / SAMPLE_RATE
    assert abs(total - 60.0) <= 0.6
    train_list = (tmp_path / "train.txt").read_text().split()
    val_list = (tmp_path / "val.txt").read_text().split()
    assert sorted(train_list + val_list) == sorted(wavs)
    assert val_list and not set(train_list) & set(val_list)
    manifest = json.loads((tmp_path / "run_manifest.json").read_text())
    assert manifest["command"] == "synth-corpus" and manifest["seed"] == 3


def test_synth_corpus_same_seed_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["synth-corpus", str(a), "--minutes", "0.2", "--seed", "5"]) == 0
    assert main(["synth-corpus", str(b), "--minutes", "0.2", "--seed", "5"]) == 0
    assert _files(a) == _files(b)


def test_synth_corpus_pitch_in_speech_range(tmp_path):
    assert main(["synth-corpus", str(tmp_path), "--minutes", "0.5", "--seed", "7"]) == 0
    n = 2048
    lo, hi = SAMPLE_RATE // 400, SAMPLE_RATE // 60
    for f in sorted(os.listdir(tmp_path)):
        if not f.endswith(".wav"):
            continue
        x = read_wav(tmp_path / f).samples
        energy = [np.dot(x[i:i + n], x[i:i + n]) for i in range(0, len(x) - n, 256)]
        start = 256 * int(np.argmax(energy))
        seg = x[start:start + n] - x[start:start + n].mean()
        r = np.correlate(seg, seg, "full")[n - 1:]
        lag = lo + int(np.argmax(r[lo:hi]))
        assert 80.0 <= SAMPLE_RATE / lag <= 300.0
        assert r[lag] / r[0] > 0.3


# exit codes and diagnostics

def test_variant_mismatch_names_both(tiny_ckpt, tiny_testset, tmp_path, capsys):
    mix = os.path.join(tiny_testset, "t0000_mix.wav")
    code = main(["enhance", tiny_ckpt, mix, str(tmp_path / "o.wav"), "--variant", "brnn",
                 "--iters", "1"])
    err = capsys.readouterr().err
    assert code != 0
    assert "brnn" in err and "rnn" in err.replace("brnn", "")


def test_evaluate_empty_dir_fails(tiny_ckpt, tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["evaluate", tiny_ckpt, str(tmp_path / "empty"), str(tmp_path / "r.csv")]) != 0


def test_evaluate_empty_index_fails(tiny_ckpt, tmp_path):
    (tmp_path / "index.csv").write_text("utterance_id,noise_type,snr,mixture,clean\n")
    assert main(["evaluate", tiny_ckpt, str(tmp_path), str(tmp_path / "r.csv")]) != 0


def test_missing_input_file_fails(tiny_ckpt, tmp_path, capsys):
    code = main(["enhance", tiny_ckpt, str(tmp_path / "nope.wav"), str(tmp_path / "o.wav")])
    assert code != 0
    assert "nope.wav" in capsys.readouterr().err


def test_bad_checkpoint_fails(tmp_path):
    (tmp_path / "ck").mkdir()
    (tmp_path / "ck" / "manifest.json").write_text("{")
    code = main(["enhance", str(tmp_path / "ck"), str(tmp_path / "x.wav"),
                 str(tmp_path / "o.wav")])
    assert code != 0


def test_unknown_flag_fails():
    with pytest.raises(SystemExit) as exc:
        main(["enhance", "--no-such-flag"])
    assert exc.value.code != 0


def test_bad_config_key_fails(tmp_path):
    cfg = tmp_path / "t.ini"
    cfg.write_text("[train]\nwidth = 3\n")
    (tmp_path / "c").mkdir()
    assert main(["train", str(tmp_path / "c"), str(tmp_path / "ck"),
                 "--config", str(cfg)]) != 0


def test_console_script_exit_status(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "rvae.cli", "evaluate", str(tmp_path / "a"),
                           str(tmp_path / "b"), str(tmp_path / "r.csv")],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert "error" in proc.stderr


def test_backend_flag_restored(tmp_path):
    before = kernels.BACKEND
    assert main(["--backend", "python", "synth-corpus", str(tmp_path), "--minutes",
                 "0.05"]) == 0
    assert kernels.BACKEND == before


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seeds", "1", "--max-coords", "10"]) == 0
    out = capsys.readouterr().out
    assert "0 failed" in out


# determinism and manifests

def test_enhance_deterministic(tiny_ckpt, tiny_testset, tmp_path):
    mix = os.path.join(tiny_testset, "t0001_mix.wav")
    for d in ("a", "b"):
        (tmp_path / d).mkdir()
        assert main(["enhance", tiny_ckpt, mix, str(tmp_path / d / "o.wav"), "--iters", "3",
                     "--seed", "4", "--trace-csv", str(tmp_path / d / "t.csv")]) == 0
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
    rows = list(csv.reader(open(tmp_path / "a" / "t.csv")))
    assert rows[0] == ["iteration", "mstep_cost", "objective"] and len(rows) == 4


def test_mix_command(tiny_testset, tmp_path):
    clean = os.path.join(tiny_testset, "t0000_clean.wav")
    noise = os.path.join(tiny_testset, "t0000_noise.wav")
    out, co, no = (str(tmp_path / f) for f in ("m.wav", "c.wav", "n.wav"))
    assert main(["mix", clean, noise, out, "--snr", "5", "--clean-out", co,
                 "--noise-out", no]) == 0
    s, b = read_wav(co).samples, read_wav(no).samples
    assert 10 * np.log10(np.dot(s, s) / np.dot(b, b)) == pytest.approx(5.0, abs=1e-3)
    assert os.path.exists(str(tmp_path / "m.manifest.json"))


def test_manifest_hash_tracks_checkpoint_bytes(tiny_ckpt, tmp_path):
    import shutil
    ck = tmp_path / "ck"
    shutil.copytree(tiny_ckpt, ck)
    m1 = write_manifest(tmp_path / "a.json", "x", {}, 0, ckpt_dir=str(ck))
    m2 = write_manifest(tmp_path / "b.json", "x", {}, 0, ckpt_dir=str(ck))
    assert m1["checkpoint_sha256"] == m2["checkpoint_sha256"]
    data = bytearray((ck / "weights.bin").read_bytes())
    data[-1] ^= 1
    (ck / "weights.bin").write_bytes(bytes(data))
    m3 = write_manifest(tmp_path / "c.json", "x", {}, 0, ckpt_dir=str(ck))
    assert m3["checkpoint_sha256"] != m1["checkpoint_sha256"]


def test_manifest_timestamp_from_source_date_epoch(tmp_path):
    m = write_manifest(tmp_path / "m.json", "x", {"a": 1}, 9)
    assert m["started"] == m["finished"] == "2023-11-14T22:13:20+00:00"
    assert json.loads((tmp_path / "m.json").read_text()) == m


# end-to-end smoke

def test_full_pipeline_smoke(tmp_path):
    t0 = time.process_time()
    corpus, ck, ts = (str(tmp_path / d) for d in ("corpus", "ck", "ts"))
    assert main(["synth-corpus", corpus, "--minutes", "2", "--seed", "0"]) == 0
    assert main(["train", corpus, ck, "--max-steps", "200", "--seed", "0"]) == 0
    assert main(["synth-testset", ts, "--count", "2", "--min-dur", "2", "--max-dur",
                 "2.5"]) == 0
    mix = str(tmp_path / "mix.wav")
    assert main(["mix", os.path.join(ts, "t0000_clean.wav"), os.path.join(ts, "t0000_noise.wav"),
                 mix, "--snr", "0"]) == 0
    out = str(tmp_path / "enh.wav")
    assert main(["enhance", ck, mix, out]) == 0
    assert len(read_wav(out)) == len(read_wav(mix))
    report = str(tmp_path / "report.csv")
    assert main(["evaluate", ck, ts, report, "--iters", "100"]) == 0
    rows = list(csv.DictReader(open(report)))
    assert [r["utterance_id"] for r in rows] == ["t0000", "t0001"]
    assert all(np.isfinite(float(r["si_sdr_enhanced"])) for r in rows)
    assert time.process_time() - t0 < 600
