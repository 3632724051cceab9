import csv

import numpy as np
import pytest

from scesep import corpus, dsp, synth
from scesep.checkpoint import load_checkpoint
from scesep.cli import main

TINY = """
[model]
T = 20
E = 6
H = 16
B = 4
[dsp]
window = 256
hop = 128
[train]
val_every = 25
val_batches = 1
checkpoint_every = 100
prefetch = false
"""


@pytest.fixture(scope="module")
def env(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    spk = synth.band_speakers([500, 1500, 2500, 3500])
    root, meta = synth.write_corpus(base / "corpus", spk, utterances=8, seconds=1.5)
    cfg = base / "tiny.ini"
    cfg.write_text(TINY + f"[corpus]\ncorpus = {root}\nmetadata = {meta}\n")
    return base, cfg, root, meta


@pytest.fixture(scope="module")
def trained(env):
    base, cfg, _, _ = env
    out = base / "run"
    assert main(["train", "--config", str(cfg), "--steps", "200", "--seed", "1", "--out", str(out)]) == 0
    return out


def _genders(manifest, root, meta):
    reg = corpus.build_registry(root, meta)
    return [[reg.by_index(i).gender for i in s.speakers] for s in corpus.read_manifest(manifest, reg)]


def test_mix_fm(env):
    base, cfg, root, meta = env
    m = base / "fm.txt"
    assert main(["mix", "--config", str(cfg), "--type", "fm", "--count", "10", "--seed", "7", "--manifest", str(m)]) == 0
    lines = m.read_text().splitlines()
    assert len(lines) == 10
    assert all(sorted(g) == ["F", "M"] for g in _genders(m, root, meta))


def test_mix_is_seeded(env):
    base, cfg, _, _ = env
    a, b, c = base / "a.txt", base / "b.txt", base / "c.txt"
    for path, seed in ((a, "3"), (b, "3"), (c, "4")):
        main(["mix", "--config", str(cfg), "--type", "random", "--count", "6", "--seed", seed, "--manifest", str(path)])
    assert a.read_text() == b.read_text()
    assert a.read_text() != c.read_text()


def test_mix_random3_and_wavs(env):
    base, cfg, _, _ = env
    out = base / "r3"
    assert main(["mix", "--config", str(cfg), "--type", "random3", "--count", "2", "--seed", "1", "--out", str(out),
                 "--wavs"]) == 0
    lines = (out / "mixes.random3.txt").read_text().splitlines()
    assert all(len(line.split(",")) == 4 for line in lines)
    assert (out / "wavs" / "random3-0000.wav").exists()
    assert (out / "wavs" / "random3-0000.ref2.wav").exists()


def test_mix_infeasible_type(tmp_path, capsys):
    root, meta = synth.write_corpus(tmp_path / "c", synth.band_speakers([500, 1500]), utterances=3, seconds=1.0)
    rc = main(["mix", "--corpus", str(root), "--metadata", str(meta), "--type", "ff", "--count", "1",
               "--out", str(tmp_path)])
    assert rc != 0
    assert "ff" in capsys.readouterr().err


def test_train_smoke(trained):
    assert (trained / "final.ckpt").exists() and (trained / "best.ckpt").exists()
    assert (trained / "step-00000100.ckpt").exists()
    lines = (trained / "train.log").read_text().splitlines()
    assert len(lines) == 200
    for i, line in enumerate(lines, 1):
        cols = line.split("\t")
        assert cols[0] == str(i) and len(cols) in (3, 4)
        assert all(np.isfinite(float(c)) for c in cols[1:])
    assert float(lines[-1].split("\t")[2]) < float(lines[0].split("\t")[2])
    ck = load_checkpoint(trained / "final.ckpt")
    assert ck.step == 200 and ck.config.model.C == 4 and ck.config.model.F == 129
    assert [r[0] for r in ck.registry] == ["1", "2", "3", "4"]


def test_train_resume_continues_numbering(env, trained):
    base, cfg, _, _ = env
    out = base / "resumed"
    assert main(["train", "--config", str(cfg), "--steps", "210", "--out", str(out),
                 "--checkpoint", str(trained / "final.ckpt")]) == 0
    lines = (out / "train.log").read_text().splitlines()
    assert [int(line.split("\t")[0]) for line in lines] == list(range(201, 211))
    assert load_checkpoint(out / "final.ckpt").step == 210


@pytest.mark.parametrize("k", [2, 3])
def test_separate_writes_k_files(env, trained, tmp_path, k):
    x = np.random.default_rng(0).uniform(-0.3, 0.3, 8000)
    dsp.write_wav(tmp_path / "in.wav", dsp.Waveform(x, 10000))
    assert main(["separate", "--checkpoint", str(trained / "final.ckpt"), "--k", str(k), "--seed", "5",
                 "--out", str(tmp_path / "o"), str(tmp_path / "in.wav")]) == 0
    files = sorted(p.name for p in (tmp_path / "o").iterdir())
    assert files == [f"in.source{i}.wav" for i in range(k)]


def test_separate_deterministic(trained, tmp_path):
    x = np.random.default_rng(1).uniform(-0.3, 0.3, 8000)
    dsp.write_wav(tmp_path / "in.wav", dsp.Waveform(x, 10000))
    outs = []
    for d in ("a", "b"):
        main(["separate", "--checkpoint", str(trained / "final.ckpt"), "--seed", "9", "--out", str(tmp_path / d),
              str(tmp_path / "in.wav")])
        outs.append([(tmp_path / d / f"in.source{i}.wav").read_bytes() for i in range(2)])
    assert outs[0] == outs[1]


def test_separate_missing_checkpoint(tmp_path, capsys):
    assert main(["separate", "--checkpoint", str(tmp_path / "none.ckpt"), str(tmp_path / "x.wav")]) != 0
    assert "checkpoint" in capsys.readouterr().err


def test_separate_bin_mismatch(env, trained, tmp_path, capsys):
    wide = tmp_path / "wide.ini"
    wide.write_text("[dsp]\nwindow = 512\nhop = 256\n")
    rc = main(["separate", "--config", str(wide), "--checkpoint", str(trained / "final.ckpt"), str(tmp_path / "x.wav")])
    assert rc != 0
    err = capsys.readouterr().err
    assert "F=129" in err and "F=257" in err


def _csv_rows(path):
    with open(path) as f:
        return list(csv.reader(f))


def test_evaluate_model_and_ideal(env, trained, capsys):
    base, cfg, _, _ = env
    mf = base / "eval.txt"
    rows = []
    for t, seed in (("fm", "1"), ("ff", "2")):
        p = base / f"e_{t}.txt"
        main(["mix", "--config", str(cfg), "--type", t, "--count", "3", "--seed", seed, "--manifest", str(p)])
        rows += p.read_text().splitlines()
    mf.write_text("\n".join(rows) + "\n")
    capsys.readouterr()
    assert main(["evaluate", "--checkpoint", str(trained / "final.ckpt"), "--manifest", str(mf),
                 "--out", str(base / "ev")]) == 0
    out = capsys.readouterr().out
    assert "fm" in out and "ff" in out and "all" in out and "in-set mixes: 6/6" in out
    model = _csv_rows(base / "ev" / "report.csv")
    assert {r[1] for r in model if r[0] == "AGG"} == {"fm", "ff", "all"}
    assert main(["evaluate", "--ideal-mask", "--config", str(cfg), "--manifest", str(mf),
                 "--out", str(base / "ev")]) == 0
    ideal = _csv_rows(base / "ev" / "report.ideal.csv")
    agg = lambda rows: {r[1]: float(r[5]) for r in rows if r[0] == "AGG"}
    for t, v in agg(model).items():
        assert agg(ideal)[t] >= v


def test_evaluate_unresolvable_mix_fails(env, trained, capsys):
    base, cfg, _, _ = env
    bad = base / "bad.txt"
    bad.write_text("m0,1:1-0000:0,99:99-0000:0\n")
    assert main(["evaluate", "--checkpoint", str(trained / "final.ckpt"), "--manifest", str(bad),
                 "--out", str(base / "ev2")]) != 0
    assert "bad.txt:1" in capsys.readouterr().err


def test_bench_runs(capsys):
    assert main(["bench", "--count", "2"]) == 0
    out = capsys.readouterr().out
    assert "sce" in out and "affinity" in out


def test_seed_range(capsys):
    assert main(["bench", "--seed", str(2**64)]) == 2
