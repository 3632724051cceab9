import json
import struct

import numpy as np
import pytest

from scesep import nn, sce
from scesep.checkpoint import (MAGIC, CheckpointError, adam_from_checkpoint, load_checkpoint,
                               model_from_checkpoint, model_to_checkpoint, save_checkpoint)
from scesep.config import RunConfig, format_config, parse_config

MC = sce.ModelConfig(T=3, F=5, E=2, H=4, B=1, C=3)


def _cfg():
    return RunConfig().replace("model", **{k: getattr(MC, k) for k in MC.field_names()})


def test_config_defaults_match_reference_values():
    cfg = RunConfig()
    m, d = cfg.model, cfg.dsp
    assert (m.T, m.B, m.H, m.layers, m.M) == (40, 256, 600, 2, 2)
    assert (d.sample_rate, d.window, d.hop, d.preemphasis) == (10000, 512, 256, 0.95)
    assert m.F == d.bins
    assert (cfg.corpus.train_fraction, cfg.corpus.validate_fraction, cfg.corpus.test_fraction) == (0.8, 0.1, 0.1)


def test_emitted_config_flags_unstated_values():
    text = format_config(RunConfig())
    lines = {ln.split("=")[0].strip(): ln for ln in text.splitlines() if "=" in ln}
    for key in ("E", "lr", "clip", "steps", "per_bin_mean"):
        assert lines[key].endswith("# paper-unstated")
    for key in ("T", "B", "H", "window", "hop", "preemphasis", "sample_rate"):
        assert "paper-unstated" not in lines[key]


def test_config_round_trip_is_lossless():
    cfg = RunConfig().replace("train", lr=3.3e-4, seed=2**63 + 5, prefetch=False)
    cfg = cfg.replace("corpus", corpus="/data/x y", metadata="m.txt")
    assert parse_config(format_config(cfg)) == cfg


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown key"):
        parse_config("[model]\nZ = 3\n")
    with pytest.raises(ValueError, match="section"):
        parse_config("[nope]\na = 1\n")
    assert parse_config("[model]\nE = 7  # comment\n").model.E == 7


def test_round_trip_bit_exact(tmp_path):
    model = sce.init_model(MC, seed=4)
    adam = nn.AdamState(lr=0.01)
    for p in model.named_parameters().values():
        p.grad[...] = np.random.default_rng(0).standard_normal(p.shape)
    nn.adam_step(adam, model.named_parameters())
    save_checkpoint(tmp_path / "a.ckpt", model_to_checkpoint(model, _cfg(), step=7, adam=adam,
                                                             extra_state={"best_val": 1.5, "bad_rounds": 2}))
    ck = load_checkpoint(tmp_path / "a.ckpt")
    assert ck.step == 7 and ck.config == _cfg()
    assert ck.train_state["best_val"] == 1.5
    back = model_from_checkpoint(ck)
    for k, p in model.named_parameters().items():
        q = back.named_parameters()[k]
        assert q.data.dtype == np.float32
        assert p.data.tobytes() == q.data.tobytes()
    ad = adam_from_checkpoint(ck)
    assert ad.step == 1 and ad.lr == 0.01
    for k in adam.m:
        assert ad.m[k].tobytes() == adam.m[k].tobytes()
        assert ad.v[k].tobytes() == adam.v[k].tobytes()


def test_file_layout(tmp_path):
    model = sce.init_model(MC, seed=0)
    save_checkpoint(tmp_path / "a.ckpt", model_to_checkpoint(model, _cfg()))
    raw = (tmp_path / "a.ckpt").read_bytes()
    assert raw[:8] == MAGIC == b"SCESEP01"
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n].decode("utf-8"))
    first = header["tensors"][0]
    size = 4 * int(np.prod(first["shape"]))
    payload = raw[16 + n + first["offset"]:16 + n + first["offset"] + size]
    np.testing.assert_array_equal(np.frombuffer(payload, "<f4").reshape(first["shape"]),
                                  model.named_parameters()[first["name"]].data)
    total = sum(4 * int(np.prod(t["shape"])) for t in header["tensors"])
    assert len(raw) == 16 + n + total


def test_corrupt_files(tmp_path):
    model = sce.init_model(MC, seed=0)
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, model_to_checkpoint(model, _cfg()))
    raw = path.read_bytes()
    (tmp_path / "magic").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(CheckpointError, match="SCESEP01"):
        load_checkpoint(tmp_path / "magic")
    (tmp_path / "trunc").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "trunc")
    (tmp_path / "trunc2").write_bytes(raw[:40])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "trunc2")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    header["format_version"] = 99
    hb = json.dumps(header).encode()
    (tmp_path / "ver").write_bytes(MAGIC + struct.pack("<Q", len(hb)) + hb + raw[16 + n:])
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(tmp_path / "ver")


def test_bin_mismatch_names_both_values(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", model_to_checkpoint(sce.init_model(MC, seed=0), _cfg()))
    with pytest.raises(CheckpointError, match=r"F=5.*F=129"):
        model_from_checkpoint(load_checkpoint(tmp_path / "a.ckpt"), F=129)


def test_closed_name_set(tmp_path):
    ck = model_to_checkpoint(sce.init_model(MC, seed=0), _cfg())
    ck.tensors["extra.w"] = np.zeros(2, np.float32)
    with pytest.raises(CheckpointError, match="extra.w"):
        model_from_checkpoint(ck)
