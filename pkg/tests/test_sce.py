import math

import numpy as np
import pytest

from scesep import autograd as ag
from scesep import nn, sce
from scesep.autograd import Tensor
from scesep.corpus import Batch

MICRO = sce.ModelConfig(T=3, F=4, E=2, H=4, layers=2, B=2, C=5, M=2)


def random_batch(cfg: sce.ModelConfig, seed: int) -> Batch:
    rng = np.random.default_rng(seed)
    B, T, F, M = cfg.B, cfg.T, cfg.F, cfg.M
    feats = rng.random((B, T, F)).astype(np.float32)
    Y = -np.ones((B, T, F, M), dtype=np.float32)
    np.put_along_axis(Y, rng.integers(M, size=(B, T, F, 1)), 1.0, axis=-1)
    spk = np.stack([rng.choice(cfg.C, M, replace=False) for _ in range(B)])
    return Batch(feats, Y, spk, np.zeros((B, M, T, F), np.float32))


def test_model_config_validation():
    assert sce.ModelConfig() == sce.ModelConfig(T=40, F=257, E=40, H=600, layers=2, B=256, C=251, M=2)
    with pytest.raises(ValueError):
        sce.ModelConfig(H=5)
    with pytest.raises(ValueError):
        sce.ModelConfig(E=0)


def test_parameter_names_and_shapes():
    m = sce.init_model(MICRO, seed=0)
    names = list(m.named_parameters())
    assert names[:3] == ["r1.fwd.W_x", "r1.fwd.W_h", "r1.fwd.b"]
    assert names[-2:] == ["dense.bias", "speakers"]
    p = m.named_parameters()
    assert p["r1.fwd.W_x"].shape == (8, 4)  # 4 gates x H/2, F inputs
    assert p["r2.bwd.W_x"].shape == (8, 4)  # input is the previous layer's 2 x H/2
    assert p["dense.w"].shape == (1, 4, 8)
    assert p["speakers"].shape == (5, 2)
    assert all(t.dtype == np.float32 for t in p.values())


def test_init_is_seeded():
    a = sce.init_model(MICRO, seed=3).named_parameters()
    b = sce.init_model(MICRO, seed=3).named_parameters()
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)


def test_embed_shape_and_bin_check():
    m = sce.init_model(MICRO, seed=0)
    V = sce.embed(m.net, np.zeros((2, 3, 4), np.float32))
    assert V.shape == (2, 3, 4, 2)
    with pytest.raises(ValueError, match="F=5"):
        sce.embed(m.net, np.zeros((2, 3, 5), np.float32))


def test_gather_speakers_keeps_order():
    table = Tensor(np.arange(10.0).reshape(5, 2))
    out = sce.gather_speakers(table, [[3, 1]])
    np.testing.assert_array_equal(out.data[0], [[6, 7], [2, 3]])
    with pytest.raises(IndexError):
        sce.gather_speakers(table, [[5, 0]])


def test_scalar_case_oracle():
    # -(1/2) [log sig(2) + log sig(1)] by direct evaluation
    expect = -0.5 * (math.log(1 / (1 + math.exp(-2))) + math.log(1 / (1 + math.exp(-1))))
    assert sce.per_bin_loss(np.array([2.0, -1.0]), np.array([1.0, -1.0])) == pytest.approx(expect, abs=1e-12)
    Vi = Tensor(np.array([[[[1.0, 0.0]]]]), dtype=np.float64)
    Vo = Tensor(np.array([[[2.0, 5.0], [-1.0, 3.0]]]), dtype=np.float64)
    loss = sce.sce_loss(Vi, Vo, np.array([1.0, -1.0]).reshape(1, 1, 1, 2))
    assert loss.item() == pytest.approx(expect, abs=1e-12)


def test_loss_matches_per_bin_oracle():
    rng = np.random.default_rng(0)
    B, T, F, E, M = 2, 3, 4, 5, 3
    Vi, Vo = rng.standard_normal((B, T, F, E)), rng.standard_normal((B, M, E))
    Y = np.where(rng.random((B, T, F, M)) < 0.5, -1.0, 1.0)
    D = np.einsum("btfe,bme->btfm", Vi, Vo)
    per_bin = sce.per_bin_loss(D, Y)
    ti, to = Tensor(Vi, dtype=np.float64), Tensor(Vo, dtype=np.float64)
    assert sce.sce_loss(ti, to, Y).item() == pytest.approx(per_bin.sum() / B, rel=1e-12)
    assert sce.sce_loss(ti, to, Y, per_bin_mean=True).item() == pytest.approx(per_bin.mean(), rel=1e-12)


def test_loss_input_validation():
    Vi, Vo = Tensor(np.zeros((1, 2, 3, 4))), Tensor(np.zeros((1, 2, 4)))
    with pytest.raises(ValueError, match="-1 and \\+1"):
        sce.sce_loss(Vi, Vo, np.zeros((1, 2, 3, 2)))
    with pytest.raises(ValueError):
        sce.sce_loss(Vi, Vo, np.ones((1, 2, 3, 3)))
    with pytest.raises(ValueError):
        sce.sce_loss(Vi, Tensor(np.zeros((1, 2, 5))), np.ones((1, 2, 3, 2)))


def test_train_step_reduces_loss_on_fixed_batch():
    m = sce.init_model(MICRO, seed=1)
    adam = nn.AdamState(lr=1e-2)
    batch = random_batch(MICRO, 0)
    first = sce.train_step(m, batch, adam)
    for _ in range(80):
        last = sce.train_step(m, batch, adam)
    assert last < 0.5 * first
    assert adam.step == 81
    assert all(np.all(p.grad == 0) for p in m.named_parameters().values())


def test_train_step_non_finite_aborts_without_update():
    m = sce.init_model(MICRO, seed=1)
    m.named_parameters()["dense.bias"].data[0] = np.nan
    before = {k: v.data.copy() for k, v in m.named_parameters().items()}
    adam = nn.AdamState()
    with pytest.raises(FloatingPointError):
        sce.train_step(m, random_batch(MICRO, 0), adam)
    assert adam.step == 0
    for k, v in m.named_parameters().items():
        np.testing.assert_array_equal(v.data, before[k])


def test_speaker_table_receives_gradient_only_for_sampled_rows():
    m = sce.init_model(MICRO, seed=2)
    batch = random_batch(MICRO, 3)
    ag.backward(sce.forward_loss(m, batch))
    used = set(batch.speaker_indices.ravel().tolist())
    g = m.speakers.grad
    for c in range(MICRO.C):
        assert (np.abs(g[c]).sum() > 0) == (c in used)


def test_cosine_report():
    V = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    Y = np.array([[1, -1], [1, -1], [-1, 1], [-1, 1]])
    r = sce.cosine_separation_report(V, Y)
    assert r["within"] == pytest.approx(1.0)
    assert r["across"] == pytest.approx(0.0)
    assert r["n_vectors"] == 3 and r["counts"] == [2, 1]


def test_affinity_matrix_sorted_by_label():
    rng = np.random.default_rng(0)
    V = rng.standard_normal((50, 3))
    Y = np.where(rng.random((50, 2)) < 0.5, 1, -1)
    A, lab = sce.affinity_matrix(V, Y, max_points=20)
    assert A.shape == (20, 20) and np.all(np.diff(lab) >= 0)
    np.testing.assert_allclose(np.diag(A), 1.0)


def test_prefetcher_yields_steps_in_order_and_surfaces_errors():
    pf = sce.BatchPrefetcher(lambda s: s * 10, 3, 7)
    assert [pf.get() for _ in range(4)] == [(3, 30), (4, 40), (5, 50), (6, 60)]
    pf.close()

    def bad(s):
        raise RuntimeError("boom")

    pf = sce.BatchPrefetcher(bad, 0, 3)
    with pytest.raises(RuntimeError, match="boom"):
        pf.get()
    pf.close()


def _fit(steps, state=None, prefetch=False, lines=None, tags=None, val=True):
    state = state or sce.TrainState(sce.init_model(MICRO, seed=0), nn.AdamState(lr=1e-2))
    tc = sce.TrainConfig(steps=steps, val_every=2, val_batches=1, checkpoint_every=3, prefetch=prefetch)
    return sce.fit(state, lambda s: random_batch(MICRO, s), tc,
                   (lambda i: random_batch(MICRO, 1000 + i)) if val else None,
                   lines.append if lines is not None else None,
                   (lambda st, tag: tags.append((st.step, tag))) if tags is not None else None)


def test_fit_log_lines_and_checkpoint_tags():
    lines, tags = [], []
    state = _fit(6, lines=lines, tags=tags)
    assert state.step == 6 and len(lines) == 6
    for i, line in enumerate(lines, 1):
        cols = line.split("\t")
        assert cols[0] == str(i)
        float(cols[1]), float(cols[2])
        assert len(cols) == (4 if i % 2 == 0 else 3)
    assert (3, "periodic") in tags and (6, "periodic") in tags
    assert tags[-1] == (6, "final")
    assert any(t == "best" for _, t in tags)


def test_fit_prefetch_matches_inline():
    a = _fit(4, prefetch=False)
    b = _fit(4, prefetch=True)
    assert [h[1] for h in a.history] == [h[1] for h in b.history]


def test_fit_early_stopping():
    state = sce.TrainState(sce.init_model(MICRO, seed=0), nn.AdamState(lr=0.0))
    tc = sce.TrainConfig(steps=100, val_every=1, val_batches=1, patience=3, checkpoint_every=0, prefetch=False)
    sce.fit(state, lambda s: random_batch(MICRO, 0), tc, lambda i: random_batch(MICRO, 0))
    # lr 0: validation never improves after the first round
    assert state.step == 4
