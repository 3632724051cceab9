import time

import numpy as np
import pytest

from scesep import corpus, nn, sce, synth
from scesep.dsp import DspConfig

from _util import TOY_BANDS

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(autouse=True)
def _fresh_audio_cache():
    # corpora are rewritten under recycled tmp paths; never serve stale audio
    corpus._load_resampled.cache_clear()
    yield


TOY_DSP = DspConfig(sample_rate=10000, window=256, hop=128, preemphasis=0.95)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    root, meta = synth.write_corpus(root, synth.band_speakers(TOY_BANDS), utterances=12, seconds=2.0, sr=10000)
    reg = corpus.build_registry(root, meta)
    return reg, corpus.split_utterances(reg), root, meta


@pytest.fixture(scope="session")
def voice_corpus(tmp_path_factory):
    """Six female and six male speech-like voices, recorded at 16 kHz."""
    root = tmp_path_factory.mktemp("voices")
    root, meta = synth.write_corpus(root, synth.voice_speakers(6, 6), utterances=5, seconds=3.0, sr=16000)
    reg = corpus.build_registry(root, meta)
    return reg, corpus.split_utterances(reg), root, meta


@pytest.fixture(scope="session")
def toy_trained(toy_corpus):
    """The toy end-to-end model, trained once per session (B=8, T=40, F=129, E=10, H=64)."""
    corpus._load_resampled.cache_clear()
    reg, splits, _, _ = toy_corpus
    mc = sce.ModelConfig(T=40, F=TOY_DSP.bins, E=10, H=64, B=8, C=reg.C)
    state = sce.TrainState(sce.init_model(mc, seed=0), nn.AdamState(lr=1e-3))

    def make_batch(step):
        return corpus.sample_batch(reg, splits, "train", "random", mc.B, mc.T,
                                   np.random.default_rng([0, step]), TOY_DSP)

    tc = sce.TrainConfig(steps=2000, val_every=10**9, checkpoint_every=0, prefetch=False)
    t0 = time.perf_counter()
    sce.fit(state, make_batch, tc)
    state.train_seconds = time.perf_counter() - t0
    return state
