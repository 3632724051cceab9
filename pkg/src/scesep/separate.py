"""Mixture separation: embed, cluster the T-F embeddings, mask, resynthesise.

Nothing here takes the speaker table, so inference cannot depend on which
speakers the model was trained on.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import dsp
from .dsp import DspConfig, Spectrogram, Waveform
from .sce import EmbeddingNet, embed


@dataclass
class ClusterAssignment:
    labels: np.ndarray  # N int cluster ids
    centroids: np.ndarray  # K x E
    inertia: float
    history: list[float] = field(default_factory=list)  # inertia after each assignment step
    n_iter: int = 0

    def signed(self, shape=None) -> np.ndarray:
        """Labels as a {-1, +1} one-hot array of shape (*shape, K)."""
        K = len(self.centroids)
        Y = -np.ones((len(self.labels), K), dtype=np.float32)
        Y[np.arange(len(self.labels)), self.labels] = 1.0
        return Y.reshape(*(shape or (len(self.labels),)), K)


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    # direct differences; the expanded |x|^2 - 2x.c + |c|^2 form loses monotonicity to cancellation
    d = np.empty((len(X), len(C)))
    for k, c in enumerate(C):
        diff = X - c
        d[:, k] = np.einsum("ij,ij->i", diff, diff)
    return d


def _kmeans_pp(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    N = len(X)
    centers = [X[rng.integers(N)]]
    closest = _sq_dists(X, centers[0][None])[:, 0]
    for _ in range(1, K):
        total = closest.sum()
        if total <= 0:
            j = int(rng.integers(N))
        else:
            j = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            j = min(j, N - 1)
        centers.append(X[j])
        closest = np.minimum(closest, _sq_dists(X, X[j][None])[:, 0])
    return np.array(centers)


def kmeans(vectors, K: int, rng: np.random.Generator | int | None = 0,
           max_iter: int = 300, tol: float = 1e-6) -> ClusterAssignment:
    """Lloyd's algorithm from a k-means++ start.

    An emptied cluster is moved onto the point farthest from its current
    centroid. Stops when no centroid moves more than ``tol`` or after
    ``max_iter`` iterations.
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"kmeans expects an N x E array, got shape {X.shape}")
    N = len(X)
    if K < 1 or N < K:
        raise ValueError(f"kmeans needs N >= K >= 1, got N={N}, K={K}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    C = _kmeans_pp(X, K, rng)
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(X, C)
        lab = np.argmin(d, axis=1)
        history.append(float(d[np.arange(N), lab].sum()))
        newC = C.copy()
        counts = np.bincount(lab, minlength=K)
        for k in range(K):
            if counts[k]:
                newC[k] = X[lab == k].mean(axis=0)
        for k in np.flatnonzero(counts == 0):
            far = int(np.argmax(d[np.arange(N), lab]))
            newC[k] = X[far]
            lab[far] = k
            d[far, :] = 0
        shift = np.max(np.linalg.norm(newC - C, axis=1))
        C = newC
        if shift < tol:
            break
    d = _sq_dists(X, C)
    lab = np.argmin(d, axis=1)
    inertia = float(d[np.arange(N), lab].sum())
    history.append(inertia)
    return ClusterAssignment(lab, C, inertia, history, it)


def masks_from_clusters(signed_labels: np.ndarray) -> np.ndarray:
    """(Y + 1) / 2 for a T x F x K {-1, +1} labelling -> K x T x F binary masks."""
    Y = np.asarray(signed_labels)
    return np.moveaxis((Y + 1) / 2, -1, 0)


def reconstruct(X: Spectrogram, mask: np.ndarray, preemphasis: float = 0.95) -> Waveform:
    """Mask the mixture magnitude (keeping its phase), invert the STFT, undo preemphasis."""
    if mask.shape != X.magnitude.shape:
        raise ValueError(f"mask shape {mask.shape} != spectrogram shape {X.magnitude.shape}")
    masked = Spectrogram(X.magnitude * mask, X.phase, X.window_size, X.hop, X.sample_rate, X.length)
    return dsp.deemphasis(dsp.istft(masked), preemphasis)


@dataclass
class SeparationResult:
    sources: list[Waveform]
    spectrograms: list[Spectrogram]
    assignment: ClusterAssignment
    embeddings: np.ndarray = field(repr=False)  # T x F x E


def separate_spectrogram(net: EmbeddingNet, X: Spectrogram, K: int, cfg: DspConfig,
                         seed: int = 0) -> SeparationResult:
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    feats = dsp.normalize_input(X.magnitude)[None].astype(np.float32)
    with ag.no_grad():
        V = embed(net, feats).data[0]
    T, F, E = V.shape
    assign = kmeans(V.reshape(T * F, E), K, np.random.default_rng(seed))
    masks = masks_from_clusters(assign.signed((T, F)))
    specs = [Spectrogram(X.magnitude * m, X.phase, X.window_size, X.hop, X.sample_rate, X.length) for m in masks]
    sources = [reconstruct(X, m, cfg.preemphasis) for m in masks]
    return SeparationResult(sources, specs, assign, V)


def separate_waveform(net: EmbeddingNet, w: Waveform, K: int = 2, cfg: DspConfig = DspConfig(),
                      seed: int = 0) -> SeparationResult:
    if w.sample_rate != cfg.sample_rate:
        w = dsp.resample(w, cfg.sample_rate)
    if len(w) < cfg.window:
        raise ValueError(f"audio of {len(w)} samples is shorter than one STFT window ({cfg.window})")
    X = dsp.stft(dsp.preemphasis(w, cfg.preemphasis), cfg.window, cfg.hop)
    return separate_spectrogram(net, X, K, cfg, seed)


def separate_file(net: EmbeddingNet, wav_path, K: int = 2, cfg: DspConfig = DspConfig(),
                  seed: int = 0) -> SeparationResult:
    return separate_waveform(net, dsp.read_wav(wav_path), K, cfg, seed)


def write_sources(result: SeparationResult, wav_path, out_dir=None) -> list[Path]:
    """Write ``<stem>.source<k>.wav`` for k = 0..K-1."""
    wav_path = Path(wav_path)
    out_dir = Path(out_dir) if out_dir else wav_path.parent
    paths = []
    for k, w in enumerate(result.sources):
        p = out_dir / f"{wav_path.stem}.source{k}.wav"
        dsp.write_wav(p, w)
        paths.append(p)
    return paths
