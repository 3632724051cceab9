"""Embedding network, speaker table, source-contrastive loss and training loop."""
from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Tensor

log = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    T: int = 40
    F: int = 257
    E: int = 40  # paper-unstated
    H: int = 600  # total BLSTM width, split evenly over the two directions
    layers: int = 2
    B: int = 256
    C: int = 251
    M: int = 2
    per_bin_mean: bool = False  # paper-unstated: mean over (t,f) instead of sum

    def __post_init__(self):
        for f in ("T", "F", "E", "H", "layers", "B", "C", "M"):
            if getattr(self, f) <= 0:
                raise ValueError(f"ModelConfig.{f} must be positive, got {getattr(self, f)}")
        if self.H % 2:
            raise ValueError(f"H must be even (two directions), got {self.H}")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class EmbeddingNet:
    """Stacked BLSTMs followed by the time-distributed linear map to F x E."""

    blstms: list[nn.BlstmLayer]
    dense: nn.DenseConv
    F: int
    E: int

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.blstms, 1):
            out.update(layer.named(f"r{i}"))
        out.update(self.dense.named("dense"))
        return out


@dataclass
class SceModel:
    net: EmbeddingNet
    speakers: Tensor  # C x E
    config: ModelConfig

    def named_parameters(self) -> dict[str, Tensor]:
        return {**self.net.named_parameters(), "speakers": self.speakers}


def init_model(config: ModelConfig, seed: int = 0) -> SceModel:
    rng = np.random.default_rng(seed)
    blstms, d_in = [], config.F
    for _ in range(config.layers):
        blstms.append(nn.init_blstm(rng, d_in, config.H))
        d_in = config.H
    dense = nn.init_dense(rng, d_in, config.F * config.E)
    table = nn.glorot_uniform(rng, (config.C, config.E), config.C, config.E)
    return SceModel(EmbeddingNet(blstms, dense, config.F, config.E), Tensor(table, True), config)


def embed(net: EmbeddingNet, features) -> Tensor:
    """B x T x F features -> B x T x F x E input embeddings (unnormalised)."""
    x = features if isinstance(features, Tensor) else Tensor(features)
    if x.ndim != 3:
        raise ValueError(f"features must be B x T x F, got shape {x.shape}")
    if x.shape[2] != net.F:
        raise ValueError(f"feature bins F={x.shape[2]} do not match the model's F={net.F}")
    r = x
    for layer in net.blstms:
        r = nn.blstm_forward(layer, r)
    return nn.dense_forward(net.dense, r, net.F, net.E)


def gather_speakers(table: Tensor, speaker_indices) -> Tensor:
    """Rows of the speaker table for each mix, B x M x E, order preserved."""
    idx = np.asarray(speaker_indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"speaker index out of range [0, {table.shape[0]}): {idx.min()}..{idx.max()}")
    return ag.gather_rows(table, idx)


def sce_loss(V_i: Tensor, V_o: Tensor, Y, per_bin_mean: bool = False) -> Tensor:
    """Source-contrastive loss.

    ``D[b,t,f,m] = <V_i[b,t,f], V_o[b,m]>``; each bin contributes
    ``-(1/M) sum_m log sigmoid(Y * D)``. Bins are summed and the batch is
    averaged (or bins averaged too when ``per_bin_mean``).
    """
    B, T, F, E = V_i.shape
    if V_o.ndim != 3 or V_o.shape[0] != B or V_o.shape[2] != E:
        raise ValueError(f"V_o shape {V_o.shape} incompatible with V_i {V_i.shape}")
    M = V_o.shape[1]
    Y = np.asarray(Y.data if isinstance(Y, Tensor) else Y)
    if Y.shape != (B, T, F, M):
        raise ValueError(f"labels shape {Y.shape} != {(B, T, F, M)}")
    if not np.all(np.abs(Y) == 1):
        raise ValueError("labels must contain only -1 and +1")
    D = ag.matmul(ag.reshape(V_i, (B, T * F, E)), ag.transpose(V_o))
    Z = D * Tensor(Y.reshape(B, T * F, M), dtype=V_i.dtype)
    total = ag.sum_(ag.log_sigmoid(Z))
    scale = -1.0 / (M * B * (T * F if per_bin_mean else 1))
    return total * scale


def per_bin_loss(D: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Loss of each bin from raw dot products, ``-(1/M) sum_m log sigmoid(Y*D)``."""
    z = np.asarray(Y) * np.asarray(D)
    return -np.mean(np.minimum(z, 0) - np.log1p(np.exp(-np.abs(z))), axis=-1)


def forward_loss(model: SceModel, batch) -> Tensor:
    V_i = embed(model.net, batch.features)
    V_o = gather_speakers(model.speakers, batch.speaker_indices)
    return sce_loss(V_i, V_o, batch.labels, model.config.per_bin_mean)


def train_step(model: SceModel, batch, adam: nn.AdamState, clip: float = 5.0) -> float:
    """Forward, backward, clip and Adam update; returns the loss before the update."""
    params = model.named_parameters()
    loss = forward_loss(model, batch)
    value = loss.item()
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite training loss {value}")
    for p in params.values():
        p.zero_grad()
    ag.backward(loss)
    norm = nn.clip_grad_norm(params, clip)
    if not np.isfinite(norm):
        for p in params.values():
            p.zero_grad()
        raise FloatingPointError("non-finite gradient norm")
    nn.adam_step(adam, params)
    return value


def eval_loss(model: SceModel, batch) -> float:
    with ag.no_grad():
        return forward_loss(model, batch).item()


# ---------------------------------------------------------------------------
# diagnostics


def cosine_separation_report(V, Y) -> dict:
    """Mean cosine similarity of embedding pairs from the same vs different dominant source.

    ``V`` is (..., E) and ``Y`` (..., M) with +1 marking the dominant source.
    Self-pairs and zero vectors are left out.
    """
    V = np.asarray(V.data if isinstance(V, Tensor) else V, dtype=np.float64)
    E = V.shape[-1]
    Y = np.asarray(Y)
    V = V.reshape(-1, E)
    lab = np.argmax(Y.reshape(-1, Y.shape[-1]), axis=-1)
    norms = np.linalg.norm(V, axis=1)
    keep = norms > 0
    U = V[keep] / norms[keep, None]
    lab = lab[keep]
    groups = [U[lab == k] for k in range(Y.shape[-1])]
    sums = [g.sum(axis=0) for g in groups]
    counts = np.array([len(g) for g in groups], dtype=np.float64)
    within_sum = sum(float(s @ s) - n for s, n in zip(sums, counts))
    within_pairs = float(np.sum(counts * (counts - 1)))
    total = np.sum(sums, axis=0)
    across_sum = float(total @ total) - sum(float(s @ s) for s in sums)
    across_pairs = float(counts.sum() ** 2 - np.sum(counts ** 2))
    return {
        "within": within_sum / within_pairs if within_pairs else float("nan"),
        "across": across_sum / across_pairs if across_pairs else float("nan"),
        "n_vectors": int(len(U)),
        "counts": counts.astype(int).tolist(),
    }


def affinity_matrix(V, Y, max_points: int = 500, seed: int = 0):
    """Cosine affinity of a label-sorted subsample, the raw data behind an affinity plot."""
    V = np.asarray(V.data if isinstance(V, Tensor) else V, dtype=np.float64)
    E = V.shape[-1]
    V = V.reshape(-1, E)
    lab = np.argmax(np.asarray(Y).reshape(len(V), -1), axis=-1)
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(V), size=min(max_points, len(V)), replace=False)
    pick = pick[np.argsort(lab[pick], kind="stable")]
    U = V[pick] / np.maximum(np.linalg.norm(V[pick], axis=1, keepdims=True), 1e-12)
    return U @ U.T, lab[pick]


# ---------------------------------------------------------------------------
# training loop


class BatchPrefetcher:
    """Builds batches for steps ``start..stop-1`` on a background thread."""

    def __init__(self, make_batch: Callable[[int], object], start: int, stop: int, capacity: int = 4):
        self._q: queue.Queue = queue.Queue(maxsize=capacity)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, args=(make_batch, start, stop), daemon=True)
        self._thread.start()

    def _run(self, make_batch, start, stop):
        for step in range(start, stop):
            if self._stop.is_set():
                return
            try:
                item = (step, make_batch(step), None)
            except Exception as exc:  # surfaced to the consumer
                item = (step, None, exc)
            while not self._stop.is_set():
                try:
                    self._q.put(item, timeout=0.1)
                    break
                except queue.Full:
                    continue
            if item[2] is not None:
                return

    def get(self):
        step, batch, exc = self._q.get()
        if exc is not None:
            raise exc
        return step, batch

    def close(self):
        self._stop.set()
        self._thread.join(timeout=5)


@dataclass
class TrainConfig:
    steps: int = 100000  # paper-unstated
    lr: float = 1e-3  # paper-unstated
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 5.0  # paper-unstated
    val_every: int = 100  # paper-unstated
    val_batches: int = 4  # paper-unstated
    patience: int = 10  # paper-unstated, in validation rounds
    checkpoint_every: int = 1000  # paper-unstated
    mix_type: str = "random"
    seed: int = 0
    prefetch: bool = True


@dataclass
class TrainState:
    model: SceModel
    adam: nn.AdamState
    step: int = 0
    best_val: float = float("inf")
    bad_rounds: int = 0
    history: list[tuple[int, float, float | None]] = field(default_factory=list)


def fit(state: TrainState, make_batch: Callable[[int], object], train_cfg: TrainConfig,
        make_val_batch: Callable[[int], object] | None = None,
        log_line: Callable[[str], None] | None = None,
        on_checkpoint: Callable[[TrainState, str], None] | None = None) -> TrainState:
    """Run training from ``state.step`` until ``train_cfg.steps``.

    ``make_batch(step)`` must be a pure function of ``step`` so that resuming
    reproduces the same batches. ``on_checkpoint(state, tag)`` is called with
    tag ``"periodic"``, ``"best"`` or ``"final"``.
    """
    start, stop = state.step, train_cfg.steps
    val_batches = None
    if make_val_batch is not None and train_cfg.val_batches > 0:
        val_batches = [make_val_batch(i) for i in range(train_cfg.val_batches)]
    source = BatchPrefetcher(make_batch, start, stop) if train_cfg.prefetch else None
    try:
        for step in range(start, stop):
            if source is not None:
                _, batch = source.get()
            else:
                batch = make_batch(step)
            t0 = time.perf_counter()
            loss = train_step(state.model, batch, state.adam, train_cfg.clip)
            state.step = step + 1
            val = None
            if val_batches and (state.step % train_cfg.val_every == 0 or state.step == stop):
                val = float(np.mean([eval_loss(state.model, b) for b in val_batches]))
            wall_ms = (time.perf_counter() - t0) * 1000
            state.history.append((state.step, loss, val))
            if log_line is not None:
                fields_ = [str(state.step), f"{wall_ms:.1f}", f"{loss:.6f}"]
                if val is not None:
                    fields_.append(f"{val:.6f}")
                log_line("\t".join(fields_))
            if val is not None:
                if val < state.best_val:
                    state.best_val = val
                    state.bad_rounds = 0
                    if on_checkpoint:
                        on_checkpoint(state, "best")
                else:
                    state.bad_rounds += 1
            if on_checkpoint and train_cfg.checkpoint_every and state.step % train_cfg.checkpoint_every == 0:
                on_checkpoint(state, "periodic")
            if val is not None and train_cfg.patience and state.bad_rounds >= train_cfg.patience:
                log.info("stopping at step %d: no validation improvement in %d rounds",
                         state.step, state.bad_rounds)
                break
    finally:
        if source is not None:
            source.close()
    if on_checkpoint:
        on_checkpoint(state, "final")
    return state
