"""Recurrent layers, the time-distributed output layer, and the optimizer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor

# gate order inside the 4H rows of every LSTM weight; part of the checkpoint format
GATES = ("i", "f", "g", "o")


@dataclass
class LstmCellParams:
    W_x: Tensor  # 4H x D
    W_h: Tensor  # 4H x H
    b: Tensor  # 4H

    @property
    def hidden(self) -> int:
        return self.W_h.shape[1]

    @property
    def input_size(self) -> int:
        return self.W_x.shape[1]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.W_x": self.W_x, f"{prefix}.W_h": self.W_h, f"{prefix}.b": self.b}


@dataclass
class BlstmLayer:
    forward_cell: LstmCellParams
    backward_cell: LstmCellParams

    @property
    def width(self) -> int:
        return 2 * self.forward_cell.hidden

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {**self.forward_cell.named(f"{prefix}.fwd"), **self.backward_cell.named(f"{prefix}.bwd")}


@dataclass
class DenseConv:
    """Length-1 convolution over time, i.e. one affine map shared by all frames."""

    w: Tensor  # 1 x D_in x (F*E)
    bias: Tensor  # F*E

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.bias": self.bias}


def _cell(gates: Tensor, c_prev: Tensor, hidden: int):
    H = hidden
    i = ag.sigmoid(gates[:, 0:H])
    f = ag.sigmoid(gates[:, H:2 * H])
    g = ag.tanh(gates[:, 2 * H:3 * H])
    o = ag.sigmoid(gates[:, 3 * H:4 * H])
    c = f * c_prev + i * g
    h = o * ag.tanh(c)
    return h, c


def lstm_step(p: LstmCellParams, x_t: Tensor, h_prev: Tensor, c_prev: Tensor):
    """One LSTM recurrence step; returns ``(h, c)``, each ``B x H``."""
    H, D = p.hidden, p.input_size
    B = x_t.shape[0]
    if x_t.ndim != 2 or x_t.shape[1] != D:
        raise ValueError(f"x_t has shape {x_t.shape}, expected (B, {D})")
    if h_prev.shape != (B, H) or c_prev.shape != (B, H):
        raise ValueError(f"state shapes {h_prev.shape}, {c_prev.shape} do not match (B={B}, H={H})")
    gates = ag.matmul(x_t, ag.transpose(p.W_x)) + ag.matmul(h_prev, ag.transpose(p.W_h)) + p.b
    return _cell(gates, c_prev, H)


def _scan(p: LstmCellParams, x: Tensor, reverse: bool) -> list[Tensor]:
    B, T, _ = x.shape
    H = p.hidden
    # input projection for all frames at once; only h @ W_h^T stays in the loop
    x_proj = ag.matmul(x, ag.transpose(p.W_x)) + p.b
    W_hT = ag.transpose(p.W_h)
    h = Tensor(np.zeros((B, H)), dtype=x.dtype)
    c = Tensor(np.zeros((B, H)), dtype=x.dtype)
    outs: list[Tensor] = [None] * T  # type: ignore[list-item]
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        gates = x_proj[:, t, :] + ag.matmul(h, W_hT)
        h, c = _cell(gates, c, H)
        outs[t] = h
    return outs


def blstm_forward(layer: BlstmLayer, x: Tensor) -> Tensor:
    """Bidirectional LSTM over ``x`` (B x T x D); returns B x T x 2H with [forward, backward]."""
    if x.ndim != 3:
        raise ValueError(f"blstm_forward expects B x T x D input, got {x.shape}")
    if x.shape[1] == 0:
        raise ValueError("blstm_forward needs at least one time step")
    if x.shape[2] != layer.forward_cell.input_size:
        raise ValueError(f"input width {x.shape[2]} != layer input size {layer.forward_cell.input_size}")
    fwd = ag.stack(_scan(layer.forward_cell, x, reverse=False), axis=1)
    bwd = ag.stack(_scan(layer.backward_cell, x, reverse=True), axis=1)
    return ag.concat([fwd, bwd], axis=2)


def dense_forward(d: DenseConv, r: Tensor, F: int, E: int) -> Tensor:
    """Apply the shared affine map to every frame and reshape to B x T x F x E."""
    if d.w.shape[2] != F * E:
        raise ValueError(f"dense output width {d.w.shape[2]} != F*E = {F}*{E}")
    if r.ndim != 3 or r.shape[2] != d.w.shape[1]:
        raise ValueError(f"dense input {r.shape} does not match filter {d.w.shape}")
    B, T, _ = r.shape
    y = ag.matmul(r, ag.reshape(d.w, d.w.shape[1:])) + d.bias
    return ag.reshape(y, (B, T, F, E))


# ---------------------------------------------------------------------------
# initialization


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape).astype(dtype)


def init_lstm(rng, input_size: int, hidden: int, forget_bias: float = 1.0) -> LstmCellParams:
    W_x = glorot_uniform(rng, (4 * hidden, input_size), input_size, 4 * hidden)
    W_h = glorot_uniform(rng, (4 * hidden, hidden), hidden, 4 * hidden)
    b = np.zeros(4 * hidden, dtype=np.float32)
    b[hidden:2 * hidden] = forget_bias
    return LstmCellParams(Tensor(W_x, True), Tensor(W_h, True), Tensor(b, True))


def init_blstm(rng, input_size: int, width: int) -> BlstmLayer:
    if width % 2:
        raise ValueError(f"BLSTM width must be even (two directions), got {width}")
    return BlstmLayer(init_lstm(rng, input_size, width // 2), init_lstm(rng, input_size, width // 2))


def init_dense(rng, d_in: int, d_out: int) -> DenseConv:
    w = glorot_uniform(rng, (1, d_in, d_out), d_in, d_out)
    return DenseConv(Tensor(w, True), Tensor(np.zeros(d_out, dtype=np.float32), True))


# ---------------------------------------------------------------------------
# optimization


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Rescale all grads in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params.values()))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            p.grad *= scale
    return total


def adam_step(state: AdamState, params: dict[str, Tensor]) -> None:
    """Bias-corrected Adam update of every parameter, then zero its grad."""
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name} has no grad buffer")
        g = p.grad
        m = state.m.get(name)
        if m is None:
            # float32 moments so a checkpoint captures them exactly
            m = state.m[name] = np.zeros(p.shape, dtype=p.dtype)
            state.v[name] = np.zeros(p.shape, dtype=p.dtype)
        v = state.v[name]
        if m.shape != p.shape:
            raise ValueError(f"Adam moment shape {m.shape} != parameter {name} shape {p.shape}")
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.dtype)
        p.grad.fill(0)
