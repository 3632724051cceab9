"""Waveform front end and its inverse: resampling, preemphasis, STFT/ISTFT, feature scaling."""
from __future__ import annotations

import wave
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal as sps

KAISER_BETA = 8.6
TAPS_PER_PHASE = 64


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return len(self.samples)


@dataclass
class Spectrogram:
    """One-sided STFT stored as magnitude and phase, both T x F."""

    magnitude: np.ndarray
    phase: np.ndarray
    window_size: int
    hop: int
    sample_rate: int
    length: int | None = None  # sample count of the analysed signal, used to trim the ISTFT

    @property
    def complex(self) -> np.ndarray:
        return self.magnitude * np.exp(1j * self.phase)

    @classmethod
    def from_complex(cls, Z: np.ndarray, window_size, hop, sample_rate, length=None) -> "Spectrogram":
        return cls(np.abs(Z), np.angle(Z), window_size, hop, sample_rate, length)

    @property
    def frames(self) -> int:
        return self.magnitude.shape[0]

    @property
    def bins(self) -> int:
        return self.magnitude.shape[1]


@dataclass(frozen=True)
class DspConfig:
    sample_rate: int = 10000
    window: int = 512
    hop: int = 256
    preemphasis: float = 0.95

    @property
    def bins(self) -> int:
        return self.window // 2 + 1

    def segment_length(self, frames: int) -> int:
        """Samples needed for exactly ``frames`` full analysis frames."""
        return (frames - 1) * self.hop + self.window


# ---------------------------------------------------------------------------
# resampling


def _resample_filter(up: int, down: int) -> np.ndarray:
    ntaps = TAPS_PER_PHASE * up
    cutoff = 1.0 / max(up, down)
    # odd length keeps the filter delay an integer number of samples
    return sps.firwin(ntaps + 1, cutoff, window=("kaiser", KAISER_BETA))


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Polyphase windowed-sinc resampling to ``target_rate``."""
    if target_rate <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    ratio = Fraction(int(target_rate), int(w.sample_rate))
    up, down = ratio.numerator, ratio.denominator
    y = sps.resample_poly(w.samples, up, down, window=_resample_filter(up, down))
    n_out = int(round(len(w.samples) * target_rate / w.sample_rate))
    if len(y) >= n_out:
        y = y[:n_out]
    else:
        y = np.pad(y, (0, n_out - len(y)))
    return Waveform(y, int(target_rate))


# ---------------------------------------------------------------------------
# preemphasis


def preemphasis(w: Waveform, a: float = 0.95) -> Waveform:
    if not abs(a) < 1:
        raise ValueError(f"preemphasis coefficient must satisfy |a| < 1, got {a}")
    y = sps.lfilter([1.0, -a], [1.0], w.samples)
    return Waveform(y, w.sample_rate)


def deemphasis(w: Waveform, a: float = 0.95) -> Waveform:
    if not abs(a) < 1:
        raise ValueError(f"preemphasis coefficient must satisfy |a| < 1, got {a}")
    y = sps.lfilter([1.0], [1.0, -a], w.samples)
    return Waveform(y, w.sample_rate)


# ---------------------------------------------------------------------------
# STFT


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def frame_count(n_samples: int, window: int, hop: int) -> int:
    """Full frames plus one zero-padded frame when samples are left over."""
    if n_samples < window:
        raise ValueError(f"signal of {n_samples} samples is shorter than one window ({window})")
    return 1 + -(-(n_samples - window) // hop)


def stft(w: Waveform, window: int = 512, hop: int = 256) -> Spectrogram:
    if window <= 0 or window & (window - 1):
        raise ValueError(f"window must be a power of two, got {window}")
    if not 0 < hop <= window:
        raise ValueError(f"hop must be in (0, window], got {hop}")
    x = w.samples
    n = frame_count(len(x), window, hop)
    padded = np.zeros((n - 1) * hop + window)
    padded[: len(x)] = x
    frames = np.lib.stride_tricks.sliding_window_view(padded, window)[::hop]
    Z = np.fft.rfft(frames * hann(window), axis=-1)
    return Spectrogram.from_complex(Z, window, hop, w.sample_rate, len(x))


def istft(s: Spectrogram) -> Waveform:
    """Weighted overlap-add inverse with a Hann synthesis window."""
    win = hann(s.window_size)
    frames = np.fft.irfft(s.complex, n=s.window_size, axis=-1) * win
    n_total = (s.frames - 1) * s.hop + s.window_size
    out = np.zeros(n_total)
    norm = np.zeros(n_total)
    w2 = win * win
    for t in range(s.frames):
        lo = t * s.hop
        out[lo: lo + s.window_size] += frames[t]
        norm[lo: lo + s.window_size] += w2
    # interior overlap keeps norm >= 0.5 * max; the floor only bites in the
    # edge half-windows, where dividing by ~0 would blow up masked frames
    out /= np.maximum(norm, 0.1 * norm.max())
    if s.length is not None:
        out = out[: s.length]
    return Waveform(out, s.sample_rate)


def normalize_input(mag: np.ndarray) -> np.ndarray:
    """Square root, then min-max scale over the whole block to [0, 1]."""
    mag = np.asarray(mag, dtype=np.float64)
    if np.any(mag < 0):
        raise ValueError("magnitudes must be non-negative")
    r = np.sqrt(mag)
    lo, hi = r.min(), r.max()
    if hi == lo:
        return np.zeros_like(r)
    return (r - lo) / (hi - lo)


def analyse(w: Waveform, cfg: DspConfig) -> Spectrogram:
    """Resample, preemphasise and transform, as done for every model input."""
    if w.sample_rate != cfg.sample_rate:
        w = resample(w, cfg.sample_rate)
    return stft(preemphasis(w, cfg.preemphasis), cfg.window, cfg.hop)


# ---------------------------------------------------------------------------
# WAV I/O


def read_wav(path) -> Waveform:
    """Read 16-bit PCM mono WAV, scaled to [-1, 1)."""
    with wave.open(str(path), "rb") as f:
        if f.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM is supported (got {8 * f.getsampwidth()}-bit)")
        if f.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {f.getnchannels()} channels")
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(x, rate)


def write_wav(path, w: Waveform) -> None:
    x = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(w.sample_rate))
        f.writeframes(x.tobytes())
