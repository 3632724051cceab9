"""Synthetic corpora in the on-disk layout ``build_registry`` expects.

Two speaker families are provided: band-limited noise with a fixed spectral
envelope per speaker, and a crude source-filter "speech-like" voice with a
per-speaker pitch range and vocal-tract scale. Both are gated by a random
syllable-rate envelope so talkers overlap only partially in time.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .dsp import Waveform, write_wav


@dataclass
class BandSpeaker:
    speaker_id: str
    gender: str
    centers_hz: tuple[float, ...]
    width_hz: float = 300.0
    gains: tuple[float, ...] = ()


@dataclass
class VoiceSpeaker:
    speaker_id: str
    gender: str
    f0_hz: float
    tract_scale: float = 1.0  # formant frequency multiplier
    extra: dict = field(default_factory=dict)


def syllable_envelope(rng: np.random.Generator, n: int, sr: int, mean_on_s=0.25, mean_off_s=0.12,
                      ramp_s=0.02) -> np.ndarray:
    """Alternating voiced/silent segments with raised-cosine ramps."""
    env = np.zeros(n)
    pos = int(rng.uniform(0, mean_off_s) * sr)
    while pos < n:
        on = max(int(rng.exponential(mean_on_s) * sr) + int(0.08 * sr), 1)
        seg = np.ones(min(on, n - pos))
        r = min(int(ramp_s * sr), len(seg) // 2)
        if r > 0:
            ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
            seg[:r] *= ramp
            seg[-r:] *= ramp[::-1]
        env[pos:pos + len(seg)] = seg * rng.uniform(0.6, 1.0)
        pos += on + int(rng.exponential(mean_off_s) * sr)
    return env


def band_noise(rng: np.random.Generator, n: int, sr: int, centers_hz, width_hz: float, gains=()) -> np.ndarray:
    """White noise shaped by a sum of Gaussian spectral bumps."""
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    gains = gains or (1.0,) * len(centers_hz)
    shape = sum(g * np.exp(-0.5 * ((freqs - c) / width_hz) ** 2) for c, g in zip(centers_hz, gains))
    x = np.fft.irfft(spec * shape, n)
    return x / (np.std(x) + 1e-12)


# rough vowel formant centres (Hz) for an adult male tract
_VOWELS = np.array([
    [730, 1090, 2440], [270, 2290, 3010], [300, 870, 2240], [530, 1840, 2480],
    [660, 1720, 2410], [570, 840, 2410], [440, 1020, 2240], [490, 1350, 1690],
])


def _resonator(x: np.ndarray, f: float, bw: float, sr: int) -> np.ndarray:
    r = np.exp(-np.pi * bw / sr)
    theta = 2 * np.pi * f / sr
    a = [1.0, -2 * r * np.cos(theta), r * r]
    return sps.lfilter([1 - r], a, x)


def voice(rng: np.random.Generator, n: int, sr: int, f0_hz: float, tract_scale: float = 1.0) -> np.ndarray:
    """Source-filter voice: jittered glottal pulses through per-syllable formant filters."""
    env = syllable_envelope(rng, n, sr)
    # slow pitch drift around the speaker's mean
    drift = np.cumsum(rng.standard_normal(n)) / np.sqrt(sr) * 0.8
    f0 = f0_hz * np.exp(0.08 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * np.arange(n) / sr) + 0.05 * drift)
    phase = np.cumsum(f0 / sr)
    pulses = np.diff(np.floor(phase), prepend=0.0)
    # differentiated pulses: no DC, mild high-frequency roll-off
    excitation = sps.lfilter([1.0, -1.0], [1.0, -0.9], pulses)
    excitation += 0.01 * rng.standard_normal(n)
    out = np.zeros(n)
    seg = int(0.15 * sr)
    win = np.hanning(2 * seg)
    for start in range(-seg, n, seg):
        lo, hi = max(start, 0), min(start + 2 * seg, n)
        if hi <= lo:
            continue
        formants = _VOWELS[rng.integers(len(_VOWELS))] * tract_scale
        piece = excitation[lo:hi]
        y = sum(_resonator(piece, f, 40 + 0.03 * f, sr) * g for f, g in zip(formants, (1.0, 0.6, 0.3)))
        out[lo:hi] += y * win[lo - start:hi - start]
    out *= env
    out = sps.sosfilt(sps.butter(2, 70, "highpass", fs=sr, output="sos"), out)
    return out / (np.std(out) + 1e-12)


def render(speaker, rng: np.random.Generator, seconds: float, sr: int) -> np.ndarray:
    n = int(round(seconds * sr))
    if isinstance(speaker, BandSpeaker):
        x = band_noise(rng, n, sr, speaker.centers_hz, speaker.width_hz, speaker.gains)
        x = x * syllable_envelope(rng, n, sr)
    else:
        x = voice(rng, n, sr, speaker.f0_hz, speaker.tract_scale)
    return 0.1 * x / (np.std(x) + 1e-12)


def write_corpus(root, speakers, utterances: int = 10, seconds: float = 2.0, sr: int = 10000,
                 seed: int = 0, metadata_name: str = "SPEAKERS.TXT"):
    """Write ``root/<id>/<id>-<n>.wav`` plus a metadata file; returns (root, metadata_path)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = [";ID|SEX|NOTE"]
    for sp in speakers:
        lines.append(f"{sp.speaker_id}|{sp.gender}|synthetic")
        for u in range(utterances):
            rng = np.random.default_rng([seed, zlib.crc32(sp.speaker_id.encode()), u])
            x = render(sp, rng, seconds, sr)
            write_wav(root / sp.speaker_id / f"{sp.speaker_id}-{u:04d}.wav", Waveform(x, sr))
    meta = root / metadata_name
    meta.write_text("\n".join(lines) + "\n")
    return root, meta


def band_speakers(centers_hz, first_id: int = 1, width_hz: float = 300.0) -> list[BandSpeaker]:
    """One single-bump speaker per centre, alternating F/M."""
    return [BandSpeaker(str(first_id + i), "FM"[i % 2], (float(c),), width_hz) for i, c in enumerate(centers_hz)]


def voice_speakers(n_female: int, n_male: int, seed: int = 0, first_id: int = 100) -> list[VoiceSpeaker]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_female + n_male):
        female = i < n_female
        f0 = rng.uniform(170, 250) if female else rng.uniform(90, 140)
        scale = rng.uniform(1.1, 1.25) if female else rng.uniform(0.9, 1.05)
        out.append(VoiceSpeaker(str(first_id + i), "F" if female else "M", float(f0), float(scale)))
    return out
