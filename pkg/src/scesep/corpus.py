"""Speaker registry, per-speaker splits, mixture synthesis, labels, and batches."""
from __future__ import annotations

import functools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .dsp import DspConfig, Spectrogram, Waveform

MIX_TYPES = ("ff", "mm", "fm", "random", "random3")
SPLITS = ("train", "validate", "test")


@dataclass(frozen=True)
class Speaker:
    speaker_id: str
    index: int
    gender: str
    files: tuple[Path, ...]


@dataclass
class SpeakerRegistry:
    speakers: dict[str, Speaker]
    root: Path | None = None

    @property
    def C(self) -> int:
        return len(self.speakers)

    def by_index(self, index: int) -> Speaker:
        return self._ordered[index]

    @functools.cached_property
    def _ordered(self) -> list[Speaker]:
        return sorted(self.speakers.values(), key=lambda s: s.index)

    def ids(self) -> list[str]:
        return [s.speaker_id for s in self._ordered]

    def genders(self) -> np.ndarray:
        return np.array([s.gender for s in self._ordered])


def _id_key(speaker_id: str):
    return (0, int(speaker_id), "") if speaker_id.isdigit() else (1, 0, speaker_id)


def read_metadata(path) -> dict[str, str]:
    """Parse ``speaker_id|gender[|...]`` lines; ``#`` or ``;`` start a comment line."""
    genders: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith(("#", ";")):
            continue
        parts = [p.strip() for p in line.split("|")]
        if len(parts) < 2:
            raise ValueError(f"{path}:{lineno}: expected 'speaker_id|gender', got {line!r}")
        gender = parts[1].upper()
        if gender not in ("F", "M"):
            raise ValueError(f"{path}:{lineno}: unknown gender token {parts[1]!r} for speaker {parts[0]}")
        genders[parts[0]] = gender
    return genders


def build_registry(root_dir, metadata_file) -> SpeakerRegistry:
    """Discover ``root/<speaker_id>/*.wav`` and index speakers by ascending id."""
    root = Path(root_dir)
    genders = read_metadata(metadata_file)
    found: dict[str, tuple[Path, ...]] = {}
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        files = tuple(sorted(d.glob("*.wav")))
        if not files:
            raise ValueError(f"speaker {d.name} has no .wav files under {d}")
        found[d.name] = files
    if not found:
        raise ValueError(f"no speaker directories under {root}")
    missing = [sid for sid in found if sid not in genders]
    if missing:
        raise ValueError(f"no metadata entry for speaker(s): {', '.join(sorted(missing, key=_id_key))}")
    speakers = {}
    for index, sid in enumerate(sorted(found, key=_id_key)):
        speakers[sid] = Speaker(sid, index, genders[sid], found[sid])
    return SpeakerRegistry(speakers, root)


@dataclass
class SplitSpec:
    """Disjoint per-speaker partition of utterance files."""

    parts: dict[str, dict[str, tuple[Path, ...]]]

    def files(self, split: str, speaker_id: str) -> tuple[Path, ...]:
        return self.parts[split][speaker_id]


def split_utterances(registry: SpeakerRegistry, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> SplitSpec:
    """Shuffle each speaker's files and cut them train/validate/test.

    Every speaker gets at least one file in each split, so speakers need three
    or more utterances.
    """
    if len(fractions) != 3 or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError(f"fractions must be three values summing to 1, got {fractions}")
    parts: dict[str, dict[str, tuple[Path, ...]]] = {s: {} for s in SPLITS}
    for sp in registry._ordered:
        n = len(sp.files)
        if n < 3:
            raise ValueError(f"speaker {sp.speaker_id} has {n} utterances; splitting needs at least 3")
        rng = np.random.default_rng([seed, sp.index])
        order = rng.permutation(n)
        n_val = max(1, int(round(fractions[1] * n)))
        n_test = max(1, int(round(fractions[2] * n)))
        n_train = n - n_val - n_test
        if n_train < 1:
            n_train, n_val, n_test = n - 2, 1, 1
        files = [sp.files[i] for i in order]
        parts["train"][sp.speaker_id] = tuple(files[:n_train])
        parts["validate"][sp.speaker_id] = tuple(files[n_train:n_train + n_val])
        parts["test"][sp.speaker_id] = tuple(files[n_train + n_val:])
    return SplitSpec(parts)


# ---------------------------------------------------------------------------
# audio loading


@functools.lru_cache(maxsize=4096)
def _load_resampled(path: str, rate: int) -> np.ndarray:
    w = dsp.read_wav(path)
    if w.sample_rate != rate:
        w = dsp.resample(w, rate)
    samples = w.samples
    samples.setflags(write=False)
    return samples


def load_audio(path, rate: int) -> Waveform:
    """Read a WAV and resample it to ``rate``; cached per (path, rate)."""
    return Waveform(_load_resampled(str(path), int(rate)), int(rate))


# ---------------------------------------------------------------------------
# mixtures


@dataclass
class MixSpec:
    speakers: tuple[int, ...]
    utterances: tuple[Path, ...]
    offsets: tuple[int, ...]  # start frame per source
    mix_type: str = "random"
    mix_id: str = ""

    def __post_init__(self):
        if len(self.speakers) not in (2, 3):
            raise ValueError(f"a mix has 2 or 3 speakers, got {len(self.speakers)}")
        if len(set(self.speakers)) != len(self.speakers):
            raise ValueError(f"speakers in a mix must be distinct, got {self.speakers}")
        if not len(self.speakers) == len(self.utterances) == len(self.offsets):
            raise ValueError("speakers, utterances and offsets must have equal length")


@dataclass
class Mix:
    X: Spectrogram
    S: list[Spectrogram]
    Y: np.ndarray  # T x F x M in {-1, +1}
    mixture: Waveform  # resampled, not preemphasised
    sources: list[Waveform]


def compute_labels(mags) -> np.ndarray:
    """+1 for the loudest source at each bin, -1 elsewhere; ties go to the lowest index."""
    stacked = np.stack([np.asarray(m) for m in mags], axis=-1)
    if stacked.ndim < 2:
        raise ValueError("compute_labels needs a list of equally shaped magnitude arrays")
    winner = np.argmax(stacked, axis=-1)
    Y = -np.ones(stacked.shape, dtype=np.float32)
    np.put_along_axis(Y, winner[..., None], 1.0, axis=-1)
    return Y


def mix_waveforms(sources: list[Waveform], cfg: DspConfig) -> Mix:
    """Sum equal-length sources; analyse each independently and sum the complex STFTs."""
    specs = [dsp.stft(dsp.preemphasis(s, cfg.preemphasis), cfg.window, cfg.hop) for s in sources]
    Z = sum(s.complex for s in specs)
    X = Spectrogram.from_complex(Z, cfg.window, cfg.hop, cfg.sample_rate, specs[0].length)
    Y = compute_labels([s.magnitude for s in specs])
    mixture = Waveform(sum(s.samples for s in sources), cfg.sample_rate)
    return Mix(X, specs, Y, mixture, list(sources))


def make_mix(spec: MixSpec, cfg: DspConfig, frames: int | None = None) -> Mix:
    """Build one mixture.

    With ``frames`` set, every source is cropped to exactly that many STFT
    frames starting at its offset. Otherwise sources run from their offsets to
    the end of the shortest one.
    """
    segments = []
    for path, off in zip(spec.utterances, spec.offsets):
        x = load_audio(path, cfg.sample_rate).samples
        start = int(off) * cfg.hop
        if frames is not None:
            need = cfg.segment_length(frames)
            if start + need > len(x):
                raise ValueError(
                    f"{path} is too short for {frames} frames at offset {off} "
                    f"({len(x)} samples, need {start + need})")
            segments.append(x[start:start + need])
        else:
            if start + cfg.window > len(x):
                raise ValueError(f"{path} is too short for one frame at offset {off}")
            segments.append(x[start:])
    n = min(len(s) for s in segments)
    return mix_waveforms([Waveform(s[:n], cfg.sample_rate) for s in segments], cfg)


def mix_type_of(genders) -> str:
    genders = list(genders)
    if len(genders) == 3:
        return "random3"
    if genders[0] == genders[1]:
        return "ff" if genders[0] == "F" else "mm"
    return "fm"


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    features: np.ndarray  # B x T x F
    labels: np.ndarray  # B x T x F x M
    speaker_indices: np.ndarray  # B x M
    source_magnitudes: np.ndarray = field(repr=False)  # B x M x T x F
    specs: list[MixSpec] = field(default_factory=list, repr=False)


def _draw_speakers(registry: SpeakerRegistry, mix_type: str, rng: np.random.Generator) -> list[int]:
    genders = registry.genders()
    female = np.flatnonzero(genders == "F")
    male = np.flatnonzero(genders == "M")
    if mix_type == "ff":
        if len(female) < 2:
            raise ValueError(f"mix type ff needs 2 female speakers, registry has {len(female)}")
        return [int(i) for i in rng.choice(female, 2, replace=False)]
    if mix_type == "mm":
        if len(male) < 2:
            raise ValueError(f"mix type mm needs 2 male speakers, registry has {len(male)}")
        return [int(i) for i in rng.choice(male, 2, replace=False)]
    if mix_type == "fm":
        if not len(female) or not len(male):
            raise ValueError("mix type fm needs at least one female and one male speaker")
        pair = [int(rng.choice(female)), int(rng.choice(male))]
        return [pair[i] for i in rng.permutation(2)]
    if mix_type in ("random", "random3"):
        m = 3 if mix_type == "random3" else 2
        if registry.C < m:
            raise ValueError(f"mix type {mix_type} needs {m} speakers, registry has {registry.C}")
        return [int(i) for i in rng.choice(registry.C, m, replace=False)]
    raise ValueError(f"unknown mix type {mix_type!r}; expected one of {MIX_TYPES}")


def draw_mix_spec(registry: SpeakerRegistry, splits: SplitSpec, split: str, mix_type: str,
                  frames: int, rng: np.random.Generator, cfg: DspConfig, max_tries: int = 50) -> MixSpec:
    """Random speakers, utterances and frame offsets honouring ``mix_type``."""
    need = cfg.segment_length(frames)
    idx = _draw_speakers(registry, mix_type, rng)
    utts, offsets = [], []
    for i in idx:
        sp = registry.by_index(i)
        files = splits.files(split, sp.speaker_id)
        if not files:
            raise ValueError(f"speaker {sp.speaker_id} has no utterances in split {split}")
        for _ in range(max_tries):
            path = files[int(rng.integers(len(files)))]
            n = len(load_audio(path, cfg.sample_rate).samples)
            if n >= need:
                break
        else:
            raise ValueError(f"speaker {sp.speaker_id}: no utterance in {split} long enough for {frames} frames")
        available = (n - cfg.window) // cfg.hop + 1
        offsets.append(int(rng.integers(available - frames + 1)))
        utts.append(path)
    return MixSpec(tuple(idx), tuple(utts), tuple(offsets), mix_type)


def sample_batch(registry: SpeakerRegistry, splits: SplitSpec, split: str, mix_type: str,
                 B: int, T: int, rng: np.random.Generator, cfg: DspConfig) -> Batch:
    feats, labels, spk, mags, specs = [], [], [], [], []
    for _ in range(B):
        spec = draw_mix_spec(registry, splits, split, mix_type, T, rng, cfg)
        mix = make_mix(spec, cfg, frames=T)
        feats.append(dsp.normalize_input(mix.X.magnitude))
        labels.append(mix.Y)
        spk.append(spec.speakers)
        mags.append(np.stack([s.magnitude for s in mix.S]))
        specs.append(spec)
    return Batch(
        features=np.asarray(feats, dtype=np.float32),
        labels=np.asarray(labels, dtype=np.float32),
        speaker_indices=np.asarray(spk, dtype=np.int64),
        source_magnitudes=np.asarray(mags, dtype=np.float32),
        specs=specs,
    )


# ---------------------------------------------------------------------------
# manifests


def format_manifest_line(spec: MixSpec, registry: SpeakerRegistry) -> str:
    fields = [spec.mix_id]
    for idx, path, off in zip(spec.speakers, spec.utterances, spec.offsets):
        fields.append(f"{registry.by_index(idx).speaker_id}:{Path(path).stem}:{off}")
    return ",".join(fields)


def write_manifest(path, specs: list[MixSpec], registry: SpeakerRegistry) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(format_manifest_line(s, registry) + "\n" for s in specs))


def read_manifest(path, registry: SpeakerRegistry) -> list[MixSpec]:
    """Resolve ``mix_id,speaker:utt:offset,...`` lines against ``registry``."""
    specs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            specs.append(_parse_manifest_line(line, registry))
        except (ValueError, KeyError) as exc:
            raise ValueError(f"{path}:{lineno}: cannot resolve {line!r}: {exc}") from None
    return specs


def _parse_manifest_line(line: str, registry: SpeakerRegistry) -> MixSpec:
    fields = line.split(",")
    if len(fields) not in (3, 4):
        raise ValueError(f"expected 2 or 3 sources, got {len(fields) - 1}")
    idx, utts, offs, genders = [], [], [], []
    for f in fields[1:]:
        parts = f.split(":")
        if len(parts) != 3:
            raise ValueError(f"source field {f!r} is not speaker:utt:offset")
        sid, utt, off = parts
        if sid not in registry.speakers:
            raise KeyError(f"unknown speaker {sid}")
        sp = registry.speakers[sid]
        matches = [p for p in sp.files if p.stem == utt]
        if not matches:
            raise KeyError(f"speaker {sid} has no utterance {utt}")
        idx.append(sp.index)
        utts.append(matches[0])
        offs.append(int(off))
        genders.append(sp.gender)
    return MixSpec(tuple(idx), tuple(utts), tuple(offs), mix_type_of(genders), fields[0])
