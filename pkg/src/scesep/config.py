"""Run configuration and its sectioned key=value file format."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .dsp import DspConfig
from .sce import ModelConfig, TrainConfig

# values the source method never states; marked in emitted config files
UNSTATED = {
    "model": {"E", "C", "per_bin_mean", "F"},
    "dsp": set(),
    "train": {"steps", "lr", "beta1", "beta2", "eps", "clip", "val_every", "val_batches", "patience",
              "checkpoint_every", "mix_type", "seed", "prefetch"},
    "corpus": {"split_seed"},
}


@dataclass
class CorpusConfig:
    corpus: str = ""
    metadata: str = ""
    split_seed: int = 0
    train_fraction: float = 0.8
    validate_fraction: float = 0.1
    test_fraction: float = 0.1


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    dsp: DspConfig = field(default_factory=DspConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)

    SECTIONS = ("model", "dsp", "train", "corpus")

    def to_dict(self) -> dict:
        return {s: dataclasses.asdict(getattr(self, s)) for s in self.SECTIONS}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(ModelConfig(**d.get("model", {})), DspConfig(**d.get("dsp", {})),
                   TrainConfig(**d.get("train", {})), CorpusConfig(**d.get("corpus", {})))

    def replace(self, section: str, **changes) -> "RunConfig":
        d = self.to_dict()
        d[section].update(changes)
        return RunConfig.from_dict(d)


def _coerce(value: str, like):
    if isinstance(like, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def format_config(cfg: RunConfig) -> str:
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            note = "  # paper-unstated" if key in UNSTATED[section] else ""
            lines.append(f"{key} = {value!r}{note}" if isinstance(value, float) else f"{key} = {value}{note}")
        lines.append("")
    return "\n".join(lines)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Read sections over ``base`` (defaults when None); unknown keys are errors."""
    base = base or RunConfig()
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    d = base.to_dict()
    for section in cp.sections():
        if section not in d:
            raise ValueError(f"unknown config section [{section}]")
        for key, raw in cp.items(section):
            if key not in d[section]:
                raise ValueError(f"unknown key {key!r} in section [{section}]")
            d[section][key] = _coerce(raw, d[section][key])
    return RunConfig.from_dict(d)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def save_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(format_config(cfg))
