"""Declarative run configuration: one document carrying every module's settings."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .assembly import MatcherConfig
from .encoder import EncoderConfig
from .existence import TrainConfig
from .tagger import AdversarialConfig

# Indicator phrases signalling an upcoming actionable intent; used as a
# classifier feature and to anchor decoding windows. User-extensible.
DEFAULT_INDICATOR_LEXICON = (
    "plan to",
    "want to",
    "would like to",
    "how can i",
    "possible to",
    "want to be able to",
    "i want to",
    "how do i",
    "need to",
    "trying to",
)


def _dataclass_from_dict(cls, data: dict, context: str):
    if not isinstance(data, dict):
        raise ValueError(f"{context}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"{context}: unknown keys {sorted(unknown)}")
    kwargs = {
        name: tuple(value) if isinstance(value, list) else value for name, value in data.items()
    }
    return cls(**kwargs)


@dataclass
class RunConfig:
    """Defaults for every stage; unknown keys in a config document are rejected."""

    seed: int = 0
    threshold: float = 0.5
    attention_heads: int = 4
    residual_attention: bool = False
    decoder: str = "viterbi"
    beam_width: int = 8
    window_len: int = 5
    pairing: str = "w_dist"
    tag_scheme: str = "raw"
    intent_match_mode: str = "surface"
    indicator_lexicon: tuple[str, ...] = DEFAULT_INDICATOR_LEXICON
    encoder_stage1: EncoderConfig = field(default_factory=lambda: EncoderConfig(lstm_layers=2))
    encoder_stage2: EncoderConfig = field(default_factory=lambda: EncoderConfig(lstm_layers=1))
    train_stage1: TrainConfig = field(default_factory=TrainConfig)
    train_stage2: TrainConfig = field(default_factory=TrainConfig)
    adversarial: AdversarialConfig = field(default_factory=AdversarialConfig)
    matcher: MatcherConfig = field(default_factory=MatcherConfig)

    _NESTED = {
        "encoder_stage1": EncoderConfig,
        "encoder_stage2": EncoderConfig,
        "train_stage1": TrainConfig,
        "train_stage2": TrainConfig,
        "adversarial": AdversarialConfig,
        "matcher": MatcherConfig,
    }

    def __post_init__(self):
        if self.decoder not in ("viterbi", "beam", "ilp"):
            raise ValueError(f"unknown decoder {self.decoder!r}")
        if self.pairing not in ("w_dist", "mlp"):
            raise ValueError(f"unknown pairing {self.pairing!r}")
        if self.tag_scheme not in ("raw", "bio"):
            raise ValueError(f"unknown tag scheme {self.tag_scheme!r}")
        if self.intent_match_mode not in ("surface", "exact_span"):
            raise ValueError(f"unknown intent match mode {self.intent_match_mode!r}")
        self.indicator_lexicon = tuple(self.indicator_lexicon)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ValueError("config document must be a mapping")
        known = {f.name for f in fields(cls) if not f.name.startswith("_")}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"config: unknown keys {sorted(unknown)}")
        kwargs = {}
        for name, value in data.items():
            nested = cls._NESTED.get(name)
            if nested is not None:
                kwargs[name] = _dataclass_from_dict(nested, value, f"config.{name}")
            elif isinstance(value, list):
                kwargs[name] = tuple(value)
            else:
                kwargs[name] = value
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        text = Path(path).read_text(encoding="utf-8")
        if str(path).endswith(".json"):
            data = json.loads(text)
        else:
            data = yaml.safe_load(text)
        return cls.from_dict(data or {})

    def with_seed(self, seed: int) -> "RunConfig":
        out = dataclasses.replace(self)
        out.seed = seed
        out.train_stage1 = dataclasses.replace(out.train_stage1, seed=seed)
        out.train_stage2 = dataclasses.replace(out.train_stage2, seed=seed)
        out.matcher = dataclasses.replace(out.matcher, seed=seed)
        return out
