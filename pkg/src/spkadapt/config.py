"""Run configuration: one JSON file, dotted-key overrides from env and flags.

Precedence, lowest first: dataclass defaults, config file, environment
variables ``SPKADAPT_<KEY>`` (dots written as ``__``, e.g.
``SPKADAPT_TRAIN__EPOCHS=5``), then command-line flags.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Mapping

from .adapt import AdaptConfig
from .corpus import CorpusSpec
from .specaug import SpecAugPolicy
from .speaker_embed import EmbedderConfig
from .trainer import TrainConfig

ENV_PREFIX = "SPKADAPT_"

# system name -> (adapt mode, embedder flavour)
SYSTEMS = {
    "baseline": ("none", None),
    "x_add": ("add", "ff"),
    "s_add": ("add", "attn"),
    "x_cat": ("cat", "ff"),
    "s_cat": ("cat", "attn"),
}


class ConfigError(ValueError):
    pass


@dataclass
class ModelSettings:
    """ModelConfig minus the vocabulary size and adapt mode, which are filled in per run."""

    preset: str = "desk"
    enc_layers: int | None = None
    dec_layers: int | None = None
    d_model: int | None = None
    heads: int | None = None
    ffn_dim: int | None = None
    conv_channels: int = 64
    dropout: float = 0.1
    ctc_weight: float = 0.3
    label_smoothing: float = 0.1

    def overrides(self) -> dict:
        d = asdict(self)
        d.pop("preset")
        return {k: v for k, v in d.items() if v is not None}


@dataclass
class DecodeSettings:
    beam: int = 4
    ctc_weight: float = 0.3
    max_len_ratio: float = 0.0


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    manifest: str = ""
    holdout_per_speaker: int = 10
    pitch: str = "nccf"
    cmvn: str = "global"
    tokenizer: str = "char"
    systems: tuple[str, ...] = ("baseline", "x_add", "s_add", "x_cat", "s_cat")
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeSettings = field(default_factory=DecodeSettings)
    edges: tuple[float, ...] = (5.0, 15.0)

    def __post_init__(self):
        self.systems = tuple(self.systems)
        self.edges = tuple(float(e) for e in self.edges)
        bad = [s for s in self.systems if s not in SYSTEMS]
        if bad:
            raise ConfigError(f"unknown system(s) {bad}; valid systems: {', '.join(SYSTEMS)}")
        if self.cmvn not in ("global", "utterance"):
            raise ConfigError("cmvn must be global or utterance")
        if self.pitch not in ("nccf", "zeros"):
            raise ConfigError("pitch must be nccf or zeros")

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        try:
            return _build(cls, d)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
        return cls.from_dict(data)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


_NESTED = {
    (RunConfig, "corpus"): CorpusSpec,
    (RunConfig, "embedder"): EmbedderConfig,
    (RunConfig, "model"): ModelSettings,
    (RunConfig, "train"): TrainConfig,
    (RunConfig, "decode"): DecodeSettings,
    (TrainConfig, "adapt"): AdaptConfig,
    (TrainConfig, "specaug"): SpecAugPolicy,
}


def _build(cls, d: Mapping[str, Any]):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} key(s): {sorted(unknown)}")
    kwargs = {}
    for k, v in d.items():
        sub = _NESTED.get((cls, k))
        if sub is CorpusSpec and isinstance(v, Mapping):
            kwargs[k] = CorpusSpec.from_dict(v)
        elif sub is not None and isinstance(v, Mapping):
            kwargs[k] = _build(sub, v)
        else:
            kwargs[k] = v
    return cls(**kwargs)


def _coerce(current: Any, text: str) -> Any:
    """Parse a string override using the type of the value it replaces."""
    if isinstance(current, bool):
        low = text.lower()
        if low in ("1", "true", "on", "yes"):
            return True
        if low in ("0", "false", "off", "no"):
            return False
        raise ConfigError(f"expected a boolean (on/off), got {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, (tuple, list)):
        if text.startswith("["):
            return json.loads(text)
        items = [t for t in text.split(",") if t]
        if current and isinstance(current[0], float):
            return [float(t) for t in items]
        if current and isinstance(current[0], int):
            return [int(t) for t in items]
        return items
    if current is None:
        try:
            return json.loads(text)
        except json.JSONDecodeError:
            return text
    return text


def set_key(cfg: RunConfig, key: str, value: Any) -> RunConfig:
    """Return a copy of ``cfg`` with dotted ``key`` set; strings are coerced to the field type."""
    parts = key.split(".")

    def _set(obj, parts):
        if not is_dataclass(obj):
            raise ConfigError(f"cannot set {key!r}: {type(obj).__name__} has no fields")
        names = {f.name for f in fields(obj)}
        if parts[0] not in names:
            raise ConfigError(f"unknown config key {key!r}")
        cur = getattr(obj, parts[0])
        if len(parts) == 1:
            new = _coerce(cur, value) if isinstance(value, str) and not isinstance(cur, str) else value
            if is_dataclass(cur) and isinstance(new, Mapping):
                new = _build(type(cur), new)
        else:
            new = _set(cur, parts[1:])
        try:
            return replace(obj, **{parts[0]: new})
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{key}: {e}") from e

    return _set(cfg, parts)


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    out = {}
    for k, v in environ.items():
        if k.startswith(ENV_PREFIX) and len(k) > len(ENV_PREFIX):
            out[k[len(ENV_PREFIX):].lower().replace("__", ".")] = v
    return out


def resolve(path: str | Path | None = None, flags: Mapping[str, Any] | None = None,
            environ: Mapping[str, str] | None = None) -> RunConfig:
    cfg = RunConfig.load(path) if path else RunConfig()
    for k, v in sorted(env_overrides(environ).items()):
        cfg = set_key(cfg, k, v)
    for k, v in (flags or {}).items():
        if v is not None:
            cfg = set_key(cfg, k, v)
    return cfg


def system_adapt(cfg: RunConfig, system: str) -> AdaptConfig:
    mode, _ = SYSTEMS[system]
    return replace(cfg.train.adapt, mode=mode)
