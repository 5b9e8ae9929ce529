"""Run configuration: dataclasses, the ``desk`` / ``paper`` presets and strict loading.

Unknown keys are rejected at every level so typos in config files fail
loudly instead of silently falling back to defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .losses import LossWeights


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    input_dim: int = 16
    conv_channels: list[int] = field(default_factory=lambda: [32, 32])
    conv_kernels: list[int] = field(default_factory=lambda: [3, 3])
    conv_strides: list[int] = field(default_factory=lambda: [2, 2])
    conv_padding: list[int] = field(default_factory=lambda: [1, 1])
    layers: int = 4
    dim: int = 64
    inner_dim: int = 256
    heads: int = 4
    vocab_size: int = 21  # phonemes + blank
    mask_prob: float = 0.15
    mask_span: int = 3
    ema_decay: float = 0.999
    ctc_on_masked: bool = True
    loss: LossWeights = field(default_factory=lambda: LossWeights(0.15, 0.25, 2))

    def __post_init__(self):
        n = len(self.conv_channels)
        if not (len(self.conv_kernels) == len(self.conv_strides) == len(self.conv_padding) == n):
            raise ConfigError("conv_channels/kernels/strides/padding must have equal length")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ConfigError("mask_prob must lie in [0, 1]")
        if self.mask_span < 1:
            raise ConfigError("mask_span must be >= 1")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError("ema_decay must lie in [0, 1]")
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        if self.loss.target_depth > self.layers:
            raise ConfigError(f"target_depth {self.loss.target_depth} exceeds {self.layers} layers")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must include blank plus at least one unit")


@dataclass
class TranscoderConfig:
    blocks: int = 2
    dim: int = 64
    inner_dim: int = 256
    heads: int = 2
    kernels: list[int] = field(default_factory=lambda: [3, 5])
    conv_topology: str = "parallel"
    num_phonemes: int = 20
    vocab_cap: int = 2000
    vocab_size: int = 0  # filled from the word vocabulary at build time

    def __post_init__(self):
        k1, k2 = self.kernels
        if k1 == k2 or k1 % 2 == 0 or k2 % 2 == 0:
            raise ConfigError(f"kernels must be distinct odd sizes, got {self.kernels}")
        if self.conv_topology not in ("parallel", "series"):
            raise ConfigError("conv_topology must be 'parallel' or 'series'")
        if min(self.blocks, self.dim, self.inner_dim, self.heads, self.num_phonemes) < 1:
            raise ConfigError("transcoder dimensions must be positive")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")


@dataclass
class StageConfig:
    steps: int = 300
    batch_size: int = 8
    lr: float = 1e-3
    warmup_frac: float = 0.05
    final_lr_frac: float = 0.0
    clip_norm: float = 5.0
    log_every: int = 10


@dataclass
class PretrainPlusConfig(StageConfig):
    unlabeled_batch_size: int = 8


@dataclass
class FinetuneConfig(StageConfig):
    units: str = "phoneme"  # or "grapheme"

    def __post_init__(self):
        if self.units not in ("phoneme", "grapheme"):
            raise ConfigError("finetune.units must be 'phoneme' or 'grapheme'")


@dataclass
class TranscoderFinetuneConfig(StageConfig):
    inputs: str = "posterior"  # or "onehot"
    split: str = "dev"

    def __post_init__(self):
        if self.inputs not in ("posterior", "onehot"):
            raise ConfigError("transcoder_finetune.inputs must be 'posterior' or 'onehot'")


@dataclass
class CorpusConfig:
    num_phonemes: int = 20
    feature_dim: int = 16
    source_language: str = "src"
    target_languages: list[str] = field(default_factory=lambda: ["tgt"])
    vocab_size: int = 300
    sentence_words: list[int] = field(default_factory=lambda: [2, 5])
    word_phonemes: list[int] = field(default_factory=lambda: [1, 5])
    duration: list[int] = field(default_factory=lambda: [8, 12])
    sigma: float = 0.3
    accent_shift: float = 0.8
    min_proto_distance: float = 2.0
    sizes: dict = field(default_factory=lambda: {
        "L": 2000, "U": 1000, "F": 50, "T": 5000, "dev": 200, "test": 200})


@dataclass
class ProbeConfig:
    layers: list[int] = field(default_factory=lambda: [4])
    k: int = 0  # 0 -> number of phonemes
    split: str = "test"
    kmeans_iters: int = 100
    kmeans_restarts: int = 10


@dataclass
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    transcoder: TranscoderConfig = field(default_factory=TranscoderConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    pretrain: StageConfig = field(default_factory=lambda: StageConfig(steps=600, lr=1e-3))
    pretrain_plus: PretrainPlusConfig = field(
        default_factory=lambda: PretrainPlusConfig(steps=300, lr=5e-4))
    finetune: FinetuneConfig = field(default_factory=lambda: FinetuneConfig(steps=300, lr=1e-4))
    transcoder_train: StageConfig = field(
        default_factory=lambda: StageConfig(steps=2500, batch_size=16, lr=1e-3))
    transcoder_finetune: TranscoderFinetuneConfig = field(
        default_factory=lambda: TranscoderFinetuneConfig(steps=100, batch_size=16, lr=5e-5))
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    paths: dict = field(default_factory=lambda: {"corpus": "corpus"})


def paper_preset() -> dict:
    """Published hyperparameters, for reference runs on real hardware."""
    return {
        "preset": "paper",
        "encoder": {
            "input_dim": 1,
            "conv_channels": [512] * 7,
            "conv_strides": [5, 2, 2, 2, 2, 2, 2],
            "conv_kernels": [10, 3, 3, 3, 3, 2, 2],
            "conv_padding": [0] * 7,
            "layers": 12,
            "dim": 768,
            "inner_dim": 3072,
            "heads": 8,
            "loss": {"alpha": 0.15, "beta": 0.25, "target_depth": 8},
        },
        "transcoder": {"blocks": 3, "dim": 256, "inner_dim": 1024, "heads": 4,
                       "kernels": [3, 5], "vocab_cap": 50000},
        "pretrain": {"steps": 400_000, "lr": 5e-4},
        "pretrain_plus": {"steps": 200_000, "lr": 5e-5},
        "transcoder_train": {"steps": 200_000, "batch_size": 256, "lr": 5e-4},
    }


PRESETS = {"desk": lambda: {"preset": "desk"}, "paper": paper_preset}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            merged = dict(_to_plain(current))
            merged.update(value if isinstance(value, dict) else {})
            if not isinstance(value, dict):
                raise ConfigError(f"{where}.{name}: expected a mapping")
            kwargs[name] = _build(type(current), merged, f"{where}.{name}")
        else:
            kwargs[name] = value
    try:
        return cls(**{**{f: getattr(defaults, f) for f in known if f not in kwargs}, **kwargs})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _to_plain(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(x) for x in obj]
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    return obj


def deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | Path | None = None, preset: str | None = None,
                overrides: dict | None = None) -> RunConfig:
    """Preset defaults, then the config file, then explicit overrides."""
    file_data: dict = {}
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file {path} does not exist")
        text = Path(path).read_text()
        try:
            file_data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML/JSON: {exc}") from exc
        if not isinstance(file_data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    name = preset or file_data.get("preset", "desk")
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    data = _to_plain(RunConfig())
    data = deep_merge(data, PRESETS[name]())
    _check_keys(file_data, RunConfig, "config")
    data = deep_merge(data, file_data)
    data["preset"] = name
    if overrides:
        data = deep_merge(data, overrides)
    return _build(RunConfig, data, "config")


def _check_keys(data: dict, cls, where: str) -> None:
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    defaults = cls()
    for k, v in data.items():
        current = getattr(defaults, k)
        if dataclasses.is_dataclass(current) and isinstance(v, dict):
            _check_keys(v, type(current), f"{where}.{k}")


def config_to_dict(cfg) -> dict:
    return _to_plain(cfg)


def config_from_dict(data: dict, cls=RunConfig):
    return _build(cls, data, cls.__name__)


def config_json(cfg) -> str:
    return json.dumps(config_to_dict(cfg), sort_keys=True)
