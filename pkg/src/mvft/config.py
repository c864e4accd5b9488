"""Training configuration: defaults, JSON config files, command-line overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .model import FUSION_MODES, MODEL_KINDS, ModelConfig
from .views import parse_views


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 20
    seed: int = 0
    model: str = "mvft"
    views: str = "tfs"
    fusion_mode: str = "cyclic"
    d_model: int = 64
    n_heads: int = 4
    n_enc: int = 2
    n_dec: int = 1
    d_ff: int = 128
    dropout: float = 0.0
    n_buckets: int = 16
    time_quantum: int | None = None  # None: median sample spacing of the dataset
    use_segment: bool = True
    use_time: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    split_policy: str = "stratified"
    split_ratios: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience < 0 or self.max_epochs < 0:
            raise ConfigError("patience and max_epochs must be >= 0")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        try:
            self.views = "".join(parse_views(self.views))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.model == "mvft" and len(self.views) < 2:
            raise ConfigError("mvft needs at least two views; use --model baseline for one view")
        if self.split_policy not in ("stratified", "by-user"):
            raise ConfigError(f"split_policy must be 'stratified' or 'by-user', got {self.split_policy!r}")
        if len(self.split_ratios) != 3:
            raise ConfigError("split_ratios needs three entries: train, val, test")
        if self.time_quantum is not None and self.time_quantum < 1:
            raise ConfigError("time_quantum must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def model_config(self, n_channels: int, seq_len: int, n_class: int, time_quantum: int) -> ModelConfig:
        return ModelConfig(n_channels=n_channels, seq_len=seq_len, n_class=n_class, kind=self.model,
                           views=tuple(self.views), d_model=self.d_model, n_heads=self.n_heads,
                           n_enc=self.n_enc, n_dec=self.n_dec, d_ff=self.d_ff, n_buckets=self.n_buckets,
                           time_quantum=time_quantum, fusion_mode=self.fusion_mode,
                           use_segment=self.use_segment, use_time=self.use_time, dropout=self.dropout)


def _coerce(name: str, value):
    kind = {f.name: f.type for f in fields(TrainConfig)}[name]
    if kind == "int | None":
        kind = "int" if value is not None else "none"
    if kind == "list[float]":
        if not isinstance(value, list) or not all(isinstance(x, (int, float)) for x in value):
            raise ConfigError(f"{name} must be a list of numbers")
        return [float(x) for x in value]
    if kind == "bool" and not isinstance(value, bool):
        raise ConfigError(f"{name} must be a boolean")
    if kind == "int" and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number, got {value!r}")
        return float(value)
    if kind == "str" and not isinstance(value, str):
        raise ConfigError(f"{name} must be a string, got {value!r}")
    return value


def make_config(file_values: dict | None = None, overrides: dict | None = None) -> TrainConfig:
    """Defaults, then config-file values, then non-None overrides."""
    known = {f.name for f in fields(TrainConfig)}
    merged = {}
    for source in (file_values or {}, {k: v for k, v in (overrides or {}).items() if v is not None}):
        unknown = set(source) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for k, v in source.items():
            merged[k] = _coerce(k, v)
    try:
        return TrainConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config_file(path) -> dict:
    try:
        values = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(values, dict):
        raise ConfigError("config file must hold a JSON object")
    return values
