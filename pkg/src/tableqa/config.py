"""Run configuration shared by every pipeline stage.

Defaults are sized for laptop-scale experiments with the built-in linear
encoders (small batches, high learning rate, a few thousand steps).  The
reference large-scale settings -- batch 256, learning rate 1.25e-5, 200k
steps -- remain reachable through the same keys; see README.

Config files are flat ``key=value`` text; every key is also exposed as a
CLI flag of the same name.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    """Raised for unknown keys or unparseable values."""


@dataclass
class Config:
    # Embedding / feature space
    embed_dim: int = 256
    feature_dims: int = 2**18
    use_structure: bool = True
    schema_only: bool = False

    # Retrieval
    top_k: int = 10
    bm25_boost: int = 15

    # Retriever training
    batch_size: int = 16
    learning_rate: float = 1e-3
    dropout: float = 0.2
    max_steps: int = 2000
    pretrain_steps: int = 500
    warmup_frac: float = 0.1
    eval_every: int = 100
    patience: int = 5
    ict_per_table: int = 1

    # Hard-negative mining
    mining_depth: int = 100

    # Reader
    max_answer_len: int = 10
    spans_include_header: bool = True
    reader_dim: int = 64
    reader_hidden: int = 64
    reader_lr: float = 1e-3
    reader_steps: int = 2000
    reader_batch: int = 8

    # Corpus preparation
    dedup_threshold: float = 0.91

    seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        positive_ints = (
            "embed_dim", "feature_dims", "top_k", "bm25_boost", "batch_size",
            "max_answer_len", "reader_dim", "reader_hidden", "reader_batch",
            "eval_every", "ict_per_table", "mining_depth",
        )
        for name in positive_ints:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("learning_rate", "reader_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ConfigError(f"warmup_frac must be in [0, 1], got {self.warmup_frac}")
        for name in ("max_steps", "pretrain_steps", "patience", "reader_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    def replace(self, **kwargs) -> "Config":
        return dataclasses.replace(self, **kwargs)


def _parse_value(name: str, raw: str, typ: type):
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


_FIELD_TYPES: dict[str, type] = {
    f.name: type(getattr(Config(), f.name)) for f in dataclasses.fields(Config)
}


def config_field_types() -> dict[str, type]:
    """Config key name -> python type, for CLI flag generation."""
    return dict(_FIELD_TYPES)


def load_config_file(path: str | Path) -> dict:
    """Parse a flat key=value config file into an override dict."""
    overrides: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}, line {lineno}: expected key=value")
            key, raw = line.split("=", 1)
            key = key.strip()
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{path}, line {lineno}: unknown key {key!r}")
            overrides[key] = _parse_value(key, raw, _FIELD_TYPES[key])
    return overrides


def build_config(file_path: str | Path | None = None, **flag_overrides) -> Config:
    """Defaults < config file < explicit flags (None flags are ignored)."""
    values: dict = {}
    if file_path is not None:
        values.update(load_config_file(file_path))
    for key, val in flag_overrides.items():
        if val is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = val
    return Config(**values)
