"""Pipeline configuration: one TOML document; defaults are the reference settings."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class InputConfig:
    pcap: str = ""
    flows: str = ""
    scenario: str = ""
    reference_days: int = 0
    reference_seed: int = 0


@dataclass
class IngestConfig:
    idle_timeout: float = 120.0
    reorder_tolerance: float = 1.0


@dataclass
class ChannelConfig:
    window: float = 86400.0


@dataclass
class ClusterConfig:
    eps: float = 1.0
    min_pts: int = 1
    slice: float = 14400.0
    standardize: bool = False


@dataclass
class EmbeddingConfig:
    dim: int = 100
    window: int = 5
    negatives: int = 5
    epochs: int = 5
    lr: float = 0.025
    min_count: int = 1


@dataclass
class ModelConfig:
    d_model: int = 128
    n_blocks: int = 6
    n_heads: int = 8
    max_len: int = 16
    positional_encoding: bool = True
    lr: float = 1e-5
    batch_size: int = 8
    epochs: int = 20


@dataclass
class EvalConfig:
    mode: str = "known"
    k: int = 5
    repeats: int = 10
    balance: bool = True
    behseq: str = ""
    unknown_families: list[str] = field(default_factory=list)
    threshold: float = 0.5


@dataclass
class PipelineConfig:
    seed: int = 42
    out_dir: str = "cbseq-out"
    input: InputConfig = field(default_factory=InputConfig)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    channels: ChannelConfig = field(default_factory=ChannelConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def detector_params(self, seed: int | None = None) -> dict:
        e, m = self.embedding, self.model
        return dict(
            dim=e.dim, w2v_window=e.window, w2v_negatives=e.negatives, w2v_epochs=e.epochs,
            w2v_lr=e.lr, min_count=e.min_count, d_model=m.d_model, n_blocks=m.n_blocks,
            n_heads=m.n_heads, max_len=m.max_len, positional_encoding=m.positional_encoding,
            lr=m.lr, batch_size=m.batch_size, epochs=m.epochs,
            seed=self.seed if seed is None else seed,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where or 'root'}]: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, name)
        else:
            kwargs[name] = _coerce(value, default, f"{where}.{name}" if where else name)
    return cls(**kwargs)


def _coerce(value, default, where):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{where} must be a string")
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{where} must be a list")
    return value


def config_from_dict(data: dict) -> PipelineConfig:
    cfg = _build(PipelineConfig, data, "")
    env_seed = os.environ.get("CBSEQ_SEED")
    if env_seed:
        try:
            cfg.seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"CBSEQ_SEED must be an integer, got {env_seed!r}") from None
    if cfg.eval.mode not in ("known", "unknown"):
        raise ConfigError("eval.mode must be 'known' or 'unknown'")
    return cfg


def load_config(path) -> PipelineConfig:
    """Parse a TOML config; relative input paths resolve against its directory."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        cfg = config_from_dict(tomllib.load(fh))
    base = path.parent
    for name in ("pcap", "flows", "scenario"):
        value = getattr(cfg.input, name)
        if value and not Path(value).is_absolute():
            setattr(cfg.input, name, str(base / value))
    if cfg.eval.behseq and not Path(cfg.eval.behseq).is_absolute():
        cfg.eval.behseq = str(base / cfg.eval.behseq)
    if not Path(cfg.out_dir).is_absolute():
        cfg.out_dir = os.path.normpath(base / cfg.out_dir)
    return cfg
