"""Structured run configuration loaded from YAML.

A single environment variable (TOKENFOLD_DATA_DIR) selects the directory all
relative artifact paths resolve against; it defaults to the config file's
directory.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dit import DiTConfig
from .errors import ConfigError
from .ipa import IPAConfig

DATA_DIR_ENV = "TOKENFOLD_DATA_DIR"


@dataclass
class TokenizerSection:
    K: int = 64
    w: int = 2
    d: int = 16
    pool_k: int = 1


@dataclass
class CorpusSection:
    length: int = 64
    n_per_class: tuple[int, int, int] = (60, 30, 30)
    jitter: float = 0.08
    seed_offset: int = 1000


@dataclass
class ScheduleSection:
    T: int = 200
    kind: str = "cosine"


@dataclass
class TrainSection:
    decoder_steps: int = 800
    decoder_lr: float = 1e-3
    dit_steps: int = 4000
    batch_size: int = 16
    lr: float = 1e-3
    warmup_steps: int = 50


@dataclass
class SamplerSection:
    guidance_w: float = 1.0
    eps_cache: float = 0.05
    gate_mode: str = "per-token"
    gate_start_fraction: float = 0.3
    rho_gate: float = 0.05
    frame_refresh: int = 10
    ddim: bool = False


def desk_dit_config() -> DiTConfig:
    """Desk-scale preset: small enough to train within the toy budget while
    keeping the point-attention layers a large share of the per-step cost."""
    return DiTConfig(
        n_layers=2, d_model=64, n_heads=4, d_ff=128, latent_dim=16, n_ipa_layers=2
    )


@dataclass
class RunConfig:
    seed: int
    data_dir: Path
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    dit: DiTConfig = field(default_factory=desk_dit_config)
    train: TrainSection = field(default_factory=TrainSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    codebook_path: str = "codebook.npz"
    decoder_path: str = "decoder.pt"
    container_path: str = "model.pt"

    def resolve(self, name: str) -> Path:
        return self.data_dir / name


def _section(cls, data: dict, key: str):
    sub = data.get(key, {})
    if not isinstance(sub, dict):
        raise ConfigError(f"section {key!r} must be a mapping")
    try:
        return cls(**sub)
    except TypeError as exc:
        raise ConfigError(f"bad section {key!r}: {exc}") from exc


def load_config(path, require: tuple[str, ...] = ()) -> RunConfig:
    """Parse a YAML run config. require lists artifact attributes
    ("codebook_path", ...) whose files must already exist."""
    path = Path(path)
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if "seed" not in data:
        raise ConfigError("config must set a seed")
    data_dir = Path(os.environ.get(DATA_DIR_ENV, "") or data.get("data_dir", "") or path.parent)

    if "dit" in data:
        dit_section = dict(data["dit"])
        ipa_section = dit_section.pop("ipa", {})
        try:
            dit_cfg = DiTConfig(ipa=IPAConfig(**ipa_section), **dit_section)
        except TypeError as exc:
            raise ConfigError(f"bad dit section: {exc}") from exc
    else:
        dit_cfg = desk_dit_config()

    cfg = RunConfig(
        seed=int(data["seed"]),
        data_dir=data_dir,
        tokenizer=_section(TokenizerSection, data, "tokenizer"),
        corpus=_section(CorpusSection, data, "corpus"),
        schedule=_section(ScheduleSection, data, "schedule"),
        dit=dit_cfg,
        train=_section(TrainSection, data, "train"),
        sampler=_section(SamplerSection, data, "sampler"),
        codebook_path=data.get("codebook_path", "codebook.npz"),
        decoder_path=data.get("decoder_path", "decoder.pt"),
        container_path=data.get("container_path", "model.pt"),
    )
    if cfg.dit.latent_dim != cfg.tokenizer.d:
        raise ConfigError("dit.latent_dim must match tokenizer.d")
    for attr in require:
        p = cfg.resolve(getattr(cfg, attr))
        if not p.exists():
            raise ConfigError(f"required file {p} does not exist")
    return cfg
