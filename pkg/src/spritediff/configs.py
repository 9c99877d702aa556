"""Structured-text (JSON) config files with strict schema validation.

Every training subcommand takes one JSON object; unknown keys are
rejected so typos fail loudly instead of silently using defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Type, TypeVar

T = TypeVar("T")


class ConfigError(ValueError):
    pass


def config_from_dict(raw: dict, cls: Type[T]) -> T:
    if not isinstance(raw, dict):
        raise ConfigError(f"expected a JSON object for {cls.__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown keys in {cls.__name__}: {unknown}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def load_config(path, cls: Type[T]) -> T:
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return config_from_dict(raw, cls)


@dataclass
class DiffusionTrainConfig:
    out_dir: str
    seed: int = 0
    latent_channels: int = 8
    embed_dim: int = 64
    ffn_dim: int = 256
    encoder_hidden: int = 16
    latent_scale: float = 1.0
    timesteps: int = 70
    beta_start: float = 1e-4
    beta_end: float = 0.02
    finetune_t1: int = 1
    finetune_t2: int = 40
    autoencoder_steps: int = 1200
    autoencoder_steps_polish: int = 600
    autoencoder_lr: float = 3e-3
    autoencoder_lr_polish: float = 8e-4
    noise_steps: int = 4000
    noise_steps_polish: int = 2000
    noise_lr: float = 2e-3
    noise_lr_polish: float = 5e-4
    randomize_rounds: int = 8
    batch_size: int = 32
    dialogue_data: Optional[str] = None
    multi_round_aux_steps: int = 0
    checkpoint_name: str = "diffusion.ckpt"

    def __post_init__(self):
        if self.batch_size < 1 or self.timesteps < 1:
            raise ConfigError("batch size and timesteps must be positive")
        if not (1 <= self.finetune_t1 <= self.finetune_t2 <= self.timesteps):
            raise ConfigError("need 1 <= finetune_t1 <= finetune_t2 <= timesteps")


@dataclass
class PreferenceTrainConfig:
    out_dir: str
    seed: int = 0
    pairs_data: Optional[str] = None
    synth_pairs: int = 3000
    holdout_pairs: int = 400
    epochs: int = 10
    epochs_polish: int = 6
    lr: float = 3e-3
    lr_polish: float = 8e-4
    batch_size: int = 64
    augment_sigma: float = 0.02
    adapters_enabled: bool = True
    num_logits: int = 8
    fusion_dim: int = 128
    adapter_rank: int = 64
    adapter_scale: float = 16.0
    checkpoint_name: str = "preference.ckpt"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be positive")


@dataclass
class RewardFinetuneConfig:
    out_dir: str
    base_checkpoint: str
    preference_checkpoint: str
    seed: int = 0
    steps: int = 400
    batch_size: int = 8
    learning_rate: float = 3e-4
    adapter_lr: float = 3e-4
    reward_scale: float = 1.0
    update_mode: str = "ppo-clip"
    ppo_clip: float = 0.2
    policy_sigma: float = 0.1
    optimizer: str = "adam"
    adapter_rank: int = 4
    adapter_scale: float = 4.0
    ablation: str = "none"  # none | div | cons | mi
    max_round: int = 8
    checkpoint_name: str = "finetuned.ckpt"

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be positive")
        if self.ablation not in ("none", "div", "cons", "mi"):
            raise ConfigError(f"unknown ablation {self.ablation!r}")
