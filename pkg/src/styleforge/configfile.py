"""Flat key = value configuration files.

One assignment per line; blank lines and lines starting with # are ignored.
Every key is typed and defaulted below; unknown keys and bad values are
errors. Model and discriminator dimensions live here, but vocabulary size
always comes from the tokenizer table supplied at run time.

Schema (defaults in parentheses):

  mode (semi_supervised)          semi_supervised | unsupervised | supervised_only
  variant (lm_disc)               lm_disc | cnn_disc | none
  objective (mmi)                 mmi | plain
  seed (0)
  total_epochs (30)               includes the discriminator pretraining epochs
  pretrain_epochs (10)
  max_tokens_per_batch (64)       padded-cell budget per batch side
  update_frequency (4)            micro-batches accumulated per optimizer step
  learning_rate (3e-5)
  adam_beta1 (0.9)  adam_beta2 (0.999)  adam_eps (1e-8)
  disc_learning_rate (3e-4)
  lambda_forward (0.8)            forward-translation weight in [0, 1]
  w_disc (1.0)  w_cycle (0.6)
  max_sentence_tokens (64)        longer sentences are rejected at load time
  unlabeled_per_epoch (0)         0 = balance against parallel batches (semi)
                                  or use the full pools (unsupervised)
  rollout_margin (8)              generation headroom over source length
  model_layers (2) model_heads (4) model_embed_dim (128) model_ffn_dim (256)
  model_dropout (0.0) model_max_positions (128) model_tie_embeddings (true)
  lm_layers (2) lm_heads (4) lm_embed_dim (128) lm_ffn_dim (256)
  lm_dropout (0.0) lm_max_positions (128) lm_length_normalize (true)
  bpe_table ()                    path to the tokenizer table
  train_src () train_tgt () valid_src () valid_tgt () test_src () test_tgt ()
  pool_source () pool_target ()
  disc_checkpoint ()
  out_dir ()
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .discriminator import LmConfig
from .errors import ConfigError
from .model import ModelConfig
from .objectives import LossWeights

MODES = ("semi_supervised", "unsupervised", "supervised_only")
VARIANTS = ("lm_disc", "cnn_disc", "none")
OBJECTIVES = ("mmi", "plain")


@dataclass(frozen=True)
class DataPaths:
    bpe_table: str = ""
    train_src: str = ""
    train_tgt: str = ""
    valid_src: str = ""
    valid_tgt: str = ""
    test_src: str = ""
    test_tgt: str = ""
    pool_source: str = ""
    pool_target: str = ""
    disc_checkpoint: str = ""
    out_dir: str = ""


@dataclass(frozen=True)
class TrainingConfig:
    mode: str = "semi_supervised"
    variant: str = "lm_disc"
    objective: str = "mmi"
    seed: int = 0
    total_epochs: int = 30
    pretrain_epochs: int = 10
    max_tokens_per_batch: int = 64
    update_frequency: int = 4
    learning_rate: float = 3e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    disc_learning_rate: float = 3e-4
    weights: LossWeights = field(default_factory=LossWeights)
    max_sentence_tokens: int = 64
    unlabeled_per_epoch: int = 0
    rollout_margin: int = 8
    model_layers: int = 2
    model_heads: int = 4
    model_embed_dim: int = 128
    model_ffn_dim: int = 256
    model_dropout: float = 0.0
    model_max_positions: int = 128
    model_tie_embeddings: bool = True
    lm_layers: int = 2
    lm_heads: int = 4
    lm_embed_dim: int = 128
    lm_ffn_dim: int = 256
    lm_dropout: float = 0.0
    lm_max_positions: int = 128
    lm_length_normalize: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(
                f"objective must be one of {OBJECTIVES}, got {self.objective!r}"
            )
        if not 0 <= self.pretrain_epochs < self.total_epochs:
            raise ConfigError(
                f"pretrain_epochs {self.pretrain_epochs} must be below "
                f"total_epochs {self.total_epochs}"
            )
        if self.update_frequency < 1:
            raise ConfigError("update_frequency must be at least 1")
        if self.learning_rate <= 0 or self.disc_learning_rate <= 0:
            raise ConfigError("learning rates must be positive")
        if self.max_tokens_per_batch < 1:
            raise ConfigError("max_tokens_per_batch must be positive")

    @property
    def main_epochs(self) -> int:
        return self.total_epochs - self.pretrain_epochs

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            n_layers=self.model_layers,
            n_heads=self.model_heads,
            embed_dim=self.model_embed_dim,
            ffn_dim=self.model_ffn_dim,
            dropout=self.model_dropout,
            max_positions=self.model_max_positions,
            tie_embeddings=self.model_tie_embeddings,
        )

    def lm_config(self, vocab_size: int) -> LmConfig:
        return LmConfig(
            vocab_size=vocab_size,
            n_layers=self.lm_layers,
            n_heads=self.lm_heads,
            embed_dim=self.lm_embed_dim,
            ffn_dim=self.lm_ffn_dim,
            dropout=self.lm_dropout,
            max_positions=self.lm_max_positions,
            length_normalize=self.lm_length_normalize,
        )


_WEIGHT_KEYS = {"lambda_forward", "w_disc", "w_cycle"}
_PATH_KEYS = {f.name for f in fields(DataPaths)}
_CONFIG_KEYS = {
    f.name: f.type for f in fields(TrainingConfig) if f.name != "weights"
}


def _parse_bool(value: str, key: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def _convert(key: str, value: str, kind: str):
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            return _parse_bool(value, key)
        return value
    except ValueError as exc:
        raise ConfigError(f"{key}: expected {kind}, got {value!r}") from exc


def parse_config_text(text: str) -> tuple[TrainingConfig, DataPaths]:
    assignments: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if key in assignments:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        assignments[key] = value

    config_kwargs: dict = {}
    weight_kwargs: dict = {}
    path_kwargs: dict = {}
    for key, value in assignments.items():
        if key in _WEIGHT_KEYS:
            weight_kwargs[key] = _convert(key, value, "float")
        elif key in _PATH_KEYS:
            path_kwargs[key] = value
        elif key in _CONFIG_KEYS:
            config_kwargs[key] = _convert(key, value, _CONFIG_KEYS[key])
        else:
            raise ConfigError(f"unknown configuration key {key!r}")

    config = TrainingConfig(weights=LossWeights(**weight_kwargs), **config_kwargs)
    return config, DataPaths(**path_kwargs)


def parse_config_file(path: str) -> tuple[TrainingConfig, DataPaths]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)
