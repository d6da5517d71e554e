# app/config.py

import logging
import os
from typing import Any, Dict, Literal, Mapping, Optional

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from app.utils.errors import ConfigError

# Load .env before reading process settings
load_dotenv()

logger = logging.getLogger(__name__)

# --- Process settings ---
RUN_ROOT = os.getenv("GAIT_RUN_ROOT", "./runs")
QUEUE_FILE = os.getenv("GAIT_QUEUE_FILE", "pending_runs.json")
PORT = int(os.getenv("PORT", 8001))
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def log_level() -> int:
    """LOG_LEVEL from the environment; invalid values fall back to INFO."""
    level = getattr(logging, os.getenv("LOG_LEVEL", "INFO").upper(), None)
    return level if isinstance(level, int) else logging.INFO


def setup_logging() -> int:
    level = log_level()
    logging.basicConfig(level=level, format=LOG_FORMAT)
    return level


TASK_CLASSES = {"gait_scoring": 4, "dementia_group": 3}


class ExperimentConfig(BaseModel):
    """Every hyperparameter of a run. Sections commented "repo default" are
    tuning choices for the synthetic cohort."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    task: Literal["gait_scoring", "dementia_group"] = "gait_scoring"
    seed: int = 0

    # synthetic data (repo defaults)
    subjects_per_class: int = Field(20, ge=1)
    videos_per_subject: int = Field(2, ge=1)
    frames_per_video: int = Field(160, ge=1)
    f_in: int = Field(16, ge=1)
    separability: float = Field(1.0, ge=0)
    noise: float = Field(0.3, ge=0)
    pairing_rate: float = Field(0.8, ge=0, le=1)
    sentences_per_set: int = Field(4, ge=1)
    data_dir: Optional[str] = None
    knowledge_path: Optional[str] = None

    # preprocessing
    window: int = Field(70, ge=1)
    train_stride: int = Field(25, ge=1)
    n_folds: int = Field(10, ge=2)
    split_level: Literal["subject", "video"] = "subject"
    combination_size: int = Field(4, ge=2)
    correlation_threshold: float = Field(0.4, ge=0, le=1)

    # encoders (d, layers, heads, text_max_len, n_global: repo defaults)
    d: int = Field(64, ge=2)
    n_layers: int = Field(4, ge=1)
    n_heads: int = Field(4, ge=1)
    text_max_len: int = Field(128, ge=2)
    reserved_dims: int = Field(2, ge=0)
    k_ctx: int = Field(8, ge=1)
    n_keywords: int = Field(5, ge=1)
    n_global: int = Field(2, ge=1)
    per_class_projection: bool = False
    use_kapt: bool = True
    use_nte: bool = True

    # losses
    focal_alpha: float = Field(0.25, gt=0, le=1)
    focal_gamma: float = Field(2.0, ge=0)
    tau: float = Field(0.01, gt=0)
    omega: float = Field(0.05, ge=0)
    n_num: int = 200

    # training (repo defaults)
    epochs: int = Field(15, ge=0)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(1e-3, gt=0)

    # decoder (4 layers given; the rest repo defaults)
    decoder_layers: int = Field(4, ge=1)
    decoder_heads: int = Field(4, ge=1)
    decoder_prefix: int = Field(4, ge=1)
    decoder_max_len: int = Field(128, ge=2)
    decoder_epochs: int = Field(30, ge=0)
    decoder_batch_size: int = Field(64, ge=1)
    decoder_lr: float = Field(1e-3, gt=0)
    decoder_warmup_fraction: float = Field(0.05, ge=0, lt=1)
    decoder_min_lr_ratio: float = Field(0.05, ge=0, le=1)
    decoder_clip_norm: Optional[float] = Field(1.0, gt=0)
    ordinal_all_tokens: bool = False
    tau_interp: float = Field(0.1, gt=0)
    decoder_parameter_sets: int = Field(720, ge=2)
    decoder_combinations: int = Field(8, ge=1)
    decoder_sentences_per_set: int = Field(8, ge=1)

    @model_validator(mode="after")
    def _check(self) -> "ExperimentConfig":
        if self.n_num != 200:
            raise ValueError("n_num is fixed at 200 by the numeric token-id block")
        if self.d % self.n_heads or self.d % self.decoder_heads:
            raise ValueError(f"d={self.d} must be divisible by n_heads and decoder_heads")
        if self.frames_per_video < self.window:
            raise ValueError(f"frames_per_video ({self.frames_per_video}) must be >= window ({self.window})")
        return self

    @property
    def n_classes(self) -> int:
        return TASK_CLASSES[self.task]

    def variant_name(self) -> str:
        if self.use_kapt and self.use_nte:
            return "full"
        if self.use_kapt:
            return "kapt"
        if self.use_nte:
            return "nte"
        return "baseline"


def _coerce_keys(values: Mapping[str, Any]) -> Dict[str, Any]:
    out = {}
    for key, value in values.items():
        if value is None or value == "":
            continue
        out[key.strip().lower()] = value
    return out


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """Defaults, then the flat KEY=value file at ``path``, then ``overrides``."""
    values: Dict[str, Any] = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"Config file not found: {path}")
        values.update(_coerce_keys(dotenv_values(path)))
        logger.debug(f"Read {len(values)} config keys from {path}")
    values.update(_coerce_keys(overrides or {}))
    try:
        return ExperimentConfig(**values)
    except ValidationError as e:
        raise ConfigError(f"Invalid experiment config: {e}") from e


def write_config(cfg: ExperimentConfig, path: str) -> str:
    """Writes the flat KEY=value form that load_config reads back."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for key, value in cfg.model_dump().items():
            if value is not None:
                f.write(f"{key.upper()}={value}\n")
    return path
