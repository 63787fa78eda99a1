"""
Configuration schemas for the VocSeg toolkit.

Every run is described by one RunConfigFile (JSON). Unknown keys are rejected so a typo in a
config file fails loudly instead of silently falling back to a default.
"""

import json
import logging
import os
from enum import Enum
from typing import Literal, NamedTuple, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

logger = logging.getLogger(__name__)

RAW_IMAGE_SIZE = 84
RAW_SPACING_MM = 2.4
SEG_CLASS_NAMES = ("background", "tongue", "velum", "upper_lip", "lower_lip")


class FusionMode(str, Enum):
    IMAGE_ONLY = "image_only"
    CONCAT_VA = "concat_va"
    CONCAT_VP = "concat_vp"
    CONCAT_VAP = "concat_vap"
    CROSS_ATTENTION = "cross_attention"

    @property
    def uses_audio(self) -> bool:
        return self in (FusionMode.CONCAT_VA, FusionMode.CONCAT_VAP, FusionMode.CROSS_ATTENTION)

    @property
    def uses_phono(self) -> bool:
        return self in (FusionMode.CONCAT_VP, FusionMode.CONCAT_VAP, FusionMode.CROSS_ATTENTION)

    @property
    def is_concat(self) -> bool:
        return self in (FusionMode.CONCAT_VA, FusionMode.CONCAT_VP, FusionMode.CONCAT_VAP)


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image_size: int = Field(64, ge=2)
    patch_size: int = Field(8, ge=1)
    d_model: int = Field(64, ge=2)
    n_heads: int = Field(4, ge=1)
    n_encoder_layers: int = Field(2, ge=1)
    n_decoder_layers: int = Field(2, ge=1)
    mlp_ratio: int = Field(2, ge=1)
    n_audio_frames: int = Field(4, ge=1)
    n_audio_features: int = Field(16, ge=1)
    n_phono_classes: int = Field(12, ge=1)
    n_seg_classes: int = Field(5, ge=2)
    fusion_mode: FusionMode = FusionMode.CROSS_ATTENTION
    modality_dropout_p: float = Field(0.25, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_divisibility(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        return self

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_size ** 2


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid", allow_inf_nan=False)

    w_ce: float = Field(1.0, ge=0.0)
    w_dice: float = Field(1.0, ge=0.0)
    w_contrastive: float = Field(0.1, ge=0.0)

    @model_validator(mode="after")
    def _check_any_positive(self):
        if max(self.w_ce, self.w_dice, self.w_contrastive) <= 0.0:
            raise ValueError("at least one loss weight must be positive")
        return self


class ContrastiveConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    projection_dim: int = Field(32, ge=2)
    temperature: float = Field(0.07, gt=0.0)
    levels: list[Literal["global", "local"]] = Field(default_factory=lambda: ["global", "local"])


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(1e-4, gt=0.0)
    batch_size: int = Field(8, ge=1)
    patience: int = Field(15, ge=1)
    max_epochs: int = Field(60, ge=0)
    unfreeze_schedule: Optional[list[tuple[int, int]]] = None
    modality_dropout_p: Optional[float] = Field(None, ge=0.0, le=1.0)
    seed: int = 17
    contrastive: bool = False
    weight_decay: float = Field(0.01, ge=0.0)
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(1e-8, gt=0.0)
    validation_fraction: float = Field(0.15, gt=0.0, lt=1.0)
    warmup_steps: int = Field(0, ge=0)
    lr_schedule: Literal["constant", "linear"] = "constant"

    @field_validator("unfreeze_schedule")
    @classmethod
    def _check_schedule(cls, schedule):
        if schedule is None:
            return schedule
        epochs = [epoch for epoch, _ in schedule]
        if epochs != sorted(epochs):
            raise ValueError("unfreeze_schedule epochs must be nondecreasing")
        if any(epoch < 0 or block < 0 for epoch, block in schedule):
            raise ValueError("unfreeze_schedule entries must be nonnegative")
        return schedule

    @field_validator("betas")
    @classmethod
    def _check_betas(cls, betas):
        if not all(0.0 <= b < 1.0 for b in betas):
            raise ValueError("betas must lie in [0, 1)")
        return betas

    def resolved_unfreeze_schedule(self, n_encoder_layers: int) -> list:
        """Top image-encoder block at epoch 3, the remaining blocks at epoch 6."""
        if self.unfreeze_schedule is not None:
            return [tuple(entry) for entry in self.unfreeze_schedule]
        top = n_encoder_layers - 1
        return [(3, top)] + [(6, block) for block in range(top)]


class AblationEntry(NamedTuple):
    fusion_mode: FusionMode
    contrastive: bool
    label: str


ABLATION_CONFIGS = {
    "imageonly": AblationEntry(FusionMode.IMAGE_ONLY, False, "Image-Only (V)"),
    "concat_va": AblationEntry(FusionMode.CONCAT_VA, False, "Concat VA"),
    "concat_vp": AblationEntry(FusionMode.CONCAT_VP, False, "Concat VP"),
    "concat_vap": AblationEntry(FusionMode.CONCAT_VAP, False, "Concat VAP"),
    "crossatt": AblationEntry(FusionMode.CROSS_ATTENTION, False, "Cross-Att"),
    "contrastive": AblationEntry(FusionMode.CONCAT_VAP, True, "Contrastive"),
    "vocsegmri": AblationEntry(FusionMode.CROSS_ATTENTION, True, "VocSegMRI"),
}
VIDEO_ONLY_ROW = "vocsegmri_video_only"
VIDEO_ONLY_LABEL = "VocSegMRI (video-only)"


class AblationSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    configs: list[str] = Field(default_factory=lambda: list(ABLATION_CONFIGS))
    n_seeds: int = Field(3, ge=1)
    folds: Optional[list[int]] = None
    include_video_only: bool = True
    save_checkpoints: bool = False

    @field_validator("configs")
    @classmethod
    def _check_configs(cls, configs):
        unknown = [name for name in configs if name not in ABLATION_CONFIGS]
        if unknown:
            raise ValueError(f"unknown ablation configs {unknown}; choose from {list(ABLATION_CONFIGS)}")
        if not configs:
            raise ValueError("at least one ablation config is required")
        return configs


class RunConfigFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    contrastive: ContrastiveConfig = Field(default_factory=ContrastiveConfig)
    loss_weights: LossWeights = Field(default_factory=LossWeights)
    ablation: AblationSettings = Field(default_factory=AblationSettings)
    dataset: Optional[str] = None

    @classmethod
    def from_json_file(cls, path: Optional[str]) -> "RunConfigFile":
        if path is None:
            return cls()
        with open(path) as handle:
            return cls.model_validate(json.load(handle))

    def with_overrides(self, overrides: dict) -> "RunConfigFile":
        """Apply dotted-key overrides (``{"train.max_epochs": 3}``); None values are skipped."""
        document = self.model_dump(mode="json")
        for dotted, value in overrides.items():
            if value is None:
                continue
            node = document
            *parents, leaf = dotted.split(".")
            for key in parents:
                node = node[key]
            node[leaf] = value.value if isinstance(value, Enum) else value
        return type(self).model_validate(document)

    def for_ablation(self, name: str) -> "RunConfigFile":
        entry = ABLATION_CONFIGS[name]
        return self.with_overrides({"model.fusion_mode": entry.fusion_mode, "train.contrastive": entry.contrastive})

    def effective_dropout_p(self) -> float:
        if self.train.modality_dropout_p is not None:
            return self.train.modality_dropout_p
        return self.model.modality_dropout_p

    def write_resolved(self, out_dir: str) -> str:
        path = os.path.join(out_dir, "resolved_config.json")
        os.makedirs(out_dir, exist_ok=True)
        with open(path, "w") as handle:
            json.dump(self.model_dump(mode="json"), handle, indent=2, sort_keys=True)
        return path


def format_validation_error(error) -> list:
    """One 'dotted.key.path: message' line per pydantic error."""
    lines = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"{location}: {item['msg']}")
    return lines


def load_environment() -> None:
    load_dotenv()


def worker_count() -> int:
    try:
        return max(1, int(os.getenv("VOCSEG_THREADS", "1")))
    except ValueError:
        logger.warning(f"[WARN] VOCSEG_THREADS={os.getenv('VOCSEG_THREADS')!r} is not an integer, using 1")
        return 1


def log_level() -> str:
    return os.getenv("VOCSEG_LOG_LEVEL", "INFO").upper()
