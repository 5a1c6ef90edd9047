"""Pipeline configuration schema.

Configs are JSON or YAML documents. Unknown keys are rejected everywhere and
relative paths resolve against the directory holding the config file.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .features import DEFAULT_THETA_T, FALLBACK_THETA_LONG, FALLBACK_THETA_SHORT, MIN_SAMPLES
from .fusion import DEFAULT_IOM_THRESHOLD


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class VideoInput(_Strict):
    name: str
    detections: list[str] = Field(min_length=1, description="one detection file per source")
    embeddings: str
    embeddings_long: Optional[str] = Field(
        None, description="embeddings after inter-tracklet retraining, used for merging"
    )
    flows: Optional[str] = None
    gt_labels: Optional[str] = Field(None, description="labels for evaluating this video")
    train_gt_labels: Optional[str] = Field(None, description="labelled training set for train_gt triplets")


class FusionSettings(_Strict):
    iom_threshold: float = Field(DEFAULT_IOM_THRESHOLD, gt=0.0, le=1.0)


class ThresholdSettings(_Strict):
    theta_t: int = Field(DEFAULT_THETA_T, ge=1)
    fallback_theta_short: float = Field(FALLBACK_THETA_SHORT, ge=-1.0, le=1.0)
    fallback_theta_long: float = Field(FALLBACK_THETA_LONG, ge=-1.0, le=1.0)
    theta_short: Optional[float] = Field(None, ge=-1.0, le=1.0, description="fixed value, skips estimation")
    theta_long: Optional[float] = Field(None, ge=-1.0, le=1.0, description="fixed value, skips estimation")
    min_samples: int = Field(MIN_SAMPLES, ge=2)
    long_method: Literal["gaussian", "otsu"] = "gaussian"
    pooled: bool = False
    histogram_bins: int = Field(50, ge=2)


class SamplerSettings(_Strict):
    intra_count: int = Field(1000, ge=1)
    inter_count: int = Field(1000, ge=1)
    batch_size: int = Field(32, ge=2)
    with_replacement: bool = False
    max_retries: int = Field(1000, ge=1)

    @field_validator("batch_size")
    @classmethod
    def _even(cls, v: int) -> int:
        if v % 2:
            raise ValueError("batch_size must be even")
        return v


class Flags(_Strict):
    identity_flow_fallback: bool = False
    normalize_centroids: bool = False


class PipelineConfig(_Strict):
    output_dir: str
    seed: int = 0
    class_id: int = 2
    videos: list[VideoInput] = Field(default_factory=list)
    fusion: FusionSettings = FusionSettings()
    thresholds: ThresholdSettings = ThresholdSettings()
    sampler: SamplerSettings = SamplerSettings()
    flags: Flags = Flags()
    base_dir: Optional[str] = Field(None, description="directory relative paths resolve against")

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        if not p.is_absolute() and self.base_dir is not None:
            p = Path(self.base_dir) / p
        return p


def load_config(path: str | Path, **overrides) -> PipelineConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    data = yaml.safe_load(text) if path.suffix in (".yaml", ".yml") else json.loads(text)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a mapping")
    data.setdefault("base_dir", str(path.parent.resolve()))
    data.update({k: v for k, v in overrides.items() if v is not None})
    return PipelineConfig.model_validate(data)
