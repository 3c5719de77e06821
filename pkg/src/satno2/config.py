"""Run configuration (YAML). Unknown keys are rejected."""

import os
from datetime import date
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigurationError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataPaths(_Strict):
    s2_dir: Optional[str] = None
    s5p_dir: Optional[str] = None
    stations: list[str] = Field(default_factory=list)
    archive: Optional[str] = None

    @field_validator("stations", mode="before")
    @classmethod
    def _listify(cls, v):
        return [v] if isinstance(v, str) else v


class IngestSettings(_Strict):
    study_span: tuple[date, date] = (date(2018, 1, 1), date(2021, 1, 1))
    regime: Literal["full", "quarterly", "monthly"] = "full"
    qa_threshold: float = Field(0.75, ge=0, le=1)
    max_cloud_fraction: float = Field(0.05, ge=0, le=1)
    min_coverage: float = Field(0.25, ge=0, le=1)
    grid_origin: tuple[float, float] = (35.0, -10.0)
    grid_extent: tuple[float, float] = (37.0, 45.0)
    patch_extent_km: float = 20.0


class TrainSettings(_Strict):
    variant: Literal["fusion", "image-only"] = "fusion"
    learning_rate: float = Field(1e-4, gt=0)
    batch_size: int = Field(32, ge=1)
    max_epochs: int = Field(100, ge=0)
    patience: int = Field(5, ge=1)
    augment: bool = True
    freeze_backbone: bool = False
    head_hidden: int = Field(512, ge=1)
    pretrained: Optional[str] = None
    checkpoint: Optional[str] = None
    group_by_station: bool = False


class SynthSettings(_Strict):
    n_samples: int = Field(2000, ge=1)
    n_emitters: tuple[int, int] = (0, 5)
    intensity: tuple[float, float] = (1.0, 10.0)
    background_noise: float = 50.0
    target_noise: float = 1.0


class PretrainSettings(_Strict):
    dataset: Optional[str] = None  # .npz with "tiles" and "labels"; synthetic when unset
    n_samples: int = Field(600, ge=1)
    epochs: int = Field(5, ge=0)
    learning_rate: float = Field(1e-3, gt=0)
    batch_size: int = Field(32, ge=1)


class ExperimentSettings(_Strict):
    n_seeds: int = Field(10, ge=2)


class MapSettings(_Strict):
    scene: Optional[str] = None
    grid: Optional[str] = None
    checkpoint: Optional[str] = None
    period: str = "full"
    stations: list[dict] = Field(default_factory=list)
    cmap: str = "magma_r"


class SeriesSettings(_Strict):
    checkpoint: Optional[str] = None
    station_id: Optional[str] = None
    mae: Optional[float] = None


class RunConfig(_Strict):
    seed: int = 0
    jobs: int = Field(1, ge=1)
    output: str = "runs/default"
    data: DataPaths = Field(default_factory=DataPaths)
    ingest: IngestSettings = Field(default_factory=IngestSettings)
    train: TrainSettings = Field(default_factory=TrainSettings)
    synth: SynthSettings = Field(default_factory=SynthSettings)
    pretrain: PretrainSettings = Field(default_factory=PretrainSettings)
    experiment: ExperimentSettings = Field(default_factory=ExperimentSettings)
    map: MapSettings = Field(default_factory=MapSettings)
    series: SeriesSettings = Field(default_factory=SeriesSettings)

    def archive_path(self):
        return self.data.archive or os.path.join(self.output, "archive")


def load_config(path=None, **overrides):
    """Read a YAML config (or defaults) and apply non-None top-level overrides."""
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigurationError(str(exc)) from exc


def dump_config(config, path):
    data = config.model_dump(mode="json")
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        yaml.safe_dump(data, fh, sort_keys=True)
    os.replace(tmp, path)
