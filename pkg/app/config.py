from datetime import date
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, Field, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.models.params import ClothParams, HybridParams, MultiviewParams, SlideSpec
from app.models.report import CrudenType, ErrorBudget


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="SLIDEWATCH_", env_file=".env", extra="ignore")

    database_url: str = "sqlite:///slidewatch.db"
    run_root: Path = Path("runs")
    log_level: str = "INFO"
    # thread pool size for per-sub-slope filtering; 1 runs serially
    workers: int = Field(default=1, ge=1)
    cors_origins: list[str] = []


settings = Settings()


class RegistrationConfig(BaseModel):
    multiview: MultiviewParams = MultiviewParams()
    hybrid: HybridParams = HybridParams()
    normal_neighbors: int = Field(default=10, ge=3)
    # merged epoch clouds are thinned to this voxel before cross-epoch registration
    merge_voxel: float | None = Field(default=0.1, gt=0)
    success_threshold: float = Field(default=1.0, gt=0)


class FilteringConfig(BaseModel):
    enabled: bool = True
    method: Literal["csf", "visibility"] = "csf"
    cell_size: float = Field(default=10.0, gt=0)
    overlap: float = Field(default=1.0, ge=0)
    min_points: int = Field(default=30, ge=3)
    cloth: ClothParams = ClothParams()
    visibility_directions: int = Field(default=32, ge=8)
    visibility_threshold: float = Field(default=0.3, gt=0)
    # manual post-processing masks keyed by epoch id, applied after classification
    masks: dict[str, Path] = {}


class DeformationConfig(BaseModel):
    # ground clouds are thinned to this voxel before triangulation
    dtm_voxel: float | None = Field(default=0.5, gt=0)
    max_edge: float = Field(default=2.0, gt=0)
    max_dist: float = Field(default=5.0, gt=0)
    edge_tolerance: float = Field(default=0.1, ge=0)
    rate_threshold: float = Field(default=2.0, ge=0)
    min_area: float = Field(default=25.0, ge=0)


class EpochConfig(BaseModel):
    epoch_id: str
    acquisition_date: date
    # station scans for file-based runs; synthetic runs fill these in
    scans: list[Path] = []


class SyntheticSlide(SlideSpec):
    # first epoch index at which the slide is present
    epoch: int = Field(default=1, ge=1)


class SyntheticConfig(BaseModel):
    extent: tuple[float, float] = (50.0, 40.0)
    slope_deg: float = Field(default=35.0, ge=0, lt=90)
    roughness: float = Field(default=0.3, ge=0)
    density: float = Field(default=20.0, gt=0)
    vegetation_coverage: float = Field(default=0.0, ge=0, lt=1)
    vegetation_height: tuple[float, float] = (0.5, 2.0)
    stations: int = Field(default=2, ge=1)
    station_distance: float = Field(default=30.0, gt=0)
    station_spread: float = Field(default=10.0, ge=0)
    station_yaw_deg: float = 4.0
    noise_sigma: float = Field(default=0.006, ge=0)
    max_range: float | None = Field(default=None, gt=0)
    occlusion: bool = False
    # station pose priors for multi-view registration: noisy copies of the true poses
    station_priors: bool = False
    prior_sigma_m: float = Field(default=1.0, ge=0)
    prior_sigma_deg: float = Field(default=2.0, ge=0)
    slides: list[SyntheticSlide] = []


class PipelineConfig(BaseModel):
    epochs: list[EpochConfig]
    synthetic: SyntheticConfig | None = None
    registration: RegistrationConfig = RegistrationConfig()
    filtering: FilteringConfig = FilteringConfig()
    deformation: DeformationConfig = DeformationConfig()
    budget: ErrorBudget = ErrorBudget()
    annotations: dict[int, CrudenType] = {}
    motion_azimuth_deg: float | None = None
    rng_seed: int = 0
    run_dir: Path = Path("runs/default")

    @model_validator(mode="after")
    def _check_epochs(self) -> "PipelineConfig":
        if len(self.epochs) < 2:
            raise ValueError("at least two epochs are needed")
        dates = [e.acquisition_date for e in self.epochs]
        if any(b <= a for a, b in zip(dates, dates[1:])):
            raise ValueError("epoch dates must strictly increase")
        ids = [e.epoch_id for e in self.epochs]
        if len(set(ids)) != len(ids):
            raise ValueError("epoch ids must be unique")
        if self.synthetic is None and any(not e.scans for e in self.epochs):
            raise ValueError("every epoch needs scans unless a synthetic scenario is configured")
        if self.synthetic is not None:
            for slide in self.synthetic.slides:
                if slide.epoch >= len(self.epochs):
                    raise ValueError(f"slide epoch {slide.epoch} is beyond the epoch list")
        return self


def load_config(path: Path | str) -> PipelineConfig:
    return PipelineConfig.model_validate_json(Path(path).read_text())


def dump_config(config: PipelineConfig, path: Path | str | None = None) -> str:
    text = config.model_dump_json(indent=2)
    if path is not None:
        Path(path).write_text(text)
    return text


class BenchmarkConfig(BaseModel):
    """Seeded epoch-pair registration trials with a random rigid offset and a local surface change."""

    trials: int = Field(default=10, ge=1)
    seed: int = 0
    extent: tuple[float, float] = (30.0, 30.0)
    slope_deg: float = Field(default=30.0, ge=0, lt=90)
    roughness: float = Field(default=0.5, ge=0)
    density: float = Field(default=6.0, gt=0)
    # rotation about the vertical drawn uniformly from this range, in degrees
    rotation_deg: tuple[float, float] = (0.0, 10.0)
    translation_m: float = Field(default=1.0, ge=0)
    # share of the target surface displaced by a local change of change_depth metres
    local_change_fraction: float = Field(default=0.0, ge=0, lt=1)
    change_depth: float = 1.0
    noise_sigma: float = Field(default=0.006, ge=0)
    sample_fraction: float = Field(default=0.8, gt=0, le=1)
    methods: list[Literal["icp", "coarse+icp", "hybrid"]] = ["icp", "coarse+icp", "hybrid"]
    success_threshold: float = Field(default=1.0, gt=0)
    hybrid: HybridParams = HybridParams()
    normal_neighbors: int = Field(default=10, ge=3)
    workers: int = Field(default=1, ge=1)
