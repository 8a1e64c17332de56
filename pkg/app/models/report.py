import enum
import math
from datetime import date
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, computed_field


class ShapeClass(str, enum.Enum):
    VL = "VL"
    L = "L"
    W = "W"
    VW = "VW"


class CrudenType(str, enum.Enum):
    FA = "FA"
    TO = "TO"
    S = "S"
    SP = "SP"
    FL = "FL"
    RS = "RS"
    TS = "TS"


DEFAULT_MULTIPLICITIES = (2, 2, 1, 2, 1)


class ErrorBudget(BaseModel):
    """Millimetre error components propagated into one sigma."""

    model_config = ConfigDict(frozen=True)

    m_tls: float = Field(default=6.0, ge=0)
    m_mreg: float = Field(default=30.0, ge=0)
    m_treg: float = Field(default=60.0, ge=0)
    m_veg: float = Field(default=10.0, ge=0)
    m_mesh: float = Field(default=10.0, ge=0)
    multiplicities: tuple[int, int, int, int, int] = DEFAULT_MULTIPLICITIES

    @property
    def components(self) -> tuple[float, float, float, float, float]:
        return (self.m_tls, self.m_mreg, self.m_treg, self.m_veg, self.m_mesh)

    @computed_field
    @property
    def sigma_mm(self) -> float:
        return math.sqrt(sum(k * m * m for k, m in zip(self.multiplicities, self.components)))


class EpochRow(BaseModel):
    epoch_id: str
    acquisition_date: date
    station_count: int = Field(ge=1)


class FieldRow(BaseModel):
    compared_epoch: str
    reference_epoch: str
    interval_days: int
    mean_m: float
    std_m: float
    valid_count: int
    mean_m_unmasked: float
    std_m_unmasked: float
    vertex_count: int


class RegionRow(BaseModel):
    region_id: int
    compared_epoch: str
    reference_epoch: str
    area_m2: float
    mean_rate_mm_day: float
    mean_displacement_m: float
    volume_m3: float
    W_m: float
    L_m: float
    theta_deg: float
    motion_vector: tuple[float, float]
    shape_class: ShapeClass
    cruden_type: CrudenType | None = None

    @computed_field
    @property
    def type_label(self) -> str:
        if self.cruden_type is None:
            return self.shape_class.value
        return f"{self.shape_class.value}-{self.cruden_type.value}"


class Report(BaseModel):
    epochs: list[EpochRow] = []
    epoch_pairs: list[FieldRow] = []
    regions: list[RegionRow] = []
    budget: ErrorBudget | None = None
    provenance: dict[str, Any] = {}


class TrialRecord(BaseModel):
    trial: int
    method: str
    success: bool
    pose_rmse: float | None = None
    rotation_deg: float
    translation_m: float
    error: str | None = None


class BenchmarkRow(BaseModel):
    method: str
    trials: int
    successes: int
    success_rate: float
    # over successful trials; None when every trial failed
    mean_pose_rmse: float | None = None


class BenchmarkReport(BaseModel):
    rows: list[BenchmarkRow] = []
    trials: list[TrialRecord] = []
    config: dict[str, Any] = {}


class ManifestEntry(BaseModel):
    stage: str
    kind: str
    # relative to the run directory
    path: str


class RunManifest(BaseModel):
    run_dir: str
    artifacts: list[ManifestEntry] = []


class RegionRecord(BaseModel):
    """A significant region as exchanged between the command-line stages."""

    region_id: int
    vertex_set: list[int]
    area_m2: float
    mean_rate_mm_day: float
    volume_m3: float
    mean_displacement_m: float
    compared_epoch: str = ""
    reference_epoch: str = ""


class RegionSet(BaseModel):
    threshold_mm_day: float
    min_area_m2: float
    regions: list[RegionRecord] = []
