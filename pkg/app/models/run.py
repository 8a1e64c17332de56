import enum
from datetime import datetime, timezone

from sqlmodel import Field, SQLModel


class RunStatus(str, enum.Enum):
    running = "running"
    succeeded = "succeeded"
    failed = "failed"


class PipelineRun(SQLModel, table=True):
    __tablename__ = "pipeline_run"

    id: int | None = Field(default=None, primary_key=True)
    status: RunStatus = RunStatus.running
    run_dir: str = ""
    rng_seed: int = 0
    report_path: str | None = None
    failed_stage: str | None = None
    error: str | None = None
    created_at: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))
    finished_at: datetime | None = None


class RunPublic(SQLModel):
    id: int
    status: RunStatus
    run_dir: str
    rng_seed: int
    report_path: str | None
    failed_stage: str | None
    error: str | None
    created_at: datetime
    finished_at: datetime | None


class RunArtifact(SQLModel, table=True):
    __tablename__ = "run_artifact"

    id: int | None = Field(default=None, primary_key=True)
    run_id: int = Field(foreign_key="pipeline_run.id", index=True)
    stage: str
    kind: str
    path: str


class RunArtifactPublic(SQLModel):
    stage: str
    kind: str
    path: str
