from datetime import date, datetime, timezone

from sqlmodel import Field, SQLModel


class EpochBase(SQLModel):
    epoch_id: str = Field(index=True, unique=True, min_length=1)
    acquisition_date: date = Field(unique=True)
    station_count: int = Field(ge=1)
    description: str | None = None


class EpochRecord(EpochBase, table=True):
    __tablename__ = "epoch"

    id: int | None = Field(default=None, primary_key=True)
    created_at: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))


class EpochCreate(EpochBase):
    pass


class EpochPublic(EpochBase):
    id: int


class EpochUpdate(SQLModel):
    station_count: int | None = Field(default=None, ge=1)
    description: str | None = None


class EpochInterval(SQLModel):
    reference_epoch: str
    compared_epoch: str
    interval_days: int
