from fastapi import APIRouter, HTTPException
from sqlmodel import or_, select

from app.analysis import interval_days
from app.db import SessionDep
from app.models.epoch import EpochCreate, EpochInterval, EpochPublic, EpochRecord, EpochUpdate

router = APIRouter(prefix="/epochs", tags=["epochs"])


def get_epoch_or_404(session: SessionDep, epoch_id: str) -> EpochRecord:
    epoch = session.exec(select(EpochRecord).where(EpochRecord.epoch_id == epoch_id)).first()
    if not epoch:
        raise HTTPException(status_code=404, detail="Epoch not found")
    return epoch


@router.post("", response_model=EpochPublic, status_code=201)
def create_epoch(epoch: EpochCreate, session: SessionDep):
    clash = session.exec(
        select(EpochRecord).where(
            or_(EpochRecord.epoch_id == epoch.epoch_id, EpochRecord.acquisition_date == epoch.acquisition_date)
        )
    ).first()
    if clash:
        raise HTTPException(status_code=409, detail="An epoch with this id or acquisition date already exists")

    db_epoch = EpochRecord.model_validate(epoch)
    session.add(db_epoch)
    session.commit()
    session.refresh(db_epoch)
    return db_epoch


@router.get("", response_model=list[EpochPublic])
def read_epochs(session: SessionDep):
    return session.exec(select(EpochRecord).order_by(EpochRecord.acquisition_date)).all()


# consecutive pairs in date order
@router.get("/intervals", response_model=list[EpochInterval])
def read_intervals(session: SessionDep):
    epochs = session.exec(select(EpochRecord).order_by(EpochRecord.acquisition_date)).all()
    return [
        EpochInterval(
            reference_epoch=a.epoch_id,
            compared_epoch=b.epoch_id,
            interval_days=interval_days(a.acquisition_date, b.acquisition_date),
        )
        for a, b in zip(epochs, epochs[1:])
    ]


@router.get("/{epoch_id}", response_model=EpochPublic)
def read_epoch(epoch_id: str, session: SessionDep):
    return get_epoch_or_404(session, epoch_id)


@router.patch("/{epoch_id}", response_model=EpochPublic)
def update_epoch(epoch_id: str, epoch_update: EpochUpdate, session: SessionDep):
    epoch = get_epoch_or_404(session, epoch_id)
    epoch.sqlmodel_update(epoch_update.model_dump(exclude_unset=True))
    session.add(epoch)
    session.commit()
    session.refresh(epoch)
    return epoch


@router.delete("/{epoch_id}", status_code=204)
def delete_epoch(epoch_id: str, session: SessionDep):
    epoch = get_epoch_or_404(session, epoch_id)
    session.delete(epoch)
    session.commit()
