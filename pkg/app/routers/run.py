import logging
from datetime import datetime, timezone
from pathlib import Path

from fastapi import APIRouter, BackgroundTasks, HTTPException
from sqlmodel import select

from app.analysis import load_report
from app.config import PipelineConfig, settings
from app.db import SessionDep, SessionFactory, SessionFactoryDep
from app.errors import PipelineStageError
from app.models.report import Report
from app.models.run import PipelineRun, RunArtifact, RunArtifactPublic, RunPublic, RunStatus
from app.pipeline import run_pipeline

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/runs", tags=["runs"])


def get_run_or_404(session: SessionDep, run_id: int) -> PipelineRun:
    run = session.get(PipelineRun, run_id)
    if not run:
        raise HTTPException(status_code=404, detail="Run not found")
    return run


def execute_run(run_id: int, config: PipelineConfig, run_dir: Path, open_session: SessionFactory) -> None:
    """Run the pipeline and record its outcome on the run row."""
    artifacts: list[RunArtifact] = []
    failed_stage = error = None
    try:
        result = run_pipeline(config, run_dir)
    except PipelineStageError as exc:
        logger.warning("run %d failed in %s: %s", run_id, exc.stage, exc.cause)
        failed_stage, error = exc.stage, str(exc.cause)
    except Exception as exc:
        logger.exception("run %d crashed", run_id)
        error = str(exc)
    else:
        artifacts = [
            RunArtifact(run_id=run_id, stage=entry.stage, kind=entry.kind, path=entry.path)
            for entry in result.manifest.artifacts
        ]

    with open_session() as session:
        run = session.get(PipelineRun, run_id)
        if error is None:
            run.status = RunStatus.succeeded
            run.report_path = str(run_dir / "report.json")
            session.add_all(artifacts)
        else:
            run.status = RunStatus.failed
            run.failed_stage = failed_stage
            run.error = error
        run.finished_at = datetime.now(timezone.utc)
        session.add(run)
        session.commit()


@router.post("", response_model=RunPublic, status_code=202)
def create_run(
    config: PipelineConfig, session: SessionDep, open_session: SessionFactoryDep, background_tasks: BackgroundTasks
):
    run = PipelineRun(rng_seed=config.rng_seed)
    session.add(run)
    session.commit()
    session.refresh(run)

    run_dir = Path(settings.run_root) / f"run-{run.id}"
    run.run_dir = str(run_dir)
    session.add(run)
    session.commit()
    session.refresh(run)
    background_tasks.add_task(execute_run, run.id, config, run_dir, open_session)
    return run


@router.get("", response_model=list[RunPublic])
def read_runs(session: SessionDep):
    return session.exec(select(PipelineRun).order_by(PipelineRun.id)).all()


@router.get("/{run_id}", response_model=RunPublic)
def read_run(run_id: int, session: SessionDep):
    return get_run_or_404(session, run_id)


@router.get("/{run_id}/artifacts", response_model=list[RunArtifactPublic])
def read_run_artifacts(run_id: int, session: SessionDep):
    get_run_or_404(session, run_id)
    return session.exec(select(RunArtifact).where(RunArtifact.run_id == run_id).order_by(RunArtifact.id)).all()


@router.get("/{run_id}/report", response_model=Report)
def read_run_report(run_id: int, session: SessionDep):
    run = get_run_or_404(session, run_id)
    if not run.report_path or not Path(run.report_path).exists():
        raise HTTPException(status_code=404, detail="Report not found")
    return load_report(Path(run.report_path).read_text())
