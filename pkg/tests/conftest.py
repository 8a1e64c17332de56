from contextlib import nullcontext

import numpy as np
import pytest
from fastapi.testclient import TestClient
from sqlalchemy.pool import StaticPool
from sqlmodel import Session, SQLModel, create_engine

from app.cloud import PointCloud
from app.config import settings
from app.db import get_session, get_session_factory
from app.main import app


@pytest.fixture
def session():
    engine = create_engine("sqlite://", connect_args={"check_same_thread": False}, poolclass=StaticPool)
    SQLModel.metadata.create_all(engine)
    with Session(engine) as session:
        yield session


@pytest.fixture
def client(session, tmp_path, monkeypatch):
    monkeypatch.setattr(settings, "run_root", tmp_path / "runs")
    app.dependency_overrides[get_session] = lambda: session
    app.dependency_overrides[get_session_factory] = lambda: lambda: nullcontext(session)
    yield TestClient(app)
    app.dependency_overrides.clear()


def grid_points(nx: int, ny: int, spacing: float = 1.0, z: float = 0.0) -> np.ndarray:
    x, y = np.meshgrid(np.arange(nx) * spacing, np.arange(ny) * spacing, indexing="ij")
    return np.column_stack([x.ravel(), y.ravel(), np.full(x.size, z)])


@pytest.fixture
def flat_grid() -> PointCloud:
    return PointCloud(points=grid_points(20, 20, 0.5))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
