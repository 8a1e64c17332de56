from contextlib import asynccontextmanager

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from app import __version__
from app.config import settings
from app.db import create_db_and_tables
from app.log import configure_logging
from app.routers.analysis import router as analysis_router
from app.routers.epoch import router as epoch_router
from app.routers.run import router as run_router


@asynccontextmanager
async def lifespan(app: FastAPI):
    configure_logging(settings.log_level)
    create_db_and_tables()
    yield


app = FastAPI(title="slidewatch", version=__version__, lifespan=lifespan)

app.include_router(epoch_router)
app.include_router(analysis_router)
app.include_router(run_router)

app.add_middleware(
    CORSMiddleware,
    allow_origins=settings.cors_origins,
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


@app.get("/")
def read_root():
    return {"service": "slidewatch", "version": __version__}
