from fastapi import APIRouter, HTTPException, Query
from pydantic import BaseModel, Field

from app.analysis import classify_shape, relative_error, shape_angle
from app.errors import ParameterError
from app.models.report import CrudenType, ErrorBudget, ShapeClass

router = APIRouter(prefix="/analysis", tags=["analysis"])


class ShapeRequest(BaseModel):
    W_m: float = Field(gt=0)
    L_m: float = Field(gt=0)
    cruden_type: CrudenType | None = None


class ShapeResponse(BaseModel):
    theta_deg: float
    shape_class: ShapeClass
    type_label: str


class RelativeErrorResponse(BaseModel):
    sigma_mm: float
    displacement_m: float
    ratio: float
    percent: float


@router.post("/budget", response_model=ErrorBudget)
def compute_budget(budget: ErrorBudget):
    return budget


@router.post("/shape", response_model=ShapeResponse)
def compute_shape(request: ShapeRequest):
    try:
        theta = shape_angle(request.W_m, request.L_m)
        shape_class = classify_shape(theta)
    except ParameterError as exc:
        raise HTTPException(status_code=422, detail=str(exc))
    label = shape_class.value if request.cruden_type is None else f"{shape_class.value}-{request.cruden_type.value}"
    return ShapeResponse(theta_deg=theta, shape_class=shape_class, type_label=label)


@router.get("/relative-error", response_model=RelativeErrorResponse)
def compute_relative_error(sigma_mm: float = Query(ge=0), displacement_m: float = Query()):
    try:
        ratio = relative_error(sigma_mm, displacement_m)
    except ParameterError as exc:
        raise HTTPException(status_code=422, detail=str(exc))
    return RelativeErrorResponse(sigma_mm=sigma_mm, displacement_m=displacement_m, ratio=ratio, percent=100 * ratio)
