"""Landslide shape classification, error budgeting, epoch arithmetic and the report document."""
from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass
from datetime import date
from typing import Any, Iterable

import numpy as np
from rich.console import Console
from rich.table import Table

from app.errors import NoValidValues, ParameterError, ReportError, UndefinedMotionVector
from app.models.report import (
    DEFAULT_MULTIPLICITIES,
    CrudenType,
    EpochRow,
    ErrorBudget,
    FieldRow,
    RegionRow,
    Report,
    ShapeClass,
)
from app.terrain import DeformationField, Region, TriangleMesh, field_stats

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ShapeMeasure:
    region_id: int
    W_m: float
    L_m: float
    theta_deg: float
    motion_vector: tuple[float, float]


def _azimuth_direction(mesh: TriangleMesh, azimuth_deg: float) -> np.ndarray:
    """Compass azimuth (clockwise from +y) laid onto the projection plane."""
    az = math.radians(azimuth_deg)
    horizontal = np.array([math.sin(az), math.cos(az), 0.0])
    return mesh.projection_plane.to_plane_coords(horizontal)


def motion_direction(
    region: Region,
    field: DeformationField,
    mesh: TriangleMesh,
    motion_azimuth_deg: float | None = None,
) -> np.ndarray:
    """Unit in-plane motion direction of a region.

    Taken from the erosion-weighted centroid to the deposition-weighted centroid when
    the region holds both; otherwise the plane's steepest descent.
    """
    plane = mesh.projection_plane
    if motion_azimuth_deg is not None:
        direction = _azimuth_direction(mesh, motion_azimuth_deg)
    else:
        members = np.asarray(region.vertex_set)
        values = np.where(field.valid[members], field.values[members], 0.0)
        positions = mesh.vertices[members]
        gain, loss = np.clip(values, 0, None), np.clip(-values, 0, None)
        direction = np.zeros(2)
        if gain.sum() > 0 and loss.sum() > 0:
            shift = gain @ positions / gain.sum() - loss @ positions / loss.sum()
            direction = plane.to_plane_coords(shift)
        if np.linalg.norm(direction) < 1e-9:
            down = plane.downslope()
            direction = np.zeros(2) if down is None else plane.to_plane_coords(down)
    length = np.linalg.norm(direction)
    if length < 1e-9:
        raise UndefinedMotionVector(f"region {region.region_id}: no displacement gradient and no slope")
    return direction / length


def region_extent(
    region: Region,
    field: DeformationField,
    mesh: TriangleMesh,
    motion_azimuth_deg: float | None = None,
) -> ShapeMeasure:
    """L along the motion direction and W across it, both as extents of the region's vertices."""
    if len(region.vertex_set) == 0:
        raise ParameterError(f"region {region.region_id} is empty")
    motion = motion_direction(region, field, mesh, motion_azimuth_deg)
    across = np.array([-motion[1], motion[0]])
    coords = mesh.projection_plane.project(mesh.vertices[np.asarray(region.vertex_set)])
    length = float(np.ptp(coords @ motion))
    width = float(np.ptp(coords @ across))
    if length <= 0 or width <= 0:
        raise ParameterError(f"region {region.region_id} has no areal extent")
    return ShapeMeasure(
        region_id=region.region_id,
        W_m=width,
        L_m=length,
        theta_deg=shape_angle(width, length),
        motion_vector=(float(motion[0]), float(motion[1])),
    )


def shape_angle(W_m: float, L_m: float) -> float:
    if W_m <= 0 or L_m <= 0:
        raise ParameterError("width and length must be positive")
    return math.degrees(math.atan2(L_m, W_m))


def classify_shape(theta_deg: float) -> ShapeClass:
    if not 0 < theta_deg < 90:
        raise ParameterError(f"shape angle {theta_deg} outside (0, 90)")
    if theta_deg >= 67.5:
        return ShapeClass.VL
    if theta_deg >= 45.0:
        return ShapeClass.L
    if theta_deg >= 22.5:
        return ShapeClass.W
    return ShapeClass.VW


def error_budget(
    m_tls: float,
    m_mreg: float,
    m_treg: float,
    m_veg: float,
    m_mesh: float,
    multiplicities: tuple[int, int, int, int, int] = DEFAULT_MULTIPLICITIES,
) -> float:
    """Propagated sigma in mm of the scanner, multi-view, multi-epoch, vegetation and mesh errors."""
    components = (m_tls, m_mreg, m_treg, m_veg, m_mesh)
    if any(m < 0 for m in components):
        raise ParameterError("error components must be non-negative")
    budget = ErrorBudget(
        m_tls=m_tls, m_mreg=m_mreg, m_treg=m_treg, m_veg=m_veg, m_mesh=m_mesh, multiplicities=multiplicities
    )
    return budget.sigma_mm


def relative_error(sigma_mm: float, displacement_m: float) -> float:
    if displacement_m <= 0:
        raise ParameterError("displacement must be positive")
    return sigma_mm / 1000.0 / displacement_m


def interval_days(date_a: date, date_b: date) -> int:
    days = (date_b - date_a).days
    if days <= 0:
        raise ParameterError(f"{date_b} is not after {date_a}")
    return days


def epoch_intervals(dates: Iterable[date]) -> list[int]:
    dates = list(dates)
    return [interval_days(a, b) for a, b in zip(dates, dates[1:])]


def _field_row(field: DeformationField) -> FieldRow:
    try:
        masked = field_stats(field)
        unmasked = field_stats(field, masked=False)
    except NoValidValues as exc:
        raise ReportError(f"{field.compared_epoch}/{field.reference_epoch}: {exc}") from exc
    return FieldRow(
        compared_epoch=field.compared_epoch,
        reference_epoch=field.reference_epoch,
        interval_days=int(round(field.interval_days)),
        mean_m=masked.mean,
        std_m=masked.std,
        valid_count=masked.valid_count,
        mean_m_unmasked=unmasked.mean,
        std_m_unmasked=unmasked.std,
        vertex_count=len(field),
    )


def build_report(
    epochs: Iterable[Any] = (),
    fields: Iterable[DeformationField] = (),
    regions: Iterable[Region] = (),
    shapes: Iterable[ShapeMeasure] = (),
    annotations: dict[int, CrudenType] | None = None,
    budget: ErrorBudget | None = None,
    provenance: dict[str, Any] | None = None,
) -> Report:
    """Assemble the epoch-pair table, the region table, the error budget and provenance.

    ``regions`` and ``shapes`` must match one to one by region id.
    """
    regions, shapes = list(regions), list(shapes)
    annotations = annotations or {}
    region_ids = [r.region_id for r in regions]
    if region_ids != [s.region_id for s in shapes]:
        raise ReportError("region and shape lists are not aligned by id")
    unknown = sorted(set(annotations) - set(region_ids))
    if unknown:
        raise ReportError(f"annotations name unknown regions {unknown}")

    region_rows = []
    for region, shape in zip(regions, shapes):
        region_rows.append(RegionRow(
            region_id=region.region_id,
            compared_epoch=region.compared_epoch,
            reference_epoch=region.reference_epoch,
            area_m2=region.area_m2,
            mean_rate_mm_day=region.mean_rate_mm_day,
            mean_displacement_m=region.mean_displacement_m,
            volume_m3=region.volume_m3,
            W_m=shape.W_m,
            L_m=shape.L_m,
            theta_deg=shape.theta_deg,
            motion_vector=shape.motion_vector,
            shape_class=classify_shape(shape.theta_deg),
            cruden_type=annotations.get(region.region_id),
        ))
    return Report(
        epochs=[EpochRow.model_validate(e, from_attributes=True) for e in epochs],
        epoch_pairs=[_field_row(f) for f in fields],
        regions=region_rows,
        budget=budget,
        provenance=provenance or {},
    )


def dump_report(report: Report) -> str:
    return report.model_dump_json(indent=2) + "\n"


def load_report(text: str) -> Report:
    return Report.model_validate_json(text)


def render_text(report: Report, width: int = 120) -> str:
    """Aligned-column rendering: displacements in cm, extents in m, volumes in m3."""
    console = Console(record=True, width=width, color_system=None, file=io.StringIO())

    epochs = Table(title="Epochs")
    for column in ("Epoch", "Date", "Stations"):
        epochs.add_column(column)
    for row in report.epochs:
        epochs.add_row(row.epoch_id, row.acquisition_date.isoformat(), str(row.station_count))

    pairs = Table(title="Deformation between epochs")
    for column in ("Pair", "Interval (d)", "Mean (cm)", "Std (cm)", "Valid", "Mean all (cm)", "Std all (cm)"):
        pairs.add_column(column, justify="right")
    for row in report.epoch_pairs:
        pairs.add_row(
            f"{row.reference_epoch},{row.compared_epoch}",
            str(row.interval_days),
            f"{row.mean_m * 100:.1f}",
            f"{row.std_m * 100:.1f}",
            f"{row.valid_count}/{row.vertex_count}",
            f"{row.mean_m_unmasked * 100:.1f}",
            f"{row.std_m_unmasked * 100:.1f}",
        )

    regions = Table(title="Significant regions")
    for column in ("Id", "Type", "W (m)", "L (m)", "Theta (deg)", "Volume (m3)", "Area (m2)", "Rate (mm/d)"):
        regions.add_column(column, justify="right")
    for row in report.regions:
        regions.add_row(
            str(row.region_id),
            row.type_label,
            f"{row.W_m:.1f}",
            f"{row.L_m:.1f}",
            f"{row.theta_deg:.1f}",
            f"{row.volume_m3:.1f}",
            f"{row.area_m2:.1f}",
            f"{row.mean_rate_mm_day:.1f}",
        )

    for table in (epochs, pairs, regions):
        console.print(table)
    if report.budget is not None:
        console.print(f"Error budget sigma: {report.budget.sigma_mm:.1f} mm")
    return console.export_text()
