"""Vegetation removal on steep slopes.

The primary path cuts the slope into horizontal grid cells, levels each cell's fitted
plane and runs a cloth simulation on the inverted, levelled points. The alternative
path thresholds the gradient of per-point ambient visibility.
"""
from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from app.cloud import Label, PointCloud
from app.errors import EmptyCloudError, InvalidPlane, NoConvergence, ParameterError, ParseError, TooSparse
from app.models.params import ClothParams
from app.registration import RigidTransform, ensure_normals
from app.terrain import Plane

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SubSlope:
    cell_id: tuple[int, int]
    # points owned by the cell; every input point is owned by exactly one sub-slope
    core_indices: np.ndarray
    # core plus the points within the overlap margin around the cell
    member_indices: np.ndarray
    plane: Plane
    level_rotation: RigidTransform


@dataclass(frozen=True, eq=False)
class LeveledSlope:
    cloud: PointCloud
    rotation: RigidTransform
    center: np.ndarray

    def restore(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) @ self.rotation.rotation + self.center


@dataclass(frozen=True, eq=False)
class GroundLabeling:
    labels: np.ndarray
    iterations: int = 0

    @property
    def stats(self) -> dict[str, int]:
        return {
            "ground": int(np.count_nonzero(self.labels == Label.GROUND)),
            "vegetation": int(np.count_nonzero(self.labels == Label.VEGETATION)),
        }

    @property
    def ground_mask(self) -> np.ndarray:
        return self.labels == Label.GROUND


def leveling_rotation(normal: np.ndarray) -> RigidTransform:
    """Smallest rotation turning ``normal`` onto +z."""
    normal = np.asarray(normal, dtype=np.float64)
    normal = normal / np.linalg.norm(normal)
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(normal, z)
    sin = np.linalg.norm(axis)
    cos = float(normal @ z)
    if sin < 1e-15:
        if cos > 0:
            return RigidTransform.identity()
        return RigidTransform.from_rotvec([np.pi, 0.0, 0.0])
    return RigidTransform.from_rotvec(axis / sin * np.arctan2(sin, cos))


def partition_subslopes(
    cloud: PointCloud,
    cell_size: float = 10.0,
    min_points: int = 30,
    overlap: float = 1.0,
) -> list[SubSlope]:
    """Horizontal grid cells with a least-squares plane each, ordered by cell id.

    Cells with fewer than ``min_points`` points hand their points to the nearest
    populated cell.
    """
    if cell_size <= 0:
        raise ParameterError("cell_size must be positive")
    if len(cloud) < max(min_points, 3):
        raise TooSparse(f"{len(cloud)} points, at least {max(min_points, 3)} needed")
    xy = cloud.points[:, :2]
    origin = xy.min(axis=0)
    keys = np.floor((xy - origin) / cell_size).astype(np.int64)
    cells, owner, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    owner = owner.reshape(-1)

    populated = counts >= min_points
    if not populated.any():
        populated[np.argmax(counts)] = True
    sparse = np.flatnonzero(~populated)
    if len(sparse):
        full = np.flatnonzero(populated)
        _, nearest = cKDTree(cells[full].astype(np.float64)).query(cells[sparse].astype(np.float64))
        remap = np.arange(len(cells))
        remap[sparse] = full[nearest]
        owner = remap[owner]
        logger.debug("merged %d sparse cells into populated neighbours", len(sparse))

    subslopes = []
    for cell in np.flatnonzero(populated):
        core = np.flatnonzero(owner == cell)
        low = origin + cells[cell] * cell_size - overlap
        high = origin + (cells[cell] + 1) * cell_size + overlap
        near = np.all((xy >= low) & (xy < high), axis=1)
        near[core] = True
        plane = Plane.fit(cloud.points[core])
        subslopes.append(SubSlope(
            cell_id=(int(cells[cell][0]), int(cells[cell][1])),
            core_indices=core,
            member_indices=np.flatnonzero(near),
            plane=plane,
            level_rotation=leveling_rotation(plane.normal),
        ))
    return subslopes


def level_subslope(sub: SubSlope, cloud: PointCloud) -> LeveledSlope:
    """Rotate the sub-slope's members about their centroid so the fitted plane is horizontal."""
    normal = sub.plane.normal
    if not np.all(np.isfinite(normal)) or abs(np.linalg.norm(normal) - 1.0) > 1e-6:
        raise InvalidPlane(f"sub-slope {sub.cell_id} has no valid plane")
    members = cloud.select(sub.member_indices)
    center = members.points.mean(axis=0)
    rotated = (members.points - center) @ sub.level_rotation.rotation.T + center
    return LeveledSlope(members.replace(points=rotated, normals=None), sub.level_rotation, center)


def _neighbour_mean(height: np.ndarray) -> np.ndarray:
    total = np.zeros_like(height)
    count = np.zeros_like(height)
    total[1:, :] += height[:-1, :]
    count[1:, :] += 1
    total[:-1, :] += height[1:, :]
    count[:-1, :] += 1
    total[:, 1:] += height[:, :-1]
    count[:, 1:] += 1
    total[:, :-1] += height[:, 1:]
    count[:, :-1] += 1
    return total / count


def csf_classify(cloud: PointCloud, params: ClothParams = ClothParams()) -> GroundLabeling:
    """Drop a cloth onto the upside-down cloud; points close to the settled cloth are ground.

    Every node starts 0.5 m above the highest inverted point, falls by
    gravity * time_step**2 per iteration, is pulled ``rigidness`` times halfway toward
    the mean of its four neighbours, and freezes on reaching the inverted surface (the
    highest inverted point around the node).
    """
    if len(cloud) == 0:
        raise EmptyCloudError("cannot classify an empty cloud")
    res = params.grid_resolution
    xy = cloud.points[:, :2]
    z = -cloud.points[:, 2]
    origin = xy.min(axis=0) - res
    shape = tuple(int(s) for s in np.ceil((xy.max(axis=0) + res - origin) / res).astype(int) + 1)
    node = np.rint((xy - origin) / res).astype(np.int64)

    surface = np.full(shape, -np.inf)
    np.maximum.at(surface, (node[:, 0], node[:, 1]), z)
    empty = ~np.isfinite(surface)
    if empty.any():
        _, (ii, jj) = ndimage.distance_transform_edt(empty, return_indices=True)
        surface = surface[ii, jj]

    height = np.full(shape, z.max() + 0.5)
    movable = np.ones(shape, dtype=bool)
    fall = params.gravity * params.time_step**2
    residual = np.inf
    for iteration in range(1, params.max_iterations + 1):
        previous = height.copy()
        height = np.where(movable, height - fall, height)
        for _ in range(params.rigidness):
            height = np.where(movable, height + 0.5 * (_neighbour_mean(height) - height), height)
        landed = movable & (height <= surface)
        height[landed] = surface[landed]
        movable &= ~landed
        residual = float(np.abs(height - previous).max())
        if residual < params.tolerance:
            break
    else:
        raise NoConvergence(residual, params.max_iterations)

    coords = ((xy - origin) / res).T
    cloth = ndimage.map_coordinates(height, coords, order=1, mode="nearest")
    ground = np.abs(cloth - z) <= params.class_threshold
    labels = np.where(ground, Label.GROUND, Label.VEGETATION).astype(np.int8)
    return GroundLabeling(labels=labels, iterations=iteration)


def filter_vegetation(
    cloud: PointCloud,
    cell_size: float = 10.0,
    cloth: ClothParams = ClothParams(),
    min_points: int = 30,
    overlap: float = 1.0,
    mask: dict[int, Label] | None = None,
    workers: int = 1,
) -> tuple[PointCloud, PointCloud, GroundLabeling]:
    """Partition, level and cloth-filter every sub-slope, then merge into one labeling.

    A point in several sub-slopes takes the label of the one whose plane lies closest;
    ties go to the lower cell id.
    """
    subslopes = partition_subslopes(cloud, cell_size, min_points, overlap)

    def classify(sub: SubSlope) -> np.ndarray:
        return csf_classify(level_subslope(sub, cloud).cloud, cloth).labels

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(classify, subslopes))
    else:
        results = [classify(sub) for sub in subslopes]

    labels = np.full(len(cloud), Label.UNKNOWN, dtype=np.int8)
    best = np.full(len(cloud), np.inf)
    for sub, sub_labels in sorted(zip(subslopes, results), key=lambda item: item[0].cell_id):
        members = sub.member_indices
        distance = np.abs(sub.plane.signed_distance(cloud.points[members]))
        closer = distance < best[members]
        labels[members[closer]] = sub_labels[closer]
        best[members[closer]] = distance[closer]

    if mask:
        labels = apply_mask(labels, mask)
    labeling = GroundLabeling(labels=labels)
    logger.info(
        "vegetation filter: %d ground, %d removed over %d sub-slopes",
        labeling.stats["ground"], labeling.stats["vegetation"], len(subslopes),
    )
    labelled = cloud.with_labels(labels)
    ground = labelled.select(np.flatnonzero(labeling.ground_mask))
    removed = labelled.select(np.flatnonzero(~labeling.ground_mask))
    return ground, removed, labeling


def parse_mask(text: str) -> dict[int, Label]:
    """``+i`` forces point i to ground, ``-i`` to vegetation; '#' lines are comments."""
    forced: dict[int, Label] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        match = re.fullmatch(r"([+-])\s*(\d+)", line)
        if match is None:
            raise ParseError(lineno, f"expected '+index' or '-index', got {line!r}")
        forced[int(match.group(2))] = Label.GROUND if match.group(1) == "+" else Label.VEGETATION
    return forced


def apply_mask(labels: np.ndarray, mask: dict[int, Label]) -> np.ndarray:
    labels = np.array(labels, dtype=np.int8)
    for index, label in mask.items():
        if not 0 <= index < len(labels):
            raise ParameterError(f"mask index {index} outside the cloud")
        labels[index] = label
    return labels


def labeling_accuracy(labels: np.ndarray, truth: np.ndarray) -> float:
    labels, truth = np.asarray(labels), np.asarray(truth)
    if len(labels) != len(truth):
        raise ParameterError("labels and truth differ in length")
    if len(labels) == 0:
        return 1.0
    return float(np.mean(labels == truth))


# ---------------------------------------------------------------------------
# visibility gradient

def hemisphere_directions(count: int, max_polar_deg: float = 75.0) -> np.ndarray:
    """Fibonacci-spiral unit vectors around +z with polar angle up to ``max_polar_deg``."""
    i = np.arange(count) + 0.5
    z = 1.0 - (1.0 - np.cos(np.radians(max_polar_deg))) * i / count
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    r = np.sqrt(1.0 - z * z)
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def _tangent_frames(normals: np.ndarray) -> np.ndarray:
    helper = np.where(np.abs(normals[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    t1 = np.cross(normals, helper)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(normals, t1)
    return np.stack([t1, t2, normals], axis=1)


def ambient_visibility(
    cloud: PointCloud,
    directions: int = 32,
    voxel: float = 0.25,
    max_range: float = 10.0,
    offset: float | None = None,
    chunk: int = 500,
) -> np.ndarray:
    """Share of hemisphere rays around each normal that leave the occupancy grid unblocked."""
    if len(cloud) == 0:
        return np.empty(0)
    cloud = ensure_normals(cloud)
    offset = 1.8 * voxel if offset is None else offset
    origin = cloud.points.min(axis=0) - voxel
    keys = np.floor((cloud.points - origin) / voxel).astype(np.int64)
    shape = keys.max(axis=0) + 2
    grid = np.zeros(tuple(shape), dtype=bool)
    grid[keys[:, 0], keys[:, 1], keys[:, 2]] = True

    local = hemisphere_directions(directions)
    steps = np.arange(0.0, max_range, voxel / 2)
    visibility = np.empty(len(cloud))
    for start in range(0, len(cloud), chunk):
        stop = min(start + chunk, len(cloud))
        frames = _tangent_frames(cloud.normals[start:stop])
        rays = np.einsum("dk,mkj->mdj", local, frames)
        starts = cloud.points[start:stop] + offset * cloud.normals[start:stop]
        samples = starts[:, None, None, :] + steps[None, None, :, None] * rays[:, :, None, :]
        cells = np.floor((samples - origin) / voxel).astype(np.int64)
        inside = np.all((cells >= 0) & (cells < shape), axis=-1)
        cells = np.where(inside[..., None], cells, 0)
        blocked = inside & grid[cells[..., 0], cells[..., 1], cells[..., 2]]
        visibility[start:stop] = 1.0 - blocked.any(axis=2).mean(axis=1)
    return visibility


def visibility_gradient(cloud: PointCloud, visibility: np.ndarray, k: int = 8) -> np.ndarray:
    """Largest visibility difference between each point and its k nearest neighbours."""
    if len(cloud) < 2:
        return np.zeros(len(cloud))
    _, idx = cKDTree(cloud.points).query(cloud.points, k=min(k + 1, len(cloud)))
    return np.abs(visibility[idx] - visibility[:, None]).max(axis=1)


def visibility_gradient_filter(
    cloud: PointCloud,
    directions: int = 32,
    threshold: float = 0.3,
    k: int = 8,
    voxel: float = 0.25,
) -> GroundLabeling:
    if directions < 8:
        raise ParameterError("at least 8 visibility directions are needed")
    gradient = visibility_gradient(cloud, ambient_visibility(cloud, directions, voxel), k)
    labels = np.where(gradient > threshold, Label.VEGETATION, Label.GROUND).astype(np.int8)
    return GroundLabeling(labels=labels)
