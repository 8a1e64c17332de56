"""Synthetic slopes with ground truth, scanner simulation and the registration benchmark.

Slope-local coordinates: ``u`` runs along strike (world x), ``v`` up-dip and ``h`` along
the base-plane normal. Every generator is a pure function of its parameters and seed.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from pydantic import BaseModel

from app.cloud import Label, PointCloud
from app.config import BenchmarkConfig
from app.errors import InsufficientGeometry, ParameterError, SlidewatchError
from app.models.params import SlideSpec
from app.models.report import BenchmarkReport, BenchmarkRow, TrialRecord
from app.registration import (
    RegistrationResult,
    RigidTransform,
    coarse_register,
    evaluate_registration,
    icp,
    register_global_hybrid,
)

logger = logging.getLogger(__name__)

OCTAVES = 5
WAVES_PER_OCTAVE = 3
ANGULAR_BIN_DEG = 0.05


def child_seeds(seed: int, count: int) -> list[int]:
    """Independent integer seeds derived from one master seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


@dataclass(frozen=True, eq=False)
class TerrainSurface:
    """Inclined base plane plus a seeded sum of sinusoids halving in wavelength and amplitude."""

    slope_deg: float
    roughness: float = 0.0
    seed: int = 0
    base_wavelength: float = 20.0
    wave_vectors: np.ndarray = field(init=False, repr=False)
    amplitudes: np.ndarray = field(init=False, repr=False)
    phases: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not 0 <= self.slope_deg < 90:
            raise ParameterError("slope must lie in [0, 90) degrees")
        if self.roughness < 0:
            raise ParameterError("roughness must be non-negative")
        rng = np.random.default_rng(self.seed)
        octave = np.repeat(np.arange(OCTAVES), WAVES_PER_OCTAVE)
        angle = rng.uniform(0.0, np.pi, len(octave))
        wavelength = self.base_wavelength / 2.0**octave
        wave_vectors = (2 * np.pi / wavelength)[:, None] * np.column_stack([np.cos(angle), np.sin(angle)])
        amplitudes = self.roughness * 0.5**octave / WAVES_PER_OCTAVE
        object.__setattr__(self, "wave_vectors", wave_vectors)
        object.__setattr__(self, "amplitudes", amplitudes)
        object.__setattr__(self, "phases", rng.uniform(0.0, 2 * np.pi, len(octave)))

    @property
    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        s = math.radians(self.slope_deg)
        return (
            np.array([1.0, 0.0, 0.0]),
            np.array([0.0, math.cos(s), math.sin(s)]),
            np.array([0.0, -math.sin(s), math.cos(s)]),
        )

    def height(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        uv = np.column_stack([np.ravel(u), np.ravel(v)])
        return np.sin(uv @ self.wave_vectors.T + self.phases) @ self.amplitudes

    def to_world(self, u: np.ndarray, v: np.ndarray, h: np.ndarray | float = 0.0) -> np.ndarray:
        """World points at height ``h`` above the surface point (u, v)."""
        u, v = np.ravel(u), np.ravel(v)
        eu, ev, ew = self.axes
        offset = self.height(u, v) + np.broadcast_to(h, u.shape)
        return u[:, None] * eu + v[:, None] * ev + offset[:, None] * ew

    def to_local(self, points: np.ndarray) -> np.ndarray:
        """(u, v, h) of world points, h measured from the surface along the base normal."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        eu, ev, ew = self.axes
        u, v = points @ eu, points @ ev
        return np.column_stack([u, v, points @ ew - self.height(u, v)])


@dataclass(frozen=True, eq=False)
class SceneTruth:
    ground_labels: np.ndarray
    # signed displacement along the surface normal, metres, one per point
    true_displacement: np.ndarray
    surface: TerrainSurface
    station_poses: tuple[RigidTransform, ...] = ()
    region_specs: tuple[SlideSpec, ...] = ()


def gen_terrain(
    extent_m: tuple[float, float] = (50.0, 40.0),
    mean_slope_deg: float = 35.0,
    roughness: float = 0.3,
    density_pts_m2: float = 20.0,
    seed: int = 0,
    epoch_id: str = "",
) -> tuple[PointCloud, SceneTruth]:
    """Jittered-grid samples of a rough inclined surface centred on the origin."""
    if density_pts_m2 <= 0:
        raise ParameterError("density must be positive")
    if min(extent_m) <= 0:
        raise ParameterError("extent must be positive")
    surface = TerrainSurface(mean_slope_deg, roughness, seed=seed)
    rng = np.random.default_rng([seed, 1])
    per_metre = math.sqrt(density_pts_m2)
    nu = max(int(round(extent_m[0] * per_metre)), 2)
    nv = max(int(round(extent_m[1] * per_metre)), 2)
    du, dv = extent_m[0] / nu, extent_m[1] / nv
    iu, iv = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
    u = -extent_m[0] / 2 + (iu.ravel() + 0.5 + rng.uniform(-0.4, 0.4, iu.size)) * du
    v = -extent_m[1] / 2 + (iv.ravel() + 0.5 + rng.uniform(-0.4, 0.4, iv.size)) * dv
    points = surface.to_world(u, v)
    labels = np.full(len(points), Label.GROUND, dtype=np.int8)
    logger.debug("generated %d terrain points at %.1f pts/m2", len(points), density_pts_m2)
    cloud = PointCloud(points=points, labels=labels, epoch_id=epoch_id)
    return cloud, SceneTruth(ground_labels=labels, true_displacement=np.zeros(len(points)), surface=surface)


def add_vegetation(
    cloud: PointCloud,
    truth: SceneTruth,
    coverage_fraction: float,
    height_range_m: tuple[float, float] = (0.5, 2.0),
    seed: int = 0,
) -> tuple[PointCloud, SceneTruth]:
    """Append shrub-like point blobs so that ``coverage_fraction`` of all points are vegetation."""
    if not 0 <= coverage_fraction < 1:
        raise ParameterError("coverage must lie in [0, 1)")
    low, high = height_range_m
    if not 0 < low <= high:
        raise ParameterError("height range must be positive and ordered")
    if coverage_fraction == 0 or len(cloud) == 0:
        return cloud, truth

    rng = np.random.default_rng([seed, 2])
    count = int(round(coverage_fraction * len(cloud) / (1 - coverage_fraction)))
    local = truth.surface.to_local(cloud.absolute_points)
    lo, hi = local[:, :2].min(axis=0), local[:, :2].max(axis=0)
    blobs = max(count // 300, 1)
    centers = rng.uniform(lo, hi, size=(blobs, 2))
    radii = rng.uniform(1.0, 2.5, blobs)
    owner = rng.integers(0, blobs, count)
    r = radii[owner] * np.sqrt(rng.uniform(0.0, 1.0, count))
    theta = rng.uniform(0.0, 2 * np.pi, count)
    u = np.clip(centers[owner, 0] + r * np.cos(theta), lo[0], hi[0])
    v = np.clip(centers[owner, 1] + r * np.sin(theta), lo[1], hi[1])
    h = rng.uniform(low, high, count)
    points = truth.surface.to_world(u, v, h) - cloud.origin_shift

    vegetation = PointCloud(
        points=points,
        labels=np.full(count, Label.VEGETATION, dtype=np.int8),
        epoch_id=cloud.epoch_id,
        origin_shift=cloud.origin_shift,
    )
    merged = PointCloud.concatenate([cloud.replace(normals=None, scalars={}), vegetation])
    return merged, replace(
        truth,
        ground_labels=np.concatenate([truth.ground_labels, vegetation.labels]),
        true_displacement=np.concatenate([truth.true_displacement, np.zeros(count)]),
    )


def slide_taper(spec: SlideSpec, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """1 on the plateau, cosine fall-off over the outer ``taper_fraction`` of the ellipse, 0 outside."""
    along, across = _slide_axes(spec)
    d = np.column_stack([u - spec.center[0], v - spec.center[1]])
    rho = np.hypot(d @ along / spec.radius_along, d @ across / spec.radius_across)
    tau = spec.taper_fraction
    plateau = 1.0 - tau
    weight = np.where(rho <= plateau, 1.0, 0.0)
    if tau > 0:
        ring = (rho > plateau) & (rho < 1.0)
        weight[ring] = 0.5 * (1.0 + np.cos(np.pi * (rho[ring] - plateau) / tau))
    return weight


def _slide_axes(spec: SlideSpec) -> tuple[np.ndarray, np.ndarray]:
    # azimuth 0 points down-dip (-v); positive azimuth turns toward +u
    az = math.radians(spec.azimuth_deg)
    along = np.array([math.sin(az), -math.cos(az)])
    return along, np.array([-along[1], along[0]])


def apply_landslide(cloud: PointCloud, truth: SceneTruth, spec: SlideSpec) -> tuple[PointCloud, SceneTruth]:
    """Displace the points inside the slide ellipse by taper * depth.

    The direction blends the base normal with the in-plane motion azimuth by ``shear``.
    """
    local = truth.surface.to_local(cloud.absolute_points)
    weight = slide_taper(spec, local[:, 0], local[:, 1])
    eu, ev, ew = truth.surface.axes
    along, _ = _slide_axes(spec)
    direction = (1.0 - spec.shear) * ew + spec.shear * (along[0] * eu + along[1] * ev)
    direction /= np.linalg.norm(direction)
    signed = weight * spec.depth
    moved = cloud.points + signed[:, None] * direction
    logger.debug("slide at %s moved %d points", spec.center, int(np.count_nonzero(weight)))
    return cloud.replace(points=moved, normals=None), replace(
        truth,
        true_displacement=truth.true_displacement + signed,
        region_specs=truth.region_specs + (spec,),
    )


def make_station_poses(
    count: int,
    center: np.ndarray,
    normal: np.ndarray,
    distance: float = 30.0,
    spread: float = 10.0,
    yaw_step_deg: float = 4.0,
    strike: np.ndarray = (1.0, 0.0, 0.0),
) -> list[RigidTransform]:
    """Station-to-world poses in a row along strike, ``distance`` out from the slope, each yawed a little."""
    if count < 1:
        raise ParameterError("need at least one station")
    center = np.asarray(center, dtype=np.float64)
    normal = np.asarray(normal, dtype=np.float64) / np.linalg.norm(normal)
    strike = np.asarray(strike, dtype=np.float64)
    poses = []
    for i in range(count):
        step = i - (count - 1) / 2
        position = center + distance * normal + step * spread * strike
        poses.append(RigidTransform.from_rotvec([0.0, 0.0, math.radians(step * yaw_step_deg)], position))
    return poses


def _first_returns(local: np.ndarray, candidates: np.ndarray, bin_deg: float) -> np.ndarray:
    """Mask of candidate points that are nearest in their azimuth/elevation bin."""
    idx = np.flatnonzero(candidates)
    x, y, z = local[idx].T
    ranges = np.linalg.norm(local[idx], axis=1)
    az = np.floor(np.degrees(np.arctan2(y, x)) / bin_deg).astype(np.int64)
    el = np.floor(np.degrees(np.arctan2(z, np.hypot(x, y))) / bin_deg).astype(np.int64)
    key = az * 10_000_000 + el
    order = np.lexsort((idx, ranges, key))
    first = np.ones(len(order), dtype=bool)
    first[1:] = key[order][1:] != key[order][:-1]
    visible = np.zeros(len(local), dtype=bool)
    visible[idx[order[first]]] = True
    return visible


def simulate_stations(
    cloud: PointCloud,
    station_poses: Sequence[RigidTransform],
    noise_sigma_m: float = 0.006,
    max_range_m: float | None = None,
    occlusion: bool = False,
    seed: int = 0,
) -> list[PointCloud]:
    """What each station sees, in its own frame, with isotropic Gaussian range noise."""
    if not station_poses:
        raise ParameterError("need at least one station pose")
    if noise_sigma_m < 0:
        raise ParameterError("noise sigma must be non-negative")
    world = cloud.absolute_points
    scans = []
    for i, (pose, child) in enumerate(zip(station_poses, child_seeds(seed, len(station_poses)))):
        local = pose.inverse().apply(world)
        keep = np.ones(len(local), dtype=bool)
        if max_range_m is not None:
            keep &= np.linalg.norm(local, axis=1) <= max_range_m
        if occlusion:
            keep &= _first_returns(local, keep, ANGULAR_BIN_DEG)
        idx = np.flatnonzero(keep)
        points = local[idx]
        if noise_sigma_m > 0:
            points = points + np.random.default_rng(child).normal(0.0, noise_sigma_m, points.shape)
        scans.append(PointCloud(
            points=points,
            scalars={name: values[idx] for name, values in cloud.scalars.items()},
            labels=None if cloud.labels is None else cloud.labels[idx],
            epoch_id=cloud.epoch_id,
        ))
        logger.debug("station %d sees %d of %d points", i, len(idx), len(world))
    return scans


# ---------------------------------------------------------------------------
# registration benchmark

@dataclass(frozen=True, eq=False)
class BenchmarkTrial:
    source: PointCloud
    target: PointCloud
    truth: RigidTransform
    rotation_deg: float
    translation_m: float


def make_trial(config: BenchmarkConfig, seed: int) -> BenchmarkTrial:
    """One epoch pair: the source is a changed, resampled, noisy copy of the target seen from an offset pose."""
    rng = np.random.default_rng(seed)
    cloud, truth = gen_terrain(
        config.extent, config.slope_deg, config.roughness, config.density, seed=int(rng.integers(2**31))
    )
    changed = cloud
    if config.local_change_fraction > 0:
        radius = math.sqrt(config.local_change_fraction * config.extent[0] * config.extent[1] / math.pi)
        center = rng.uniform(-0.25, 0.25, 2) * np.asarray(config.extent)
        spec = SlideSpec(
            center=(float(center[0]), float(center[1])),
            radius_along=radius,
            radius_across=radius,
            depth=config.change_depth,
            taper_fraction=0.2,
        )
        changed, _ = apply_landslide(cloud, truth, spec)

    n = len(cloud)
    m = max(int(round(config.sample_fraction * n)), 3)
    target = cloud.select(np.sort(rng.choice(n, m, replace=False)))
    source_points = changed.select(np.sort(rng.choice(n, m, replace=False)))

    angle = float(rng.uniform(*config.rotation_deg)) * float(rng.choice([-1.0, 1.0]))
    heading = rng.uniform(0.0, 2 * np.pi)
    offset = config.translation_m * np.array([math.cos(heading), math.sin(heading), 0.0])
    pose = RigidTransform.from_rotvec([0.0, 0.0, math.radians(angle)], offset)
    source = simulate_stations(source_points, [pose], config.noise_sigma, seed=int(rng.integers(2**31)))[0]
    return BenchmarkTrial(source, target, pose, abs(angle), config.translation_m)


def _run_method(method: str, trial: BenchmarkTrial, config: BenchmarkConfig) -> RigidTransform:
    params = config.hybrid
    if method == "icp":
        return icp(trial.source, trial.target, params.icp).transform
    if method == "coarse+icp":
        try:
            initial = coarse_register(trial.source, trial.target, params.coarse, config.normal_neighbors)
        except InsufficientGeometry as exc:
            logger.debug("coarse stage failed, icp starts from identity: %s", exc)
            initial = None
        return icp(trial.source, trial.target, params.icp, initial=initial).transform
    if method == "hybrid":
        result: RegistrationResult = register_global_hybrid(trial.source, trial.target, params, config.normal_neighbors)
        return result.transform
    raise ParameterError(f"unknown method {method!r}")


def run_trial(config: BenchmarkConfig, index: int, seed: int) -> list[TrialRecord]:
    trial = make_trial(config, seed)
    center = trial.source.absolute_points.mean(axis=0)
    diameter = trial.target.diameter
    records = []
    for method in config.methods:
        try:
            transform = _run_method(method, trial, config)
        except SlidewatchError as exc:
            records.append(TrialRecord(
                trial=index, method=method, success=False,
                rotation_deg=trial.rotation_deg, translation_m=trial.translation_m, error=str(exc),
            ))
            continue
        evaluation = evaluate_registration(transform, trial.truth, diameter, config.success_threshold, center)
        records.append(TrialRecord(
            trial=index, method=method, success=evaluation.success, pose_rmse=evaluation.pose_rmse,
            rotation_deg=trial.rotation_deg, translation_m=trial.translation_m,
        ))
    return records


def run_registration_benchmark(config: BenchmarkConfig = BenchmarkConfig()) -> BenchmarkReport:
    """Success rate and mean pose RMSE of each registration method over seeded trials."""
    seeds = child_seeds(config.seed, config.trials)
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            per_trial = list(pool.map(run_trial, [config] * config.trials, range(config.trials), seeds))
    else:
        per_trial = [run_trial(config, i, s) for i, s in enumerate(seeds)]
    records = [r for trial in per_trial for r in trial]

    rows = []
    for method in config.methods:
        mine = [r for r in records if r.method == method]
        good = [r.pose_rmse for r in mine if r.success]
        rows.append(BenchmarkRow(
            method=method,
            trials=len(mine),
            successes=len(good),
            success_rate=len(good) / len(mine),
            mean_pose_rmse=float(np.mean(good)) if good else None,
        ))
        logger.info("%s: %d/%d trials within %.2f m", method, len(good), len(mine), config.success_threshold)
    return BenchmarkReport(rows=rows, trials=records, config=config.model_dump(mode="json"))


run_table2_benchmark = run_registration_benchmark


class SceneFile(BaseModel):
    """Sidecar describing how a synthetic cloud was generated, so later steps can rebuild its surface."""

    slope_deg: float
    roughness: float
    seed: int
    slides: list[SlideSpec] = []

    def surface(self) -> TerrainSurface:
        return TerrainSurface(self.slope_deg, self.roughness, seed=self.seed)

    def truth_for(self, cloud: PointCloud) -> SceneTruth:
        labels = cloud.labels if cloud.labels is not None else np.full(len(cloud), Label.UNKNOWN, dtype=np.int8)
        displacement = cloud.scalars.get(TRUTH_CHANNEL, np.zeros(len(cloud)))
        return SceneTruth(
            ground_labels=labels,
            true_displacement=np.array(displacement),
            surface=self.surface(),
            region_specs=tuple(self.slides),
        )


TRUTH_CHANNEL = "true_displacement_m"


def with_truth(cloud: PointCloud, truth: SceneTruth) -> PointCloud:
    """The cloud with generator labels and the true displacement as a scalar channel."""
    return cloud.with_labels(truth.ground_labels).with_scalars(**{TRUTH_CHANNEL: truth.true_displacement})
