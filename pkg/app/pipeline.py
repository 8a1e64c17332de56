"""End-to-end monitoring run: per-epoch merging, cross-epoch alignment, ground filtering,
DTMs, deformation fields, significant regions, shape classes and the report."""
from __future__ import annotations

import json
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from app.analysis import ShapeMeasure, build_report, dump_report, interval_days, region_extent, render_text
from app.cloud import Label, PointCloud, read_cloud, save_cloud, voxel_downsample
from app.config import PipelineConfig, dump_config, settings
from app.errors import PipelineStageError, SlidewatchError
from app.ground_filter import apply_mask, filter_vegetation, parse_mask, visibility_gradient_filter
from app.models.report import EpochRow, ManifestEntry, Report, RunManifest
from app.registration import RigidTransform, register_global_hybrid, register_multiview, transform_cloud
from app.synth import add_vegetation, apply_landslide, child_seeds, gen_terrain, make_station_poses, simulate_stations
from app.terrain import (
    DeformationField,
    Plane,
    Region,
    TriangleMesh,
    build_dtm,
    field_to_ply,
    mesh_distance,
    rate_field,
    significant_regions,
    summarize_regions,
)

logger = logging.getLogger(__name__)


@contextmanager
def stage(name: str) -> Iterator[None]:
    logger.info("stage: %s", name)
    try:
        yield
    except PipelineStageError:
        raise
    except (SlidewatchError, OSError, ValueError) as exc:
        raise PipelineStageError(name, exc) from exc


class RunArtifacts:
    """Writes intermediates under the run directory and keeps the manifest."""

    def __init__(self, run_dir: Path):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.entries: list[ManifestEntry] = []

    def _record(self, stage_name: str, kind: str, relative: str) -> Path:
        self.entries.append(ManifestEntry(stage=stage_name, kind=kind, path=relative))
        path = self.run_dir / relative
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def cloud(self, stage_name: str, kind: str, relative: str, cloud: PointCloud) -> Path:
        return save_cloud(self._record(stage_name, kind, relative), cloud)

    def bytes(self, stage_name: str, kind: str, relative: str, data: bytes) -> Path:
        path = self._record(stage_name, kind, relative)
        path.write_bytes(data)
        return path

    def text(self, stage_name: str, kind: str, relative: str, text: str) -> Path:
        return self.bytes(stage_name, kind, relative, text.encode("utf-8"))

    def manifest(self) -> RunManifest:
        return RunManifest(run_dir=str(self.run_dir), artifacts=list(self.entries))


@dataclass(frozen=True, eq=False)
class PipelineResult:
    report: Report
    manifest: RunManifest
    run_dir: Path
    meshes: list[TriangleMesh]
    fields: list[DeformationField]
    regions: list[Region]


def _perturbation(rng: np.random.Generator, sigma_m: float, sigma_deg: float) -> RigidTransform:
    rotvec = rng.normal(0.0, math.radians(sigma_deg), 3) if sigma_deg > 0 else np.zeros(3)
    translation = rng.normal(0.0, sigma_m, 3) if sigma_m > 0 else np.zeros(3)
    return RigidTransform.from_rotvec(rotvec, translation)


def synthesize_scans(
    config: PipelineConfig, artifacts: RunArtifacts
) -> tuple[list[list[Path]], list[RigidTransform] | None]:
    """Station scans of every epoch of the synthetic scenario, plus station pose priors
    when the scenario asks for them.

    All epochs share one terrain, one set of stations and one set of priors; slides are
    present from their epoch on.
    """
    syn = config.synthetic
    ground, truth = gen_terrain(syn.extent, syn.slope_deg, syn.roughness, syn.density, seed=config.rng_seed)
    _, _, normal = truth.surface.axes
    poses = make_station_poses(
        syn.stations, np.zeros(3), normal, syn.station_distance, syn.station_spread, syn.station_yaw_deg
    )
    priors = None
    if syn.station_priors:
        rng = np.random.default_rng([config.rng_seed, 7])
        priors = [RigidTransform.identity()]
        for pose in poses[1:]:
            relative = poses[0].inverse().compose(pose)
            priors.append(_perturbation(rng, syn.prior_sigma_m, syn.prior_sigma_deg).compose(relative))

    scan_paths = []
    for k, (epoch, seed) in enumerate(zip(config.epochs, child_seeds(config.rng_seed, len(config.epochs)))):
        cloud, scene = ground.replace(epoch_id=epoch.epoch_id), truth
        for slide in syn.slides:
            if slide.epoch <= k:
                cloud, scene = apply_landslide(cloud, scene, slide)
        cloud, scene = add_vegetation(cloud, scene, syn.vegetation_coverage, syn.vegetation_height, seed=config.rng_seed)
        scans = simulate_stations(cloud, poses, syn.noise_sigma, syn.max_range, syn.occlusion, seed=seed)
        scan_paths.append([
            artifacts.cloud("synthesize", "scan", f"scans/{epoch.epoch_id}_station{i}.ply", scan)
            for i, scan in enumerate(scans)
        ])
        logger.info("epoch %s: %d stations, %d slides", epoch.epoch_id, len(scans), len(scene.region_specs))
    return scan_paths, priors


def merge_epoch(
    scans: list[PointCloud], config: PipelineConfig, priors: list[RigidTransform] | None
) -> tuple[PointCloud, list[RigidTransform]]:
    reg = config.registration
    poses = register_multiview(scans, reg.multiview, initial=priors, normal_neighbors=reg.normal_neighbors)
    merged = PointCloud.concatenate([transform_cloud(s, p).replace(normals=None) for s, p in zip(scans, poses)])
    if reg.merge_voxel:
        merged = voxel_downsample(merged, reg.merge_voxel)
    return merged, poses


def extract_ground(cloud: PointCloud, config: PipelineConfig) -> PointCloud:
    filtering = config.filtering
    if not filtering.enabled:
        return cloud
    mask_path = filtering.masks.get(cloud.epoch_id)
    mask = parse_mask(Path(mask_path).read_text()) if mask_path else None
    if filtering.method == "csf":
        ground, _, _ = filter_vegetation(
            cloud, filtering.cell_size, filtering.cloth, filtering.min_points, filtering.overlap, mask, settings.workers
        )
        return ground
    labeling = visibility_gradient_filter(cloud, filtering.visibility_directions, filtering.visibility_threshold)
    labels = apply_mask(labeling.labels, mask) if mask else labeling.labels
    return cloud.with_labels(labels).select(np.flatnonzero(labels == Label.GROUND))


def run_pipeline(config: PipelineConfig, run_dir: Path | str | None = None) -> PipelineResult:
    """Run every stage in order; a failing stage aborts with its name and cause."""
    with stage("config"):
        artifacts = RunArtifacts(Path(run_dir) if run_dir is not None else config.run_dir)
        artifacts.text("config", "config", "config.json", dump_config(config))
    epoch_ids = [e.epoch_id for e in config.epochs]

    priors = None
    if config.synthetic is not None:
        with stage("synthesize"):
            scan_paths, priors = synthesize_scans(config, artifacts)
    else:
        scan_paths = [list(e.scans) for e in config.epochs]

    merged = []
    with stage("multiview"):
        for epoch_id, paths in zip(epoch_ids, scan_paths):
            scans = [read_cloud(p, epoch_id) for p in paths]
            cloud, poses = merge_epoch(scans, config, priors)
            merged.append(cloud)
            artifacts.cloud("multiview", "merged_cloud", f"epochs/{epoch_id}_merged.ply", cloud)
            artifacts.text(
                "multiview", "station_poses", f"registration/{epoch_id}_stations.json",
                json.dumps([p.as_matrix().tolist() for p in poses], indent=2),
            )

    reference = merged[0]
    aligned = [reference]
    with stage("cross_epoch"):
        for epoch_id, cloud in zip(epoch_ids[1:], merged[1:]):
            result = register_global_hybrid(cloud, reference, config.registration.hybrid, config.registration.normal_neighbors)
            logger.info("epoch %s aligned to %s: rmse %.4f m", epoch_id, epoch_ids[0], result.rmse)
            moved = transform_cloud(cloud, result.transform).shifted_to(reference.origin_shift)
            aligned.append(moved)
            artifacts.text(
                "cross_epoch", "transform", f"registration/{epoch_id}_to_{epoch_ids[0]}.json",
                json.dumps(result.to_dict(), indent=2),
            )
            artifacts.cloud("cross_epoch", "aligned_cloud", f"epochs/{epoch_id}_aligned.ply", moved)

    grounds = []
    with stage("filter"):
        for epoch_id, cloud in zip(epoch_ids, aligned):
            ground = extract_ground(cloud, config)
            grounds.append(ground)
            artifacts.cloud("filter", "ground_cloud", f"epochs/{epoch_id}_ground.ply", ground)

    deformation = config.deformation
    meshes = []
    with stage("dtm"):
        plane = Plane.fit(grounds[0].points)
        for epoch_id, ground in zip(epoch_ids, grounds):
            if deformation.dtm_voxel:
                ground = voxel_downsample(ground, deformation.dtm_voxel)
            mesh = build_dtm(ground, plane, deformation.max_edge)
            meshes.append(mesh)
            artifacts.bytes("dtm", "dtm", f"dtm/{epoch_id}_dtm.ply", mesh.to_ply())

    fields: list[DeformationField] = []
    found: list[tuple[Region, DeformationField, TriangleMesh]] = []
    with stage("deformation"):
        for k in range(1, len(meshes)):
            days = interval_days(config.epochs[k - 1].acquisition_date, config.epochs[k].acquisition_date)
            field = mesh_distance(meshes[k], meshes[k - 1], deformation.max_dist, days, deformation.edge_tolerance)
            rates = rate_field(field)
            regions = significant_regions(meshes[k], rates, deformation.rate_threshold, deformation.min_area)
            for region in summarize_regions(regions, field, meshes[k]):
                found.append((region, field, meshes[k]))
            fields.append(field)
            artifacts.bytes(
                "deformation", "field", f"fields/{epoch_ids[k]}_vs_{epoch_ids[k - 1]}.ply",
                field_to_ply(meshes[k], field),
            )
        # ids run across all epoch pairs
        found = [
            (replace(region, region_id=i), field, mesh)
            for i, (region, field, mesh) in enumerate(found, start=1)
        ]
        logger.info("%d significant regions over %d epoch pairs", len(found), len(fields))

    shapes: list[ShapeMeasure] = []
    with stage("classify"):
        for region, field, mesh in found:
            shapes.append(region_extent(region, field, mesh, config.motion_azimuth_deg))

    with stage("report"):
        epochs = [
            EpochRow(epoch_id=e.epoch_id, acquisition_date=e.acquisition_date, station_count=len(paths))
            for e, paths in zip(config.epochs, scan_paths)
        ]
        report = build_report(
            epochs,
            fields,
            [r for r, _, _ in found],
            shapes,
            config.annotations,
            config.budget,
            config.model_dump(mode="json", exclude={"run_dir"}),
        )
        artifacts.text("report", "report", "report.json", dump_report(report))
        artifacts.text("report", "report_text", "report.txt", render_text(report))
        manifest = artifacts.manifest()
        (artifacts.run_dir / "manifest.json").write_text(manifest.model_dump_json(indent=2))

    return PipelineResult(
        report=report,
        manifest=manifest,
        run_dir=artifacts.run_dir,
        meshes=meshes,
        fields=fields,
        regions=[r for r, _, _ in found],
    )
