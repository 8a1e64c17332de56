"""Command-line surface: one command per processing step plus synthetic data, benchmark and pipeline runs."""
from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import typer
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from app.analysis import build_report, dump_report, error_budget, region_extent, render_text
from app.cloud import Label, read_cloud, save_cloud, voxel_downsample
from app.config import BenchmarkConfig, load_config, settings
from app.errors import PipelineStageError, SlidewatchError
from app.ground_filter import apply_mask, filter_vegetation, parse_mask, visibility_gradient_filter
from app.log import configure_logging
from app.models.params import ClothParams, HybridParams, MultiviewParams, SlideSpec
from app.models.report import CrudenType, RegionSet
from app.registration import (
    coarse_register,
    icp,
    register_global_hybrid,
    register_multiview,
)
from app.synth import (
    SceneFile,
    add_vegetation,
    apply_landslide,
    gen_terrain,
    make_station_poses,
    run_table2_benchmark,
    simulate_stations,
    with_truth,
)
from app.terrain import (
    TriangleMesh,
    build_dtm,
    field_from_ply,
    field_to_ply,
    mesh_distance,
    rate_field,
    region_from_record,
    region_to_record,
    significant_regions,
    summarize_regions,
)

app = typer.Typer(help="Landslide monitoring from multi-epoch terrestrial laser scans.", no_args_is_help=True)
synth_app = typer.Typer(help="Synthetic slopes, slides, vegetation and station scans.", no_args_is_help=True)
bench_app = typer.Typer(help="Registration benchmarks.", no_args_is_help=True)
app.add_typer(synth_app, name="synth")
app.add_typer(bench_app, name="bench")

console = Console()


@app.callback()
def main(log_level: str = typer.Option(settings.log_level, "--log-level", help="Logging level.")):
    configure_logging(log_level)


@contextmanager
def domain_errors() -> Iterator[None]:
    try:
        yield
    except PipelineStageError as exc:
        typer.echo(f"error: {exc}", err=True)
        raise typer.Exit(code=2)
    except (SlidewatchError, ValidationError, OSError) as exc:
        typer.echo(f"error: {exc}", err=True)
        raise typer.Exit(code=1)


def _scene_path(cloud_path: Path) -> Path:
    return cloud_path.with_name(cloud_path.name + ".scene.json")


def _read_scene(cloud_path: Path) -> SceneFile:
    path = _scene_path(cloud_path)
    if not path.exists():
        raise SlidewatchError(f"{path} not found; generate the cloud with 'synth terrain' first")
    return SceneFile.model_validate_json(path.read_text())


# ---------------------------------------------------------------------------
# registration

@app.command()
def register(
    src: Path = typer.Option(..., "--src", exists=True, dir_okay=False),
    dst: Path = typer.Option(..., "--dst", exists=True, dir_okay=False),
    method: str = typer.Option("hybrid", "--method", help="icp, coarse+icp or hybrid."),
    out: Path = typer.Option(Path("transform.txt"), "--out", help="16-number row-major transform."),
    result_path: Optional[Path] = typer.Option(None, "--result", help="RegistrationResult JSON; defaults next to --out."),
    max_pair_dist: float = typer.Option(1.0, "--max-pair-dist"),
):
    """Register the source cloud onto the target cloud."""
    if method not in ("icp", "coarse+icp", "hybrid"):
        raise typer.BadParameter("method must be icp, coarse+icp or hybrid", param_hint="--method")
    with domain_errors():
        source, target = read_cloud(src), read_cloud(dst)
        params = HybridParams(icp={"max_pair_dist": max_pair_dist})
        if method == "icp":
            result = icp(source, target, params.icp)
        elif method == "coarse+icp":
            initial = coarse_register(source, target, params.coarse)
            result = replace(icp(source, target, params.icp, initial=initial), method="coarse+icp")
        else:
            result = register_global_hybrid(source, target, params)
        out.write_text(result.transform.to_text() + "\n")
        result_path = result_path or out.with_suffix(".json")
        result_path.write_text(json.dumps(result.to_dict(), indent=2))
    typer.echo(f"{result.method}: rmse {result.rmse:.4f} m after {result.iterations} iterations -> {out}")


@app.command("register-multiview")
def register_multiview_command(
    cloud_list: Path = typer.Option(..., "--list", exists=True, dir_okay=False, help="One cloud path per line."),
    out_dir: Optional[Path] = typer.Option(None, "--out-dir"),
):
    """Bring every listed scan into the frame of the first one."""
    with domain_errors():
        paths = [Path(line.strip()) for line in cloud_list.read_text().splitlines() if line.strip()]
        paths = [p if p.is_absolute() else cloud_list.parent / p for p in paths]
        poses = register_multiview([read_cloud(p) for p in paths], MultiviewParams())
        for path, pose in zip(paths, poses):
            target = (out_dir or path.parent) / f"{path.stem}.transform.txt"
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(pose.to_text() + "\n")
            typer.echo(f"{path.name}: {target}")


# ---------------------------------------------------------------------------
# filtering, DTM and deformation

@app.command("filter")
def filter_command(
    in_path: Path = typer.Option(..., "--in", exists=True, dir_okay=False),
    out: Path = typer.Option(..., "--out"),
    removed_path: Optional[Path] = typer.Option(None, "--removed"),
    mask_path: Optional[Path] = typer.Option(None, "--mask", exists=True, dir_okay=False),
    method: str = typer.Option("csf", "--method", help="csf or visibility."),
    cell_size: float = typer.Option(10.0, "--cell-size"),
    class_threshold: float = typer.Option(0.5, "--class-threshold"),
):
    """Split a cloud into ground and vegetation."""
    with domain_errors():
        cloud = read_cloud(in_path)
        mask = parse_mask(mask_path.read_text()) if mask_path else None
        if method == "csf":
            ground, removed, labeling = filter_vegetation(
                cloud, cell_size, ClothParams(class_threshold=class_threshold), mask=mask, workers=settings.workers
            )
        elif method == "visibility":
            labeling = visibility_gradient_filter(cloud)
            labels = apply_mask(labeling.labels, mask) if mask else labeling.labels
            labelled = cloud.with_labels(labels)
            ground = labelled.select(np.flatnonzero(labels == Label.GROUND))
            removed = labelled.select(np.flatnonzero(labels != Label.GROUND))
        else:
            raise typer.BadParameter("method must be csf or visibility", param_hint="--method")
        save_cloud(out, ground)
        if removed_path:
            save_cloud(removed_path, removed)
    typer.echo(f"{len(ground)} ground points, {len(removed)} removed")


@app.command()
def dtm(
    in_path: Path = typer.Option(..., "--in", exists=True, dir_okay=False),
    out: Path = typer.Option(..., "--out"),
    max_edge: float = typer.Option(2.0, "--max-edge"),
    voxel: Optional[float] = typer.Option(None, "--voxel", help="Thin the ground cloud first."),
    plane_from: Optional[Path] = typer.Option(
        None, "--plane-from", exists=True, dir_okay=False, help="Reuse the projection plane of another DTM."
    ),
):
    """Triangulate a ground cloud into a TIN."""
    with domain_errors():
        ground = read_cloud(in_path)
        if voxel:
            ground = voxel_downsample(ground, voxel)
        plane = None
        if plane_from is not None:
            other, _ = TriangleMesh.from_ply(plane_from.read_bytes())
            plane = other.projection_plane.shifted(ground.origin_shift - other.origin_shift)
        mesh = build_dtm(ground, plane, max_edge)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_bytes(mesh.to_ply())
    typer.echo(f"{len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles -> {out}")


@app.command()
def deform(
    compared: Path = typer.Option(..., "--compared", exists=True, dir_okay=False),
    reference: Path = typer.Option(..., "--reference", exists=True, dir_okay=False),
    days: float = typer.Option(..., "--days"),
    out: Path = typer.Option(..., "--out"),
    max_dist: float = typer.Option(5.0, "--max-dist"),
    edge_tolerance: float = typer.Option(0.1, "--edge-tolerance"),
):
    """Signed distance from the compared DTM to the reference DTM."""
    with domain_errors():
        compared_mesh, _ = TriangleMesh.from_ply(compared.read_bytes())
        reference_mesh, _ = TriangleMesh.from_ply(reference.read_bytes())
        field = mesh_distance(compared_mesh, reference_mesh, max_dist, days, edge_tolerance)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_bytes(field_to_ply(compared_mesh, field))
    typer.echo(f"{int(field.valid.sum())}/{len(field)} valid vertices -> {out}")


@app.command()
def regions(
    field_path: Path = typer.Option(..., "--field", exists=True, dir_okay=False),
    out: Path = typer.Option(..., "--out"),
    threshold: float = typer.Option(2.0, "--threshold", help="mm/day."),
    min_area: float = typer.Option(25.0, "--min-area", help="m2."),
):
    """Connected areas deforming faster than the threshold."""
    with domain_errors():
        mesh, field = field_from_ply(field_path.read_bytes())
        found = significant_regions(mesh, rate_field(field), threshold, min_area)
        found = summarize_regions(found, field, mesh)
        region_set = RegionSet(
            threshold_mm_day=threshold, min_area_m2=min_area, regions=[region_to_record(r) for r in found]
        )
        out.write_text(region_set.model_dump_json(indent=2))
    typer.echo(f"{len(found)} significant regions -> {out}")


def _parse_annotations(values: list[str]) -> dict[int, CrudenType]:
    annotations = {}
    for value in values:
        region_id, sep, kind = value.partition("=")
        try:
            annotations[int(region_id)] = CrudenType(kind.strip().upper())
        except ValueError:
            raise typer.BadParameter(f"expected id=TYPE, got {value!r}", param_hint="--annotate")
        if not sep:
            raise typer.BadParameter(f"expected id=TYPE, got {value!r}", param_hint="--annotate")
    return annotations


@app.command()
def classify(
    regions_path: Path = typer.Option(..., "--regions", exists=True, dir_okay=False),
    field_path: Path = typer.Option(..., "--field", exists=True, dir_okay=False),
    out: Path = typer.Option(..., "--out"),
    motion_az: Optional[float] = typer.Option(None, "--motion-az", help="Motion azimuth in degrees from north."),
    annotate: list[str] = typer.Option([], "--annotate", help="Motion type per region, e.g. 1=RS."),
):
    """Shape angle and class of every region, written as a report."""
    annotations = _parse_annotations(annotate)
    with domain_errors():
        region_set = RegionSet.model_validate_json(regions_path.read_text())
        mesh, field = field_from_ply(field_path.read_bytes())
        found = [region_from_record(r) for r in region_set.regions]
        shapes = [region_extent(r, field, mesh, motion_az) for r in found]
        report = build_report(
            fields=[field],
            regions=found,
            shapes=shapes,
            annotations=annotations,
            provenance={"threshold_mm_day": region_set.threshold_mm_day, "min_area_m2": region_set.min_area_m2},
        )
        out.write_text(dump_report(report))
    typer.echo(render_text(report))


@app.command()
def budget(
    tls: float = typer.Option(6.0, "--tls", help="Scanner error, mm."),
    mreg: float = typer.Option(30.0, "--mreg", help="Multi-view registration error, mm."),
    treg: float = typer.Option(60.0, "--treg", help="Multi-epoch registration error, mm."),
    veg: float = typer.Option(10.0, "--veg", help="Vegetation filtering error, mm."),
    mesh: float = typer.Option(10.0, "--mesh", help="Meshing error, mm."),
):
    """Propagated monitoring error in mm."""
    with domain_errors():
        sigma = error_budget(tls, mreg, treg, veg, mesh)
    typer.echo(f"{sigma:.1f}")


# ---------------------------------------------------------------------------
# synthetic data

@synth_app.command("terrain")
def synth_terrain(
    out: Path = typer.Option(..., "--out"),
    extent: tuple[float, float] = typer.Option((50.0, 40.0), "--extent", help="Along strike and up-dip, m."),
    slope: float = typer.Option(35.0, "--slope", help="Degrees."),
    roughness: float = typer.Option(0.3, "--roughness"),
    density: float = typer.Option(20.0, "--density", help="Points per m2."),
    seed: int = typer.Option(0, "--seed"),
    epoch: str = typer.Option("", "--epoch"),
):
    """A rough inclined surface; a .scene.json sidecar records how to rebuild it."""
    with domain_errors():
        cloud, truth = gen_terrain(extent, slope, roughness, density, seed=seed, epoch_id=epoch)
        save_cloud(out, with_truth(cloud, truth))
        _scene_path(out).write_text(SceneFile(slope_deg=slope, roughness=roughness, seed=seed).model_dump_json(indent=2))
    typer.echo(f"{len(cloud)} points -> {out}")


@synth_app.command("veg")
def synth_vegetation(
    in_path: Path = typer.Option(..., "--in", exists=True, dir_okay=False),
    out: Path = typer.Option(..., "--out"),
    coverage: float = typer.Option(0.15, "--coverage"),
    height_min: float = typer.Option(0.5, "--height-min"),
    height_max: float = typer.Option(2.0, "--height-max"),
    seed: int = typer.Option(0, "--seed"),
):
    """Add vegetation blobs above the surface."""
    with domain_errors():
        scene = _read_scene(in_path)
        cloud = read_cloud(in_path)
        cloud, truth = add_vegetation(cloud, scene.truth_for(cloud), coverage, (height_min, height_max), seed=seed)
        save_cloud(out, with_truth(cloud, truth))
        _scene_path(out).write_text(scene.model_dump_json(indent=2))
    typer.echo(f"{len(cloud)} points -> {out}")


@synth_app.command("slide")
def synth_slide(
    in_path: Path = typer.Option(..., "--in", exists=True, dir_okay=False),
    out: Path = typer.Option(..., "--out"),
    center: tuple[float, float] = typer.Option((0.0, 0.0), "--center", help="Slope-local u v, m."),
    radius_along: float = typer.Option(10.0, "--radius-along"),
    radius_across: float = typer.Option(10.0, "--radius-across"),
    depth: float = typer.Option(0.5, "--depth", help="Signed, m; positive is deposition."),
    azimuth: float = typer.Option(0.0, "--azimuth", help="Degrees from down-dip."),
    taper: float = typer.Option(0.1, "--taper"),
    shear: float = typer.Option(0.0, "--shear"),
):
    """Displace an elliptical patch of the surface."""
    with domain_errors():
        scene = _read_scene(in_path)
        spec = SlideSpec(
            center=center, radius_along=radius_along, radius_across=radius_across, depth=depth,
            azimuth_deg=azimuth, taper_fraction=taper, shear=shear,
        )
        cloud = read_cloud(in_path)
        cloud, truth = apply_landslide(cloud, scene.truth_for(cloud), spec)
        save_cloud(out, with_truth(cloud, truth))
        scene = scene.model_copy(update={"slides": [*scene.slides, spec]})
        _scene_path(out).write_text(scene.model_dump_json(indent=2))
    typer.echo(f"slide volume {spec.expected_volume():.1f} m3 -> {out}")


@synth_app.command("scan")
def synth_scan(
    in_path: Path = typer.Option(..., "--in", exists=True, dir_okay=False),
    out_dir: Path = typer.Option(..., "--out-dir"),
    stations: int = typer.Option(2, "--stations"),
    distance: float = typer.Option(30.0, "--distance"),
    spread: float = typer.Option(10.0, "--spread"),
    yaw_step: float = typer.Option(4.0, "--yaw-step"),
    noise: float = typer.Option(0.006, "--noise", help="m."),
    max_range: Optional[float] = typer.Option(None, "--max-range"),
    occlusion: bool = typer.Option(False, "--occlusion/--no-occlusion"),
    seed: int = typer.Option(0, "--seed"),
):
    """Simulate station scans; each is written in its own frame next to a poses file."""
    with domain_errors():
        scene = _read_scene(in_path)
        cloud = read_cloud(in_path)
        _, _, normal = scene.surface().axes
        poses = make_station_poses(stations, np.zeros(3), normal, distance, spread, yaw_step)
        scans = simulate_stations(cloud, poses, noise, max_range, occlusion, seed=seed)
        out_dir.mkdir(parents=True, exist_ok=True)
        for i, scan in enumerate(scans):
            save_cloud(out_dir / f"station{i}.ply", scan)
        (out_dir / "poses.json").write_text(json.dumps([p.as_matrix().tolist() for p in poses], indent=2))
    typer.echo(f"{len(scans)} scans -> {out_dir}")


# ---------------------------------------------------------------------------
# benchmark and pipeline

@bench_app.command("table2")
@bench_app.command("registration")
def bench_registration(
    trials: int = typer.Option(10, "--trials"),
    seed: int = typer.Option(0, "--seed"),
    config_path: Optional[Path] = typer.Option(None, "--config", exists=True, dir_okay=False),
    rotation_min: Optional[float] = typer.Option(None, "--rotation-min"),
    rotation_max: Optional[float] = typer.Option(None, "--rotation-max"),
    local_change: Optional[float] = typer.Option(None, "--local-change"),
    out: Optional[Path] = typer.Option(None, "--out"),
):
    """Compare icp, coarse+icp and hybrid registration over seeded trials."""
    with domain_errors():
        config = BenchmarkConfig.model_validate_json(config_path.read_text()) if config_path else BenchmarkConfig()
        update = {"trials": trials, "seed": seed}
        if rotation_min is not None or rotation_max is not None:
            low, high = config.rotation_deg
            update["rotation_deg"] = (rotation_min if rotation_min is not None else low,
                                      rotation_max if rotation_max is not None else high)
        if local_change is not None:
            update["local_change_fraction"] = local_change
        config = BenchmarkConfig.model_validate({**config.model_dump(), **update})
        report = run_table2_benchmark(config)
        if out:
            out.write_text(report.model_dump_json(indent=2))

    table = Table(title=f"Registration over {config.trials} trials")
    for column in ("Method", "Success", "Rate", "Mean pose RMSE (m)"):
        table.add_column(column, justify="right")
    for row in report.rows:
        rmse = "-" if row.mean_pose_rmse is None else f"{row.mean_pose_rmse:.3f}"
        table.add_row(row.method, f"{row.successes}/{row.trials}", f"{100 * row.success_rate:.0f}%", rmse)
    console.print(table)


@app.command()
def pipeline(
    config_path: Path = typer.Option(..., "--config", exists=True, dir_okay=False),
    run_dir: Optional[Path] = typer.Option(None, "--run-dir", help="Overrides run_dir from the config."),
):
    """Run the full monitoring chain from a JSON configuration."""
    from app.pipeline import run_pipeline

    with domain_errors():
        result = run_pipeline(load_config(config_path), run_dir)
    typer.echo(render_text(result.report))
    typer.echo(f"artifacts in {result.run_dir}")


@app.command()
def serve(
    host: str = typer.Option("127.0.0.1", "--host"),
    port: int = typer.Option(8000, "--port"),
    reload: bool = typer.Option(False, "--reload"),
):
    """Start the HTTP service."""
    import uvicorn

    uvicorn.run("app.main:app", host=host, port=port, reload=reload)
