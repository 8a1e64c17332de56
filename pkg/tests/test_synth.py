import math

import numpy as np
import pytest

from app.cloud import Label, PointCloud
from app.config import BenchmarkConfig
from app.errors import ParameterError
from app.models.params import SlideSpec
from app.registration import RigidTransform
from app.synth import (
    TRUTH_CHANNEL,
    SceneFile,
    add_vegetation,
    apply_landslide,
    child_seeds,
    gen_terrain,
    make_station_poses,
    run_registration_benchmark,
    run_table2_benchmark,
    simulate_stations,
    slide_taper,
    with_truth,
)


def test_point_count_follows_density():
    cloud, _ = gen_terrain((10.0, 10.0), 0.0, 0.0, 154.0)

    assert len(cloud) == pytest.approx(15400, rel=0.05)


def test_smooth_terrain_lies_on_its_base_plane():
    cloud, truth = gen_terrain((20.0, 10.0), 35.0, 0.0, 4.0, seed=3)
    _, _, normal = truth.surface.axes

    np.testing.assert_allclose(cloud.absolute_points @ normal, 0.0, atol=1e-9)
    np.testing.assert_array_equal(truth.ground_labels, Label.GROUND)
    np.testing.assert_array_equal(truth.true_displacement, 0.0)


def test_rough_terrain_stays_within_its_amplitude():
    _, truth = gen_terrain((20.0, 20.0), 30.0, 0.4, 4.0, seed=3)

    heights = truth.surface.height(np.linspace(-10, 10, 50), np.linspace(-10, 10, 50))

    # the amplitudes of all octaves sum to less than twice the roughness
    assert np.abs(heights).max() <= 2 * 0.4


def test_terrain_is_deterministic():
    a, _ = gen_terrain((10.0, 10.0), 30.0, 0.3, 4.0, seed=5)
    b, _ = gen_terrain((10.0, 10.0), 30.0, 0.3, 4.0, seed=5)
    c, _ = gen_terrain((10.0, 10.0), 30.0, 0.3, 4.0, seed=6)

    np.testing.assert_array_equal(a.points, b.points)
    assert not np.array_equal(a.points, c.points)


@pytest.mark.parametrize("slope", [-1.0, 90.0])
def test_slope_must_be_below_vertical(slope):
    with pytest.raises(ParameterError):
        gen_terrain((10.0, 10.0), slope, 0.0, 4.0)


def test_no_vegetation_leaves_cloud_alone():
    cloud, truth = gen_terrain((10.0, 10.0), 20.0, 0.1, 4.0)

    veg_cloud, veg_truth = add_vegetation(cloud, truth, 0.0)

    assert veg_cloud is cloud
    assert veg_truth is truth


def test_vegetation_share_and_height():
    cloud, truth = gen_terrain((20.0, 20.0), 40.0, 0.2, 9.0, seed=2)

    cloud, truth = add_vegetation(cloud, truth, 0.15, (0.5, 2.0), seed=2)

    vegetation = truth.ground_labels == Label.VEGETATION
    assert vegetation.mean() == pytest.approx(0.15, abs=0.01)
    np.testing.assert_array_equal(cloud.labels, truth.ground_labels)
    heights = truth.surface.to_local(cloud.absolute_points[vegetation])[:, 2]
    assert heights.min() >= 0.5 - 1e-9
    assert heights.max() <= 2.0 + 1e-9


def test_vegetation_coverage_below_one():
    cloud, truth = gen_terrain((10.0, 10.0), 20.0, 0.1, 4.0)

    with pytest.raises(ParameterError):
        add_vegetation(cloud, truth, 1.0)


def test_landslide_moves_only_inside_its_ellipse():
    cloud, truth = gen_terrain((30.0, 30.0), 30.0, 0.0, 4.0, seed=1)
    spec = SlideSpec(center=(0.0, 0.0), radius_along=8.0, radius_across=5.0, depth=-0.5, taper_fraction=0.2)

    moved, moved_truth = apply_landslide(cloud, truth, spec)

    shift = np.linalg.norm(moved.absolute_points - cloud.absolute_points, axis=1)
    local = truth.surface.to_local(cloud.absolute_points)
    rho = np.hypot(local[:, 0] / 5.0, local[:, 1] / 8.0)
    assert shift.max() == pytest.approx(0.5)
    np.testing.assert_allclose(shift[rho >= 1.0], 0.0, atol=1e-12)
    np.testing.assert_allclose(shift[rho <= 0.8], 0.5, atol=1e-12)
    np.testing.assert_allclose(np.abs(moved_truth.true_displacement), shift, atol=1e-12)
    assert moved_truth.region_specs == (spec,)


def test_expected_volume_matches_integrated_taper():
    spec = SlideSpec(center=(0.0, 0.0), radius_along=6.0, radius_across=4.0, depth=0.4, taper_fraction=0.3)
    ticks = np.arange(-7.0, 7.0, 0.01) + 0.005
    u, v = np.meshgrid(ticks, ticks, indexing="ij")

    integral = slide_taper(spec, u.ravel(), v.ravel()).sum() * 0.01 * 0.01 * 0.4

    assert spec.expected_volume() == pytest.approx(integral, rel=1e-3)


def test_expected_volume_of_sharp_ellipse():
    spec = SlideSpec(center=(0.0, 0.0), radius_along=4.0, radius_across=2.0, depth=0.5, taper_fraction=0.0)

    assert spec.expected_volume() == pytest.approx(4 * math.pi)


def test_station_poses_line_up_along_strike():
    poses = make_station_poses(3, np.zeros(3), [0.0, 0.0, 1.0], distance=30.0, spread=10.0, yaw_step_deg=4.0)

    np.testing.assert_allclose([p.translation for p in poses], [[-10, 0, 30], [0, 0, 30], [10, 0, 30]])
    np.testing.assert_allclose(poses[1].rotation, np.eye(3))


def test_noise_free_station_sees_the_world():
    cloud, _ = gen_terrain((10.0, 10.0), 30.0, 0.2, 4.0)

    [scan] = simulate_stations(cloud, [RigidTransform.identity()], noise_sigma_m=0.0)

    np.testing.assert_allclose(scan.absolute_points, cloud.absolute_points, atol=1e-9)


def test_station_noise_level():
    cloud, _ = gen_terrain((20.0, 20.0), 30.0, 0.2, 9.0)
    pose = RigidTransform.from_rotvec([0.0, 0.0, 0.3], [5.0, -3.0, 20.0])

    [scan] = simulate_stations(cloud, [pose], noise_sigma_m=0.01, seed=4)

    residual = pose.apply(scan.absolute_points) - cloud.absolute_points
    assert residual.std() == pytest.approx(0.01, rel=0.1)


def test_station_range_limit():
    cloud = PointCloud(points=[[1.0, 0, 0], [5.0, 0, 0], [50.0, 0, 0]])

    [scan] = simulate_stations(cloud, [RigidTransform.identity()], noise_sigma_m=0.0, max_range_m=10.0)

    assert len(scan) == 2


def test_occluded_point_is_not_returned():
    cloud = PointCloud(points=[[20.0, 0, 0], [10.0, 0, 0], [10.0, 5.0, 0]])

    [scan] = simulate_stations(cloud, [RigidTransform.identity()], noise_sigma_m=0.0, occlusion=True)

    np.testing.assert_allclose(scan.absolute_points, [[10, 0, 0], [10, 5, 0]])


def test_child_seeds_are_stable():
    assert child_seeds(7, 3) == child_seeds(7, 3)
    assert len(set(child_seeds(7, 3))) == 3


def test_scene_file_rebuilds_truth():
    cloud, truth = gen_terrain((10.0, 10.0), 25.0, 0.3, 4.0, seed=9)
    spec = SlideSpec(center=(0.0, 0.0), radius_along=3.0, radius_across=3.0, depth=0.2)
    cloud, truth = apply_landslide(cloud, truth, spec)
    scene = SceneFile(slope_deg=25.0, roughness=0.3, seed=9, slides=[spec])

    rebuilt = scene.truth_for(with_truth(cloud, truth))

    np.testing.assert_array_equal(rebuilt.true_displacement, truth.true_displacement)
    np.testing.assert_array_equal(rebuilt.ground_labels, truth.ground_labels)
    assert rebuilt.surface.height(np.array([1.0]), np.array([2.0])) == pytest.approx(
        truth.surface.height(np.array([1.0]), np.array([2.0]))
    )
    assert TRUTH_CHANNEL in with_truth(cloud, truth).scalars


def test_benchmark_without_motion_always_succeeds():
    config = BenchmarkConfig(
        trials=2, extent=(20.0, 20.0), density=4.0, rotation_deg=(0.0, 0.0),
        translation_m=0.0, noise_sigma=0.0, sample_fraction=1.0,
    )

    report = run_table2_benchmark(config)

    assert [row.method for row in report.rows] == ["icp", "coarse+icp", "hybrid"]
    assert len(report.trials) == 6
    for row in report.rows:
        assert row.success_rate == 1.0
        assert row.mean_pose_rmse < 1e-6


def test_benchmark_is_repeatable():
    config = BenchmarkConfig(trials=2, extent=(15.0, 15.0), density=4.0, methods=["icp"])

    assert run_table2_benchmark(config) == run_table2_benchmark(config)


@pytest.mark.slow
def test_hybrid_beats_icp_on_large_rotation_with_change():
    config = BenchmarkConfig(trials=5, seed=3, rotation_deg=(50.0, 60.0), local_change_fraction=0.3)

    rows = {row.method: row for row in run_table2_benchmark(config).rows}

    assert rows["hybrid"].success_rate >= rows["icp"].success_rate


def test_benchmark_answers_to_both_names():
    assert run_table2_benchmark is run_registration_benchmark
