import math

import numpy as np
import pytest

from app.cloud import PointCloud
from app.errors import DegenerateCorrespondences, DisconnectedViews, InsufficientGeometry, NoOverlap, ParameterError
from app.models.params import IcpParams, MultiviewParams
from app.registration import (
    RigidTransform,
    alpha_schedule,
    coarse_register,
    ensure_normals,
    evaluate_registration,
    extract_descriptors,
    fit_rigid,
    hamming_matrix,
    icp,
    pose_rmse,
    register_global_hybrid,
    register_multiview,
    select_keypoints,
    transform_cloud,
)
from app.synth import gen_terrain, make_station_poses, simulate_stations
from conftest import grid_points


def about(center: np.ndarray, rotvec, translation) -> RigidTransform:
    """Rotation about ``center`` followed by a translation."""
    rotate = RigidTransform.from_rotvec(rotvec)
    return RigidTransform(rotate.rotation, center - rotate.rotation @ center + np.asarray(translation, dtype=float))


def test_compose_applies_right_operand_first():
    a = RigidTransform.from_rotvec([0, 0, math.pi / 2])
    b = RigidTransform(np.eye(3), [1.0, 0, 0])

    np.testing.assert_allclose(a.compose(b).apply([[0.0, 0, 0]]), [[0, 1, 0]], atol=1e-12)


def test_inverse_undoes_transform():
    t = RigidTransform.from_rotvec([0.1, -0.2, 0.3], [4, 5, 6])
    points = np.arange(12.0).reshape(4, 3)

    np.testing.assert_allclose(t.inverse().apply(t.apply(points)), points, atol=1e-12)


def test_transform_text_is_sixteen_numbers():
    t = RigidTransform.from_rotvec([0, 0, 0.5], [1, 2, 3])

    text = t.to_text()

    assert len(text.split()) == 16
    np.testing.assert_allclose(RigidTransform.from_text(text).as_matrix(), t.as_matrix())


def test_transform_rejects_reflection():
    with pytest.raises(ParameterError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_transform_cloud_respects_origin_shift():
    cloud = PointCloud(points=[[1.0, 0, 0]], origin_shift=[1000, 0, 0])
    t = RigidTransform.from_rotvec([0, 0, math.pi], [0, 0, 0])

    moved = transform_cloud(cloud, t)

    np.testing.assert_allclose(moved.absolute_points, [[-1001, 0, 0]], atol=1e-9)


def test_fit_rigid_identical_sets():
    points = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])

    t = fit_rigid(points, points)

    np.testing.assert_allclose(t.as_matrix(), np.eye(4), atol=1e-12)


def test_fit_rigid_recovers_rotation_and_translation():
    source = np.array([[0.0, 0, 0], [1, 0, 0], [0, 2, 0], [0, 0, 3]])
    truth = RigidTransform.from_rotvec([0, 0, math.radians(30)], [1, 2, 3])

    t = fit_rigid(source, truth.apply(source))

    assert np.max(np.abs(t.apply(source) - truth.apply(source))) < 1e-9


def test_fit_rigid_needs_three_pairs():
    with pytest.raises(DegenerateCorrespondences):
        fit_rigid(np.zeros((2, 3)), np.zeros((2, 3)))


def test_fit_rigid_rejects_collinear_pairs():
    line = np.column_stack([np.arange(5.0), np.zeros(5), np.zeros(5)])

    with pytest.raises(DegenerateCorrespondences):
        fit_rigid(line, line)


def terrain(seed: int = 3) -> PointCloud:
    cloud, _ = gen_terrain((30.0, 30.0), 30.0, 1.0, 4.0, seed=seed)
    return cloud


def corner_error(estimate: RigidTransform, truth: RigidTransform, cloud: PointCloud) -> float:
    """Largest offset of a bounding-box corner of ``cloud`` between the two poses."""
    lo, hi = cloud.absolute_points.min(axis=0), cloud.absolute_points.max(axis=0)
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    return float(np.max(np.linalg.norm(estimate.apply(corners) - truth.apply(corners), axis=1)))


def test_icp_on_identical_clouds():
    cloud = terrain()

    result = icp(cloud, cloud)

    np.testing.assert_allclose(result.transform.as_matrix(), np.eye(4), atol=1e-12)
    assert result.rmse == pytest.approx(0.0, abs=1e-12)
    assert result.converged
    assert result.iterations == 1


def test_icp_recovers_small_motion():
    source = terrain()
    diameter = source.diameter
    truth = about(source.points.mean(axis=0), [0, 0, math.radians(5)], [0.1 * diameter / math.sqrt(2)] * 2 + [0.0])
    target = transform_cloud(source, truth)

    result = icp(source, target, IcpParams(max_iter=300, convergence_eps=1e-10, max_pair_dist=diameter))

    assert corner_error(result.transform, truth, source) < 1e-4 * diameter
    assert all(b <= a for a, b in zip(result.rmse_history, result.rmse_history[1:]))
    assert result.rmse_history[-1] <= result.rmse_history[0]


@pytest.mark.parametrize("seed", range(20))
def test_icp_converges_inside_its_basin(seed):
    rng = np.random.default_rng(seed)
    source = terrain(seed)
    diameter = source.diameter
    axis = rng.normal(size=3)
    direction = rng.normal(size=3)
    rotvec = axis / np.linalg.norm(axis) * math.radians(rng.uniform(0.0, 10.0))
    offset = direction / np.linalg.norm(direction) * rng.uniform(0.0, 0.2) * diameter
    truth = about(source.points.mean(axis=0), rotvec, offset)
    target = transform_cloud(source, truth)

    result = icp(source, target, IcpParams(max_iter=300, convergence_eps=1e-10, max_pair_dist=diameter))

    assert corner_error(result.transform, truth, source) < 1e-3 * diameter


def test_icp_point_to_point_only_still_descends():
    source = terrain()
    diameter = source.diameter
    target = transform_cloud(source, about(source.points.mean(axis=0), [0, 0, math.radians(2)], [0.5, 0.0, 0.0]))

    result = icp(source, target, IcpParams(max_pair_dist=diameter, point_to_plane=False))

    assert result.rmse_history[-1] < result.rmse_history[0]
    assert all(b <= a for a, b in zip(result.rmse_history, result.rmse_history[1:]))


def test_icp_disjoint_clouds():
    cloud = terrain()
    far = transform_cloud(cloud, RigidTransform(np.eye(3), [10 * cloud.diameter, 0, 0]))

    with pytest.raises(NoOverlap):
        icp(cloud, far, IcpParams(max_pair_dist=0.1 * cloud.diameter))


def patch_cloud(patches: list[np.ndarray], keys: list[list[float]]) -> tuple[PointCloud, list[int]]:
    points = np.concatenate(patches)
    centers = [int(np.argmin(np.linalg.norm(points - key, axis=1))) for key in keys]
    normals = np.tile([0.0, 0.0, 1.0], (len(points), 1))
    return PointCloud(points=points, normals=normals), centers


def test_identical_planar_neighbourhoods_share_descriptor():
    plane = grid_points(17, 17, 0.25) - [2.0, 2.0, 0.0]
    cloud, keypoints = patch_cloud([plane, plane + [50.0, 0, 0]], [[0, 0, 0], [50, 0, 0]])

    features = extract_descriptors(cloud, np.array(keypoints), radius=1.5)

    assert len(features) == 2
    assert hamming_matrix(features.descriptors[:1], features.descriptors[1:])[0, 0] == 0


def test_corner_descriptor_differs_from_plane():
    plane = grid_points(17, 17, 0.25) - [2.0, 2.0, 0.0]
    floor = plane[plane[:, 0] <= 0]
    wall = np.column_stack([np.zeros(8 * 17), np.repeat(np.arange(-2.0, 2.1, 0.25), 8), np.tile(np.arange(1, 9) * 0.25, 17)])
    cloud, keypoints = patch_cloud(
        [plane, plane + [50.0, 0, 0], np.concatenate([floor, wall]) + [100.0, 0, 0]], [[0, 0, 0], [50, 0, 0], [100, 0, 0]]
    )

    features = extract_descriptors(cloud, np.array(keypoints), radius=1.5)
    distances = hamming_matrix(features.descriptors, features.descriptors)

    assert distances[0, 2] > distances[0, 1]


def test_sparse_keypoints_are_dropped():
    cloud = PointCloud(points=grid_points(3, 3, 5.0), normals=np.tile([0.0, 0, 1], (9, 1)))

    features = extract_descriptors(cloud, np.array([4]), radius=1.0)

    assert len(features) == 0
    assert features.dropped.tolist() == [4]


def test_descriptors_survive_rigid_motion():
    cloud = ensure_normals(terrain())
    keypoints = select_keypoints(cloud)
    moved = transform_cloud(cloud, RigidTransform.from_rotvec([0.3, -0.2, 0.9], [5.0, -3.0, 2.0]))

    before = extract_descriptors(cloud, keypoints, radius=2.0)
    after = extract_descriptors(moved, keypoints, radius=2.0)

    np.testing.assert_array_equal(before.keypoint_indices, after.keypoint_indices)
    distances = np.diag(hamming_matrix(before.descriptors, after.descriptors))
    assert len(distances) >= 20
    assert np.mean(distances == 0) >= 0.98


def test_coarse_register_identical_clouds():
    cloud = terrain()

    t = coarse_register(cloud, cloud)

    assert pose_rmse(t, RigidTransform.identity(), cloud.points) < 1e-3 * cloud.diameter


def test_coarse_register_featureless_plane():
    plane = PointCloud(points=grid_points(30, 30, 0.5))

    with pytest.raises(InsufficientGeometry):
        coarse_register(plane, plane)


def test_coarse_register_seeds_icp_past_large_motion():
    source = terrain()
    diameter = source.diameter
    truth = about(source.points.mean(axis=0), [0, 0, math.radians(45)], [diameter, 0.0, 0.0])
    target = transform_cloud(source, truth)
    params = IcpParams(max_pair_dist=0.05 * diameter, convergence_eps=1e-10)

    with pytest.raises(NoOverlap):
        icp(source, target, params)
    result = icp(source, target, params, initial=coarse_register(source, target))

    assert corner_error(result.transform, truth, source) < 1e-3 * diameter


def test_multiview_single_cloud():
    assert register_multiview([terrain()])[0].as_matrix().tolist() == np.eye(4).tolist()


def test_multiview_without_overlap():
    a = PointCloud(points=grid_points(20, 20, 0.5))
    b = PointCloud(points=grid_points(20, 20, 0.5) + [500.0, 0, 0])

    with pytest.raises(DisconnectedViews) as info:
        register_multiview([a, b])

    assert info.value.components == [[0], [1]]


def test_multiview_closes_three_stations():
    cloud, truth = gen_terrain((24.0, 20.0), 35.0, 0.6, 6.0, seed=11)
    _, _, normal = truth.surface.axes
    poses = make_station_poses(3, np.zeros(3), normal, distance=25.0, spread=4.0, yaw_step_deg=3.0)
    scans = simulate_stations(cloud, poses, noise_sigma_m=0.006, seed=5)
    relative = [poses[0].inverse().compose(p) for p in poses]
    nudge = RigidTransform.from_rotvec([0.0, 0.0, math.radians(0.05)], [0.02, -0.01, 0.01])
    priors = [relative[0]] + [nudge.compose(r) for r in relative[1:]]

    recovered = register_multiview(scans, MultiviewParams(), initial=priors)

    for scan, estimate, expected in zip(scans, recovered, relative):
        assert pose_rmse(estimate, expected, scan.absolute_points) < 0.012


def test_multiview_without_pose_priors():
    cloud, truth = gen_terrain((24.0, 20.0), 35.0, 0.6, 6.0, seed=11)
    _, _, normal = truth.surface.axes
    poses = make_station_poses(3, np.zeros(3), normal, distance=25.0, spread=4.0, yaw_step_deg=3.0)
    scans = simulate_stations(cloud, poses, noise_sigma_m=0.006, seed=5)
    relative = [poses[0].inverse().compose(p) for p in poses]

    recovered = register_multiview(scans)

    for scan, estimate, expected in zip(scans, recovered, relative):
        assert pose_rmse(estimate, expected, scan.absolute_points) < 0.012


def test_hybrid_on_identical_clouds():
    cloud = terrain()

    result = register_global_hybrid(cloud, cloud)

    assert pose_rmse(result.transform, RigidTransform.identity(), cloud.points) < 1e-9
    assert result.rmse == pytest.approx(0.0, abs=1e-9)
    assert result.method == "hybrid"


def test_alpha_schedule_falls_to_zero():
    alphas = alpha_schedule(0.8, 5)

    assert alphas[0] == 0.8
    assert alphas[-1] == 0.0
    assert np.all(np.diff(alphas) < 0)


def test_evaluate_exact_pose():
    truth = RigidTransform.from_rotvec([0, 0, 0.3], [1, 2, 3])

    evaluation = evaluate_registration(truth, truth, diameter=10.0)

    assert evaluation.success
    assert evaluation.pose_rmse == 0.0


def test_evaluate_threshold_is_inclusive():
    estimate = RigidTransform(np.eye(3), [0.5, 0.0, 0.0])

    evaluation = evaluate_registration(estimate, RigidTransform.identity(), diameter=10.0, success_threshold=0.5)

    assert evaluation.pose_rmse == 0.5
    assert evaluation.success
