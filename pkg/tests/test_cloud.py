import numpy as np
import pytest

from app.cloud import (
    CloudFormat,
    Label,
    PointCloud,
    SpatialIndex,
    estimate_normals,
    nearest_neighbors,
    parse_cloud,
    parse_mesh_ply,
    read_cloud,
    save_cloud,
    voxel_downsample,
    write_cloud,
    write_mesh_ply,
)
from app.errors import CloudFormatError, EmptyCloudError, ParameterError, ParseError
from conftest import grid_points


def test_parse_xyz_three_points():
    cloud = parse_cloud(b"0 0 0\n1 0 0\n0 1 0", CloudFormat.XYZ_ASCII)

    assert len(cloud) == 3
    np.testing.assert_allclose(cloud.absolute_points, [[0, 0, 0], [1, 0, 0], [0, 1, 0]])


def test_parse_xyz_extra_column_becomes_intensity():
    cloud = parse_cloud(b"0 0 0 7\n1 0 0 8\n", "xyz_ascii")

    np.testing.assert_array_equal(cloud.scalars["intensity"], [7, 8])


def test_parse_xyz_reports_bad_line():
    with pytest.raises(ParseError) as info:
        parse_cloud(b"a b c\n", "xyz_ascii")

    assert info.value.line == 1


def test_parse_xyz_rejects_ragged_rows():
    with pytest.raises(ParseError) as info:
        parse_cloud(b"0 0 0\n1 0 0 5\n", "xyz_ascii")

    assert info.value.line == 2


def test_parse_empty_ply():
    data = b"ply\nformat ascii 1.0\nelement vertex 0\nproperty double x\nproperty double y\nproperty double z\nend_header\n"

    cloud = parse_cloud(data, "ply")

    assert len(cloud) == 0


def test_parse_ply_unsupported_type():
    data = b"ply\nformat ascii 1.0\nelement vertex 1\nproperty quad x\nend_header\n0\n"

    with pytest.raises(CloudFormatError):
        parse_cloud(data, "ply")


def test_write_empty_cloud_has_header():
    data = write_cloud(PointCloud(points=np.empty((0, 3))), "ply")

    assert b"element vertex 0" in data
    assert len(parse_cloud(data, "ply")) == 0


def test_scalar_channel_written_per_vertex():
    cloud = PointCloud(points=grid_points(3, 1), scalars={"displacement_m": [0.1, 0.2, 0.3]})

    data = write_cloud(cloud, "ply", binary=False)

    assert b"property double displacement_m" in data
    np.testing.assert_allclose(parse_cloud(data, "ply").scalars["displacement_m"], [0.1, 0.2, 0.3])


def test_scalars_can_be_left_out():
    cloud = PointCloud(points=grid_points(3, 1), scalars={"displacement_m": [0.1, 0.2, 0.3]})

    data = write_cloud(cloud, "ply", include_scalars=False)

    assert b"displacement_m" not in data


def test_large_coordinates_keep_precision(tmp_path):
    points = grid_points(4, 4, 0.001) + [500_000.0, 4_000_000.0, 1200.0]
    cloud = PointCloud(points=points, labels=np.full(16, Label.GROUND), epoch_id="I")

    loaded = read_cloud(save_cloud(tmp_path / "utm.ply", cloud))

    np.testing.assert_allclose(loaded.absolute_points, points, rtol=0, atol=1e-9)
    assert np.all(np.abs(loaded.points) < 10)
    assert loaded.epoch_id == "I"
    np.testing.assert_array_equal(loaded.labels, Label.GROUND)


def test_parse_ply_reports_bad_record():
    data = (
        b"ply\nformat ascii 1.0\nelement vertex 2\nproperty double x\nproperty double y\nproperty double z\n"
        b"end_header\n0 0 0\n1 zero 0\n"
    )

    with pytest.raises(ParseError) as info:
        parse_cloud(data, "ply")

    assert info.value.line == 2


def test_parse_truncated_binary_ply():
    data = write_cloud(PointCloud(points=grid_points(3, 3)), "ply")

    with pytest.raises(ParseError):
        parse_cloud(data[:-10], "ply")


@pytest.mark.parametrize("binary", [True, False])
def test_single_precision_scalars_round_trip(rng, binary):
    values = rng.normal(0, 3, 9)
    cloud = PointCloud(points=grid_points(3, 3), scalars={"rate_m_per_day": values})

    data = write_cloud(cloud, "ply", binary=binary, scalar_dtype="f4")

    assert b"property float rate_m_per_day" in data
    loaded = parse_cloud(data, "ply").scalars["rate_m_per_day"]
    np.testing.assert_array_equal(loaded, values.astype(np.float32))
    np.testing.assert_allclose(loaded, values, rtol=2**-23)


def test_scalar_precision_must_be_known():
    with pytest.raises(ParameterError):
        write_cloud(PointCloud(points=grid_points(2, 1)), "ply", scalar_dtype="f2")


@pytest.mark.parametrize("binary", [True, False])
def test_mesh_faces_and_comments_round_trip(binary):
    triangles = np.array([[0, 1, 3], [0, 3, 2]])

    data = write_mesh_ply(PointCloud(points=grid_points(2, 2)), triangles, {"interval_days": "156"}, binary=binary)

    cloud, faces, meta = parse_mesh_ply(data)
    assert len(cloud) == 4
    np.testing.assert_array_equal(faces, triangles)
    assert meta["interval_days"] == "156"


def test_mesh_polygons_are_fanned_into_triangles():
    data = (
        b"ply\nformat ascii 1.0\nelement vertex 4\nproperty double x\nproperty double y\nproperty double z\n"
        b"element face 1\nproperty list uchar int vertex_indices\nend_header\n"
        b"0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n"
    )

    _, faces, _ = parse_mesh_ply(data)

    np.testing.assert_array_equal(faces, [[0, 1, 2], [0, 2, 3]])


def test_mesh_face_outside_vertex_list():
    data = write_mesh_ply(PointCloud(points=grid_points(2, 2)), np.array([[0, 1, 7]]))

    with pytest.raises(CloudFormatError):
        parse_mesh_ply(data)


def test_nearest_neighbors_exact_match():
    index = SpatialIndex(grid_points(5, 5))

    [(i, d)] = nearest_neighbors(index, np.array([2.0, 3.0, 0.0]), 1)

    assert d == 0.0
    np.testing.assert_array_equal(index.points[i], [2, 3, 0])


def test_nearest_neighbors_matches_brute_force(rng):
    points = rng.uniform(0, 10, (1000, 3))
    index = SpatialIndex(points)

    for query in rng.uniform(0, 10, (100, 3)):
        found = nearest_neighbors(index, query, 5)
        dist = np.linalg.norm(points - query, axis=1)
        expected = np.lexsort((np.arange(len(points)), dist))[:5]
        assert [i for i, _ in found] == expected.tolist()
        np.testing.assert_allclose([d for _, d in found], dist[expected])


def test_nearest_neighbors_k_beyond_size():
    index = SpatialIndex(np.array([[0.0, 0, 0], [3, 0, 0], [1, 0, 0]]))

    found = nearest_neighbors(index, np.zeros(3), 10)

    assert [i for i, _ in found] == [0, 2, 1]


def test_nearest_neighbors_on_empty_cloud():
    with pytest.raises(EmptyCloudError):
        nearest_neighbors(SpatialIndex(np.empty((0, 3))), np.zeros(3), 1)


def test_normals_of_flat_plane_face_viewpoint(flat_grid):
    cloud = estimate_normals(flat_grid, 8, np.array([0.0, 0.0, 10.0]))

    np.testing.assert_allclose(cloud.normals, np.tile([0, 0, 1], (len(cloud), 1)), atol=1e-6)
    assert np.all(cloud.scalars["normal_valid"] == 1.0)


def test_normals_of_tilted_plane(flat_grid):
    normal = np.array([1.0, -2.0, 3.0]) / np.sqrt(14.0)
    e1 = np.cross(normal, [0.0, 0.0, 1.0])
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(normal, e1)
    points = flat_grid.points[:, :1] * e1 + flat_grid.points[:, 1:2] * e2
    viewpoint = points.mean(axis=0) + 50 * normal

    cloud = estimate_normals(PointCloud(points=points), 8, viewpoint)

    np.testing.assert_allclose(cloud.normals, np.tile(normal, (len(cloud), 1)), atol=1e-6)


def test_normals_need_three_neighbours(flat_grid):
    with pytest.raises(ParameterError):
        estimate_normals(flat_grid, 2, np.zeros(3))


def test_voxel_downsample_cube_corners():
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)

    out = voxel_downsample(PointCloud(points=corners), 10.0)

    np.testing.assert_allclose(out.points, [[0.5, 0.5, 0.5]])


def test_voxel_downsample_sparse_cloud_unchanged():
    cloud = PointCloud(points=grid_points(4, 4, 5.0) + 0.5)

    assert len(voxel_downsample(cloud, 1.0)) == len(cloud)


def test_voxel_downsample_matches_grouping(rng):
    points = rng.uniform(0, 5, (500, 3))

    out = voxel_downsample(PointCloud(points=points), 1.0)

    groups = {}
    for p in points:
        groups.setdefault(tuple(np.floor(p).astype(int)), []).append(p)
    expected = sorted(tuple(np.mean(g, axis=0)) for g in groups.values())
    np.testing.assert_allclose(sorted(map(tuple, out.points)), expected)


def test_voxel_downsample_is_idempotent(rng):
    cloud = PointCloud(points=rng.uniform(0, 5, (800, 3)), scalars={"intensity": rng.uniform(0, 1, 800)})

    once = voxel_downsample(cloud, 0.7)
    twice = voxel_downsample(once, 0.7)

    np.testing.assert_array_equal(twice.points, once.points)
    np.testing.assert_array_equal(twice.scalars["intensity"], once.scalars["intensity"])


def test_concatenate_keeps_absolute_coordinates():
    a = PointCloud(points=[[0.0, 0, 0]], origin_shift=[100, 0, 0])
    b = PointCloud(points=[[1.0, 0, 0]], origin_shift=[200, 0, 0], labels=[Label.VEGETATION])

    merged = PointCloud.concatenate([a, b])

    np.testing.assert_allclose(merged.absolute_points, [[100, 0, 0], [201, 0, 0]])
    np.testing.assert_array_equal(merged.labels, [Label.UNKNOWN, Label.VEGETATION])


def test_cloud_rejects_non_unit_normals():
    with pytest.raises(ParameterError):
        PointCloud(points=[[0.0, 0, 0]], normals=[[0.0, 0, 2]])
