import math

import numpy as np
import pytest

from app.cloud import Label, PointCloud
from app.errors import ParameterError, ParseError, TooSparse
from app.ground_filter import (
    ambient_visibility,
    apply_mask,
    csf_classify,
    filter_vegetation,
    labeling_accuracy,
    level_subslope,
    leveling_rotation,
    parse_mask,
    partition_subslopes,
    visibility_gradient,
    visibility_gradient_filter,
)
from app.models.params import ClothParams
from app.synth import add_vegetation, gen_terrain
from app.terrain import Plane
from conftest import grid_points


def inclination_deg(plane: Plane) -> float:
    return math.degrees(math.acos(abs(plane.normal[2])))


def test_flat_plane_is_all_ground(flat_grid):
    labeling = csf_classify(flat_grid)

    assert labeling.stats == {"ground": len(flat_grid), "vegetation": 0}


def test_infinite_threshold_keeps_everything():
    cloud, truth = gen_terrain((10.0, 10.0), 0.0, 0.0, 16.0, seed=2)
    cloud, _ = add_vegetation(cloud, truth, 0.2, seed=2)

    labeling = csf_classify(cloud, ClothParams(class_threshold=math.inf))

    assert labeling.ground_mask.all()


def test_cloth_separates_blobs_from_plane():
    cloud, truth = gen_terrain((20.0, 20.0), 0.0, 0.0, 16.0, seed=4)
    cloud, truth = add_vegetation(cloud, truth, 0.15, (0.5, 2.0), seed=4)

    labeling = csf_classify(cloud)

    assert labeling_accuracy(labeling.labels, truth.ground_labels) >= 0.95


def test_steep_vegetated_slope():
    cloud, truth = gen_terrain((20.0, 20.0), 70.0, 0.2, 16.0, seed=7)
    cloud, truth = add_vegetation(cloud, truth, 0.15, (0.5, 2.0), seed=7)

    ground, removed, labeling = filter_vegetation(cloud, cell_size=10.0)

    assert len(ground) + len(removed) == len(cloud)
    assert np.all(labeling.labels != Label.UNKNOWN)
    assert labeling_accuracy(labeling.labels, truth.ground_labels) >= 0.95


def test_bare_slope_stays_ground():
    cloud, _ = gen_terrain((20.0, 20.0), 45.0, 0.2, 16.0, seed=8)

    _, _, labeling = filter_vegetation(cloud, cell_size=10.0)

    assert labeling.ground_mask.mean() >= 0.99


def test_filter_parallel_matches_serial():
    cloud, truth = gen_terrain((20.0, 20.0), 40.0, 0.2, 9.0, seed=9)
    cloud, _ = add_vegetation(cloud, truth, 0.1, seed=9)

    _, _, serial = filter_vegetation(cloud, cell_size=8.0)
    _, _, parallel = filter_vegetation(cloud, cell_size=8.0, workers=3)

    np.testing.assert_array_equal(serial.labels, parallel.labels)


def test_filter_ignores_point_order():
    cloud, truth = gen_terrain((20.0, 20.0), 40.0, 0.2, 9.0, seed=11)
    cloud, _ = add_vegetation(cloud, truth, 0.1, seed=11)
    order = np.random.default_rng(11).permutation(len(cloud))

    _, _, original = filter_vegetation(cloud, cell_size=8.0)
    _, _, shuffled = filter_vegetation(cloud.select(order), cell_size=8.0)

    # plane fits see float sums in another order, so near-ties in the overlaps may flip
    assert np.mean(shuffled.labels != original.labels[order]) <= 1e-3


def test_cloth_labels_ignore_point_order():
    cloud, truth = gen_terrain((15.0, 15.0), 0.0, 0.0, 16.0, seed=12)
    cloud, _ = add_vegetation(cloud, truth, 0.15, seed=12)
    order = np.random.default_rng(12).permutation(len(cloud))

    original = csf_classify(cloud)
    shuffled = csf_classify(cloud.select(order))

    np.testing.assert_array_equal(shuffled.labels, original.labels[order])


def test_ground_grows_with_class_threshold():
    cloud, truth = gen_terrain((20.0, 20.0), 40.0, 0.2, 9.0, seed=13)
    cloud, _ = add_vegetation(cloud, truth, 0.15, (0.5, 2.0), seed=13)

    masks = [
        filter_vegetation(cloud, cell_size=10.0, cloth=ClothParams(class_threshold=t))[2].ground_mask
        for t in (0.1, 0.3, 0.5, 1.0, 3.0)
    ]

    for tight, loose in zip(masks, masks[1:]):
        assert np.all(loose[tight])
    assert masks[0].sum() < masks[-1].sum()


def test_single_subslope_on_flat_plane(flat_grid):
    subslopes = partition_subslopes(flat_grid, cell_size=50.0)

    assert len(subslopes) == 1
    np.testing.assert_allclose(subslopes[0].plane.normal, [0, 0, 1], atol=1e-6)


def test_terrace_cells_follow_their_tier():
    points = grid_points(40, 20, 0.5)
    steep = points[:, 0] >= 10.0
    points[steep, 2] = (points[steep, 0] - 10.0) * math.tan(math.radians(40))

    subslopes = partition_subslopes(PointCloud(points=points), cell_size=10.0)

    assert [s.cell_id for s in subslopes] == [(0, 0), (1, 0)]
    assert inclination_deg(subslopes[0].plane) == pytest.approx(0.0, abs=1.0)
    assert inclination_deg(subslopes[1].plane) == pytest.approx(40.0, abs=1.0)


def test_empty_cells_are_skipped():
    points = grid_points(20, 20, 0.5)
    points = np.concatenate([points, points + [20.0, 0, 0]])

    subslopes = partition_subslopes(PointCloud(points=points), cell_size=10.0)

    assert [s.cell_id for s in subslopes] == [(0, 0), (2, 0)]


def test_every_point_has_one_owner():
    cloud, _ = gen_terrain((30.0, 30.0), 30.0, 0.3, 2.0, seed=1)

    subslopes = partition_subslopes(cloud, cell_size=7.0, min_points=20)

    owners = np.concatenate([s.core_indices for s in subslopes])
    assert np.array_equal(np.sort(owners), np.arange(len(cloud)))


def test_too_few_points():
    with pytest.raises(TooSparse):
        partition_subslopes(PointCloud(points=grid_points(3, 3)), min_points=30)


def test_horizontal_subslope_needs_no_rotation(flat_grid):
    [sub] = partition_subslopes(flat_grid, cell_size=50.0)

    np.testing.assert_array_equal(sub.level_rotation.rotation, np.eye(3))


def test_levelling_a_seventy_degree_incline(rng):
    slope = math.radians(70)
    normal = np.array([0.0, -math.sin(slope), math.cos(slope)])
    along = np.array([0.0, math.cos(slope), math.sin(slope)])
    base = grid_points(20, 20, 0.5)
    offsets = rng.uniform(-0.1, 0.1, len(base))
    points = base[:, :1] * [1.0, 0, 0] + base[:, 1:2] * along + offsets[:, None] * normal
    cloud = PointCloud(points=points)
    [sub] = partition_subslopes(cloud, cell_size=100.0)

    leveled = level_subslope(sub, cloud)

    np.testing.assert_allclose(Plane.fit(leveled.cloud.points).normal, [0, 0, 1], atol=1e-6)
    spread = np.std(sub.plane.signed_distance(cloud.points))
    assert np.std(leveled.cloud.points[:, 2]) == pytest.approx(spread, rel=1e-9)
    np.testing.assert_allclose(leveled.restore(leveled.cloud.points), cloud.points, atol=1e-9)


def test_vertical_plane_still_levels():
    rotation = leveling_rotation(np.array([1.0, 0.0, 0.0]))

    np.testing.assert_allclose(rotation.apply([[1.0, 0.0, 0.0]]), [[0, 0, 1]], atol=1e-12)


def test_parse_mask():
    mask = parse_mask("# forced labels\n+3\n- 5\n\n")

    assert mask == {3: Label.GROUND, 5: Label.VEGETATION}


def test_parse_mask_bad_line():
    with pytest.raises(ParseError) as info:
        parse_mask("+1\nseven\n")

    assert info.value.line == 2


def test_mask_overrides_labels():
    labels = np.array([Label.GROUND, Label.GROUND, Label.VEGETATION], dtype=np.int8)

    forced = apply_mask(labels, {0: Label.VEGETATION, 2: Label.GROUND})

    assert forced.tolist() == [Label.VEGETATION, Label.GROUND, Label.GROUND]
    with pytest.raises(ParameterError):
        apply_mask(labels, {3: Label.GROUND})


def test_mask_applies_inside_filter():
    cloud, _ = gen_terrain((10.0, 10.0), 30.0, 0.1, 9.0, seed=3)

    ground, removed, _ = filter_vegetation(cloud, cell_size=10.0, mask={0: Label.VEGETATION})

    assert len(removed) >= 1
    assert len(ground) + len(removed) == len(cloud)


def test_labeling_accuracy():
    assert labeling_accuracy([1, 1, 2, 2], [1, 2, 2, 2]) == 0.75
    with pytest.raises(ParameterError):
        labeling_accuracy([1], [1, 2])


def test_isolated_plane_has_uniform_visibility():
    plane = PointCloud(points=grid_points(20, 20, 0.25))

    labeling = visibility_gradient_filter(plane)

    assert labeling.ground_mask.all()


def canopy_scene() -> tuple[PointCloud, np.ndarray]:
    plane = grid_points(49, 49, 0.25)
    canopy = grid_points(9, 9, 0.25, z=1.5) + [5.0, 5.0, 0.0]
    return PointCloud(points=np.concatenate([plane, canopy])), plane


def test_canopy_shadow_boundary_stands_out():
    cloud, plane = canopy_scene()

    gradient = visibility_gradient(cloud, ambient_visibility(cloud))

    # distance in xy from the canopy footprint [5, 7] x [5, 7]
    gap = np.linalg.norm(np.clip(np.abs(plane[:, :2] - 6.0) - 1.0, 0.0, None), axis=1)
    edge = gap <= 0.5
    far = gap >= 4.0
    assert gradient[: len(plane)][edge].max() > gradient[: len(plane)][far].max()


def test_visibility_threshold_infinite():
    cloud, _ = canopy_scene()

    labeling = visibility_gradient_filter(cloud, threshold=math.inf)

    assert labeling.ground_mask.all()
