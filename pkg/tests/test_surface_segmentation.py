import math

import numpy as np
import pytest

from errors import DataError
from nodes.geometry import PointCloud, estimate_normals
from nodes.surface_segmentation import RegionGrowParams, region_grow

SPACING = 0.001


def _grid(a_range, b_range):
    a = np.arange(a_range[0], a_range[1] + SPACING / 2, SPACING)
    b = np.arange(b_range[0], b_range[1] + SPACING / 2, SPACING)
    aa, bb = np.meshgrid(a, b, indexing='ij')
    return aa.ravel(), bb.ravel()


@pytest.fixture(scope="module")
def crease_cloud():
    """A flat face and a 45 degree slope meeting along x = 0."""
    x, y = _grid((-0.03, -0.001), (-0.03, 0.03))
    flat = np.column_stack([x, y, np.full_like(x, 0.6)])
    x, y = _grid((0.0, 0.03), (-0.03, 0.03))
    slope = np.column_stack([x, y, 0.6 - x])
    return estimate_normals(PointCloud(points=np.vstack([flat, slope])), k=30), len(flat)


@pytest.fixture(scope="module")
def cylinder_cloud():
    """Camera-facing half of a cylinder of radius 3 cm lying along y."""
    radius = 0.03
    # 1 mm steps along the arc
    arc, y = _grid((-radius * math.radians(70), radius * math.radians(70)), (-0.02, 0.02))
    phi = arc / radius
    points = np.column_stack([0.03 * np.sin(phi), y, 0.65 - 0.03 * np.cos(phi)])
    return estimate_normals(PointCloud(points=points), k=30)


def test_crease_splits_into_two_planar_surfaces(crease_cloud):
    cloud, n_flat = crease_cloud
    segments = region_grow(cloud, RegionGrowParams())
    assert len(segments) >= 2
    # A narrow band along the crease may survive as a third surface
    segments = sorted(segments, key=len, reverse=True)[:2]

    expected = {'flat': np.array([0.0, 0.0, -1.0]), 'slope': np.array([-1.0, 0.0, -1.0]) / math.sqrt(2)}
    matched = set()
    for segment in segments:
        for name, normal in expected.items():
            if segment.dominant_normal @ normal > math.cos(math.radians(2)):
                matched.add(name)
                on_flat = np.count_nonzero(segment.point_indices < n_flat)
                # Only points near the crease may end up on the wrong side
                if name == 'flat':
                    assert on_flat >= 0.9 * len(segment)
                else:
                    assert on_flat <= 0.1 * len(segment)
    assert matched == {'flat', 'slope'}


def test_segments_are_disjoint_and_well_formed(crease_cloud):
    cloud, _ = crease_cloud
    segments = region_grow(cloud, RegionGrowParams())
    all_indices = np.concatenate([segment.point_indices for segment in segments])
    assert len(all_indices) == len(np.unique(all_indices))
    for segment in segments:
        assert len(segment) >= 255
        np.testing.assert_allclose(segment.centroid, cloud.points[segment.point_indices].mean(axis=0))
        np.testing.assert_allclose(segment.local_frame[2], segment.dominant_normal, atol=1e-12)
        assert segment.plane is not None


def test_admitted_points_are_within_the_angle_threshold(crease_cloud):
    cloud, _ = crease_cloud
    params = RegionGrowParams()
    log = []
    region_grow(cloud, params, admission_log=log)
    assert log
    assert all(angle < params.angle_threshold for _, _, angle in log)
    for point, reference, angle in log[:500]:
        cos = float(np.clip(cloud.normals[point] @ cloud.normals[reference], -1.0, 1.0))
        assert math.acos(cos) == pytest.approx(angle, abs=1e-9)


def test_small_regions_are_discarded(crease_cloud):
    cloud, _ = crease_cloud
    assert region_grow(cloud, RegionGrowParams(min_segment_size=len(cloud) + 1)) == []


def test_region_growing_is_deterministic(crease_cloud):
    cloud, _ = crease_cloud
    first = region_grow(cloud, RegionGrowParams())
    second = region_grow(cloud, RegionGrowParams())
    assert [segment.point_indices.tolist() for segment in first] == [segment.point_indices.tolist() for segment in second]


def test_compare_to_current_seed_follows_curved_surfaces(cylinder_cloud):
    grown = region_grow(cylinder_cloud, RegionGrowParams(compare_to='current_seed'))
    assert len(grown) == 1
    assert len(grown[0]) >= 0.95 * len(cylinder_cloud)

    anchored = region_grow(cylinder_cloud, RegionGrowParams(compare_to='region_seed', min_segment_size=1))
    assert len(anchored) > 1
    assert max(len(segment) for segment in anchored) < 0.5 * len(cylinder_cloud)


def test_invalid_normals_never_join_a_region(crease_cloud):
    cloud, _ = crease_cloud
    normals = cloud.normals.copy()
    normal_valid = cloud.normal_valid.copy()
    normals[:100] = np.nan
    normal_valid[:100] = False
    damaged = PointCloud(points=cloud.points, normals=normals, curvature=cloud.curvature, normal_valid=normal_valid)
    members = np.concatenate([segment.point_indices for segment in region_grow(damaged, RegionGrowParams())])
    assert not np.isin(np.arange(100), members).any()


@pytest.mark.parametrize("overrides", [
    {'k': 0},
    {'angle_threshold': 0.0},
    {'angle_threshold': math.pi},
    {'compare_to': 'neighbour'},
])
def test_parameter_validation(overrides):
    with pytest.raises(DataError):
        RegionGrowParams(**overrides)


def test_region_growing_requires_normals():
    with pytest.raises(DataError):
        region_grow(PointCloud(points=np.zeros((10, 3))))


def _membership(segments, n_first):
    """Two largest segments, each with the share of its points drawn from the first part of the cloud."""
    largest = sorted(segments, key=len, reverse=True)[:2]
    return [(segment, np.count_nonzero(segment.point_indices < n_first) / len(segment)) for segment in largest]


def test_cylinder_cap_and_side_are_separate_surfaces():
    radius, half_angle = 0.03, math.radians(70)
    arc, y = _grid((-radius * half_angle, radius * half_angle), (-0.02, 0.02))
    phi = arc / radius
    side = np.column_stack([radius * np.sin(phi), y, 0.65 - radius * np.cos(phi)])
    # End cap just past the side, clipped to the same visible half
    x, z = _grid((-radius, radius), (0.65 - radius, 0.65))
    inside = (x ** 2 + (z - 0.65) ** 2 <= radius ** 2) & (z <= 0.65 - radius * math.cos(half_angle))
    cap = np.column_stack([x[inside], np.full(inside.sum(), 0.021), z[inside]])
    cloud = estimate_normals(PointCloud(points=np.vstack([side, cap])), k=30)

    segments = region_grow(cloud, RegionGrowParams())
    (first, side_share), (second, other_share) = _membership(segments, len(side))
    shares = sorted([side_share, other_share])
    assert shares[0] <= 0.05 and shares[1] >= 0.95
    cap_segment = first if side_share < other_share else second
    assert len(cap_segment) >= 0.8 * len(cap)
    assert abs(cap_segment.dominant_normal[1]) > math.cos(math.radians(5))


def test_right_angle_edge_splits_at_a_30_degree_threshold():
    x, y = _grid((0.07, 0.1 - SPACING), (-0.03, 0.03))
    flat = np.column_stack([x, y, np.full_like(x, 0.6)])
    y, z = _grid((-0.03, 0.03), (0.6 + SPACING, 0.64))
    wall = np.column_stack([np.full_like(y, 0.1), y, z])
    cloud = estimate_normals(PointCloud(points=np.vstack([flat, wall])), k=30)

    segments = region_grow(cloud, RegionGrowParams(angle_threshold=math.radians(30)))
    assert len(segments) >= 2
    (first, first_share), (second, second_share) = _membership(segments, len(flat))
    flat_segment, wall_segment = (first, second) if first_share > second_share else (second, first)
    assert max(first_share, second_share) >= 0.9 and min(first_share, second_share) <= 0.1
    assert len(flat_segment) >= 0.8 * len(flat) and len(wall_segment) >= 0.8 * len(wall)
    assert abs(flat_segment.dominant_normal @ wall_segment.dominant_normal) < math.cos(math.radians(80))


def test_single_noisy_plane_stays_one_surface():
    a, b = _grid((-0.035, 0.035), (-0.035, 0.035))
    assert len(a) >= 5000
    rng = np.random.default_rng(12)
    points = np.column_stack([a, b, 0.6 + 0.2 * a - 0.1 * b + rng.normal(0.0, 1e-4, size=len(a))])
    cloud = estimate_normals(PointCloud(points=points), k=30)

    segments = region_grow(cloud, RegionGrowParams())
    largest = max(len(segment) for segment in segments)
    assert largest >= 0.99 * len(points)
