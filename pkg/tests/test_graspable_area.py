import math

import numpy as np
import pytest

from errors import DataError, InvariantViolation
from nodes.geometry import PointCloud
from nodes.graspable_area import (NO_POINT, CupMask, GraspableAreaMap, SurfaceArea, SurfaceMask, full_contact_area,
                                  project_surface, remap_to_image)
from nodes.surface_segmentation import SurfaceSegment

GRID_POINTS = 60


def _brute_force_contact(grid, cup):
    """Cup centre cells whose every disc cell lands on an occupied cell, checked offset by offset."""
    anchor = np.array(cup.anchor)
    padded = np.pad(grid, cup.grid.shape[0], constant_values=False)
    offset = cup.grid.shape[0]
    result = np.ones(grid.shape, dtype=bool)
    for i, j in np.argwhere(cup.grid):
        di, dj = i - anchor[0], j - anchor[1]
        result &= padded[offset + di:offset + di + grid.shape[0], offset + dj:offset + dj + grid.shape[1]]
    return result


def _random_blob(seed, shape=(64, 64)):
    rng = np.random.default_rng(seed)
    rows, cols = np.mgrid[0:shape[0], 0:shape[1]]
    grid = np.zeros(shape, dtype=bool)
    for _ in range(rng.integers(1, 5)):
        centre = rng.uniform(0, shape[0], size=2)
        if rng.uniform() < 0.5:
            radius = rng.uniform(5, 25)
            grid |= (rows - centre[0]) ** 2 + (cols - centre[1]) ** 2 <= radius ** 2
        else:
            half = rng.uniform(4, 20, size=2)
            grid |= (np.abs(rows - centre[0]) <= half[0]) & (np.abs(cols - centre[1]) <= half[1])
    # Scatter holes
    grid &= rng.uniform(size=shape) > 0.02
    grid[0, 0] = True
    return grid


def test_cup_mask_matches_disc_area():
    cup = CupMask.default()
    assert cup.grid.shape == (18, 18)
    assert abs(cup.count - math.pi * 81) / (math.pi * 81) < 0.02
    np.testing.assert_array_equal(cup.grid, cup.grid[::-1, :])
    np.testing.assert_array_equal(cup.grid, cup.grid.T)


@pytest.mark.parametrize("seed", range(50))
def test_full_contact_matches_brute_force(seed):
    grid = _random_blob(seed)
    surface = SurfaceMask(grid=grid, origin=np.zeros(2), cell_to_point=np.where(grid, 0, NO_POINT))
    cup = CupMask.default()
    np.testing.assert_array_equal(full_contact_area(surface, cup), _brute_force_contact(grid, cup))


def test_surface_mask_must_be_occupied():
    with pytest.raises(InvariantViolation):
        SurfaceMask(grid=np.zeros((5, 5), dtype=bool), origin=np.zeros(2),
                    cell_to_point=np.full((5, 5), NO_POINT))


def test_project_surface_keeps_one_point_per_cell(make_flat_patch):
    segment, cloud = make_flat_patch()
    surface = project_surface(segment, cloud)
    assert surface.source_cells.sum() == GRID_POINTS * GRID_POINTS
    assert not surface.closed_cells.any()
    assert sorted(surface.cell_to_point[surface.source_cells].tolist()) == list(range(len(cloud)))


def test_project_empty_segment_is_rejected(make_flat_patch):
    segment, cloud = make_flat_patch()
    segment.point_indices = np.array([], dtype=np.int64)
    with pytest.raises(DataError):
        project_surface(segment, cloud)


def test_square_patch_graspable_region(make_flat_patch):
    segment, cloud = make_flat_patch()
    surface = project_surface(segment, cloud)
    graspable = full_contact_area(surface)
    # Disc spans offsets -9..+8 on both axes, leaving 60 - 17 centre positions per axis
    assert graspable.sum() == 43 * 43

    area_map = remap_to_image([SurfaceArea(segment=segment, surface_mask=surface, graspable=graspable)],
                              cloud, (GRID_POINTS, GRID_POINTS))
    assert area_map.pixel_count == 43 * 43
    rows, cols = np.nonzero(area_map.mask)
    assert rows.max() - rows.min() + 1 == 43 and cols.max() - cols.min() + 1 == 43
    assert set(np.unique(area_map.surface_id[area_map.mask])) == {3}
    assert not area_map.mask[0, 0] and area_map.mask[30, 30]

    surface_entry = area_map.surfaces[0]
    order = np.lexsort((surface_entry.pixels[:, 1], surface_entry.pixels[:, 0]))
    np.testing.assert_array_equal(order, np.arange(len(order)))


def test_closed_holes_stay_graspable_but_map_to_existing_points(make_flat_patch):
    hole = 30 * GRID_POINTS + 30
    segment, cloud = make_flat_patch(drop=[hole])
    surface = project_surface(segment, cloud)
    assert surface.closed_cells.sum() == 1

    graspable = full_contact_area(surface)
    assert graspable.sum() == 43 * 43
    area_map = remap_to_image([SurfaceArea(segment=segment, surface_mask=surface, graspable=graspable)],
                              cloud, (GRID_POINTS, GRID_POINTS))
    assert area_map.pixel_count == 43 * 43 - 1
    assert not area_map.mask[30, 30]


def test_small_patch_has_no_graspable_area(make_flat_patch):
    segment, cloud = make_flat_patch()
    keep = np.nonzero((cloud.pixel_index[:, 0] < 15) & (cloud.pixel_index[:, 1] < 15))[0]
    small = SurfaceSegment(point_indices=keep, centroid=cloud.points[keep].mean(axis=0),
                           dominant_normal=segment.dominant_normal, local_frame=segment.local_frame)
    assert not full_contact_area(project_surface(small, cloud)).any()


def test_empty_area_map():
    area_map = GraspableAreaMap.empty((4, 5))
    assert area_map.pixel_count == 0
    assert area_map.surface_id.shape == (4, 5)
    assert remap_to_image([], PointCloud(points=np.zeros((0, 3))), (4, 5)).pixel_count == 0
