import time
from dataclasses import dataclass, field
from typing import List

import numpy as np
from scipy import ndimage

from config import (SURFACE_MASK_RESOLUTION, SURFACE_MASK_CLOSING_SIZE, SURFACE_MASK_PADDING,
                   CUP_DIAMETER_CELLS, CUP_RADIUS_CELLS)
from errors import DataError, InvariantViolation

NO_POINT = -1


@dataclass(frozen=True)
class CupMask:
    """Binary disc of the vacuum cup footprint, one cell per millimetre.

    A cell (i, j) belongs to the disc when its centre lies within the radius of the grid centre
    ((d-1)/2, (d-1)/2). When the cup sits on surface cell c, disc cell (i, j) covers cell
    c + (i - d//2, j - d//2).
    """
    grid: np.ndarray

    @classmethod
    def default(cls, diameter=CUP_DIAMETER_CELLS, radius=CUP_RADIUS_CELLS):
        centre = (diameter - 1) / 2.0
        i, j = np.mgrid[0:diameter, 0:diameter]
        return cls(grid=(i - centre) ** 2 + (j - centre) ** 2 <= radius ** 2)

    @property
    def count(self):
        return int(self.grid.sum())

    @property
    def anchor(self):
        return (self.grid.shape[0] // 2, self.grid.shape[1] // 2)


@dataclass
class SurfaceMask:
    """Occupancy raster of a surface in its local frame.

    `origin` is the local (x, y) position in metres of the lower corner of cell (0, 0); rows run along
    local x. `cell_to_point` holds the source point index per cell, NO_POINT for empty or closed cells.
    """
    grid: np.ndarray
    origin: np.ndarray
    cell_to_point: np.ndarray
    resolution: float = SURFACE_MASK_RESOLUTION

    def __post_init__(self):
        if not self.grid.any():
            raise InvariantViolation("surface mask has no occupied cell")

    @property
    def source_cells(self):
        return self.cell_to_point != NO_POINT

    @property
    def closed_cells(self):
        return self.grid & ~self.source_cells


@dataclass
class GraspableSurface:
    segment_id: int
    object_label: int
    cells: np.ndarray                   # (K, 2) graspable cells of the surface mask
    point_indices: np.ndarray           # unique source points in the object's cloud
    pixels: np.ndarray                  # (M, 2) image pixels, row-major sorted, one per point


@dataclass
class GraspableAreaMap:
    mask: np.ndarray
    surface_id: np.ndarray
    surfaces: List[GraspableSurface] = field(default_factory=list)

    @classmethod
    def empty(cls, image_shape):
        return cls(mask=np.zeros(image_shape, dtype=bool), surface_id=np.zeros(image_shape, dtype=np.int32))

    @property
    def pixel_count(self):
        return int(self.mask.sum())


@dataclass
class SurfaceArea:
    """Graspable cells of one segment before they are mapped to the image."""
    segment: object
    surface_mask: SurfaceMask
    graspable: np.ndarray


def project_surface(segment, cloud, resolution=SURFACE_MASK_RESOLUTION):
    """Rasterize a segment in its local frame at 1 mm per cell and close sampling holes."""
    if len(segment.point_indices) == 0:
        raise DataError("cannot project an empty segment")

    points = cloud.points[segment.point_indices]
    local = (points - segment.centroid) @ segment.local_frame.T
    xy = local[:, :2]

    cells = np.floor(xy / resolution).astype(np.int64)
    low = cells.min(axis=0)
    pad = SURFACE_MASK_PADDING
    idx = cells - low + pad
    shape = tuple(idx.max(axis=0) + 1 + pad)

    # Each cell keeps the point nearest its centre, ties by point order
    centre_offset = xy / resolution - (cells + 0.5)
    distance = np.einsum('ij,ij->i', centre_offset, centre_offset)
    linear = idx[:, 0] * shape[1] + idx[:, 1]
    order = np.lexsort((np.arange(len(points)), distance, linear))
    first = np.ones(len(order), dtype=bool)
    first[1:] = linear[order][1:] != linear[order][:-1]
    chosen = order[first]

    cell_to_point = np.full(shape, NO_POINT, dtype=np.int64)
    cell_to_point[idx[chosen, 0], idx[chosen, 1]] = segment.point_indices[chosen]

    occupied = cell_to_point != NO_POINT
    structure = np.ones((SURFACE_MASK_CLOSING_SIZE, SURFACE_MASK_CLOSING_SIZE), dtype=bool)
    closed = ndimage.binary_closing(occupied, structure=structure)

    return SurfaceMask(grid=occupied | closed, origin=(low - pad) * resolution,
                       cell_to_point=cell_to_point, resolution=resolution)


def full_contact_area(surface, cup=None):
    """Boolean raster of cup-centre cells whose whole disc lies on occupied cells."""
    cup = cup or CupMask.default()
    coverage = ndimage.correlate(surface.grid.astype(np.int32), cup.grid.astype(np.int32),
                                 mode='constant', cval=0)
    return coverage == cup.count


def remap_to_image(areas, clouds, image_shape):
    """Map graspable cells back to image pixels through their source points.

    Cells filled by closing borrow the source point of the nearest cell that has one.
    `clouds` is a single PointCloud or a dict of clouds keyed by object label.
    """
    area_map = GraspableAreaMap.empty(image_shape)

    for area in areas:
        segment = area.segment
        cloud = clouds if not isinstance(clouds, dict) else clouds[segment.object_label]
        cells = np.argwhere(area.graspable)
        if len(cells) == 0:
            continue

        source = area.surface_mask.cell_to_point
        if area.surface_mask.closed_cells.any():
            nearest = ndimage.distance_transform_edt(~area.surface_mask.source_cells,
                                                     return_distances=False, return_indices=True)
            source = source[nearest[0], nearest[1]]

        point_indices = np.unique(source[cells[:, 0], cells[:, 1]])
        if np.any(point_indices == NO_POINT):
            raise InvariantViolation(f"surface {segment.segment_id}: graspable cell without a source point")

        pixels = cloud.pixel_index[point_indices]
        order = np.lexsort((pixels[:, 1], pixels[:, 0]))
        point_indices, pixels = point_indices[order], pixels[order]

        area_map.mask[pixels[:, 0], pixels[:, 1]] = True
        area_map.surface_id[pixels[:, 0], pixels[:, 1]] = segment.segment_id
        area_map.surfaces.append(GraspableSurface(segment_id=segment.segment_id, object_label=segment.object_label,
                                                  cells=cells, point_indices=point_indices, pixels=pixels))
    return area_map


# =============================================================================
# Pipeline node
# =============================================================================

def detect_graspable_areas(state):
    """Full-contact cup positions for every surface, remapped onto the depth raster."""
    reporter = state.stage_reporter()

    # Progress tracking
    state.current_step += 1
    state.add_log(f"[{state.current_step}/{state.total_steps}] GRASPABLE_AREA: Convolving surfaces with the cup mask...")
    started = time.perf_counter()

    try:
        cup = CupMask.default()
        areas = []
        for segment in state.segments:
            cloud = state.object_clouds[segment.object_label]
            surface_mask = project_surface(segment, cloud)
            graspable = full_contact_area(surface_mask, cup)
            areas.append(SurfaceArea(segment=segment, surface_mask=surface_mask, graspable=graspable))
            reporter.detail(f"Surface {segment.segment_id}: {int(graspable.sum())} graspable cells", flush=True)

        state.area_map = remap_to_image(areas, state.object_clouds, state.depth.data.shape)
    except Exception as exc:
        state.fail("graspable_area", exc)
        return state

    state.record_timing("graspable_area", time.perf_counter() - started)
    state.add_log(f"✓ [{state.current_step}/{state.total_steps}] GRASPABLE_AREA: {state.area_map.pixel_count} graspable pixels "
                  f"on {len(state.area_map.surfaces)} surfaces")
    return state
