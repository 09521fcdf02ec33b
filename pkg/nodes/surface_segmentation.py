import math
import time
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from config import REGION_GROW_DEFAULTS, REGION_GROW_COMPARE_MODES
from errors import DataError, DegenerateFitError
from nodes.geometry import PlaneFit, fit_plane, local_frame

UNASSIGNED = -1
DISCARDED = -2


@dataclass(frozen=True)
class RegionGrowParams:
    k: int = REGION_GROW_DEFAULTS['k']
    angle_threshold: float = math.radians(REGION_GROW_DEFAULTS['angle_threshold_deg'])
    curvature_threshold: float = REGION_GROW_DEFAULTS['curvature_threshold']
    min_segment_size: int = REGION_GROW_DEFAULTS['min_segment_size']
    compare_to: str = REGION_GROW_DEFAULTS['compare_to']

    def __post_init__(self):
        if self.k <= 0 or self.min_segment_size <= 0 or self.curvature_threshold <= 0:
            raise DataError(f"region growing parameters must be positive: {self}")
        if not (0 < self.angle_threshold < math.pi / 2):
            raise DataError(f"angle threshold must lie in (0, pi/2) rad, got {self.angle_threshold}")
        if self.compare_to not in REGION_GROW_COMPARE_MODES:
            raise DataError(f"compare_to must be one of {REGION_GROW_COMPARE_MODES}, got '{self.compare_to}'")

    @classmethod
    def from_config(cls, cfg):
        """Build from a dict using degrees for the angle, as in config.REGION_GROW_DEFAULTS."""
        merged = {**REGION_GROW_DEFAULTS, **(cfg or {})}
        return cls(k=int(merged['k']), angle_threshold=math.radians(merged['angle_threshold_deg']),
                   curvature_threshold=float(merged['curvature_threshold']),
                   min_segment_size=int(merged['min_segment_size']), compare_to=merged['compare_to'])


@dataclass
class SurfaceSegment:
    """A smooth surface of one object; indices refer to that object's point cloud."""
    point_indices: np.ndarray
    centroid: np.ndarray
    dominant_normal: np.ndarray
    local_frame: np.ndarray
    plane: Optional[PlaneFit] = None
    segment_id: int = 0
    object_label: int = 0

    def __len__(self):
        return len(self.point_indices)


def region_grow(cloud, params=None, admission_log=None):
    """Smoothness-constrained region growing over a cloud with normals and curvature.

    Seeds are visited in ascending curvature (ties by index). A neighbour joins when the angle
    between its normal and the reference normal is below the threshold; it seeds further growth
    when its own curvature is below the curvature threshold. If `admission_log` is a list, one
    (point, reference point, angle) tuple is appended per admitted point.
    """
    params = params or RegionGrowParams()
    if not cloud.has_normals or cloud.curvature is None:
        raise DataError("region growing needs normals and curvature (run estimate_normals first)")
    n_points = len(cloud)
    if n_points == 0:
        raise DataError("region growing on an empty cloud")

    normals = cloud.normals
    valid = cloud.valid_normals() & np.isfinite(cloud.curvature)
    curvature = np.where(valid, cloud.curvature, np.inf)

    k = min(params.k, n_points - 1)
    if k > 0:
        _, neighbours = cKDTree(cloud.points).query(cloud.points, k=k + 1)
        neighbours = neighbours[:, 1:]
    else:
        neighbours = np.zeros((n_points, 0), dtype=np.int64)

    cos_threshold = math.cos(params.angle_threshold)
    labels = np.full(n_points, UNASSIGNED, dtype=np.int64)
    regions = []

    for seed in np.lexsort((np.arange(n_points), curvature)):
        if labels[seed] != UNASSIGNED or not valid[seed]:
            continue

        region_id = len(regions)
        labels[seed] = region_id
        members = [seed]
        queue = deque([seed])

        while queue:
            current = queue.popleft()
            reference = current if params.compare_to == 'current_seed' else seed
            candidates = neighbours[current]
            candidates = candidates[(labels[candidates] == UNASSIGNED) & valid[candidates]]
            if len(candidates) == 0:
                continue
            cosines = normals[candidates] @ normals[reference]
            admitted = candidates[cosines > cos_threshold]
            labels[admitted] = region_id
            members.extend(admitted.tolist())

            if admission_log is not None:
                angles = np.arccos(np.clip(cosines[cosines > cos_threshold], -1.0, 1.0))
                admission_log.extend((int(p), int(reference), float(a)) for p, a in zip(admitted, angles))

            queue.extend(admitted[curvature[admitted] < params.curvature_threshold].tolist())

        regions.append(members)

    segments = []
    for members in regions:
        if len(members) < params.min_segment_size:
            labels[members] = DISCARDED
            continue
        segments.append(_make_segment(cloud, np.sort(np.asarray(members, dtype=np.int64))))
    return segments


def _make_segment(cloud, indices):
    points = cloud.points[indices]
    centroid = points.mean(axis=0)
    mean_normal = cloud.normals[indices].mean(axis=0)
    mean_normal = mean_normal / np.linalg.norm(mean_normal)

    try:
        plane = fit_plane(points)
        normal = plane.normal if plane.normal @ mean_normal >= 0 else -plane.normal
    except DegenerateFitError:
        plane = None
        normal = mean_normal

    return SurfaceSegment(point_indices=indices, centroid=centroid, dominant_normal=normal,
                          local_frame=local_frame(normal), plane=plane)


# =============================================================================
# Pipeline node
# =============================================================================

def segment_surfaces(state):
    """Region growing on every object cloud; segment ids are global and start at 1."""
    reporter = state.stage_reporter()

    # Progress tracking
    state.current_step += 1
    state.add_log(f"[{state.current_step}/{state.total_steps}] SEGMENTATION: Growing smooth surfaces...")
    started = time.perf_counter()

    try:
        params = RegionGrowParams.from_config(state.config.get('region_grow'))
        segments = []
        for label, cloud in sorted(state.object_clouds.items()):
            object_segments = region_grow(cloud, params)
            for segment in object_segments:
                segment.segment_id = len(segments) + 1
                segment.object_label = label
                segments.append(segment)
            reporter.detail(f"Object {label}: {len(object_segments)} surfaces", flush=True)
        state.segments = segments
    except Exception as exc:
        state.fail("segmentation", exc)
        return state

    state.record_timing("segmentation", time.perf_counter() - started)
    state.add_log(f"✓ [{state.current_step}/{state.total_steps}] SEGMENTATION: {len(segments)} surfaces found")
    return state
