import time
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from config import (QUALITY_WEIGHTS, SEAL_WEIGHTS, SEAL_RESIDUAL_SCALE, SEAL_VARIANCE_SCALE,
                   QUALITY_FLATNESS_MODE, QUALITY_FLATNESS_MODES, CONTACT_MIN_POINTS, CUP_RADIUS)
from errors import DataError, InvariantViolation
from nodes.geometry import fit_plane


@dataclass
class ContactPatch:
    """Points under the cup when it sucks at `p`, with their normals."""
    p: np.ndarray
    points: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        if len(self.points) < CONTACT_MIN_POINTS:
            raise InvariantViolation(f"contact patch has {len(self.points)} points, need {CONTACT_MIN_POINTS}")
        if len(self.normals) != len(self.points):
            raise DataError(f"{len(self.normals)} normals for {len(self.points)} contact points")


@dataclass
class HeatMap:
    """Per-pixel score in [0, 1] aligned with the depth raster."""
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError(f"heatmap must be 2D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)) or self.values.min(initial=0.0) < 0 or self.values.max(initial=0.0) > 1:
            raise InvariantViolation("heatmap values must lie in [0, 1]")

    @classmethod
    def zeros(cls, shape):
        return cls(values=np.zeros(shape))

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape


def contact_patch(point_index, segment, cloud, radius=CUP_RADIUS, tree=None):
    """Segment points within the cup radius of cloud point `point_index`.

    `tree` may be a prebuilt cKDTree over the segment's points.
    """
    members = segment.point_indices
    position = np.searchsorted(members, point_index)
    if position >= len(members) or members[position] != point_index:
        raise DataError(f"point {point_index} does not belong to surface {segment.segment_id}")

    if tree is None:
        tree = cKDTree(cloud.points[members])
    p = cloud.points[point_index]
    local = np.asarray(sorted(tree.query_ball_point(p, radius)), dtype=np.int64)
    chosen = members[local]
    return ContactPatch(p=p, points=cloud.points[chosen], normals=cloud.normals[chosen])


def center_score(points):
    """J_c = 1 - maxmin(distance to the area centroid); all ones when distances do not vary."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise DataError("centre score of an empty graspable area")
    distance = np.linalg.norm(points - points.mean(axis=0), axis=1)
    spread = distance.max() - distance.min()
    if spread <= 0:
        return np.ones(len(points))
    return 1.0 - (distance - distance.min()) / spread


def normal_variance(normals):
    """Sum of squared deviations from the mean normal over N - 1."""
    normals = np.asarray(normals, dtype=np.float64)
    if len(normals) < 2:
        return 0.0
    deviation = normals - normals.mean(axis=0)
    return float(np.einsum('ij,ij->', deviation, deviation) / (len(normals) - 1))


def seal_terms(patch, mode=QUALITY_FLATNESS_MODE, variance_scale=SEAL_VARIANCE_SCALE):
    """Weighted flatness and smoothness terms of the seal score."""
    if mode not in QUALITY_FLATNESS_MODES:
        raise DataError(f"flatness mode must be one of {QUALITY_FLATNESS_MODES}, got '{mode}'")
    variance = normal_variance(patch.normals)
    residual = fit_plane(patch.points).residual

    if mode == 'exponential':
        flatness = SEAL_WEIGHTS['flatness'] * np.exp(-variance_scale * variance)
    else:
        flatness = SEAL_WEIGHTS['flatness'] * variance
    smoothness = SEAL_WEIGHTS['smoothness'] * np.exp(-SEAL_RESIDUAL_SCALE * residual)
    return float(flatness), float(smoothness)


def seal_score(patch, mode=QUALITY_FLATNESS_MODE, variance_scale=SEAL_VARIANCE_SCALE):
    flatness, smoothness = seal_terms(patch, mode, variance_scale)
    return float(np.clip(flatness + smoothness, 0.0, 1.0))


def quality_map(area_map, segments, clouds, mode=QUALITY_FLATNESS_MODE, variance_scale=SEAL_VARIANCE_SCALE):
    """J_q = 0.5 J_c + 0.5 J_s on every graspable pixel, 0 elsewhere."""
    values = np.zeros(area_map.mask.shape)
    by_id = {segment.segment_id: segment for segment in segments}

    for surface in area_map.surfaces:
        segment = by_id[surface.segment_id]
        cloud = clouds if not isinstance(clouds, dict) else clouds[surface.object_label]
        tree = cKDTree(cloud.points[segment.point_indices])

        centre = center_score(cloud.points[surface.point_indices])
        seal = np.array([seal_score(contact_patch(index, segment, cloud, tree=tree), mode, variance_scale)
                         for index in surface.point_indices])

        score = QUALITY_WEIGHTS['center'] * centre + QUALITY_WEIGHTS['seal'] * seal
        values[surface.pixels[:, 0], surface.pixels[:, 1]] = np.clip(score, 0.0, 1.0)

    return HeatMap(values=values)


# =============================================================================
# Pipeline node
# =============================================================================

def evaluate_grasp_quality(state):
    """Grasp quality heatmap over the graspable area map."""
    # Progress tracking
    state.current_step += 1
    state.add_log(f"[{state.current_step}/{state.total_steps}] GRASP_QUALITY: Scoring graspable pixels...")
    started = time.perf_counter()

    try:
        state.quality = quality_map(state.area_map, state.segments, state.object_clouds,
                                    mode=state.config['flatness_mode'],
                                    variance_scale=state.config['variance_scale'])
    except Exception as exc:
        state.fail("grasp_quality", exc)
        return state

    state.record_timing("grasp_quality", time.perf_counter() - started)
    scored = state.quality.values[state.area_map.mask]
    peak = float(scored.max()) if scored.size else 0.0
    state.add_log(f"✓ [{state.current_step}/{state.total_steps}] GRASP_QUALITY: {scored.size} pixels scored, peak J_q {peak:.3f}")
    return state
