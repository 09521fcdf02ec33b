import logging
import time

import numpy as np
from scipy import ndimage

from config import (REACHABILITY_THETA_STEP_DEG, REACHABILITY_N_THETA, REACHABILITY_STRIDE,
                   REACHABILITY_BATCH_SIZE, IK_SEED, IK_RESTARTS)
from errors import DataError, ConfigurationError
from nodes.grasp_quality import HeatMap
from nodes.kinematics import goal_rotation, ik_solve_batch

logger = logging.getLogger(__name__)


def theta_samples():
    """Roll angles 0, 5, ..., 355 degrees in radians."""
    return np.radians(np.arange(REACHABILITY_N_THETA) * REACHABILITY_THETA_STEP_DEG)


def stream_keys(linear_pixels, n_theta=REACHABILITY_N_THETA):
    """Restart stream key per (pixel, roll index) pair, pixel-major."""
    linear_pixels = np.asarray(linear_pixels, dtype=np.int64)
    return (linear_pixels[:, None] * n_theta + np.arange(n_theta)[None, :]).ravel()


def make_solver(model, world, seed=IK_SEED, restarts=IK_RESTARTS):
    """Default per-goal validity check: collision-free IK exists."""
    def solve(positions, rotations, theta_indices, keys=None):
        keys = theta_indices if keys is None else keys
        return ik_solve_batch(model, world, positions, rotations, stream_keys=keys,
                              seed=seed, restarts=restarts).solved
    return solve


def reachability_score(model, world, p, n, solver=None, seed=IK_SEED, linear_pixel=0):
    """Fraction of the sampled roll angles for which the cup can reach p along n.

    `solver(positions, rotations, theta_indices, keys) -> bool array` may replace the IK check.
    `linear_pixel` selects the restart streams, matching a reachability_map evaluation of that pixel.
    """
    n = np.asarray(n, dtype=np.float64)
    if abs(np.linalg.norm(n) - 1.0) > 1e-6:
        raise DataError(f"approach direction must be a unit vector, got norm {np.linalg.norm(n)}")
    solver = solver or make_solver(model, world, seed)

    thetas = theta_samples()
    positions = np.tile(np.asarray(p, dtype=np.float64), (len(thetas), 1))
    valid = solver(positions, goal_rotation(n, thetas), np.arange(len(thetas)), stream_keys([linear_pixel]))
    return int(np.count_nonzero(valid)) / REACHABILITY_N_THETA


def evaluation_pixels(area_map, stride):
    """Graspable pixels on the stride grid, plus the first pixel of any surface the grid misses."""
    grid = np.zeros(area_map.mask.shape, dtype=bool)
    grid[::stride, ::stride] = True
    evaluated = area_map.mask & grid
    for surface in area_map.surfaces:
        rows, cols = surface.pixels[:, 0], surface.pixels[:, 1]
        if not evaluated[rows, cols].any():
            evaluated[rows[0], cols[0]] = True
    return evaluated


def reachability_map(area_map, point_map, normal_map, model, world, stride=REACHABILITY_STRIDE, solver=None,
                     seed=IK_SEED, restarts=IK_RESTARTS, batch_size=REACHABILITY_BATCH_SIZE):
    """J_a on graspable pixels (world-frame point and normal rasters), 0 elsewhere.

    Pixels off the stride grid copy the value of the nearest evaluated pixel of the same surface.
    """
    if stride < 1:
        raise DataError(f"stride must be at least 1, got {stride}")
    if model is None:
        raise ConfigurationError("reachability needs a robot model")
    solver = solver or make_solver(model, world, seed, restarts)

    values = np.zeros(area_map.mask.shape)
    evaluated = evaluation_pixels(area_map, stride)
    pixels = np.argwhere(evaluated)
    if len(pixels) == 0:
        return HeatMap(values=values)

    thetas = theta_samples()
    n_theta = len(thetas)
    points = point_map[pixels[:, 0], pixels[:, 1]]
    normals = normal_map[pixels[:, 0], pixels[:, 1]]
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    if not (np.all(np.isfinite(points)) and np.all(np.isfinite(normals))):
        raise DataError("graspable pixel without a point or normal")

    linear = np.ravel_multi_index((pixels[:, 0], pixels[:, 1]), area_map.mask.shape)
    counts = np.zeros(len(pixels), dtype=np.int64)
    pixels_per_batch = max(1, batch_size // n_theta)
    for start in range(0, len(pixels), pixels_per_batch):
        chunk = slice(start, start + pixels_per_batch)
        m = len(points[chunk])
        positions = np.repeat(points[chunk], n_theta, axis=0)
        rotations = goal_rotation(np.repeat(normals[chunk], n_theta, axis=0), np.tile(thetas, m))
        valid = solver(positions, rotations, np.tile(np.arange(n_theta), m), stream_keys(linear[chunk], n_theta))
        counts[chunk] = np.asarray(valid, dtype=bool).reshape(m, n_theta).sum(axis=1)
        logger.debug("Reachability batch %d-%d of %d pixels", start, start + m, len(pixels))

    values[pixels[:, 0], pixels[:, 1]] = counts / REACHABILITY_N_THETA
    if stride > 1:
        _fill_from_nearest(values, evaluated, area_map)
    return HeatMap(values=values)


def _fill_from_nearest(values, evaluated, area_map):
    for surface in area_map.surfaces:
        rows, cols = surface.pixels[:, 0], surface.pixels[:, 1]
        top, left = rows.min(), cols.min()
        window = (slice(top, rows.max() + 1), slice(left, cols.max() + 1))

        sources = evaluated[window] & (area_map.surface_id[window] == surface.segment_id)
        nearest = ndimage.distance_transform_edt(~sources, return_distances=False, return_indices=True)
        local_rows, local_cols = rows - top, cols - left
        values[rows, cols] = values[window][nearest[0][local_rows, local_cols], nearest[1][local_rows, local_cols]]


# =============================================================================
# Pipeline node
# =============================================================================

def evaluate_reachability(state):
    """Reachability heatmap: IK over 72 roll angles per evaluated graspable pixel."""
    # Progress tracking
    state.current_step += 1
    state.add_log(f"[{state.current_step}/{state.total_steps}] REACHABILITY: Solving IK over roll angles...")
    started = time.perf_counter()

    try:
        state.reachability = reachability_map(state.area_map, state.point_map, state.normal_map,
                                              state.robot, state.world, stride=state.config['stride'],
                                              seed=state.config['ik_seed'], restarts=state.config['ik_restarts'])
    except Exception as exc:
        state.fail("reachability", exc)
        return state

    state.record_timing("reachability", time.perf_counter() - started)
    scored = state.reachability.values[state.area_map.mask]
    reachable = int(np.count_nonzero(scored))
    state.add_log(f"✓ [{state.current_step}/{state.total_steps}] REACHABILITY: {reachable}/{scored.size} graspable pixels reachable")
    return state
