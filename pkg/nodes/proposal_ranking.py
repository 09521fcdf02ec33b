import time
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from config import (POLICY_QUALITY_ONLY, POLICY_QUALITY_AND_REACHABILITY, POLICY_CLI_CHOICES, POLICY_DEFAULTS,
                   GOAL_APPROACH_OFFSET, GOAL_THETA_RANGE_DEG)
from errors import DataError, InvariantViolation, UsageError
from nodes.kinematics import GoalPose


@dataclass(frozen=True)
class PolicyConfig:
    policy: str = POLICY_DEFAULTS['policy']
    th_g: float = POLICY_DEFAULTS['th_g']
    th_r: float = POLICY_DEFAULTS['th_r']
    connectivity: int = POLICY_DEFAULTS['connectivity']

    def __post_init__(self):
        if self.policy not in (POLICY_QUALITY_ONLY, POLICY_QUALITY_AND_REACHABILITY):
            raise UsageError(f"unknown policy '{self.policy}'")
        if not (0.0 <= self.th_g <= 1.0 and 0.0 <= self.th_r <= 1.0):
            raise UsageError(f"thresholds must lie in [0, 1], got th_g={self.th_g}, th_r={self.th_r}")
        if self.connectivity not in (4, 8):
            raise UsageError(f"connectivity must be 4 or 8, got {self.connectivity}")

    @classmethod
    def from_config(cls, cfg):
        return cls(policy=cfg.get('policy', POLICY_DEFAULTS['policy']), th_g=float(cfg.get('th_g', POLICY_DEFAULTS['th_g'])),
                   th_r=float(cfg.get('th_r', POLICY_DEFAULTS['th_r'])),
                   connectivity=int(cfg.get('connectivity', POLICY_DEFAULTS['connectivity'])))

    @staticmethod
    def policy_name(choice):
        """Map the numeric CLI policy (1 or 2) to its name."""
        try:
            return POLICY_CLI_CHOICES[int(choice)]
        except (KeyError, ValueError) as exc:
            raise UsageError(f"policy must be one of {sorted(POLICY_CLI_CHOICES)}, got {choice}") from exc

    @property
    def uses_reachability(self):
        return self.policy == POLICY_QUALITY_AND_REACHABILITY


@dataclass
class GraspCandidate:
    pixel: Tuple[int, int]
    p: Optional[np.ndarray]
    n: Optional[np.ndarray]
    quality: float
    reachability: Optional[float]
    cluster_id: int
    global_rank: int = -1

    def to_dict(self):
        return {
            'rank': self.global_rank,
            'pixel': [int(self.pixel[0]), int(self.pixel[1])],
            'p': None if self.p is None else [float(v) for v in self.p],
            'n': None if self.n is None else [float(v) for v in self.n],
            'quality': float(self.quality),
            'reachability': None if self.reachability is None else float(self.reachability),
            'cluster_id': int(self.cluster_id)
        }


def threshold(quality, reachability, cfg):
    """Candidate mask: quality above th_g, and reachability above th_r under the joint policy."""
    mask = quality.values > cfg.th_g
    if cfg.uses_reachability:
        if reachability is None:
            raise DataError("policy quality-and-reachability needs a reachability map")
        if reachability.shape != quality.shape:
            raise DataError(f"heatmap shapes differ: {quality.shape} vs {reachability.shape}")
        mask &= reachability.values > cfg.th_r
    return mask


def label_components(mask, connectivity=4):
    """Connected components numbered 1..K in row-major order of first pixel."""
    structure = ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)
    labels, count = ndimage.label(mask, structure=structure)
    if count == 0:
        return labels, 0

    flat = labels.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids != 0
    ids, first = ids[keep], first[keep]
    remap = np.zeros(count + 1, dtype=labels.dtype)
    remap[ids[np.argsort(first)]] = np.arange(1, len(ids) + 1)
    return remap[labels], int(count)


def containing_clusters(inner_labels, outer_labels):
    """Map each inner cluster id to the one outer cluster that holds all of its pixels.

    Holds whenever the inner mask is a subset of the outer mask under the same connectivity, as with
    the joint policy inside quality-only at equal th_g.
    """
    parents = {}
    for cluster_id in range(1, int(inner_labels.max(initial=0)) + 1):
        outer = np.unique(outer_labels[inner_labels == cluster_id])
        if len(outer) != 1 or outer[0] == 0:
            raise InvariantViolation(f"cluster {cluster_id} is not inside a single enclosing cluster: {outer.tolist()}")
        parents[cluster_id] = int(outer[0])
    return parents


def _ranking_order(pixels, quality, reachability):
    """Indices of `pixels` sorted by quality desc, reachability desc, then row-major."""
    q = quality.values[pixels[:, 0], pixels[:, 1]]
    r = np.zeros(len(pixels)) if reachability is None else reachability.values[pixels[:, 0], pixels[:, 1]]
    return np.lexsort((pixels[:, 1], pixels[:, 0], -r, -q))


def _candidate(pixel, cluster_id, quality, reachability, point_map, normal_map):
    row, col = int(pixel[0]), int(pixel[1])
    p = None if point_map is None else point_map[row, col].copy()
    n = None if normal_map is None else normal_map[row, col].copy()
    return GraspCandidate(pixel=(row, col), p=p, n=n, quality=float(quality.values[row, col]),
                          reachability=None if reachability is None else float(reachability.values[row, col]),
                          cluster_id=cluster_id)


def rank(labels, quality, reachability=None, point_map=None, normal_map=None):
    """Best pixel per cluster, then all cluster winners in global order."""
    pixels = np.argwhere(labels > 0)
    if len(pixels) == 0:
        return []
    cluster_of = labels[pixels[:, 0], pixels[:, 1]]

    winners = []
    order = _ranking_order(pixels, quality, reachability)
    seen = set()
    # Walking the global order once, the first pixel met for a cluster is its local best
    for index in order:
        cluster_id = int(cluster_of[index])
        if cluster_id in seen:
            continue
        seen.add(cluster_id)
        winners.append(_candidate(pixels[index], cluster_id, quality, reachability, point_map, normal_map))

    for position, candidate in enumerate(winners):
        candidate.global_rank = position
    return winners


def rank_without_clustering(mask, quality, reachability=None, point_map=None, normal_map=None, limit=None):
    """Every masked pixel is a candidate, sorted by the same key."""
    pixels = np.argwhere(mask)
    order = _ranking_order(pixels, quality, reachability)
    if limit is not None:
        order = order[:limit]
    candidates = [_candidate(pixels[index], 0, quality, reachability, point_map, normal_map) for index in order]
    for position, candidate in enumerate(candidates):
        candidate.global_rank = position
    return candidates


def make_goal_poses(candidate, offset=GOAL_APPROACH_OFFSET, theta_range_deg=GOAL_THETA_RANGE_DEG):
    """Pre-grasp poses 1 cm out along n, rolled over 0..180 degrees in 5 degree steps."""
    p = np.asarray(candidate.p, dtype=np.float64)
    n = np.asarray(candidate.n, dtype=np.float64)
    if abs(np.linalg.norm(n) - 1.0) > 1e-9:
        raise DataError(f"candidate normal must be a unit vector, got norm {np.linalg.norm(n)}")

    start, stop, step = theta_range_deg
    thetas = np.radians(np.arange(start, stop + step / 2.0, step))
    approach = p + offset * n
    return [GoalPose(p=approach, n=n, theta=float(theta)) for theta in thetas]


# =============================================================================
# Pipeline node
# =============================================================================

def rank_candidates(state):
    """Threshold the heatmaps under the configured policy, cluster and rank."""
    # Progress tracking
    state.current_step += 1
    state.add_log(f"[{state.current_step}/{state.total_steps}] RANKING: Extracting grasp candidates...")
    started = time.perf_counter()

    try:
        policy = PolicyConfig.from_config(state.config)
        mask = threshold(state.quality, state.reachability, policy)
        if state.config.get('cluster', True):
            labels, count = label_components(mask, policy.connectivity)
            if policy.uses_reachability:
                quality_only = replace(policy, policy=POLICY_QUALITY_ONLY)
                containing_clusters(labels, label_components(threshold(state.quality, None, quality_only),
                                                             policy.connectivity)[0])
            state.cluster_labels = labels
            state.candidates = rank(labels, state.quality, state.reachability, state.point_map, state.normal_map)
        else:
            state.candidates = rank_without_clustering(mask, state.quality, state.reachability,
                                                       state.point_map, state.normal_map)
    except Exception as exc:
        state.fail("ranking", exc)
        return state

    state.record_timing("ranking", time.perf_counter() - started)
    state.add_log(f"✓ [{state.current_step}/{state.total_steps}] RANKING: {len(state.candidates)} candidates under {policy.policy}")
    return state
