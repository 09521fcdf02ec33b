"""Synthetic dataset generation: sample scenes, annotate them, persist records and a manifest."""
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from config import (DATASET_MANIFEST_FILE, DATASET_SCENE_DIR_TEMPLATE, DATASET_WORKERS, SCENE_TIMINGS_FILE,
                    SCENE_DEFAULT_COUNT_RANGE, DEPTH_NOISE_SIGMA, VERSION)
from errors import ConfigurationError, DataError, GraspabilityError
from graspability_graph import annotate_scene
from nodes.collision import CollisionWorld
from nodes.dataset_io import SceneRecord, atomic_write_json, write_scene_record
from nodes.geometry import CameraIntrinsics
from nodes.grasp_quality import HeatMap
from nodes.kinematics import RobotModel
from nodes.scene_synth import BinSpec, ShapePrimitive, add_depth_noise, sample_scene

logger = logging.getLogger(__name__)


@dataclass
class DatasetConfig:
    object_pool: List[ShapePrimitive]
    robot: RobotModel
    pipeline: Dict[str, Any]
    bin_spec: BinSpec = field(default_factory=BinSpec.default)
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics.default)
    world_extra: Optional[CollisionWorld] = None
    count_range: tuple = SCENE_DEFAULT_COUNT_RANGE
    noise_sigma: float = DEPTH_NOISE_SIGMA

    def __post_init__(self):
        if not self.object_pool:
            raise ConfigurationError("object pool is empty")
        if self.robot is None:
            raise ConfigurationError("dataset generation needs a robot model")

    def describe(self):
        """Seed-independent settings recorded in the manifest."""
        return {
            'bin': self.bin_spec.to_dict(),
            'intrinsics': self.intrinsics.to_dict(),
            'object_pool': [shape.to_dict() for shape in self.object_pool],
            'robot': self.robot.name,
            'count_range': list(self.count_range),
            'noise_sigma': self.noise_sigma,
            'pipeline': self.pipeline
        }


def scene_seeds(seed, n_scenes):
    """Independent per-scene seeds derived from the dataset seed."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n_scenes)]


def _annotate_one(task):
    """Worker: sample, annotate and write one scene. Returns a manifest entry or a failure."""
    index, scene_seed, config, out_dir = task
    directory_name = DATASET_SCENE_DIR_TEMPLATE.format(index=index)
    started = time.perf_counter()
    try:
        scene = sample_scene(scene_seed, config.object_pool, count_range=config.count_range,
                             bin_spec=config.bin_spec, intrinsics=config.intrinsics)
        depth, segmentation, result = annotate_scene(scene, cfg=config.pipeline, robot=config.robot,
                                                     world_extra=config.world_extra)
        if config.noise_sigma > 0:
            depth = add_depth_noise(depth, config.noise_sigma, scene_seed)

        reachability = result.reachability if result.reachability is not None else HeatMap.zeros(depth.data.shape)
        record = SceneRecord(depth=depth.data, segmentation=segmentation.labels, quality=result.quality.values,
                             reachability=reachability.values, scene=scene.to_dict(),
                             intrinsics=scene.intrinsics.to_dict())
        hashes = write_scene_record(os.path.join(out_dir, directory_name), record)
    except Exception as exc:
        if isinstance(exc, GraspabilityError):
            logger.error("Scene %d (seed %d) failed: %s", index, scene_seed, exc)
        else:
            logger.exception("Scene %d (seed %d) failed unexpectedly", index, scene_seed)
        return {'index': index, 'seed': scene_seed, 'error': str(exc), 'error_type': type(exc).__name__}

    entry = {
        'index': index,
        'seed': scene_seed,
        'directory': directory_name,
        'objects': len(scene.objects),
        'placement_warnings': len(scene.warnings),
        'files': hashes
    }
    timing = dict(result.timings, total=round(time.perf_counter() - started, 6))
    return {'entry': entry, 'timings': timing}


def generate_dataset(config, n_scenes, seed, out_dir, workers=DATASET_WORKERS):
    """Generate n_scenes annotated records under out_dir; returns the manifest dict.

    Output depends only on (config, n_scenes, seed): per-scene seeds come from a SeedSequence and
    results are gathered in index order regardless of worker scheduling. Wall-clock timings go to
    a separate file so that the manifest itself is reproducible.
    """
    if n_scenes < 1:
        raise ConfigurationError(f"n_scenes must be at least 1, got {n_scenes}")
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {out_dir}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise DataError(f"dataset directory {out_dir} is not writable")

    seeds = scene_seeds(seed, n_scenes)
    tasks = [(index, scene_seed, config, out_dir) for index, scene_seed in enumerate(seeds)]
    logger.info("Generating %d scenes into %s with %d workers", n_scenes, out_dir, workers)

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_annotate_one, tasks))
    else:
        outcomes = [_annotate_one(task) for task in tasks]

    scenes, failures, timings = [], [], {}
    for outcome in outcomes:
        if 'error' in outcome:
            failures.append(outcome)
            continue
        scenes.append(outcome['entry'])
        timings[outcome['entry']['directory']] = outcome['timings']

    manifest = {
        'version': VERSION,
        'seed': seed,
        'n_scenes': n_scenes,
        'config': config.describe(),
        'scenes': scenes,
        'failures': failures
    }
    atomic_write_json(os.path.join(out_dir, DATASET_MANIFEST_FILE), manifest)
    atomic_write_json(os.path.join(out_dir, SCENE_TIMINGS_FILE), timings)

    if failures:
        logger.warning("%d of %d scenes failed; see the manifest failures list", len(failures), n_scenes)
    return manifest
