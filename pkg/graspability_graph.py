import copy
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
from langgraph.graph import StateGraph, START, END

from config import (PIPELINE_DEFAULTS, CONFIG_DIR_ENV_VAR, SAMPLE_DATA_DIR, ROBOT_CONFIG_FILE, WORLD_CONFIG_FILE,
                    OBJECT_POOL_FILE, DEBUG_LOGGING, POLICY_QUALITY_AND_REACHABILITY)
from errors import ConfigurationError, StageError

# Import all node functions
from nodes.geometry import CameraPose, DepthImage, SegmentationMask, backproject_scene
from nodes.surface_segmentation import segment_surfaces
from nodes.graspable_area import detect_graspable_areas
from nodes.grasp_quality import HeatMap, evaluate_grasp_quality
from nodes.reachability import evaluate_reachability
from nodes.proposal_ranking import rank_candidates
from nodes.reporting import generate_report, finalize_output
from nodes.kinematics import RobotModel
from nodes.collision import CollisionWorld
from nodes.scene_synth import BinSpec, render, load_object_pool

logger = logging.getLogger(__name__)


class StageReporter:
    """Indented progress lines for helpers inside a node; no other access to the state."""
    def __init__(self, state, indent_level: int = 1):
        self._state = state
        self._indent_level = indent_level

    def detail(self, message: str, flush: bool = False):
        self._state.add_log(message, self._indent_level, flush)


@dataclass
class GraspabilityState:
    """Shared state passed between all nodes in the graph."""
    # Input data
    depth: Optional[DepthImage] = None
    segmentation: Optional[SegmentationMask] = None
    camera_pose: CameraPose = field(default_factory=CameraPose.identity)
    config: Dict[str, Any] = None
    robot: Optional[RobotModel] = None
    world: Optional[CollisionWorld] = None
    log_enabled: bool = DEBUG_LOGGING

    # Progress tracking
    current_step: int = 0
    total_steps: int = 8

    # Intermediate products
    object_clouds: Dict[int, Any] = None
    segments: List[Any] = None
    area_map: Any = None
    point_map: Optional[np.ndarray] = None
    normal_map: Optional[np.ndarray] = None

    # Heatmaps and candidates
    quality: Optional[HeatMap] = None
    reachability: Optional[HeatMap] = None
    cluster_labels: Optional[np.ndarray] = None
    candidates: List[Any] = None

    # Final output
    timings: Dict[str, float] = None
    failed_stage: Optional[str] = None
    failure: Optional[BaseException] = None
    report: Dict[str, Any] = None
    errors: List[str] = None
    logs: List[str] = None

    def add_error(self, error_message: str, indent_level: int = 0):
        """Add error to state and print it."""
        if not self.errors:
            self.errors = []
        self.errors.append(error_message)
        if self.log_enabled:
            print(f"{'    ' * indent_level}ERROR: {error_message}")

    def add_log(self, log_message: str, indent_level: int = 0, flush: bool = False):
        """Add log to state and print it if logging is enabled.

        Args:
            log_message: The message to log
            indent_level: Number of '    ' indentations to add before the message
            flush: If True, print with carriage return and flush for temporary messages
        """
        if self.log_enabled:
            if not self.logs:
                self.logs = []
            self.logs.append(log_message)

            if flush:
                print(f"    " * indent_level + log_message.ljust(50), end='\r', flush=True)
            else:
                print("    " * indent_level + log_message)

    def stage_reporter(self):
        return StageReporter(self)

    def fail(self, stage: str, exc: BaseException):
        """Record a stage failure; routing sends the run to finalize_output."""
        self.failed_stage = stage
        self.failure = exc
        self.add_error(f"{stage}: {exc}")

    def record_timing(self, stage: str, seconds: float):
        if self.timings is None:
            self.timings = {}
        self.timings[stage] = round(seconds, 6)


@dataclass
class PipelineResult:
    report: Dict[str, Any]
    quality: Optional[HeatMap]
    reachability: Optional[HeatMap]
    candidates: List[Any]
    area_map: Any = None
    cluster_labels: Optional[np.ndarray] = None
    timings: Dict[str, float] = field(default_factory=dict)
    errors: List[str] = field(default_factory=list)


# =============================================================================
# Routing
# =============================================================================

def _failed(state) -> bool:
    return bool(state.errors)


def after_backproject(state: GraspabilityState) -> str:
    """Stage errors finish the run; an empty scene skips straight to the report."""
    if _failed(state):
        return "finalize_output"
    if not state.object_clouds:
        state.add_log("Routing: no objects in view, skipping to generate_report")
        return "generate_report"
    return "segment_surfaces"


def needs_reachability(cfg) -> bool:
    return bool(cfg.get('compute_reachability')) or cfg.get('policy') == POLICY_QUALITY_AND_REACHABILITY


def after_quality(state: GraspabilityState) -> str:
    if _failed(state):
        return "finalize_output"
    return "evaluate_reachability" if needs_reachability(state.config) else "rank_candidates"


def _continue_to(next_node):
    def route(state: GraspabilityState) -> str:
        return "finalize_output" if _failed(state) else next_node
    route.__name__ = f"continue_to_{next_node}"
    return route


def create_graspability_graph():
    """Create and compile the LangGraph workflow."""
    logger.debug("Creating graspability annotation graph...")

    # Create the state graph
    workflow = StateGraph(GraspabilityState)

    # Add all nodes
    workflow.add_node("backproject_scene", backproject_scene)
    workflow.add_node("segment_surfaces", segment_surfaces)
    workflow.add_node("detect_graspable_areas", detect_graspable_areas)
    workflow.add_node("evaluate_grasp_quality", evaluate_grasp_quality)
    workflow.add_node("evaluate_reachability", evaluate_reachability)
    workflow.add_node("rank_candidates", rank_candidates)
    workflow.add_node("generate_report", generate_report)
    workflow.add_node("finalize_output", finalize_output)

    # Set entry point
    workflow.add_edge(START, "backproject_scene")

    workflow.add_conditional_edges("backproject_scene", after_backproject,
                                   ["segment_surfaces", "generate_report", "finalize_output"])
    workflow.add_conditional_edges("segment_surfaces", _continue_to("detect_graspable_areas"),
                                   ["detect_graspable_areas", "finalize_output"])
    workflow.add_conditional_edges("detect_graspable_areas", _continue_to("evaluate_grasp_quality"),
                                   ["evaluate_grasp_quality", "finalize_output"])

    # Reachability only when requested or required by the policy
    workflow.add_conditional_edges("evaluate_grasp_quality", after_quality,
                                   ["evaluate_reachability", "rank_candidates", "finalize_output"])
    workflow.add_conditional_edges("evaluate_reachability", _continue_to("rank_candidates"),
                                   ["rank_candidates", "finalize_output"])
    workflow.add_conditional_edges("rank_candidates", _continue_to("generate_report"),
                                   ["generate_report", "finalize_output"])

    workflow.add_edge("generate_report", "finalize_output")
    workflow.add_edge("finalize_output", END)

    logger.debug("Graph creation complete.")
    # No checkpointer: the state carries numpy rasters that are not meant to be serialized
    return workflow.compile()


# =============================================================================
# Configuration loading
# =============================================================================

def resolve_config_path(file_name, path=None):
    """Explicit path, else $GRASPABILITY_CONFIG_DIR/<file_name>, else the bundled sample_data copy."""
    if path:
        if not os.path.exists(path):
            raise ConfigurationError(f"configuration file not found: {path}")
        return path
    config_dir = os.environ.get(CONFIG_DIR_ENV_VAR)
    if config_dir and os.path.exists(os.path.join(config_dir, file_name)):
        return os.path.join(config_dir, file_name)
    return os.path.join(SAMPLE_DATA_DIR, file_name)


def load_robot(path=None):
    return RobotModel.load(resolve_config_path(ROBOT_CONFIG_FILE, path))


def load_world(path=None, bin_spec=None):
    """Bin walls and floor plus the static obstacles of world.json."""
    extra = CollisionWorld.load(resolve_config_path(WORLD_CONFIG_FILE, path))
    return CollisionWorld.from_bin(bin_spec or BinSpec.default()).with_primitives(extra.primitives)


def load_object_pool_config(path=None):
    return load_object_pool(resolve_config_path(OBJECT_POOL_FILE, path))


def build_pipeline_config(**overrides):
    """PIPELINE_DEFAULTS with the given keys replaced; unknown keys are rejected."""
    cfg = copy.deepcopy(PIPELINE_DEFAULTS)
    unknown = sorted(set(overrides) - set(cfg))
    if unknown:
        raise ConfigurationError(f"unknown pipeline options: {unknown}")
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = value
    return cfg


# =============================================================================
# Public API functions
# =============================================================================

def run_pipeline(depth, segmentation=None, cfg=None, camera_pose=None, robot=None, world=None,
                 raise_on_error=True, log_enabled=False):
    """Annotate a depth image and propose grasps: heatmaps, candidates and a report.

    With raise_on_error a stage failure raises StageError naming the stage; otherwise the
    failure is only recorded in the report.
    """
    cfg = cfg if cfg is not None else build_pipeline_config()
    if robot is None and needs_reachability(cfg):
        robot = load_robot()
    if world is None:
        world = CollisionWorld.empty()

    graph = create_graspability_graph()
    initial_state = GraspabilityState(
        depth=depth,
        segmentation=segmentation,
        camera_pose=camera_pose or CameraPose.identity(),
        config=cfg,
        robot=robot,
        world=world,
        log_enabled=log_enabled,
        errors=[],
        timings={}
    )
    result = graph.invoke(initial_state)

    if result.get('errors') and raise_on_error:
        raise StageError(result.get('failed_stage') or 'pipeline', result.get('failure') or result['errors'][0])

    return PipelineResult(report=result.get('report'), quality=result.get('quality'),
                          reachability=result.get('reachability'), candidates=result.get('candidates') or [],
                          area_map=result.get('area_map'), cluster_labels=result.get('cluster_labels'),
                          timings=dict(result.get('timings') or {}), errors=list(result.get('errors') or []))


def annotate_scene(scene, cfg=None, robot=None, world_extra=None, raise_on_error=True):
    """Render a synthetic scene and annotate it; returns (depth, segmentation, PipelineResult).

    The collision world holds the bin, every scene object, and `world_extra` obstacles.
    """
    depth, segmentation = render(scene)
    world = CollisionWorld.from_scene(scene, extra=world_extra)
    result = run_pipeline(depth, segmentation, cfg=cfg, camera_pose=scene.camera_pose, robot=robot, world=world,
                          raise_on_error=raise_on_error)
    return depth, segmentation, result
