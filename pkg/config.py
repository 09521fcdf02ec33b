# Configuration file for Suction Graspability Annotation
# Contains all default values and parameters used throughout the pipeline
# Variables organized by LangGraph node execution order

import math
import os

# =============================================================================
# GENERAL CONFIG
# =============================================================================

# Debug logging flag - set to False to disable state log echoing
DEBUG_LOGGING = True

# Environment variables (may be provided through a .env file)
CONFIG_DIR_ENV_VAR = "GRASPABILITY_CONFIG_DIR"
LOG_LEVEL_ENV_VAR = "GRASPABILITY_LOG_LEVEL"
DEFAULT_LOG_LEVEL = "WARNING"

# Bundled JSON configuration (reference arm, bin world, object pool)
SAMPLE_DATA_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "sample_data")
ROBOT_CONFIG_FILE = "robot.json"
WORLD_CONFIG_FILE = "world.json"
OBJECT_POOL_FILE = "object_pool.json"

# =============================================================================
# 1. CAMERA AND RASTER CONFIG (backproject_scene)
# =============================================================================

# Pixels carrying this depth value are invalid and skipped everywhere
INVALID_DEPTH = 0.0

# 256x256 raster, the network input size of the annotated datasets
CAMERA_INTRINSICS = {
    'fx': 500.0,
    'fy': 500.0,
    'cx': 128.0,
    'cy': 128.0,
    'width': 256,
    'height': 256
}

# Camera optical centre height above the bin floor (m)
CAMERA_HEIGHT_ABOVE_FLOOR = 0.75

# =============================================================================
# 2. SCENE SYNTHESIS CONFIG (sample_scene + render)
# =============================================================================

# Bin interior in the world (= robot base) frame, metres
BIN_CONFIG = {
    'center': [0.55, 0.0],
    'floor_z': -0.35,
    'interior': [0.40, 0.40],
    'wall_height': 0.15,
    'wall_thickness': 0.02,
    'floor_thickness': 0.02
}

SCENE_MAX_OBJECTS = 64
SCENE_DEFAULT_COUNT_RANGE = (5, 10)
SCENE_PLACEMENT_ATTEMPTS = 100
SCENE_MAX_TILT_DEG = 15.0
SCENE_LYING_CYLINDER_PROBABILITY = 0.5
SCENE_MAX_PILE_HEIGHT = 0.25                            # above floor, keeps piles in view

# Depth noise is off unless requested
DEPTH_NOISE_SIGMA = 0.0

# =============================================================================
# 3. NORMAL ESTIMATION CONFIG (estimate_normals)
# =============================================================================

NORMAL_ESTIMATION_K = 30

# Neighbourhoods whose covariance trace is below this (m^2) count as coincident
NORMAL_DEGENERATE_TRACE = 1e-16

# Relative eigenvalue floor for the collinearity test of fit_plane
PLANE_FIT_RANK_TOLERANCE = 1e-12

# =============================================================================
# 4. REGION GROWING CONFIG (segment_surfaces)
# =============================================================================

REGION_GROW_DEFAULTS = {
    'k': 30,
    'angle_threshold_deg': 10.0,
    'curvature_threshold': 0.05,
    'min_segment_size': 255,                            # ~ cup disc area in 1 mm cells
    'compare_to': 'current_seed'                        # or 'region_seed'
}

REGION_GROW_COMPARE_MODES = ['current_seed', 'region_seed']

# =============================================================================
# 5. GRASPABLE AREA CONFIG (detect_graspable_areas)
# =============================================================================

SURFACE_MASK_RESOLUTION = 0.001                         # 1 mm per cell
SURFACE_MASK_CLOSING_SIZE = 3
SURFACE_MASK_PADDING = 2

CUP_DIAMETER_CELLS = 18
CUP_RADIUS_CELLS = 9.0
CUP_RADIUS = 0.009                                      # metres

# =============================================================================
# 6. GRASP QUALITY CONFIG (evaluate_grasp_quality)
# =============================================================================

QUALITY_WEIGHTS = {
    'center': 0.5,
    'seal': 0.5
}

SEAL_WEIGHTS = {
    'flatness': 0.9,
    'smoothness': 0.1
}

SEAL_RESIDUAL_SCALE = 5.0
SEAL_VARIANCE_SCALE = 50.0

# 'exponential' scores flat patches higher; 'literal' evaluates 0.9*var + 0.1*exp(-5*res)
QUALITY_FLATNESS_MODE = 'exponential'
QUALITY_FLATNESS_MODES = ['exponential', 'literal']

CONTACT_MIN_POINTS = 3

# =============================================================================
# 7. REACHABILITY CONFIG (evaluate_reachability)
# =============================================================================

REACHABILITY_THETA_STEP_DEG = 5.0
REACHABILITY_N_THETA = 72                               # 0..355 deg
REACHABILITY_STRIDE = 2
REACHABILITY_BATCH_SIZE = 8192                          # goals per IK batch

IK_DAMPING = 0.1
IK_MAX_ITERATIONS = 200
IK_RESTARTS = 8
IK_SEED = 0
IK_POSITION_TOLERANCE = 0.001                           # metres
IK_ORIENTATION_TOLERANCE = math.radians(0.5)
IK_MAX_STEP = 0.5                                       # rad per iteration

# Capsule sampling step; half of it is the conservative collision margin
COLLISION_SAMPLE_SPACING = 0.004

# =============================================================================
# 8. PROPOSAL RANKING CONFIG (rank_candidates)
# =============================================================================

POLICY_QUALITY_ONLY = 'quality-only'
POLICY_QUALITY_AND_REACHABILITY = 'quality-and-reachability'
POLICY_CLI_CHOICES = {
    1: POLICY_QUALITY_ONLY,
    2: POLICY_QUALITY_AND_REACHABILITY
}

POLICY_DEFAULTS = {
    'policy': POLICY_QUALITY_AND_REACHABILITY,
    'th_g': 0.5,
    'th_r': 0.3,
    'connectivity': 4
}

GOAL_APPROACH_OFFSET = 0.01                             # 1 cm along n
GOAL_THETA_RANGE_DEG = (0.0, 180.0, 5.0)                # inclusive start, stop, step

# =============================================================================
# 9. EVALUATION CONFIG (topk_precision)
# =============================================================================

TOPK_PERCENTS = [1, 10, 25, 50]
TOPK_GT_THRESHOLD = 0.5
TOPK_MODE = 'percentile'                                # or 'score' (fixed 1 - k/100 thresholds)
TOPK_MODES = ['percentile', 'score']

# =============================================================================
# 10. DATASET CONFIG (generate_dataset)
# =============================================================================

DATASET_MANIFEST_FILE = "manifest.json"
DATASET_SCENE_DIR_TEMPLATE = "scene_{index:05d}"
DATASET_WORKERS = 1

SCENE_RECORD_FILES = {
    'depth': 'depth.pfm',
    'segmentation': 'segmentation.pgm',
    'quality': 'quality.pfm',
    'reachability': 'reachability.pfm',
    'scene': 'scene.json'
}
SCENE_TIMINGS_FILE = "timings.json"
SIDECAR_SUFFIX = ".json"

# =============================================================================
# 11. VISUALIZATION CONFIG (viz)
# =============================================================================

COLORMAPS = {
    'heatmap': 'viridis',
    'depth': 'gray',
    'segmentation': 'tab20'
}
CANDIDATE_MARKER_COLOR = 'red'
MAX_DRAWN_CANDIDATES = 20

# =============================================================================
# 12. PIPELINE DEFAULTS (run_pipeline)
# =============================================================================

PIPELINE_DEFAULTS = {
    'normal_k': NORMAL_ESTIMATION_K,
    'region_grow': dict(REGION_GROW_DEFAULTS),
    'flatness_mode': QUALITY_FLATNESS_MODE,
    'variance_scale': SEAL_VARIANCE_SCALE,
    'compute_reachability': True,
    'stride': REACHABILITY_STRIDE,
    'ik_seed': IK_SEED,
    'ik_restarts': IK_RESTARTS,
    'cluster': True,
    **POLICY_DEFAULTS
}

# =============================================================================
# VERSION AND METADATA
# =============================================================================

VERSION = "1.0.0"
ANALYSIS_PIPELINE_NAME = "Suction Graspability Annotator"
