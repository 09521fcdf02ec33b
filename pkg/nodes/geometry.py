import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from config import (INVALID_DEPTH, NORMAL_ESTIMATION_K, NORMAL_DEGENERATE_TRACE,
                   PLANE_FIT_RANK_TOLERANCE, CAMERA_INTRINSICS)
from errors import DataError, DegenerateFitError


# =============================================================================
# Raster and point types
# =============================================================================

@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DataError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise DataError(f"raster dimensions must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DataError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} raster")

    @classmethod
    def from_dict(cls, data):
        return cls(fx=float(data['fx']), fy=float(data['fy']), cx=float(data['cx']), cy=float(data['cy']),
                   width=int(data['width']), height=int(data['height']))

    @classmethod
    def default(cls):
        return cls.from_dict(CAMERA_INTRINSICS)

    def to_dict(self):
        return {'fx': self.fx, 'fy': self.fy, 'cx': self.cx, 'cy': self.cy,
                'width': self.width, 'height': self.height}

    @property
    def shape(self):
        return (self.height, self.width)


@dataclass(frozen=True)
class CameraPose:
    """Camera-to-world rigid transform. The optical axis is camera +z."""
    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def looking_down(cls, target, height):
        """Camera `height` metres above `target`, optical axis along world -z."""
        rotation = np.array([[1.0, 0.0, 0.0],
                             [0.0, -1.0, 0.0],
                             [0.0, 0.0, -1.0]])
        target = np.asarray(target, dtype=np.float64)
        return cls(rotation=rotation, translation=target + np.array([0.0, 0.0, height]))

    @classmethod
    def identity(cls):
        return cls(rotation=np.eye(3), translation=np.zeros(3))

    @classmethod
    def from_dict(cls, data):
        return cls(rotation=np.asarray(data['rotation'], dtype=np.float64).reshape(3, 3),
                   translation=np.asarray(data['translation'], dtype=np.float64).reshape(3))

    def to_dict(self):
        return {'rotation': self.rotation.tolist(), 'translation': self.translation.tolist()}

    def to_world(self, points):
        return np.asarray(points) @ self.rotation.T + self.translation

    def directions_to_world(self, vectors):
        return np.asarray(vectors) @ self.rotation.T

    def to_camera(self, points):
        return (np.asarray(points) - self.translation) @ self.rotation


@dataclass
class DepthImage:
    """Per-pixel range in metres along the optical axis; 0.0 marks invalid pixels."""
    data: np.ndarray
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != self.intrinsics.shape:
            raise DataError(f"depth raster {self.data.shape} does not match intrinsics {self.intrinsics.shape}")
        if not np.all(np.isfinite(self.data)) or np.any(self.data < 0):
            raise DataError("depth values must be finite and non-negative (0.0 marks invalid pixels)")

    @property
    def width(self):
        return self.intrinsics.width

    @property
    def height(self):
        return self.intrinsics.height

    def valid_mask(self):
        return self.data != INVALID_DEPTH


@dataclass
class SegmentationMask:
    """Per-pixel object ids; 0 is background and bin."""
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise DataError(f"segmentation must be a 2D raster, got shape {self.labels.shape}")
        if np.any(self.labels < 0):
            raise DataError("segmentation labels must be non-negative")

    @property
    def width(self):
        return self.labels.shape[1]

    @property
    def height(self):
        return self.labels.shape[0]

    def object_labels(self):
        """Sorted object ids present in the raster (background excluded)."""
        labels = np.unique(self.labels)
        return [int(label) for label in labels if label != 0]


@dataclass
class PointCloud:
    """3D points in the camera frame with optional normals and source pixels."""
    points: np.ndarray
    normals: Optional[np.ndarray] = None
    pixel_index: Optional[np.ndarray] = None
    curvature: Optional[np.ndarray] = None
    normal_valid: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise DataError(f"{len(self.normals)} normals for {len(self.points)} points")
        if self.pixel_index is not None:
            self.pixel_index = np.asarray(self.pixel_index, dtype=np.int64).reshape(-1, 2)

    def __len__(self):
        return len(self.points)

    @property
    def has_normals(self):
        return self.normals is not None

    def valid_normals(self):
        if self.normals is None:
            return np.zeros(len(self), dtype=bool)
        if self.normal_valid is not None:
            return self.normal_valid
        return np.all(np.isfinite(self.normals), axis=1)


@dataclass(frozen=True)
class PlaneFit:
    """Plane normal . x = offset, with the summed point-to-plane distance as residual."""
    normal: np.ndarray
    offset: float
    residual: float

    def signed_distance(self, points):
        return np.asarray(points) @ self.normal - self.offset


# =============================================================================
# Operations
# =============================================================================

def project(points, intrinsics):
    """Pinhole projection of camera-frame points to (u, v) pixel coordinates."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    u = points[:, 0] * intrinsics.fx / points[:, 2] + intrinsics.cx
    v = points[:, 1] * intrinsics.fy / points[:, 2] + intrinsics.cy
    return np.stack([u, v], axis=1)


def backproject(depth, mask=None, label=None):
    """Back-project valid (and label-matching) pixels into a camera-frame point cloud."""
    valid = depth.valid_mask()

    if mask is not None:
        if mask.labels.shape != depth.data.shape:
            raise DataError(f"segmentation {mask.labels.shape} does not match depth {depth.data.shape}")
        if label is not None:
            valid &= mask.labels == label
    elif label is not None:
        raise DataError("a label filter needs a segmentation mask")

    rows, cols = np.nonzero(valid)
    d = depth.data[rows, cols]
    intr = depth.intrinsics
    x = (cols - intr.cx) * d / intr.fx
    y = (rows - intr.cy) * d / intr.fy

    return PointCloud(points=np.stack([x, y, d], axis=1),
                      pixel_index=np.stack([rows, cols], axis=1))


def estimate_normals(cloud, k=NORMAL_ESTIMATION_K):
    """PCA normals over k nearest neighbours, oriented toward the camera origin.

    Also fills per-point curvature (smallest eigenvalue over the eigenvalue sum).
    Points whose neighbourhood is coincident get NaN normals and normal_valid False.
    """
    if k < 3:
        raise DataError(f"neighbour count must be at least 3, got {k}")
    n_points = len(cloud)
    if n_points < k + 1:
        raise DataError(f"too few points for normal estimation: {n_points} points, k={k}")

    points = cloud.points
    tree = cKDTree(points)
    _, neighbours = tree.query(points, k=k + 1)

    patches = points[neighbours]
    centered = patches - patches.mean(axis=1, keepdims=True)
    covariance = np.einsum('nki,nkj->nij', centered, centered) / (k + 1)
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)

    normals = eigenvectors[:, :, 0]
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)

    # Face the sensor: n . p < 0
    facing_away = np.einsum('ij,ij->i', normals, points) > 0
    normals[facing_away] *= -1.0

    trace = eigenvalues.sum(axis=1)
    valid = trace > NORMAL_DEGENERATE_TRACE
    curvature = np.full(n_points, np.nan)
    curvature[valid] = np.clip(eigenvalues[valid, 0], 0.0, None) / trace[valid]
    normals[~valid] = np.nan

    return PointCloud(points=points, normals=normals, pixel_index=cloud.pixel_index,
                      curvature=curvature, normal_valid=valid)


def fit_plane(points):
    """Total least squares plane; residual is the sum of point-to-plane distances."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) < 3:
        raise DegenerateFitError(f"plane fit needs at least 3 points, got {len(points)}")

    centroid = points.mean(axis=0)
    centered = points - centroid
    eigenvalues, eigenvectors = np.linalg.eigh(centered.T @ centered)

    if eigenvalues[2] <= 0 or eigenvalues[1] <= PLANE_FIT_RANK_TOLERANCE * eigenvalues[2]:
        raise DegenerateFitError("plane fit on collinear or coincident points")

    normal = eigenvectors[:, 0]
    normal = normal / np.linalg.norm(normal)
    normal = _orient_toward_origin(normal, centroid)

    residual = float(np.abs(centered @ normal).sum())
    return PlaneFit(normal=normal, offset=float(normal @ centroid), residual=residual)


def local_frame(normal):
    """Rotation whose rows are (x, y, z) of a frame with z = normal, so R @ normal = +z.

    x is the projection of +x onto the plane (of +y when the normal is within ~25 deg of x).
    """
    z = np.asarray(normal, dtype=np.float64)
    z = z / np.linalg.norm(z)
    helper = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = helper - (helper @ z) * z
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])


def _orient_toward_origin(normal, reference):
    if normal @ reference > 0:
        return -normal
    if normal @ reference == 0:
        # Deterministic sign when the plane passes through the origin
        return normal if normal[np.argmax(np.abs(normal))] > 0 else -normal
    return normal


# =============================================================================
# Pipeline node
# =============================================================================

def backproject_scene(state):
    """Build per-object point clouds with normals and the world-frame geometry rasters."""
    reporter = state.stage_reporter()

    # Progress tracking
    state.current_step += 1
    state.add_log(f"[{state.current_step}/{state.total_steps}] BACKPROJECT: Building object point clouds...")
    started = time.perf_counter()

    if state.depth is None:
        state.fail("backproject", DataError("no depth image provided"))
        return state

    try:
        segmentation = state.segmentation
        if segmentation is None:
            # Without a mask the whole valid raster is treated as one object
            segmentation = SegmentationMask(labels=state.depth.valid_mask().astype(np.uint16))
            reporter.detail("No segmentation mask given, using all valid pixels as object 1")
        elif segmentation.labels.shape != state.depth.data.shape:
            raise DataError(f"segmentation {segmentation.labels.shape} does not match depth {state.depth.data.shape}")

        k = state.config['normal_k']
        height, width = state.depth.data.shape
        point_map = np.full((height, width, 3), np.nan)
        normal_map = np.full((height, width, 3), np.nan)
        object_clouds = {}

        for label in segmentation.object_labels():
            cloud = backproject(state.depth, segmentation, label)
            if len(cloud) < k + 1:
                reporter.detail(f"Object {label}: {len(cloud)} points, too few for normals - skipped")
                continue
            cloud = estimate_normals(cloud, k)
            object_clouds[label] = cloud

            rows, cols = cloud.pixel_index[:, 0], cloud.pixel_index[:, 1]
            point_map[rows, cols] = state.camera_pose.to_world(cloud.points)
            normal_map[rows, cols] = state.camera_pose.directions_to_world(cloud.normals)
            reporter.detail(f"Object {label}: {len(cloud)} points", flush=True)

        state.object_clouds = object_clouds
        state.point_map = point_map
        state.normal_map = normal_map
    except Exception as exc:
        state.fail("backproject", exc)
        return state

    state.record_timing("backproject", time.perf_counter() - started)
    total_points = sum(len(cloud) for cloud in object_clouds.values())
    state.add_log(f"✓ [{state.current_step}/{state.total_steps}] BACKPROJECT: {len(object_clouds)} objects, {total_points} points")
    return state
