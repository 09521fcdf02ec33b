import numpy as np
import pytest

from graspability_graph import load_robot
from nodes.geometry import CameraIntrinsics, PointCloud, estimate_normals, local_frame
from nodes.scene_synth import BinSpec, SceneDescription, SceneObject, ShapePrimitive
from nodes.surface_segmentation import SurfaceSegment


@pytest.fixture(scope="session")
def robot():
    return load_robot()


@pytest.fixture
def bin_spec():
    return BinSpec.default()


@pytest.fixture
def intrinsics():
    return CameraIntrinsics.default()


@pytest.fixture
def make_scene(bin_spec, intrinsics):
    """Scene builder: (shape, rotation, xy offset from the bin centre) tuples resting on the floor."""
    def build(*placements):
        objects = []
        for label, placement in enumerate(placements, start=1):
            shape, rotation, offset = (list(placement) + [None, None])[:3]
            rotation = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
            offset = np.zeros(2) if offset is None else np.asarray(offset, dtype=np.float64)
            lo, _ = shape.rotated_bounds(rotation)
            translation = np.array([bin_spec.center[0] + offset[0], bin_spec.center[1] + offset[1],
                                    bin_spec.floor_z - lo[2]])
            objects.append(SceneObject(shape=shape, rotation=rotation, translation=translation, label=label))
        return SceneDescription(bin=bin_spec, objects=objects, seed=None, intrinsics=intrinsics,
                                camera_pose=bin_spec.camera_pose())
    return build


@pytest.fixture
def centered_box_scene(make_scene):
    return make_scene((ShapePrimitive.box(0.10, 0.08, 0.06),))


@pytest.fixture
def make_plane_cloud():
    """Camera-frame grid of points on a plane through (0, 0, depth) with the given normal, plus normals."""
    def build(normal=(0.0, 0.0, -1.0), half_size=0.03, spacing=0.001, depth=0.6, k=30):
        normal = np.asarray(normal, dtype=np.float64)
        normal /= np.linalg.norm(normal)
        helper = np.array([1.0, 0.0, 0.0]) if abs(normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        u = helper - (helper @ normal) * normal
        u /= np.linalg.norm(u)
        v = np.cross(normal, u)
        steps = np.arange(-half_size, half_size + spacing / 2, spacing)
        a, b = np.meshgrid(steps, steps, indexing='ij')
        points = np.array([0.0, 0.0, depth]) + a.reshape(-1, 1) * u + b.reshape(-1, 1) * v
        pixels = np.stack(np.meshgrid(np.arange(len(steps)), np.arange(len(steps)), indexing='ij'), axis=-1)
        return estimate_normals(PointCloud(points=points, pixel_index=pixels.reshape(-1, 2)), k)
    return build


@pytest.fixture
def make_flat_patch():
    """60 x 60 points at 1 mm pitch facing the camera at 0.6 m, half a cell off the cell borders.

    Returns (segment, cloud); pixel (r, c) holds the point at x = steps[c], y = steps[r].
    """
    def build(drop=(), size=60, segment_id=3):
        steps = (np.arange(size) - (size - 1) / 2.0) * 0.001
        xs, ys = np.meshgrid(steps, steps, indexing='xy')
        rows, cols = np.mgrid[0:size, 0:size]
        keep = np.ones(size * size, dtype=bool)
        keep[list(drop)] = False
        points = np.column_stack([xs.ravel(), ys.ravel(), np.full(xs.size, 0.6)])[keep]
        pixels = np.column_stack([rows.ravel(), cols.ravel()])[keep]
        normal = np.array([0.0, 0.0, -1.0])
        cloud = PointCloud(points=points, normals=np.tile(normal, (len(points), 1)), pixel_index=pixels,
                           curvature=np.zeros(len(points)), normal_valid=np.ones(len(points), dtype=bool))
        segment = SurfaceSegment(point_indices=np.arange(len(points)), centroid=np.array([0.0, 0.0, 0.6]),
                                 dominant_normal=normal, local_frame=local_frame(normal), segment_id=segment_id)
        return segment, cloud
    return build
