import json
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.spatial.transform import Rotation

from config import (BIN_CONFIG, CAMERA_HEIGHT_ABOVE_FLOOR, SCENE_MAX_OBJECTS, SCENE_DEFAULT_COUNT_RANGE,
                   SCENE_PLACEMENT_ATTEMPTS, SCENE_MAX_TILT_DEG, SCENE_LYING_CYLINDER_PROBABILITY,
                   SCENE_MAX_PILE_HEIGHT, INVALID_DEPTH, VERSION)
from errors import ConfigurationError, DataError
from nodes.geometry import CameraIntrinsics, CameraPose, DepthImage, SegmentationMask

logger = logging.getLogger(__name__)

SHAPE_KINDS = ('box', 'cylinder', 'sphere', 'mesh')

# Rays must start strictly in front of the camera
_RAY_EPSILON = 1e-9
# Horizontal AABB overlap below this counts as touching, not overlapping
_OVERLAP_TOLERANCE = 1e-9


# =============================================================================
# Scene types
# =============================================================================

@dataclass(frozen=True)
class ShapePrimitive:
    """Object shape in its own frame, centred on the origin.

    box: full `extents` along local x, y, z. cylinder: `radius` and `height` along local z.
    sphere: `radius`. mesh: `vertices` and triangle `faces` (closed, counter-clockwise seen from outside).
    """
    kind: str
    extents: Optional[tuple] = None
    radius: Optional[float] = None
    height: Optional[float] = None
    vertices: Optional[np.ndarray] = None
    faces: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ConfigurationError(f"unknown shape kind '{self.kind}', expected one of {SHAPE_KINDS}")
        if self.kind == 'box':
            if self.extents is None or len(self.extents) != 3 or min(self.extents) <= 0:
                raise ConfigurationError(f"box needs three positive extents, got {self.extents}")
        elif self.kind == 'cylinder':
            if not (self.radius and self.radius > 0 and self.height and self.height > 0):
                raise ConfigurationError(f"cylinder needs positive radius and height, got r={self.radius}, h={self.height}")
        elif self.kind == 'sphere':
            if not (self.radius and self.radius > 0):
                raise ConfigurationError(f"sphere needs a positive radius, got {self.radius}")
        else:
            _validate_mesh(np.asarray(self.vertices, dtype=np.float64), np.asarray(self.faces, dtype=np.int64))

    @classmethod
    def box(cls, x, y, z):
        return cls(kind='box', extents=(float(x), float(y), float(z)))

    @classmethod
    def cylinder(cls, radius, height):
        return cls(kind='cylinder', radius=float(radius), height=float(height))

    @classmethod
    def sphere(cls, radius):
        return cls(kind='sphere', radius=float(radius))

    @classmethod
    def mesh(cls, vertices, faces):
        return cls(kind='mesh', vertices=np.asarray(vertices, dtype=np.float64),
                   faces=np.asarray(faces, dtype=np.int64))

    @classmethod
    def from_dict(cls, data):
        kind = data.get('kind')
        if kind == 'box':
            return cls.box(*data['extents'])
        if kind == 'cylinder':
            return cls.cylinder(data['radius'], data['height'])
        if kind == 'sphere':
            return cls.sphere(data['radius'])
        if kind == 'mesh':
            return cls.mesh(data['vertices'], data['faces'])
        raise ConfigurationError(f"unknown shape kind '{kind}'")

    def to_dict(self):
        if self.kind == 'box':
            return {'kind': 'box', 'extents': list(self.extents)}
        if self.kind == 'cylinder':
            return {'kind': 'cylinder', 'radius': self.radius, 'height': self.height}
        if self.kind == 'sphere':
            return {'kind': 'sphere', 'radius': self.radius}
        return {'kind': 'mesh', 'vertices': np.asarray(self.vertices).tolist(),
                'faces': np.asarray(self.faces).tolist()}

    def triangles(self):
        return np.asarray(self.vertices)[np.asarray(self.faces)]

    def rotated_bounds(self, rotation):
        """Min and max corner of the axis-aligned box around the shape after `rotation`."""
        if self.kind == 'box':
            half = np.abs(rotation) @ (np.asarray(self.extents) / 2.0)
            return -half, half
        if self.kind == 'sphere':
            half = np.full(3, self.radius)
            return -half, half
        if self.kind == 'cylinder':
            axis = rotation[:, 2]
            half = self.radius * np.sqrt(np.clip(1.0 - axis ** 2, 0.0, None)) + self.height / 2.0 * np.abs(axis)
            return -half, half
        rotated = np.asarray(self.vertices) @ rotation.T
        return rotated.min(axis=0), rotated.max(axis=0)


@dataclass
class SceneObject:
    shape: ShapePrimitive
    rotation: np.ndarray
    translation: np.ndarray
    label: int

    def aabb(self):
        lo, hi = self.shape.rotated_bounds(self.rotation)
        return self.translation + lo, self.translation + hi

    def to_dict(self):
        return {'label': self.label, 'shape': self.shape.to_dict(),
                'rotation': self.rotation.tolist(), 'translation': self.translation.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(shape=ShapePrimitive.from_dict(data['shape']),
                   rotation=np.asarray(data['rotation'], dtype=np.float64).reshape(3, 3),
                   translation=np.asarray(data['translation'], dtype=np.float64).reshape(3),
                   label=int(data['label']))


@dataclass(frozen=True)
class BinSpec:
    """Open-top bin; the interior floor sits at `floor_z` in the robot base frame."""
    center: tuple
    floor_z: float
    interior: tuple
    wall_height: float
    wall_thickness: float
    floor_thickness: float

    @classmethod
    def from_dict(cls, data):
        spec = cls(center=tuple(float(v) for v in data['center']), floor_z=float(data['floor_z']),
                   interior=tuple(float(v) for v in data['interior']),
                   wall_height=float(data['wall_height']), wall_thickness=float(data['wall_thickness']),
                   floor_thickness=float(data['floor_thickness']))
        if min(spec.interior) <= 0 or spec.wall_height <= 0 or spec.wall_thickness <= 0 or spec.floor_thickness <= 0:
            raise ConfigurationError(f"bin dimensions must be positive: {data}")
        return spec

    @classmethod
    def default(cls):
        return cls.from_dict(BIN_CONFIG)

    def to_dict(self):
        return {'center': list(self.center), 'floor_z': self.floor_z, 'interior': list(self.interior),
                'wall_height': self.wall_height, 'wall_thickness': self.wall_thickness,
                'floor_thickness': self.floor_thickness}

    def interior_bounds(self):
        cx, cy = self.center
        hx, hy = self.interior[0] / 2.0, self.interior[1] / 2.0
        return np.array([cx - hx, cy - hy]), np.array([cx + hx, cy + hy])

    def boxes(self):
        """Floor slab and four walls as (centre, half extents) pairs, axis aligned."""
        cx, cy = self.center
        ix, iy = self.interior[0] / 2.0, self.interior[1] / 2.0
        t, h, f = self.wall_thickness, self.wall_height, self.floor_thickness
        wall_z = self.floor_z + h / 2.0
        return [
            (np.array([cx, cy, self.floor_z - f / 2.0]), np.array([ix + t, iy + t, f / 2.0])),
            (np.array([cx - ix - t / 2.0, cy, wall_z]), np.array([t / 2.0, iy + t, h / 2.0])),
            (np.array([cx + ix + t / 2.0, cy, wall_z]), np.array([t / 2.0, iy + t, h / 2.0])),
            (np.array([cx, cy - iy - t / 2.0, wall_z]), np.array([ix, t / 2.0, h / 2.0])),
            (np.array([cx, cy + iy + t / 2.0, wall_z]), np.array([ix, t / 2.0, h / 2.0])),
        ]

    def camera_pose(self, height=CAMERA_HEIGHT_ABOVE_FLOOR):
        return CameraPose.looking_down([self.center[0], self.center[1], self.floor_z], height)


@dataclass
class SceneDescription:
    bin: BinSpec
    objects: List[SceneObject]
    seed: Optional[int]
    intrinsics: CameraIntrinsics
    camera_pose: CameraPose
    warnings: List[str] = field(default_factory=list)

    def to_dict(self):
        return {
            'version': VERSION,
            'seed': self.seed,
            'bin': self.bin.to_dict(),
            'camera': {'intrinsics': self.intrinsics.to_dict(), 'pose': self.camera_pose.to_dict()},
            'objects': [obj.to_dict() for obj in self.objects],
            'warnings': list(self.warnings)
        }

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(bin=BinSpec.from_dict(data['bin']),
                       objects=[SceneObject.from_dict(obj) for obj in data['objects']],
                       seed=data.get('seed'),
                       intrinsics=CameraIntrinsics.from_dict(data['camera']['intrinsics']),
                       camera_pose=CameraPose.from_dict(data['camera']['pose']),
                       warnings=list(data.get('warnings', [])))
        except KeyError as exc:
            raise DataError(f"scene JSON is missing field {exc}") from exc

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def load_object_pool(path):
    """Read a JSON list of shape dicts."""
    with open(path, 'r') as f:
        entries = json.load(f)
    if not isinstance(entries, list):
        raise ConfigurationError(f"object pool {path} must be a JSON list of shapes")
    return [ShapePrimitive.from_dict(entry) for entry in entries]


# =============================================================================
# Scene sampling (geometric settling)
# =============================================================================

def sample_scene(seed, object_pool, count_range=SCENE_DEFAULT_COUNT_RANGE, bin_spec=None, intrinsics=None,
                 max_tilt_deg=SCENE_MAX_TILT_DEG):
    """Drop a random number of pool shapes into the bin, one after another.

    Each object falls vertically onto the floor or the highest object under its footprint.
    Objects that cannot be placed within the attempt budget are skipped with a warning.
    """
    if not object_pool:
        raise ConfigurationError("object pool is empty")
    lo_count, hi_count = int(count_range[0]), int(count_range[1])
    if not (1 <= lo_count <= hi_count <= SCENE_MAX_OBJECTS):
        raise ConfigurationError(f"object count range must lie within [1, {SCENE_MAX_OBJECTS}], got {count_range}")

    bin_spec = bin_spec or BinSpec.default()
    intrinsics = intrinsics or CameraIntrinsics.default()
    pool = [shape if isinstance(shape, ShapePrimitive) else ShapePrimitive.from_dict(shape) for shape in object_pool]

    rng = np.random.default_rng(seed)
    n_objects = int(rng.integers(lo_count, hi_count + 1))
    placed = []
    warnings = []

    for index in range(n_objects):
        shape = pool[int(rng.integers(len(pool)))]
        obj = _place_object(shape, placed, bin_spec, rng, max_tilt_deg, label=len(placed) + 1)
        if obj is None:
            message = f"object {index} ({shape.kind}) could not be placed after {SCENE_PLACEMENT_ATTEMPTS} attempts"
            logger.warning(message)
            warnings.append(message)
            continue
        placed.append(obj)

    logger.debug("Sampled scene seed=%s with %d/%d objects", seed, len(placed), n_objects)
    return SceneDescription(bin=bin_spec, objects=placed, seed=seed, intrinsics=intrinsics,
                            camera_pose=bin_spec.camera_pose(), warnings=warnings)


def _place_object(shape, placed, bin_spec, rng, max_tilt_deg, label):
    interior_lo, interior_hi = bin_spec.interior_bounds()

    for _ in range(SCENE_PLACEMENT_ATTEMPTS):
        rotation = _sample_rotation(shape, rng, max_tilt_deg)
        lo, hi = shape.rotated_bounds(rotation)

        x_range = (interior_lo[0] - lo[0], interior_hi[0] - hi[0])
        y_range = (interior_lo[1] - lo[1], interior_hi[1] - hi[1])
        if x_range[0] > x_range[1] or y_range[0] > y_range[1]:
            # Too large for the bin in this orientation
            continue
        xy = np.array([rng.uniform(*x_range), rng.uniform(*y_range)])

        support_z, supporter = bin_spec.floor_z, None
        for other in placed:
            other_lo, other_hi = other.aabb()
            if _overlaps_horizontally(xy + lo[:2], xy + hi[:2], other_lo[:2], other_hi[:2]) and other_hi[2] > support_z:
                support_z, supporter = other_hi[2], other

        if supporter is not None:
            # Only rest on an object when the centre of mass lies over it
            other_lo, other_hi = supporter.aabb()
            if np.any(xy < other_lo[:2]) or np.any(xy > other_hi[:2]):
                continue

        z = support_z - lo[2]
        if z + hi[2] - bin_spec.floor_z > SCENE_MAX_PILE_HEIGHT:
            continue

        return SceneObject(shape=shape, rotation=rotation, translation=np.array([xy[0], xy[1], z]), label=label)
    return None


def _overlaps_horizontally(lo_a, hi_a, lo_b, hi_b):
    return bool(np.all(np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b) > _OVERLAP_TOLERANCE))


def _sample_rotation(shape, rng, max_tilt_deg):
    if shape.kind == 'mesh':
        quaternion = rng.normal(size=4)
        return Rotation.from_quat(quaternion / np.linalg.norm(quaternion)).as_matrix()

    yaw = Rotation.from_rotvec([0.0, 0.0, rng.uniform(0.0, 2.0 * np.pi)])
    tilt_axis_angle = rng.uniform(0.0, 2.0 * np.pi)
    tilt_axis = np.array([np.cos(tilt_axis_angle), np.sin(tilt_axis_angle), 0.0])
    tilt = Rotation.from_rotvec(tilt_axis * np.radians(rng.uniform(0.0, max_tilt_deg)))

    base = Rotation.identity()
    if shape.kind == 'cylinder' and rng.uniform() < SCENE_LYING_CYLINDER_PROBABILITY:
        base = Rotation.from_rotvec([np.pi / 2.0, 0.0, 0.0])
    return (tilt * yaw * base).as_matrix()


# =============================================================================
# Rendering
# =============================================================================

def render(scene):
    """Ray cast the scene through every pixel centre; returns (DepthImage, SegmentationMask).

    Depth is the camera-frame z of the nearest hit. Bin and floor pixels carry label 0.
    """
    intr = scene.intrinsics
    rows, cols = np.mgrid[0:intr.height, 0:intr.width]
    rays_camera = np.stack([(cols.ravel() - intr.cx) / intr.fx,
                            (rows.ravel() - intr.cy) / intr.fy,
                            np.ones(rows.size)], axis=1)
    # Camera-frame rays have unit z, so the ray parameter equals camera depth
    directions = scene.camera_pose.directions_to_world(rays_camera)
    origin = np.asarray(scene.camera_pose.translation, dtype=np.float64)

    depth = np.full(rows.size, np.inf)
    labels = np.zeros(rows.size, dtype=np.uint16)

    def _merge(t, label):
        closer = t < depth
        depth[closer] = t[closer]
        labels[closer] = label

    _merge(_ray_plane_z(origin, directions, scene.bin.floor_z), 0)
    for centre, half in scene.bin.boxes()[1:]:
        _merge(_ray_box(origin, directions, centre, np.eye(3), half), 0)

    for obj in scene.objects:
        _merge(_ray_object(origin, directions, obj), obj.label)

    missed = ~np.isfinite(depth)
    depth[missed] = INVALID_DEPTH
    labels[missed] = 0

    shape = (intr.height, intr.width)
    return (DepthImage(data=depth.reshape(shape), intrinsics=intr),
            SegmentationMask(labels=labels.reshape(shape)))


def _ray_object(origin, directions, obj):
    if obj.shape.kind == 'box':
        return _ray_box(origin, directions, obj.translation, obj.rotation, np.asarray(obj.shape.extents) / 2.0)
    if obj.shape.kind == 'sphere':
        return _ray_sphere(origin, directions, obj.translation, obj.shape.radius)
    if obj.shape.kind == 'cylinder':
        return _ray_cylinder(origin, directions, obj.translation, obj.rotation, obj.shape.radius, obj.shape.height)
    triangles = obj.shape.triangles() @ obj.rotation.T + obj.translation
    return _ray_triangles(origin, directions, triangles)


def _ray_plane_z(origin, directions, z):
    t = np.full(len(directions), np.inf)
    down = directions[:, 2] < 0
    t[down] = (z - origin[2]) / directions[down, 2]
    t[t <= _RAY_EPSILON] = np.inf
    return t


def _ray_box(origin, directions, centre, rotation, half):
    """Slab test in the box frame; returns the entry distance or inf."""
    o = rotation.T @ (origin - centre)
    d = directions @ rotation

    with np.errstate(divide='ignore', invalid='ignore'):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    parallel = d == 0
    inside_slab = np.abs(o) <= half
    t_lo = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
    t_hi = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))

    t_near = t_lo.max(axis=1)
    t_far = t_hi.min(axis=1)
    hit = (t_near <= t_far) & (t_near > _RAY_EPSILON)
    return np.where(hit, t_near, np.inf)


def _ray_sphere(origin, directions, centre, radius):
    oc = origin - centre
    a = np.einsum('ij,ij->i', directions, directions)
    b = directions @ oc
    c = oc @ oc - radius ** 2
    disc = b ** 2 - a * c
    t = np.full(len(directions), np.inf)
    hit = disc >= 0
    t_hit = (-b[hit] - np.sqrt(disc[hit])) / a[hit]
    t[hit] = np.where(t_hit > _RAY_EPSILON, t_hit, np.inf)
    return t


def _ray_cylinder(origin, directions, centre, rotation, radius, height):
    """Capped cylinder along its local z axis."""
    o = rotation.T @ (origin - centre)
    d = directions @ rotation
    half_h = height / 2.0
    best = np.full(len(d), np.inf)

    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = o[0] * d[:, 0] + o[1] * d[:, 1]
    c = o[0] ** 2 + o[1] ** 2 - radius ** 2
    disc = b ** 2 - a * c
    lateral = (a > 0) & (disc >= 0)
    t_side = np.full(len(d), np.inf)
    t_side[lateral] = (-b[lateral] - np.sqrt(disc[lateral])) / a[lateral]
    # inf * 0 on missed rays yields NaN, which every comparison below rejects
    with np.errstate(invalid='ignore'):
        z_side = o[2] + t_side * d[:, 2]
        side_ok = lateral & (t_side > _RAY_EPSILON) & (np.abs(z_side) <= half_h)
        best[side_ok] = t_side[side_ok]

        moving = d[:, 2] != 0
        for cap_z in (-half_h, half_h):
            t_cap = np.full(len(d), np.inf)
            t_cap[moving] = (cap_z - o[2]) / d[moving, 2]
            x = o[0] + t_cap * d[:, 0]
            y = o[1] + t_cap * d[:, 1]
            cap_ok = moving & (t_cap > _RAY_EPSILON) & (x ** 2 + y ** 2 <= radius ** 2)
            best[cap_ok] = np.minimum(best[cap_ok], t_cap[cap_ok])
    return best


def _ray_triangles(origin, directions, triangles, chunk=16):
    """Moller-Trumbore against every triangle, nearest positive hit per ray."""
    best = np.full(len(directions), np.inf)
    for start in range(0, len(triangles), chunk):
        tri = triangles[start:start + chunk]
        v0 = tri[:, 0]
        e1 = tri[:, 1] - v0
        e2 = tri[:, 2] - v0
        pvec = np.cross(directions[:, None, :], e2[None, :, :])
        det = np.einsum('rtk,tk->rt', pvec, e1)
        with np.errstate(divide='ignore', invalid='ignore'):
            inv_det = 1.0 / det
            tvec = origin[None, :] - v0
            u = np.einsum('rtk,tk->rt', pvec, tvec) * inv_det
            qvec = np.cross(tvec, e1)
            v = np.einsum('rk,tk->rt', directions, qvec) * inv_det
            t = np.einsum('tk,tk->t', e2, qvec)[None, :] * inv_det
        hit = (np.abs(det) > 1e-15) & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > _RAY_EPSILON)
        t = np.where(hit, t, np.inf)
        best = np.minimum(best, t.min(axis=1))
    return best


def _validate_mesh(vertices, faces):
    if vertices.ndim != 2 or vertices.shape[1] != 3 or faces.ndim != 2 or faces.shape[1] != 3 or len(faces) < 4:
        raise ConfigurationError("mesh needs an (N, 3) vertex array and at least four (M, 3) faces")
    if faces.min() < 0 or faces.max() >= len(vertices):
        raise ConfigurationError("mesh face indices out of range")

    directed = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges = {tuple(edge) for edge in directed.tolist()}
    if len(edges) != len(directed) or any((b, a) not in edges for a, b in edges):
        raise ConfigurationError("mesh must be closed with consistently oriented faces")

    tri = vertices[faces]
    signed_volume = np.einsum('ij,ij->i', tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0
    if signed_volume <= 0:
        raise ConfigurationError("mesh faces must be oriented outward")


# =============================================================================
# Sensor noise
# =============================================================================

def add_depth_noise(depth, sigma, seed):
    """Additive Gaussian noise on valid pixels; sigma 0 returns an identical copy."""
    if sigma < 0:
        raise DataError(f"noise sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return DepthImage(data=depth.data.copy(), intrinsics=depth.intrinsics)

    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=depth.data.shape)
    valid = depth.valid_mask()
    noisy = np.where(valid, depth.data + noise, INVALID_DEPTH)
    # A pixel pushed behind the sensor becomes invalid
    noisy[noisy < 0] = INVALID_DEPTH
    return DepthImage(data=noisy, intrinsics=depth.intrinsics)
