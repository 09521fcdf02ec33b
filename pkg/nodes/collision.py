import json
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from config import COLLISION_SAMPLE_SPACING
from errors import ConfigurationError
from nodes.kinematics import link_frames


# =============================================================================
# World primitives (signed distance, 1-Lipschitz)
# =============================================================================

@dataclass(frozen=True)
class BoxPrimitive:
    name: str
    center: np.ndarray
    half_extents: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def signed_distance(self, points):
        local = (points - self.center) @ self.rotation
        excess = np.abs(local) - self.half_extents
        outside = np.linalg.norm(np.maximum(excess, 0.0), axis=-1)
        inside = np.minimum(excess.max(axis=-1), 0.0)
        return outside + inside

    def to_dict(self):
        return {'kind': 'box', 'name': self.name, 'center': self.center.tolist(),
                'half_extents': self.half_extents.tolist(), 'rotation': self.rotation.tolist()}


@dataclass(frozen=True)
class SpherePrimitive:
    name: str
    center: np.ndarray
    radius: float

    def signed_distance(self, points):
        return np.linalg.norm(points - self.center, axis=-1) - self.radius

    def to_dict(self):
        return {'kind': 'sphere', 'name': self.name, 'center': self.center.tolist(), 'radius': self.radius}


@dataclass(frozen=True)
class CylinderPrimitive:
    """Capped cylinder along the local z axis of `rotation`."""
    name: str
    center: np.ndarray
    radius: float
    height: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def signed_distance(self, points):
        local = (points - self.center) @ self.rotation
        radial = np.linalg.norm(local[..., :2], axis=-1) - self.radius
        axial = np.abs(local[..., 2]) - self.height / 2.0
        outside = np.hypot(np.maximum(radial, 0.0), np.maximum(axial, 0.0))
        inside = np.minimum(np.maximum(radial, axial), 0.0)
        return outside + inside

    def to_dict(self):
        return {'kind': 'cylinder', 'name': self.name, 'center': self.center.tolist(), 'radius': self.radius,
                'height': self.height, 'rotation': self.rotation.tolist()}


def primitive_from_dict(data):
    kind = data.get('kind')
    name = data.get('name', kind)
    center = np.asarray(data['center'], dtype=np.float64)
    rotation = np.asarray(data.get('rotation', np.eye(3).tolist()), dtype=np.float64)
    if kind == 'box':
        half = np.asarray(data['half_extents'], dtype=np.float64)
        if np.any(half <= 0):
            raise ConfigurationError(f"box primitive '{name}' needs positive half extents")
        return BoxPrimitive(name=name, center=center, half_extents=half, rotation=rotation)
    if kind == 'aabb':
        lo, hi = np.asarray(data['min'], dtype=np.float64), np.asarray(data['max'], dtype=np.float64)
        return BoxPrimitive(name=name, center=(lo + hi) / 2.0, half_extents=(hi - lo) / 2.0)
    if kind == 'sphere':
        return SpherePrimitive(name=name, center=center, radius=float(data['radius']))
    if kind == 'cylinder':
        return CylinderPrimitive(name=name, center=center, radius=float(data['radius']),
                                 height=float(data['height']), rotation=rotation)
    raise ConfigurationError(f"unknown collision primitive kind '{kind}'")


# =============================================================================
# Collision world
# =============================================================================

@dataclass
class CollisionResult:
    colliding: bool
    pair: Optional[Tuple[str, str]] = None

    @property
    def free(self):
        return not self.colliding


@dataclass
class CollisionWorld:
    """Static obstacles in the robot base frame."""
    primitives: List = field(default_factory=list)
    sample_spacing: float = COLLISION_SAMPLE_SPACING

    @classmethod
    def empty(cls):
        return cls(primitives=[])

    @classmethod
    def from_dict(cls, data):
        return cls(primitives=[primitive_from_dict(entry) for entry in data.get('primitives', [])])

    @classmethod
    def load(cls, path):
        with open(path, 'r') as f:
            return cls.from_dict(json.load(f))

    @classmethod
    def from_bin(cls, bin_spec):
        names = ['floor', 'wall_x_min', 'wall_x_max', 'wall_y_min', 'wall_y_max']
        return cls(primitives=[BoxPrimitive(name=name, center=centre, half_extents=half)
                               for name, (centre, half) in zip(names, bin_spec.boxes())])

    @classmethod
    def from_scene(cls, scene, extra=None):
        """Bin boxes plus every scene object; meshes enter as their bounding boxes."""
        world = cls.from_bin(scene.bin)
        for obj in scene.objects:
            world.primitives.append(_object_primitive(obj))
        if extra is not None:
            world.primitives.extend(extra.primitives)
        return world

    def with_primitives(self, primitives):
        return CollisionWorld(primitives=list(self.primitives) + list(primitives), sample_spacing=self.sample_spacing)

    def to_dict(self):
        return {'primitives': [primitive.to_dict() for primitive in self.primitives]}

    def collision_mask(self, model, joints):
        """Per-configuration collision flags for joints of shape (B, 6)."""
        return self.check_batch(model, np.atleast_2d(joints))[0]

    def check_batch(self, model, joints):
        """Collision flags and the first colliding pair per configuration."""
        frames = link_frames(model, joints)
        colliding = np.zeros(len(joints), dtype=bool)
        pairs = [None] * len(joints)

        segments = {}
        for capsule in model.link_capsules:
            frame = frames[:, capsule.link]
            a = frame[:, :3, :3] @ capsule.p0 + frame[:, :3, 3]
            b = frame[:, :3, :3] @ capsule.p1 + frame[:, :3, 3]
            segments[capsule.name] = (a, b, capsule.radius)

        for capsule in model.link_capsules:
            a, b, radius = segments[capsule.name]
            for primitive in self.primitives:
                hit = _capsule_hits(primitive, a, b, radius, self.sample_spacing, skip=colliding)
                for index in np.flatnonzero(hit & ~colliding):
                    pairs[index] = (capsule.name, primitive.name)
                colliding |= hit

        for name_a, name_b in model.self_collision_pairs:
            a0, a1, ra = segments[name_a]
            b0, b1, rb = segments[name_b]
            hit = segment_distance(a0, a1, b0, b1) <= ra + rb
            for index in np.flatnonzero(hit & ~colliding):
                pairs[index] = (name_a, name_b)
            colliding |= hit

        return colliding, pairs


def _object_primitive(obj):
    name = f"object_{obj.label}"
    shape = obj.shape
    if shape.kind == 'box':
        return BoxPrimitive(name=name, center=obj.translation, half_extents=np.asarray(shape.extents) / 2.0,
                            rotation=obj.rotation)
    if shape.kind == 'sphere':
        return SpherePrimitive(name=name, center=obj.translation, radius=shape.radius)
    if shape.kind == 'cylinder':
        return CylinderPrimitive(name=name, center=obj.translation, radius=shape.radius, height=shape.height,
                                 rotation=obj.rotation)
    lo, hi = obj.aabb()
    return BoxPrimitive(name=name, center=(lo + hi) / 2.0, half_extents=(hi - lo) / 2.0)


def _capsule_hits(primitive, a, b, radius, spacing, skip):
    """Conservative capsule test: sampled axis distance against radius plus half the sample step."""
    length = np.linalg.norm(b - a, axis=1)
    midpoint = (a + b) / 2.0
    candidate = ~skip & (primitive.signed_distance(midpoint) - length / 2.0 <= radius)
    hit = np.zeros(len(a), dtype=bool)
    idx = np.flatnonzero(candidate)
    if len(idx) == 0:
        return hit

    n_samples = int(np.ceil(length[idx].max() / spacing)) + 1
    t = np.linspace(0.0, 1.0, max(n_samples, 2))
    samples = a[idx, None, :] + t[None, :, None] * (b[idx] - a[idx])[:, None, :]
    step = length[idx] / (len(t) - 1)
    hit[idx] = primitive.signed_distance(samples).min(axis=1) <= radius + step / 2.0
    return hit


def segment_distance(p0, p1, q0, q1):
    """Closest distance between segment batches p0-p1 and q0-q1, each (B, 3)."""
    d1 = p1 - p0
    d2 = q1 - q0
    r = p0 - q0
    a = np.einsum('ij,ij->i', d1, d1)
    e = np.einsum('ij,ij->i', d2, d2)
    f = np.einsum('ij,ij->i', d2, r)
    c = np.einsum('ij,ij->i', d1, r)
    b = np.einsum('ij,ij->i', d1, d2)
    denom = a * e - b * b

    with np.errstate(divide='ignore', invalid='ignore'):
        s = np.where(denom > 1e-15, np.clip((b * f - c * e) / denom, 0.0, 1.0), 0.0)
        t = np.where(e > 1e-15, (b * s + f) / e, 0.0)
        # Re-clamp t, then recompute s for the clamped t
        s = np.where(t < 0.0, np.where(a > 1e-15, np.clip(-c / a, 0.0, 1.0), 0.0), s)
        s = np.where(t > 1.0, np.where(a > 1e-15, np.clip((b - c) / a, 0.0, 1.0), 0.0), s)
    t = np.clip(t, 0.0, 1.0)

    closest_p = p0 + s[:, None] * d1
    closest_q = q0 + t[:, None] * d2
    return np.linalg.norm(closest_p - closest_q, axis=1)


def check_collision(model, world, joints):
    """Collision query for one configuration; reports the first colliding pair."""
    colliding, pairs = world.check_batch(model, np.atleast_2d(np.asarray(joints, dtype=np.float64)))
    return CollisionResult(colliding=bool(colliding[0]), pair=pairs[0])
