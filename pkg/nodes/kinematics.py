import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from config import (IK_DAMPING, IK_MAX_ITERATIONS, IK_RESTARTS, IK_SEED, IK_POSITION_TOLERANCE,
                   IK_ORIENTATION_TOLERANCE, IK_MAX_STEP)
from errors import ConfigurationError, DataError

logger = logging.getLogger(__name__)

N_JOINTS = 6


# =============================================================================
# Robot description
# =============================================================================

@dataclass(frozen=True)
class Capsule:
    """Segment p0-p1 swept by `radius`, fixed in frame `link` (0 = base, 6 = flange)."""
    name: str
    link: int
    p0: np.ndarray
    p1: np.ndarray
    radius: float

    @classmethod
    def from_dict(cls, data):
        capsule = cls(name=data['name'], link=int(data['link']), p0=np.asarray(data['p0'], dtype=np.float64),
                      p1=np.asarray(data['p1'], dtype=np.float64), radius=float(data['radius']))
        if capsule.radius <= 0 or not (0 <= capsule.link <= N_JOINTS):
            raise ConfigurationError(f"capsule '{capsule.name}' needs a positive radius and a link in 0..6")
        return capsule

    def to_dict(self):
        return {'name': self.name, 'link': self.link, 'p0': self.p0.tolist(), 'p1': self.p1.tolist(),
                'radius': self.radius}


@dataclass
class RobotModel:
    """Six-joint serial arm in standard DH convention, with a capsule body and a suction hand."""
    name: str
    dh_rows: np.ndarray                 # (6, 4): a, alpha, d, theta_offset
    joint_limits: np.ndarray            # (6, 2)
    link_capsules: List[Capsule]
    tool_transform: np.ndarray          # flange -> active cup tip
    home_joints: np.ndarray
    self_collision_pairs: List[Tuple[str, str]] = field(default_factory=list)
    home_pose: Optional[np.ndarray] = None

    def __post_init__(self):
        self.dh_rows = np.asarray(self.dh_rows, dtype=np.float64)
        self.joint_limits = np.asarray(self.joint_limits, dtype=np.float64)
        self.tool_transform = np.asarray(self.tool_transform, dtype=np.float64)
        self.home_joints = np.asarray(self.home_joints, dtype=np.float64)
        if self.dh_rows.shape != (N_JOINTS, 4) or self.joint_limits.shape != (N_JOINTS, 2):
            raise ConfigurationError(f"robot '{self.name}' needs 6 DH rows and 6 joint limits")
        if np.any(self.joint_limits[:, 0] >= self.joint_limits[:, 1]):
            raise ConfigurationError(f"robot '{self.name}' has unordered joint limits")
        if self.home_joints.shape != (N_JOINTS,) or not within_limits(self, self.home_joints):
            raise ConfigurationError(f"robot '{self.name}' home joints must be 6 values within limits")
        names = {capsule.name for capsule in self.link_capsules}
        for a, b in self.self_collision_pairs:
            if a not in names or b not in names:
                raise ConfigurationError(f"self collision pair ({a}, {b}) names an unknown capsule")

    @classmethod
    def from_dict(cls, data):
        try:
            dh = [[row['a'], row['alpha'], row['d'], row.get('offset', 0.0)] for row in data['dh']]
            tool = np.eye(4)
            tool[:3, :3] = np.asarray(data['tool'].get('rotation', np.eye(3).tolist()), dtype=np.float64)
            tool[:3, 3] = np.asarray(data['tool']['translation'], dtype=np.float64)
            home_pose = None
            if 'home_pose' in data:
                home_pose = np.eye(4)
                home_pose[:3, :3] = np.asarray(data['home_pose']['rotation'], dtype=np.float64)
                home_pose[:3, 3] = np.asarray(data['home_pose']['position'], dtype=np.float64)
            return cls(name=data.get('name', 'robot'), dh_rows=dh, joint_limits=data['joint_limits'],
                       link_capsules=[Capsule.from_dict(c) for c in data['capsules']], tool_transform=tool,
                       home_joints=data['home_joints'],
                       self_collision_pairs=[tuple(pair) for pair in data.get('self_collision_pairs', [])],
                       home_pose=home_pose)
        except KeyError as exc:
            raise ConfigurationError(f"robot description is missing field {exc}") from exc

    @classmethod
    def load(cls, path):
        with open(path, 'r') as f:
            return cls.from_dict(json.load(f))

    @property
    def max_reach(self):
        """Upper bound on the distance from the base origin to the tool tip."""
        links = np.hypot(self.dh_rows[:, 0], self.dh_rows[:, 2]).sum()
        return float(links + np.linalg.norm(self.tool_transform[:3, 3]))

    def capsule(self, name):
        for capsule in self.link_capsules:
            if capsule.name == name:
                return capsule
        raise KeyError(name)


def within_limits(model, joints, tolerance=1e-12):
    joints = np.asarray(joints)
    return bool(np.all((joints >= model.joint_limits[:, 0] - tolerance) & (joints <= model.joint_limits[:, 1] + tolerance)))


# =============================================================================
# Forward kinematics
# =============================================================================

def dh_transform(a, alpha, d, theta):
    """Standard DH link transform Rz(theta) Tz(d) Tx(a) Rx(alpha); broadcasts over theta."""
    theta = np.asarray(theta, dtype=np.float64)
    ct, st = np.cos(theta), np.sin(theta)
    ca, sa = np.cos(alpha), np.sin(alpha)
    transform = np.zeros(theta.shape + (4, 4))
    transform[..., 0, 0] = ct
    transform[..., 0, 1] = -st * ca
    transform[..., 0, 2] = st * sa
    transform[..., 0, 3] = a * ct
    transform[..., 1, 0] = st
    transform[..., 1, 1] = ct * ca
    transform[..., 1, 2] = -ct * sa
    transform[..., 1, 3] = a * st
    transform[..., 2, 1] = sa
    transform[..., 2, 2] = ca
    transform[..., 2, 3] = d
    transform[..., 3, 3] = 1.0
    return transform


def link_frames(model, joints):
    """Base-frame transforms of frames 0..6 for joints of shape (6,) or (B, 6)."""
    joints = np.asarray(joints, dtype=np.float64)
    single = joints.ndim == 1
    joints = np.atleast_2d(joints)
    if joints.shape[1] != N_JOINTS:
        raise DataError(f"expected {N_JOINTS} joint values, got {joints.shape[1]}")

    frames = np.empty((len(joints), N_JOINTS + 1, 4, 4))
    frames[:, 0] = np.eye(4)
    for i, (a, alpha, d, offset) in enumerate(model.dh_rows):
        frames[:, i + 1] = frames[:, i] @ dh_transform(a, alpha, d, joints[:, i] + offset)
    return frames[0] if single else frames


def forward_kinematics(model, joints):
    """Tool (active cup tip) pose as a 4x4 transform, or (B, 4, 4) for a batch."""
    frames = link_frames(model, joints)
    return frames[..., N_JOINTS, :, :] @ model.tool_transform


def geometric_jacobian(model, joints):
    """6x6 Jacobian (linear rows first) of the tool point, or (B, 6, 6)."""
    frames = link_frames(model, joints)
    single = frames.ndim == 3
    frames = frames[None] if single else frames
    tool = frames[:, N_JOINTS] @ model.tool_transform
    tip = tool[:, :3, 3]

    axes = frames[:, :N_JOINTS, :3, 2]
    origins = frames[:, :N_JOINTS, :3, 3]
    jacobian = np.empty((len(frames), 6, N_JOINTS))
    jacobian[:, :3, :] = np.cross(axes, tip[:, None, :] - origins).transpose(0, 2, 1)
    jacobian[:, 3:, :] = axes.transpose(0, 2, 1)
    return jacobian[0] if single else jacobian


# =============================================================================
# Goals and inverse kinematics
# =============================================================================

@dataclass(frozen=True)
class GoalPose:
    """Cup tip at `p`, approaching along -n, rolled by `theta` about n."""
    p: np.ndarray
    n: np.ndarray
    theta: float

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64).reshape(3)
        n = np.asarray(self.n, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(p)) or not np.all(np.isfinite(n)):
            raise DataError("goal pose must be finite")
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise DataError(f"goal approach direction must be a unit vector, got norm {np.linalg.norm(n)}")
        if not (0.0 <= self.theta < 2.0 * np.pi):
            raise DataError(f"goal roll must lie in [0, 2pi), got {self.theta}")
        object.__setattr__(self, 'p', p)
        object.__setattr__(self, 'n', n)

    def rotation(self):
        return goal_rotation(self.n, self.theta)

    def to_dict(self):
        return {'p': self.p.tolist(), 'n': self.n.tolist(), 'theta': self.theta}


def _roll_reference(z):
    """Roll-zero x axis: world x projected onto the plane normal to z (world y when nearly parallel)."""
    reference = np.where(np.abs(z[..., :1]) > 0.9, np.array([0.0, 1.0, 0.0]), np.array([1.0, 0.0, 0.0]))
    x0 = reference - np.sum(reference * z, axis=-1, keepdims=True) * z
    x0 = x0 / np.linalg.norm(x0, axis=-1, keepdims=True)
    return x0, np.cross(z, x0)


def goal_rotation(n, theta):
    """Tool orientation for approach n and roll theta; broadcasts over leading axes.

    Tool z points into the surface (-n). Tool x is the roll-zero reference rotated by theta about tool z.
    """
    n = np.asarray(n, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    z = -n / np.linalg.norm(n, axis=-1, keepdims=True)
    z, theta = np.broadcast_arrays(z, theta[..., None])
    theta = theta[..., 0]
    x0, y0 = _roll_reference(z)
    x = np.cos(theta)[..., None] * x0 + np.sin(theta)[..., None] * y0
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=-1)


def goal_from_pose(position, rotation):
    """Inverse of goal_rotation: the GoalPose that reproduces a tool pose."""
    rotation = np.asarray(rotation, dtype=np.float64)
    n = -rotation[:, 2]
    x0, y0 = _roll_reference(rotation[:, 2])
    theta = float(np.arctan2(rotation[:, 0] @ y0, rotation[:, 0] @ x0)) % (2.0 * np.pi)
    # A tiny negative angle wraps to exactly 2 pi in floating point
    if theta >= 2.0 * np.pi:
        theta = 0.0
    return GoalPose(p=np.asarray(position, dtype=np.float64), n=n / np.linalg.norm(n), theta=theta)


class IkStatus(Enum):
    SOLVED = 'solved'
    UNREACHABLE = 'unreachable'
    LIMIT_VIOLATION = 'limit-violation'
    COLLISION = 'collision'


# Failure outcomes kept across attempts, best first
_STATUS_RANK = {IkStatus.SOLVED: 3, IkStatus.COLLISION: 2, IkStatus.LIMIT_VIOLATION: 1, IkStatus.UNREACHABLE: 0}
_STATUS_BY_RANK = {rank: status for status, rank in _STATUS_RANK.items()}


@dataclass
class IkResult:
    status: IkStatus
    joints: Optional[np.ndarray]
    position_error: float
    orientation_error: float

    @property
    def solved(self):
        return self.status == IkStatus.SOLVED


@dataclass
class IkBatchResult:
    rank: np.ndarray                    # _STATUS_RANK codes per goal
    joints: np.ndarray
    position_error: np.ndarray
    orientation_error: np.ndarray

    @property
    def solved(self):
        return self.rank == _STATUS_RANK[IkStatus.SOLVED]

    def __len__(self):
        return len(self.rank)

    def result(self, index):
        status = _STATUS_BY_RANK[int(self.rank[index])]
        joints = self.joints[index].copy() if status == IkStatus.SOLVED else None
        return IkResult(status=status, joints=joints, position_error=float(self.position_error[index]),
                        orientation_error=float(self.orientation_error[index]))


def pose_error(model, joints, positions, rotations):
    """Position (m) and orientation (rad) error of the tool against target poses."""
    tool = forward_kinematics(model, np.atleast_2d(joints))
    position_error = np.linalg.norm(positions - tool[:, :3, 3], axis=1)
    delta = rotations @ tool[:, :3, :3].transpose(0, 2, 1)
    orientation_error = np.linalg.norm(Rotation.from_matrix(delta).as_rotvec(), axis=1)
    return position_error, orientation_error


def restart_joints(model, seed, stream_key, restart):
    """Random in-limit start for restart `restart` of stream `stream_key`; independent of goal order."""
    rng = np.random.default_rng([int(seed), int(stream_key), int(restart)])
    return rng.uniform(model.joint_limits[:, 0], model.joint_limits[:, 1])


def ik_solve_batch(model, world, positions, rotations, stream_keys=None, seed=IK_SEED, restarts=IK_RESTARTS,
                   damping=IK_DAMPING, max_iterations=IK_MAX_ITERATIONS):
    """Damped least squares IK for many tool poses at once.

    Every goal starts from the home joints; unsolved goals retry from up to `restarts` random starts
    keyed by (seed, stream key, restart index). A goal is solved once a start converges within tolerance
    to a collision-free configuration. `world` may be None to skip collision checks.
    """
    positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    rotations = np.asarray(rotations, dtype=np.float64).reshape(-1, 3, 3)
    n_goals = len(positions)
    stream_keys = np.zeros(n_goals, dtype=np.int64) if stream_keys is None else np.asarray(stream_keys)

    best = IkBatchResult(rank=np.full(n_goals, _STATUS_RANK[IkStatus.UNREACHABLE]),
                         joints=np.tile(model.home_joints, (n_goals, 1)),
                         position_error=np.full(n_goals, np.inf), orientation_error=np.full(n_goals, np.inf))

    in_reach = np.linalg.norm(positions, axis=1) <= model.max_reach
    pending = np.flatnonzero(in_reach)

    for attempt in range(restarts + 1):
        if len(pending) == 0:
            break
        if attempt == 0:
            start = np.tile(model.home_joints, (len(pending), 1))
        else:
            starts = {key: restart_joints(model, seed, key, attempt) for key in np.unique(stream_keys[pending])}
            start = np.stack([starts[key] for key in stream_keys[pending]])

        joints, converged, pinned, pos_err, ori_err = _dls(model, start, positions[pending], rotations[pending],
                                                           damping, max_iterations)
        rank = np.where(pinned, _STATUS_RANK[IkStatus.LIMIT_VIOLATION], _STATUS_RANK[IkStatus.UNREACHABLE])
        if converged.any():
            colliding = np.zeros(len(pending), dtype=bool)
            if world is not None:
                colliding[converged] = world.collision_mask(model, joints[converged])
            rank = np.where(converged, np.where(colliding, _STATUS_RANK[IkStatus.COLLISION],
                                                _STATUS_RANK[IkStatus.SOLVED]), rank)

        improved = rank > best.rank[pending]
        # Errors follow the best attempt so far
        improved |= (rank == best.rank[pending]) & (pos_err < best.position_error[pending])
        target = pending[improved]
        best.rank[target] = rank[improved]
        best.joints[target] = joints[improved]
        best.position_error[target] = pos_err[improved]
        best.orientation_error[target] = ori_err[improved]

        pending = pending[best.rank[pending] != _STATUS_RANK[IkStatus.SOLVED]]

    logger.debug("IK batch: %d goals, %d solved", n_goals, int(best.solved.sum()))
    return best


def _dls(model, joints, positions, rotations, damping, max_iterations):
    joints = joints.copy()
    lower, upper = model.joint_limits[:, 0], model.joint_limits[:, 1]
    full_turn = (lower <= -np.pi) & (upper >= np.pi)
    identity = np.eye(6) * damping ** 2
    active = np.ones(len(joints), dtype=bool)

    for _ in range(max_iterations):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        q = joints[idx]
        tool = forward_kinematics(model, q)
        error = np.empty((len(idx), 6))
        error[:, :3] = positions[idx] - tool[:, :3, 3]
        error[:, 3:] = Rotation.from_matrix(rotations[idx] @ tool[:, :3, :3].transpose(0, 2, 1)).as_rotvec()

        done = (np.linalg.norm(error[:, :3], axis=1) < IK_POSITION_TOLERANCE / 2) & \
               (np.linalg.norm(error[:, 3:], axis=1) < IK_ORIENTATION_TOLERANCE / 2)
        active[idx[done]] = False
        idx, q, error = idx[~done], q[~done], error[~done]
        if len(idx) == 0:
            break

        jacobian = geometric_jacobian(model, q)
        jjt = jacobian @ jacobian.transpose(0, 2, 1) + identity
        step = (jacobian.transpose(0, 2, 1) @ np.linalg.solve(jjt, error[..., None]))[..., 0]
        largest = np.abs(step).max(axis=1, keepdims=True)
        step *= np.minimum(1.0, IK_MAX_STEP / np.maximum(largest, 1e-12))

        q = q + step
        q[:, full_turn] = (q[:, full_turn] + np.pi) % (2 * np.pi) - np.pi
        joints[idx] = np.clip(q, lower, upper)

    pos_err, ori_err = pose_error(model, joints, positions, rotations)
    converged = (pos_err < IK_POSITION_TOLERANCE) & (ori_err < IK_ORIENTATION_TOLERANCE)
    limited = ~full_turn
    pinned = np.any(((joints <= lower + 1e-9) | (joints >= upper - 1e-9)) & limited, axis=1) & ~converged
    return joints, converged, pinned, pos_err, ori_err


def ik_solve(model, world, goal, stream_key=0, seed=IK_SEED, restarts=IK_RESTARTS):
    """Solve one GoalPose; outcomes are reported through IkResult.status, never raised."""
    batch = ik_solve_batch(model, world, goal.p[None], goal.rotation()[None], stream_keys=[stream_key],
                           seed=seed, restarts=restarts)
    return batch.result(0)
