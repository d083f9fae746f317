"""Rigid-body poses, quaternions, the pinhole camera and pose-error metrics.

Conventions used throughout the package:

* quaternions are ``(w, x, y, z)``, Hamilton product, canonical sign ``w >= 0``;
* a :class:`Pose` is camera-to-world, so ``pose_apply`` maps world points into
  the camera frame by applying the inverse;
* camera frame is +z forward, +x right, +y down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DegenerateQuaternionError(ValueError):
    pass


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = float(np.sqrt(np.sum(q * q)))
    if not np.isfinite(n) or n <= 1e-12:
        raise DegenerateQuaternionError(f"cannot normalize quaternion {q.tolist()} (norm {n:g})")
    q = q / n
    # canonical sign: w > 0, or first nonzero component positive
    for c in q:
        if c != 0.0:
            if c < 0.0:
                q = -q
            break
    return q


def quat_mul(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]], dtype=np.float64)


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(r) -> np.ndarray:
    """Rotation matrix to canonical unit quaternion (Shepperd's method)."""
    r = np.asarray(r, dtype=np.float64)
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
        q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
    elif r[1, 1] > r[2, 2]:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
        q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
        q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    return quat_normalize(q)


def quat_from_axis_angle(axis, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    h = 0.5 * angle_rad
    return quat_normalize(np.concatenate([[math.cos(h)], math.sin(h) * axis]))


def quat_from_euler(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Rotation ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``, angles in radians."""
    qx = quat_from_axis_angle((1, 0, 0), roll)
    qy = quat_from_axis_angle((0, 1, 0), pitch)
    qz = quat_from_axis_angle((0, 0, 1), yaw)
    return quat_normalize(quat_mul(qz, quat_mul(qy, qx)))


@dataclass(frozen=True, eq=False)
class Pose:
    """Camera-to-world rigid transform: translation ``t`` (m) and unit quaternion ``q``."""

    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64).reshape(3).copy()
        if not np.all(np.isfinite(t)):
            raise ValueError(f"non-finite translation {t.tolist()}")
        t.flags.writeable = False
        q = quat_normalize(self.q)
        q.flags.writeable = False
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "q", q)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, m) -> Pose:
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, 3], matrix_to_quat(m[:3, :3]))

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.t
        return m

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.t, other.t) and np.array_equal(self.q, other.q))

    def __hash__(self):
        return hash((self.t.tobytes(), self.q.tobytes()))

    def __repr__(self):
        t = ", ".join(f"{v:.6g}" for v in self.t)
        q = ", ".join(f"{v:.6g}" for v in self.q)
        return f"Pose(t=[{t}], q=[{q}])"


def quat_rotate(q, v) -> np.ndarray:
    return quat_to_matrix(q) @ np.asarray(v, dtype=np.float64)


def pose_compose(a: Pose, b: Pose) -> Pose:
    """Transform that applies ``b`` first, then ``a``."""
    return Pose(a.t + quat_rotate(a.q, b.t), quat_mul(a.q, b.q))


def pose_inverse(p: Pose) -> Pose:
    qi = quat_conj(p.q)
    return Pose(-quat_rotate(qi, p.t), qi)


def pose_apply(p: Pose, x) -> np.ndarray:
    """World point(s) ``x`` (3 or N x 3) expressed in the camera frame of ``p``.

    Written with explicit broadcasting rather than a matmul so that a single
    point and a batch produce bit-identical results.
    """
    x = np.asarray(x, dtype=np.float64)
    r = p.rotation
    d = x - p.t
    d0, d1, d2 = d[..., 0], d[..., 1], d[..., 2]
    return np.stack(
        [
            d0 * r[0, 0] + d1 * r[1, 0] + d2 * r[2, 0],
            d0 * r[0, 1] + d1 * r[1, 1] + d2 * r[2, 1],
            d0 * r[0, 2] + d1 * r[1, 2] + d2 * r[2, 2],
        ],
        axis=-1,
    )


def pose_correction(rough: Pose, gt: Pose) -> Pose:
    """Correction ``c`` in the rough camera frame with ``compose(rough, c) == gt``."""
    return pose_compose(pose_inverse(rough), gt)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, scale: float, width: int, height: int) -> Intrinsics:
        """Intrinsics after resizing the image by ``scale`` to ``width`` x ``height``."""
        return Intrinsics(self.fx * scale, self.fy * scale, self.cx * scale, self.cy * scale, width, height)

    def cropped(self, top: int, left: int, height: int, width: int) -> Intrinsics:
        return Intrinsics(self.fx, self.fy, self.cx - left, self.cy - top, width, height)


@dataclass(frozen=True)
class PerturbationSpec:
    max_trans: float = 0.60
    max_rot_deg: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.max_trans < 0 or self.max_rot_deg < 0:
            raise ValueError("perturbation bounds must be nonnegative")


def perturbation_offsets(spec: PerturbationSpec, draw_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Translation (m) and Euler (deg) offsets for one draw; keyed by ``(seed, draw_index)``."""
    rng = np.random.default_rng([spec.seed & 0xFFFFFFFFFFFFFFFF, int(draw_index)])
    u = rng.uniform(-1.0, 1.0, size=6)
    return u[:3] * spec.max_trans, u[3:] * spec.max_rot_deg


def perturb_pose(gt: Pose, spec: PerturbationSpec, draw_index: int) -> Pose:
    """Rough pose: world-frame translation offset plus body-frame Euler rotation offset."""
    if spec.max_trans == 0 and spec.max_rot_deg == 0:
        return gt
    dt, de = perturbation_offsets(spec, draw_index)
    t = gt.t + dt
    if spec.max_rot_deg == 0:
        return Pose(t, gt.q)
    dq = quat_from_euler(*np.radians(de))
    return Pose(t, quat_mul(gt.q, dq))


def translation_error_cm(est: Pose, gt: Pose) -> float:
    return 100.0 * float(np.linalg.norm(est.t - gt.t))


def rotation_error_deg(est: Pose, gt: Pose) -> float:
    d = min(1.0, abs(float(np.dot(est.q, gt.q))))
    return math.degrees(2.0 * math.acos(d))


def format_pose_row(frame_id: int, pose: Pose) -> str:
    vals = [*pose.t, *pose.q]
    return f"{frame_id}," + ",".join(f"{v:.9g}" for v in vals)


def parse_pose_row(line: str) -> tuple[int, Pose]:
    parts = line.strip().split(",")
    if len(parts) != 8:
        raise ValueError(f"expected 8 comma-separated fields, got {len(parts)}: {line!r}")
    vals = [float(p) for p in parts[1:]]
    return int(parts[0]), Pose(vals[:3], vals[3:])


POSE_CSV_HEADER = "frame_id,tx,ty,tz,qw,qx,qy,qz"
