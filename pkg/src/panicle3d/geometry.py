"""Rigid transforms, pinhole cameras and labeled point clouds.

Poses are stored as a unit quaternion ``(w, x, y, z)`` plus a translation and
are treated as immutable values. Matrices are produced on demand.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_SMALL_ANGLE = 1e-6


class GeometryError(ValueError):
    """Raised for ill-posed geometric requests (behind-camera points, antipodal rotations)."""


# ---------------------------------------------------------------------------
# quaternion helpers


def _qnormalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise GeometryError(f"invalid quaternion {q!r}")
    # leave unit quaternions untouched so serialization round-trips exactly
    if abs(n - 1.0) > 4 * np.finfo(np.float64).eps:
        q = q / n
    # canonical hemisphere keeps angles in [0, pi]
    if q[0] < 0.0:
        q = -q
    return q


def _qmul(a, b):
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


def _qconj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R):
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return _qnormalize(q)


def _quat_angle(q):
    """Rotation angle in [0, pi] of a canonical unit quaternion."""
    return 2.0 * np.arctan2(np.linalg.norm(q[1:]), abs(q[0]))


def hat(v):
    """Skew-symmetric matrix such that ``hat(a) @ b == cross(a, b)``."""
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


# ---------------------------------------------------------------------------
# value types


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """SE(3) element mapping points ``p -> R p + t``.

    For camera poses the convention is camera-to-world.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = _qnormalize(self.rotation)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise GeometryError("translation must be finite")
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_matrix(cls, matrix) -> RigidTransform:
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(matrix_to_quat(matrix[:3, :3]), matrix[:3, 3])

    @classmethod
    def from_rotation_matrix(cls, R, t=(0.0, 0.0, 0.0)) -> RigidTransform:
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_translation(cls, t) -> RigidTransform:
        return cls(translation=t)

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix
        m[:3, 3] = self.translation
        return m

    @property
    def angle(self) -> float:
        return float(_quat_angle(self.rotation))

    def apply(self, points) -> np.ndarray:
        """Transform a point ``(3,)`` or an array of points ``(N, 3)``."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation_matrix.T + self.translation

    def compose(self, other: RigidTransform) -> RigidTransform:
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return compose(self, other)

    def inverse(self) -> RigidTransform:
        return invert(self)

    def __matmul__(self, other):
        if isinstance(other, RigidTransform):
            return compose(self, other)
        return NotImplemented

    def __repr__(self):
        q = np.array2string(self.rotation, precision=6)
        t = np.array2string(self.translation, precision=6)
        return f"RigidTransform(q={q}, t={t})"

    def to_dict(self) -> dict:
        return {"q": [float(v) for v in self.rotation], "t": [float(v) for v in self.translation]}

    @classmethod
    def from_dict(cls, d) -> RigidTransform:
        return cls(d["q"], d["t"])


@dataclass(frozen=True)
class Se3Tangent:
    """Tangent vector of SE(3): rotation ``omega`` (rad) and ``v`` (m)."""

    omega: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=np.float64).reshape(3))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=np.float64).reshape(3))

    @classmethod
    def from_vector(cls, xi) -> Se3Tangent:
        xi = np.asarray(xi, dtype=np.float64)
        return cls(xi[:3], xi[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.v])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d) -> CameraIntrinsics:
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))


class PointCloud:
    """Points with per-point color, instance label (-1 is background) and confidence."""

    def __init__(self, positions, colors=None, instance_label=None, confidence=None):
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(positions)
        if not np.all(np.isfinite(positions)):
            raise ValueError("point positions must be finite")
        colors = np.zeros((n, 3), np.uint8) if colors is None else np.asarray(colors).reshape(-1, 3)
        instance_label = (
            np.full(n, -1, np.int32) if instance_label is None else np.asarray(instance_label, np.int32).reshape(-1)
        )
        confidence = np.zeros(n, np.float32) if confidence is None else np.asarray(confidence, np.float32).reshape(-1)
        if not (len(colors) == len(instance_label) == len(confidence) == n):
            raise ValueError("point cloud arrays must share one length")
        self.positions = positions
        self.colors = colors.astype(np.uint8)
        self.instance_label = instance_label
        self.confidence = confidence

    def __len__(self):
        return len(self.positions)

    def __repr__(self):
        return f"PointCloud(n={len(self)}, labeled={int(np.count_nonzero(self.instance_label >= 0))})"

    @classmethod
    def empty(cls) -> PointCloud:
        return cls(np.zeros((0, 3)))

    def select(self, mask) -> PointCloud:
        return PointCloud(
            self.positions[mask], self.colors[mask], self.instance_label[mask], self.confidence[mask]
        )

    def transformed(self, transform: RigidTransform) -> PointCloud:
        return transform_cloud(transform, self)

    @staticmethod
    def concatenate(clouds) -> PointCloud:
        clouds = list(clouds)
        if not clouds:
            return PointCloud.empty()
        return PointCloud(
            np.concatenate([c.positions for c in clouds]),
            np.concatenate([c.colors for c in clouds]),
            np.concatenate([c.instance_label for c in clouds]),
            np.concatenate([c.confidence for c in clouds]),
        )


# ---------------------------------------------------------------------------
# operations


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return RigidTransform(_qmul(a.rotation, b.rotation), a.rotation_matrix @ b.translation + a.translation)


def invert(a: RigidTransform) -> RigidTransform:
    q = _qconj(a.rotation)
    return RigidTransform(q, -(quat_to_matrix(q) @ a.translation))


def relative_angle(a: RigidTransform, b: RigidTransform) -> float:
    """Rotation angle of ``a⁻¹ ∘ b`` in radians."""
    return float(_quat_angle(_qnormalize(_qmul(_qconj(a.rotation), b.rotation))))


def transform_cloud(transform: RigidTransform, cloud: PointCloud) -> PointCloud:
    return PointCloud(transform.apply(cloud.positions), cloud.colors, cloud.instance_label, cloud.confidence)


def slerp(q0, q1, t: float):
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    d = float(np.dot(q0, q1))
    if d < 0.0:
        q1, d = -q1, -d
    d = min(d, 1.0)
    theta = np.arccos(d)
    if theta < 1e-12:
        return _qnormalize(q0 + t * (q1 - q0))
    s = np.sin(theta)
    return _qnormalize((np.sin((1 - t) * theta) * q0 + np.sin(t * theta) * q1) / s)


def interpolate_pose(a: RigidTransform, b: RigidTransform, t: float) -> RigidTransform:
    """Linear interpolation of translation with constant-speed slerp of rotation."""
    if relative_angle(a, b) >= np.pi - 1e-9:
        raise GeometryError("antipodal rotations have no unique interpolation")
    if t == 0:
        return a
    if t == 1:
        return b
    trans = (1.0 - t) * a.translation + t * b.translation
    return RigidTransform(slerp(a.rotation, b.rotation, t), trans)


def _so3_left_jacobian(omega):
    theta = np.linalg.norm(omega)
    W = hat(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    return (
        np.eye(3)
        + (1.0 - np.cos(theta)) / theta**2 * W
        + (theta - np.sin(theta)) / theta**3 * (W @ W)
    )


def _so3_left_jacobian_inv(omega):
    theta = np.linalg.norm(omega)
    W = hat(omega)
    if theta < _SMALL_ANGLE:
        c = 1.0 / 12.0 + theta**2 / 720.0
    else:
        c = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / theta**2
    return np.eye(3) - 0.5 * W + c * (W @ W)


def exp_se3(xi) -> RigidTransform:
    """Exponential map; ``xi`` is an ``Se3Tangent`` or a 6-vector ``(omega, v)``."""
    if isinstance(xi, Se3Tangent):
        omega, v = xi.omega, xi.v
    else:
        xi = np.asarray(xi, dtype=np.float64)
        omega, v = xi[:3], xi[3:]
    theta = np.linalg.norm(omega)
    half = 0.5 * theta
    if theta < _SMALL_ANGLE:
        # sin(x/2)/x series
        k = 0.5 - theta**2 / 48.0
    else:
        k = np.sin(half) / theta
    q = np.concatenate([[np.cos(half)], k * omega])
    return RigidTransform(q, _so3_left_jacobian(omega) @ v)


def log_so3(q) -> np.ndarray:
    q = _qnormalize(q)
    n = np.linalg.norm(q[1:])
    theta = 2.0 * np.arctan2(n, q[0])
    if theta >= np.pi - 1e-12:
        raise GeometryError("logarithm undefined for rotation angle >= pi")
    if n < 1e-15:
        return 2.0 * q[1:] / q[0]
    return theta / n * q[1:]


def log_se3(T: RigidTransform) -> Se3Tangent:
    omega = log_so3(T.rotation)
    return Se3Tangent(omega, _so3_left_jacobian_inv(omega) @ T.translation)


def log_se3_vector(T: RigidTransform) -> np.ndarray:
    return log_se3(T).as_vector()


def adjoint(T: RigidTransform) -> np.ndarray:
    """6x6 adjoint for tangent ordering ``(omega, v)``."""
    R = T.rotation_matrix
    A = np.zeros((6, 6))
    A[:3, :3] = R
    A[3:, 3:] = R
    A[3:, :3] = hat(T.translation) @ R
    return A


def project(points, k: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of camera-frame points to pixel coordinates ``(u, v)``."""
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    if np.any(z <= 0):
        raise GeometryError("cannot project points at or behind the camera (z <= 0)")
    u = k.fx * points[..., 0] / z + k.cx
    v = k.fy * points[..., 1] / z + k.cy
    return np.stack([u, v], axis=-1)


def back_project(pixels, depth, k: CameraIntrinsics) -> np.ndarray:
    """Inverse of :func:`project` for pixels ``(..., 2)`` at the given z-depth."""
    pixels = np.asarray(pixels, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    x = (pixels[..., 0] - k.cx) * depth / k.fx
    y = (pixels[..., 1] - k.cy) * depth / k.fy
    return np.stack([x, y, depth * np.ones_like(x)], axis=-1)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Camera-to-world pose for a camera at ``eye`` whose +z axis points at ``target``.

    Image +v points along world ``-up`` so that up is at the top of the image.
    """
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(x) < 1e-12:
        raise GeometryError("viewing direction parallel to up vector")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return RigidTransform.from_rotation_matrix(np.column_stack([x, y, z]), eye)
