"""Pinhole cameras and rigid poses.

Conventions: right-handed world, camera looks down +z, image y points down.
Poses are stored world->camera, so the depth of a point is its camera-space z.
Pixel centers sit at integer coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Z_NEAR = 0.01


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_multiply(a, b):
    """Hamilton product of (w, x, y, z) quaternions."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q):
    """Rotation matrix of a (w, x, y, z) quaternion; accepts (..., 4)."""
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def matrix_to_quat(R):
    """Shepperd's method; returns a unit quaternion with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = quat_normalize(q)
    return q if q[0] >= 0 else -q


def axis_angle_matrix(axis, angle):
    """Rodrigues' formula."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


@dataclass(frozen=True)
class RigidTransform:
    """x -> R(rotation) @ x + translation, rotation a unit (w, x, y, z) quaternion."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0:
            raise ValueError("rotation quaternion must be nonzero and finite")
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        object.__setattr__(self, "rotation", q / n)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_matrix(cls, R, t=(0.0, 0.0, 0.0)):
        R = np.asarray(R, dtype=np.float64)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1) > 1e-6:
            raise ValueError("rotation matrix must be orthonormal with det +1")
        return cls(matrix_to_quat(R), t)

    @property
    def matrix(self):
        return quat_to_matrix(self.rotation)

    def as_4x4(self):
        T = np.eye(4)
        T[:3, :3] = self.matrix
        T[:3, 3] = self.translation
        return T

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.matrix.T + self.translation

    def compose(self, other: RigidTransform) -> RigidTransform:
        """self after other: x -> self(other(x))."""
        q = quat_multiply(self.rotation, other.rotation)
        return RigidTransform(q, self.matrix @ other.translation + self.translation)

    def inverse(self) -> RigidTransform:
        qc = self.rotation * np.array([1.0, -1.0, -1.0, -1.0])
        return RigidTransform(qc, -(self.matrix.T @ self.translation))

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: RigidTransform = field(default_factory=RigidTransform)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError(f"image size must be >= 1, got {self.width}x{self.height}")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        R = self.pose.matrix
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1) > 1e-6:
            raise ValueError("camera pose rotation is not a proper rotation")

    @property
    def K(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @property
    def R(self):
        return self.pose.matrix

    @property
    def t(self):
        return self.pose.translation

    @property
    def center(self):
        """Camera position in world coordinates."""
        return -(self.R.T @ self.t)

    def with_pose(self, pose: RigidTransform) -> Camera:
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, pose)

    def intrinsics_array(self):
        return np.array([self.fx, self.fy, self.cx, self.cy], dtype=np.float64)

    def project(self, points):
        """Vectorized projection of (..., 3) world points.

        Returns (pixels (..., 2), depth (...), in_front (...)). Pixels of points
        behind ``Z_NEAR`` are NaN.
        """
        pc = self.pose.apply(points)
        z = pc[..., 2]
        in_front = z > Z_NEAR
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[..., 0] / z + self.cx
            v = self.fy * pc[..., 1] / z + self.cy
        pix = np.stack([u, v], axis=-1)
        pix[~in_front] = np.nan
        return pix, z, in_front

    def unproject(self, pixels, depth):
        pixels = np.asarray(pixels, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        if np.any(~(depth > 0)):
            raise ValueError("depth must be positive")
        x = (pixels[..., 0] - self.cx) / self.fx * depth
        y = (pixels[..., 1] - self.cy) / self.fy * depth
        pc = np.stack([x, y, depth], axis=-1)
        return (pc - self.t) @ self.R

    def pixel_rays(self):
        """Camera-space rays (z = 1) through every pixel center, shape (H, W, 3)."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)


def project_point(camera: Camera, p_world):
    """Project one world point.

    Returns ``(pixel, depth, in_front)``. Points at or behind the near plane
    come back with ``in_front=False`` and a NaN pixel; they are never clamped.
    """
    p = np.asarray(p_world, dtype=np.float64)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise ValueError("p_world must be a finite 3-vector")
    pix, depth, ok = camera.project(p)
    return pix, float(depth), bool(ok)


def unproject_pixel(camera: Camera, pixel, depth: float):
    if not depth > 0:
        raise ValueError(f"depth must be positive, got {depth}")
    return camera.unproject(np.asarray(pixel, dtype=np.float64), depth)


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> RigidTransform:
    """World->camera pose for a camera at ``eye`` looking toward ``target``.

    ``up`` is the world up direction; image y points opposite to it.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    down = -np.asarray(up, dtype=np.float64)
    down = down - fwd * (down @ fwd)
    n = np.linalg.norm(down)
    if n < 1e-9:
        raise ValueError("viewing direction is parallel to up")
    down /= n
    right = np.cross(down, fwd)
    R = np.stack([right, down, fwd])  # rows are camera axes in world coordinates
    return RigidTransform.from_matrix(R, -R @ eye)


def pitch_down(pose: RigidTransform, degrees: float) -> RigidTransform:
    """Tilt a camera about its own x axis so it looks further down."""
    # the new optical axis, in old camera coordinates, is Rp^T e_z = (0, sin a, cos a)
    Rp = axis_angle_matrix([1.0, 0.0, 0.0], np.deg2rad(degrees))
    return RigidTransform.from_matrix(Rp, np.zeros(3)).compose(pose)


def translate_center(pose: RigidTransform, delta_world) -> RigidTransform:
    """Move the camera center by ``delta_world`` keeping its orientation."""
    R = pose.matrix
    return RigidTransform(pose.rotation, pose.translation - R @ np.asarray(delta_world, dtype=np.float64))
