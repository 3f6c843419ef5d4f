"""Learnable 3D Gaussian primitives and their screen-space projection."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Z_NEAR, Camera, quat_to_matrix

LOG_SCALE_MIN = float(np.log(1e-6))
LOG_SCALE_MAX = float(np.log(1e3))
LOWPASS = 0.3
# alpha below which a splat is treated as absent; sets the footprint radius
ALPHA_EPS = 1e-5
# squared Mahalanobis radius of the 99%-mass ellipse (chi-square, 2 dof)
CHI2_99 = 9.210340371976184

FRUSTUM_CLAMP = 1.3
CHECKPOINT_MAGIC = b"GSUC0001"

PARAM_GROUPS = ("mu", "rot", "log_scale", "opacity_logit", "color")


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


@dataclass
class Gaussian3D:
    mu: np.ndarray
    rot: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    log_scale: np.ndarray = field(default_factory=lambda: np.zeros(3))
    opacity_logit: float = 0.0
    color: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))

    @property
    def opacity(self):
        return float(sigmoid(self.opacity_logit))

    @property
    def covariance(self):
        return build_covariance(self.rot, self.log_scale)


class GaussianField:
    """Structure-of-arrays store for K Gaussians.

    Parameter arrays are kept in one dtype (float32 for training, float64 for
    reference checks). ``grad_accum``/``grad_count`` hold the screen-space
    positional gradient statistics used by densification and always match the
    field length.
    """

    def __init__(self, mu, rot, log_scale, opacity_logit, color, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.mu = np.ascontiguousarray(mu, dtype=self.dtype).reshape(-1, 3)
        k = len(self.mu)
        self.rot = np.ascontiguousarray(rot, dtype=self.dtype).reshape(k, 4)
        self.log_scale = np.ascontiguousarray(log_scale, dtype=self.dtype).reshape(k, 3)
        self.opacity_logit = np.ascontiguousarray(opacity_logit, dtype=self.dtype).reshape(k)
        self.color = np.ascontiguousarray(color, dtype=self.dtype).reshape(k, 3)
        self.iteration = 0
        self.reset_stats()

    @classmethod
    def empty(cls, dtype=np.float32):
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)), dtype)

    @classmethod
    def from_gaussians(cls, gaussians, dtype=np.float32):
        gs = list(gaussians)
        if not gs:
            return cls.empty(dtype)
        return cls(
            [g.mu for g in gs],
            [g.rot for g in gs],
            [g.log_scale for g in gs],
            [g.opacity_logit for g in gs],
            [g.color for g in gs],
            dtype,
        )

    def __len__(self):
        return len(self.mu)

    def __getitem__(self, i) -> Gaussian3D:
        return Gaussian3D(
            self.mu[i].astype(np.float64),
            self.rot[i].astype(np.float64),
            self.log_scale[i].astype(np.float64),
            float(self.opacity_logit[i]),
            self.color[i].astype(np.float64),
        )

    def params(self):
        return {name: getattr(self, name) for name in PARAM_GROUPS}

    def copy(self, dtype=None):
        # GaussianField() only converts, so force fresh buffers
        out = GaussianField(*(np.array(getattr(self, n)) for n in PARAM_GROUPS), dtype or self.dtype)
        out.iteration = self.iteration
        out.grad_accum = self.grad_accum.copy()
        out.grad_count = self.grad_count.copy()
        return out

    def astype(self, dtype):
        return self.copy(dtype)

    def subset(self, index):
        out = GaussianField(
            self.mu[index], self.rot[index], self.log_scale[index],
            self.opacity_logit[index], self.color[index], self.dtype,
        )
        out.iteration = self.iteration
        out.grad_accum = self.grad_accum[index].copy()
        out.grad_count = self.grad_count[index].copy()
        return out

    def permuted(self, perm):
        return self.subset(np.asarray(perm))

    def reset_stats(self):
        self.grad_accum = np.zeros(len(self.mu), dtype=np.float64)
        self.grad_count = np.zeros(len(self.mu), dtype=np.int64)

    @property
    def opacity(self):
        return sigmoid(self.opacity_logit.astype(np.float64))

    @property
    def scales(self):
        return np.exp(self.log_scale.astype(np.float64))

    def normalize_rotations(self):
        n = np.linalg.norm(self.rot, axis=1, keepdims=True)
        self.rot /= np.where(n > 0, n, 1)

    def clamp_scales(self):
        np.clip(self.log_scale, LOG_SCALE_MIN, LOG_SCALE_MAX, out=self.log_scale)

    def tobytes(self):
        return checkpoint_bytes(self)

    def __eq__(self, other):
        if not isinstance(other, GaussianField):
            return NotImplemented
        return len(self) == len(other) and all(
            np.array_equal(getattr(self, n), getattr(other, n)) for n in PARAM_GROUPS
        )

    __hash__ = None


def build_covariance(rot, log_scale):
    """Sigma = R S S^T R^T with S = diag(exp(log_scale))."""
    R = quat_to_matrix(np.asarray(rot, dtype=np.float64))
    M = R * np.exp(np.asarray(log_scale, dtype=np.float64))[..., None, :]
    cov = M @ np.swapaxes(M, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def evaluate_gaussian(g: Gaussian3D, x):
    """Unnormalized density exp(-1/2 (x-mu)^T Sigma^-1 (x-mu))."""
    d = np.asarray(x, dtype=np.float64) - np.asarray(g.mu, dtype=np.float64)
    R = quat_to_matrix(np.asarray(g.rot, dtype=np.float64))
    # Sigma^-1 = R S^-2 R^T, cheaper and better conditioned than inverting Sigma
    y = (R.T @ d) * np.exp(-np.asarray(g.log_scale, dtype=np.float64))
    return float(np.exp(-0.5 * (y @ y)))


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float
    color: np.ndarray

    @property
    def conic(self):
        return np.linalg.inv(self.cov2d)


def frustum_limits(camera: Camera):
    """Bounds on x/z and y/z used when linearizing the projection."""
    return FRUSTUM_CLAMP * 0.5 * camera.width / camera.fx, FRUSTUM_CLAMP * 0.5 * camera.height / camera.fy


def projection_jacobian(camera: Camera, p_cam):
    """d(pixel)/d(camera-space point) of the pinhole projection.

    x/z and y/z are clamped to a margin around the view frustum first, so a
    splat far off to the side of a close camera keeps a bounded footprint.
    """
    x, y, z = p_cam
    lx, ly = frustum_limits(camera)
    tx = np.clip(x / z, -lx, lx)
    ty = np.clip(y / z, -ly, ly)
    return np.array([
        [camera.fx / z, 0.0, -camera.fx * tx / z],
        [0.0, camera.fy / z, -camera.fy * ty / z],
    ])


def footprint_radius2(opacity):
    """Squared Mahalanobis radius beyond which opacity * G < ALPHA_EPS."""
    return 2.0 * np.log(np.maximum(opacity, ALPHA_EPS) / ALPHA_EPS)


def project_to_2d(camera: Camera, g: Gaussian3D) -> Splat2D | None:
    """EWA projection of one Gaussian; ``None`` when culled.

    cov2d = J W Sigma W^T J^T + 0.3 I. A splat is culled when its mean is
    behind the near plane or when its footprint ellipse misses the image.
    """
    R = camera.R
    p_cam = R @ np.asarray(g.mu, dtype=np.float64) + camera.t
    if p_cam[2] <= Z_NEAR:
        return None
    J = projection_jacobian(camera, p_cam)
    T = J @ R
    cov2d = T @ build_covariance(g.rot, g.log_scale) @ T.T + LOWPASS * np.eye(2)
    cov2d = 0.5 * (cov2d + cov2d.T)
    mean2d = np.array([
        camera.fx * p_cam[0] / p_cam[2] + camera.cx,
        camera.fy * p_cam[1] / p_cam[2] + camera.cy,
    ])
    opacity = g.opacity
    r2 = footprint_radius2(opacity)
    if r2 <= 0:
        return None
    ext = np.sqrt(r2 * np.diag(cov2d))
    if (mean2d[0] + ext[0] < 0 or mean2d[0] - ext[0] > camera.width - 1
            or mean2d[1] + ext[1] < 0 or mean2d[1] - ext[1] > camera.height - 1):
        return None
    return Splat2D(mean2d, cov2d, float(p_cam[2]), opacity, np.clip(g.color, 0.0, 1.0))


def checkpoint_bytes(field_: GaussianField) -> bytes:
    rows = np.concatenate(
        [
            field_.mu.astype("<f4"),
            field_.rot.astype("<f4"),
            field_.log_scale.astype("<f4"),
            field_.opacity_logit.astype("<f4")[:, None],
            field_.color.astype("<f4"),
        ],
        axis=1,
    )
    return CHECKPOINT_MAGIC + struct.pack("<Q", len(field_)) + np.ascontiguousarray(rows, dtype="<f4").tobytes()


def save_checkpoint(field_: GaussianField, path):
    Path(path).write_bytes(checkpoint_bytes(field_))


def load_checkpoint(path, dtype=np.float32) -> GaussianField:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a GSUC0001 checkpoint")
    (count,) = struct.unpack("<Q", data[8:16])
    body = np.frombuffer(data, dtype="<f4", offset=16)
    if body.size != count * 14:
        raise ValueError(f"{path}: expected {count} records, file is truncated or padded")
    rows = body.reshape(count, 14).astype(np.float64)
    return GaussianField(rows[:, 0:3], rows[:, 3:7], rows[:, 7:10], rows[:, 10], rows[:, 11:14], dtype)
