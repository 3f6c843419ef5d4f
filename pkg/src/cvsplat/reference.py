"""Slow, obviously-correct implementations used as test oracles.

Nothing here is used by the training pipeline.
"""

from __future__ import annotations

import numpy as np

from .gaussians import LOWPASS, PARAM_GROUPS, GaussianField, build_covariance, projection_jacobian, sigmoid
from .geometry import Camera
from .losses import LAMBDA_SSIM, LAMBDA_VOL, total_loss
from .rasterizer import ALPHA_MAX, EXACT, NEAR_CULL, RasterSettings, render, render_backward


def project_all(field_: GaussianField, camera: Camera, near=NEAR_CULL, lowpass=LOWPASS):
    """float64 EWA projection of every Gaussian; rows for culled ones are dropped.

    Returns (index, mean2d, conic, depth, opacity, color) for the survivors.
    """
    R, t = camera.R, camera.t
    keep, means, conics, depths = [], [], [], []
    mu = field_.mu.astype(np.float64)
    for k in range(len(field_)):
        p = R @ mu[k] + t
        if p[2] <= near:
            continue
        J = projection_jacobian(camera, p)
        cov = J @ R @ build_covariance(field_.rot[k].astype(np.float64), field_.log_scale[k].astype(np.float64)) \
            @ R.T @ J.T + lowpass * np.eye(2)
        cov = 0.5 * (cov + cov.T)
        if np.linalg.det(cov) <= 0:
            continue
        keep.append(k)
        means.append([camera.fx * p[0] / p[2] + camera.cx, camera.fy * p[1] / p[2] + camera.cy])
        conics.append(np.linalg.inv(cov))
        depths.append(p[2])
    idx = np.asarray(keep, dtype=np.int64)
    opac = sigmoid(field_.opacity_logit.astype(np.float64))[idx]
    col = np.clip(field_.color.astype(np.float64), 0.0, 1.0)[idx]
    return idx, np.asarray(means).reshape(-1, 2), np.asarray(conics).reshape(-1, 2, 2), np.asarray(depths), opac, col


def render_reference(field_: GaussianField, camera: Camera, background=(0.0, 0.0, 0.0), near=NEAR_CULL,
                     alpha_max=ALPHA_MAX):
    """Per-pixel front-to-back compositing over all splats, sorted by (depth, index).

    No tiles, no footprint cutoff, no early termination. Returns (color, alpha).
    """
    H, W = camera.height, camera.width
    idx, means, conics, depths, opac, col = project_all(field_, camera, near)
    order = np.lexsort((idx, depths))
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    T = np.ones((H, W))
    color = np.zeros((H, W, 3))
    for j in order:
        dx = xs - means[j, 0]
        dy = ys - means[j, 1]
        Q = conics[j]
        power = -0.5 * (Q[0, 0] * dx * dx + Q[1, 1] * dy * dy) - Q[0, 1] * dx * dy
        alpha = np.minimum(alpha_max, opac[j] * np.exp(power))
        color += (alpha * T)[..., None] * col[j]
        T *= 1.0 - alpha
    color += T[..., None] * np.asarray(background, dtype=np.float64)
    return color, 1.0 - T


def ray_triangle_depth(camera: Camera, triangles, pixels):
    """Camera z-depth of the nearest triangle hit along each pixel ray (inf for a miss).

    Moller-Trumbore intersection against every triangle.
    """
    tris = np.asarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
    pix = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    origin = camera.center
    dirs = camera.unproject(pix, np.ones(len(pix))) - origin  # unit z-depth rays
    v0, v1, v2 = tris[:, 0], tris[:, 1], tris[:, 2]
    e1, e2 = v1 - v0, v2 - v0
    out = np.full(len(pix), np.inf)
    for i, d in enumerate(dirs):
        h = np.cross(d, e2)
        a = np.einsum("ij,ij->i", e1, h)
        ok = np.abs(a) > 1e-12
        f = np.where(ok, 1.0 / np.where(ok, a, 1.0), 0.0)
        s = origin - v0
        u = f * np.einsum("ij,ij->i", s, h)
        q = np.cross(s, e1)
        v = f * (q @ d)
        tt = f * np.einsum("ij,ij->i", e2, q)
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (tt > 1e-9)
        if np.any(hit):
            out[i] = tt[hit].min()  # d has unit camera-z, so t is the z-depth
    return out


def finite_difference(fn, field_: GaussianField, group: str, h=1e-4, indices=None):
    """Central differences of scalar ``fn(field)`` w.r.t. one parameter group (float64 copy)."""
    if group not in PARAM_GROUPS:
        raise ValueError(f"unknown parameter group {group!r}")
    base = field_.astype(np.float64)
    arr = getattr(base, group)
    grad = np.zeros_like(arr)
    flat_idx = range(arr.size) if indices is None else indices
    for i in flat_idx:
        pos = np.unravel_index(i, arr.shape)
        orig = arr[pos]
        arr[pos] = orig + h
        fp = fn(base)
        arr[pos] = orig - h
        fm = fn(base)
        arr[pos] = orig
        grad[pos] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric):
    """||a - n|| / max(||n||, ||a||, tiny): norm-wise relative error."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(n), np.linalg.norm(a), 1e-30)
    return float(np.linalg.norm(a - n) / denom)


def loss_value(field_: GaussianField, camera: Camera, target, weights=None, background=(0.0, 0.0, 0.0),
               settings: RasterSettings = EXACT, lambda_ssim=LAMBDA_SSIM, lambda_vol=LAMBDA_VOL):
    out = render(field_, camera, background, settings)
    return total_loss(weights, out.color, target, field_, lambda_ssim, lambda_vol).total


def loss_gradients(field_: GaussianField, camera: Camera, target, weights=None, background=(0.0, 0.0, 0.0),
                   settings: RasterSettings = EXACT, lambda_ssim=LAMBDA_SSIM, lambda_vol=LAMBDA_VOL):
    """Analytic gradient of ``loss_value`` for every parameter group, as the trainer computes it."""
    out = render(field_, camera, background, settings)
    lb = total_loss(weights, out.color, target, field_, lambda_ssim, lambda_vol)
    g = render_backward(field_, camera, out, lb.d_color, lb.d_alpha).as_dict()
    g["log_scale"] = g["log_scale"] + lb.d_log_scale
    return lb.total, g
