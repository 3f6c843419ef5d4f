"""Input checks shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np

from .geometry import Camera


def check_image(image, name="image", shape=None):
    """Return a float32 H x W x 3 copy of ``image`` with values in [0, 1]."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name}: expected an H x W x 3 array, got shape {arr.shape}")
    if shape is not None and arr.shape[:2] != tuple(shape):
        raise ValueError(f"{name}: size {arr.shape[:2]} does not match {tuple(shape)}")
    arr = arr.astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite values")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError(f"{name}: values must lie in [0, 1]")
    return arr


def check_weight_map(weights, shape, name="weight map"):
    if weights is None:
        return None
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != tuple(shape):
        raise ValueError(f"{name}: shape {w.shape} does not match image {tuple(shape)}")
    if not np.all(np.isfinite(w)) or w.min() < 0 or w.max() > 1:
        raise ValueError(f"{name}: values must be finite and lie in [0, 1]")
    return w.astype(np.float32)


def check_camera(camera, name="camera"):
    if not isinstance(camera, Camera):
        raise TypeError(f"{name}: expected a Camera, got {type(camera).__name__}")
    return camera


def check_cameras(cameras, images=None):
    cams = [check_camera(c, f"camera {i}") for i, c in enumerate(cameras)]
    if not cams:
        raise ValueError("no cameras given")
    if images is not None:
        if len(images) != len(cams):
            raise ValueError(f"{len(cams)} cameras but {len(images)} images")
        imgs = [check_image(im, f"image {i}", (c.height, c.width)) for i, (c, im) in enumerate(zip(cams, images))]
        return cams, imgs
    return cams


def check_points(points, colors):
    pts = np.asarray(points, dtype=np.float64)
    cols = np.asarray(colors, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise ValueError(f"points must be a nonempty N x 3 array, got shape {pts.shape}")
    if cols.shape != pts.shape:
        raise ValueError(f"colors shape {cols.shape} does not match points {pts.shape}")
    if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(cols))):
        raise ValueError("points and colors must be finite")
    return pts, cols

