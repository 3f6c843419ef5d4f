"""Ensemble uncertainty on ground views and its transport into aerial views.

Chain: member renders -> per-channel population variance -> log-fused
scalar map -> reprojection into each aerial camera (multi-match averaging,
occlusion check) -> joint normalization with an n-th root.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io as uio
from .geometry import Camera
from .rasterizer import RasterSettings, render

log = logging.getLogger(__name__)

OCCLUSION_TOL = 0.1
DEFAULT_ROOT = 6


@dataclass
class UncertaintyMap:
    """H x W nonnegative values plus a validity mask; invalid pixels hold 0."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.ndim != 2 or self.values.shape != self.valid.shape:
            raise ValueError("values and valid must be matching 2-D arrays")
        self.values = np.where(self.valid, self.values, 0.0)

    @property
    def shape(self):
        return self.values.shape

    @classmethod
    def full(cls, values):
        v = np.asarray(values, dtype=np.float64)
        return cls(v, np.ones(v.shape, bool))

    def save(self, path):
        uio.write_ucmap(path, self.values, self.valid)

    @classmethod
    def load(cls, path):
        v, ok = uio.read_ucmap(path)
        return cls(np.nan_to_num(v), ok)

    def save_png(self, path):
        uio.write_png(path, uio.gray_ramp(self.values, self.valid))


def _stack(renders):
    arr = [np.asarray(r, dtype=np.float64) for r in renders]
    if len(arr) < 2:
        raise ValueError(f"ensemble statistics need at least 2 members, got {len(arr)}")
    if any(a.shape != arr[0].shape for a in arr):
        raise ValueError("member renders differ in shape")
    # sorting along the member axis makes every reduction independent of member order
    return np.sort(np.stack(arr), axis=0)


def ensemble_stats(renders):
    """Per-pixel, per-channel population mean and variance over M >= 2 renders."""
    s = _stack(renders)
    # deviations from the smallest member: identical members give exactly zero variance
    d = s - s[0]
    dm = d.mean(axis=0)
    return s[0] + dm, ((d - dm) ** 2).mean(axis=0)


def fuse_channels(variance, valid=None) -> UncertaintyMap:
    """u = mean over channels of ln(var + 1)."""
    v = np.asarray(variance, dtype=np.float64)
    if v.ndim != 3:
        raise ValueError(f"expected H x W x C variances, got shape {v.shape}")
    if np.any(v < 0) or np.any(~np.isfinite(v)):
        raise ValueError("variances must be finite and nonnegative")
    u = np.log1p(v).mean(axis=2)
    return UncertaintyMap(u, np.ones(u.shape, bool) if valid is None else valid)


# --------------------------------------------------------------------------
# reprojection


def reproject_pixels(src: Camera, depth, dst: Camera, pixels=None):
    """Carry source pixels with known z-depth into ``dst``.

    Returns (dst pixel coordinates, dst depth, in_front) for each source
    pixel; ``pixels`` defaults to every pixel of ``src`` in row-major order.
    """
    if pixels is None:
        ys, xs = np.mgrid[0:src.height, 0:src.width]
        pixels = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
        depth = np.asarray(depth, dtype=np.float64).ravel()
    world = src.unproject(pixels, depth)
    return dst.project(world)


@dataclass
class MatchSet:
    """Ground-to-aerial contributions for one aerial image, grouped by target pixel."""

    shape: tuple
    pixel: np.ndarray  # flat aerial pixel index per contribution, sorted
    value: np.ndarray

    def groups(self):
        """(unique flat pixel indices, sum per pixel, count per pixel)."""
        uniq, inverse, counts = np.unique(self.pixel, return_inverse=True, return_counts=True)
        sums = np.bincount(inverse, weights=self.value, minlength=len(uniq))
        return uniq, sums, counts

    def averaged(self) -> UncertaintyMap:
        h, w = self.shape
        out = np.zeros(h * w)
        ok = np.zeros(h * w, bool)
        uniq, sums, counts = self.groups()
        out[uniq] = sums / counts
        ok[uniq] = True
        return UncertaintyMap(out.reshape(h, w), ok.reshape(h, w))


def collect_matches(ground_maps, ground_cams, ground_depths, aerial_cam: Camera, aerial_depth=None,
                    occlusion_tol=OCCLUSION_TOL) -> MatchSet:
    """Unproject every valid ground pixel and land it on its nearest aerial pixel.

    A contribution is dropped when it lies more than ``occlusion_tol`` behind
    the aerial depth at its target (aerial pixels without depth occlude nothing).
    """
    H, W = aerial_cam.height, aerial_cam.width
    if aerial_depth is not None:
        aerial_depth = np.asarray(aerial_depth, dtype=np.float64)
        if aerial_depth.shape != (H, W):
            raise ValueError("aerial depth does not match the aerial camera")
    pix_all, val_all = [], []
    for umap, cam, depth in zip(ground_maps, ground_cams, ground_depths):
        if depth is None:
            raise ValueError("missing ground depth map")
        depth = np.asarray(depth, dtype=np.float64)
        if depth.shape != (cam.height, cam.width) or umap.shape != depth.shape:
            raise ValueError("ground map, depth and camera disagree in size")
        ok = umap.valid & np.isfinite(depth) & (depth > 0)
        ys, xs = np.nonzero(ok)
        if len(ys) == 0:
            continue
        src_pix = np.stack([xs, ys], axis=1).astype(np.float64)
        dst_pix, dst_z, front = reproject_pixels(cam, depth[ys, xs], aerial_cam, src_pix)
        u = np.floor(dst_pix[:, 0] + 0.5)
        v = np.floor(dst_pix[:, 1] + 0.5)
        keep = front & (u >= 0) & (u < W) & (v >= 0) & (v < H)
        ui, vi = u[keep].astype(np.int64), v[keep].astype(np.int64)
        vals = umap.values[ys[keep], xs[keep]]
        if aerial_depth is not None:
            ad = aerial_depth[vi, ui]
            visible = ~(np.isfinite(ad) & (dst_z[keep] > ad + occlusion_tol))
            ui, vi, vals = ui[visible], vi[visible], vals[visible]
        pix_all.append(vi * W + ui)
        val_all.append(vals)
    if pix_all:
        pix = np.concatenate(pix_all)
        val = np.concatenate(val_all)
        order = np.argsort(pix, kind="stable")
        pix, val = pix[order], val[order]
    else:
        pix, val = np.zeros(0, np.int64), np.zeros(0)
    return MatchSet((H, W), pix, val)


def project_uncertainty(ground_maps, ground_cams, ground_depths, aerial_cams, aerial_depths=None,
                        occlusion_tol=OCCLUSION_TOL):
    """Raw aerial UncertaintyMaps: per aerial pixel, the mean of every ground value landing on it."""
    if not (len(ground_maps) == len(ground_cams) == len(ground_depths)):
        raise ValueError("ground maps, cameras and depths differ in count")
    if aerial_depths is not None and len(aerial_depths) != len(aerial_cams):
        raise ValueError("need one aerial depth map per aerial camera")
    out = []
    for i, cam in enumerate(aerial_cams):
        ad = None if aerial_depths is None else aerial_depths[i]
        out.append(collect_matches(ground_maps, ground_cams, ground_depths, cam, ad, occlusion_tol).averaged())
    return out


def normalize_maps(maps, n=DEFAULT_ROOT):
    """clip((U / (max - min)) ** (1/n), 0, 1) with max and min taken jointly over all valid pixels.

    A degenerate spread (max == min, or no valid pixel at all) yields
    all-zero maps and a warning.
    """
    maps = list(maps)
    if not maps:
        raise ValueError("no maps to normalize")
    if n < 1:
        raise ValueError(f"root n must be >= 1, got {n}")
    vals = np.concatenate([m.values[m.valid] for m in maps])
    if vals.size == 0 or vals.max() == vals.min():
        warnings.warn("uncertainty maps have zero spread; emitting all-zero weights", RuntimeWarning, stacklevel=2)
        return [UncertaintyMap(np.zeros(m.shape), m.valid) for m in maps]
    spread = vals.max() - vals.min()
    out = []
    for m in maps:
        u = np.clip((m.values / spread) ** (1.0 / n), 0.0, 1.0)
        out.append(UncertaintyMap(u, m.valid))
    return out


# --------------------------------------------------------------------------
# pipeline


@dataclass
class CrossViewWeights:
    weights: list            # normalized aerial maps, one per aerial camera
    raw_aerial: list
    ground: list             # raw per-ground-camera maps
    aerial_ids: list
    ground_ids: list

    def weight_arrays(self):
        return {i: m.values for i, m in zip(self.aerial_ids, self.weights)}

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for cid, m in zip(self.aerial_ids, self.weights):
            m.save(out / f"{cid}.ucmap")
            m.save_png(out / f"{cid}.png")
        for cid, m in zip(self.ground_ids, self.ground):
            m.save(out / "ground" / f"{cid}.ucmap")
        return out


def member_renders(fields, camera: Camera, background, settings: RasterSettings, n_threads=None):
    """(colors, depths) of every member at one camera; depth is NaN where a member draws nothing."""
    colors, depths = [], []
    for f in fields:
        o = render(f, camera, background, settings, n_threads=n_threads)
        colors.append(o.color.astype(np.float64))
        depths.append(np.where(o.depth_valid, o.depth.astype(np.float64), np.nan))
    return colors, depths


def mean_depth(depths):
    """Member-averaged depth, NaN unless every member has depth at the pixel."""
    s = np.sort(np.stack(depths), axis=0)
    return s.mean(axis=0)


def load_weight_maps(weights_dir, aerial_ids):
    """Read ``<id>.ucmap`` for each aerial id; invalid pixels become weight 0."""
    d = Path(weights_dir)
    out = {}
    for cid in aerial_ids:
        p = d / f"{cid}.ucmap"
        if not p.exists():
            raise FileNotFoundError(f"no weight map for aerial view {cid} in {d}")
        out[cid] = UncertaintyMap.load(p).values
    return out


def build_cross_view_weights(fields, ground_cams, aerial_cams, n=DEFAULT_ROOT, background=(0.0, 0.0, 0.0),
                             settings: RasterSettings = RasterSettings(), occlusion_tol=OCCLUSION_TOL,
                             ground_ids=None, aerial_ids=None, out_dir=None, n_threads=None) -> CrossViewWeights:
    """Ensemble renders on ground cameras -> uncertainty -> aerial projection -> weight maps."""
    fields = list(fields)
    if len(fields) < 2:
        raise ValueError("need an ensemble of at least 2 fields")
    ground_ids = list(ground_ids or [f"g{i:03d}" for i in range(len(ground_cams))])
    aerial_ids = list(aerial_ids or [f"a{i:03d}" for i in range(len(aerial_cams))])
    gmaps, gdepths = [], []
    for cam in ground_cams:
        colors, depths = member_renders(fields, cam, background, settings, n_threads)
        _, var = ensemble_stats(colors)
        d = mean_depth(depths)
        gmaps.append(fuse_channels(var, np.isfinite(d)))
        gdepths.append(d)
    adepths = [mean_depth(member_renders(fields, cam, background, settings, n_threads)[1]) for cam in aerial_cams]
    raw = project_uncertainty(gmaps, ground_cams, gdepths, aerial_cams, adepths, occlusion_tol)
    weights = normalize_maps(raw, n)
    result = CrossViewWeights(weights, raw, gmaps, aerial_ids, ground_ids)
    if out_dir is not None:
        result.save(out_dir)
    return result
