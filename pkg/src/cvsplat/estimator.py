"""scikit-learn style wrappers around the trainer and the uncertainty pipeline.

``X`` is always a sequence of :class:`~cvsplat.geometry.Camera` and ``y`` a
sequence of H x W x 3 images in [0, 1]. Per-pixel weight maps travel as
``sample_weight``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .losses import psnr
from .rasterizer import render
from .trainer import (
    AERIAL_VIEW,
    GROUND_VIEW,
    TrainConfig,
    TrainingSet,
    View,
    init_field,
    train,
    train_ensemble,
)
from .uncertainty import (
    DEFAULT_ROOT,
    OCCLUSION_TOL,
    ensemble_stats,
    fuse_channels,
    mean_depth,
    member_renders,
    normalize_maps,
    project_uncertainty,
)
from .validation import check_cameras, check_points, check_weight_map


def _config(config, random_state):
    cfg = config if config is not None else TrainConfig()
    if not isinstance(cfg, TrainConfig):
        cfg = TrainConfig.from_mapping(dict(cfg))
    return cfg if random_state is None else cfg.updated(seed=int(random_state))


def _training_set(cameras, images, sample_weight, view_classes, ids):
    n = len(cameras)
    classes = list(view_classes) if view_classes is not None else [GROUND_VIEW] * n
    weights = list(sample_weight) if sample_weight is not None else [None] * n
    ids = list(ids) if ids is not None else [f"view{i:03d}" for i in range(n)]
    if not (len(classes) == len(weights) == len(ids) == n):
        raise ValueError("view_classes, sample_weight and ids must match the number of cameras")
    views = []
    for cam, img, cls, w, vid in zip(cameras, images, classes, weights, ids):
        w = check_weight_map(w, (cam.height, cam.width), f"weight map for {vid}")
        views.append(View(cam, img, cls, w, vid))
    return TrainingSet(views)


def _predict(field_, cameras, background, settings, n_threads):
    bg = np.asarray(background, dtype=np.float32)
    return [render(field_, c, bg, settings, n_threads=n_threads).color for c in cameras]


class GaussianSplatRegressor(BaseEstimator):
    """Fit a Gaussian field to posed images; ``predict`` renders new cameras.

    Parameters
    ----------
    config : TrainConfig or mapping, optional
        Optimization settings; defaults to ``TrainConfig()``.
    random_state : int, optional
        Overrides ``config.seed`` when given.
    """

    def __init__(self, config=None, random_state=None):
        self.config = config
        self.random_state = random_state

    def fit(self, X, y, sample_weight=None, points=None, colors=None, view_classes=None, ids=None):
        cameras, images = check_cameras(X, y)
        if points is None:
            raise ValueError("an initialization point cloud is required")
        pts, cols = check_points(points, colors)
        cfg = _config(self.config, self.random_state)
        if sample_weight is not None and view_classes is None:
            view_classes = [AERIAL_VIEW if w is not None else GROUND_VIEW for w in sample_weight]
        ts = _training_set(cameras, images, sample_weight, view_classes, ids)
        self.config_ = cfg
        self.field_, self.loss_trace_ = train(init_field(pts, cols, cfg), ts, cfg)
        self.n_gaussians_ = len(self.field_)
        return self

    def predict(self, X):
        check_is_fitted(self, "field_")
        cfg = self.config_
        return _predict(self.field_, check_cameras(X), cfg.background, cfg.raster, cfg.threads)

    def score(self, X, y):
        """Mean PSNR (dB) of the renders against ``y``."""
        cameras, images = check_cameras(X, y)
        return float(np.mean([psnr(p, t) for p, t in zip(self.predict(cameras), images)]))


class SplatEnsemble(BaseEstimator):
    """M Gaussian fields trained on the same ground views with different seeds."""

    def __init__(self, n_members=4, config=None, random_state=None, workers=1):
        self.n_members = n_members
        self.config = config
        self.random_state = random_state
        self.workers = workers

    def fit(self, X, y, points=None, colors=None, ids=None):
        cameras, images = check_cameras(X, y)
        if points is None:
            raise ValueError("an initialization point cloud is required")
        pts, cols = check_points(points, colors)
        cfg = _config(self.config, self.random_state)
        ts = _training_set(cameras, images, None, None, ids)
        self.config_ = cfg
        self.members_, self.loss_traces_ = train_ensemble(pts, cols, ts, cfg, self.n_members, workers=self.workers)
        return self

    @classmethod
    def from_fields(cls, fields, config=None):
        est = cls(n_members=len(fields), config=config)
        est.config_ = _config(config, None)
        est.members_ = list(fields)
        est.loss_traces_ = [[] for _ in fields]
        return est

    def predict(self, X):
        """Member-mean render per camera."""
        return [m for m, _ in self.predict_stats(X)]

    def predict_stats(self, X):
        """(mean, variance) images per camera."""
        check_is_fitted(self, "members_")
        cfg = self.config_
        out = []
        for cam in check_cameras(X):
            colors, _ = member_renders(self.members_, cam, cfg.background, cfg.raster, cfg.threads)
            out.append(ensemble_stats(colors))
        return out


class CrossViewUncertainty(TransformerMixin, BaseEstimator):
    """Learn ground-view uncertainty from an ensemble, then map aerial cameras to weight maps.

    ``fit(ground_cameras, ensemble=...)`` renders every member at each ground
    camera; ``transform(aerial_cameras)`` projects the fused uncertainty into
    those cameras and normalizes jointly across them.
    """

    def __init__(self, n_root=DEFAULT_ROOT, occlusion_tol=OCCLUSION_TOL):
        self.n_root = n_root
        self.occlusion_tol = occlusion_tol

    def fit(self, X, y=None, ensemble=None):
        if ensemble is None:
            raise ValueError("fit needs a fitted SplatEnsemble via ensemble=")
        check_is_fitted(ensemble, "members_")
        cams = check_cameras(X)
        cfg = ensemble.config_
        maps, depths = [], []
        for cam in cams:
            colors, ds = member_renders(ensemble.members_, cam, cfg.background, cfg.raster, cfg.threads)
            _, var = ensemble_stats(colors)
            d = mean_depth(ds)
            maps.append(fuse_channels(var, np.isfinite(d)))
            depths.append(d)
        self.ensemble_ = ensemble
        self.ground_cameras_ = cams
        self.ground_maps_ = maps
        self.ground_depths_ = depths
        return self

    def transform_raw(self, X):
        check_is_fitted(self, "ground_maps_")
        cams = check_cameras(X)
        ens = self.ensemble_
        cfg = ens.config_
        adepths = [mean_depth(member_renders(ens.members_, c, cfg.background, cfg.raster, cfg.threads)[1])
                   for c in cams]
        return project_uncertainty(self.ground_maps_, self.ground_cameras_, self.ground_depths_, cams, adepths,
                                   self.occlusion_tol)

    def transform(self, X):
        """Normalized weight maps (H x W arrays in [0, 1]), one per camera."""
        return [m.values for m in normalize_maps(self.transform_raw(X), self.n_root)]
