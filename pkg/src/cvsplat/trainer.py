"""Optimization of a GaussianField against posed images.

Three regimes share one loop: ground-only, equal-weight joint aerial+ground,
and uncertainty-weighted joint training where each aerial view carries a
per-pixel weight map. Ground views always train with unit weights.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import io as uio
from .gaussians import LOG_SCALE_MAX, LOG_SCALE_MIN, PARAM_GROUPS, GaussianField, logit
from .geometry import Camera, quat_to_matrix
from .losses import LAMBDA_SSIM, LAMBDA_VOL, total_loss
from .rasterizer import RasterSettings, render, render_backward
from .scenegen import SKY

log = logging.getLogger(__name__)

GROUND_VIEW, AERIAL_VIEW = "ground", "aerial"
REGIMES = ("ground", "joint", "uc")


@dataclass
class TrainConfig:
    iterations: int = 15000
    lr_mu: float = 1.6e-4
    lr_mu_final_ratio: float = 0.01
    lr_rot: float = 1e-3
    lr_log_scale: float = 5e-3
    lr_opacity_logit: float = 5e-2
    lr_color: float = 2.5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-15
    lambda_ssim: float = LAMBDA_SSIM
    lambda_vol: float = LAMBDA_VOL
    root_n: int = 6
    ensemble_size: int = 4
    densify_interval: int = 100
    densify_from: int = 500
    densify_until: float = 0.6
    densify_grad_threshold: float = 2e-4
    split_scale_threshold: float = 0.2
    prune_opacity: float = 0.005
    max_gaussians: int = 30000
    init_opacity: float = 0.1
    init_jitter: float = 0.01
    seed: int = 0
    background: tuple = SKY
    tile_size: int = 16
    alpha_max: float = 0.99
    t_min: float = 1e-4
    alpha_eps: float = 1e-5
    occlusion_tol: float = 0.1
    threads: int = 1

    def __post_init__(self):
        self.background = tuple(float(c) for c in self.background)
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.ensemble_size < 2:
            raise ValueError("ensemble_size must be >= 2")
        if self.root_n < 1:
            raise ValueError("root_n must be >= 1")
        if not 0 <= self.lambda_ssim < 1 or self.lambda_vol < 0:
            raise ValueError("lambda_ssim must be in [0, 1) and lambda_vol >= 0")
        if len(self.background) != 3:
            raise ValueError("background must have three components")

    @property
    def raster(self) -> RasterSettings:
        return RasterSettings(self.tile_size, self.alpha_max, self.t_min, self.alpha_eps)

    def lr(self, group, iteration):
        if group == "mu":
            frac = min(iteration / max(self.iterations, 1), 1.0)
            return self.lr_mu * self.lr_mu_final_ratio ** frac
        return getattr(self, f"lr_{group}")

    def to_dict(self):
        return asdict(self)

    def updated(self, **overrides):
        return replace(self, **overrides)

    @classmethod
    def from_mapping(cls, mapping, base=None):
        base = base or cls()
        defaults = asdict(base)
        kw = {}
        for k, v in mapping.items():
            if k not in defaults:
                raise ValueError(f"unknown config key: {k}")
            kw[k] = uio.coerce(v, defaults[k]) if isinstance(v, str) else v
        return replace(base, **kw)

    @classmethod
    def from_file(cls, path, **overrides):
        cfg = cls.from_mapping(uio.read_kv(path))
        return cfg.from_mapping(overrides, cfg) if overrides else cfg

    def save(self, path):
        uio.write_kv(path, self.to_dict())


@dataclass
class View:
    camera: Camera
    image: np.ndarray
    view_class: str = GROUND_VIEW
    weight: np.ndarray | None = None
    id: str = ""

    def __post_init__(self):
        if self.view_class not in (GROUND_VIEW, AERIAL_VIEW):
            raise ValueError(f"view_class must be 'ground' or 'aerial', got {self.view_class!r}")
        shape = (self.camera.height, self.camera.width)
        self.image = np.ascontiguousarray(self.image, dtype=np.float32)
        if self.image.shape != shape + (3,):
            raise ValueError(f"view {self.id}: image {self.image.shape} does not match camera {shape}")
        if self.weight is not None:
            if self.view_class != AERIAL_VIEW:
                raise ValueError(f"view {self.id}: weight maps apply to aerial views only")
            w = np.asarray(self.weight, dtype=np.float64)
            if w.shape != shape:
                raise ValueError(f"view {self.id}: weight map {w.shape} does not match image {shape}")
            if np.any(~np.isfinite(w)) or w.min() < 0 or w.max() > 1:
                raise ValueError(f"view {self.id}: weight map values must lie in [0, 1]")
            self.weight = w.astype(np.float32)


@dataclass
class TrainingSet:
    views: list = field(default_factory=list)

    def __post_init__(self):
        if not self.views:
            raise ValueError("training set is empty")

    def __len__(self):
        return len(self.views)

    def __iter__(self):
        return iter(self.views)

    @property
    def weighted(self):
        return any(v.weight is not None for v in self.views)

    def of_class(self, view_class):
        return [v for v in self.views if v.view_class == view_class]


@dataclass
class TraceRow:
    iteration: int
    l_color: float
    l_ssim: float
    l_vol: float
    total: float
    n_gaussians: int = 0
    view: str = ""


def write_trace(path, trace):
    lines = ["iter,l_color,l_ssim,l_vol,total"]
    lines += [f"{r.iteration},{r.l_color!r},{r.l_ssim!r},{r.l_vol!r},{r.total!r}" for r in trace]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


def read_trace(path):
    rows = Path(path).read_text().splitlines()[1:]
    out = []
    for r in rows:
        it, a, b, c, d = r.split(",")
        out.append(TraceRow(int(it), float(a), float(b), float(c), float(d)))
    return out


# --------------------------------------------------------------------------


def init_field(points, colors, config: TrainConfig = TrainConfig(), seed=None, dtype=np.float32) -> GaussianField:
    """One isotropic Gaussian per point, scaled by the mean distance to its 3 nearest neighbours.

    Means get N(0, init_jitter^2) jitter drawn from ``seed`` so ensemble
    members start from distinct but nearby fields.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("cannot initialize from an empty point set")
    cols = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if len(cols) != len(pts):
        raise ValueError("points and colors differ in length")
    k = len(pts)
    if k > 1:
        nn = min(3, k - 1)
        dist, _ = cKDTree(pts).query(pts, k=nn + 1)
        mean_d = dist[:, 1:].mean(axis=1)
        mean_d = np.where(mean_d > 0, mean_d, np.median(mean_d[mean_d > 0]) if np.any(mean_d > 0) else 1.0)
        ls = np.log(mean_d)
    else:
        ls = np.zeros(1)
    ls = np.clip(ls, LOG_SCALE_MIN, LOG_SCALE_MAX)
    rng = np.random.default_rng(config.seed if seed is None else seed)
    mu = pts + rng.normal(0.0, config.init_jitter, size=pts.shape) if config.init_jitter > 0 else pts
    rot = np.tile([1.0, 0.0, 0.0, 0.0], (k, 1))
    return GaussianField(
        mu, rot, np.repeat(ls[:, None], 3, axis=1), np.full(k, logit(config.init_opacity)), cols, dtype
    )


class Adam:
    """Adam over the parameter groups of a GaussianField, one learning rate per group."""

    def __init__(self, field_: GaussianField, config: TrainConfig):
        self.config = config
        self.step_count = 0
        self.m = {g: np.zeros_like(getattr(field_, g)) for g in PARAM_GROUPS}
        self.v = {g: np.zeros_like(getattr(field_, g)) for g in PARAM_GROUPS}

    def step(self, field_: GaussianField, grads: dict, iteration: int):
        c = self.config
        self.step_count += 1
        bc1 = 1.0 - c.beta1 ** self.step_count
        bc2 = 1.0 - c.beta2 ** self.step_count
        for g in PARAM_GROUPS:
            grad = grads[g].astype(field_.dtype, copy=False)
            m, v = self.m[g], self.v[g]
            m *= c.beta1
            m += (1.0 - c.beta1) * grad
            v *= c.beta2
            v += (1.0 - c.beta2) * grad * grad
            lr = c.lr(g, iteration)
            p = getattr(field_, g)
            p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)).astype(field_.dtype)

    def remap(self, keep_index, n_new):
        """Carry state for kept rows (in order) and append ``n_new`` zeroed rows."""
        for state in (self.m, self.v):
            for g in PARAM_GROUPS:
                old = state[g][keep_index]
                pad = np.zeros((n_new,) + old.shape[1:], dtype=old.dtype)
                state[g] = np.concatenate([old, pad])


def densify_and_prune(field_: GaussianField, config: TrainConfig, optimizer: Adam | None = None) -> GaussianField:
    """Clone or split Gaussians with large mean screen-space gradients, drop transparent ones.

    Small Gaussians are cloned in place; large ones (max scale above
    ``split_scale_threshold``) are replaced by two children offset by half a
    standard deviation along their major axis, with scales divided by 1.6.
    Statistics are reset afterwards.
    """
    n = len(field_)
    count = np.maximum(field_.grad_count, 1)
    mean_grad = np.where(field_.grad_count > 0, field_.grad_accum / count, 0.0)
    selected = mean_grad >= config.densify_grad_threshold
    room = config.max_gaussians - n
    if selected.sum() > max(room, 0):
        selected[:] = False
        if room > 0:
            top = np.argsort(-mean_grad, kind="stable")[:room]
            selected[top] = mean_grad[top] >= config.densify_grad_threshold
    scales = field_.scales
    large = scales.max(axis=1) > config.split_scale_threshold
    clone = selected & ~large
    split = selected & large

    # children of split Gaussians
    sidx = np.nonzero(split)[0]
    R = quat_to_matrix(field_.rot[sidx].astype(np.float64)) if len(sidx) else np.zeros((0, 3, 3))
    major = np.argmax(scales[sidx], axis=1)
    axis = R[np.arange(len(sidx)), :, major] if len(sidx) else np.zeros((0, 3))
    offset = 0.5 * scales[sidx, major][:, None] * axis
    child_mu = np.concatenate([field_.mu[sidx] + offset, field_.mu[sidx] - offset])
    child = {
        "mu": child_mu,
        "rot": np.tile(field_.rot[sidx], (2, 1)),
        "log_scale": np.tile(field_.log_scale[sidx] - np.log(1.6), (2, 1)),
        "opacity_logit": np.tile(field_.opacity_logit[sidx], 2),
        "color": np.tile(field_.color[sidx], (2, 1)),
    }
    cidx = np.nonzero(clone)[0]
    keep = np.nonzero(~split)[0]
    new_params = {
        g: np.concatenate([getattr(field_, g)[keep], getattr(field_, g)[cidx], child[g].astype(field_.dtype)])
        for g in PARAM_GROUPS
    }
    out = GaussianField(*(new_params[g] for g in PARAM_GROUPS), dtype=field_.dtype)
    out.iteration = field_.iteration
    if optimizer is not None:
        optimizer.remap(keep, len(cidx) + len(child_mu))

    alive = out.opacity >= config.prune_opacity
    if not np.all(alive) and np.any(alive):
        out = out.subset(np.nonzero(alive)[0])
        if optimizer is not None:
            optimizer.remap(np.nonzero(alive)[0], 0)
    out.reset_stats()
    return out


def _densify_due(iteration, config: TrainConfig):
    return (
        iteration > config.densify_from
        and iteration % config.densify_interval == 0
        and iteration < config.densify_until * config.iterations
    )


def train(field_: GaussianField, training_set: TrainingSet, config: TrainConfig, callback=None):
    """Run ``config.iterations`` steps; returns (trained field, loss trace).

    Views are visited in a seeded shuffle that is redrawn every epoch, so the
    result is fully determined by (seed, config, data).
    """
    views = list(training_set)
    field_ = field_.copy()
    field_.reset_stats()
    rng = np.random.default_rng([config.seed, 2])
    opt = Adam(field_, config)
    settings = config.raster
    bg = np.asarray(config.background, dtype=field_.dtype)
    trace = []
    queue = []
    for it in range(1, config.iterations + 1):
        if not queue:
            queue = list(rng.permutation(len(views))[::-1])
        view = views[queue.pop()]
        cam = view.camera
        out = render(field_, cam, bg, settings, n_threads=config.threads)
        lb = total_loss(view.weight, out.color, view.image, field_, config.lambda_ssim, config.lambda_vol)
        if not math.isfinite(lb.total):
            raise FloatingPointError(f"non-finite loss at iteration {it} on view {view.id or '?'}")
        grads = render_backward(field_, cam, out, lb.d_color, lb.d_alpha, n_threads=config.threads)
        gd = grads.as_dict()
        gd["log_scale"] = gd["log_scale"] + lb.d_log_scale.astype(field_.dtype)
        opt.step(field_, gd, it)
        field_.normalize_rotations()
        field_.clamp_scales()
        vis = grads.visible
        field_.grad_accum[vis] += grads.mean2d_norm(cam)[vis]
        field_.grad_count[vis] += 1
        field_.iteration = it
        trace.append(TraceRow(it, lb.l_color, lb.l_ssim, lb.l_vol, lb.total, len(field_), view.id))
        if _densify_due(it, config):
            field_ = densify_and_prune(field_, config, opt)
        if callback is not None:
            callback(it, field_, trace[-1])
    return field_, trace


def ensemble_seeds(base_seed: int, members: int):
    ss = np.random.SeedSequence(base_seed).spawn(members)
    return [int(s.generate_state(1, np.uint32)[0]) for s in ss]


def _train_member(args):
    points, colors, training_set, config = args
    f0 = init_field(points, colors, config)
    f, trace = train(f0, training_set, config)
    return f, trace


def train_ensemble(points, colors, training_set: TrainingSet, config: TrainConfig, members=None, seeds=None,
                   workers: int = 1):
    """Train M ground-only members that differ only in seed; output in seed order."""
    if any(v.view_class != GROUND_VIEW for v in training_set):
        raise ValueError("ensemble members train on ground views only")
    m = members if members is not None else (len(seeds) if seeds is not None else config.ensemble_size)
    if m < 2:
        raise ValueError("an ensemble needs at least 2 members")
    seeds = ensemble_seeds(config.seed, m) if seeds is None else list(seeds)
    if len(seeds) != m:
        raise ValueError("need one seed per member")
    jobs = [(points, colors, training_set, replace(config, seed=s)) for s in seeds]
    results = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futures = [ex.submit(_train_member, j) for j in jobs]
            for i, fut in enumerate(futures):
                try:
                    results.append(fut.result())
                except Exception as exc:
                    raise RuntimeError(f"ensemble member {i} failed: {exc}") from exc
    else:
        for i, j in enumerate(jobs):
            try:
                results.append(_train_member(j))
            except Exception as exc:
                raise RuntimeError(f"ensemble member {i} failed: {exc}") from exc
    return [f for f, _ in results], [t for _, t in results]
