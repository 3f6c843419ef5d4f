"""Gaussian splatting with cross-view uncertainty weighting of aerial training views."""

import os

# the OpenMP layer is always present; TBB often is not and numba warns about it
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

from .estimator import CrossViewUncertainty, GaussianSplatRegressor, SplatEnsemble  # noqa: E402
from .evaluation import ProtocolResult, run_n_ablation, run_protocol  # noqa: E402
from .gaussians import GaussianField, load_checkpoint, save_checkpoint  # noqa: E402
from .geometry import Camera, RigidTransform  # noqa: E402
from .rasterizer import RasterSettings, render, render_backward  # noqa: E402
from .scenegen import SceneSpec, generate, load_manifest, save_bundle  # noqa: E402
from .trainer import TrainConfig, init_field, train, train_ensemble  # noqa: E402
from .uncertainty import UncertaintyMap, build_cross_view_weights, normalize_maps  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "CrossViewUncertainty",
    "GaussianField",
    "GaussianSplatRegressor",
    "ProtocolResult",
    "RigidTransform",
    "RasterSettings",
    "SceneSpec",
    "SplatEnsemble",
    "TrainConfig",
    "UncertaintyMap",
    "build_cross_view_weights",
    "generate",
    "init_field",
    "load_checkpoint",
    "load_manifest",
    "normalize_maps",
    "render",
    "render_backward",
    "run_n_ablation",
    "run_protocol",
    "save_bundle",
    "save_checkpoint",
    "train",
    "train_ensemble",
]
