import os
import sys

os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

import numpy as np
import pytest

from cvsplat.gaussians import GaussianField
from cvsplat.geometry import Camera, RigidTransform
from cvsplat.scenegen import SceneSpec, generate, save_bundle

TINY_SPEC = dict(width=48, height=24, n_ground_train=8, n_aerial_train=8, n_heldout=4, building_count=4,
                 supersample=1, road_length=16)


def small_camera(w=16, h=16, f=20.0, pose=None):
    return Camera(f, f, w / 2, h / 2, w, h, pose or RigidTransform())


def random_field(rng, n, dtype=np.float64, depth=(2.0, 4.0), spread=0.6, scale=(-2.5, -1.2)):
    """n Gaussians in front of an identity camera, roughly inside a 90 degree frustum."""
    z = rng.uniform(*depth, n)
    mu = np.stack([rng.uniform(-spread, spread, n) * z * 0.5, rng.uniform(-spread, spread, n) * z * 0.5, z], 1)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianField(
        mu=mu, rot=q, log_scale=rng.uniform(*scale, (n, 3)),
        opacity_logit=rng.uniform(-1.0, 2.0, n), color=rng.uniform(0.05, 0.95, (n, 3)), dtype=dtype,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_scene(tmp_path_factory):
    """A 48 x 24 street scene on disk; returns the manifest path."""
    out = tmp_path_factory.mktemp("tiny_scene")
    return save_bundle(generate(SceneSpec(**TINY_SPEC), init_points=800), out)



def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        ok, detail = mod.RESULTS[n]
        tr.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    for title, text in mod.REPORTS:
        tr.write_line("")
        tr.write_line(title)
        for line in text.rstrip("\n").splitlines():
            tr.write_line("  " + line)
