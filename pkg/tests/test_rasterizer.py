import os
import subprocess
import sys
import textwrap

import numpy as np
import pytest

from cvsplat.gaussians import GaussianField, logit
from cvsplat.rasterizer import EXACT, RasterSettings, render, render_backward, render_depth
from cvsplat.reference import finite_difference, loss_gradients, loss_value, relative_error, render_reference

from conftest import random_field, small_camera

GROUPS = ("mu", "rot", "log_scale", "opacity_logit", "color")


def centered(z, opacity, color, scale=0.05, dtype=np.float64):
    """A splat whose mean lands exactly on pixel (8, 8) of ``small_camera``."""
    return dict(mu=[0.0, 0.0, z], rot=[1, 0, 0, 0], log_scale=[np.log(scale * z)] * 3,
                opacity_logit=float(logit(opacity)), color=color)


def field_of(*splats, dtype=np.float64):
    cols = {k: [s[k] for s in splats] for k in splats[0]}
    return GaussianField(**cols, dtype=dtype)


def test_empty_field_is_background():
    cam = small_camera()
    out = render(GaussianField.empty(), cam, (0.2, 0.2, 0.2))
    np.testing.assert_allclose(out.color, 0.2, rtol=1e-7)
    assert np.all(out.alpha == 0)
    assert np.isnan(render_depth(GaussianField.empty(), cam)).all()


def test_opaque_splat_hits_alpha_clamp():
    cam = small_camera()
    f = field_of(dict(centered(2.0, 0.5, [1, 0, 0]), opacity_logit=12.0))
    out = render(f, cam, (0, 0, 0))
    np.testing.assert_allclose(out.color[8, 8], [0.99, 0, 0], atol=1e-7)


def test_two_splat_compositing():
    cam = small_camera()
    f = field_of(centered(2.0, 0.5, [0, 0, 0]), centered(1.0, 0.5, [1, 1, 1]))
    out = render(f, cam, (0, 0, 0))
    np.testing.assert_allclose(out.color[8, 8], 0.5, atol=1e-12)
    assert out.alpha[8, 8] == pytest.approx(0.75)


def test_depth_of_single_opaque_splat():
    cam = small_camera()
    f = field_of(dict(centered(2.0, 0.5, [1, 1, 1]), opacity_logit=12.0))
    assert render_depth(f, cam)[8, 8] == pytest.approx(2.0, abs=1e-3)


def test_depth_of_equal_blend_weights():
    # weights 1/3 and 0.5 * (1 - 1/3) = 1/3
    cam = small_camera()
    f = field_of(centered(1.0, 1 / 3, [1, 1, 1]), centered(3.0, 0.5, [1, 1, 1]))
    assert render_depth(f, cam)[8, 8] == pytest.approx(2.0, abs=1e-9)


def test_zero_upstream_gradient_gives_zero(rng):
    cam = small_camera()
    f = random_field(rng, 6)
    out = render(f, cam)
    g = render_backward(f, cam, out, np.zeros((16, 16, 3)))
    for name in GROUPS:
        assert not np.any(getattr(g, name))


def test_backward_checks_its_inputs(rng):
    cam = small_camera()
    f = random_field(rng, 3)
    out = render(f, cam)
    with pytest.raises(ValueError, match="d_color"):
        render_backward(f, cam, out, np.zeros((4, 4, 3)))
    with pytest.raises(ValueError, match="different"):
        render_backward(f, small_camera(), out, np.zeros((16, 16, 3)))


def _check_fd(f, cam, rng, tol, h=1e-4):
    target = rng.uniform(size=(16, 16, 3))
    weights = rng.uniform(size=(16, 16))
    bg = (0.3, 0.5, 0.2)
    _, grads = loss_gradients(f, cam, target, weights, bg)
    for name in GROUPS:
        fd = finite_difference(lambda x: loss_value(x, cam, target, weights, bg), f, name, h)
        err = relative_error(grads[name], fd)
        assert err < tol, (name, err)


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-6), (np.float32, 1e-3)])
def test_single_gaussian_gradients(rng, dtype, tol):
    f = random_field(rng, 1, dtype, scale=(-1.5, -0.8))
    _check_fd(f, small_camera(), rng, tol)


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-6), (np.float32, 1e-3)])
def test_overlapping_gaussian_gradients(rng, dtype, tol):
    f = random_field(rng, 10, dtype, spread=0.3)
    _check_fd(f, small_camera(), rng, tol)


def test_gradients_when_frustum_clamp_is_active(rng):
    # a close camera with splats far to the side exercises the clamped Jacobian branch
    n = 8
    mu = np.c_[rng.uniform(-2.5, 2.5, n), rng.uniform(-0.4, 0.4, n), rng.uniform(0.5, 1.0, n)]
    q = rng.normal(size=(n, 4))
    f = GaussianField(mu, q, rng.normal(-1.0, 0.3, (n, 3)), rng.normal(0, 1, n), rng.uniform(0.1, 0.9, (n, 3)),
                      np.float64)
    _check_fd(f, small_camera(), rng, 1e-6, h=1e-5)


@pytest.mark.parametrize("settings", [EXACT, RasterSettings()], ids=["exact", "default"])
def test_matches_reference_renderer(rng, settings):
    cam = small_camera(24, 20)
    for _ in range(3):
        f = random_field(rng, 12)
        color, alpha = render_reference(f, cam, (0.1, 0.2, 0.3))
        out = render(f, cam, (0.1, 0.2, 0.3), settings)
        assert np.abs(out.color - color).max() < 1e-4
        assert np.abs(out.alpha - alpha).max() < 1e-4


@pytest.mark.parametrize("tile", [1, 4, 8, 32])
def test_tile_size_does_not_change_pixels(rng, tile):
    cam = small_camera(40, 24)
    f = random_field(rng, 30)
    a = render(f, cam, (0, 0, 0), RasterSettings(tile_size=16))
    b = render(f, cam, (0, 0, 0), RasterSettings(tile_size=tile))
    np.testing.assert_array_equal(a.color, b.color)


def test_render_is_deterministic(rng):
    cam = small_camera(32, 32)
    f = random_field(rng, 40, np.float32)
    d = rng.normal(size=(32, 32, 3)).astype(np.float32)
    a, b = render(f, cam), render(f, cam)
    np.testing.assert_array_equal(a.color, b.color)
    ga, gb = render_backward(f, cam, a, d), render_backward(f, cam, b, d)
    for name in GROUPS:
        np.testing.assert_array_equal(getattr(ga, name), getattr(gb, name))


def test_output_invariant_to_thread_count():
    script = textwrap.dedent("""
        import numpy as np
        from cvsplat.rasterizer import render, render_backward
        from conftest import random_field, small_camera
        rng = np.random.default_rng(5)
        cam = small_camera(64, 48)
        f = random_field(rng, 200, np.float32)
        d = rng.normal(size=(48, 64, 3)).astype(np.float32)
        outs = []
        for t in (1, 3, 4):
            o = render(f, cam, (0.2, 0.3, 0.4), n_threads=t)
            g = render_backward(f, cam, o, d, n_threads=t)
            outs.append(o.color.tobytes() + o.depth.tobytes() + b"".join(v.tobytes() for v in g.as_dict().values()))
        assert outs[0] == outs[1] == outs[2]
        print("ok")
    """)
    env = dict(os.environ, NUMBA_NUM_THREADS="4")
    res = subprocess.run([sys.executable, "-c", script], cwd=os.path.dirname(__file__), env=env,
                         capture_output=True, text=True, timeout=600)
    assert res.returncode == 0, res.stderr
    assert res.stdout.strip().endswith("ok")
