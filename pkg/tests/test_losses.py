import numpy as np
import pytest
from scipy.ndimage import correlate1d

from cvsplat.gaussians import GaussianField
from cvsplat.losses import (
    C1,
    LAMBDA_VOL,
    gaussian_blur,
    gaussian_blur_adjoint,
    l1_loss,
    psnr,
    ssim,
    ssim_loss,
    ssim_map,
    total_loss,
    volume_reg,
    weighted_l1,
    weighted_ssim_loss,
)


def unit_field(k):
    return GaussianField(np.zeros((k, 3)), [[1, 0, 0, 0]] * k, np.zeros((k, 3)), np.zeros(k), np.zeros((k, 3)))


def test_weighted_l1_examples(rng):
    a = rng.uniform(size=(5, 6, 3))
    assert weighted_l1(np.ones((5, 6)), a, a)[0] == 0
    assert weighted_l1(np.zeros((5, 6)), a, rng.uniform(size=a.shape))[0] == 0
    r = np.array([[[0.2] * 3], [[0.4] * 3]])
    assert weighted_l1(np.array([[1.0], [0.5]]), r, np.zeros_like(r))[0] == pytest.approx(0.2, abs=1e-15)


def test_weighted_l1_gradient(rng):
    r, t, w = rng.uniform(size=(4, 5, 3)), rng.uniform(size=(4, 5, 3)), rng.uniform(size=(4, 5))
    _, g = weighted_l1(w, r, t)
    h = 1e-7
    for idx in [(0, 0, 0), (3, 4, 2), (1, 2, 1)]:
        e = np.zeros_like(r)
        e[idx] = h
        fd = (weighted_l1(w, r + e, t)[0] - weighted_l1(w, r - e, t)[0]) / (2 * h)
        assert g[idx] == pytest.approx(fd, rel=1e-6)


def test_ssim_identical_images_is_one(rng):
    a = rng.uniform(size=(20, 24, 3))
    np.testing.assert_allclose(ssim_map(a, a), 1.0, atol=1e-12)


def test_ssim_constant_images_closed_form():
    a = np.full((24, 24, 3), 0.5)
    b = a + 0.1
    expected = (2 * 0.5 * 0.6 + C1) / (0.25 + 0.36 + C1)
    np.testing.assert_allclose(ssim_map(a, b), expected, rtol=1e-12)
    assert expected == pytest.approx(0.983609, abs=1e-6)


def test_ssim_symmetric(rng):
    a, b = rng.uniform(size=(16, 18, 3)), rng.uniform(size=(16, 18, 3))
    np.testing.assert_allclose(ssim_map(a, b), ssim_map(b, a), atol=1e-14)


def test_blur_matches_scipy_reflect(rng):
    from cvsplat.losses import _WIN

    x = rng.normal(size=(13, 17, 3))
    ref = correlate1d(correlate1d(x, _WIN, axis=1, mode="mirror"), _WIN, axis=0, mode="mirror")
    np.testing.assert_allclose(gaussian_blur(x), ref, atol=1e-13)


@pytest.mark.parametrize("shape", [(13, 17, 3), (4, 30, 1), (1, 9, 3), (25, 2, 2)])
def test_blur_adjoint_dot_product(rng, shape):
    x, y = rng.normal(size=shape), rng.normal(size=shape)
    assert np.sum(gaussian_blur(x) * y) == pytest.approx(np.sum(x * gaussian_blur_adjoint(y)), rel=1e-12)


def test_weighted_ssim_examples(rng):
    a = rng.uniform(size=(16, 16, 3))
    assert weighted_ssim_loss(np.ones((16, 16)), a, a)[0] == pytest.approx(0, abs=1e-12)
    b = rng.uniform(size=a.shape)
    assert weighted_ssim_loss(np.ones((16, 16)), a, b)[0] == ssim_loss(a, b)
    assert ssim_loss(a, b) == pytest.approx(1 - ssim(a, b), rel=1e-12)


def test_weighted_ssim_half_mask_halves_uniform_loss():
    a = np.full((20, 20, 3), 0.3)
    b = np.full((20, 20, 3), 0.45)
    w = np.ones((20, 20))
    w[:, 10:] = 0
    full = weighted_ssim_loss(np.ones((20, 20)), a, b)[0]
    assert weighted_ssim_loss(w, a, b)[0] == pytest.approx(0.5 * full, rel=1e-12)


def test_weighted_ssim_gradient(rng):
    r, t, w = rng.uniform(size=(12, 14, 3)), rng.uniform(size=(12, 14, 3)), rng.uniform(size=(12, 14))
    _, g = weighted_ssim_loss(w, r, t)
    h = 1e-6
    for idx in [(0, 0, 0), (11, 13, 2), (5, 6, 1), (0, 7, 2)]:
        e = np.zeros_like(r)
        e[idx] = h
        fd = (weighted_ssim_loss(w, r + e, t)[0] - weighted_ssim_loss(w, r - e, t)[0]) / (2 * h)
        assert g[idx] == pytest.approx(fd, rel=1e-6, abs=1e-12)


def test_volume_reg_examples(rng):
    assert volume_reg(unit_field(5))[0] == 1.0
    f = unit_field(1)
    f.log_scale[0] = np.log([2.0, 1, 1])
    assert volume_reg(f)[0] == pytest.approx(2.0)
    assert volume_reg(GaussianField.empty())[0] == 0.0


def test_volume_reg_gradient(rng):
    f = GaussianField(np.zeros((4, 3)), [[1, 0, 0, 0]] * 4, rng.normal(size=(4, 3)), np.zeros(4), np.zeros((4, 3)),
                      np.float64)
    _, g = volume_reg(f)
    h = 1e-6
    fd = np.zeros_like(g)
    for idx in np.ndindex(g.shape):
        f.log_scale[idx] += h
        p = volume_reg(f)[0]
        f.log_scale[idx] -= 2 * h
        m = volume_reg(f)[0]
        f.log_scale[idx] += h
        fd[idx] = (p - m) / (2 * h)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-6


def test_total_loss_of_perfect_render_is_volume_term(rng):
    a = rng.uniform(size=(16, 16, 3))
    lb = total_loss(None, a, a, unit_field(7))
    assert lb.total == pytest.approx(LAMBDA_VOL * 1.0, abs=1e-12)


def test_total_loss_unit_weights_equal_unweighted(rng):
    a, b = rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3))
    f = unit_field(3)
    x, y = total_loss(np.ones((16, 16)), a, b, f), total_loss(None, a, b, f)
    assert x.total == y.total
    np.testing.assert_array_equal(x.d_color, y.d_color)
    assert l1_loss(a, b) == y.l_color


@pytest.mark.parametrize("kw", [dict(lambda_ssim=1.0), dict(lambda_ssim=-0.1), dict(lambda_vol=-1.0)])
def test_total_loss_rejects_bad_lambdas(rng, kw):
    a = rng.uniform(size=(8, 8, 3))
    with pytest.raises(ValueError):
        total_loss(None, a, a, unit_field(1), **kw)


def test_shape_checks(rng):
    with pytest.raises(ValueError):
        weighted_l1(np.ones((3, 3)), np.zeros((4, 4, 3)), np.zeros((4, 4, 3)))
    with pytest.raises(ValueError):
        ssim(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_psnr():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == float("inf")
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    b = a.copy()
    b[..., 0] = np.sqrt(0.03)  # MSE 0.01 spread over one channel
    assert psnr(a, b) == pytest.approx(20.0)
