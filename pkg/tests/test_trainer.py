import numpy as np
import pytest

from cvsplat.gaussians import GaussianField, checkpoint_bytes
from cvsplat.rasterizer import render
from cvsplat.trainer import (
    AERIAL_VIEW,
    Adam,
    TrainConfig,
    TrainingSet,
    View,
    densify_and_prune,
    ensemble_seeds,
    init_field,
    read_trace,
    train,
    train_ensemble,
    write_trace,
)

from conftest import random_field, small_camera

TOY = TrainConfig(iterations=200, densify_from=10_000, background=(0.0, 0.0, 0.0), init_jitter=0.0)


def toy_view(rng):
    cam = small_camera()
    target_field = random_field(rng, 1, np.float32, depth=(2.5, 2.5), spread=0.0, scale=(-1.2, -1.2))
    target_field.opacity_logit[:] = 3.0
    img = render(target_field, cam, (0, 0, 0)).color
    return cam, np.clip(img, 0, 1)


def test_init_single_point():
    f = init_field([[0.0, 0, 0]], [[0.2, 0.3, 0.4]], TrainConfig(init_jitter=0.0))
    assert len(f) == 1
    np.testing.assert_array_equal(f.mu, [[0, 0, 0]])


def test_init_grid_spacing_one_gives_unit_scale():
    g = np.stack(np.meshgrid(np.arange(5.0), np.arange(5.0), np.arange(5.0)), -1).reshape(-1, 3)
    f = init_field(g, np.full_like(g, 0.5), TrainConfig(init_jitter=0.0), dtype=np.float64)
    np.testing.assert_allclose(f.log_scale, 0.0, atol=1e-12)
    np.testing.assert_allclose(f.opacity, 0.1)
    np.testing.assert_array_equal(f.rot, np.tile([1.0, 0, 0, 0], (125, 1)))


def test_init_jitter_depends_on_seed():
    pts = np.random.default_rng(0).normal(size=(20, 3))
    a = init_field(pts, np.zeros_like(pts), TrainConfig(seed=1))
    b = init_field(pts, np.zeros_like(pts), TrainConfig(seed=1))
    c = init_field(pts, np.zeros_like(pts), TrainConfig(seed=2))
    assert a == b and a != c


def test_training_reduces_l1(rng):
    cam, img = toy_view(rng)
    ts = TrainingSet([View(cam, img)])
    f0 = init_field([[0.15, -0.1, 2.4]], [[0.5, 0.5, 0.5]], TOY)
    f0.log_scale[:] = -1.0
    f, trace = train(f0, ts, TOY)
    assert len(trace) == 200
    assert trace[-1].l_color < 0.5 * trace[0].l_color


def test_training_is_bit_reproducible(rng):
    cam, img = toy_view(rng)
    ts = TrainingSet([View(cam, img)])
    f0 = random_field(rng, 6, np.float32)
    cfg = TOY.updated(iterations=60)
    a, ta = train(f0, ts, cfg)
    b, tb = train(f0, ts, cfg)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert [r.total for r in ta] == [r.total for r in tb]


def test_train_does_not_touch_its_input(rng):
    cam, img = toy_view(rng)
    f0 = random_field(rng, 4, np.float32)
    before = checkpoint_bytes(f0)
    train(f0, TrainingSet([View(cam, img)]), TOY.updated(iterations=5))
    assert checkpoint_bytes(f0) == before


def test_non_finite_loss_names_the_view(rng):
    cam, img = toy_view(rng)
    f0 = random_field(rng, 2, np.float32)
    f0.color[0, 0] = np.nan
    with pytest.raises(FloatingPointError, match="v7"):
        train(f0, TrainingSet([View(cam, img, id="v7")]), TOY.updated(iterations=3))


def _with_grad(field_, mean_grad):
    field_.grad_accum[:] = mean_grad
    field_.grad_count[:] = 1
    return field_


def test_densify_noop_below_threshold(rng):
    f = _with_grad(random_field(rng, 5, np.float32), 1e-6)
    f.opacity_logit[:] = 0.0
    out = densify_and_prune(f, TrainConfig())
    assert out == f


def test_split_along_major_axis():
    f = GaussianField([[1.0, 2, 3]], [[1, 0, 0, 0]], [np.log([0.5, 0.1, 0.1])], [0.0], [[0.2, 0.4, 0.6]],
                      np.float64)
    _with_grad(f, 1.0)
    out = densify_and_prune(f, TrainConfig())
    assert len(out) == 2
    np.testing.assert_allclose(sorted(out.mu[:, 0]), [0.75, 1.25])
    np.testing.assert_allclose(out.mu[:, 1:], [[2, 3], [2, 3]])
    np.testing.assert_allclose(out.log_scale, np.tile(np.log([0.5, 0.1, 0.1]) - np.log(1.6), (2, 1)))


def test_clone_small_gaussian():
    f = GaussianField([[0.0, 0, 0]], [[1, 0, 0, 0]], [np.log([0.05] * 3)], [0.0], [[0.5] * 3], np.float64)
    out = densify_and_prune(_with_grad(f, 1.0), TrainConfig())
    assert len(out) == 2
    np.testing.assert_array_equal(out.mu[0], out.mu[1])


def test_transparent_gaussian_pruned(rng):
    f = random_field(rng, 4, np.float32)
    f.opacity_logit[:] = 0.0
    f.opacity_logit[2] = -12.0
    out = densify_and_prune(_with_grad(f, 0.0), TrainConfig())
    assert len(out) == 3
    assert np.all(out.opacity_logit == 0.0)


def test_densify_respects_cap(rng):
    f = _with_grad(random_field(rng, 10, np.float32, scale=(-4, -3.5)), 1.0)
    out = densify_and_prune(f, TrainConfig(max_gaussians=13))
    assert len(out) == 13


def test_adam_remap_keeps_state():
    f = GaussianField(np.zeros((3, 3)), [[1, 0, 0, 0]] * 3, np.zeros((3, 3)), np.zeros(3), np.zeros((3, 3)))
    opt = Adam(f, TrainConfig())
    opt.m["mu"][:] = np.arange(3)[:, None]
    opt.remap(np.array([2, 0]), 2)
    np.testing.assert_array_equal(opt.m["mu"][:, 0], [2, 0, 0, 0])
    assert opt.v["color"].shape == (4, 3)


def test_mu_learning_rate_decays():
    cfg = TrainConfig(iterations=100)
    assert cfg.lr("mu", 0) == cfg.lr_mu
    assert cfg.lr("mu", 100) == pytest.approx(cfg.lr_mu * 0.01)
    assert cfg.lr("color", 50) == cfg.lr_color


def test_config_file_round_trip(tmp_path):
    cfg = TrainConfig(iterations=123, lambda_ssim=0.3, background=(0.1, 0.2, 0.3), seed=9)
    cfg.save(tmp_path / "c.txt")
    assert TrainConfig.from_file(tmp_path / "c.txt") == cfg
    assert TrainConfig.from_file(tmp_path / "c.txt", seed="4").seed == 4


def test_config_rejects_unknown_keys_and_bad_values(tmp_path):
    (tmp_path / "c.txt").write_text("iterations = 5\nbogus = 1\n")
    with pytest.raises(ValueError, match="bogus"):
        TrainConfig.from_file(tmp_path / "c.txt")
    with pytest.raises(ValueError):
        TrainConfig(ensemble_size=1)
    with pytest.raises(ValueError):
        TrainConfig(lambda_ssim=1.0)


def test_trace_round_trip(tmp_path, rng):
    cam, img = toy_view(rng)
    _, trace = train(random_field(rng, 3, np.float32), TrainingSet([View(cam, img)]), TOY.updated(iterations=4))
    write_trace(tmp_path / "t.csv", trace)
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "iter,l_color,l_ssim,l_vol,total"
    back = read_trace(tmp_path / "t.csv")
    assert [(r.iteration, r.total, r.l_ssim) for r in back] == [(r.iteration, r.total, r.l_ssim) for r in trace]


def test_view_validation():
    cam = small_camera()
    img = np.zeros((16, 16, 3))
    with pytest.raises(ValueError, match="aerial"):
        View(cam, img, weight=np.ones((16, 16)))
    with pytest.raises(ValueError, match="does not match"):
        View(cam, np.zeros((8, 8, 3)))
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        View(cam, img, AERIAL_VIEW, np.full((16, 16), 2.0))
    with pytest.raises(ValueError):
        TrainingSet([])


def test_ensemble_seeds_distinct_and_stable():
    s = ensemble_seeds(0, 4)
    assert len(set(s)) == 4 and s == ensemble_seeds(0, 4)


def test_equal_seed_members_identical(rng):
    cam, img = toy_view(rng)
    ts = TrainingSet([View(cam, img)])
    pts = rng.normal([0, 0, 2.5], 0.2, (8, 3))
    cfg = TOY.updated(iterations=20, init_jitter=0.01)
    (a, b), _ = train_ensemble(pts, np.full((8, 3), 0.5), ts, cfg, seeds=[3, 3])
    assert a == b
    (c, d), _ = train_ensemble(pts, np.full((8, 3), 0.5), ts, cfg, members=2)
    assert c != d


def test_ensemble_rejects_aerial_views(rng):
    cam, img = toy_view(rng)
    ts = TrainingSet([View(cam, img, AERIAL_VIEW)])
    with pytest.raises(ValueError, match="ground"):
        train_ensemble(np.zeros((2, 3)), np.zeros((2, 3)), ts, TOY)
