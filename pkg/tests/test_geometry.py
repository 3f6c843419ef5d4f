import numpy as np
import pytest

from cvsplat.geometry import (
    Camera,
    RigidTransform,
    axis_angle_matrix,
    look_at,
    matrix_to_quat,
    pitch_down,
    project_point,
    quat_to_matrix,
    translate_center,
    unproject_pixel,
)


def random_pose(rng):
    q = rng.normal(size=4)
    return RigidTransform(q / np.linalg.norm(q), rng.normal(size=3))


def test_optical_axis_projects_to_principal_point():
    cam = Camera(100, 100, 50, 50, 100, 100)
    pix, depth, _ = project_point(cam, (0, 0, 1))
    np.testing.assert_allclose(pix, [50, 50])
    assert depth == 1


def test_similar_triangles():
    cam = Camera(100, 100, 50, 50, 100, 100)
    pix, _, _ = project_point(cam, (0.5, 0, 1))
    np.testing.assert_allclose(pix, [100, 50])


def test_projection_matches_homogeneous_matrix(rng):
    for _ in range(20):
        pose = random_pose(rng)
        cam = Camera(*rng.uniform(50, 200, 2), *rng.uniform(20, 80, 2), 100, 100, pose)
        pc = rng.uniform(-1, 1, 3) + [0, 0, 3]
        pw = pose.inverse().apply(pc)
        P = cam.K @ pose.as_4x4()[:3]
        h = P @ np.append(pw, 1.0)
        pix, depth, _ = project_point(cam, pw)
        np.testing.assert_allclose(pix, h[:2] / h[2], atol=1e-9)
        assert depth == pytest.approx(h[2], abs=1e-9)


def test_behind_camera_is_flagged_not_clamped():
    cam = Camera(100, 100, 50, 50, 100, 100)
    pix, depth, front = project_point(cam, (0, 0, -1))
    assert not front and depth == -1
    assert np.isnan(pix).all()


def test_unproject_on_axis():
    cam = Camera(100, 100, 50, 50, 100, 100)
    np.testing.assert_allclose(unproject_pixel(cam, (50, 50), 2.0), [0, 0, 2])


def test_unproject_rejects_nonpositive_depth():
    cam = Camera(100, 100, 50, 50, 100, 100)
    with pytest.raises(ValueError):
        unproject_pixel(cam, (1, 1), 0.0)


def test_round_trip_many_pixels(rng):
    cam = Camera(120, 110, 64, 48, 128, 96, random_pose(rng))
    pix = rng.uniform(0, [128, 96], (1000, 2))
    depth = rng.uniform(0.5, 50, 1000)
    back, z, front = cam.project(cam.unproject(pix, depth))
    assert front.all()
    assert np.abs(back - pix).max() < 1e-6
    np.testing.assert_allclose(z, depth, rtol=1e-12)


def test_yaw_90_unproject():
    # camera rotated 90 degrees about world y: camera +z looks along world -x
    R = axis_angle_matrix([0, 1, 0], np.pi / 2)
    cam = Camera(100, 100, 50, 50, 100, 100, RigidTransform.from_matrix(R))
    w = unproject_pixel(cam, (50, 50), 2.0)
    np.testing.assert_allclose(w, R.T @ [0, 0, 2], atol=1e-12)
    np.testing.assert_allclose(w, [-2, 0, 0], atol=1e-12)


def test_quaternion_matrix_round_trip(rng):
    for _ in range(50):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        q *= np.sign(q[0])
        np.testing.assert_allclose(matrix_to_quat(quat_to_matrix(q)), q, atol=1e-12)


def test_compose_and_inverse(rng):
    a, b = random_pose(rng), random_pose(rng)
    p = rng.normal(size=(5, 3))
    np.testing.assert_allclose(a.compose(b).apply(p), a.apply(b.apply(p)), atol=1e-12)
    np.testing.assert_allclose(a.inverse().apply(a.apply(p)), p, atol=1e-12)


def test_look_at_centers_target():
    pose = look_at((1.0, 2.0, -3.0), (0.0, 0.0, 4.0))
    cam = Camera(50, 50, 32, 24, 64, 48, pose)
    pix, depth, _ = project_point(cam, (0.0, 0.0, 4.0))
    np.testing.assert_allclose(pix, [32, 24], atol=1e-9)
    np.testing.assert_allclose(cam.center, [1, 2, -3], atol=1e-12)


def test_pitch_down_and_translate_keep_center_and_axes():
    pose = look_at((0.0, 1.5, 0.0), (0.0, 1.5, 10.0))
    cam = Camera(50, 50, 32, 24, 64, 48, pose)
    tilted = cam.with_pose(pitch_down(pose, 5.0))
    np.testing.assert_allclose(tilted.center, cam.center, atol=1e-12)
    fwd = tilted.R[2]
    # looking 5 degrees below the horizon: world up is +y
    assert np.degrees(np.arcsin(-fwd[1])) == pytest.approx(5.0)
    moved = cam.with_pose(translate_center(pose, (0.0, 0.1, 0.0)))
    np.testing.assert_allclose(moved.center, cam.center + [0, 0.1, 0], atol=1e-12)
    np.testing.assert_allclose(moved.R, cam.R)


@pytest.mark.parametrize("kw", [dict(fx=0), dict(fy=-1), dict(width=0)])
def test_camera_validation(kw):
    args = dict(fx=10, fy=10, cx=1, cy=1, width=4, height=4) | kw
    with pytest.raises(ValueError):
        Camera(**args)


def test_rejects_improper_rotation():
    with pytest.raises(ValueError):
        RigidTransform.from_matrix(np.diag([1.0, 1.0, -1.0]))
