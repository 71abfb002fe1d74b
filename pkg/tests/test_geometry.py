import numpy as np
import pytest

from dragscene.errors import ContractError, InvalidInputError
from dragscene.geometry import (
    CameraView,
    MaskGrid,
    Pointmap,
    homogenize,
    lift_pixels,
    project,
    relative_transform,
    splat_nearest,
    transform_pointmap,
    warp_mask,
)

from conftest import random_pose


def _cam(view_id, pose, res=16, f=20.0):
    return CameraView(view_id, pose, (f, f, res / 2, res / 2), res, res)


def _random_pointmap(rng, frame, h=4, w=5):
    pts = rng.standard_normal((h, w, 3))
    valid = rng.random((h, w)) > 0.2
    return Pointmap(frame, np.where(valid[..., None], pts, 0.0), valid)


def test_transform_identity_is_bitwise():
    rng = np.random.default_rng(0)
    cam = _cam(3, random_pose(rng))
    pm = _random_pointmap(rng, 3)
    out = transform_pointmap(pm, cam, cam)
    assert np.array_equal(out.points, pm.points)
    assert out.frame == 3


def test_transform_composition():
    rng = np.random.default_rng(1)
    for _ in range(50):
        cams = [_cam(i, random_pose(rng)) for i in range(3)]
        pm = _random_pointmap(rng, 0)
        via = transform_pointmap(transform_pointmap(pm, cams[0], cams[1]), cams[1], cams[2])
        direct = transform_pointmap(pm, cams[0], cams[2])
        assert np.abs(via.points - direct.points)[via.valid].max() < 1e-9


def test_transform_round_trip():
    rng = np.random.default_rng(2)
    a, b = _cam(0, random_pose(rng)), _cam(1, random_pose(rng))
    pm = _random_pointmap(rng, 0)
    back = transform_pointmap(transform_pointmap(pm, a, b), b, a)
    assert np.abs(back.points - pm.points)[pm.valid].max() < 1e-9


def test_transform_frame_mismatch_rejected():
    rng = np.random.default_rng(3)
    a, b = _cam(0, random_pose(rng)), _cam(1, random_pose(rng))
    pm = _random_pointmap(rng, 1)
    with pytest.raises(ContractError):
        transform_pointmap(pm, a, b)


def test_relative_transform_matches_pose_algebra():
    rng = np.random.default_rng(4)
    a, b = _cam(0, random_pose(rng)), _cam(1, random_pose(rng))
    T = relative_transform(a, b)
    assert np.allclose(T, b.pose @ np.linalg.inv(a.pose))
    assert np.allclose(T[:3, :3] @ T[:3, :3].T, np.eye(3), atol=1e-12)


def test_homogenize():
    out = homogenize(np.array([1.0, 2.0, 3.0]))
    assert np.array_equal(out, [1.0, 2.0, 3.0, 1.0])
    with pytest.raises(InvalidInputError):
        homogenize(np.array([np.inf, 0.0, 0.0]))


def test_camera_validation():
    with pytest.raises(InvalidInputError):
        _cam(0, np.diag([2.0, 1.0, 1.0, 1.0]))  # non-orthonormal
    bad = np.eye(4)
    bad[:3, :3] = np.diag([1.0, -1.0, 1.0])  # det -1
    with pytest.raises(InvalidInputError):
        _cam(0, bad)
    with pytest.raises(InvalidInputError):
        CameraView(0, np.eye(4), (-1.0, 1.0, 8, 8), 16, 16)


def test_project_lift_round_trip():
    cam = _cam(0, np.eye(4))
    rng = np.random.default_rng(5)
    depth = rng.uniform(1.0, 5.0, (16, 16))
    pm = lift_pixels(cam, depth)
    pixels, z, vis = project(pm, cam)
    v, u = np.mgrid[0:16, 0:16].astype(float)
    assert np.abs(pixels[..., 0] - u).max() < 1e-9
    assert np.abs(pixels[..., 1] - v).max() < 1e-9
    assert np.abs(z - depth).max() < 1e-12
    assert vis.values.all()


def test_project_visibility_rules():
    cam = _cam(0, np.eye(4))
    pts = np.array(
        [[[0.0, 0.0, 2.0], [0.0, 0.0, -1.0], [50.0, 0.0, 2.0]]]
    )
    pm = Pointmap(0, pts, np.ones((1, 3), bool))
    _, _, vis = project(pm, cam)
    assert list(vis.values[0]) == [1.0, 0.0, 0.0]  # behind and outside drop out


def test_splat_depth_order():
    cam = _cam(0, np.eye(4))
    # two points on the same pixel, different depth: nearer wins
    pts = np.array([[0.0, 0.0, 3.0], [0.0, 0.0, 2.0]])
    vals = np.array([[1.0], [2.0]])
    grid, depth, cover, winner = splat_nearest(pts, vals, cam)
    assert winner[8, 8] == 1
    assert grid[8, 8, 0] == 2.0
    assert depth[8, 8] == 2.0
    assert cover.sum() == 1


def test_splat_tie_breaks_by_lowest_index():
    cam = _cam(0, np.eye(4))
    rng = np.random.default_rng(6)
    pts = rng.uniform(-0.5, 0.5, (40, 3)) + [0, 0, 3.0]
    pts[:, 2] = 3.0  # exact depth ties
    vals = np.arange(40, dtype=float)[:, None]
    grid, _, cover, winner = splat_nearest(pts, vals, cam)
    grid2, _, cover2, winner2 = splat_nearest(pts, vals, cam)
    assert np.array_equal(winner, winner2) and np.array_equal(grid, grid2)
    # the surviving point is the lowest index among the tied candidates
    for y, x in zip(*np.nonzero(cover)):
        candidates = [
            i
            for i in range(40)
            if (
                round(cam.intrinsics[0] * pts[i, 0] / pts[i, 2] + cam.intrinsics[2]) == x
                and round(cam.intrinsics[1] * pts[i, 1] / pts[i, 2] + cam.intrinsics[3]) == y
            )
        ]
        assert winner[y, x] == min(candidates)
        assert grid[y, x, 0] == float(min(candidates))


def test_warp_mask_identity_view():
    cam = _cam(0, np.eye(4))
    depth = np.full((16, 16), 2.0)
    pm = lift_pixels(cam, depth)
    m = np.zeros((16, 16))
    m[5:9, 6:10] = 1.0
    warped = warp_mask(MaskGrid(m), pm, cam, cam)
    assert np.array_equal(warped.values, m)


def test_warp_mask_empty_is_zero():
    cam = _cam(0, np.eye(4))
    pm = lift_pixels(cam, np.full((16, 16), 2.0))
    warped = warp_mask(MaskGrid(np.zeros((16, 16))), pm, cam, cam)
    assert warped.values.max() == 0.0


def test_warp_mask_translation():
    cam = _cam(0, np.eye(4))
    # second camera shifted along x; plane at constant depth moves in -u
    pose2 = np.eye(4)
    pose2[0, 3] = -0.5
    cam2 = _cam(1, pose2)
    pm = lift_pixels(cam, np.full((16, 16), 2.0))
    m = np.zeros((16, 16))
    m[6:10, 6:10] = 1.0
    warped = warp_mask(MaskGrid(m), pm, cam, cam2)
    # shift = fx * tx / z = 20 * (-0.5) / 2 = -5 pixels
    expected = np.zeros((16, 16))
    expected[6:10, 1:5] = 1.0
    assert np.array_equal(warped.values, expected)
