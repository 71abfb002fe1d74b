import numpy as np
import pytest
from scipy import ndimage

from dragscene.errors import ContractError, EmptySceneError, InvalidInputError
from dragscene.geometry import CameraView, MaskGrid, Pointmap, lift_pixels
from dragscene.latent_field import (
    AttributedPointCloud,
    LatentGrid,
    bilinear_sample,
    build_attributed_cloud,
    render_latent_map,
)


def _cam(view_id=0, res=16, f=20.0, pose=None):
    return CameraView(
        view_id, np.eye(4) if pose is None else pose, (f, f, res / 2, res / 2), res, res
    )


def test_latent_grid_validation():
    with pytest.raises(InvalidInputError):
        LatentGrid(np.zeros((4, 4)), 0, 1)  # missing channel dim
    with pytest.raises(InvalidInputError):
        LatentGrid(np.full((2, 2, 1), np.nan), 0, 1)


def test_bilinear_sample_matches_map_coordinates():
    rng = np.random.default_rng(0)
    grid = rng.standard_normal((9, 7, 3))
    coords = np.stack(
        [rng.uniform(0, 6, 50), rng.uniform(0, 8, 50)], axis=1
    )  # (x, y) strictly inside
    got = bilinear_sample(grid, coords)
    for c in range(3):
        want = ndimage.map_coordinates(
            grid[..., c], [coords[:, 1], coords[:, 0]], order=1, mode="nearest"
        )
        assert np.abs(got[:, c] - want).max() < 1e-12


def test_bilinear_sample_integer_coords_exact():
    rng = np.random.default_rng(1)
    grid = rng.standard_normal((5, 5, 2))
    coords = np.array([[0.0, 0.0], [4.0, 4.0], [2.0, 3.0]])
    got = bilinear_sample(grid, coords)
    assert np.array_equal(got[0], grid[0, 0])
    assert np.array_equal(got[1], grid[4, 4])
    assert np.array_equal(got[2], grid[3, 2])


def test_build_cloud_reference_round_trip():
    # rendering the cloud back into its own view reproduces the latent on
    # covered pixels exactly
    cam = _cam()
    rng = np.random.default_rng(2)
    depth = rng.uniform(1.5, 4.0, (16, 16))
    pm = lift_pixels(cam, depth)
    latent = LatentGrid(rng.standard_normal((16, 16, 4)), 20, 1)
    mask = MaskGrid((rng.random((16, 16)) > 0.5).astype(float))
    cloud = build_attributed_cloud(pm, latent, mask)
    maps = render_latent_map(cloud, cam, 1)
    assert maps.coverage.all()
    assert np.abs(maps.latent_map.values - latent.values).max() < 1e-6
    assert np.abs(maps.mask_map.values - mask.values).max() < 1e-12
    assert maps.latent_map.timestep == 20


def test_build_cloud_respects_validity():
    cam = _cam(res=8)
    depth = np.full((8, 8), 2.0)
    pm = lift_pixels(cam, depth)
    pm.valid[0, :] = False
    latent = LatentGrid(np.ones((8, 8, 1)), 5, 1)
    cloud = build_attributed_cloud(pm, latent, MaskGrid(np.zeros((8, 8))))
    assert cloud.positions.shape[0] == 8 * 8 - 8
    with pytest.raises(EmptySceneError):
        empty = Pointmap(0, np.zeros((8, 8, 3)), np.zeros((8, 8), bool))
        build_attributed_cloud(empty, latent, MaskGrid(np.zeros((8, 8))))


def test_build_cloud_shape_checks():
    cam = _cam(res=8)
    pm = lift_pixels(cam, np.full((8, 8), 2.0))
    latent = LatentGrid(np.ones((8, 8, 1)), 5, 1)
    with pytest.raises(ContractError):
        build_attributed_cloud(pm, latent, MaskGrid(np.zeros((4, 4))))
    bad = LatentGrid(np.ones((4, 4, 1)), 5, 1)  # stride-1 grid at half size
    with pytest.raises(ContractError):
        build_attributed_cloud(pm, bad, MaskGrid(np.zeros((8, 8))))


def test_render_zero_coverage_behind_camera():
    cam = _cam(res=8)
    cloud = AttributedPointCloud(
        positions=np.array([[0.0, 0.0, -3.0]]),
        latents=np.array([[1.0]]),
        mask_weights=np.array([1.0]),
        source_pixel=np.array([[0.0, 0.0]]),
        timestep=5,
        latent_stride=1,
    )
    maps = render_latent_map(cloud, cam, 1)
    assert not maps.coverage.any()
    assert (maps.winner == -1).all()
    assert maps.latent_map.values.max() == 0.0


def test_render_strided():
    cam = _cam(res=16)
    rng = np.random.default_rng(3)
    pm = lift_pixels(cam, np.full((16, 16), 2.0))
    latent = LatentGrid(rng.standard_normal((8, 8, 2)), 7, 2)
    mask = MaskGrid(np.zeros((16, 16)))
    cloud = build_attributed_cloud(pm, latent, mask)
    maps = render_latent_map(cloud, cam, 2)
    assert maps.latent_map.shape == (8, 8, 2)
    assert maps.coverage.all()
    # every rendered value is the winning point's (bilinearly sampled)
    # latent; where the winner sits on the latent grid it matches exactly
    for y in range(8):
        for x in range(8):
            w = maps.winner[y, x]
            src = cloud.source_pixel[w] / 2.0
            want = bilinear_sample(latent.values, src[None, :])[0]
            assert np.abs(maps.latent_map.values[y, x] - want).max() < 1e-12
            if src[0] == int(src[0]) and src[1] == int(src[1]):
                exact = latent.values[int(src[1]), int(src[0])]
                assert np.array_equal(maps.latent_map.values[y, x], exact)


def test_cloud_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    cloud = AttributedPointCloud(
        positions=rng.standard_normal((10, 3)),
        latents=rng.standard_normal((10, 4)),
        mask_weights=rng.random(10),
        source_pixel=rng.integers(0, 8, (10, 2)).astype(float),
        timestep=20,
        latent_stride=1,
    )
    cloud.save(tmp_path / "cloud")
    back = AttributedPointCloud.load(tmp_path / "cloud")
    assert back.timestep == 20 and back.latent_stride == 1
    # float32 container: round trip exact at float32 resolution
    assert np.abs(back.positions - cloud.positions).max() < 1e-6
    assert np.abs(back.latents - cloud.latents).max() < 1e-6


def test_mask_weight_range_enforced():
    with pytest.raises(InvalidInputError):
        AttributedPointCloud(
            positions=np.zeros((1, 3)),
            latents=np.zeros((1, 1)),
            mask_weights=np.array([1.5]),
            source_pixel=np.zeros((1, 2)),
            timestep=0,
            latent_stride=1,
        )
