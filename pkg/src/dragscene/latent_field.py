"""Attributed latent point cloud: construction from aligned reference
geometry and z-buffered rendering into arbitrary views."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, EmptySceneError, InvalidInputError
from .geometry import CameraView, MaskGrid, Pointmap, splat_nearest
from .tensorio import read_tensor, write_tensor


@dataclass
class LatentGrid:
    """h x w x c grid of reals tagged with a diffusion timestep.

    ``latent_stride`` is the ratio of image resolution to latent resolution.
    """

    values: np.ndarray
    timestep: int
    latent_stride: int = 1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3:
            raise InvalidInputError("latent grid must be h x w x c")
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("latent grid contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def with_values(self, values, timestep: int | None = None) -> "LatentGrid":
        return LatentGrid(
            values, self.timestep if timestep is None else timestep, self.latent_stride
        )


@dataclass
class AttributedPointCloud:
    """World-frame points carrying a latent vector and a mask weight each."""

    positions: np.ndarray  # N x 3
    latents: np.ndarray  # N x c
    mask_weights: np.ndarray  # N
    source_pixel: np.ndarray  # N x 2, (u, v) in the reference view
    timestep: int
    latent_stride: int

    def __post_init__(self):
        n = self.positions.shape[0]
        if n == 0:
            raise EmptySceneError("attributed point cloud is empty")
        if not np.all(np.isfinite(self.latents)):
            raise InvalidInputError("non-finite latent attribute")
        if self.mask_weights.min() < 0 or self.mask_weights.max() > 1:
            raise InvalidInputError("mask weights must lie in [0, 1]")

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_tensor(d / "positions.dstn", self.positions)
        write_tensor(d / "latents.dstn", self.latents)
        write_tensor(d / "mask_weights.dstn", self.mask_weights)
        write_tensor(d / "source_pixel.dstn", self.source_pixel)
        meta = {"timestep": self.timestep, "latent_stride": self.latent_stride}
        (d / "cloud.json").write_text(json.dumps(meta, sort_keys=True, indent=2))

    @classmethod
    def load(cls, directory: str | Path) -> "AttributedPointCloud":
        d = Path(directory)
        meta = json.loads((d / "cloud.json").read_text())
        return cls(
            positions=read_tensor(d / "positions.dstn").astype(float),
            latents=read_tensor(d / "latents.dstn").astype(float),
            mask_weights=read_tensor(d / "mask_weights.dstn").astype(float),
            source_pixel=read_tensor(d / "source_pixel.dstn").astype(float),
            timestep=meta["timestep"],
            latent_stride=meta["latent_stride"],
        )


@dataclass
class RenderedMaps:
    """Result of rendering the cloud into one view at latent resolution."""

    latent_map: LatentGrid
    mask_map: MaskGrid
    coverage: np.ndarray  # bool grid
    winner: np.ndarray  # index of the surviving point per pixel, -1 uncovered


def bilinear_sample(grid: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample an H x W x C grid at fractional (x, y) coords (M x 2), with
    border clamping."""
    H, W = grid.shape[:2]
    x = np.clip(coords[:, 0], 0.0, W - 1.0)
    y = np.clip(coords[:, 1], 0.0, H - 1.0)
    x0 = np.clip(np.floor(x).astype(int), 0, W - 2) if W > 1 else np.zeros_like(x, int)
    y0 = np.clip(np.floor(y).astype(int), 0, H - 2) if H > 1 else np.zeros_like(y, int)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = x - x0
    wy = y - y0
    top = grid[y0, x0] * (1 - wx)[:, None] + grid[y0, x1] * wx[:, None]
    bot = grid[y1, x0] * (1 - wx)[:, None] + grid[y1, x1] * wx[:, None]
    return top * (1 - wy)[:, None] + bot * wy[:, None]


def build_attributed_cloud(
    ref_pointmap_world: Pointmap,
    ref_latent: LatentGrid,
    mask: MaskGrid,
) -> AttributedPointCloud:
    """One point per valid reference pixel.

    Positions come from the fused (world-frame) reference pointmap; each
    point's latent is sampled bilinearly from ``ref_latent`` at the pixel's
    latent-grid coordinate (pixel / stride); the mask weight is read off
    ``mask`` at the pixel.
    """
    H, W = ref_pointmap_world.points.shape[:2]
    if mask.resolution != (H, W):
        raise ContractError("mask resolution does not match reference pointmap")
    stride = ref_latent.latent_stride
    if ref_latent.shape[0] * stride != H or ref_latent.shape[1] * stride != W:
        raise ContractError("latent grid resolution inconsistent with stride")
    valid = ref_pointmap_world.valid
    if not valid.any():
        raise EmptySceneError("no valid reference pixels")
    vv, uu = np.nonzero(valid)
    positions = ref_pointmap_world.points[vv, uu]
    coords = np.stack([uu / stride, vv / stride], axis=1)
    latents = bilinear_sample(ref_latent.values, coords)
    weights = mask.values[vv, uu]
    source = np.stack([uu, vv], axis=1).astype(float)
    return AttributedPointCloud(
        positions, latents, weights, source, ref_latent.timestep, stride
    )


def render_latent_map(
    cloud: AttributedPointCloud, cam: CameraView, latent_stride: int | None = None
) -> RenderedMaps:
    """Project the cloud into ``cam`` at latent resolution with z-buffered
    nearest-pixel splatting; uncovered pixels are zero everywhere."""
    stride = cloud.latent_stride if latent_stride is None else latent_stride
    lcam = cam.at_stride(stride)
    pts_cam = (cloud.positions @ cam.pose[:3, :3].T) + cam.pose[:3, 3]
    vals = np.concatenate([cloud.latents, cloud.mask_weights[:, None]], axis=1)
    grid, _, coverage, winner = splat_nearest(pts_cam, vals, lcam)
    latent_map = LatentGrid(grid[..., :-1], cloud.timestep, stride)
    mask_map = MaskGrid(np.clip(grid[..., -1], 0.0, 1.0))
    return RenderedMaps(latent_map, mask_map, coverage, winner)
