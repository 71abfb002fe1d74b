"""Cross-view consistency metrics for an edited scene.

Three numbers summarize a run: how much the edited content disagrees
across views in latent space, how far each edited view is from the
geometrically warped edited reference in image space, and how well the
untouched parts of every view were preserved.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ContractError
from .geometry import Z_NEAR, CameraView, splat_nearest
from .latent_field import AttributedPointCloud, LatentGrid, bilinear_sample

PSNR_CAP_DB = 99.0


@dataclass
class ConsistencyReport:
    masked_latent_variance: float
    masked_image_agreement: float
    preservation_psnr: float  # minimum over views
    per_view: list[dict]

    def __post_init__(self):
        for v in (
            self.masked_latent_variance,
            self.masked_image_agreement,
            self.preservation_psnr,
        ):
            if not np.isfinite(v) or v < 0:
                raise ContractError("report metrics must be finite and non-negative")

    def to_json(self) -> str:
        doc = {
            "masked_latent_variance": self.masked_latent_variance,
            "masked_image_agreement": self.masked_image_agreement,
            "preservation_psnr": self.preservation_psnr,
            "per_view": self.per_view,
        }
        return json.dumps(doc, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ConsistencyReport":
        doc = json.loads(text)
        return cls(
            doc["masked_latent_variance"],
            doc["masked_image_agreement"],
            doc["preservation_psnr"],
            doc["per_view"],
        )


def _project_points(
    positions: np.ndarray, cam: CameraView
) -> tuple[np.ndarray, np.ndarray]:
    """Fractional pixel coords (M x 2) plus in-frustum flags."""
    pc = positions @ cam.pose[:3, :3].T + cam.pose[:3, 3]
    z = pc[:, 2]
    safe = np.where(z > Z_NEAR, z, 1.0)
    u = cam.intrinsics[0] * pc[:, 0] / safe + cam.intrinsics[2]
    v = cam.intrinsics[1] * pc[:, 1] / safe + cam.intrinsics[3]
    ok = (
        (z > Z_NEAR)
        & (u >= -0.5)
        & (u < cam.width - 0.5)
        & (v >= -0.5)
        & (v < cam.height - 0.5)
    )
    return np.stack([u, v], axis=1), ok


def masked_latent_variance(
    cloud: AttributedPointCloud,
    latents: dict[int, LatentGrid],
    cameras: dict[int, CameraView],
    mask_threshold: float = 0.5,
) -> float:
    """Mean per-point variance of latent samples across views.

    Every masked cloud point is projected into each view's latent grid and
    sampled bilinearly; the population variance across the views that see
    it (channel-averaged) is averaged over all points seen at least twice.
    """
    sel = cloud.mask_weights >= mask_threshold
    if not sel.any():
        raise ContractError("no masked points in the cloud")
    pts = cloud.positions[sel]
    samples, seen = [], []
    for v in sorted(latents):
        z = latents[v]
        lcam = cameras[v].at_stride(z.latent_stride)
        coords, ok = _project_points(pts, lcam)
        samples.append(bilinear_sample(z.values, coords))
        seen.append(ok)
    samples = np.stack(samples)  # V x M x C
    seen = np.stack(seen)  # V x M
    counts = seen.sum(axis=0)
    use = counts >= 2
    if not use.any():
        return 0.0
    w = seen[:, use, None].astype(float)
    s = samples[:, use]
    mean = (s * w).sum(axis=0) / w.sum(axis=0)
    var = ((s - mean) ** 2 * w).sum(axis=0) / w.sum(axis=0)
    return float(var.mean(axis=1).mean())


def warp_reference_image(
    cloud: AttributedPointCloud,
    ref_image: np.ndarray,
    cam: CameraView,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Splat the (edited) reference image through the cloud geometry into
    ``cam``. Returns (warped image, warped mask, coverage)."""
    src = np.rint(cloud.source_pixel).astype(int)
    colors = ref_image[src[:, 1], src[:, 0]]
    vals = np.concatenate([colors, cloud.mask_weights[:, None]], axis=1)
    pts_cam = cloud.positions @ cam.pose[:3, :3].T + cam.pose[:3, 3]
    grid, _, coverage, _ = splat_nearest(pts_cam, vals, cam)
    return grid[..., :3], grid[..., 3], coverage


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2))
    if mse <= 0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(peak * peak / mse), PSNR_CAP_DB)


def consistency_metrics(edited) -> ConsistencyReport:
    """Build the report for a completed pipeline run (an EditedScene)."""
    scene = edited.scene
    ref = edited.ref_view
    cams = edited.rel_cameras
    lat_var = masked_latent_variance(edited.cloud, edited.latents_tr, cams)

    ref_edited = edited.edited_images[ref]
    per_view = []
    agreements, psnrs = [], []
    for v in scene.view_ids():
        row: dict = {"view": v}
        img = edited.edited_images[v]
        if v == ref:
            row["image_agreement"] = 0.0
            keep = ~_dilate(edited.spec.mask.values >= 0.5)
        else:
            warped, wmask, cover = warp_reference_image(
                edited.cloud, ref_edited, cams[v]
            )
            sel = cover & (wmask >= 0.5)
            row["image_agreement"] = (
                float(np.abs(warped[sel] - img[sel]).mean()) if sel.any() else 0.0
            )
            agreements.append(row["image_agreement"])
            keep = ~_dilate(wmask >= 0.5)
        row["preservation_psnr"] = (
            psnr(img[keep], scene.images[v][keep]) if keep.any() else PSNR_CAP_DB
        )
        psnrs.append(row["preservation_psnr"])
        per_view.append(row)

    return ConsistencyReport(
        masked_latent_variance=lat_var,
        masked_image_agreement=float(np.mean(agreements)) if agreements else 0.0,
        preservation_psnr=float(min(psnrs)),
        per_view=per_view,
    )


def _dilate(mask: np.ndarray, iterations: int = 2) -> np.ndarray:
    if not mask.any():
        return mask
    return ndimage.binary_dilation(mask, iterations=iterations)
