"""Reference-view drag editing: motion supervision plus point tracking on
the denoiser's feature map, then decode and re-invert.

This is a deliberately small-scale drag editor: the latent at step t_e is
optimized directly; identity preservation outside the mask is a weighted L1
pull toward the initial latent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .diffusion import Decoder, Denoiser, Schedule, ddim_denoise, ddim_invert
from .errors import ContractError, InvalidInputError, NumericalFailureError
from .geometry import MaskGrid
from .latent_field import LatentGrid


@dataclass
class EditSpec:
    """User edit: reference view, mask and handle/target pixel pairs."""

    ref_view: int
    mask: MaskGrid
    handles: list[tuple[float, float]]  # (u, v) image pixels
    targets: list[tuple[float, float]]

    def validate(self, width: int, height: int) -> None:
        if len(self.handles) != len(self.targets) or not self.handles:
            raise ContractError("handles and targets must be equal length >= 1")
        for u, v in list(self.handles) + list(self.targets):
            if not (0 <= u < width and 0 <= v < height):
                raise ContractError(f"point ({u}, {v}) outside image")
        if self.mask.values.max() == 0:
            raise ContractError("edit mask is empty")
        if self.mask.resolution != (height, width):
            raise ContractError("mask resolution does not match image")


@dataclass
class DragConfig:
    m: int = 40
    lr: float = 0.01
    beta: float = 0.1
    r_track: int = 3


@dataclass
class DragResult:
    edited_latent_te: LatentGrid
    edited_image: np.ndarray
    reference_latent_tr: LatentGrid
    tracked_handles: list[tuple[float, float]]  # image pixels
    clamped: bool = False


def _bilinear_torch(grid: torch.Tensor, x: float | torch.Tensor, y) -> torch.Tensor:
    """Sample H x W x C torch grid at one fractional (x, y), border clamped."""
    H, W = grid.shape[0], grid.shape[1]
    x = min(max(float(x), 0.0), W - 1.0)
    y = min(max(float(y), 0.0), H - 1.0)
    x0 = min(int(np.floor(x)), W - 2) if W > 1 else 0
    y0 = min(int(np.floor(y)), H - 2) if H > 1 else 0
    x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
    wx, wy = x - x0, y - y0
    top = grid[y0, x0] * (1 - wx) + grid[y0, x1] * wx
    bot = grid[y1, x0] * (1 - wx) + grid[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def _pool_mask(mask: MaskGrid, stride: int) -> np.ndarray:
    vals = mask.values
    H, W = vals.shape
    if H % stride or W % stride:
        raise ContractError("mask resolution not divisible by latent stride")
    return vals.reshape(H // stride, stride, W // stride, stride).mean(axis=(1, 3))


def drag_edit(
    image: np.ndarray,
    spec: EditSpec,
    den: Denoiser,
    sched: Schedule,
    dec: Decoder,
    cfg: DragConfig,
    latent_stride: int = 1,
) -> DragResult:
    """Run the m-step drag loop at step t_e, then decode and re-invert."""
    H, W = image.shape[:2]
    spec.validate(W, H)
    if cfg.m < 0:
        raise ContractError("cfg.m must be >= 0")

    z0 = dec.encode(image, latent_stride)
    z_init = ddim_invert(z0, den, sched, sched.t_e)
    lh, lw = z_init.shape[:2]

    mask_lat = _pool_mask(spec.mask, latent_stride)
    handles = [np.array([u / latent_stride, v / latent_stride]) for u, v in spec.handles]
    targets = [np.array([u / latent_stride, v / latent_stride]) for u, v in spec.targets]

    z = torch.from_numpy(z_init.values.copy()).requires_grad_()
    z_ref = torch.from_numpy(z_init.values.copy())
    keep = torch.from_numpy((1.0 - mask_lat)[..., None])
    with torch.no_grad():
        F0 = den.feature_map(z_ref, sched.t_e)
    f0 = [_bilinear_torch(F0, h[0], h[1]).clone() for h in handles]

    clamped = False
    for k in range(cfg.m):
        if all(np.linalg.norm(h - t) <= 1.0 for h, t in zip(handles, targets)):
            break
        F = den.feature_map(z, sched.t_e)
        loss = cfg.beta * ((z - z_ref) * keep).abs().sum()
        for h, t in zip(handles, targets):
            gap = t - h
            dist = np.linalg.norm(gap)
            if dist <= 1.0:
                continue
            d = gap / dist  # unit step, one latent pixel
            cur = _bilinear_torch(F, h[0], h[1]).detach()
            ahead = _bilinear_torch(F, h[0] + d[0], h[1] + d[1])
            loss = loss + (ahead - cur).abs().sum()
        if not torch.isfinite(loss):
            raise NumericalFailureError("drag loss became non-finite", k)
        if z.grad is not None:
            z.grad = None
        loss.backward()
        with torch.no_grad():
            z -= cfg.lr * z.grad

        # Point tracking: nearest feature match to the original handle
        # feature within a square window; row-major tie break.
        with torch.no_grad():
            F1 = den.feature_map(z, sched.t_e)
            for j, h in enumerate(handles):
                r = cfg.r_track
                hx, hy = int(round(h[0])), int(round(h[1]))
                best = None
                for yy in range(max(0, hy - r), min(lh, hy + r + 1)):
                    for xx in range(max(0, hx - r), min(lw, hx + r + 1)):
                        dist_f = float((F1[yy, xx] - f0[j]).abs().sum())
                        if best is None or dist_f < best[0] - 1e-15:
                            best = (dist_f, xx, yy)
                nx, ny = best[1], best[2]
                if not (0 <= nx < lw and 0 <= ny < lh):  # pragma: no cover
                    nx, ny = min(max(nx, 0), lw - 1), min(max(ny, 0), lh - 1)
                    clamped = True
                handles[j] = np.array([float(nx), float(ny)])

    z_final = z_init.with_values(z.detach().numpy())
    z_clean = ddim_denoise(z_final, den, sched, sched.t_e, 0)
    edited_image = dec.decode(z_clean)
    z_tr = reinvert_edited(edited_image, den, sched, dec, latent_stride)
    return DragResult(
        edited_latent_te=z_final,
        edited_image=edited_image,
        reference_latent_tr=z_tr,
        tracked_handles=[
            (h[0] * latent_stride, h[1] * latent_stride) for h in handles
        ],
        clamped=clamped,
    )


def reinvert_edited(
    edited_image: np.ndarray,
    den: Denoiser,
    sched: Schedule,
    dec: Decoder,
    latent_stride: int = 1,
) -> LatentGrid:
    """Encode the edited image and invert it to step t_r."""
    z0 = dec.encode(edited_image, latent_stride)
    return ddim_invert(z0, den, sched, sched.t_r)
