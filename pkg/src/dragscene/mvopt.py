"""Per-view latent optimization against rendered latent/mask maps.

Inside the rendered mask the latent is pulled (L1) toward the rendered
reference latent map; outside it, the one-step denoised prediction is held
close to that of the initial latent. Both targets sit behind stop-gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .diffusion import Decoder, Denoiser, Schedule, ddim_denoise, ddim_invert, denoise_step_values
from .errors import ContractError, NumericalFailureError
from .latent_field import AttributedPointCloud, LatentGrid, RenderedMaps, render_latent_map


@dataclass
class MVOptConfig:
    lam: float = 1.0  # weight of the preservation loss
    sigma: float = 0.05  # latent learning rate
    m_iters: int = 60
    mask_threshold: float = 0.5
    literal_rec: bool = False  # difference the initial latent instead of the iterate

    def __post_init__(self):
        if self.lam < 0 or self.sigma <= 0 or self.m_iters < 0:
            raise ContractError("invalid MVOptConfig ranges")
        if not 0 <= self.mask_threshold <= 1:
            raise ContractError("mask_threshold must lie in [0, 1]")


@dataclass
class ViewEditResult:
    optimized_latent: LatentGrid
    edited_image: np.ndarray
    loss_trace: list[tuple[float, float, float]]  # (L_rec, L_mask, L_total)
    zero_coverage: bool = False


def _weights(maps: RenderedMaps) -> tuple[torch.Tensor, torch.Tensor]:
    cov = maps.coverage.astype(float)
    inside = torch.from_numpy(maps.mask_map.values * cov)[..., None]
    outside = torch.from_numpy(1.0 - maps.mask_map.values)[..., None]
    return inside, outside


def _check_shapes(z_cur: LatentGrid, maps: RenderedMaps) -> None:
    if z_cur.shape != maps.latent_map.shape:
        raise ContractError(
            f"latent shape {z_cur.shape} != rendered map {maps.latent_map.shape}"
        )
    if z_cur.timestep != maps.latent_map.timestep:
        raise ContractError("latent and rendered map timestep mismatch")


def _rec_term(z: torch.Tensor, target: torch.Tensor, inside: torch.Tensor):
    return ((z - target) * inside).abs().sum()


def rec_loss(z_cur: LatentGrid, maps: RenderedMaps) -> float:
    """L1 pull toward the rendered latent map on masked covered pixels."""
    _check_shapes(z_cur, maps)
    inside, _ = _weights(maps)
    z = torch.from_numpy(z_cur.values)
    target = torch.from_numpy(maps.latent_map.values)
    return float(_rec_term(z, target, inside))


def mask_loss(
    z_cur: LatentGrid,
    z_init: LatentGrid,
    maps: RenderedMaps,
    den: Denoiser,
    sched: Schedule,
) -> float:
    """L1 between one-step predictions of current and initial latents on the
    mask complement."""
    _check_shapes(z_cur, maps)
    if z_cur.timestep != z_init.timestep:
        raise ContractError("latents must share a timestep")
    _, outside = _weights(maps)
    t = z_cur.timestep
    cur = denoise_step_values(torch.from_numpy(z_cur.values), t, den, sched)
    ref = denoise_step_values(torch.from_numpy(z_init.values), t, den, sched)
    return float(((cur - ref) * outside).abs().sum())


def optimize_view_latent(
    z_init: LatentGrid,
    maps: RenderedMaps,
    den: Denoiser,
    sched: Schedule,
    cfg: MVOptConfig,
) -> tuple[LatentGrid, list[tuple[float, float, float]]]:
    """Constant-step subgradient descent on L_rec + lam * L_mask."""
    _check_shapes(z_init, maps)
    t = z_init.timestep
    inside, outside = _weights(maps)
    target = torch.from_numpy(maps.latent_map.values)
    z0 = torch.from_numpy(z_init.values.copy())
    with torch.no_grad():
        ref_step = denoise_step_values(z0, t, den, sched)  # cached, constant

    z = z0.clone().requires_grad_()
    trace: list[tuple[float, float, float]] = []
    for k in range(cfg.m_iters):
        rec_input = z0 if cfg.literal_rec else z
        l_rec = _rec_term(rec_input, target, inside)
        cur_step = denoise_step_values(z, t, den, sched)
        l_mask = ((cur_step - ref_step) * outside).abs().sum()
        total = l_rec + cfg.lam * l_mask
        if not torch.isfinite(total):
            raise NumericalFailureError("view latent loss became non-finite", k)
        trace.append(
            (float(l_rec.detach()), float(l_mask.detach()), float(total.detach()))
        )
        if z.grad is not None:
            z.grad = None
        total.backward()
        with torch.no_grad():
            if z.grad is not None:
                z -= cfg.sigma * z.grad
    return z_init.with_values(z.detach().numpy()), trace


def edit_view(
    image: np.ndarray,
    cloud: AttributedPointCloud,
    cam,
    den: Denoiser,
    sched: Schedule,
    dec: Decoder,
    cfg: MVOptConfig,
    latent_stride: int | None = None,
) -> ViewEditResult:
    """Invert a novel view, optimize its latent against the rendered maps,
    then denoise and decode."""
    stride = cloud.latent_stride if latent_stride is None else latent_stride
    z0 = dec.encode(image, stride)
    z_init = ddim_invert(z0, den, sched, sched.t_r)
    maps = render_latent_map(cloud, cam, stride)
    if not maps.coverage.any():
        clean = ddim_denoise(z_init, den, sched, sched.t_r, 0)
        return ViewEditResult(z_init, dec.decode(clean), [], zero_coverage=True)
    z_opt, trace = optimize_view_latent(z_init, maps, den, sched, cfg)
    clean = ddim_denoise(z_opt, den, sched, sched.t_r, 0)
    return ViewEditResult(z_opt, dec.decode(clean), trace)
