"""Deterministic DDIM machinery with pluggable noise predictors and decoders.

Timesteps are integer tags 0 .. t_total-1; a clean latent carries tag 0.
Inversion solves each reverse step exactly by fixed-point iteration, so
invert-then-denoise is an identity up to solver tolerance for any
contractive noise predictor.

All shipped denoisers operate elementwise or with a small local stencil and
accept both numpy arrays and torch tensors, which lets the latent
optimizers differentiate through them with autograd.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigurationError, ContractError, NumericalFailureError
from .latent_field import LatentGrid

_FIXED_POINT_TOL = 1e-13
_FIXED_POINT_MAX_ITERS = 100


@dataclass(frozen=True)
class Schedule:
    t_total: int
    alpha_bar: np.ndarray  # strictly decreasing, in (0, 1]
    t_e: int
    t_r: int

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=float)
        if ab.shape != (self.t_total,):
            raise ContractError("alpha_bar length must equal t_total")
        if np.any(ab <= 0) or np.any(ab > 1):
            raise ContractError("alpha_bar must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0):
            raise ContractError("alpha_bar must be strictly decreasing")
        for name, t in (("t_e", self.t_e), ("t_r", self.t_r)):
            if not 1 <= t <= self.t_total:
                raise ContractError(f"{name}={t} outside [1, {self.t_total}]")
        object.__setattr__(self, "alpha_bar", ab)


def eta_to_step(eta: float, t_total: int) -> int:
    """Inversion strength to schedule step: t = round(eta * t_total)."""
    return int(round(eta * t_total))


def make_schedule(
    t_total: int,
    beta_min: float = 1e-4,
    beta_max: float = 0.02,
    eta_e: float = 0.7,
    eta_r: float = 0.4,
) -> Schedule:
    """Linear-beta schedule; alpha_bar[t] = prod_{u<=t} (1 - beta_u)."""
    if t_total < 1:
        raise ContractError("t_total must be >= 1")
    if not 0 < beta_min <= beta_max < 1:
        raise ContractError("require 0 < beta_min <= beta_max < 1")
    betas = np.linspace(beta_min, beta_max, t_total)
    alpha_bar = np.cumprod(1.0 - betas)
    return Schedule(
        t_total, alpha_bar, eta_to_step(eta_e, t_total), eta_to_step(eta_r, t_total)
    )


def _is_torch(x) -> bool:
    return isinstance(x, torch.Tensor)


def _box_blur3(x):
    """3x3 box blur with zero padding, h x w x c, numpy or torch."""
    if _is_torch(x):
        p = torch.nn.functional.pad(x.permute(2, 0, 1), (1, 1, 1, 1)).permute(1, 2, 0)
    else:
        p = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    h, w = x.shape[0], x.shape[1]
    acc = None
    for dy in range(3):
        for dx in range(3):
            s = p[dy : dy + h, dx : dx + w]
            acc = s if acc is None else acc + s
    return acc / 9.0


class Denoiser:
    """Noise-predictor interface; deterministic, shape preserving."""

    def noise_predict(self, values, t: int):
        raise NotImplementedError

    def feature_map(self, values, t: int):
        """Feature grid used by drag-point supervision and tracking."""
        raise NotImplementedError


class ZeroDenoiser(Denoiser):
    def noise_predict(self, values, t):
        return values * 0.0

    def feature_map(self, values, t):
        return values


class ScalarLinearDenoiser(Denoiser):
    """eps = a * z; admits an exact scalar recursion oracle."""

    def __init__(self, a: float = 0.1):
        self.a = a

    def noise_predict(self, values, t):
        return self.a * values

    def feature_map(self, values, t):
        return values


class SmoothingDenoiser(Denoiser):
    """eps = z - blur(z) with a 3x3 box blur.

    The feature map is the blurred field, which varies smoothly in space
    and gives point tracking something to latch onto.
    """

    def noise_predict(self, values, t):
        return values - _box_blur3(values)

    def feature_map(self, values, t):
        return _box_blur3(values)


def make_denoiser(kind: str, **params) -> Denoiser:
    if kind == "zero":
        return ZeroDenoiser()
    if kind == "linear":
        return ScalarLinearDenoiser(**params)
    if kind == "smoothing":
        return SmoothingDenoiser()
    raise ConfigurationError(f"unknown denoiser kind {kind!r}")


def _check_finite(x, step: int):
    finite = torch.isfinite(x).all() if _is_torch(x) else np.all(np.isfinite(x))
    if not finite:
        raise NumericalFailureError("non-finite latent during DDIM iteration", step)


def denoise_step_values(values, t: int, den: Denoiser, sched: Schedule):
    """One deterministic DDIM update t -> t-1 on raw values.

    Differentiable when ``values`` is a torch tensor.
    """
    if t < 1:
        raise ContractError("cannot denoise below step 0")
    ab = sched.alpha_bar
    ab_prev = ab[t - 1] if t >= 1 else 1.0
    eps = den.noise_predict(values, t)
    s_t = float(np.sqrt(1.0 - ab[t]))
    s_prev = float(np.sqrt(1.0 - ab_prev))
    scale = float(np.sqrt(ab_prev / ab[t]))
    return scale * (values - s_t * eps) + s_prev * eps


def invert_step_values(values, t: int, den: Denoiser, sched: Schedule):
    """Exact inverse of the t+1 -> t denoise update.

    Solves for z_{t+1} such that denoising it reproduces ``values`` by
    fixed-point iteration on the noise prediction.
    """
    ab = sched.alpha_bar
    s_t = float(np.sqrt(1.0 - ab[t]))
    s_next = float(np.sqrt(1.0 - ab[t + 1]))
    scale = float(np.sqrt(ab[t + 1] / ab[t]))
    z = values
    eps = den.noise_predict(values, t + 1)
    for _ in range(_FIXED_POINT_MAX_ITERS):
        z_new = scale * (values - s_t * eps) + s_next * eps
        delta = z_new - z
        err = float(delta.abs().max()) if _is_torch(delta) else float(np.abs(delta).max())
        z = z_new
        if err < _FIXED_POINT_TOL:
            break
        eps = den.noise_predict(z, t + 1)
    return z


def ddim_invert(
    z0: LatentGrid, den: Denoiser, sched: Schedule, t_target: int
) -> LatentGrid:
    """Deterministic inversion from the latent's current step up to t_target."""
    if t_target >= sched.t_total:
        raise ContractError(
            f"t_target {t_target} outside schedule (max {sched.t_total - 1})"
        )
    if t_target < z0.timestep:
        raise ContractError("t_target below the latent's current step")
    values = z0.values
    for t in range(z0.timestep, t_target):
        values = invert_step_values(values, t, den, sched)
        _check_finite(values, t + 1)
    return z0.with_values(values, timestep=t_target)


def ddim_denoise(
    z_t: LatentGrid, den: Denoiser, sched: Schedule, t_from: int, t_to: int = 0
) -> LatentGrid:
    """Deterministic DDIM updates from t_from down to t_to."""
    if z_t.timestep != t_from:
        raise ContractError(f"latent tagged {z_t.timestep}, expected {t_from}")
    if t_to > t_from:
        raise ContractError("t_to must not exceed t_from")
    values = z_t.values
    for t in range(t_from, t_to, -1):
        values = denoise_step_values(values, t, den, sched)
        _check_finite(values, t - 1)
    return z_t.with_values(values, timestep=t_to)


def denoise_one_step(z_t: LatentGrid, den: Denoiser, sched: Schedule) -> LatentGrid:
    """Single DDIM update to t-1; see denoise_step_values for gradients."""
    t = z_t.timestep
    if t < 1:
        raise ContractError("latent already at step 0")
    values = denoise_step_values(z_t.values, t, den, sched)
    _check_finite(values, t - 1)
    return z_t.with_values(values, timestep=t - 1)


class Decoder:
    """Latent -> image map with a deterministic (pseudo-)inverse."""

    def decode(self, z: LatentGrid) -> np.ndarray:
        raise NotImplementedError

    def encode(self, image: np.ndarray, latent_stride: int) -> LatentGrid:
        raise NotImplementedError


class IdentityDecoder(Decoder):
    """Decode = copy; requires 3 channels and stride 1."""

    channels = 3
    stride = 1

    def decode(self, z: LatentGrid) -> np.ndarray:
        if z.shape[2] != 3 or z.latent_stride != 1:
            raise ConfigurationError("identity decoder requires c=3 and stride=1")
        return z.values.copy()

    def encode(self, image: np.ndarray, latent_stride: int = 1) -> LatentGrid:
        if latent_stride != 1:
            raise ConfigurationError("identity decoder requires stride=1")
        return LatentGrid(np.asarray(image, dtype=float).copy(), 0, 1)


class LinearDecoder(Decoder):
    """Fixed seeded channel projection plus nearest-neighbour upsampling.

    decode: y = upsample_s(z @ A.T) with A a seeded 3 x c matrix.
    encode: least-squares inverse, x = avgpool_s(y) @ pinv(A).T. For c <= 3
    this makes encode(decode(z)) exact.
    """

    def __init__(self, channels: int = 4, stride: int = 1, seed: int = 0):
        self.channels = channels
        self.stride = stride
        rng = np.random.default_rng(seed)
        self.matrix = rng.standard_normal((3, channels)) / np.sqrt(channels)
        if np.linalg.matrix_rank(self.matrix) < min(3, channels):
            raise ConfigurationError("projection matrix is rank deficient")
        self.pinv = np.linalg.pinv(self.matrix)

    def decode(self, z: LatentGrid) -> np.ndarray:
        if z.shape[2] != self.channels:
            raise ConfigurationError(
                f"latent has {z.shape[2]} channels, decoder expects {self.channels}"
            )
        img = z.values @ self.matrix.T
        s = self.stride
        return np.repeat(np.repeat(img, s, axis=0), s, axis=1)

    def encode(self, image: np.ndarray, latent_stride: int | None = None) -> LatentGrid:
        s = self.stride if latent_stride is None else latent_stride
        if s != self.stride:
            raise ConfigurationError("stride mismatch with decoder configuration")
        image = np.asarray(image, dtype=float)
        H, W = image.shape[:2]
        if H % s or W % s:
            raise ConfigurationError("image resolution not divisible by stride")
        pooled = image.reshape(H // s, s, W // s, s, 3).mean(axis=(1, 3))
        return LatentGrid(pooled @ self.pinv.T, 0, s)


def make_decoder(kind: str, **params) -> Decoder:
    if kind == "identity":
        return IdentityDecoder()
    if kind == "linear":
        return LinearDecoder(**params)
    raise ConfigurationError(f"unknown decoder kind {kind!r}")
