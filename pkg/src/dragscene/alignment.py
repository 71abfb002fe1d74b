"""Masked global alignment of pairwise pointmap predictions.

The reference view is the gauge anchor: its pose is pinned to the identity,
so the alignment world frame is the reference camera frame. Poses
(axis-angle + translation offsets from their initial estimates), per-view
scale normalizers and fused pointmaps are optimized jointly with Adam at a
constant learning rate; the masked branch of the loss ties edited regions
to the reference-pair prediction only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ContractError, OptimizationFailureError
from .geometry import CameraView, MaskGrid, Pointmap

CHARBONNIER_EPS = 1e-8


@dataclass
class PairwisePrediction:
    """Pointmap of view ``src`` (its pixel grid) expressed in ``tgt``'s
    camera frame, with per-pixel confidence."""

    src_view: int
    tgt_view: int
    pointmap: Pointmap  # frame == tgt_view, grid resolution of src
    confidence: np.ndarray  # H x W, finite, >= 0

    def __post_init__(self):
        if self.pointmap.frame != self.tgt_view:
            raise ContractError("prediction pointmap not in target frame")
        conf = np.asarray(self.confidence, dtype=float)
        if conf.shape != self.pointmap.points.shape[:2]:
            raise ContractError("confidence shape mismatch")
        if not np.all(np.isfinite(conf)) or conf.min() < 0:
            raise ContractError("confidence must be finite and non-negative")
        self.confidence = conf


class PointmapProvider:
    """Pairwise pointmap source; deterministic for fixed inputs and seed."""

    def predict(self, src_view: int, tgt_view: int) -> PairwisePrediction:
        raise NotImplementedError


@dataclass
class AlignmentState:
    """Poses, fused world-frame pointmaps and scale normalizers.

    ``view_ids[0]`` is the reference; its pose is the identity throughout.
    """

    view_ids: list[int]
    poses: dict[int, CameraView]
    fused: dict[int, Pointmap]
    scales: dict[int, float]
    initial_loss: float = float("nan")
    final_loss: float = float("nan")

    @property
    def reference(self) -> int:
        return self.view_ids[0]


@dataclass
class AlignConfig:
    iters: int = 500
    lr: float = 0.005
    noise_sigma: float = 0.0
    seed: int = 0
    s_views: int = 4  # auxiliary original views fed to alignment


class SyntheticProvider(PointmapProvider):
    """Desk-scale oracle: ground-truth pair geometry plus Gaussian noise.

    When ``edited`` is true, pairs involving the reference view emit the
    scene's embedded edited geometry inside the edit mask of the
    grid-owning view, mimicking a pointmap network that saw the edited
    reference image. With ``edited`` false (e.g. a no-op edit) all pairs
    carry the original geometry.
    """

    def __init__(self, scene, noise_sigma: float, seed: int, edited: bool = True):
        self.scene = scene
        self.noise_sigma = float(noise_sigma)
        self.seed = int(seed)
        self.edited = bool(edited)

    def predict(self, src_view: int, tgt_view: int) -> PairwisePrediction:
        scene = self.scene
        if src_view not in scene.view_ids() or tgt_view not in scene.view_ids():
            raise ContractError(f"unknown view id in pair ({src_view}, {tgt_view})")
        pts_world = scene.gt_points_world(src_view).copy()
        valid = scene.gt_valid(src_view).copy()
        ref = scene.reference_view_id()
        if self.edited and (src_view == ref or tgt_view == ref):
            m = scene.gt_edit_mask(src_view)
            pts_world = np.where(
                m[..., None], scene.gt_points_world_edited(src_view), pts_world
            )
            valid = np.where(m, scene.gt_valid_edited(src_view), valid)
        pose = scene.camera(tgt_view).pose
        pts = pts_world @ pose[:3, :3].T + pose[:3, 3]
        if self.noise_sigma > 0:
            rng = np.random.default_rng((self.seed, src_view, tgt_view))
            pts = pts + rng.normal(0.0, self.noise_sigma, size=pts.shape)
        pts = np.where(valid[..., None], pts, 0.0)
        pm = Pointmap(tgt_view, pts, valid)
        conf = np.ones(valid.shape)
        return PairwisePrediction(src_view, tgt_view, pm, conf)


def synthetic_provider(
    scene, noise_sigma: float, seed: int, edited: bool = True
) -> SyntheticProvider:
    return SyntheticProvider(scene, noise_sigma, seed, edited)


def _rotation_from_axis_angle(omega: torch.Tensor) -> torch.Tensor:
    """Rodrigues map, differentiable at zero via sinc."""
    theta = torch.linalg.norm(omega)
    K = torch.zeros((3, 3), dtype=omega.dtype)
    K = K + torch.stack(
        [
            torch.stack([omega[0] * 0, -omega[2], omega[1]]),
            torch.stack([omega[2], omega[0] * 0, -omega[0]]),
            torch.stack([-omega[1], omega[0], omega[0] * 0]),
        ]
    )
    a = torch.sinc(theta / torch.pi)
    half = torch.sinc(theta / (2 * torch.pi))
    b = 0.5 * half * half
    return torch.eye(3, dtype=omega.dtype) + a * K + b * (K @ K)


def _charbonnier(sq_norm: torch.Tensor) -> torch.Tensor:
    # sqrt(||r||^2 + eps^2) - eps: zero at exact fit, smooth at the kink
    return torch.sqrt(sq_norm + CHARBONNIER_EPS**2) - CHARBONNIER_EPS


class _LossTerms:
    """Preassembled tensors for evaluating the masked regression loss."""

    def __init__(
        self,
        view_ids: list[int],
        preds: dict[tuple[int, int], PairwisePrediction],
        warped_masks: dict[int, MaskGrid],
    ):
        self.view_ids = view_ids
        self.pred_pts: dict[tuple[int, int], torch.Tensor] = {}
        self.pred_valid: dict[tuple[int, int], torch.Tensor] = {}
        self.conf: dict[tuple[int, int], torch.Tensor] = {}
        self.masks: dict[int, torch.Tensor] = {}
        for m in view_ids:
            if m not in warped_masks:
                raise ContractError(f"missing warped mask for view {m}")
            self.masks[m] = torch.from_numpy(
                np.asarray(warped_masks[m].values, dtype=float)
            )
            for n in view_ids:
                if (m, n) not in preds:
                    raise ContractError(f"missing pair prediction ({m}, {n})")
                p = preds[(m, n)]
                self.pred_pts[(m, n)] = torch.from_numpy(p.pointmap.points)
                self.pred_valid[(m, n)] = torch.from_numpy(p.pointmap.valid)
                self.conf[(m, n)] = torch.from_numpy(p.confidence)

    def evaluate(
        self,
        fused: dict[int, torch.Tensor],
        fused_valid: dict[int, torch.Tensor],
        log_z: dict[int, torch.Tensor],
        pose_mats: dict[int, torch.Tensor],
    ) -> torch.Tensor:
        view_ids = self.view_ids
        ref = view_ids[0]
        s_plus_1 = len(view_ids)
        total = torch.zeros((), dtype=torch.float64)
        for m in view_ids:
            X = fused[m]
            inv_z = torch.exp(-log_z[m])
            M = self.masks[m]
            for n in view_ids:
                P = pose_mats[n]
                R, t = P[:3, :3], P[:3, 3]
                # world = R^T (cam - t)
                W = (self.pred_pts[(m, n)] - t) @ R
                ok = fused_valid[m] & self.pred_valid[(m, n)]
                r = (X - W) * inv_z
                rho = _charbonnier((r * r).sum(-1)) * self.conf[(m, n)]
                unmasked = (rho * (1.0 - M) / s_plus_1)[ok].sum()
                total = total + unmasked
                if n == ref:
                    total = total + (rho * M)[ok].sum()
        return total


def _pose_matrix(cam: CameraView) -> torch.Tensor:
    return torch.from_numpy(np.asarray(cam.pose, dtype=float))


def regression_loss(
    state: AlignmentState,
    preds: dict[tuple[int, int], PairwisePrediction],
    warped_masks: dict[int, MaskGrid],
) -> float:
    """Masked multi-view regression loss at the given state (Charbonnier-
    smoothed Euclidean residuals, confidence weighted)."""
    terms = _LossTerms(state.view_ids, preds, warped_masks)
    fused = {m: torch.from_numpy(state.fused[m].points) for m in state.view_ids}
    valid = {m: torch.from_numpy(state.fused[m].valid) for m in state.view_ids}
    log_z = {
        m: torch.tensor(np.log(state.scales[m]), dtype=torch.float64)
        for m in state.view_ids
    }
    poses = {m: _pose_matrix(state.poses[m]) for m in state.view_ids}
    return float(terms.evaluate(fused, valid, log_z, poses))


def _init_state(
    views: list[CameraView],
    preds: dict[tuple[int, int], PairwisePrediction],
    init_poses: dict[int, np.ndarray],
) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray], dict[int, float]]:
    """Initial fused pointmaps (average of world-transformed predictions)
    and scales (mean valid point norm)."""
    fused, valid, scales = {}, {}, {}
    for cam in views:
        m = cam.view_id
        acc = None
        cnt = None
        for cam_n in views:
            n = cam_n.view_id
            p = preds[(m, n)]
            pose = init_poses[n]
            W = (p.pointmap.points - pose[:3, 3]) @ pose[:3, :3]
            ok = p.pointmap.valid
            w = np.where(ok[..., None], W, 0.0)
            c = ok.astype(float)[..., None]
            acc = w if acc is None else acc + w
            cnt = c if cnt is None else cnt + c
        with np.errstate(invalid="ignore"):
            pts = np.where(cnt > 0, acc / np.maximum(cnt, 1), 0.0)
        ok_any = cnt[..., 0] > 0
        fused[m] = pts
        valid[m] = ok_any
        norms = np.linalg.norm(pts[ok_any], axis=-1)
        scales[m] = float(norms.mean()) if norms.size and norms.mean() > 0 else 1.0
    return fused, valid, scales


def global_align(
    views: list[CameraView],
    provider: PointmapProvider,
    edit_mask: MaskGrid,
    config: AlignConfig,
    warped_masks: dict[int, MaskGrid] | None = None,
) -> AlignmentState:
    """Jointly optimize poses, scales and fused pointmaps.

    ``views`` carry the initial pose estimates, expressed relative to the
    reference view (views[0]); the reference pose is held at the identity.
    ``warped_masks`` may be precomputed; otherwise the edit mask is warped
    through the reference-pair prediction geometry.
    """
    if len(views) < 2:
        raise ContractError("need the reference plus at least one other view")
    view_ids = [v.view_id for v in views]
    ref = view_ids[0]
    preds = {
        (m, n): provider.predict(m, n) for m in view_ids for n in view_ids
    }

    if warped_masks is None:
        from .geometry import warp_mask

        ref_pm = preds[(ref, ref)].pointmap
        ref_cam = views[0]
        warped_masks = {ref: edit_mask}
        for cam in views[1:]:
            warped_masks[cam.view_id] = warp_mask(edit_mask, ref_pm, ref_cam, cam)

    # Initial poses relative to the reference.
    ref_pose_inv = np.linalg.inv(views[0].pose)
    init_poses = {v.view_id: v.pose @ ref_pose_inv for v in views}
    fused0, valid0, scales0 = _init_state(views, preds, init_poses)

    terms = _LossTerms(view_ids, preds, warped_masks)
    fused = {m: torch.from_numpy(fused0[m].copy()).requires_grad_() for m in view_ids}
    fvalid = {m: torch.from_numpy(valid0[m]) for m in view_ids}
    log_z = {
        m: torch.tensor(np.log(scales0[m]), dtype=torch.float64, requires_grad=True)
        for m in view_ids
    }
    base_pose = {m: torch.from_numpy(init_poses[m].copy()) for m in view_ids}
    omega = {
        m: torch.zeros(3, dtype=torch.float64, requires_grad=True)
        for m in view_ids
        if m != ref
    }
    tau = {
        m: torch.zeros(3, dtype=torch.float64, requires_grad=True)
        for m in view_ids
        if m != ref
    }

    def pose_mats() -> dict[int, torch.Tensor]:
        mats = {ref: base_pose[ref]}
        for m in view_ids:
            if m == ref:
                continue
            R = _rotation_from_axis_angle(omega[m])
            top = torch.cat([R, tau[m].reshape(3, 1)], dim=1)
            delta = torch.cat(
                [top, torch.tensor([[0.0, 0.0, 0.0, 1.0]], dtype=torch.float64)]
            )
            mats[m] = delta @ base_pose[m]
        return mats

    params = list(fused.values()) + list(log_z.values())
    params += list(omega.values()) + list(tau.values())
    optimizer = torch.optim.Adam(params, lr=config.lr)

    best = None
    initial_loss = None
    for it in range(config.iters + 1):
        optimizer.zero_grad(set_to_none=True)
        loss = terms.evaluate(fused, fvalid, log_z, pose_mats())
        lval = float(loss.detach())
        if not np.isfinite(lval):
            raise OptimizationFailureError("alignment loss diverged", it)
        if initial_loss is None:
            initial_loss = lval
        if best is None or lval < best[0]:
            with torch.no_grad():
                best = (
                    lval,
                    {m: fused[m].detach().numpy().copy() for m in view_ids},
                    {m: float(np.exp(float(log_z[m]))) for m in view_ids},
                    {m: pose_mats()[m].detach().numpy().copy() for m in view_ids},
                )
        if it == config.iters:
            break
        loss.backward()
        optimizer.step()

    lbest, fused_np, scales, poses_np = best
    # Snap rotation blocks back onto the manifold (axis-angle keeps them
    # close; the SVD removes residual numerical drift).
    for m in view_ids:
        if m == ref:
            continue
        P = poses_np[m]
        U, _, Vt = np.linalg.svd(P[:3, :3])
        Rn = U @ Vt
        if np.linalg.det(Rn) < 0:
            U[:, -1] *= -1
            Rn = U @ Vt
        P[:3, :3] = Rn
    poses = {}
    fused_out = {}
    for cam in views:
        m = cam.view_id
        pose = poses_np[m] if m != ref else np.eye(4)
        poses[m] = cam.with_pose(pose)
        fused_out[m] = Pointmap(ref, fused_np[m], valid0[m])
    return AlignmentState(
        view_ids,
        poses,
        fused_out,
        scales,
        initial_loss=initial_loss,
        final_loss=lbest,
    )
