"""Camera models, homogeneous transforms, pointmap frame changes and mask warping.

Conventions: world and camera frames are right-handed, camera looks down +z,
image origin top-left, pixel coordinates (u, v) = (column, row). Poses are
4x4 rigid world-to-camera matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ContractError, InvalidInputError

Z_NEAR = 1e-3
DEPTH_EPS = 1e-4  # z-buffer tie tolerance, scene units


@dataclass(frozen=True)
class CameraView:
    """World-to-camera pose plus pinhole intrinsics for one view."""

    view_id: int
    pose: np.ndarray  # 4x4 rigid world-to-camera
    intrinsics: tuple[float, float, float, float]  # fx, fy, cx, cy in pixels
    width: int
    height: int

    def __post_init__(self):
        pose = np.asarray(self.pose, dtype=float)
        if pose.shape != (4, 4):
            raise InvalidInputError(f"pose shape {pose.shape}, expected (4, 4)")
        if not np.all(np.isfinite(pose)):
            raise InvalidInputError("pose contains non-finite entries")
        R = pose[:3, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
            raise InvalidInputError("pose rotation block is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise InvalidInputError("pose rotation block has det != +1")
        if not np.allclose(pose[3], [0, 0, 0, 1]):
            raise InvalidInputError("pose bottom row must be (0,0,0,1)")
        fx, fy, cx, cy = self.intrinsics
        if fx <= 0 or fy <= 0:
            raise InvalidInputError("focal lengths must be positive")
        if not (0 <= cx < self.width and 0 <= cy < self.height):
            raise InvalidInputError("principal point outside image")
        object.__setattr__(self, "pose", pose)

    def with_pose(self, pose: np.ndarray) -> "CameraView":
        return CameraView(self.view_id, pose, self.intrinsics, self.width, self.height)

    def at_stride(self, stride: int) -> "CameraView":
        """Same camera at latent resolution (intrinsics divided by stride)."""
        fx, fy, cx, cy = self.intrinsics
        return CameraView(
            self.view_id,
            self.pose,
            (fx / stride, fy / stride, cx / stride, cy / stride),
            self.width // stride,
            self.height // stride,
        )


@dataclass
class Pointmap:
    """Per-pixel grid of 3D points expressed in the frame of view ``frame``."""

    frame: int
    points: np.ndarray  # H x W x 3
    valid: np.ndarray  # H x W bool

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.points.ndim != 3 or self.points.shape[2] != 3:
            raise InvalidInputError(f"points shape {self.points.shape}, expected HxWx3")
        if self.valid.shape != self.points.shape[:2]:
            raise InvalidInputError("valid grid shape does not match points")
        if not np.all(np.isfinite(self.points[self.valid])):
            raise InvalidInputError("non-finite point marked valid")


@dataclass
class MaskGrid:
    """H x W grid of reals in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise InvalidInputError("mask must be 2-D")
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("mask contains non-finite values")
        if self.values.min() < 0 or self.values.max() > 1:
            raise InvalidInputError("mask values must lie in [0, 1]")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.values.shape


def homogenize(p) -> np.ndarray:
    """(x, y, z) -> (x, y, z, 1). Also accepts ...x3 arrays."""
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)):
        raise InvalidInputError("non-finite input to homogenize")
    if p.shape[-1] != 3:
        raise InvalidInputError(f"expected trailing dim 3, got {p.shape}")
    ones = np.ones(p.shape[:-1] + (1,))
    return np.concatenate([p, ones], axis=-1)


def relative_transform(src: CameraView, dst: CameraView) -> np.ndarray:
    """4x4 mapping src-camera-frame points into dst's camera frame."""
    try:
        src_inv = np.linalg.inv(src.pose)
    except np.linalg.LinAlgError as e:  # unreachable for valid rigid poses
        raise InvalidInputError("singular source pose") from e
    return dst.pose @ src_inv


def transform_pointmap(X: Pointmap, P_src: CameraView, P_dst: CameraView) -> Pointmap:
    """Re-express a pointmap in another view's camera frame."""
    if X.frame != P_src.view_id:
        raise ContractError(
            f"pointmap frame {X.frame} does not match source view {P_src.view_id}"
        )
    if P_src.view_id == P_dst.view_id and np.array_equal(P_src.pose, P_dst.pose):
        return Pointmap(P_dst.view_id, X.points.copy(), X.valid.copy())
    T = relative_transform(P_src, P_dst)
    pts_h = homogenize(np.where(X.valid[..., None], X.points, 0.0))
    out = pts_h @ T.T
    return Pointmap(P_dst.view_id, out[..., :3], X.valid.copy())


def project(X: Pointmap, cam: CameraView):
    """Pinhole projection of a pointmap expressed in ``cam``'s frame.

    Returns (pixels HxWx2, depth HxW, visibility MaskGrid). A point is
    visible iff it is valid, in front of the near plane and its projection
    lands inside the image.
    """
    if X.frame != cam.view_id:
        raise ContractError(f"pointmap frame {X.frame} != camera view {cam.view_id}")
    fx, fy, cx, cy = cam.intrinsics
    x, y, z = X.points[..., 0], X.points[..., 1], X.points[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = fx * x / z + cx
        v = fy * y / z + cy
    pixels = np.stack([u, v], axis=-1)
    inside = (
        (u >= -0.5)
        & (u < cam.width - 0.5)
        & (v >= -0.5)
        & (v < cam.height - 0.5)
    )
    visible = X.valid & (z > Z_NEAR) & np.where(np.isfinite(u) & np.isfinite(v), inside, False)
    pixels = np.where(visible[..., None], pixels, 0.0)
    return pixels, z.copy(), MaskGrid(visible.astype(float))


def lift_pixels(cam: CameraView, depth: np.ndarray) -> Pointmap:
    """Back-project a dense depth grid into ``cam``'s frame."""
    depth = np.asarray(depth, dtype=float)
    if depth.shape != (cam.height, cam.width):
        raise ContractError("depth grid does not match camera resolution")
    fx, fy, cx, cy = cam.intrinsics
    v, u = np.mgrid[0 : cam.height, 0 : cam.width].astype(float)
    x = (u - cx) / fx * depth
    y = (v - cy) / fy * depth
    valid = np.isfinite(depth) & (depth > Z_NEAR)
    pts = np.stack([x, y, depth], axis=-1)
    pts = np.where(valid[..., None], pts, 0.0)
    return Pointmap(cam.view_id, pts, valid)


def splat_nearest(
    points_cam: np.ndarray,
    values: np.ndarray,
    cam: CameraView,
    valid: np.ndarray | None = None,
):
    """Z-buffered nearest-pixel splatting.

    points_cam: N x 3 in cam's frame; values: N x K attributes. Per pixel
    the winner is the point of lowest index among those within DEPTH_EPS of
    the minimum depth. Returns (value grid HxWxK, depth grid, coverage bool
    grid, winner index grid; -1 where uncovered).
    """
    n = points_cam.shape[0]
    if valid is None:
        valid = np.ones(n, dtype=bool)
    fx, fy, cx, cy = cam.intrinsics
    z = points_cam[:, 2]
    ok = np.asarray(valid, dtype=bool) & (z > Z_NEAR)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.rint(fx * points_cam[:, 0] / z + cx)
        v = np.rint(fy * points_cam[:, 1] / z + cy)
    u = np.where(ok & np.isfinite(u), u, -1).astype(np.int64)
    v = np.where(ok & np.isfinite(v), v, -1).astype(np.int64)
    ok &= (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)

    H, W = cam.height, cam.width
    flat = v * W + u
    idx = np.nonzero(ok)[0]
    zmin = np.full(H * W, np.inf)
    np.minimum.at(zmin, flat[idx], z[idx])
    near = idx[z[idx] <= zmin[flat[idx]] + DEPTH_EPS]
    winner = np.full(H * W, n, dtype=np.int64)
    np.minimum.at(winner, flat[near], near)
    winner[winner == n] = -1
    winner = winner.reshape(H, W)
    depth = np.where(np.isfinite(zmin), zmin, np.inf).reshape(H, W)
    coverage = winner >= 0
    K = values.shape[1]
    grid = np.zeros((H, W, K))
    grid[coverage] = values[winner[coverage]]
    return grid, depth, coverage, winner


def warp_mask(
    M: MaskGrid, X_ref: Pointmap, ref: CameraView, dst: CameraView
) -> MaskGrid:
    """Transport a reference-view mask into another view.

    Lifts every valid reference pixel to 3D via the reference pointmap,
    moves it into dst's camera frame and splats with a z-buffer; a single
    morphological closing (radius 1) then fills splat holes.
    """
    if M.resolution != X_ref.points.shape[:2]:
        raise ContractError("mask resolution does not match reference pointmap")
    if X_ref.frame != ref.view_id:
        raise ContractError("reference pointmap not in reference frame")
    if M.values.max() == 0.0:
        return MaskGrid(np.zeros((dst.height, dst.width)))
    moved = transform_pointmap(X_ref, ref, dst)
    pts = moved.points.reshape(-1, 3)
    vals = M.values.reshape(-1, 1)
    grid, _, coverage, _ = splat_nearest(pts, vals, dst, moved.valid.reshape(-1))
    out = grid[..., 0]
    closed = ndimage.grey_closing(out, size=(3, 3), mode="constant", cval=0.0)
    return MaskGrid(np.clip(closed, 0.0, 1.0))
