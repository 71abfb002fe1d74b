"""Deterministic synthetic multi-view scenes with exact ground truth.

Geometry is a list of axis-aligned boxes (a thin slab doubles as a
background plane or billboard). Images and per-pixel pointmaps are rendered
analytically by ray casting, so every view has exact geometry, colors and
an embedded ground-truth edit (a rigid displacement of one primitive) for
oracle use.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ContractError, InvalidInputError
from .geometry import CameraView, MaskGrid, Pointmap
from .tensorio import read_tensor, write_tensor

DEFAULT_ARC_DEG = 30.0
DEFAULT_RADIUS = 6.0
DEFAULT_RESOLUTION = 32
DEFAULT_FOCAL = 40.0


@dataclass
class Box:
    """Axis-aligned box with either a constant color or a texture."""

    lo: np.ndarray
    hi: np.ndarray
    color: np.ndarray | None = None
    texture: object | None = None  # callable points Nx3 -> colors Nx3

    def shifted(self, d: np.ndarray) -> "Box":
        tex = self.texture
        if tex is not None:
            base = tex
            shift = np.asarray(d, dtype=float)
            tex = lambda p: base(p - shift)
        return Box(self.lo + d, self.hi + d, self.color, tex)

    def color_at(self, points: np.ndarray) -> np.ndarray:
        if self.texture is not None:
            return self.texture(points)
        return np.broadcast_to(self.color, points.shape).copy()

    def intersect(self, origin: np.ndarray, dirs: np.ndarray):
        """Slab test. Returns (t_enter, hit) for rays origin + t * dirs."""
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t0 = np.nan_to_num((self.lo - origin) * inv, nan=np.inf)
            t1 = np.nan_to_num((self.hi - origin) * inv, nan=-np.inf)
        tmin = np.minimum(t0, t1).max(axis=-1)
        tmax = np.maximum(t0, t1).min(axis=-1)
        hit = (tmax >= tmin) & (tmax > 1e-9)
        t = np.where(tmin > 1e-9, tmin, tmax)
        return np.where(hit, t, np.inf), hit


def look_at_pose(position: np.ndarray, target: np.ndarray) -> np.ndarray:
    """World-to-camera pose for a camera at ``position`` looking at ``target``
    (camera +z forward, world +y chosen as up)."""
    f = np.asarray(target, float) - np.asarray(position, float)
    f = f / np.linalg.norm(f)
    up = np.array([0.0, 1.0, 0.0])
    x = np.cross(up, f)
    if np.linalg.norm(x) < 1e-9:
        up = np.array([1.0, 0.0, 0.0])
        x = np.cross(up, f)
    x = x / np.linalg.norm(x)
    y = np.cross(f, x)
    R = np.stack([x, y, f])
    pose = np.eye(4)
    pose[:3, :3] = R
    pose[:3, 3] = -R @ position
    return pose


def render_view(boxes: list[Box], cam: CameraView, background: np.ndarray):
    """Analytic ray cast. Returns (image HxWx3, points_world HxWx3, valid,
    primitive index grid; -1 where no hit)."""
    R = cam.pose[:3, :3]
    t = cam.pose[:3, 3]
    center = -R.T @ t
    fx, fy, cx, cy = cam.intrinsics
    v, u = np.mgrid[0 : cam.height, 0 : cam.width].astype(float)
    dirs_cam = np.stack([(u - cx) / fx, (v - cy) / fy, np.ones_like(u)], axis=-1)
    dirs = dirs_cam @ R  # R^T applied to each ray
    best_t = np.full(u.shape, np.inf)
    best_idx = np.full(u.shape, -1, dtype=int)
    for i, box in enumerate(boxes):
        tt, hit = box.intersect(center, dirs)
        closer = hit & (tt < best_t)
        best_t = np.where(closer, tt, best_t)
        best_idx = np.where(closer, i, best_idx)
    valid = best_idx >= 0
    pts = center + np.where(valid[..., None], best_t[..., None], 0.0) * dirs
    image = np.broadcast_to(background, pts.shape).copy()
    for i, box in enumerate(boxes):
        sel = best_idx == i
        if sel.any():
            image[sel] = box.color_at(pts[sel])
    pts = np.where(valid[..., None], pts, 0.0)
    return image, pts, valid, best_idx


@dataclass
class SceneManifest:
    """A generated multi-view scene with full ground truth."""

    scene_id: str
    kind: str
    seed: int
    cameras: list[CameraView]
    images: dict[int, np.ndarray]
    points_world: dict[int, np.ndarray]
    valid: dict[int, np.ndarray]
    images_edited: dict[int, np.ndarray]
    points_world_edited: dict[int, np.ndarray]
    valid_edited: dict[int, np.ndarray]
    edit_masks: dict[int, np.ndarray]  # bool, per view
    prim_index: dict[int, np.ndarray]  # int, -1 where no primitive hit
    edit_displacement: np.ndarray
    edit_primitive: int
    handles: list[tuple[float, float]]  # reference-view pixels (u, v)
    targets: list[tuple[float, float]]
    trajectory: dict

    def view_ids(self) -> list[int]:
        return [c.view_id for c in self.cameras]

    def reference_view_id(self) -> int:
        return self.cameras[0].view_id

    def camera(self, view_id: int) -> CameraView:
        for c in self.cameras:
            if c.view_id == view_id:
                return c
        raise ContractError(f"unknown view id {view_id}")

    def gt_points_world(self, v: int) -> np.ndarray:
        return self.points_world[v]

    def gt_valid(self, v: int) -> np.ndarray:
        return self.valid[v]

    def gt_points_world_edited(self, v: int) -> np.ndarray:
        return self.points_world_edited[v]

    def gt_valid_edited(self, v: int) -> np.ndarray:
        return self.valid_edited[v]

    def gt_edit_mask(self, v: int) -> np.ndarray:
        return self.edit_masks[v]

    def reference_edit_mask(self) -> MaskGrid:
        return MaskGrid(self.edit_masks[self.reference_view_id()].astype(float))

    def gt_pointmap(self, v: int, edited: bool = False) -> Pointmap:
        """Ground-truth pointmap of view v in its own camera frame."""
        cam = self.camera(v)
        pts = self.points_world_edited[v] if edited else self.points_world[v]
        ok = self.valid_edited[v] if edited else self.valid[v]
        pc = pts @ cam.pose[:3, :3].T + cam.pose[:3, 3]
        return Pointmap(v, np.where(ok[..., None], pc, 0.0), ok)

    # -- persistence ----------------------------------------------------

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        (d / "images").mkdir(parents=True, exist_ok=True)
        (d / "gt").mkdir(exist_ok=True)
        views = []
        for cam in self.cameras:
            vid = cam.view_id
            write_tensor(d / "images" / f"view_{vid:03d}.dstn", self.images[vid])
            write_tensor(d / "gt" / f"points_{vid:03d}.dstn", self.points_world[vid])
            write_tensor(d / "gt" / f"valid_{vid:03d}.dstn", self.valid[vid])
            write_tensor(
                d / "gt" / f"image_edited_{vid:03d}.dstn", self.images_edited[vid]
            )
            write_tensor(
                d / "gt" / f"points_edited_{vid:03d}.dstn",
                self.points_world_edited[vid],
            )
            write_tensor(d / "gt" / f"valid_edited_{vid:03d}.dstn", self.valid_edited[vid])
            write_tensor(d / "gt" / f"edit_mask_{vid:03d}.dstn", self.edit_masks[vid])
            write_tensor(d / "gt" / f"prim_index_{vid:03d}.dstn", self.prim_index[vid])
            views.append(
                {
                    "view_id": vid,
                    "pose": cam.pose.tolist(),
                    "intrinsics": list(cam.intrinsics),
                    "width": cam.width,
                    "height": cam.height,
                    "image": f"images/view_{vid:03d}.dstn",
                }
            )
        manifest = {
            "scene_id": self.scene_id,
            "kind": self.kind,
            "seed": self.seed,
            "views": views,
            "trajectory": self.trajectory,
            "edit": {
                "primitive": self.edit_primitive,
                "displacement": self.edit_displacement.tolist(),
                "handles": [list(h) for h in self.handles],
                "targets": [list(t) for t in self.targets],
            },
        }
        (d / "scene.json").write_text(json.dumps(manifest, sort_keys=True, indent=2))

    @classmethod
    def load(cls, directory: str | Path) -> "SceneManifest":
        d = Path(directory)
        manifest = json.loads((d / "scene.json").read_text())
        cameras, images = [], {}
        pw, vl, ie, pwe, vle, em, pi = {}, {}, {}, {}, {}, {}, {}
        for v in manifest["views"]:
            vid = v["view_id"]
            cam = CameraView(
                vid,
                np.array(v["pose"]),
                tuple(v["intrinsics"]),
                v["width"],
                v["height"],
            )
            img_path = d / v["image"]
            if not img_path.exists():
                raise InvalidInputError(f"missing image tensor {img_path}")
            cameras.append(cam)
            images[vid] = read_tensor(img_path).astype(float)
            pw[vid] = read_tensor(d / "gt" / f"points_{vid:03d}.dstn").astype(float)
            vl[vid] = read_tensor(d / "gt" / f"valid_{vid:03d}.dstn") > 0.5
            ie[vid] = read_tensor(d / "gt" / f"image_edited_{vid:03d}.dstn").astype(float)
            pwe[vid] = read_tensor(d / "gt" / f"points_edited_{vid:03d}.dstn").astype(
                float
            )
            vle[vid] = read_tensor(d / "gt" / f"valid_edited_{vid:03d}.dstn") > 0.5
            em[vid] = read_tensor(d / "gt" / f"edit_mask_{vid:03d}.dstn") > 0.5
            pi[vid] = np.rint(
                read_tensor(d / "gt" / f"prim_index_{vid:03d}.dstn")
            ).astype(int)
        edit = manifest["edit"]
        return cls(
            scene_id=manifest["scene_id"],
            kind=manifest["kind"],
            seed=manifest["seed"],
            cameras=cameras,
            images=images,
            points_world=pw,
            valid=vl,
            images_edited=ie,
            points_world_edited=pwe,
            valid_edited=vle,
            edit_masks=em,
            prim_index=pi,
            edit_displacement=np.array(edit["displacement"]),
            edit_primitive=edit["primitive"],
            handles=[tuple(h) for h in edit["handles"]],
            targets=[tuple(t) for t in edit["targets"]],
            trajectory=manifest["trajectory"],
        )


def _blob_texture(rng: np.random.Generator, n_blobs: int = 4):
    centers = rng.uniform(-2.0, 2.0, size=(n_blobs, 2))
    colors = rng.uniform(0.2, 0.9, size=(n_blobs, 3))
    widths = rng.uniform(0.4, 0.9, size=n_blobs)

    def tex(points: np.ndarray) -> np.ndarray:
        out = np.full(points.shape, 0.35)
        for c, col, w in zip(centers, colors, widths):
            d2 = (points[..., 0] - c[0]) ** 2 + (points[..., 1] - c[1]) ** 2
            wgt = np.exp(-d2 / (2 * w * w))[..., None]
            out = out * (1 - wgt) + col * wgt
        return out

    return tex


def _scene_boxes(kind: str, rng: np.random.Generator):
    """Primitive list plus the index/displacement of the embedded edit."""
    bg = Box(
        np.array([-9.0, -9.0, 2.9]),
        np.array([9.0, 9.0, 3.0]),
        color=np.array([0.5, 0.52, 0.48]),
    )
    if kind == "two-box":
        a = Box(
            np.array([-1.3, -0.5, -0.5]),
            np.array([-0.3, 0.5, 0.5]),
            color=np.array([0.8, 0.25, 0.2]),
        )
        b = Box(
            np.array([0.3, -0.4, -0.4]),
            np.array([1.1, 0.4, 0.4]),
            color=np.array([0.2, 0.4, 0.8]),
        )
        return [a, b, bg], 0, np.array([0.45, 0.0, 0.0])
    if kind == "plane-billboards":
        b1 = Box(
            np.array([-1.6, -0.8, 0.9]),
            np.array([-0.4, 0.6, 1.0]),
            color=np.array([0.85, 0.7, 0.2]),
        )
        b2 = Box(
            np.array([0.4, -0.6, 1.4]),
            np.array([1.5, 0.7, 1.5]),
            color=np.array([0.3, 0.7, 0.4]),
        )
        return [b1, b2, bg], 1, np.array([-0.4, 0.2, 0.0])
    if kind == "textured-blobs":
        bg_tex = Box(bg.lo, bg.hi, texture=_blob_texture(rng))
        sticker = Box(
            np.array([-0.6, -0.6, 2.7]),
            np.array([0.4, 0.4, 2.8]),
            color=np.array([0.9, 0.3, 0.6]),
        )
        return [sticker, bg_tex], 0, np.array([0.5, 0.3, 0.0])
    raise ContractError(f"unknown scene kind {kind!r}")


def generate_synthetic_scene(
    kind: str,
    n_views: int = 20,
    seed: int = 0,
    resolution: int = DEFAULT_RESOLUTION,
    focal: float = DEFAULT_FOCAL,
    arc_deg: float = DEFAULT_ARC_DEG,
    radius: float = DEFAULT_RADIUS,
) -> SceneManifest:
    """Deterministic scene on a circular arc trajectory; view 0 (the
    reference) sits at the arc center, the others spread over +-arc_deg."""
    if n_views < 2:
        raise ContractError("need at least 2 views")
    rng = np.random.default_rng(seed)
    boxes, edit_idx, displacement = _scene_boxes(kind, rng)
    edited_boxes = [
        box.shifted(displacement) if i == edit_idx else box
        for i, box in enumerate(boxes)
    ]
    background = np.array([0.1, 0.1, 0.12])

    angles = [0.0] + list(np.linspace(-arc_deg, arc_deg, n_views - 1))
    cameras = []
    for vid, ang in enumerate(angles):
        th = np.deg2rad(ang)
        pos = np.array([radius * np.sin(th), 0.0, -radius * np.cos(th)])
        pose = look_at_pose(pos, np.zeros(3))
        cameras.append(
            CameraView(
                vid,
                pose,
                (focal, focal, resolution / 2, resolution / 2),
                resolution,
                resolution,
            )
        )

    images, pts_w, valid = {}, {}, {}
    images_e, pts_we, valid_e = {}, {}, {}
    masks, prim = {}, {}
    for cam in cameras:
        img, pw, ok, idx = render_view(boxes, cam, background)
        img_e, pwe, ok_e, idx_e = render_view(edited_boxes, cam, background)
        vid = cam.view_id
        images[vid], pts_w[vid], valid[vid] = img, pw, ok
        images_e[vid], pts_we[vid], valid_e[vid] = img_e, pwe, ok_e
        changed = (
            (np.abs(img - img_e).max(axis=-1) > 1e-12)
            | (idx != idx_e)
            | (np.abs(pw - pwe).max(axis=-1) > 1e-12)
        )
        masks[vid] = ndimage.binary_dilation(changed, iterations=2)
        prim[vid] = idx

    ref = cameras[0]
    center = (boxes[edit_idx].lo + boxes[edit_idx].hi) / 2
    handles = [_project_pixel(ref, center)]
    targets = [_project_pixel(ref, center + displacement)]

    return SceneManifest(
        scene_id=f"{kind}-s{seed}-v{n_views}",
        kind=kind,
        seed=seed,
        cameras=cameras,
        images=images,
        points_world=pts_w,
        valid=valid,
        images_edited=images_e,
        points_world_edited=pts_we,
        valid_edited=valid_e,
        edit_masks=masks,
        prim_index=prim,
        edit_displacement=displacement,
        edit_primitive=edit_idx,
        handles=handles,
        targets=targets,
        trajectory={
            "type": "arc",
            "arc_deg": arc_deg,
            "radius": radius,
            "angles_deg": angles,
        },
    )


def _project_pixel(cam: CameraView, point_world: np.ndarray) -> tuple[float, float]:
    pc = cam.pose[:3, :3] @ point_world + cam.pose[:3, 3]
    fx, fy, cx, cy = cam.intrinsics
    return (float(fx * pc[0] / pc[2] + cx), float(fy * pc[1] / pc[2] + cy))
