"""End-to-end orchestration: drag-edit the reference view, align geometry,
lift latents into an attributed point cloud, propagate the edit to every
other view, and fuse an edited colored point cloud.

The alignment world frame is the reference camera frame; rendering the
cloud into view v therefore uses the pose of v relative to the reference.
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .alignment import AlignConfig, AlignmentState, global_align, synthetic_provider
from .diffusion import (
    Decoder,
    Denoiser,
    Schedule,
    ddim_denoise,
    ddim_invert,
    make_decoder,
    make_denoiser,
    make_schedule,
)
from .drag import DragConfig, DragResult, EditSpec, drag_edit
from .errors import ContractError, DragSceneError, EmptySceneError, StageFailure
from .geometry import Z_NEAR, CameraView, MaskGrid, Pointmap, relative_transform
from .latent_field import AttributedPointCloud, LatentGrid, build_attributed_cloud
from .mvopt import MVOptConfig, ViewEditResult, edit_view
from .scene import SceneManifest
from .tensorio import read_tensor, write_tensor


@dataclass
class PipelineConfig:
    seed: int = 0
    t_total: int = 50
    beta_min: float = 1e-4
    beta_max: float = 0.02
    eta_e: float = 0.7
    eta_r: float = 0.4
    denoiser_kind: str = "linear"
    denoiser_params: dict = field(default_factory=dict)
    decoder_kind: str = "identity"
    decoder_params: dict = field(default_factory=dict)
    latent_stride: int = 1
    align: AlignConfig = field(default_factory=AlignConfig)
    drag: DragConfig = field(default_factory=DragConfig)
    mvopt: MVOptConfig = field(default_factory=MVOptConfig)
    workers: int = 1

    def schedule(self) -> Schedule:
        return make_schedule(
            self.t_total, self.beta_min, self.beta_max, self.eta_e, self.eta_r
        )

    def denoiser(self) -> Denoiser:
        return make_denoiser(self.denoiser_kind, **self.denoiser_params)

    def decoder(self) -> Decoder:
        return make_decoder(self.decoder_kind, **self.decoder_params)


@dataclass
class FusedCloud:
    """World-frame fusion of the edited views: colors averaged over the
    views that see each point, plus per-point color variance."""

    positions: np.ndarray  # N x 3
    colors: np.ndarray  # N x 3
    color_variance: np.ndarray  # N, channel-mean population variance
    counts: np.ndarray  # N, number of contributing views


@dataclass
class EditedScene:
    """Everything the pipeline produced for one edit of one scene."""

    scene: SceneManifest
    spec: EditSpec
    config: PipelineConfig
    ref_view: int
    edited_images: dict[int, np.ndarray]
    latents_tr: dict[int, LatentGrid]  # reference: re-inverted edit; others: optimized
    round_trips: dict[int, np.ndarray]  # invert-denoise identity per view
    aligned: AlignmentState
    cloud: AttributedPointCloud
    rel_cameras: dict[int, CameraView]  # poses relative to the reference frame
    loss_traces: dict[int, list]
    zero_coverage: list[int]
    drag_result: DragResult | None = None
    reconstruction: FusedCloud | None = None


def worker_cap() -> int:
    env = os.environ.get("DRAGSCENE_THREADS")
    if env is None:
        return 1 << 30
    try:
        cap = int(env)
    except ValueError:
        raise ContractError(f"DRAGSCENE_THREADS={env!r} is not an integer")
    return max(1, cap)


def noop_edit_spec(scene: SceneManifest, erode: int = 2) -> EditSpec:
    """Handles-equal-targets edit over the interior of the scene's edit
    primitive in the reference view.

    Eroding the silhouette keeps the mask away from occlusion boundaries,
    where a no-op edit is exactly stationary for local denoisers.
    """
    ref = scene.reference_view_id()
    sil = scene.prim_index[ref] == scene.edit_primitive
    inner = ndimage.binary_erosion(sil, iterations=erode) if erode else sil
    while not inner.any() and erode > 0:
        erode -= 1
        inner = ndimage.binary_erosion(sil, iterations=erode) if erode else sil
    if not inner.any():
        raise EmptySceneError("edit primitive not visible in the reference view")
    vv, uu = np.nonzero(inner)
    k = len(vv) // 2
    h = (float(uu[k]), float(vv[k]))
    return EditSpec(ref, MaskGrid(inner.astype(float)), [h], [h])


def scene_edit_spec(scene: SceneManifest) -> EditSpec:
    """The scene's embedded ground-truth edit as a drag spec."""
    ref = scene.reference_view_id()
    return EditSpec(
        ref, scene.reference_edit_mask(), list(scene.handles), list(scene.targets)
    )


def _alignment_views(scene: SceneManifest, s_views: int) -> list[CameraView]:
    """Reference plus up to s auxiliary views spread evenly over the rest."""
    ref = scene.reference_view_id()
    others = [v for v in scene.view_ids() if v != ref]
    s = min(s_views, len(others))
    idx = sorted(set(np.linspace(0, len(others) - 1, s).round().astype(int)))
    return [scene.camera(ref)] + [scene.camera(others[i]) for i in idx]


def _relative_cameras(
    scene: SceneManifest, aligned: AlignmentState
) -> dict[int, CameraView]:
    """Per-view cameras posed in the reference frame: aligned poses where
    available, ground-truth relative poses elsewhere."""
    ref_cam = scene.camera(scene.reference_view_id())
    cams = {}
    for v in scene.view_ids():
        if v in aligned.poses:
            cams[v] = aligned.poses[v]
        else:
            cam = scene.camera(v)
            cams[v] = cam.with_pose(relative_transform(ref_cam, cam))
    return cams


def round_trip_image(
    image: np.ndarray, den: Denoiser, sched: Schedule, dec: Decoder, t: int, stride: int
) -> np.ndarray:
    """Encode, invert to step t, denoise back and decode."""
    z = ddim_invert(dec.encode(image, stride), den, sched, t)
    return dec.decode(ddim_denoise(z, den, sched, t, 0))


def _stage(name: str):
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and isinstance(exc, DragSceneError) and not isinstance(
                exc, StageFailure
            ):
                raise StageFailure(name, exc) from exc
            return False

    return _Ctx()


def run_pipeline(
    scene: SceneManifest,
    spec: EditSpec,
    cfg: PipelineConfig,
    out_dir: str | Path | None = None,
) -> EditedScene:
    """Full propagation pipeline; persists intermediates when ``out_dir``
    is given (partial outputs are kept if a later stage fails)."""
    sched = cfg.schedule()
    den = cfg.denoiser()
    dec = cfg.decoder()
    ref = scene.reference_view_id()
    if spec.ref_view != ref:
        raise ContractError(
            f"edit targets view {spec.ref_view}, scene reference is {ref}"
        )
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        scene.save(out)
        save_edit_spec(spec, out / "edit.json")

    with _stage("drag-edit"):
        drag_result = drag_edit(
            scene.images[ref], spec, den, sched, dec, cfg.drag, cfg.latent_stride
        )
    if out is not None:
        _save_ref_view(out, ref, drag_result)

    with _stage("alignment"):
        views = _alignment_views(scene, cfg.align.s_views)
        # The oracle pair provider can only depict the scene's embedded
        # edit; a spec that moves nothing leaves the reference image (and
        # hence its predicted geometry) unchanged.
        moved = any(h != t for h, t in zip(spec.handles, spec.targets))
        provider = synthetic_provider(
            scene, cfg.align.noise_sigma, cfg.align.seed, edited=moved
        )
        aligned = global_align(views, provider, spec.mask, cfg.align)
    if out is not None:
        save_alignment(aligned, out / "aligned")

    with _stage("cloud"):
        cloud = build_attributed_cloud(
            aligned.fused[ref], drag_result.reference_latent_tr, spec.mask
        )
    if out is not None:
        cloud.save(out / "cloud")

    rel_cams = _relative_cameras(scene, aligned)
    others = [v for v in scene.view_ids() if v != ref]

    def _edit_one(v: int) -> ViewEditResult:
        return edit_view(
            scene.images[v],
            cloud,
            rel_cams[v],
            den,
            sched,
            dec,
            cfg.mvopt,
            cfg.latent_stride,
        )

    with _stage("propagate"):
        workers = min(max(1, cfg.workers), worker_cap())
        if workers > 1 and len(others) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = dict(zip(others, pool.map(_edit_one, others)))
        else:
            results = {v: _edit_one(v) for v in others}

    edited_images = {ref: drag_result.edited_image}
    latents_tr = {ref: drag_result.reference_latent_tr}
    loss_traces: dict[int, list] = {}
    zero_cov = []
    for v in others:
        edited_images[v] = results[v].edited_image
        latents_tr[v] = results[v].optimized_latent
        loss_traces[v] = results[v].loss_trace
        if results[v].zero_coverage:
            zero_cov.append(v)

    round_trips = {
        ref: round_trip_image(
            scene.images[ref], den, sched, dec, sched.t_e, cfg.latent_stride
        )
    }
    for v in others:
        round_trips[v] = round_trip_image(
            scene.images[v], den, sched, dec, sched.t_r, cfg.latent_stride
        )

    with _stage("reconstruct"):
        recon = reconstruct_scene(edited_images, aligned, rel_cams)

    edited = EditedScene(
        scene=scene,
        spec=spec,
        config=cfg,
        ref_view=ref,
        edited_images=edited_images,
        latents_tr=latents_tr,
        round_trips=round_trips,
        aligned=aligned,
        cloud=cloud,
        rel_cameras=rel_cams,
        loss_traces=loss_traces,
        zero_coverage=zero_cov,
        drag_result=drag_result,
        reconstruction=recon,
    )
    if out is not None:
        _save_views(out, edited)
        _save_reconstruction(out / "reconstruction", recon)
        from .metrics import consistency_metrics

        report = consistency_metrics(edited)
        (out / "report.json").write_text(report.to_json())
    return edited


def reconstruct_scene(
    edited_views: dict[int, np.ndarray],
    aligned: AlignmentState,
    cameras: dict[int, CameraView] | None = None,
) -> FusedCloud:
    """Fuse the aligned pointmaps into one world-frame colored cloud.

    Each fused-pointmap point is projected into every edited view; its
    color is the mean over views where it lands in front of the camera and
    inside the image, and the variance is the channel-mean population
    variance of those samples. Occlusion is not re-tested: the fused maps
    are per-view visible surfaces already.
    """
    if not edited_views:
        raise ContractError("no edited views to fuse")
    if cameras is None:
        cameras = {v: aligned.poses[v] for v in edited_views if v in aligned.poses}
    positions = []
    for m in aligned.view_ids:
        pm = aligned.fused[m]
        positions.append(pm.points[pm.valid])
    positions = np.concatenate(positions, axis=0)
    if positions.shape[0] == 0:
        raise ContractError("alignment produced no valid points")

    n = positions.shape[0]
    total = np.zeros((n, 3))
    total_sq = np.zeros((n, 3))
    counts = np.zeros(n)
    for v, image in sorted(edited_views.items()):
        cam = cameras[v]
        pc = positions @ cam.pose[:3, :3].T + cam.pose[:3, 3]
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = cam.intrinsics[0] * pc[:, 0] / z + cam.intrinsics[2]
            w = cam.intrinsics[1] * pc[:, 1] / z + cam.intrinsics[3]
        ui = np.rint(u).astype(int)
        wi = np.rint(w).astype(int)
        ok = (
            (z > Z_NEAR)
            & (ui >= 0)
            & (ui < cam.width)
            & (wi >= 0)
            & (wi < cam.height)
        )
        cols = image[wi[ok], ui[ok]]
        total[ok] += cols
        total_sq[ok] += cols**2
        counts[ok] += 1

    seen = counts > 0
    mean = np.zeros((n, 3))
    var = np.zeros(n)
    mean[seen] = total[seen] / counts[seen, None]
    var[seen] = np.maximum(
        total_sq[seen] / counts[seen, None] - mean[seen] ** 2, 0.0
    ).mean(axis=1)
    return FusedCloud(positions, mean, var, counts)


# -- persistence --------------------------------------------------------


def save_edit_spec(spec: EditSpec, path: str | Path) -> None:
    path = Path(path)
    mask_file = path.with_suffix(".mask.dstn")
    write_tensor(mask_file, spec.mask.values)
    doc = {
        "ref_view": spec.ref_view,
        "mask": mask_file.name,
        "handles": [list(h) for h in spec.handles],
        "targets": [list(t) for t in spec.targets],
    }
    path.write_text(json.dumps(doc, sort_keys=True, indent=2))


def load_edit_spec(path: str | Path) -> EditSpec:
    path = Path(path)
    doc = json.loads(path.read_text())
    mask = MaskGrid(read_tensor(path.parent / doc["mask"]).astype(float))
    return EditSpec(
        doc["ref_view"],
        mask,
        [tuple(h) for h in doc["handles"]],
        [tuple(t) for t in doc["targets"]],
    )


def save_alignment(aligned: AlignmentState, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    doc = {
        "view_ids": aligned.view_ids,
        "initial_loss": aligned.initial_loss,
        "final_loss": aligned.final_loss,
        "views": {},
    }
    for m in aligned.view_ids:
        cam = aligned.poses[m]
        doc["views"][str(m)] = {
            "pose": cam.pose.tolist(),
            "intrinsics": list(cam.intrinsics),
            "width": cam.width,
            "height": cam.height,
            "scale": aligned.scales[m],
        }
        write_tensor(d / f"fused_{m:03d}.dstn", aligned.fused[m].points)
        write_tensor(d / f"valid_{m:03d}.dstn", aligned.fused[m].valid)
    (d / "poses.json").write_text(json.dumps(doc, sort_keys=True, indent=2))


def load_alignment(directory: str | Path) -> AlignmentState:
    d = Path(directory)
    doc = json.loads((d / "poses.json").read_text())
    view_ids = list(doc["view_ids"])
    ref = view_ids[0]
    poses, fused, scales = {}, {}, {}
    for m in view_ids:
        vd = doc["views"][str(m)]
        poses[m] = CameraView(
            m, np.array(vd["pose"]), tuple(vd["intrinsics"]), vd["width"], vd["height"]
        )
        scales[m] = vd["scale"]
        pts = read_tensor(d / f"fused_{m:03d}.dstn").astype(float)
        ok = read_tensor(d / f"valid_{m:03d}.dstn") > 0.5
        fused[m] = Pointmap(ref, pts, ok)
    return AlignmentState(
        view_ids, poses, fused, scales, doc["initial_loss"], doc["final_loss"]
    )


def _save_ref_view(out: Path, ref: int, drag_result: DragResult) -> None:
    d = out / "views" / f"{ref:03d}"
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(d / "image.dstn", drag_result.edited_image)
    write_tensor(d / "latent_tr.dstn", drag_result.reference_latent_tr.values)
    meta = {
        "view_id": ref,
        "role": "reference",
        "timestep": drag_result.reference_latent_tr.timestep,
        "latent_stride": drag_result.reference_latent_tr.latent_stride,
        "tracked_handles": [list(h) for h in drag_result.tracked_handles],
        "clamped": drag_result.clamped,
    }
    (d / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2))


def _save_views(out: Path, edited: EditedScene) -> None:
    for v in edited.scene.view_ids():
        if v == edited.ref_view:
            continue
        d = out / "views" / f"{v:03d}"
        d.mkdir(parents=True, exist_ok=True)
        write_tensor(d / "image.dstn", edited.edited_images[v])
        z = edited.latents_tr[v]
        write_tensor(d / "latent_tr.dstn", z.values)
        meta = {
            "view_id": v,
            "role": "propagated",
            "timestep": z.timestep,
            "latent_stride": z.latent_stride,
            "rel_pose": edited.rel_cameras[v].pose.tolist(),
            "zero_coverage": v in edited.zero_coverage,
        }
        (d / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2))
        with open(d / "loss.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["iter", "rec", "mask", "total"])
            for i, (lr, lm, lt) in enumerate(edited.loss_traces.get(v, [])):
                wr.writerow([i, repr(lr), repr(lm), repr(lt)])


def _save_reconstruction(d: Path, recon: FusedCloud) -> None:
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(d / "positions.dstn", recon.positions)
    write_tensor(d / "colors.dstn", recon.colors)
    write_tensor(d / "color_variance.dstn", recon.color_variance)
    write_tensor(d / "counts.dstn", recon.counts)


def load_edited_scene(directory: str | Path, cfg: PipelineConfig | None = None) -> EditedScene:
    """Rehydrate a persisted pipeline run far enough for metrics."""
    d = Path(directory)
    scene = SceneManifest.load(d)
    spec = load_edit_spec(d / "edit.json")
    cfg = PipelineConfig() if cfg is None else cfg
    aligned = load_alignment(d / "aligned")
    cloud = AttributedPointCloud.load(d / "cloud")
    ref = scene.reference_view_id()
    rel_cams = _relative_cameras(scene, aligned)
    edited_images, latents_tr, zero_cov = {}, {}, []
    for v in scene.view_ids():
        vd = d / "views" / f"{v:03d}"
        meta = json.loads((vd / "meta.json").read_text())
        edited_images[v] = read_tensor(vd / "image.dstn").astype(float)
        latents_tr[v] = LatentGrid(
            read_tensor(vd / "latent_tr.dstn").astype(float),
            meta["timestep"],
            meta["latent_stride"],
        )
        if meta.get("zero_coverage"):
            zero_cov.append(v)
    sched = cfg.schedule()
    den = cfg.denoiser()
    dec = cfg.decoder()
    round_trips = {}
    for v in scene.view_ids():
        t = sched.t_e if v == ref else sched.t_r
        round_trips[v] = round_trip_image(
            scene.images[v], den, sched, dec, t, cfg.latent_stride
        )
    return EditedScene(
        scene=scene,
        spec=spec,
        config=cfg,
        ref_view=ref,
        edited_images=edited_images,
        latents_tr=latents_tr,
        round_trips=round_trips,
        aligned=aligned,
        cloud=cloud,
        rel_cameras=rel_cams,
        loss_traces={},
        zero_coverage=zero_cov,
    )


# -- baseline and ablation ----------------------------------------------


def baseline_per_view_drag(
    scene: SceneManifest, cfg: PipelineConfig
) -> dict[int, DragResult]:
    """Independent drag edit per view, handles warped by ground truth.

    Each view gets its own ground-truth edit mask and handle/target pixels
    obtained by projecting the reference handle's 3D point (and its rigidly
    displaced counterpart) into that view. No information is shared across
    views, which is exactly what the propagation pipeline avoids.
    """
    sched = cfg.schedule()
    den = cfg.denoiser()
    dec = cfg.decoder()
    ref = scene.reference_view_id()
    results = {}
    for v in scene.view_ids():
        cam = scene.camera(v)
        handles, targets = [], []
        for hu, hv in scene.handles:
            pt = scene.points_world[ref][
                int(round(np.clip(hv, 0, cam.height - 1))),
                int(round(np.clip(hu, 0, cam.width - 1))),
            ]
            h2 = _project(cam, pt)
            t2 = _project(cam, pt + scene.edit_displacement)
            handles.append(_clamp_px(h2, cam))
            targets.append(_clamp_px(t2, cam))
        mask = MaskGrid(scene.gt_edit_mask(v).astype(float))
        spec_v = EditSpec(v, mask, handles, targets)
        results[v] = drag_edit(
            scene.images[v], spec_v, den, sched, dec, cfg.drag, cfg.latent_stride
        )
    return results


def _project(cam: CameraView, point_world: np.ndarray) -> tuple[float, float]:
    pc = cam.pose[:3, :3] @ point_world + cam.pose[:3, 3]
    fx, fy, cx, cy = cam.intrinsics
    return (float(fx * pc[0] / pc[2] + cx), float(fy * pc[1] / pc[2] + cy))


def _clamp_px(p: tuple[float, float], cam: CameraView) -> tuple[float, float]:
    return (
        float(np.clip(p[0], 0.0, cam.width - 1.0)),
        float(np.clip(p[1], 0.0, cam.height - 1.0)),
    )


def eta_sweep(
    scene: SceneManifest,
    spec: EditSpec,
    etas: list[float],
    cfg: PipelineConfig,
    csv_path: str | Path | None = None,
) -> list[dict]:
    """Run the propagation at t_r = round(eta * t_total) for each eta.

    Per-eta failures are recorded in the row and the sweep continues.
    """
    from .metrics import consistency_metrics

    for eta in etas:
        if not 0 < eta < 1:
            raise ContractError(f"eta {eta} outside (0, 1)")
    fields = [
        "eta",
        "t_r",
        "masked_latent_variance",
        "masked_image_agreement",
        "preservation_psnr",
        "runtime_s",
        "error",
    ]
    rows = []
    for eta in etas:
        row = {
            "eta": repr(float(eta)),
            "t_r": int(round(eta * cfg.t_total)),
            "error": "",
        }
        t0 = time.perf_counter()
        try:
            edited = run_pipeline(scene, spec, replace(cfg, eta_r=eta))
            report = consistency_metrics(edited)
            row["masked_latent_variance"] = repr(report.masked_latent_variance)
            row["masked_image_agreement"] = repr(report.masked_image_agreement)
            row["preservation_psnr"] = repr(report.preservation_psnr)
        except DragSceneError as e:
            row["error"] = str(e)
        row["runtime_s"] = repr(time.perf_counter() - t0)
        rows.append(row)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=fields)
            wr.writeheader()
            for row in rows:
                wr.writerow({k: row.get(k, "") for k in fields})
    return rows
