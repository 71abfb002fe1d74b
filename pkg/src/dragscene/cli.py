"""Command-line entry point.

Exit codes: 0 success, 1 usage/configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .alignment import global_align, synthetic_provider
from .config import RunConfig, load_run_config
from .drag import EditSpec, drag_edit
from .errors import DragSceneError, NumericalFailureError, StageFailure
from .geometry import MaskGrid
from .metrics import consistency_metrics
from .pipeline import (
    PipelineConfig,
    _alignment_views,
    _save_ref_view,
    eta_sweep,
    load_edited_scene,
    run_pipeline,
    save_alignment,
    save_edit_spec,
    scene_edit_spec,
)
from .scene import SceneManifest, generate_synthetic_scene
from .tensorio import read_header, read_tensor


def _load_mask(path: str) -> MaskGrid:
    p = Path(path)
    if p.suffix.lower() == ".png":
        from PIL import Image

        arr = np.asarray(Image.open(p))
        if arr.ndim == 3:
            arr = arr.max(axis=-1)
        return MaskGrid((arr != 0).astype(float))
    return MaskGrid(read_tensor(p).astype(float))


def _parse_points(text: str) -> list[tuple[float, float]]:
    pts = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        u, v = part.split(",")
        pts.append((float(u), float(v)))
    return pts


def _resolve_spec(scene: SceneManifest, args) -> EditSpec:
    spec = scene_edit_spec(scene)
    if getattr(args, "mask", None):
        spec.mask = _load_mask(args.mask)
    if getattr(args, "handles", None):
        spec.handles = _parse_points(args.handles)
    if getattr(args, "targets", None):
        spec.targets = _parse_points(args.targets)
    return spec


def _pipeline_config(args) -> PipelineConfig:
    if getattr(args, "config", None):
        return load_run_config(args.config).pipeline
    return PipelineConfig()


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dragscene")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic scene")
    sp.add_argument("--kind", default="two-box",
                    choices=["two-box", "plane-billboards", "textured-blobs"])
    sp.add_argument("--views", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--resolution", type=int, default=32)
    sp.add_argument("--focal", type=float, default=40.0)
    sp.add_argument("--out", required=True)

    for name, hlp in (
        ("edit-ref", "drag-edit the reference view"),
        ("align", "globally align poses and pointmaps"),
        ("propagate", "run the full propagation over all views"),
    ):
        sp = sub.add_parser(name, help=hlp)
        sp.add_argument("--scene", required=True, help="scene directory")
        sp.add_argument("--config", help="run config JSON")
        sp.add_argument("--mask", help="edit mask (.png or .dstn)")
        sp.add_argument("--handles", help='pixel list "u,v;u,v"')
        sp.add_argument("--targets", help='pixel list "u,v;u,v"')
        sp.add_argument("--out", required=True)

    sp = sub.add_parser("run", help="full pipeline from a config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--scene", help="reuse an existing scene directory")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("metrics", help="consistency report for a run directory")
    sp.add_argument("--in", dest="in_dir", required=True)
    sp.add_argument("--config", help="run config JSON used for the run")

    sp = sub.add_parser("sweep", help="inversion-strength sweep")
    sp.add_argument("--etas", required=True, help="comma-separated, each in (0,1)")
    sp.add_argument("--config", help="run config JSON")
    sp.add_argument("--scene", help="reuse an existing scene directory")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("inspect", help="print tensor headers / manifest summaries")
    sp.add_argument("paths", nargs="+")
    return p


def _cmd_synth(args) -> int:
    scene = generate_synthetic_scene(
        args.kind, args.views, args.seed, args.resolution, args.focal
    )
    scene.save(args.out)
    print(f"wrote scene {scene.scene_id} ({len(scene.cameras)} views) to {args.out}")
    return 0


def _cmd_edit_ref(args) -> int:
    scene = SceneManifest.load(args.scene)
    cfg = _pipeline_config(args)
    spec = _resolve_spec(scene, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = drag_edit(
        scene.images[spec.ref_view], spec, cfg.denoiser(), cfg.schedule(),
        cfg.decoder(), cfg.drag, cfg.latent_stride,
    )
    save_edit_spec(spec, out / "edit.json")
    _save_ref_view(out, spec.ref_view, result)
    print(f"edited reference view {spec.ref_view}; "
          f"tracked handles {result.tracked_handles}")
    return 0


def _cmd_align(args) -> int:
    scene = SceneManifest.load(args.scene)
    cfg = _pipeline_config(args)
    spec = _resolve_spec(scene, args)
    moved = any(h != t for h, t in zip(spec.handles, spec.targets))
    provider = synthetic_provider(
        scene, cfg.align.noise_sigma, cfg.align.seed, edited=moved
    )
    views = _alignment_views(scene, cfg.align.s_views)
    state = global_align(views, provider, spec.mask, cfg.align)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_alignment(state, out / "aligned")
    print(f"aligned views {state.view_ids}: loss "
          f"{state.initial_loss:.6g} -> {state.final_loss:.6g}")
    return 0


def _cmd_propagate(args) -> int:
    scene = SceneManifest.load(args.scene)
    cfg = _pipeline_config(args)
    spec = _resolve_spec(scene, args)
    edited = run_pipeline(scene, spec, cfg, out_dir=args.out)
    print(f"propagated edit to {len(edited.edited_images) - 1} views; "
          f"outputs in {args.out}")
    return 0


def _cmd_run(args) -> int:
    rc = load_run_config(args.config)
    if args.scene:
        scene = SceneManifest.load(args.scene)
    else:
        sc = rc.scene
        scene = generate_synthetic_scene(
            sc.kind, sc.n_views, sc.seed, sc.resolution, sc.focal,
            sc.arc_deg, sc.radius,
        )
    spec = scene_edit_spec(scene)
    run_pipeline(scene, spec, rc.pipeline, out_dir=args.out)
    print(f"pipeline complete; outputs in {args.out}")
    return 0


def _cmd_metrics(args) -> int:
    cfg = load_run_config(args.config).pipeline if args.config else None
    edited = load_edited_scene(args.in_dir, cfg)
    report = consistency_metrics(edited)
    (Path(args.in_dir) / "report.json").write_text(report.to_json())
    print(report.to_json())
    return 0


def _cmd_sweep(args) -> int:
    rc = load_run_config(args.config) if args.config else RunConfig()
    if args.scene:
        scene = SceneManifest.load(args.scene)
    else:
        sc = rc.scene
        scene = generate_synthetic_scene(
            sc.kind, sc.n_views, sc.seed, sc.resolution, sc.focal,
            sc.arc_deg, sc.radius,
        )
    etas = [float(x) for x in args.etas.split(",") if x.strip()]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = eta_sweep(scene, scene_edit_spec(scene), etas, rc.pipeline,
                     out / "sweep.csv")
    print(f"swept {len(rows)} eta values; wrote {out / 'sweep.csv'}")
    return 0


def _cmd_inspect(args) -> int:
    for path in args.paths:
        p = Path(path)
        if p.is_dir():
            sj = p / "scene.json"
            if sj.exists():
                doc = json.loads(sj.read_text())
                print(f"{p}: scene {doc['scene_id']} kind={doc['kind']} "
                      f"views={len(doc['views'])} seed={doc['seed']}")
            else:
                names = sorted(x.name for x in p.iterdir())
                print(f"{p}: directory with {names}")
        elif p.suffix == ".dstn":
            hdr = read_header(p)
            print(f"{p}: tensor shape={hdr['shape']} dtype={hdr['dtype']} "
                  f"version={hdr['version']}")
        elif p.suffix == ".json":
            print(f"{p}:")
            print(p.read_text())
        else:
            print(f"{p}: unrecognized file type", file=sys.stderr)
            return 1
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "edit-ref": _cmd_edit_ref,
    "align": _cmd_align,
    "propagate": _cmd_propagate,
    "run": _cmd_run,
    "metrics": _cmd_metrics,
    "sweep": _cmd_sweep,
    "inspect": _cmd_inspect,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        return _COMMANDS[args.command](args)
    except (NumericalFailureError,) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except StageFailure as e:
        code = 2 if isinstance(e.cause, NumericalFailureError) else 1
        print(f"error: {e}", file=sys.stderr)
        return code
    except DragSceneError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
