"""Command-line front end: ``splatstream <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from splatstream import io
from splatstream.bench import (benchmark_spec, run_scaling_benchmark, write_csv, write_dat)
from splatstream.core import Camera
from splatstream.lod import LodConfig
from splatstream.metrics import psnr, ssim
from splatstream.motion import ObjectTrack, coarse_track, fit_ode, track_rmse, track_to_json
from splatstream.pointinit import (UNKNOWN_LABEL, SemanticPointCloud, bev_augment, label_points_multi,
                                   load_label_map, merge, resolve_labels, voxel_downsample)
from splatstream.raster import MODES, RenderConfig, default_workers, render_view
from splatstream.scenegen import (SceneSpec, default_objects, generate_scene, load_scene,
                                  save_scene, scale_spec)
from splatstream.tvis import commit_visibility

log = logging.getLogger("splatstream")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("values must be >= 1")
    return vals


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    p.add_argument("--out-dir", type=Path, default=Path("."), help="output directory")
    p.add_argument("--workers", type=int, default=None,
                   help="rasterizer threads (default: $SPLATSTREAM_WORKERS or 1)")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_lod(p: argparse.ArgumentParser, r_default: float) -> None:
    p.add_argument("--lod-r", type=float, default=r_default, help="small-splat threshold in pixels (0 disables)")
    p.add_argument("--lod-pmax", type=float, default=0.5)
    p.add_argument("--lod-depth", type=float, default=50.0, help="reference depth D in meters")
    p.add_argument("--lod-offset", type=_floats, default=(0.05,), help="jitter scale, one value or x,y,z")


def _lod(args, seed: int) -> LodConfig | None:
    off = args.lod_offset * 3 if len(args.lod_offset) == 1 else args.lod_offset
    if len(off) != 3:
        raise ValueError("--lod-offset takes one value or three")
    cfg = LodConfig(args.lod_r, args.lod_pmax, args.lod_depth, off, seed)
    return cfg if cfg.enabled else None


def _workers(args) -> int:
    return default_workers() if args.workers is None else max(1, args.workers)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatstream", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="generate a synthetic street scene")
    _add_common(p)
    p.add_argument("--spec", type=Path, help="SceneSpec JSON (defaults otherwise)")
    p.add_argument("--segments", type=int, default=1, help="repeat the spec over this many segments")
    p.add_argument("--objects", type=int, default=None, help="add N default moving cars per segment")
    p.add_argument("--name", default="scene")
    p.add_argument("--ply", action="store_true", help="also export Gaussian centers as PLY")

    p = sub.add_parser("render", help="render views of a scene")
    _add_common(p)
    _add_lod(p, 4.0)
    p.add_argument("scene", type=Path, help=".scene.json manifest")
    p.add_argument("--mode", choices=(*MODES, "both"), default="streamlined")
    p.add_argument("--frames", default=None, help="frame range a:b (end exclusive) or a single index")
    p.add_argument("--warmup", action="store_true",
                   help="streamlined: sweep all frames and commit visibility before rendering")
    p.add_argument("--format", choices=("ppm", "png"), default="ppm")

    p = sub.add_parser("bench", help="scaling benchmark")
    _add_common(p)
    _add_lod(p, 0.0)
    p.add_argument("--scales", type=_ints, default=[1, 2, 4, 8])
    p.add_argument("--mode", choices=(*MODES, "both"), default="both")
    p.add_argument("--spec", type=Path, help="base SceneSpec JSON (default: built-in benchmark segment)")
    p.add_argument("--repeats", type=int, default=3, help="renders per view; the fastest counts")

    p = sub.add_parser("fit-track", help="coarse tracks from LiDAR + masks, refined by a NeuralODE")
    _add_common(p)
    p.add_argument("manifest", type=Path,
                   help="JSON: {frames: [{lidar, camera, masks: {id: pgm}}], classes: {id: name}}")
    p.add_argument("--iterations", type=int, default=1500)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--min-points", type=int, default=5)

    p = sub.add_parser("augment", help="BEV-semantic augmentation of a LiDAR cloud")
    _add_common(p)
    p.add_argument("cloud", type=Path, help="PLY point cloud (label property optional)")
    p.add_argument("--cameras", type=Path, required=True, help="JSON list of cameras")
    p.add_argument("--semantics", type=Path, nargs="*", default=[],
                   help="16-bit PGM label images, one per camera (used when the cloud has no labels)")
    p.add_argument("--labels", type=Path, help="label map JSON")
    p.add_argument("--targets", required=True, help="comma-separated class names or ids")
    p.add_argument("--bev-grid", type=float, default=1.0)
    p.add_argument("--dz", type=float, default=0.5)
    p.add_argument("--height", type=float, required=True, help="column height h in meters")
    p.add_argument("--voxel", type=float, default=0.15, help="voxel size for downsampling (0 to skip)")
    p.add_argument("--ascii", action="store_true")

    p = sub.add_parser("metrics", help="PSNR and SSIM between two images")
    p.add_argument("a", type=Path)
    p.add_argument("b", type=Path)
    return parser


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_scene(args) -> int:
    spec = SceneSpec.from_dict(io.read_json(args.spec)) if args.spec else SceneSpec()
    spec = replace(spec, seed=args.seed)
    if args.objects:
        spec = replace(spec, objects=spec.objects + default_objects(spec, args.objects))
    spec = scale_spec(spec, args.segments)
    scene, _ = generate_scene(spec)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    path = save_scene(scene, args.out_dir / args.name, spec)
    if args.ply:
        pts = np.concatenate([g.positions for g in scene.all_arrays()])
        io.write_ply(args.out_dir / f"{args.name}.ply", pts)
    print(json.dumps({"scene": str(path), "gaussians": scene.gaussian_count,
                      "frames": scene.frame_count, "objects": len(scene.tracks)}))
    return 0


def _frame_range(text: str | None, n: int) -> range:
    if text is None:
        return range(n)
    if ":" in text:
        a, b = text.split(":")
        r = range(int(a or 0), int(b) if b else n)
    else:
        r = range(int(text), int(text) + 1)
    if r.start < 0 or r.stop > n or r.start >= r.stop:
        raise ValueError(f"frame range {text!r} outside 0..{n}")
    return r


def cmd_render(args) -> int:
    scene = load_scene(args.scene)
    frames = _frame_range(args.frames, scene.frame_count)
    modes = MODES if args.mode == "both" else (args.mode,)
    lod = _lod(args, args.seed)
    workers = _workers(args)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    if "streamlined" in modes and args.warmup:
        warm = RenderConfig(lod=lod, workers=workers, compute_depth=False)
        for cam in scene.cameras:
            render_view(scene, cam.time, "streamlined", warm, cam)
        for g in scene.all_arrays():
            commit_visibility(g)
    stats, images = [], {m: [] for m in modes}
    for f in frames:
        cam = scene.cameras[f]
        for mode in modes:
            cfg = RenderConfig(lod=lod if mode == "streamlined" else None, workers=workers,
                               update_life=False)
            out = render_view(scene, cam.time, mode, cfg, cam)
            images[mode].append(out.image)
            ext = "png" if args.format == "png" else "ppm"
            img_path = args.out_dir / f"{mode}_{f:04d}.{ext}"
            (io.write_png if ext == "png" else io.write_ppm)(img_path, out.image)
            io.write_depth(args.out_dir / f"{mode}_{f:04d}.depth", out.depth_map)
            stats.append({"frame": f, "t": cam.time, **out.stats,
                          "timings_ms": {k: round(v, 4) for k, v in out.timings.items()}})
    summary = {"frames": len(frames), "views": stats}
    if len(modes) == 2:
        diff = max(float(np.abs(a - b).max()) for a, b in zip(images["conventional"], images["streamlined"]))
        summary["max_abs_diff"] = diff
        print(f"max per-pixel diff: {diff:.3e}")
    io.write_json(args.out_dir / "render_stats.json", summary)
    return 0


def cmd_bench(args) -> int:
    base = SceneSpec.from_dict(io.read_json(args.spec)) if args.spec else benchmark_spec()
    base = replace(base, seed=args.seed)
    modes = MODES if args.mode == "both" else (args.mode,)
    workers = _workers(args)
    res = run_scaling_benchmark(base, args.scales, modes, _lod(args, args.seed), workers, args.repeats)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(res.records, args.out_dir / "bench.csv")
    write_dat(res.records, args.out_dir / "bench.dat")
    summary = {
        "workers": workers, "scales": args.scales, "repeats": args.repeats,
        "ratios": {m: res.ratio(m) for m in modes} if len(args.scales) > 1 else {},
        "min_psnr": {str(k): (v if np.isfinite(v) else "inf") for k, v in res.min_psnr.items()},
        "records": [{"mode": r.mode, "scale": r.scale, "gaussians": r.gaussians,
                     "per_view_ms": r.per_view_ms, "views": r.views,
                     "below_resolution": r.below_resolution, "image_hashes": r.image_hashes}
                    for r in res.records],
    }
    io.write_json(args.out_dir / "bench.json", summary)
    for r in res.records:
        print(f"{r.mode:12s} scale {r.scale:3d}  N={r.gaussians:7d}  {r.per_view_ms:9.3f} ms/view")
    for m, v in summary["ratios"].items():
        print(f"{m} ratio (largest/smallest scale): {v:.2f}")
    return 0


def _load_cameras(path: Path) -> list[Camera]:
    raw = io.read_json(path)
    raw = raw["cameras"] if isinstance(raw, dict) else raw
    return [Camera.from_dict(c) for c in raw]


def cmd_fit_track(args) -> int:
    manifest = io.read_json(args.manifest)
    root = args.manifest.parent
    frames = manifest["frames"]
    lidar = [io.read_ply(root / fr["lidar"])[0] for fr in frames]
    cams = [Camera.from_dict(fr["camera"]) for fr in frames]
    ids = sorted({int(k) for fr in frames for k in fr.get("masks", {})})
    masks = {iid: [(io.read_pgm(root / fr["masks"][str(iid)]) if str(iid) in fr.get("masks", {}) else None)
                   for fr in frames] for iid in ids}
    coarse = coarse_track(lidar, masks, cams, args.min_points)
    classes = {int(k): v for k, v in manifest.get("classes", {}).items()}
    tracks = [ObjectTrack(iid, classes.get(iid, "object"), t, p) for iid, (t, p) in sorted(coarse.items())]
    fittable = [tr for tr in tracks if len(tr.times) >= 3]
    for tr in tracks:
        if len(tr.times) < 3:
            log.warning("object %d has %d coarse positions; kept unrefined", tr.instance_id, len(tr.times))
    fitted = {}
    if fittable:
        fit = fit_ode(fittable, args.lr, args.iterations, seed=args.seed)
        fitted = {tr.instance_id: tr for tr in fit.tracks}
    out, times = [], [c.time for c in cams]
    for tr in tracks:
        tr = fitted.get(tr.instance_id, tr)
        lo, hi = tr.span
        d = track_to_json(tr, [t for t in times if lo <= t <= hi])
        d["rmse"] = track_rmse(tr, tr.times, tr.positions)
        out.append(d)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    io.write_json(args.out_dir / "poses.json", out)
    for d in out:
        print(f"object {d['instance_id']}: {len(d['frames'])} coarse positions, rmse {d['rmse']:.4f} m")
    return 0


def cmd_augment(args) -> int:
    pts, labels = io.read_ply(args.cloud)
    cams = _load_cameras(args.cameras)
    label_map = load_label_map(args.labels) if args.labels else {}
    if args.voxel > 0 and labels is None:
        pts = voxel_downsample(pts, args.voxel)
    if labels is None:
        if len(args.semantics) != len(cams):
            raise ValueError("cloud has no labels: pass one --semantics image per camera")
        sems = [io.read_pgm(p) for p in args.semantics]
        cloud = label_points_multi(pts, sems, cams, label_map)
    else:
        cloud = SemanticPointCloud(pts, labels, {})
    targets = resolve_labels(args.targets.split(","), label_map)
    aug = bev_augment(cloud, targets, args.bev_grid, args.dz, args.height, cams)
    merged = merge(cloud.points, aug)
    merged_labels = np.r_[cloud.labels, np.full(len(aug), UNKNOWN_LABEL)]
    args.out_dir.mkdir(parents=True, exist_ok=True)
    out = args.out_dir / f"{args.cloud.stem}_augmented.ply"
    io.write_ply(out, merged, merged_labels, binary=not args.ascii)
    print(json.dumps({"original": len(cloud.points), "augmented": len(aug), "total": len(merged),
                      "out": str(out)}))
    return 0


def cmd_metrics(args) -> int:
    a, b = io.read_image(args.a), io.read_image(args.b)
    p = psnr(a, b)
    print(json.dumps({"psnr": "inf" if np.isinf(p) else p, "ssim": ssim(a, b)}))
    return 0


COMMANDS = {"gen-scene": cmd_gen_scene, "render": cmd_render, "bench": cmd_bench,
            "fit-track": cmd_fit_track, "augment": cmd_augment, "metrics": cmd_metrics}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, KeyError, OSError, RuntimeError, FloatingPointError, IndexError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"splatstream {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
