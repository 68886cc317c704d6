"""Command line: make-scene, touch-sim, train, render, eval, ablate-touches.

Exit codes: 0 ok, 2 usage, 3 I/O failure, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation, scene_io, synth, touch_sim, training
from . import losses as L
from .errors import (EmptyScene, MalformedJson, MalformedManifest, MalformedPly, MeshEmpty, MissingFile,
                     NoContact, UnsupportedVersion, ValidationError)

log = logging.getLogger("tactsplat")

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 2, 3, 4
IO_ERRORS = (MissingFile, MalformedManifest, MalformedPly, MalformedJson, UnsupportedVersion,
             ValidationError, OSError)


class UsageError(Exception):
    pass


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _pos_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser():
    p = argparse.ArgumentParser(prog="tactsplat", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=_pos_int, default=os.cpu_count() or 1,
                   help="worker threads for rendering (default: all cores)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-scene", help="render a synthetic dataset directory")
    s.add_argument("--preset", choices=synth.PRESETS, default="sphere")
    s.add_argument("--views", type=_pos_int, default=5)
    s.add_argument("--test-views", type=_pos_int, default=16)
    s.add_argument("--glossy", type=float, default=0.6, metavar="KS", help="specular coefficient")
    s.add_argument("--size", type=_pos_int, default=64, help="image width and height")
    s.add_argument("--sparse-points", type=_nonneg_int, default=400)
    s.add_argument("--out", required=True)

    s = sub.add_parser("touch-sim", help="simulate grasps on the scene mesh")
    s.add_argument("--scene", required=True)
    s.add_argument("--grasps", type=_nonneg_int, default=5)
    s.add_argument("--fingers", type=_nonneg_int, default=5)
    s.add_argument("--patch-radius", type=float, default=None)
    s.add_argument("--points-per-patch", type=_pos_int, default=256)
    s.add_argument("--out", default=None, help="output file (default: SCENE/touches.json)")

    s = sub.add_parser("train", help="optimize a Gaussian scene")
    s.add_argument("--scene", required=True)
    s.add_argument("--config", default=None, help="flat 'key = value' file of TrainConfig fields")
    s.add_argument("--mode", choices=training.MODES, default="full")
    s.add_argument("--iterations", type=_nonneg_int, default=None)
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config field (repeatable)")
    s.add_argument("--out", required=True)

    s = sub.add_parser("render", help="render test views of a checkpoint")
    s.add_argument("--scene", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--split", choices=("train", "test"), default="test")
    s.add_argument("--out", required=True)

    s = sub.add_parser("eval", help="Chamfer distance, PSNR and SSIM of a checkpoint")
    s.add_argument("--scene", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--metrics", default="cd,psnr,ssim")
    s.add_argument("--chamfer", choices=evaluation.CHAMFER_VARIANTS, default="squared")
    s.add_argument("--out", default=None)

    s = sub.add_parser("ablate-touches", help="touch-count sweep")
    s.add_argument("--scene", required=True)
    s.add_argument("--counts", type=_int_list, default=[0, 1, 5, 10, 20])
    s.add_argument("--seeds", type=_pos_int, default=5)
    s.add_argument("--config", default=None)
    s.add_argument("--mode", choices=training.MODES, default="3dgs+t")
    s.add_argument("--iterations", type=_nonneg_int, default=None)
    s.add_argument("--fingers", type=_pos_int, default=5, help="finger readings per grasp")
    s.add_argument("--patch-radius", type=float, default=None)
    s.add_argument("--points-per-patch", type=_pos_int, default=256)
    s.add_argument("--out", required=True)
    return p


# -- helpers ---------------------------------------------------------------------------------

def _load_config(args) -> training.TrainConfig:
    cfg = training.TrainConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise MissingFile(f"config file not found: {path}")
        cfg = training.TrainConfig.loads(path.read_text())
    over = {"seed": args.seed, "threads": args.threads}
    if getattr(args, "iterations", None) is not None:
        over["iterations"] = args.iterations
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip()] = v.strip()
    try:
        return cfg.updated(over)
    except ValueError as e:
        raise UsageError(str(e)) from e


def _scene_vision_points(scene: Path, cfg):
    ply = scene / "points3d.ply"
    if ply.exists():
        pts, cols = scene_io.load_points(ply)
        if len(pts):
            return pts, cols
    log.warning("no sparse cloud at %s; initializing from random points", ply)
    return training.random_init_points(cfg)


def _masks(depths):
    """Foreground masks from GT depth (pixels that hit the object), or None."""
    return None if depths is None else [(d > 0).astype(np.float64) for d in depths]


def _scene_touches(scene: Path):
    path = scene / "touches.json"
    if not path.exists():
        log.warning("no touches.json in %s; running without touches", scene)
        return []
    return scene_io.load_touches(path)


# -- commands --------------------------------------------------------------------------------

def cmd_make_scene(args):
    out = Path(args.out)
    data = synth.build_scene(args.preset, args.views, args.test_views, args.glossy, args.size,
                             seed=args.seed, sparse_points=args.sparse_points)
    out.mkdir(parents=True, exist_ok=True)
    scene_io.save_split(out, "train", data.train_cameras, data.train_images, data.train_depths)
    scene_io.save_split(out, "test", data.test_cameras, data.test_images, data.test_depths)
    scene_io.save_points(out / "gt_points.ply", data.gt_points)
    scene_io.save_points(out / "points3d.ply", data.vision_points, data.vision_colors)
    scene_io.save_obj(out / "mesh.obj", data.spec.mesh)
    print(f"wrote {args.preset} scene to {out}: {args.views} train / {args.test_views} test views")
    return 0


def cmd_touch_sim(args):
    scene = Path(args.scene)
    mesh = scene_io.load_obj(scene / "mesh.obj")
    patches = []
    if args.grasps and args.fingers:
        patches = touch_sim.sample_grasps(mesh, args.grasps, args.fingers, args.patch_radius,
                                          args.points_per_patch, seed=args.seed)
    else:
        log.warning("no grasps requested; writing an empty touch set")
    out = Path(args.out) if args.out else scene / "touches.json"
    scene_io.save_touches(patches, out)
    print(f"wrote {len(patches)} touch patches to {out}")
    return 0


def cmd_train(args):
    scene, out = Path(args.scene), Path(args.out)
    cfg = _load_config(args)
    cams, imgs, depths = scene_io.load_dataset(scene, "train")
    patches = _scene_touches(scene) if args.mode in ("3dgs+t", "full") else []
    vp, vc = _scene_vision_points(scene, cfg)
    mode_cfg = cfg.for_mode(args.mode)
    if not patches and mode_cfg.lambda_T > 0:
        log.warning("mode %s without touches: the transmittance loss is disabled", args.mode)
    init = training.initialize_scene(vp, vc, patches, mode_cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(f"# mode = {args.mode}\n" + cfg.dumps())
    data = training.TrainData(cams, imgs, L.TouchPointSet.from_patches(patches), _masks(depths))

    def progress(it, rec):
        if it % 500 == 0 or it == mode_cfg.iterations:
            log.info("iter %d  L_photo %.5f  L_T %.4f  L_S %.4f  N %d", it, rec["L_photo"], rec["L_T"],
                     rec["L_S"], rec["N_gaussians"])

    state, _ = training.train(init, data, mode_cfg, log_path=out / "loss.csv", checkpoint_dir=out,
                              progress=progress)
    scene_io.save_checkpoint(state.gaussians, out / "checkpoint.ply")
    print(f"wrote {out / 'checkpoint.ply'} ({len(state.gaussians)} Gaussians)")
    return 0


def cmd_render(args):
    cams, _, _ = scene_io.load_dataset(args.scene, args.split)
    g = scene_io.load_checkpoint(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .rasterizer import rasterize
    for k, cam in enumerate(cams):
        r = rasterize(g, cam, threads=args.threads)
        scene_io.write_image(out / f"{args.split}_{k:03d}.png", np.clip(r.color, 0, 1))
    print(f"rendered {len(cams)} views to {out}")
    return 0


def cmd_eval(args):
    scene = Path(args.scene)
    metrics = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    bad = set(metrics) - {"cd", "psnr", "ssim"}
    if bad:
        raise UsageError(f"unknown metrics: {sorted(bad)}")
    cams, imgs, _ = scene_io.load_dataset(scene, "test")
    g = scene_io.load_checkpoint(args.ckpt)
    gt = scene_io.load_points(scene / "gt_points.ply")[0] if "cd" in metrics else None
    rep = evaluation.evaluate(g, cams, imgs, gt, metrics, name=scene.name,
                              chamfer_variant=args.chamfer, threads=args.threads)
    if args.out:
        rep.write(args.out)
    sys.stdout.write(rep.to_json())
    return 0


def cmd_ablate(args):
    scene = Path(args.scene)
    cfg = _load_config(args)
    cams, imgs, depths = scene_io.load_dataset(scene, "train")
    tcams, _, _ = scene_io.load_dataset(scene, "test")
    gt = scene_io.load_points(scene / "gt_points.ply")[0]
    vp, vc = _scene_vision_points(scene, cfg)
    mesh = scene_io.load_obj(scene / "mesh.obj")
    ab = evaluation.AblationScene(cams, imgs, tcams, gt, vp, vc, mesh, args.fingers, args.patch_radius,
                                  args.points_per_patch, scene.name, _masks(depths))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(f"# mode = {args.mode}\n" + cfg.dumps())
    summary, runs = evaluation.touch_ablation(
        ab, args.counts, args.seeds, cfg, args.mode,
        progress=lambda c, s, cd: log.info("count %d seed %d: CD %.6f", c, s, cd))
    evaluation.write_ablation(summary, runs, out)
    print(f"{len(runs)} runs, {len(summary)} counts -> {out / 'ablation.csv'}")
    return 0


COMMANDS = {"make-scene": cmd_make_scene, "touch-sim": cmd_touch_sim, "train": cmd_train,
            "render": cmd_render, "eval": cmd_eval, "ablate-touches": cmd_ablate}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)   # argparse exits with code 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except training.NumericFailure as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except IO_ERRORS as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (EmptyScene, MeshEmpty, NoContact) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
