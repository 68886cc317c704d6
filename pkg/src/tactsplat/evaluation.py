"""Metrics: Chamfer distance over back-projected depth, PSNR, SSIM, and the touch-count sweep."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import losses as L
from .core_math import GaussianSet
from .errors import EmptyCloud, ShapeMismatch
from .rasterizer import rasterize

TARGET_POINTS = 500_000
CHAMFER_VARIANTS = ("squared", "absolute")


def _backproject(camera, rows, cols, depth):
    return camera.backproject(cols.astype(np.float64), rows.astype(np.float64), depth)


def predicted_pointcloud(gaussians: GaussianSet, test_cameras, alpha_threshold=0.5,
                         target_points=TARGET_POINTS, tile_size=16, threads=1):
    """Back-project rendered depth from each test camera.

    Only pixels with accumulated opacity above ``alpha_threshold`` are kept;
    their composited depth is divided by that opacity first. The cloud is
    thinned with a fixed stride when it would exceed ``target_points``.
    """
    clouds = []
    for cam in test_cameras:
        r = rasterize(gaussians, cam, tile_size, sh_degree=0, threads=threads)
        keep = r.acc_alpha > alpha_threshold
        rows, cols = np.nonzero(keep)
        z = r.depth[keep] / r.acc_alpha[keep]
        clouds.append(_backproject(cam, rows, cols, z))
    pts = np.concatenate(clouds) if clouds else np.zeros((0, 3))
    if target_points and len(pts) > target_points:
        stride = int(math.ceil(len(pts) / target_points))
        pts = pts[::stride]
    return pts


def _check_cloud(p, name):
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise EmptyCloud(f"point cloud {name} is empty")
    return p


def chamfer_distance(a, b, variant="squared"):
    """Symmetric mean nearest-neighbour distance (squared by default), exact k-d tree search."""
    if variant not in CHAMFER_VARIANTS:
        raise ValueError(f"variant must be one of {CHAMFER_VARIANTS}")
    a = _check_cloud(a, "A")
    b = _check_cloud(b, "B")
    dab, _ = cKDTree(b).query(a, k=1)
    dba, _ = cKDTree(a).query(b, k=1)
    if variant == "squared":
        dab, dba = dab ** 2, dba ** 2
    return float(np.mean(dab) + np.mean(dba))


def psnr(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim(a, b):
    """Mean local SSIM (11x11 Gaussian window), per channel then averaged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(L.ssim(a, b))


# -- reports -----------------------------------------------------------------------------------

@dataclass
class EvalReport:
    object: str
    metrics: dict
    chamfer_variant: str = "squared"

    def rows(self):
        return [(k, self.object, v) for k, v in self.metrics.items()]

    def to_json(self) -> str:
        def enc(v):
            if isinstance(v, float) and math.isinf(v):
                return "inf" if v > 0 else "-inf"
            return v
        payload = {"object": self.object, "chamfer_variant": self.chamfer_variant,
                   "metrics": {k: enc(v) for k, v in sorted(self.metrics.items())}}
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("metric", "object", "value"))
            w.writerows(self.rows())
        (out / "metrics.json").write_text(self.to_json())


def evaluate(gaussians, test_cameras, test_images=None, gt_points=None, metrics=("cd", "psnr", "ssim"),
             name="scene", alpha_threshold=0.5, chamfer_variant="squared", sh_degree=3, threads=1,
             background=None) -> EvalReport:
    out = {}
    if "cd" in metrics:
        if gt_points is None:
            raise ValueError("Chamfer distance needs ground-truth points")
        pred = predicted_pointcloud(gaussians, test_cameras, alpha_threshold, threads=threads)
        out["cd"] = chamfer_distance(pred, gt_points, chamfer_variant)
    if ("psnr" in metrics or "ssim" in metrics) and test_images is not None:
        ps, ss = [], []
        for cam, img in zip(test_cameras, test_images):
            r = rasterize(gaussians, cam, background=background, sh_degree=sh_degree, threads=threads)
            pred = np.clip(r.color, 0.0, 1.0)
            ps.append(psnr(pred, img))
            ss.append(ssim(pred, img))
        if "psnr" in metrics:
            out["psnr"] = float(np.mean(ps))
        if "ssim" in metrics:
            out["ssim"] = float(np.mean(ss))
    return EvalReport(name, out, chamfer_variant)


# -- touch-count sweep -------------------------------------------------------------------------

@dataclass
class AblationScene:
    """Everything a sweep needs: training views, test cameras, GT geometry and a touch source."""
    train_cameras: list
    train_images: list
    test_cameras: list
    gt_points: np.ndarray
    vision_points: np.ndarray
    vision_colors: np.ndarray
    mesh: object                    # touch_sim.TriangleMesh
    fingers_per_grasp: int = 1
    patch_radius: float | None = None
    points_per_patch: int = 256
    name: str = "scene"
    train_masks: list | None = None  # foreground masks, needed for random backgrounds


def touch_ablation(scene: AblationScene, counts, seeds_per_count, config, mode="3dgs+t",
                   alpha_threshold=0.5, progress=None):
    """Train one model per (touch count, seed) and aggregate CD.

    A count is the number of touch patches. With count 0 the touch losses
    have nothing to act on and the run is the plain photometric baseline.
    Returns (summary rows (count, mean, std), per-run rows (count, seed, cd)).
    """
    from .training import TrainData, initialize_scene, train
    from .touch_sim import sample_grasps

    runs = []
    for count in counts:
        for seed in range(seeds_per_count):
            cfg = dataclasses.replace(config.for_mode(mode), seed=seed)
            patches = []
            if count > 0:
                n_grasps = int(math.ceil(count / scene.fingers_per_grasp))
                patches = sample_grasps(scene.mesh, n_grasps, scene.fingers_per_grasp,
                                        scene.patch_radius, scene.points_per_patch, seed=seed)[:count]
            tp = L.TouchPointSet.from_patches(patches)
            init = initialize_scene(scene.vision_points, scene.vision_colors, patches, cfg)
            state, _ = train(init, TrainData(scene.train_cameras, scene.train_images, tp, scene.train_masks), cfg)
            pred = predicted_pointcloud(state.gaussians, scene.test_cameras, alpha_threshold,
                                        threads=cfg.threads)
            cd = chamfer_distance(pred, scene.gt_points)
            runs.append((count, seed, cd))
            if progress:
                progress(count, seed, cd)
    summary = []
    for count in counts:
        v = np.array([cd for c, _, cd in runs if c == count])
        summary.append((count, float(v.mean()), float(v.std())))
    return summary, runs


def write_ablation(summary, runs, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("count", "mean_cd", "std_cd"))
        w.writerows(summary)
    with open(out / "ablation_runs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("count", "seed", "cd"))
        w.writerows(runs)


def trend_slope(summary):
    """Least-squares slope of mean CD against touch count."""
    x = np.array([s[0] for s in summary], dtype=np.float64)
    y = np.array([s[1] for s in summary], dtype=np.float64)
    if len(x) < 2:
        return 0.0
    return float(np.polyfit(x, y, 1)[0])
