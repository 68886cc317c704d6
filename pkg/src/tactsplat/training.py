"""Optimization loop: dual-set initialization, loss assembly, Adam, density control."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import core_math as cm
from . import losses as L
from .core_math import Camera, GaussianSet, GradientSet
from .errors import EmptyScene, TactSplatError
from .rasterizer import rasterize, rasterize_backward

log = logging.getLogger(__name__)

MODES = ("3dgs", "3dgs+s", "3dgs+t", "full")


class NumericFailure(TactSplatError, FloatingPointError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 7000
    seed: int = 0
    # learning rates; the position rate is scaled by the scene extent and decays exponentially
    lr_means_init: float = 1.6e-4
    lr_means_final: float = 1.6e-6
    lr_sh: float = 2.5e-3
    sh_rest_lr_factor: float = 1.0 / 20.0
    lr_opacity: float = 5e-2
    lr_scales: float = 5e-3
    lr_rotations: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    # density control
    densify_from: int = 500
    densify_until: int | None = None    # None: 0.6 * iterations
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    opacity_prune_threshold: float = 5e-3
    opacity_reset_interval: int = 3000
    scale_split_threshold: float | None = None  # None: 0.01 * scene extent
    split_children: int = 2
    # spherical harmonics
    sh_degree: int = 3
    sh_degree_interval: int = 1000
    # initialization
    init_opacity: float = 0.1
    touch_scale_jitter: float = 0.2
    random_init_points: int = 2000
    random_init_extent: float = 1.3
    # losses
    lambda_photo_ssim: float = 0.2
    lambda_T: float = 0.5
    lambda_S: float = 0.1
    beta: float = 10.0
    K: int = 20
    d_max: float | None = None
    sigma_mask: float = 20.0
    mask_variant: str = "decay"
    use_proximity_mask: bool = True
    restrict_lt_to_touch_set: bool = False
    # rendering / bookkeeping
    tile_size: int = 16
    background: tuple = (0.0, 0.0, 0.0)
    random_background: bool = False    # needs alpha masks; a fresh background color every step
    threads: int = 1
    log_interval: int = 1
    checkpoint_interval: int = 0

    @property
    def densify_until_iter(self):
        return int(0.6 * self.iterations) if self.densify_until is None else self.densify_until

    def loss_weights(self) -> L.LossWeights:
        return L.LossWeights(self.lambda_photo_ssim, self.lambda_T, self.lambda_S, self.beta, self.K,
                             self.d_max, self.sigma_mask, L.MaskVariant(self.mask_variant),
                             self.restrict_lt_to_touch_set)

    def for_mode(self, mode: str) -> "TrainConfig":
        """Gate the regularizers: 3dgs (none), 3dgs+s (smoothness, no mask), 3dgs+t (touch), full."""
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")
        lam_s = self.lambda_S if mode in ("3dgs+s", "full") else 0.0
        lam_t = self.lambda_T if mode in ("3dgs+t", "full") else 0.0
        return dataclasses.replace(self, lambda_S=lam_s, lambda_T=lam_t,
                                   use_proximity_mask=self.use_proximity_mask and mode == "full")

    # -- flat key = value text format -------------------------------------------------
    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(float(x)) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        cfg = base or cls()
        updates = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            updates[k] = v
        return cfg.updated(updates)

    def updated(self, updates: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(self)}
        parsed = {}
        for k, v in updates.items():
            if k not in known:
                raise ValueError(f"unknown config key {k!r}")
            parsed[k] = _parse_value(v, getattr(self, k), known[k].type)
        return dataclasses.replace(self, **parsed)


def _parse_value(v, current, typ):
    if not isinstance(v, str):
        return v
    s = v.strip()
    if s.lower() in ("none", "null", ""):
        return None
    t = str(typ)
    if "bool" in t:
        if s.lower() in ("1", "true", "yes", "on"):
            return True
        if s.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"bad boolean {v!r}")
    if "tuple" in t:
        return tuple(float(x) for x in s.split(","))
    if t.startswith("int"):
        return int(s)
    if "float" in t:
        return float(s)
    return s


# -- state ------------------------------------------------------------------------------------

@dataclass
class TrainState:
    gaussians: GaussianSet
    exp_avg: dict
    exp_avg_sq: dict
    iteration: int = 0
    grad_accum: np.ndarray = None
    grad_count: np.ndarray = None
    spatial_scale: float = 1.0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0), repr=False)
    view_queue: list = field(default_factory=list)

    @classmethod
    def create(cls, gaussians: GaussianSet, spatial_scale=1.0, seed=0):
        n = len(gaussians)
        avg = {k: np.zeros_like(getattr(gaussians, k)) for k in GaussianSet.PARAMS}
        sq = {k: np.zeros_like(getattr(gaussians, k)) for k in GaussianSet.PARAMS}
        return cls(gaussians, avg, sq, 0, np.zeros(n), np.zeros(n), spatial_scale,
                   np.random.default_rng(seed))

    def check(self):
        n = len(self.gaussians)
        for k in GaussianSet.PARAMS:
            assert self.exp_avg[k].shape == getattr(self.gaussians, k).shape
            assert self.exp_avg_sq[k].shape == getattr(self.gaussians, k).shape
        assert self.grad_accum.shape == (n,) and self.grad_count.shape == (n,)

    def select(self, keep):
        """Keep rows ``keep`` (bool mask or index array) of the set and all accumulators."""
        self.gaussians = self.gaussians.subset(keep)
        for d in (self.exp_avg, self.exp_avg_sq):
            for k in d:
                d[k] = d[k][keep]
        self.grad_accum = self.grad_accum[keep]
        self.grad_count = self.grad_count[keep]

    def append(self, new: GaussianSet):
        self.gaussians = GaussianSet.concat([self.gaussians, new])
        for d in (self.exp_avg, self.exp_avg_sq):
            for k in d:
                d[k] = np.concatenate([d[k], np.zeros_like(getattr(new, k))])
        m = len(new)
        self.grad_accum = np.concatenate([self.grad_accum, np.zeros(m)])
        self.grad_count = np.concatenate([self.grad_count, np.zeros(m)])


# -- initialization ----------------------------------------------------------------------------

def _knn_mean_dist(points, k=3):
    if len(points) < 2:
        return np.full(len(points), 0.01)
    kk = min(k, len(points) - 1)
    d, _ = cKDTree(points).query(points, k=kk + 1)
    return np.maximum(np.mean(d[:, 1:], axis=1), 1e-7)


def median_nn_distance(points):
    if len(points) < 2:
        return 0.0
    d, _ = cKDTree(points).query(points, k=2)
    return float(np.median(d[:, 1]))


def initialize_scene(vision_points, vision_colors, touch_patches, config: TrainConfig) -> GaussianSet:
    """Vision Gaussians at the sparse cloud, touch Gaussians at every touch point.

    Vision scales are isotropic, from the mean distance to the 3 nearest
    neighbours; touch colors are random and touch scales jitter around each
    patch's median neighbour spacing. Opacity is the same everywhere.
    """
    vision_points = np.zeros((0, 3)) if vision_points is None else np.asarray(vision_points, float)
    touch_patches = touch_patches or []
    if len(vision_points) == 0 and not any(len(p.points) for p in touch_patches):
        raise EmptyScene("need vision points or touch patches to initialize")
    rng = np.random.default_rng(config.seed)
    op_logit = float(cm.logit(config.init_opacity))
    parts = []
    nv = len(vision_points)
    if nv:
        cols = np.full((nv, 3), 0.5) if vision_colors is None else np.asarray(vision_colors, float)
        sh = np.zeros((nv, cm.SH_BASES, 3))
        sh[:, 0, :] = cm.rgb_to_sh_dc(cols)
        scale = np.log(_knn_mean_dist(vision_points))
        parts.append(GaussianSet(vision_points, np.tile([1.0, 0, 0, 0], (nv, 1)),
                                 np.repeat(scale[:, None], 3, axis=1), np.full(nv, op_logit), sh,
                                 np.full(nv, cm.VISION)))
    for p in touch_patches:
        pts = np.asarray(p.points, dtype=np.float64)
        m = len(pts)
        if m == 0:
            continue
        spacing = median_nn_distance(pts) if m > 1 else 0.0
        if spacing <= 0:
            spacing = max(p.patch_radius * 0.25, 1e-4)
        j = config.touch_scale_jitter
        s = spacing * rng.uniform(1 - j, 1 + j, size=m)
        sh = np.zeros((m, cm.SH_BASES, 3))
        sh[:, 0, :] = cm.rgb_to_sh_dc(rng.random((m, 3)))
        parts.append(GaussianSet(pts, np.tile([1.0, 0, 0, 0], (m, 1)),
                                 np.repeat(np.log(s)[:, None], 3, axis=1), np.full(m, op_logit), sh,
                                 np.full(m, cm.TOUCH)))
    return GaussianSet.concat(parts)


def random_init_points(config: TrainConfig, center=(0.0, 0.0, 0.0)):
    """Uniform points in a cube with random colors, for scenes without a sparse cloud."""
    rng = np.random.default_rng(config.seed)
    e = config.random_init_extent
    pts = rng.uniform(-e, e, size=(config.random_init_points, 3)) + np.asarray(center)
    return pts, rng.random((config.random_init_points, 3))


def scene_extent(cameras):
    centers = np.array([c.center for c in cameras])
    mid = centers.mean(axis=0)
    return 1.1 * float(np.max(np.linalg.norm(centers - mid, axis=1))) or 1.0


# -- optimizer ---------------------------------------------------------------------------------

def means_lr(config: TrainConfig, step: int, spatial_scale: float):
    """Log-linear decay from lr_means_init to lr_means_final over the run."""
    t = np.clip(step / max(config.iterations, 1), 0.0, 1.0)
    lr = math.exp(math.log(config.lr_means_init) * (1 - t) + math.log(config.lr_means_final) * t)
    return lr * spatial_scale


def adam_step(state: TrainState, grads: GradientSet, config: TrainConfig):
    state.iteration += 1
    t = state.iteration
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    lrs = {"means": means_lr(config, t, state.spatial_scale), "rotations": config.lr_rotations,
           "log_scales": config.lr_scales, "opacity_logits": config.lr_opacity}
    g = state.gaussians
    for k in GaussianSet.PARAMS:
        grad = getattr(grads, k)
        m = state.exp_avg[k]
        v = state.exp_avg_sq[k]
        m *= b1
        m += (1 - b1) * grad
        v *= b2
        v += (1 - b2) * grad * grad
        step = (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        if k == "sh_coeffs":
            lr = np.full((1, cm.SH_BASES, 1), config.lr_sh * config.sh_rest_lr_factor)
            lr[:, 0] = config.lr_sh
            step = step * lr
        else:
            step = step * lrs[k]
        setattr(g, k, getattr(g, k) - step)


# -- density control ---------------------------------------------------------------------------

def densify_and_prune(state: TrainState, config: TrainConfig, extent: float | None = None):
    """Clone small / split large high-gradient Gaussians, then drop transparent ones.

    Children keep their parent's set tag and start with zero optimizer moments.
    Accumulated gradient statistics are reset afterwards.
    """
    g = state.gaussians
    n0 = len(g)
    extent = state.spatial_scale if extent is None else extent
    split_thr = config.scale_split_threshold if config.scale_split_threshold is not None else 0.01 * extent
    with np.errstate(invalid="ignore", divide="ignore"):
        avg = np.where(state.grad_count > 0, state.grad_accum / state.grad_count, 0.0)
    high = avg >= config.densify_grad_threshold
    max_scale = np.max(g.scales, axis=1)
    clone = high & (max_scale <= split_thr)
    split = high & (max_scale > split_thr)

    if np.any(clone):
        state.append(g.subset(np.nonzero(clone)[0]))
    if np.any(split):
        idx = np.nonzero(split)[0]
        k = config.split_children
        parents = state.gaussians.subset(np.repeat(idx, k))
        R = cm.quat_to_rotmat(parents.rotations)
        local = state.rng.normal(size=(len(parents), 3)) * parents.scales
        parents.means = parents.means + np.einsum("nij,nj->ni", R, local)
        parents.log_scales = parents.log_scales - np.log(0.8 * k)
        state.append(parents)
    n1 = len(state.gaussians)
    keep = np.ones(n1, dtype=bool)
    keep[np.nonzero(split)[0]] = False
    keep &= state.gaussians.opacities >= config.opacity_prune_threshold
    state.select(np.nonzero(keep)[0])
    state.grad_accum[:] = 0
    state.grad_count[:] = 0
    log.debug("densify: %d -> %d (clone %d, split %d)", n0, len(state.gaussians),
              int(clone.sum()), int(split.sum()))
    return state


def reset_opacity(state: TrainState, ceiling=0.01):
    g = state.gaussians
    g.opacity_logits = np.minimum(g.opacity_logits, cm.logit(ceiling))
    state.exp_avg["opacity_logits"][:] = 0
    state.exp_avg_sq["opacity_logits"][:] = 0


# -- training step -----------------------------------------------------------------------------

@dataclass
class TrainData:
    cameras: list
    images: list
    touch_points: L.TouchPointSet | None = None
    masks: list | None = None            # per-view alpha in [0,1]
    image_background: tuple = (0.0, 0.0, 0.0)  # color the images were composited over

    def __post_init__(self):
        if len(self.cameras) != len(self.images) or not self.cameras:
            raise ValueError("need one image per camera and at least one view")
        if self.masks is not None and len(self.masks) != len(self.images):
            raise ValueError("need one mask per image")

    def target(self, view, background):
        """Training image re-composited over ``background`` (needs masks)."""
        img = self.images[view]
        if self.masks is None:
            return img
        w = (1.0 - np.asarray(self.masks[view], dtype=np.float64))[..., None]
        return img + w * (np.asarray(background) - np.asarray(self.image_background))


def _next_view(state: TrainState, n_views: int):
    if not state.view_queue:
        state.view_queue = list(state.rng.permutation(n_views))
    return int(state.view_queue.pop(0))


def train_step(state: TrainState, data: TrainData, config: TrainConfig):
    """One optimization step on one training view. Returns a dict of scalar losses."""
    view = _next_view(state, len(data.cameras))
    cam: Camera = data.cameras[view]
    g = state.gaussians
    degree = min(config.sh_degree, state.iteration // max(config.sh_degree_interval, 1))
    background = config.background
    if config.random_background and data.masks is not None:
        background = tuple(state.rng.random(3))
        target = data.target(view, background)
    else:
        target = data.images[view]
    render = rasterize(g, cam, config.tile_size, background, degree, config.threads)
    l_photo, d_color = L.photometric_loss(render.color, target, config.lambda_photo_ssim)
    d_depth = np.zeros(render.depth.shape)
    l_s = l_t = 0.0
    touches = data.touch_points
    has_touch = touches is not None and len(touches) > 0

    if config.lambda_S > 0:
        mask = None
        if config.use_proximity_mask and has_touch:
            mask = L.proximity_mask(touches, cam, render.depth, config.sigma_mask,
                                    config.mask_variant, acc_alpha=render.acc_alpha)
        l_s, dls = L.edge_aware_smoothness(render.depth, target, config.beta, mask)
        d_depth = config.lambda_S * dls

    grads = rasterize_backward(g, cam, render, d_color, d_depth, config.threads)
    mean2d_norm = grads.mean2d_norm
    if config.lambda_T > 0 and has_touch:
        d_max = config.d_max if config.d_max is not None else default_d_max(g)
        l_t, gt, _ = L.transmittance_loss(touches, g, config.K, d_max, config.restrict_lt_to_touch_set)
        grads += gt.scaled(config.lambda_T)

    total = l_photo + config.lambda_S * l_s + config.lambda_T * l_t
    if not np.isfinite(total) or not grads.is_finite():
        raise NumericFailure(f"non-finite loss or gradient at iteration {state.iteration}")
    adam_step(state, grads, config)

    vis = render.pre.visible
    state.grad_accum[vis] += mean2d_norm[vis]
    state.grad_count[vis] += 1
    return {"iteration": state.iteration, "view": view, "L_photo": l_photo, "L_T": l_t, "L_S": l_s,
            "total": total, "N_gaussians": len(g), "render": render, "target": target}


def default_d_max(initial: GaussianSet):
    """Neighbourhood radius for the transmittance loss: 4x the median spacing of the set."""
    return 4.0 * median_nn_distance(initial.means)


# -- loop --------------------------------------------------------------------------------------

LOG_FIELDS = ("iteration", "L_photo", "L_T", "L_S", "N_gaussians", "PSNR")


def train(initial: GaussianSet, data: TrainData, config: TrainConfig, extent: float | None = None,
          log_path=None, checkpoint_dir=None, progress=None) -> tuple[TrainState, list]:
    """Run the full optimization. Returns the final state and the per-iteration log rows."""
    from .evaluation import psnr
    from .scene_io import save_checkpoint

    extent = scene_extent(data.cameras) if extent is None else extent
    if config.d_max is None:
        config = dataclasses.replace(config, d_max=default_d_max(initial))
    state = TrainState.create(initial.copy(), extent, config.seed)
    rows = []
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_FIELDS)
    try:
        for it in range(1, config.iterations + 1):
            rec = train_step(state, data, config)
            if config.log_interval and it % config.log_interval == 0:
                row = (it, rec["L_photo"], rec["L_T"], rec["L_S"], rec["N_gaussians"],
                       psnr(np.clip(rec["render"].color, 0, 1), rec["target"]))
                rows.append(row)
                if writer:
                    writer.writerow(row)
            if it < config.densify_until_iter:
                if it > config.densify_from and it % config.densify_interval == 0:
                    densify_and_prune(state, config, extent)
                if config.opacity_reset_interval and it % config.opacity_reset_interval == 0:
                    reset_opacity(state)
            if checkpoint_dir and config.checkpoint_interval and it % config.checkpoint_interval == 0:
                save_checkpoint(state.gaussians, Path(checkpoint_dir) / f"ckpt_{it:06d}.ply")
            if progress:
                progress(it, rec)
    finally:
        if fh:
            fh.close()
    return state, rows
