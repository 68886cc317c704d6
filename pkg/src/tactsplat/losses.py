"""Training objectives and their gradients.

Photometric L1/SSIM, the touch-point transmittance loss, the 5x5 Sobel
edge-aware depth smoothness and the touch proximity mask that modulates it.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import core_math as cm
from .core_math import Camera, GaussianSet, GradientSet
from .errors import EmptyTouchSet, ImageTooSmall, ShapeMismatch


@dataclass
class TouchPointSet:
    points: np.ndarray
    source_patch: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.source_patch = np.asarray(self.source_patch, dtype=np.int64).reshape(-1)
        if self.source_patch.shape[0] != self.points.shape[0]:
            raise ShapeMismatch("source_patch must have one entry per point")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("touch points must be finite")

    def __len__(self):
        return self.points.shape[0]

    @classmethod
    def from_patches(cls, patches):
        if not patches:
            return cls(np.zeros((0, 3)), np.zeros(0))
        pts = [p.points for p in patches]
        src = [np.full(len(p.points), i) for i, p in enumerate(patches)]
        return cls(np.concatenate(pts), np.concatenate(src))


class MaskVariant(str, enum.Enum):
    DECAY = "decay"
    THRESHOLD = "threshold"


@dataclass
class ProximityMask:
    weights: np.ndarray
    variant: MaskVariant


@dataclass
class LossWeights:
    lambda_photo_ssim: float = 0.2
    lambda_T: float = 0.5
    lambda_S: float = 0.1
    beta: float = 10.0
    K: int = 20
    d_max: float | None = None  # None: 4x median nearest-neighbour distance of the initial cloud
    sigma_mask: float = 20.0
    mask_variant: MaskVariant = MaskVariant.DECAY
    restrict_lt_to_touch_set: bool = False


# -- SSIM / photometric -------------------------------------------------------------

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - size // 2
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def _blur(img):
    # zero padded "same" filtering; symmetric kernel, so the operator is self-adjoint
    g = gaussian_window()
    out = ndimage.correlate1d(img, g, axis=0, mode="constant", cval=0.0)
    return ndimage.correlate1d(out, g, axis=1, mode="constant", cval=0.0)


def _ssim_terms(x, y):
    mx, my = _blur(x), _blur(y)
    exx, eyy, exy = _blur(x * x), _blur(y * y), _blur(x * y)
    vx, vy, cxy = exx - mx * mx, eyy - my * my, exy - mx * my
    num1 = 2 * mx * my + SSIM_C1
    num2 = 2 * cxy + SSIM_C2
    den1 = mx * mx + my * my + SSIM_C1
    den2 = vx + vy + SSIM_C2
    return mx, my, num1, num2, den1, den2


def _as_channels(img):
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def ssim_with_grad(x, y):
    """Mean SSIM over pixels and channels, and its gradient w.r.t. ``x``."""
    x, y = _as_channels(x), _as_channels(y)
    if x.shape != y.shape:
        raise ShapeMismatch(f"{x.shape} vs {y.shape}")
    n = x.size
    total = 0.0
    grad = np.empty_like(x)
    for ch in range(x.shape[-1]):
        xc, yc = x[..., ch], y[..., ch]
        mx, my, n1, n2, d1, d2 = _ssim_terms(xc, yc)
        s = (n1 * n2) / (d1 * d2)
        total += s.sum()
        # partials of s w.r.t. mx, E[x^2], E[xy]
        ds_dmx = (2 * my * n2) / (d1 * d2) - s * (2 * mx) / d1 \
            + (-2 * my * n1) / (d1 * d2) + s * (2 * mx) / d2
        ds_dexx = -s / d2
        ds_dexy = 2 * n1 / (d1 * d2)
        grad[..., ch] = _blur(ds_dmx) + 2 * xc * _blur(ds_dexx) + yc * _blur(ds_dexy)
    return total / n, grad / n


def ssim(a, b):
    return ssim_with_grad(a, b)[0]


def photometric_loss(rendered, target, lambda_ssim=0.2):
    """(1 - lambda) * L1 + lambda * (1 - SSIM); returns (loss, d loss / d rendered)."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ShapeMismatch(f"rendered {rendered.shape} vs target {target.shape}")
    diff = rendered - target
    l1 = np.mean(np.abs(diff))
    grad = (1 - lambda_ssim) * np.sign(diff) / diff.size
    loss = (1 - lambda_ssim) * l1
    if lambda_ssim > 0:
        s, ds = ssim_with_grad(rendered, target)
        loss += lambda_ssim * (1.0 - s)
        grad = grad - lambda_ssim * ds.reshape(grad.shape)
    return loss, grad


# -- transmittance at touch points ----------------------------------------------------

@dataclass
class TouchSelection:
    """Top-K (touch point, Gaussian) pairs kept for the transmittance loss."""

    point: np.ndarray
    gauss: np.ndarray
    count: np.ndarray   # kept Gaussians per touch point


def select_touch_gaussians(points, gaussians: GaussianSet, K, d_max, restrict_to_touch=False,
                           inv_covs=None) -> TouchSelection:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    P = points.shape[0]
    cand = np.arange(len(gaussians))
    if restrict_to_touch:
        cand = cand[gaussians.set_tag == cm.TOUCH]
    empty = TouchSelection(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(P, np.int64))
    if len(cand) == 0 or P == 0:
        return empty
    tree = cKDTree(gaussians.means[cand])
    pairs = cKDTree(points).sparse_distance_matrix(tree, d_max, output_type="ndarray")
    if len(pairs) == 0:
        return empty
    pi = pairs["i"].astype(np.int64)
    gi = cand[pairs["j"].astype(np.int64)]
    if inv_covs is None:
        uniq, local = np.unique(gi, return_inverse=True)
        inv = cm.inverse_covariance_from_params(gaussians.rotations[uniq], gaussians.log_scales[uniq])
        inv = inv[local]
    else:
        inv = inv_covs[gi]
    infl = _influence(points[pi], gaussians.means[gi], inv) * gaussians.opacities[gi]
    order = np.lexsort((gi, -infl, pi))
    pi, gi = pi[order], gi[order]
    first = np.ones(len(pi), dtype=bool)
    first[1:] = pi[1:] != pi[:-1]
    seg_start = np.maximum.accumulate(np.where(first, np.arange(len(pi)), 0))
    rank = np.arange(len(pi)) - seg_start
    keep = rank < K
    pi, gi = pi[keep], gi[keep]
    return TouchSelection(pi, gi, np.bincount(pi, minlength=P))


def _influence(x, mean, inv_cov):
    d = x - mean
    return np.exp(-0.5 * np.einsum("ni,nij,nj->n", d, inv_cov, d))


def transmittance_at_point(p, gaussians: GaussianSet, K, d_max, restrict_to_touch=False):
    """Average of (1 - f * alpha) over the top-K influential Gaussians within d_max."""
    sel = select_touch_gaussians(np.asarray(p)[None], gaussians, K, d_max, restrict_to_touch)
    if sel.count[0] == 0:
        return 1.0
    inv = cm.inverse_covariance_from_params(gaussians.rotations[sel.gauss], gaussians.log_scales[sel.gauss])
    f = _influence(np.asarray(p, dtype=np.float64)[None], gaussians.means[sel.gauss], inv)
    return float(np.mean(1.0 - f * gaussians.opacities[sel.gauss]))


def transmittance_loss(touch_points, gaussians: GaussianSet, K, d_max, restrict_to_touch=False,
                       selection: TouchSelection | None = None):
    """Mean touch-point transmittance (positive sign) and its parameter gradients.

    The top-K selection is held constant during differentiation.
    Returns (loss, GradientSet, selection).
    """
    pts = touch_points.points if isinstance(touch_points, TouchPointSet) else np.asarray(touch_points)
    pts = pts.reshape(-1, 3)
    P = pts.shape[0]
    if P == 0:
        raise EmptyTouchSet("transmittance loss needs at least one touch point")
    if selection is None:
        selection = select_touch_gaussians(pts, gaussians, K, d_max, restrict_to_touch)
    grads = GradientSet.zeros(len(gaussians))
    pi, gi, cnt = selection.point, selection.gauss, selection.count
    empty = cnt == 0
    if len(pi) == 0:
        return 1.0, grads, selection

    touched, local = np.unique(gi, return_inverse=True)
    inv = cm.inverse_covariance_from_params(gaussians.rotations[touched], gaussians.log_scales[touched])
    r = pts[pi] - gaussians.means[gi]
    Sr = np.einsum("nij,nj->ni", inv[local], r)
    f = np.exp(-0.5 * np.sum(r * Sr, axis=1))
    op = gaussians.opacities[gi]
    t_hat = np.bincount(pi, 1.0 - f * op, minlength=P)
    t_hat = np.where(empty, 1.0, t_hat / np.maximum(cnt, 1))
    loss = float(np.mean(t_hat))

    # d loss / d (f * alpha) for each pair
    w = -1.0 / (P * cnt[pi])
    d_f = w * op
    d_op = w * f
    n = len(gaussians)
    for k in range(3):
        grads.means[:, k] = np.bincount(gi, d_f * f * Sr[:, k], minlength=n)
    # d f / d Sigma = 1/2 f Sigma^-1 r r^T Sigma^-1
    wf = 0.5 * d_f * f
    m = len(touched)
    d_cov = np.empty((m, 3, 3))
    for i in range(3):
        for j in range(i, 3):
            d_cov[:, i, j] = np.bincount(local, wf * Sr[:, i] * Sr[:, j], minlength=m)
            d_cov[:, j, i] = d_cov[:, i, j]
    d_rot, d_logs = cm.covariance_backward(gaussians.rotations[touched],
                                           gaussians.log_scales[touched], d_cov)
    grads.rotations[touched] = d_rot
    grads.log_scales[touched] = d_logs
    sig = gaussians.opacities
    grads.opacity_logits = np.bincount(gi, d_op, minlength=n) * sig * (1 - sig)
    return loss, grads, selection


# -- Sobel gradients ------------------------------------------------------------------

SOBEL_SMOOTH = np.array([1.0, 4.0, 6.0, 4.0, 1.0])
SOBEL_DERIV = np.array([-1.0, -2.0, 0.0, 2.0, 1.0])
# a unit ramp gives a response of 1
SOBEL_NORM = 1.0 / (SOBEL_SMOOTH.sum() * np.dot(SOBEL_DERIV, np.arange(-2, 3)))


def luminance(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        if image.shape[-1] == 3:
            return image @ np.array([0.299, 0.587, 0.114])
        if image.shape[-1] == 1:
            return image[..., 0]
    return image


def sobel_kernels_5x5():
    """(kx, ky) as full 5x5 correlation kernels; kx responds to increasing column index."""
    kx = np.outer(SOBEL_SMOOTH, SOBEL_DERIV) * SOBEL_NORM
    return kx, kx.T.copy()


def _sobel_2d(img):
    if img.shape[0] < 5 or img.shape[1] < 5:
        raise ImageTooSmall(f"Sobel 5x5 needs at least 5x5 pixels, got {img.shape}")
    p = np.pad(img, 2, mode="edge")
    s = ndimage.correlate1d(p, SOBEL_SMOOTH, axis=0, mode="constant")
    gx = ndimage.correlate1d(s, SOBEL_DERIV, axis=1, mode="constant")[2:-2, 2:-2]
    s = ndimage.correlate1d(p, SOBEL_SMOOTH, axis=1, mode="constant")
    gy = ndimage.correlate1d(s, SOBEL_DERIV, axis=0, mode="constant")[2:-2, 2:-2]
    return gx * SOBEL_NORM, gy * SOBEL_NORM


def sobel_gradients_5x5(image):
    """Horizontal and vertical 5x5 Sobel responses with replicate padding.

    Multi-channel input is reduced to luminance first; the output keeps a
    trailing channel axis of length 1 in that case.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        gx, gy = _sobel_2d(luminance(image))
        return gx[..., None], gy[..., None]
    return _sobel_2d(image)


def _sobel_adjoint(gx_bar, gy_bar):
    """Adjoint of the replicate-padded Sobel operator applied to (gx_bar, gy_bar)."""
    H, W = gx_bar.shape
    out_p = np.zeros((H + 4, W + 4))
    kx, ky = sobel_kernels_5x5()
    # adjoint of "valid correlation on padded input" is a full convolution
    for ker, bar in ((kx, gx_bar), (ky, gy_bar)):
        for i in range(5):
            for j in range(5):
                if ker[i, j] != 0:
                    out_p[i:i + H, j:j + W] += ker[i, j] * bar
    # fold the replicated border back onto the edge pixels
    out = out_p[2:-2, 2:-2].copy()
    out[0, :] += out_p[0:2, 2:-2].sum(axis=0)
    out[-1, :] += out_p[-2:, 2:-2].sum(axis=0)
    out[:, 0] += out_p[2:-2, 0:2].sum(axis=1)
    out[:, -1] += out_p[2:-2, -2:].sum(axis=1)
    out[0, 0] += out_p[0:2, 0:2].sum()
    out[0, -1] += out_p[0:2, -2:].sum()
    out[-1, 0] += out_p[-2:, 0:2].sum()
    out[-1, -1] += out_p[-2:, -2:].sum()
    return out


# -- proximity mask -----------------------------------------------------------------

OCCLUSION_MARGIN = 0.05


def project_touch_pixels(points, camera: Camera, rendered_depth, acc_alpha=None,
                         margin=OCCLUSION_MARGIN):
    """Integer pixel coordinates (row, col) of visible, unoccluded touch points.

    When ``acc_alpha`` is given, the occlusion test compares against the
    opacity-normalized depth and ignores pixels where nothing was rendered.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    uv, z = camera.project_points(points)
    ok = z > cm.NEAR_PLANE
    u = np.where(ok, np.rint(uv[:, 0]), -1).astype(np.int64)
    v = np.where(ok, np.rint(uv[:, 1]), -1).astype(np.int64)
    ok &= (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    u, v, z = u[ok], v[ok], z[ok]
    ref = np.asarray(rendered_depth, dtype=np.float64)[v, u]
    if acc_alpha is not None:
        acc = np.asarray(acc_alpha)[v, u]
        ref = np.where(acc > 0, ref / np.maximum(acc, 1e-12), np.inf)
    vis = z <= ref + margin
    return np.column_stack([v[vis], u[vis]])


def distance_to_seeds(shape, seeds):
    """Exact Euclidean distance from every pixel to the nearest seed pixel."""
    if len(seeds) == 0:
        return np.full(shape, np.inf)
    grid = np.ones(shape, dtype=bool)
    grid[seeds[:, 0], seeds[:, 1]] = False
    return ndimage.distance_transform_edt(grid)


def proximity_mask(touch_points, camera: Camera, rendered_depth, sigma_mask,
                   variant=MaskVariant.DECAY, acc_alpha=None) -> ProximityMask:
    variant = MaskVariant(variant)
    pts = touch_points.points if isinstance(touch_points, TouchPointSet) else touch_points
    shape = (camera.height, camera.width)
    seeds = project_touch_pixels(pts, camera, rendered_depth, acc_alpha)
    if len(seeds) == 0:
        return ProximityMask(np.ones(shape), variant)
    dist = distance_to_seeds(shape, seeds)
    if variant is MaskVariant.DECAY:
        if sigma_mask <= 0:
            w = (dist > 0).astype(np.float64)
        else:
            w = 1.0 - np.exp(-dist * dist / (2.0 * sigma_mask * sigma_mask))
    else:
        w = (dist > sigma_mask).astype(np.float64)
    return ProximityMask(w, variant)


# -- edge-aware smoothness ------------------------------------------------------------

def edge_aware_smoothness(depth, image, beta, mask=None):
    """Masked edge-aware depth smoothness and its gradient w.r.t. depth."""
    depth = np.asarray(depth, dtype=np.float64)
    lum = luminance(image)
    if lum.shape != depth.shape:
        raise ShapeMismatch(f"depth {depth.shape} vs image {lum.shape}")
    m = np.ones_like(depth) if mask is None else np.asarray(getattr(mask, "weights", mask))
    if m.shape != depth.shape:
        raise ShapeMismatch(f"mask {m.shape} vs depth {depth.shape}")
    n = depth.size
    dx, dy = _sobel_2d(depth)
    ix, iy = _sobel_2d(lum)
    wx = m * np.exp(-beta * np.abs(ix))
    wy = m * np.exp(-beta * np.abs(iy))
    loss = float(np.sum(np.abs(dx) * wx + np.abs(dy) * wy) / n)
    grad = _sobel_adjoint(np.sign(dx) * wx / n, np.sign(dy) * wy / n)
    return loss, grad
