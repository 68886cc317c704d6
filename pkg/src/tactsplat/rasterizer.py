"""Tile-based forward compositing of color/depth and its analytic backward pass.

Work is partitioned into horizontal bands of tiles (one tile row each). Inside
a band, every (pixel, Gaussian) pair whose pixel lies in the Gaussian's
screen-space extent is evaluated, sorted by pixel and global depth rank, and
composited front to back with segmented scans. Bands write disjoint pixels,
and gradient buffers are merged in band order, so results do not depend on
how many worker threads execute the bands.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import core_math as cm
from .core_math import Camera, GaussianSet, GradientSet

ALPHA_CUTOFF = 1.0 / 255.0
ALPHA_CLAMP = 0.99
T_EPSILON = 1e-4
EXTENT_SIGMA = 3.0


@dataclass
class Preprocessed:
    proj: cm.Projection
    covs: np.ndarray
    conic: np.ndarray       # (N, 3): a, b, c of the inverse dilated 2D covariance
    colors: np.ndarray      # (N, 3)
    opacity: np.ndarray     # (N,)
    rank: np.ndarray        # (N,) position in the global depth order
    bbox: np.ndarray        # (N, 4): x0, x1, y0, y1 inclusive pixel bounds
    visible: np.ndarray     # (N,) bool
    sh_degree: int


@dataclass
class BandContrib:
    """Composited (pixel, Gaussian) pairs of one tile band, sorted per pixel front to back."""

    pixel: np.ndarray       # flat pixel index
    gauss: np.ndarray
    px: np.ndarray
    py: np.ndarray
    f2d: np.ndarray
    alpha: np.ndarray
    t_before: np.ndarray
    clamped: np.ndarray

    def __len__(self):
        return self.pixel.shape[0]


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    acc_alpha: np.ndarray
    contrib: list = field(repr=False)
    pre: Preprocessed = field(repr=False, default=None)
    background: np.ndarray = field(repr=False, default=None)

    def pixel_contrib(self, row: int, col: int):
        """Ordered list of (gaussian index, f2D, alpha) for one pixel."""
        flat = row * self.color.shape[1] + col
        out = []
        for band in self.contrib:
            sel = band.pixel == flat
            out += list(zip(band.gauss[sel].tolist(), band.f2d[sel].tolist(), band.alpha[sel].tolist()))
        return out

    def culled_signature(self):
        """Hashable description of which pairs were composited and which were clamped."""
        parts = []
        for band in self.contrib:
            parts.append(np.stack([band.pixel, band.gauss, band.clamped.astype(np.int64)]).tobytes())
        return b"".join(parts)


def _conic(cov2d):
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    return np.column_stack([c / det, -b / det, a / det])


def preprocess(gaussians: GaussianSet, camera: Camera, sh_degree=cm.MAX_SH_DEGREE) -> Preprocessed:
    covs = gaussians.covariances()
    proj = cm.project_gaussians(gaussians.means, covs, camera)
    conic = _conic(proj.cov2d)
    dirs, _ = cm.view_directions(gaussians.means, camera)
    colors = cm.eval_sh_color(gaussians.sh_coeffs, dirs, sh_degree)
    opacity = gaussians.opacities

    # extent: 3 sigma, widened where needed so no pair with alpha >= cutoff falls outside
    with np.errstate(divide="ignore", invalid="ignore"):
        m2 = 2.0 * np.log(np.maximum(opacity, 1e-300) / ALPHA_CUTOFF)
    m = np.sqrt(np.maximum(m2, EXTENT_SIGMA ** 2))
    hx = m * np.sqrt(proj.cov2d[:, 0, 0])
    hy = m * np.sqrt(proj.cov2d[:, 1, 1])
    mx, my = proj.mean2d[:, 0], proj.mean2d[:, 1]
    x0 = np.maximum(np.ceil(mx - hx), 0)
    x1 = np.minimum(np.floor(mx + hx), camera.width - 1)
    y0 = np.maximum(np.ceil(my - hy), 0)
    y1 = np.minimum(np.floor(my + hy), camera.height - 1)
    visible = proj.valid & (m2 >= 0) & (x0 <= x1) & (y0 <= y1) & np.isfinite(mx) & np.isfinite(my)
    bbox = np.column_stack([x0, x1, y0, y1])
    bbox = np.where(visible[:, None], bbox, 0).astype(np.int64)

    order = np.argsort(np.where(visible, proj.depth, np.inf), kind="stable")
    rank = np.empty(len(order), dtype=np.int64)
    rank[order] = np.arange(len(order))
    return Preprocessed(proj, covs, conic, colors, opacity, rank, bbox, visible, sh_degree)


def _band_pairs(pre: Preprocessed, width: int, y_lo: int, y_hi: int):
    vis = np.nonzero(pre.visible & (pre.bbox[:, 2] <= y_hi) & (pre.bbox[:, 3] >= y_lo))[0]
    x0, x1 = pre.bbox[vis, 0], pre.bbox[vis, 1]
    y0 = np.maximum(pre.bbox[vis, 2], y_lo)
    y1 = np.minimum(pre.bbox[vis, 3], y_hi)
    w = x1 - x0 + 1
    cnt = w * (y1 - y0 + 1)
    total = int(cnt.sum())
    g = np.repeat(vis, cnt)
    start = np.repeat(np.cumsum(cnt) - cnt, cnt)
    local = np.arange(total) - start
    wr = np.repeat(w, cnt)
    px = np.repeat(x0, cnt) + local % wr
    py = np.repeat(y0, cnt) + local // wr
    return g, px, py


def _segment_starts(pixel):
    n = pixel.shape[0]
    first = np.ones(n, dtype=bool)
    first[1:] = pixel[1:] != pixel[:-1]
    return first


def _segmented_exclusive_cumsum(values, first):
    c = np.cumsum(values)
    idx = np.nonzero(first)[0]
    seg_id = np.cumsum(first) - 1
    base = (c[idx] - values[idx])[seg_id]
    return c - values - base


def _forward_band(pre: Preprocessed, width: int, y_lo: int, y_hi: int) -> BandContrib:
    g, px, py = _band_pairs(pre, width, y_lo, y_hi)
    dx = px - pre.proj.mean2d[g, 0]
    dy = py - pre.proj.mean2d[g, 1]
    a, b, c = pre.conic[g, 0], pre.conic[g, 1], pre.conic[g, 2]
    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
    f = np.exp(np.minimum(power, 0.0))
    raw = pre.opacity[g] * f
    alpha = np.minimum(raw, ALPHA_CLAMP)
    keep = (power <= 0) & (alpha >= ALPHA_CUTOFF)
    g, px, py, f, alpha, raw = g[keep], px[keep], py[keep], f[keep], alpha[keep], raw[keep]

    pixel = py * width + px
    # (pixel, depth rank) pairs are unique, so one integer key sorts them deterministically
    order = np.argsort(pixel * len(pre.rank) + pre.rank[g])
    g, px, py, f, alpha, raw, pixel = (arr[order] for arr in (g, px, py, f, alpha, raw, pixel))
    if pixel.shape[0] == 0:
        e = np.zeros(0)
        return BandContrib(pixel, g, px, py, e, e, e, np.zeros(0, dtype=bool))

    first = _segment_starts(pixel)
    log_t = np.log1p(-alpha)
    t_before = np.exp(_segmented_exclusive_cumsum(log_t, first))
    # compositing stops at the first pair that would push transmittance below T_EPSILON
    inc = t_before * (1.0 - alpha) >= T_EPSILON
    g, px, py, f, alpha, raw, pixel, t_before = (
        arr[inc] for arr in (g, px, py, f, alpha, raw, pixel, t_before))
    return BandContrib(pixel, g, px, py, f, alpha, t_before, raw > ALPHA_CLAMP)


def _bands(height: int, tile_size: int):
    return [(y, min(y + tile_size, height) - 1) for y in range(0, height, tile_size)]


def _run(fn, items, threads):
    if threads is None or threads <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(lambda it: fn(*it), items))


def rasterize(gaussians: GaussianSet, camera: Camera, tile_size: int = 16, background=None,
              sh_degree: int = cm.MAX_SH_DEGREE, threads: int = 1) -> RenderOutput:
    """Render color, depth (opacity-weighted, not normalized) and accumulated alpha."""
    H, W = camera.height, camera.width
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    pre = preprocess(gaussians, camera, sh_degree)
    bands = _bands(H, tile_size)
    contrib = _run(lambda lo, hi: _forward_band(pre, W, lo, hi), bands, threads)

    npix = H * W
    color = np.zeros((npix, 3))
    depth = np.zeros(npix)
    log_t_final = np.zeros(npix)
    for band in contrib:
        w = band.alpha * band.t_before
        for ch in range(3):
            color[:, ch] += np.bincount(band.pixel, w * pre.colors[band.gauss, ch], minlength=npix)
        depth += np.bincount(band.pixel, w * pre.proj.depth[band.gauss], minlength=npix)
        log_t_final += np.bincount(band.pixel, np.log1p(-band.alpha), minlength=npix)
    t_final = np.exp(log_t_final)
    color += t_final[:, None] * bg
    return RenderOutput(color.reshape(H, W, 3), depth.reshape(H, W), (1.0 - t_final).reshape(H, W),
                        contrib, pre, bg)


def render_depth_only(gaussians: GaussianSet, camera: Camera, tile_size: int = 16, threads: int = 1):
    out = rasterize(gaussians, camera, tile_size=tile_size, sh_degree=0, threads=threads)
    return out.depth


def _backward_band(band: BandContrib, pre: Preprocessed, render: RenderOutput, gc, gd, n: int):
    """Per-Gaussian gradient sums for one band: color, depth, opacity, mean2d, conic."""
    if len(band) == 0:
        return None
    pix = band.pixel
    w = band.alpha * band.t_before
    col = pre.colors[band.gauss]
    dep = pre.proj.depth[band.gauss]
    g_c = gc[pix]
    g_d = gd[pix]
    s_pair = np.einsum("ij,ij->i", col, g_c) + dep * g_d
    v = w * s_pair

    first = _segment_starts(pix)
    seg_id = np.cumsum(first) - 1
    seg_total = np.bincount(seg_id, v)
    after = seg_total[seg_id] - (_segmented_exclusive_cumsum(v, first) + v)
    t_final = 1.0 - render.acc_alpha.reshape(-1)[pix]
    after += t_final * (g_c @ render.background)
    d_alpha = band.t_before * s_pair - after / (1.0 - band.alpha)
    d_alpha[band.clamped] = 0.0

    gi = band.gauss
    mean2d = pre.proj.mean2d[gi]
    conic = pre.conic[gi]
    dx = band.px - mean2d[:, 0]
    dy = band.py - mean2d[:, 1]
    a, b, c = conic[:, 0], conic[:, 1], conic[:, 2]
    f = band.f2d
    gq = d_alpha * pre.opacity[gi] * f
    gqx, gqy = gq * dx, gq * dy
    cols = (w * g_c[:, 0], w * g_c[:, 1], w * g_c[:, 2],   # color
            w * g_d,                                         # depth
            d_alpha * f,                                     # opacity (sigmoid value)
            a * gqx + b * gqy, b * gqx + c * gqy,            # mean2d
            -0.5 * gqx * dx, -gqx * dy, -0.5 * gqy * dy)     # conic a, b, c
    out = np.empty((n, 10))
    for k, vals in enumerate(cols):
        out[:, k] = np.bincount(gi, vals, minlength=n)
    return out


def rasterize_backward(gaussians: GaussianSet, camera: Camera, render: RenderOutput,
                       dL_dcolor, dL_ddepth, threads: int = 1) -> GradientSet:
    """Exact gradients of composited color/depth for every Gaussian parameter.

    ``mean2d_norm`` on the result carries the norm of the screen-space mean
    gradient, expressed in normalized device units as used by densification.
    """
    pre = render.pre
    n = len(gaussians)
    H, W = camera.height, camera.width
    gc = np.asarray(dL_dcolor, dtype=np.float64).reshape(-1, 3)
    gd = np.asarray(dL_ddepth, dtype=np.float64).reshape(-1)

    parts = _run(lambda band: _backward_band(band, pre, render, gc, gd, n),
                 [(b,) for b in render.contrib], threads)
    acc = np.zeros((n, 10))
    for p in parts:
        if p is not None:
            acc += p

    d_color, d_depth, d_op = acc[:, 0:3], acc[:, 3], acc[:, 4]
    d_mean2d, d_conic = acc[:, 5:7], acc[:, 7:10]
    grads = GradientSet.zeros(n)
    vis = pre.visible
    if not np.any(vis):
        return grads
    idx = np.nonzero(vis)[0]

    # conic (inverse of dilated 2D covariance) -> 2D covariance
    a, b, c = pre.conic[idx, 0], pre.conic[idx, 1], pre.conic[idx, 2]
    Q = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    Gq = np.stack([np.stack([d_conic[idx, 0], 0.5 * d_conic[idx, 1]], -1),
                   np.stack([0.5 * d_conic[idx, 1], d_conic[idx, 2]], -1)], -2)
    d_cov2d = -Q @ Gq @ Q

    proj = pre.proj
    sub = cm.Projection(*(arr[idx] for arr in proj))
    d_means, d_cov3d = cm.projection_backward(sub, pre.covs[idx], camera,
                                              d_mean2d[idx], d_cov2d, d_depth[idx])
    d_rot, d_logs = cm.covariance_backward(gaussians.rotations[idx], gaussians.log_scales[idx], d_cov3d)
    d_sh, d_means_sh = cm.sh_color_backward(gaussians.sh_coeffs[idx], gaussians.means[idx], camera,
                                            pre.sh_degree, d_color[idx])
    op = pre.opacity[idx]

    grads.means[idx] = d_means + d_means_sh
    grads.rotations[idx] = d_rot
    grads.log_scales[idx] = d_logs
    grads.opacity_logits[idx] = d_op[idx] * op * (1.0 - op)
    grads.sh_coeffs[idx] = d_sh
    ndc = d_mean2d * np.array([0.5 * W, 0.5 * H])
    grads.mean2d_norm = np.linalg.norm(ndc, axis=1)
    return grads


def brute_force_composite(gaussians: GaussianSet, camera: Camera, background=None,
                          sh_degree: int = cm.MAX_SH_DEGREE):
    """Reference compositor: every pixel visits every Gaussian in global depth order.

    No tiling and no extent culling. Used as a test oracle.
    """
    H, W = camera.height, camera.width
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    covs = gaussians.covariances()
    proj = cm.project_gaussians(gaussians.means, covs, camera)
    dirs, _ = cm.view_directions(gaussians.means, camera)
    colors = cm.eval_sh_color(gaussians.sh_coeffs, dirs, sh_degree)
    opac = gaussians.opacities
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    T = np.ones((H, W))
    done = np.zeros((H, W), dtype=bool)
    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    order = np.argsort(np.where(proj.valid, proj.depth, np.inf), kind="stable")
    for i in order:
        if not proj.valid[i]:
            continue
        inv = np.linalg.inv(proj.cov2d[i])
        dx = xs - proj.mean2d[i, 0]
        dy = ys - proj.mean2d[i, 1]
        power = -0.5 * (inv[0, 0] * dx * dx + inv[1, 1] * dy * dy) - inv[0, 1] * dx * dy
        alpha = np.minimum(ALPHA_CLAMP, opac[i] * np.exp(power))
        use = ~done & (power <= 0) & (alpha >= ALPHA_CUTOFF)
        test_t = T * (1 - alpha)
        stop = use & (test_t < T_EPSILON)
        done |= stop
        use &= ~stop
        wgt = np.where(use, alpha * T, 0.0)
        color += wgt[..., None] * colors[i]
        depth += wgt * proj.depth[i]
        T = np.where(use, test_t, T)
    color += T[..., None] * bg
    return color, depth, 1.0 - T
