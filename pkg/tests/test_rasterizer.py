import numpy as np
import pytest

from tactsplat import core_math as cm
from tactsplat.rasterizer import (ALPHA_CLAMP, brute_force_composite, rasterize, rasterize_backward,
                                  render_depth_only)

import oracles


def camera(eye=(0.3, -0.2, -4.0), size=32, f=40.0):
    return cm.Camera(f, f, (size - 1) / 2, (size - 1) / 2,
                     oracles.look_at(eye, up=(0.0, 1.0, 0.0)), size, size)


def random_scene(rng, n, spread=0.5, log_scale=-2.0):
    return cm.GaussianSet(rng.normal(0, spread, (n, 3)), rng.normal(size=(n, 4)),
                          rng.normal(log_scale, 0.4, (n, 3)), rng.normal(0, 1.5, n),
                          rng.normal(0, 0.5, (n, 16, 3)), np.zeros(n))


def single(mean, log_scale, opacity_logit, rgb):
    sh = np.zeros((1, 16, 3))
    sh[0, 0] = cm.rgb_to_sh_dc(rgb)
    return cm.GaussianSet(np.array([mean], float), [[1.0, 0, 0, 0]], np.full((1, 3), log_scale),
                          [opacity_logit], sh, [0])


def test_single_opaque_gaussian_hits_clamp():
    cam = camera(eye=(0, 0, -4.0), size=33)
    g = single([0, 0, 0], -1.0, 30.0, [0.2, 0.6, 0.9])
    bg = np.array([1.0, 0.5, 0.0])
    out = rasterize(g, cam, background=bg)
    c = int(cam.cx)
    assert np.allclose(out.color[c, c], ALPHA_CLAMP * np.array([0.2, 0.6, 0.9]) + 0.01 * bg, atol=1e-12)
    assert out.depth[c, c] == pytest.approx(ALPHA_CLAMP * 4.0, abs=1e-12)


def test_two_coincident_half_alpha_gaussians():
    cam = camera(eye=(0, 0, -4.0), size=33)
    a = single([0, 0, 0], 0.0, 0.0, [1.0, 0.0, 0.0])
    b = single([0, 0, 1e-9], 0.0, 0.0, [0.0, 1.0, 0.0])   # nudged behind so order is defined
    g = cm.GaussianSet.concat([a, b])
    bg = np.array([0.0, 0.0, 1.0])
    out = rasterize(g, cam, background=bg)
    c = int(cam.cx)
    # f2D is 1 at the exact projected center; alpha = 0.5 each
    assert np.allclose(out.color[c, c], [0.5, 0.25, 0.25], atol=1e-9)


def test_empty_scene_gives_background_and_zero_depth():
    cam = camera()
    g = single([0, 0, -10], -1.0, 3.0, [1, 1, 1])   # behind the camera
    out = rasterize(g, cam, background=[0.1, 0.2, 0.3])
    assert np.allclose(out.color, [0.1, 0.2, 0.3])
    assert np.all(out.depth == 0) and np.all(out.acc_alpha == 0)


def test_opaque_wall_depth_is_opacity_weighted():
    cam = camera(eye=(0, 0, -2.0), size=33)
    xs, ys = np.meshgrid(np.linspace(-1, 1, 25), np.linspace(-1, 1, 25))
    n = xs.size
    means = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(n)])
    g = cm.GaussianSet(means, np.tile([1.0, 0, 0, 0], (n, 1)), np.full((n, 3), np.log(0.08)),
                       np.full(n, 6.0), np.zeros((n, 16, 3)), np.zeros(n))
    out = rasterize(g, cam)
    c = int(cam.cx)
    assert out.depth[c, c] == pytest.approx(2.0 * out.acc_alpha[c, c], rel=0.01)


def test_tiled_matches_pixelwise_oracle():
    rng = np.random.default_rng(0)
    cam = camera(size=20, f=25.0)
    for _ in range(3):
        g = random_scene(rng, 12)
        out = rasterize(g, cam, tile_size=8, background=[0.2, 0.1, 0.4])
        img, dep, acc = oracles.composite_pixelwise(g, cam, background=[0.2, 0.1, 0.4])
        assert np.abs(out.color - img).max() < 1e-10
        assert np.abs(out.depth - dep).max() < 1e-10
        assert np.abs(out.acc_alpha - acc).max() < 1e-10


@pytest.mark.parametrize("tile", [4, 16, 64])
def test_tile_size_does_not_change_the_image(tile):
    rng = np.random.default_rng(1)
    cam = camera()
    g = random_scene(rng, 30)
    ref, dref, _ = brute_force_composite(g, cam)
    out = rasterize(g, cam, tile_size=tile)
    assert np.abs(out.color - ref).max() < 1e-12
    assert np.abs(out.depth - dref).max() < 1e-12


def test_output_ranges():
    rng = np.random.default_rng(2)
    cam = camera()
    out = rasterize(random_scene(rng, 40), cam)
    assert out.acc_alpha.min() >= 0 and out.acc_alpha.max() <= 1
    assert np.all(out.depth[out.acc_alpha == 0] == 0)
    assert np.all(np.isfinite(out.color))


def test_depth_only_matches_full_render():
    rng = np.random.default_rng(3)
    cam = camera()
    g = random_scene(rng, 20)
    assert np.array_equal(render_depth_only(g, cam), rasterize(g, cam).depth)


def test_acc_alpha_monotone_in_opacity():
    rng = np.random.default_rng(4)
    cam = camera()
    g = random_scene(rng, 25)
    base = rasterize(g, cam).acc_alpha
    for i in range(0, 25, 5):
        h = g.copy()
        h.opacity_logits[i] += 0.5
        assert np.all(rasterize(h, cam).acc_alpha >= base - 1e-12)


def test_threads_give_identical_results():
    rng = np.random.default_rng(5)
    cam = camera(size=48)
    g = random_scene(rng, 60)
    a = rasterize(g, cam, tile_size=8, threads=1)
    b = rasterize(g, cam, tile_size=8, threads=4)
    assert np.array_equal(a.color, b.color) and np.array_equal(a.depth, b.depth)
    wc = rng.normal(size=a.color.shape)
    wd = rng.normal(size=a.depth.shape)
    ga = rasterize_backward(g, cam, a, wc, wd, threads=1)
    gb = rasterize_backward(g, cam, b, wc, wd, threads=4)
    for k in cm.GaussianSet.PARAMS:
        assert np.array_equal(getattr(ga, k), getattr(gb, k))


def test_contrib_list_is_front_to_back():
    rng = np.random.default_rng(6)
    cam = camera()
    g = random_scene(rng, 30)
    out = rasterize(g, cam)
    depth = out.pre.proj.depth
    for r, c in [(16, 16), (10, 20), (5, 5)]:
        ids = [i for i, _, _ in out.pixel_contrib(r, c)]
        assert all(depth[a] <= depth[b] for a, b in zip(ids, ids[1:]))


def fd_check(g, cam, rng, h=1e-6, rel=1e-4, floor=1e-6):
    """Central differences of a random linear functional of color and depth."""
    out = rasterize(g, cam)
    wc = rng.normal(size=out.color.shape)
    wd = rng.normal(size=out.depth.shape)
    grads = rasterize_backward(g, cam, out, wc, wd)
    sig = out.culled_signature()
    worst, checked = 0.0, 0

    def loss(gg):
        o = rasterize(gg, cam)
        return np.sum(o.color * wc) + np.sum(o.depth * wd), o.culled_signature()

    for name in cm.GaussianSet.PARAMS:
        arr = getattr(g, name)
        for idx in np.ndindex(arr.shape):
            gp, gm = g.copy(), g.copy()
            getattr(gp, name)[idx] += h
            getattr(gm, name)[idx] -= h
            lp, sp = loss(gp)
            lm, sm = loss(gm)
            if sp != sig or sm != sig:
                continue   # a pair crossed the cutoff, clamp or early-stop boundary
            fd = (lp - lm) / (2 * h)
            err = abs(fd - getattr(grads, name)[idx]) / max(abs(fd), floor)
            worst = max(worst, err)
            checked += 1
    return worst, checked


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(7)
    cam = camera(size=16, f=20.0)
    g = random_scene(rng, 5)
    worst, checked = fd_check(g, cam, rng)
    assert checked > 0.8 * 5 * 59
    assert worst < 1e-4


def test_mean2d_norm_is_reported_for_every_gaussian():
    rng = np.random.default_rng(8)
    cam = camera()
    g = random_scene(rng, 10)
    out = rasterize(g, cam)
    gr = rasterize_backward(g, cam, out, np.ones_like(out.color), np.zeros_like(out.depth))
    assert gr.mean2d_norm.shape == (10,) and np.all(gr.mean2d_norm >= 0)
