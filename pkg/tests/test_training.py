import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tactsplat import core_math as cm
from tactsplat import losses as L
from tactsplat import training as T
from tactsplat.errors import EmptyScene
from tactsplat.touch_sim import TouchPatch

import oracles


def patch(points, radius=0.1):
    return TouchPatch(np.eye(4), np.asarray(points, float), radius)


def camera(eye=(0.0, 0.0, -3.0), size=24, f=30.0):
    return cm.Camera(f, f, (size - 1) / 2, (size - 1) / 2, oracles.look_at(eye, up=(0, 1.0, 0)), size, size)


def test_vision_only_initialization():
    rng = np.random.default_rng(0)
    g = T.initialize_scene(rng.normal(size=(100, 3)), rng.random((100, 3)), [], T.TrainConfig())
    assert len(g) == 100 and g.counts() == (100, 0)


def test_touch_only_initialization_counts():
    rng = np.random.default_rng(1)
    patches = [patch(rng.normal(size=(200, 3))) for _ in range(25)]
    g = T.initialize_scene(None, None, patches, T.TrainConfig())
    assert g.counts() == (0, 5000)
    rgb = g.sh_coeffs[:, 0, :] * cm.SH_C0 + 0.5
    assert np.all((rgb >= -1e-12) & (rgb <= 1 + 1e-12))


def test_mixed_initialization_has_uniform_opacity_and_isotropic_vision_scales():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(30, 3))
    g = T.initialize_scene(pts, rng.random((30, 3)), [patch(rng.normal(size=(12, 3)))], T.TrainConfig())
    assert g.counts() == (30, 12)
    assert np.allclose(g.opacities, 0.1)
    v = g.log_scales[g.set_tag == cm.VISION]
    assert np.all(v[:, 0] == v[:, 1]) and np.all(v[:, 1] == v[:, 2])
    d = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
    d.sort(axis=1)
    assert np.allclose(np.exp(v[:, 0]), d[:, 1:4].mean(1), rtol=1e-12)


def test_touch_scales_jitter_around_patch_spacing():
    grid = np.stack(np.meshgrid(np.arange(5) * 0.02, np.arange(5) * 0.02, [0.0]), -1).reshape(-1, 3)
    g = T.initialize_scene(None, None, [patch(grid)], T.TrainConfig(touch_scale_jitter=0.2))
    s = np.exp(g.log_scales[:, 0])
    assert np.all((s >= 0.8 * 0.02 - 1e-12) & (s <= 1.2 * 0.02 + 1e-12))


def test_empty_initialization_raises():
    with pytest.raises(EmptyScene):
        T.initialize_scene(np.zeros((0, 3)), None, [], T.TrainConfig())


def tiny_problem(seed=0, n=20):
    rng = np.random.default_rng(seed)
    cams = [camera((0.3, -0.2, -3.0)), camera((-1.0, 0.4, -2.8))]
    target = cm.GaussianSet(rng.normal(0, 0.3, (n, 3)), rng.normal(size=(n, 4)),
                            rng.normal(-1.8, 0.2, (n, 3)), rng.normal(1, 0.5, n),
                            rng.normal(0, 0.4, (n, 16, 3)), np.zeros(n))
    from tactsplat.rasterizer import rasterize
    imgs = [np.clip(rasterize(target, c).color, 0, 1) for c in cams]
    init = target.copy()
    init.means = init.means + rng.normal(0, 0.05, init.means.shape)
    init.sh_coeffs = init.sh_coeffs * 0.5
    return init, cams, imgs, target


def short_config(**kw):
    base = dict(iterations=30, densify_from=5, densify_until=25, densify_interval=5, log_interval=1,
                sh_degree_interval=10, opacity_reset_interval=20)
    base.update(kw)
    return T.TrainConfig(**base)


def test_zero_weights_reproduce_the_baseline_path_bit_for_bit():
    init, cams, imgs, target = tiny_problem()
    touches = L.TouchPointSet(target.means[:5], np.zeros(5))
    base_cfg = short_config().for_mode("3dgs")
    a, _ = T.train(init, T.TrainData(cams, imgs), base_cfg)
    off = dataclasses.replace(short_config().for_mode("full"), lambda_S=0.0, lambda_T=0.0)
    b, _ = T.train(init, T.TrainData(cams, imgs, touches), off)
    for k in cm.GaussianSet.PARAMS + ("set_tag",):
        assert np.array_equal(getattr(a.gaussians, k), getattr(b.gaussians, k))


def test_training_is_deterministic():
    init, cams, imgs, target = tiny_problem(1)
    touches = L.TouchPointSet(target.means[:5], np.zeros(5))
    cfg = short_config(K=3).for_mode("full")
    a, ra = T.train(init, T.TrainData(cams, imgs, touches), cfg)
    b, rb = T.train(init, T.TrainData(cams, imgs, touches), dataclasses.replace(cfg, threads=3))
    assert ra == rb
    for k in cm.GaussianSet.PARAMS:
        assert np.array_equal(getattr(a.gaussians, k), getattr(b.gaussians, k))


def test_single_gaussian_color_loss_strictly_decreases():
    cam = camera()
    g = cm.GaussianSet([[0, 0, 0.0]], [[1.0, 0, 0, 0]], [[-1.0] * 3], [2.0], np.zeros((1, 16, 3)), [0])
    target = np.zeros((24, 24, 3))
    target[..., 0] = 0.8
    cfg = T.TrainConfig(iterations=50, lambda_photo_ssim=0.0, lr_means_init=1e-12, lr_means_final=1e-12,
                        lr_scales=1e-12, lr_rotations=1e-12, lr_opacity=1e-12, sh_degree=0,
                        densify_from=10 ** 9)
    state = T.TrainState.create(g, 1.0)
    data = T.TrainData([cam], [target])
    losses = [T.train_step(state, data, cfg)["L_photo"] for _ in range(50)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_large_touch_weight_raises_nearby_opacity():
    g = cm.GaussianSet([[0.02, 0, 0.0], [2.0, 2.0, 2.0]], [[1.0, 0, 0, 0]] * 2, [[-2.0] * 3] * 2,
                       [-1.0, -1.0], np.zeros((2, 16, 3)), [0, 0])
    cam = camera()
    img = np.zeros((24, 24, 3))
    # analytic sign: d(mean transmittance)/d(opacity) < 0 for a Gaussian near the touch
    _, gr, _ = L.transmittance_loss(np.zeros((1, 3)), g, 1, 0.5)

    def lt(x):
        h = g.copy()
        h.opacity_logits[0] = x
        return L.transmittance_loss(np.zeros((1, 3)), h, 1, 0.5)[0]

    fd = oracles.central_difference(lt, -1.0, 1e-6)
    assert gr.opacity_logits[0] < 0 and fd == pytest.approx(gr.opacity_logits[0], rel=1e-6)
    cfg = T.TrainConfig(lambda_T=100.0, K=1, d_max=0.5, densify_from=10 ** 9).for_mode("3dgs+t")
    state = T.TrainState.create(g, 1.0)
    data = T.TrainData([cam], [img], L.TouchPointSet(np.zeros((1, 3)), [0]))
    ops = [state.gaussians.opacities[0]]
    for _ in range(20):
        T.train_step(state, data, cfg)
        ops.append(state.gaussians.opacities[0])
    assert all(b > a for a, b in zip(ops, ops[1:]))


def state_with(n_vision, n_touch, seed=0):
    rng = np.random.default_rng(seed)
    n = n_vision + n_touch
    g = cm.GaussianSet(rng.normal(size=(n, 3)), rng.normal(size=(n, 4)), rng.normal(-3, 1, (n, 3)),
                       rng.normal(0, 1, n), rng.normal(size=(n, 16, 3)),
                       [cm.VISION] * n_vision + [cm.TOUCH] * n_touch)
    return T.TrainState.create(g, 1.0, seed)


def test_densify_without_triggers_only_resets_accumulators():
    st_ = state_with(5, 5)
    st_.gaussians.opacity_logits[:] = 2.0
    st_.grad_accum[:] = 1e-6
    st_.grad_count[:] = 1
    before = st_.gaussians.copy()
    T.densify_and_prune(st_, T.TrainConfig())
    for k in cm.GaussianSet.PARAMS:
        assert np.array_equal(getattr(before, k), getattr(st_.gaussians, k))
    assert np.all(st_.grad_accum == 0) and np.all(st_.grad_count == 0)


def test_split_touch_gaussian_yields_two_touch_children():
    st_ = state_with(3, 1)
    st_.gaussians.opacity_logits[:] = 2.0
    st_.gaussians.log_scales[3] = np.log(0.5)
    parent = st_.gaussians.subset([3])
    st_.grad_accum[3], st_.grad_count[3] = 1.0, 1
    T.densify_and_prune(st_, T.TrainConfig(scale_split_threshold=0.1))
    g = st_.gaussians
    assert g.counts() == (3, 2)
    kids = g.set_tag == cm.TOUCH
    assert np.allclose(g.log_scales[kids], parent.log_scales - np.log(1.6))
    assert not np.any(np.all(g.means == parent.means[0], axis=1))
    for d in (st_.exp_avg, st_.exp_avg_sq):
        assert all(np.all(d[k][kids] == 0) for k in d)


def test_clone_keeps_the_parent_and_adds_a_copy():
    st_ = state_with(2, 0)
    st_.gaussians.opacity_logits[:] = 2.0
    st_.gaussians.log_scales[:] = np.log(1e-3)
    st_.grad_accum[0], st_.grad_count[0] = 1.0, 1
    T.densify_and_prune(st_, T.TrainConfig(scale_split_threshold=0.1))
    assert len(st_.gaussians) == 3
    assert np.array_equal(st_.gaussians.means[2], st_.gaussians.means[0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_bookkeeping_survives_random_event_sequences(seed):
    rng = np.random.default_rng(seed)
    st_ = state_with(int(rng.integers(1, 20)), int(rng.integers(0, 20)), seed)
    model = list(st_.gaussians.set_tag)   # independent tag ledger: index -> tag
    cfg = T.TrainConfig(scale_split_threshold=0.05, opacity_prune_threshold=0.2)
    for _ in range(6):
        n = len(st_.gaussians)
        if n == 0:
            break
        ev = rng.integers(3)
        if ev == 0:
            st_.grad_accum = rng.random(n) * 4e-4
            st_.grad_count = rng.integers(0, 3, n).astype(float)
            g = st_.gaussians
            avg = np.where(st_.grad_count > 0, st_.grad_accum / np.maximum(st_.grad_count, 1), 0)
            high = avg >= cfg.densify_grad_threshold
            big = g.scales.max(1) > cfg.scale_split_threshold
            clone, split = high & ~big, high & big
            tags = model + [model[i] for i in np.nonzero(clone)[0]] + \
                [model[i] for i in np.repeat(np.nonzero(split)[0], 2)]
            T.densify_and_prune(st_, cfg)
            # pruning only drops rows; check the surviving multiset of tags is a sub-multiset
            assert st_.gaussians.counts()[0] <= tags.count(cm.VISION)
            assert st_.gaussians.counts()[1] <= tags.count(cm.TOUCH)
            model = list(st_.gaussians.set_tag)
        elif ev == 1:
            T.reset_opacity(st_)
            assert np.all(st_.gaussians.opacities <= 0.01 + 1e-12)
        else:
            st_.gaussians.opacity_logits = rng.normal(0, 2, n)
        st_.check()
        assert sum(st_.gaussians.counts()) == len(st_.gaussians)


def test_config_round_trips_through_text():
    cfg = T.TrainConfig(iterations=123, background=(0.1, 0.2, 0.3), d_max=0.25, random_background=True)
    assert T.TrainConfig.loads(cfg.dumps()) == cfg
    with pytest.raises(ValueError):
        T.TrainConfig.loads("no_such_key = 1")
    assert T.TrainConfig.loads("K = 3  # comment\n\nmask_variant = threshold").K == 3


def test_mode_gating():
    cfg = T.TrainConfig(lambda_S=0.3, lambda_T=0.7)
    table = {m: cfg.for_mode(m) for m in T.MODES}
    assert (table["3dgs"].lambda_S, table["3dgs"].lambda_T) == (0, 0)
    assert (table["3dgs+s"].lambda_S, table["3dgs+s"].lambda_T, table["3dgs+s"].use_proximity_mask) == (0.3, 0, False)
    assert (table["3dgs+t"].lambda_S, table["3dgs+t"].lambda_T) == (0, 0.7)
    assert (table["full"].lambda_S, table["full"].lambda_T, table["full"].use_proximity_mask) == (0.3, 0.7, True)
    with pytest.raises(ValueError):
        cfg.for_mode("nerf")


def test_means_learning_rate_decays_log_linearly():
    cfg = T.TrainConfig(iterations=100)
    assert T.means_lr(cfg, 0, 2.0) == pytest.approx(2 * 1.6e-4)
    assert T.means_lr(cfg, 100, 2.0) == pytest.approx(2 * 1.6e-6)
    assert T.means_lr(cfg, 50, 1.0) == pytest.approx(1.6e-5)


def test_loss_log_has_the_documented_columns(tmp_path):
    init, cams, imgs, _ = tiny_problem(2)
    _, rows = T.train(init, T.TrainData(cams, imgs), short_config(iterations=5), log_path=tmp_path / "l.csv")
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0] == ",".join(T.LOG_FIELDS) and len(lines) == 6
    assert all(np.isfinite(r[1]) for r in rows)
