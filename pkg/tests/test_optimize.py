import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from glosskit.optimize import ALL_GROUPS, GEOMETRY_GROUPS, MATERIAL_GROUPS, SceneParams, TrainConfig, View, \
    alpha_loss, grad_check, normal_loss, photometric_loss, psnr, ssim, stage_groups, stage_weights, total_loss, \
    train
from glosskit.rasterize import Camera, RenderBuffers, render
from glosskit.raytrace import precompute_visibility
from glosskit.surfel import Scene
from glosskit.synthetic import init_sphere, make_dataset, one_surfel, one_surfel_camera, orbit_cameras, \
    perturb_appearance, random_scene, studio_env, tinted_env

from conftest import make_surfel

D = torch.float64


def img(rng, h=12, w=12):
    return torch.as_tensor(rng.uniform(0, 1, (h, w, 3)), dtype=D)


def ssim_oracle(x, y, size=11, sigma=1.5):
    """Direct windowed sums with zero padding outside the image."""
    x, y = np.asarray(x), np.asarray(y)
    H, W, C = x.shape
    r = size // 2
    g = np.exp(-np.arange(-r, r + 1) ** 2 / (2 * sigma**2))
    g /= g.sum()
    w = np.outer(g, g)
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for c in range(C):
        for i in range(H):
            for j in range(W):
                mx = my = sxx = syy = sxy = 0.0
                for di in range(-r, r + 1):
                    for dj in range(-r, r + 1):
                        ii, jj = i + di, j + dj
                        if 0 <= ii < H and 0 <= jj < W:
                            k = w[di + r, dj + r]
                            a, b = x[ii, jj, c], y[ii, jj, c]
                            mx += k * a
                            my += k * b
                            sxx += k * a * a
                            syy += k * b * b
                            sxy += k * a * b
                sxx -= mx * mx
                syy -= my * my
                sxy -= mx * my
                vals.append((2 * mx * my + c1) * (2 * sxy + c2) / ((mx * mx + my * my + c1) * (sxx + syy + c2)))
    return float(np.mean(vals))


# ---------------------------------------------------------------- image losses


def test_photometric_examples(rng):
    a = img(rng)
    assert float(photometric_loss(a, a)) == 0.0
    assert float(photometric_loss(a, a + 0.1, lambda_dssim=0.0)) == pytest.approx(0.1)
    assert float(ssim(a, a)) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        photometric_loss(a, img(rng, 10, 12))


def test_photometric_mix(rng):
    a, b = img(rng), img(rng)
    l1 = float((a - b).abs().mean())
    want = 0.8 * l1 + 0.2 * (1 - ssim_oracle(a, b))
    assert float(photometric_loss(a, b)) == pytest.approx(want, abs=1e-9)


def test_ssim_matches_loop_oracle(rng):
    a, b = img(rng, 9, 13), img(rng, 9, 13)
    assert float(ssim(a, b)) == pytest.approx(ssim_oracle(a, b), abs=1e-6)
    c = (a * 0.7 + 0.1).clamp(0, 1)
    assert float(ssim(a, c)) == pytest.approx(ssim_oracle(a, c), abs=1e-6)


def test_alpha_loss_examples():
    o = torch.tensor([[0.0, 0.5], [1.0, 0.25]], dtype=D)
    m = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=D)
    assert float(alpha_loss(o, m)) == pytest.approx((0 + 0.5 + 0 + 0.25) / 4)
    assert float(alpha_loss(m, m)) == 0.0
    with pytest.raises(ValueError):
        alpha_loss(o, torch.zeros(3, 3))


def test_psnr():
    a = torch.zeros(4, 4, 3, dtype=D)
    assert psnr(a, a) == math.inf
    assert psnr(a, a + 0.1) == pytest.approx(20.0)


# ---------------------------------------------------------------- normal loss


def flat_buffers(cam, weights, normals, depth=2.0):
    H, W = cam.height, cam.width
    return RenderBuffers(
        color=torch.zeros(H, W, 3, dtype=D),
        depth=torch.full((H, W), depth, dtype=D),
        normal=torch.zeros(H, W, 3, dtype=D),
        opacity=torch.ones(H, W, dtype=D),
        splat_weights=torch.as_tensor(weights, dtype=D),
        splat_normals=torch.as_tensor(normals, dtype=D),
    )


def test_normal_loss_planar_is_zero():
    cam = Camera.look_at((0.0, 0.0, 3.0), (0, 0, 0), up=(0.0, 1.0, 0.0), fov_x=math.radians(30), width=12, height=12)
    s = make_surfel(position=(0, 0, 0), su=3.0, sv=3.0, opacity=0.99)
    b = render(Scene.from_surfels([s]), cam, studio_env())
    assert float(normal_loss(b, cam)) == pytest.approx(0.0, abs=1e-9)


def test_normal_loss_orthogonal_is_one():
    cam = Camera.look_at((0.0, 0.0, 3.0), (0, 0, 0), up=(0.0, 1.0, 0.0), width=6, height=6)
    n = np.zeros((36, 1, 3))
    n[..., 0] = 1.0
    b = flat_buffers(cam, np.ones((36, 1)), n)
    assert float(normal_loss(b, cam)) == pytest.approx(1.0, abs=1e-12)


def test_normal_loss_matches_per_splat_sum(rng):
    cam = Camera.look_at((0.5, 1.0, 3.0), (0, 0, 0), width=7, height=5)
    K = 4
    w = rng.uniform(0, 0.25, (35, K))
    n = rng.normal(size=(35, K, 3))
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    b = flat_buffers(cam, w, n)
    facing = -cam.forward
    want = np.mean([sum(w[p, k] * (1 - n[p, k] @ facing) for k in range(K)) for p in range(35)])
    assert float(normal_loss(b, cam)) == pytest.approx(want, abs=1e-9)


def test_normal_loss_ignores_low_opacity():
    cam = Camera.look_at((0.0, 0.0, 3.0), (0, 0, 0), up=(0.0, 1.0, 0.0), width=6, height=6)
    n = np.zeros((36, 1, 3))
    n[..., 0] = 1.0
    b = flat_buffers(cam, np.ones((36, 1)), n)
    b.opacity = torch.full((6, 6), 0.3, dtype=D)
    assert float(normal_loss(b, cam)) == 0.0


# ---------------------------------------------------------------- total loss and stages


@given(st.floats(0, 5), st.floats(0, 5), st.floats(0, 5), st.floats(0, 2), st.floats(0, 2), st.floats(0, 2))
def test_total_loss_is_linear(p, n, l, wn, wl, wa):
    t = lambda x: torch.tensor(x, dtype=D)  # noqa: E731
    terms = {"photometric": t(p), "normal": t(n), "light": t(l), "alpha": t(0.5)}
    total, report = total_loss(terms, {"normal": wn, "light": wl, "alpha": wa})
    assert float(total) == pytest.approx(p + wn * n + wl * l + wa * 0.5, rel=1e-12, abs=1e-12)
    assert report.photometric == p and report.normal == n


def test_stage_gating():
    c = TrainConfig()
    assert stage_weights(c, 1) == {"normal": 0.0, "light": 0.0, "alpha": c.lambda_alpha}
    assert stage_weights(c, 2)["normal"] == c.lambda_normal and stage_weights(c, 2)["light"] == 0.0
    assert stage_weights(c, 3)["light"] == c.lambda_light and stage_weights(c, 3)["normal"] == 0.0
    assert stage_groups(c, 1) == GEOMETRY_GROUPS + ("diffuse_sh",)
    assert set(stage_groups(c, 3)) == set(MATERIAL_GROUPS) | {"environment"}
    assert "environment" not in stage_groups(c, 2)
    off = TrainConfig(normal_loss=False)
    assert stage_weights(off, 2)["normal"] == 0.0
    flat = TrainConfig(phased=False)
    assert stage_groups(flat, 1) == ALL_GROUPS


def test_config_validation_and_scaling():
    assert TrainConfig(iters_scale=0.01).stage_lengths() == (70, 180, 150)
    with pytest.raises(KeyError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        TrainConfig(lr={"nothing": 1.0})
    with pytest.raises(ValueError):
        TrainConfig(stage1_iters=-1)
    c = TrainConfig.from_dict({"lr": {"roughness": 0.1}})
    assert c.lr["roughness"] == 0.1 and c.lr["position"] == TrainConfig().lr["position"]


# ---------------------------------------------------------------- parameters


huge = st.floats(-60, 60)


@settings(max_examples=30, deadline=None)
@given(huge, huge, huge, huge, st.floats(-1e3, 1e3))
def test_reparameterization_stays_in_domain(r, f, o, s, e):
    params = SceneParams(random_scene(3, seed=1), studio_env())
    with torch.no_grad():
        params.group("roughness")[0].fill_(r)
        params.group("specular")[0].fill_(f)
        params.group("opacity")[0].fill_(o)
        params.group("scale")[0].fill_(max(min(s, 20.0), -20.0))
        params.group("environment")[0].fill_(e)
    scene, env = params.materialize()
    assert bool((scene.roughness >= 1e-3).all()) and bool((scene.roughness <= 1).all())
    assert bool((scene.specular >= 0).all()) and bool((scene.specular <= 1).all())
    assert bool((scene.opacity >= 0).all()) and bool((scene.opacity <= 1).all())
    assert bool((scene.scales > 0).all())
    assert bool((env.radiance >= 0).all()) and bool(torch.isfinite(env.radiance).all())


def test_params_round_trip():
    scene, env = random_scene(10, seed=4), studio_env()
    s2, e2 = SceneParams(scene, env).snapshot()
    for k in ("positions", "tangent_u", "scales", "opacity", "roughness", "specular", "diffuse_sh"):
        assert torch.allclose(getattr(s2, k), getattr(scene, k), atol=1e-6)
    assert torch.allclose(e2.radiance, env.radiance, atol=1e-6)


# ---------------------------------------------------------------- training


@pytest.fixture(scope="module")
def small_problem():
    truth = random_scene(12, seed=21, extent=0.5)
    env = studio_env()
    views = make_dataset(truth, env, orbit_cameras(3, width=12, height=12), ns=16)
    return truth, env, views


def cfg(n1, n2, n3, **kw):
    return TrainConfig(stage1_iters=n1, stage2_iters=n2, stage3_iters=n3, ns=16, **kw)


def test_zero_iterations_returns_input(small_problem):
    truth, env, views = small_problem
    res = train(truth, env, views, cfg(0, 0, 0))
    assert res.history == []
    assert torch.allclose(res.scene.positions, truth.positions, atol=1e-12)
    assert torch.allclose(res.scene.roughness, truth.roughness, atol=1e-6)


def test_training_is_deterministic(small_problem):
    truth, env, views = small_problem
    start = init_sphere(12, radius=0.5)
    a = train(start, env, views, cfg(3, 2, 2))
    b = train(start, env, views, cfg(3, 2, 2))
    assert [r.total for r in a.history] == [r.total for r in b.history]
    assert torch.equal(a.scene.positions, b.scene.positions)
    assert torch.equal(a.env.radiance, b.env.radiance)


def test_stage_three_freezes_geometry(small_problem):
    truth, env, views = small_problem
    start, env0 = perturb_appearance(truth, env, seed=2)
    res = train(start, env0, views, cfg(0, 0, 4))
    s0, _ = SceneParams(start, env0).snapshot()
    for k in ("positions", "tangent_u", "tangent_v", "scales", "opacity"):
        assert torch.equal(getattr(res.scene, k), getattr(s0, k))
    assert not torch.equal(res.scene.roughness, s0.roughness)
    assert not torch.equal(res.env.radiance, env0.radiance)


def test_empty_or_mixed_dataset_rejected(small_problem):
    truth, env, views = small_problem
    with pytest.raises(ValueError):
        train(truth, env, [], cfg(1, 0, 0))
    other = View(torch.zeros(5, 5, 3, dtype=D), views[0].camera)
    with pytest.raises(ValueError):
        train(truth, env, views + [other], cfg(1, 0, 0))


def test_material_refit_descends_monotonically(small_problem):
    truth, env, views = small_problem
    start, env0 = perturb_appearance(truth, env, seed=2)
    vis = precompute_visibility(start, ns=16)

    def dataset_loss(scene, e):
        with torch.no_grad():
            return np.mean([float(photometric_loss(render(scene, v.camera, e, vis, ns=16).color, v.image))
                            for v in views])

    curve = [dataset_loss(start, env0)]

    def every_ten(it, params, rep):
        if it % 10 == 9:
            curve.append(dataset_loss(*params.snapshot()))

    train(start, env0, views, cfg(0, 0, 90), callback=every_ten)
    # loss over all views, sampled every 10 steps, through the descent phase
    assert all(b <= a for a, b in zip(curve, curve[1:])), curve
    assert curve[-1] < 0.1 * curve[0]


def test_callback_sees_every_iteration(small_problem):
    truth, env, views = small_problem
    seen = []
    train(truth, env, views, cfg(2, 1, 1), callback=lambda it, p, r: seen.append((it, r.stage)))
    assert seen == [(0, 1), (1, 1), (2, 2), (3, 3)]


# ---------------------------------------------------------------- gradient check


@pytest.fixture(scope="module")
def surfel_problem():
    scene = one_surfel(f0=0.1)
    cam = one_surfel_camera(10)
    env = tinted_env()
    s_t, e_t = perturb_appearance(scene, env, seed=1)
    target = render(s_t, cam, e_t).color.detach()
    return scene, env, cam, target


def test_grad_check_diffuse_is_exact(surfel_problem):
    scene, env, cam, target = surfel_problem
    rep = grad_check(scene, env, cam, target, groups=("diffuse_sh",), coords_per_group=8)
    assert rep.groups[0].checked > 0
    assert rep.groups[0].max_rel_error < 1e-6


def test_grad_check_roughness(surfel_problem):
    scene, env, cam, target = surfel_problem
    rep = grad_check(scene, env, cam, target, groups=("roughness", "specular"))
    assert rep.passed, rep.lines()


def test_grad_check_frozen_groups_have_zero_gradient(surfel_problem):
    scene, env, cam, target = surfel_problem
    rep = grad_check(scene, env, cam, target, groups=("roughness", "position"), frozen=("position",))
    assert rep.frozen_grad_max == 0.0
    assert rep.groups[1].frozen
    assert "frozen" in rep.lines()[1]


def test_grad_check_catches_broken_gradient(surfel_problem):
    scene, env, cam, target = surfel_problem

    def broken(terms, weights):
        p = terms["photometric"]
        return p + 0.5 * p.detach() * 0 + (p - p.detach()) * 0.5

    rep = grad_check(scene, env, cam, target, groups=("diffuse_sh",), loss_fn=broken)
    assert not rep.passed
    assert rep.groups[0].max_rel_error == pytest.approx(0.5, rel=1e-3)
