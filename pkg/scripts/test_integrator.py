"""
测试多次蒙特卡洛积分器

白炉测试、确定性 (与 worker 数无关)、tape 重放一致性、遮挡与缓存行为、PSNR。
"""

import math
import time

import numpy as np
import pytest
import torch

from app.models import RenderConfig
from conftest import lambert_config, make_params
from scripts.assets import Texture2D
from scripts.errors import DataError
from scripts.geometry import look_at, make_box, make_plane, merge_meshes, trace
from scripts.integrator import (
    bake_diffuse_cache,
    estimate_radiance,
    firefly_clamp,
    leaf_tensors,
    psnr,
    render,
    render_reference,
    resolve_workers,
    shade_direct,
    shade_indirect,
    shade_tape,
    surface_points,
)
from scripts.rng import Rng
from scripts.scene import Scene

PLANE_KD = np.array([0.5, 0.4, 0.3])


@pytest.fixture(autouse=True)
def _no_thread_cap(monkeypatch):
    monkeypatch.delenv("REFMC_THREADS", raising=False)


def _down_rays(count, seed=0):
    """从平面正上方竖直向下的光线"""
    xy = Rng(seed).uniform((count, 2)) - 0.5
    origins = np.concatenate([xy, np.ones((count, 1))], axis=-1)
    dirs = np.tile([0.0, 0.0, -1.0], (count, 1))
    return origins, dirs


def _interior(hit):
    """四邻域都命中的像素 (排除轮廓处部分命中的像素)"""
    inner = hit.copy()
    for axis in (0, 1):
        for shift in (1, -1):
            inner &= np.roll(hit, shift, axis=axis)
    return inner


def _background(hit):
    """四邻域都未命中的像素"""
    return _interior(~hit)


# ============================================================================
# 白炉测试
# ============================================================================


def test_furnace_diffuse_sphere(sphere_scene):
    """常量白色环境光下，albedo 0.7 的凸 Lambert 球处处辐亮度为 0.7"""
    image = render(sphere_scene, sphere_scene.cameras[0], lambert_config(spp=16), seed=1)
    inner = _interior(image.hit)
    assert inner.sum() > 30
    assert abs(image.radiance[inner].mean() - 0.7) < 0.7 * 0.04
    # 背景像素直接显示环境光
    assert np.allclose(image.radiance[_background(image.hit)], 1.0)
    assert np.all(image.sample_count == 16)


def test_furnace_reference_agrees(sphere_scene):
    """对照路径追踪器在同一场景得到同样的均值"""
    camera = sphere_scene.cameras[0]
    ref = render_reference(sphere_scene, camera, depth=1, spp=32, seed=2, disney_primary=False, specular=False)
    hit = render(sphere_scene, camera, lambert_config(spp=1), seed=0).hit
    inner = _interior(hit)
    assert abs(ref[inner].mean() - 0.7) < 0.7 * 0.05
    assert np.allclose(ref[_background(hit)], 1.0)


def test_empty_scene_shows_environment():
    """空场景: 每个像素都等于环境光"""
    params = make_params(env=(0.3, 0.5, 0.7))
    camera = look_at((0.0, -3.0, 0.0), (0.0, 0.0, 0.0), width=8, height=6)
    scene = Scene.build(None, params, [camera])
    image = render(scene, camera, RenderConfig(spp=2, workers=1), seed=0)
    assert image.radiance.shape == (6, 8, 3)
    assert np.allclose(image.radiance, [0.3, 0.5, 0.7])
    assert not image.hit.any()
    assert np.all(image.diffuse == 0.0)


# ============================================================================
# 单点估计
# ============================================================================


def test_estimate_radiance_plane(plane_scene):
    """无遮挡的 Lambert 平面: 出射辐亮度 = k_d"""
    origins, dirs = _down_rays(4000)
    radiance, diffuse, nan_count = estimate_radiance(plane_scene, origins, dirs, lambert_config(), Rng(5))
    assert nan_count == 0
    assert np.allclose(radiance.mean(axis=0), PLANE_KD, rtol=0.03)
    assert np.allclose(diffuse.mean(axis=0), PLANE_KD, rtol=0.03)


def test_estimate_radiance_miss_returns_env(plane_scene):
    origins = np.array([[0.0, 0.0, 1.0]])
    dirs = np.array([[0.0, 0.0, 1.0]])
    radiance, diffuse, _ = estimate_radiance(plane_scene, origins, dirs)
    assert np.allclose(radiance, 1.0)
    assert np.all(diffuse == 0.0)


def test_shade_direct_lambert_matches_diffuse(plane_scene):
    """纯 Lambert 时一次着色辐亮度与 C_diff 逐点相同"""
    origins, dirs = _down_rays(500, seed=1)
    hit = trace(plane_scene.bvh, plane_scene.mesh, origins, dirs)
    assert hit.valid.all()
    sp = surface_points(hit, hit.valid, -dirs)
    radiance, diffuse = shade_direct(plane_scene, sp, lambert_config(), Rng(3))
    assert radiance.shape == (500, 3)
    assert np.allclose(radiance, diffuse)
    assert np.allclose(radiance.mean(axis=0), PLANE_KD, rtol=0.05)


def test_shade_direct_occluded_samples_are_dark():
    """depth = 1 时被遮挡的样本贡献为 0: 低矮天花板下的地面几乎全黑"""
    floor = make_plane((0.0, 0.0, 0.0), (4.0, 4.0), 2)
    ceiling = make_plane((0.0, 0.0, 0.5), (4.0, 4.0), 2, flip=True)
    scene = Scene.build(merge_meshes([floor, ceiling]), make_params(layers=2), [])
    origins, dirs = _down_rays(300)
    origins[:, 2] = 0.25
    hit = trace(scene.bvh, scene.mesh, origins, dirs)
    assert hit.valid.all()
    assert np.all(hit.material_id == 0)
    sp = surface_points(hit, hit.valid, -dirs)
    radiance, _ = shade_direct(scene, sp, lambert_config(), Rng(0))
    # 天花板遮住九成以上的余弦加权立体角
    assert radiance.mean() < 0.7 * 0.15
    assert radiance.mean() > 0.0


def test_shade_direct_enclosed_point_is_black():
    """封闭盒子内部的着色点 (depth = 1) 完全为黑"""
    scene = Scene.build(make_box(size=(2.0, 2.0, 2.0), inward=True), make_params(), [])
    origins = np.zeros((64, 3))
    dirs = np.tile([0.0, 0.0, -1.0], (64, 1))
    hit = trace(scene.bvh, scene.mesh, origins, dirs)
    assert hit.valid.all()
    sp = surface_points(hit, hit.valid, -dirs)
    radiance, diffuse = shade_direct(scene, sp, lambert_config(), Rng(0))
    assert np.all(radiance == 0.0)
    assert np.all(diffuse == 0.0)


def test_shade_indirect_exhausted_depth(plane_scene):
    """深度用完的遮挡点只计算环境光直接项"""
    origins, dirs = _down_rays(2000, seed=2)
    hit = trace(plane_scene.bvh, plane_scene.mesh, origins, dirs)
    sp = surface_points(hit, hit.valid, -dirs)
    cfg = lambert_config(depth=2, adaptive=False)
    radiance = shade_indirect(plane_scene, sp, cfg, Rng(1), level=1)
    assert np.allclose(radiance.mean(axis=0), PLANE_KD, rtol=0.05)


def test_shade_indirect_rough_surface_is_mostly_diffuse():
    """roughness = 1 的二次着色点: 缓存烘焙后镜面项不到间接值的一成"""
    mesh = make_plane((0.0, 0.0, 0.0), (2.0, 2.0), 2)
    scene = Scene.build(mesh, make_params(kd=(0.8, 0.8, 0.8, 1.0), orm=(1.0, 1.0, 0.0)), [])
    data, _ = bake_diffuse_cache(scene, lambert_config(), seed=0, spp=16)
    scene.params.cache.texture.data[:] = data
    origins, dirs = _down_rays(1000, seed=4)
    hit = trace(scene.bvh, scene.mesh, origins, dirs)
    sp = surface_points(hit, hit.valid, -dirs)
    cfg = RenderConfig(depth=2, adaptive=True, firefly=math.inf, workers=1)
    total = shade_indirect(scene, sp, cfg, Rng(5), level=1)
    specular = shade_indirect(scene, sp, cfg.model_copy(update={"use_diffuse_cache": False}), Rng(5), level=1)
    assert specular.mean() > 0.0
    assert specular.mean() < 0.1 * total.mean()


# ============================================================================
# 确定性
# ============================================================================


def test_render_independent_of_workers(plane_scene):
    """同一种子下，1 个 worker 与 4 个 worker 的结果逐位相同"""
    camera = plane_scene.cameras[0]
    one = render(plane_scene, camera, RenderConfig(spp=2, tile_size=4, workers=1), seed=9)
    four = render(plane_scene, camera, RenderConfig(spp=2, tile_size=4, workers=4), seed=9)
    assert four.stats.workers == 4
    assert np.array_equal(one.radiance, four.radiance)
    assert np.array_equal(one.diffuse, four.diffuse)
    assert one.stats.rays == four.stats.rays


def test_render_seed_changes_noise(plane_scene):
    camera = plane_scene.cameras[0]
    cfg = RenderConfig(spp=1, workers=1)
    a = render(plane_scene, camera, cfg, seed=0)
    b = render(plane_scene, camera, cfg, seed=1)
    assert not np.array_equal(a.radiance, b.radiance)
    c = render(plane_scene, camera, cfg, seed=0)
    assert np.array_equal(a.radiance, c.radiance)


def test_thread_cap_from_environment(monkeypatch):
    monkeypatch.setenv("REFMC_THREADS", "2")
    assert resolve_workers(8) == 2
    assert resolve_workers(1) == 1
    monkeypatch.setenv("REFMC_THREADS", "abc")
    assert resolve_workers(3) == 3


# ============================================================================
# tape 重放
# ============================================================================


def test_tape_replay_matches_forward(two_planes_scene):
    """带梯度重放 tape 得到的像素值与前向渲染逐位一致"""
    scene = two_planes_scene
    cfg = RenderConfig(spp=2, depth=2, tile_size=8, workers=1)
    image = render(scene, scene.cameras[0], cfg, seed=4, record_tape=True)
    assert len(image.tapes) == 4
    leaves = leaf_tensors(scene.params, requires_grad=True)
    for tape in image.tapes:
        color, diffuse, count, _ = shade_tape(tape, leaves)
        assert color.requires_grad
        region = (slice(tape.y0, tape.y0 + tape.height), slice(tape.x0, tape.x0 + tape.width))
        expected = image.radiance[region].reshape(-1, 3)
        assert np.array_equal(color.detach().numpy(), expected)
        assert np.array_equal(diffuse.detach().numpy(), image.diffuse[region].reshape(-1, 3))
        assert np.array_equal(count.numpy(), image.sample_count[region].reshape(-1))


def test_render_without_tape(plane_scene):
    image = render(plane_scene, plane_scene.cameras[0], RenderConfig(spp=1, workers=1))
    assert image.tapes is None
    assert image.stats.rays > 0
    assert "rays/sec=" in image.stats.line()


def test_tape_taps_follow_texture_settings(plane_scene):
    """tape 中的纹素 taps 使用纹理自身的 wrap / filter"""
    kd = plane_scene.params.k_d
    plane_scene.params.k_d = Texture2D(kd.data, wrap="clamp", filter="nearest")
    image = render(plane_scene, plane_scene.cameras[0], lambert_config(spp=1), seed=0, record_tape=True)
    idx, w = image.tapes[0].levels[0].kd_taps
    assert np.all(w[:, 0] == 1.0)
    assert not w[:, 1:].any()
    assert np.all(idx[:, 0] < kd.data.shape[1] * kd.data.shape[2])


# ============================================================================
# 自适应模式与漫反射缓存
# ============================================================================


def test_adaptive_identical_without_occlusion(plane_scene):
    """没有遮挡时不会产生二次着色点，两种模式结果相同"""
    camera = plane_scene.cameras[0]
    fast = render(plane_scene, camera, RenderConfig(spp=2, depth=3, adaptive=True, workers=1), seed=2)
    full = render(plane_scene, camera, RenderConfig(spp=2, depth=3, adaptive=False, workers=1), seed=2)
    assert np.array_equal(fast.radiance, full.radiance)


def test_disabled_cache_equals_zero_cache(two_planes_scene):
    scene = two_planes_scene
    camera = scene.cameras[0]
    assert not scene.params.cache.texture.data.any()
    zero = render(scene, camera, RenderConfig(spp=2, depth=2, workers=1), seed=3)
    off = render(scene, camera, RenderConfig(spp=2, depth=2, use_diffuse_cache=False, workers=1), seed=3)
    assert np.array_equal(zero.radiance, off.radiance)


def test_cache_brightens_secondary_points(two_planes_scene):
    scene = two_planes_scene
    camera = scene.cameras[0]
    cfg = RenderConfig(spp=2, depth=2, firefly=math.inf, workers=1)
    dark = render(scene, camera, cfg, seed=3).radiance
    scene.params.cache.texture.data[:] = 0.5
    bright = render(scene, camera, cfg, seed=3).radiance
    assert np.all(bright >= dark - 1e-12)
    assert bright.mean() > dark.mean()


def test_deeper_paths_add_energy(two_planes_scene):
    """更多采样次数只会增加能量 (被遮挡样本在 depth = 1 时为 0)"""
    scene = two_planes_scene
    camera = scene.cameras[0]
    shallow = render(scene, camera, RenderConfig(spp=4, depth=1, workers=1), seed=0).radiance
    deep = render(scene, camera, RenderConfig(spp=4, depth=2, adaptive=False, workers=1), seed=0).radiance
    assert deep.mean() > shallow.mean() * 1.05


def test_bake_diffuse_cache_plane(plane_scene):
    """平面覆盖整个 UV 域，烘焙值约等于 Lambert 反照率"""
    data, coverage = bake_diffuse_cache(plane_scene, lambert_config(), seed=0, spp=8)
    assert data.shape == plane_scene.params.cache.texture.data.shape
    assert coverage.all()
    assert np.allclose(data.reshape(-1, 3).mean(axis=0), PLANE_KD, rtol=0.05)


# ============================================================================
# 萤火虫截断与非有限样本
# ============================================================================


def test_firefly_default_clamp():
    params = make_params(env=(2.0, 2.0, 2.0))
    assert firefly_clamp(params, RenderConfig()) == pytest.approx(100.0)
    assert firefly_clamp(params, RenderConfig(firefly=3.0)) == 3.0
    assert math.isinf(firefly_clamp(params, RenderConfig(firefly=math.inf)))


def test_firefly_clamp_bounds_pixels(glossy_plane_scene):
    scene = glossy_plane_scene
    image = render(scene, scene.cameras[0], RenderConfig(spp=4, firefly=0.5, workers=1), seed=0)
    assert image.radiance.max() <= 0.5 + 1e-12


def test_non_finite_samples_dropped(plane_scene):
    """材质含 NaN 时样本被丢弃并计数，图像保持有限"""
    plane_scene.params.k_d.data[:] = np.nan
    image = render(plane_scene, plane_scene.cameras[0], RenderConfig(spp=2, workers=1), seed=0)
    assert image.stats.nan_count > 0
    assert np.isfinite(image.radiance).all()
    assert np.all(image.sample_count[_interior(image.hit)] == 0)
    assert np.allclose(image.radiance[_background(image.hit)], 1.0)


def test_non_finite_samples_dropped_before_clamp():
    """无穷大的环境光样本被丢弃，而不是截断成 firefly 上限"""
    params = make_params()
    camera = look_at((0.0, -4.0, 0.0), (0.0, 0.0, 0.0), width=4, height=4)
    scene = Scene.build(None, params, [camera])
    params.env.data[:] = np.inf
    image = render(scene, camera, RenderConfig(spp=2, firefly=2.0, workers=1), seed=0)
    assert image.stats.nan_count == 4 * 4 * 2
    assert np.all(image.sample_count == 0)
    assert np.all(image.radiance == 0.0)


# ============================================================================
# PSNR
# ============================================================================


def test_psnr_known_value():
    img = np.zeros((4, 4, 3))
    assert psnr(img, img + 1.0, tonemap=False) == pytest.approx(48.1308, abs=1e-3)


def test_psnr_identical_is_inf():
    img = np.random.default_rng(0).random((5, 5, 3))
    assert math.isinf(psnr(img, img.copy()))


def test_psnr_shape_mismatch():
    with pytest.raises(DataError):
        psnr(np.zeros((2, 2, 3)), np.zeros((3, 2, 3)))


# ============================================================================
# 验收 (耗时)
# ============================================================================


@pytest.mark.slow
def test_render_matches_reference_two_bounces(two_planes_scene):
    """关闭加速与截断时，depth = 2 的渲染与对照路径追踪器均值一致"""
    scene = two_planes_scene
    camera = scene.cameras[0]
    cfg = RenderConfig(spp=64, depth=2, adaptive=False, firefly=math.inf, specular=False,
                       disney_primary=False, workers=4)
    ours = render(scene, camera, cfg, seed=0).radiance
    ref = render_reference(scene, camera, depth=2, spp=256, seed=1, disney_primary=False, specular=False)
    assert abs(ours.mean() - ref.mean()) < 0.03 * ref.mean()


@pytest.mark.slow
def test_furnace_high_sample_count(sphere_scene):
    image = render(sphere_scene, sphere_scene.cameras[0], lambert_config(spp=128, workers=4), seed=0)
    assert abs(image.radiance[_interior(image.hit)].mean() - 0.7) < 0.7 * 0.01


def test_torch_double_precision(plane_scene):
    leaves = leaf_tensors(plane_scene.params)
    assert all(t.dtype == torch.float64 for t in leaves.values())


@pytest.mark.slow
def test_mis_variance_not_worse_than_single_strategy(glossy_plane_scene):
    """同样的样本总数下，MIS 的逐像素方差不高于任一单一策略"""
    scene = glossy_plane_scene
    camera = scene.cameras[0]

    def variance(n_light, n_brdf):
        cfg = RenderConfig(spp=1, depth=1, n_light=n_light, n_brdf=n_brdf, firefly=math.inf,
                           disney_primary=False, workers=1)
        stack = np.stack([render(scene, camera, cfg, seed=s).radiance for s in range(100)])
        return stack.var(axis=0).mean()

    mis = variance(8, 8)
    assert mis <= variance(16, 0) * 1.05
    assert mis <= variance(0, 16) * 1.05


@pytest.mark.slow
def test_second_bounce_improves_psnr(two_planes_scene):
    """depth = 2 相对 depth = 1 的 PSNR 至少高 1 dB (对照 depth = 8 参考图)"""
    scene = two_planes_scene
    camera = scene.cameras[0]
    ref = render_reference(scene, camera, depth=8, spp=512, seed=9)
    scores = {}
    for depth in (1, 2):
        cfg = RenderConfig(spp=64, depth=depth, adaptive=False, firefly=math.inf, workers=4)
        scores[depth] = psnr(render(scene, camera, cfg, seed=depth).radiance, ref)
    assert scores[2] >= scores[1] + 1.0


@pytest.mark.slow
def test_adaptive_cache_matches_full_estimate(two_planes_scene):
    """
    烘焙缓存后，depth = 2 的自适应模式比完整的二次 MIS 快至少 1.5 倍，
    两者对照 depth = 8 参考图的 PSNR 相差不超过 0.3 dB
    """
    scene = two_planes_scene
    camera = scene.cameras[0]
    base = dict(spp=128, depth=2, n_light=2, n_brdf=2, firefly=math.inf, workers=4)
    ref = render_reference(scene, camera, depth=8, spp=1024, seed=9)
    data, _ = bake_diffuse_cache(scene, RenderConfig(**{**base, "depth": 1}), seed=0, spp=256)
    scene.params.cache.texture.data[:] = data
    full_cfg = RenderConfig(adaptive=False, **base)
    fast_cfg = RenderConfig(adaptive=True, **base)
    # numba 编译不计入耗时
    for cfg in (full_cfg, fast_cfg):
        render(scene, camera, cfg.model_copy(update={"spp": 1}), seed=0)

    start = time.perf_counter()
    full = render(scene, camera, full_cfg, seed=1).radiance
    t_full = time.perf_counter() - start
    start = time.perf_counter()
    fast = render(scene, camera, fast_cfg, seed=1).radiance
    t_fast = time.perf_counter() - start

    assert t_full / t_fast >= 1.5
    assert abs(psnr(full, ref) - psnr(fast, ref)) <= 0.3


@pytest.mark.slow
def test_shade_indirect_adaptive_matches_full_near_mirror():
    """
    暗环境下紧邻镜面墙的地面: 烘焙缓存后，depth = 2 的自适应估计与完整 MIS
    在 10³ 个点上的均值差在 3σ 以内
    """
    floor = make_plane((0.0, 0.0, 0.0), (4.0, 4.0), 2)
    wall = make_plane((1.0, 0.0, 1.0), (4.0, 2.0), 0, flip=True)
    params = make_params(layers=2, env=(0.3, 0.3, 0.3), cache_res=32)
    params.k_orm.data[1] = np.array([1.0, 0.05, 1.0])
    scene = Scene.build(merge_meshes([floor, wall]), params, [])
    data, _ = bake_diffuse_cache(scene, RenderConfig(depth=1, firefly=math.inf), seed=0, spp=256)
    params.cache.texture.data[:] = data

    n = 1000
    xy = Rng(6).uniform((n, 2)) * np.array([2.0, 2.0]) - np.array([1.5, 1.0])
    origins = np.concatenate([xy, np.full((n, 1), 1.5)], axis=-1)
    dirs = np.tile([0.0, 0.0, -1.0], (n, 1))
    hit = trace(scene.bvh, scene.mesh, origins, dirs)
    assert np.all(hit.material_id == 0)
    sp = surface_points(hit, hit.valid, -dirs)

    cfg = RenderConfig(depth=2, firefly=math.inf, workers=1)
    full = shade_indirect(scene, sp, cfg.model_copy(update={"adaptive": False}), Rng(7), level=1)
    fast = shade_indirect(scene, sp, cfg.model_copy(update={"adaptive": True}), Rng(8), level=1)
    diff = full - fast
    sigma = diff.std(axis=0) / math.sqrt(n)
    assert np.all(np.abs(diff.mean(axis=0)) <= 3.0 * sigma)
