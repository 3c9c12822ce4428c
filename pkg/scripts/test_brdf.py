"""
测试 GGX 微表面 BRDF
"""

import math

import numpy as np
import pytest
import torch

from scripts.brdf import (
    SurfaceMaterial,
    eval_bsdf_indirect,
    eval_bsdf_primary,
    fresnel_schlick,
    ggx_d,
    smith_g,
)
from scripts.rng import Rng
from scripts.sampling import sample_cosine_hemisphere, sample_ggx

UP = np.array([0.0, 0.0, 1.0])


def _material(count, kd=(1.0, 1.0, 1.0), roughness=0.5, metalness=0.0):
    return SurfaceMaterial(
        k_d=np.tile(np.asarray(kd, dtype=np.float64), (count, 1)),
        roughness=np.full(count, roughness),
        metalness=np.full(count, metalness),
        shading_normal=np.tile(UP, (count, 1)),
    )


def _albedo(mat, wo, count, lobe="all", disney=True, seed=0):
    """余弦采样估计方向反照率 ∫ f cos dω"""
    n = np.tile(UP, (count, 1))
    s = sample_cosine_hemisphere(n, Rng(seed))
    f = eval_bsdf_primary(mat, s.direction, np.tile(wo, (count, 1)), n, lobe=lobe, disney=disney)
    cos = s.direction @ UP
    return (f * (cos / s.pdf)[:, None]).mean(axis=0)


def test_ggx_d_at_normal():
    """D(h = n) = 1 / (π α²)，r = 0.5 时为 5.093"""
    value = ggx_d(UP, UP, np.array(0.5))
    assert float(value) == pytest.approx(5.093, abs=1e-3)


def test_fresnel_schlick_limits():
    f0 = np.array([[0.04, 0.04, 0.04]])
    assert np.allclose(fresnel_schlick(f0, np.array([1.0])), 0.04)
    assert np.allclose(fresnel_schlick(f0, np.array([0.0])), 1.0)


def test_smith_g_symmetric():
    wi = np.array([0.3, 0.2, 0.93])
    wo = np.array([-0.5, 0.1, 0.86])
    wi /= np.linalg.norm(wi)
    wo /= np.linalg.norm(wo)
    r = np.array(0.6)
    assert float(smith_g(UP, wi, wo, r)) == pytest.approx(float(smith_g(UP, wo, wi, r)))
    assert 0.0 < float(smith_g(UP, wi, wo, r)) <= 1.0


def test_bsdf_zero_below_horizon():
    mat = _material(2)
    wi = np.array([[0.0, 0.6, -0.8], [0.0, 0.6, 0.8]])
    wo = np.array([[0.0, -0.6, 0.8], [0.0, -0.6, -0.8]])
    f = eval_bsdf_primary(mat, wi, wo, np.tile(UP, (2, 1)))
    assert np.all(f == 0.0)


def test_bsdf_reciprocity():
    count = 64
    rng = Rng(1)
    n = np.tile(UP, (count, 1))
    wi = sample_cosine_hemisphere(n, rng).direction
    wo = sample_cosine_hemisphere(n, rng).direction
    mat = _material(count, kd=(0.8, 0.5, 0.2), roughness=0.4, metalness=0.3)
    assert np.allclose(eval_bsdf_indirect(mat, wi, wo, n), eval_bsdf_indirect(mat, wo, wi, n))
    assert np.allclose(eval_bsdf_primary(mat, wi, wo, n), eval_bsdf_primary(mat, wo, wi, n))


def test_lambert_albedo():
    """间接着色漫反射: ∫ c/π cos dω = c"""
    mat = _material(50_000, kd=(0.7, 0.5, 0.3))
    albedo = _albedo(mat, UP, 50_000, lobe="diffuse", disney=False)
    assert np.allclose(albedo, [0.7, 0.5, 0.3], rtol=1e-6)


def test_disney_diffuse_albedo_at_normal_view():
    """wo = n、r = 0.4 时 Disney diffuse 的方向反照率恰为 1"""
    mat = _material(200_000, roughness=0.4)
    albedo = _albedo(mat, UP, 200_000, lobe="diffuse", disney=True, seed=2)
    assert np.allclose(albedo, 1.0, atol=0.01)


def test_specular_energy_conservation():
    """VNDF 采样下单样本权重 F·G2/G1 不超过 1，白色金属的反照率 ≤ 1"""
    count = 20_000
    n = np.tile(UP, (count, 1))
    for roughness in (0.1, 0.5, 1.0):
        for theta in (0.0, 0.8, 1.3):
            wo = np.tile([math.sin(theta), 0.0, math.cos(theta)], (count, 1))
            mat = _material(count, kd=(1.0, 1.0, 1.0), roughness=roughness, metalness=1.0)
            s = sample_ggx(n, wo, mat.roughness, Rng(3))
            valid = s.pdf > 0
            f = eval_bsdf_primary(mat, s.direction, wo, n, lobe="specular")
            weight = f[valid] * ((s.direction[valid] @ UP) / s.pdf[valid])[:, None]
            assert np.all(weight <= 1.0 + 1e-6), (roughness, theta)
            assert 0.2 < float(weight.sum(axis=0).max() / count) <= 1.0 + 1e-6


def test_lobes_sum_to_all():
    count = 32
    rng = Rng(4)
    n = np.tile(UP, (count, 1))
    wi = sample_cosine_hemisphere(n, rng).direction
    wo = sample_cosine_hemisphere(n, rng).direction
    mat = _material(count, kd=(0.6, 0.6, 0.6), roughness=0.3, metalness=0.2)
    total = eval_bsdf_primary(mat, wi, wo, n, "all")
    parts = eval_bsdf_primary(mat, wi, wo, n, "diffuse") + eval_bsdf_primary(mat, wi, wo, n, "specular")
    assert np.allclose(total, parts)


def test_metal_has_no_diffuse():
    mat = _material(4, metalness=1.0)
    wi = np.tile([0.0, 0.6, 0.8], (4, 1))
    wo = np.tile([0.0, -0.6, 0.8], (4, 1))
    assert np.allclose(eval_bsdf_primary(mat, wi, wo, np.tile(UP, (4, 1)), "diffuse"), 0.0)


def test_unknown_lobe():
    mat = _material(1)
    with pytest.raises(ValueError):
        eval_bsdf_primary(mat, UP[None], UP[None], UP[None], lobe="glossy")


def test_torch_matches_numpy():
    count = 16
    rng = Rng(5)
    n = np.tile(UP, (count, 1))
    wi = sample_cosine_hemisphere(n, rng).direction
    wo = sample_cosine_hemisphere(n, rng).direction
    kd = rng.uniform((count, 4))
    r = rng.uniform(count)
    m = rng.uniform(count)
    ref = eval_bsdf_primary(SurfaceMaterial(kd, r, m, n), wi, wo, n)
    t = torch.from_numpy
    out = eval_bsdf_primary(SurfaceMaterial(t(kd), t(r), t(m), t(n)), t(wi), t(wo), t(n))
    assert np.allclose(out.numpy(), ref)


def test_torch_gradient_flows_to_albedo():
    kd = torch.full((1, 3), 0.5, dtype=torch.float64, requires_grad=True)
    n = torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64)
    wi = torch.tensor([[0.0, 0.6, 0.8]], dtype=torch.float64)
    wo = torch.tensor([[0.0, -0.6, 0.8]], dtype=torch.float64)
    mat = SurfaceMaterial(kd, torch.tensor([0.5], dtype=torch.float64),
                          torch.tensor([0.0], dtype=torch.float64), n)
    eval_bsdf_indirect(mat, wi, wo, n, "diffuse").sum().backward()
    assert torch.allclose(kd.grad, torch.full((1, 3), 1.0 / math.pi, dtype=torch.float64))
