"""
GGX 微表面 BRDF

- 镜面项: Cook-Torrance, f_s = D·F·G / (4 (n·wi)(n·wo))
    D: GGX 法线分布 (α = roughness²)
    G: height-correlated Smith 遮蔽
    F: Schlick 近似, F0 = lerp(0.04, k_d, m)
- 漫反射项:
    一次着色 (primary): Disney diffuse，FD90 = 0.5 + 2 r cos²θ_d
    间接着色 (indirect): Lambert, c_diff / π，与方向无关

所有函数同时支持 numpy 数组和 torch 张量；向量形状 (..., 3)，标量形状 (...)。
"""

import math
from dataclasses import dataclass
from typing import Any

from scripts.config import DIELECTRIC_F0, R_MIN
from scripts.vecmath import dot, normalize, where, zeros_like

LOBES = ("all", "diffuse", "specular")
_COS_EPS = 1e-7


@dataclass
class SurfaceMaterial:
    """
    着色点材质

    k_d 可以带第 4 个 alpha 通道，着色时忽略；occlusion 只存储不参与着色。
    """

    k_d: Any
    roughness: Any
    metalness: Any
    shading_normal: Any
    occlusion: Any = None

    @property
    def albedo(self):
        return self.k_d[..., :3]

    @property
    def f0(self):
        """金属度插值的基础反射率，范围 [0.04, 1]"""
        m = self.metalness[..., None]
        return DIELECTRIC_F0 * (1.0 - m) + self.albedo * m


# ============================================================================
# 微表面各项
# ============================================================================


def alpha_from_roughness(roughness):
    return roughness.clip(R_MIN, 1.0) ** 2


def d_term(cos_h, alpha):
    """GGX 分布，输入为 n·h 与 α"""
    a2 = alpha * alpha
    cos_h = cos_h.clip(0.0, 1.0)
    denom = cos_h * cos_h * (a2 - 1.0) + 1.0
    return a2 / (math.pi * denom * denom)


def smith_lambda(cos_theta, alpha):
    """Smith Λ(θ) = (-1 + sqrt(1 + α² tan²θ)) / 2"""
    c2 = cos_theta.clip(_COS_EPS, 1.0) ** 2
    tan2 = (1.0 - c2) / c2
    return ((1.0 + alpha * alpha * tan2) ** 0.5 - 1.0) * 0.5


def smith_g1(cos_theta, alpha):
    return 1.0 / (1.0 + smith_lambda(cos_theta, alpha))


def ggx_d(n, h, roughness):
    """
    GGX 法线分布函数 D(h)

    Args:
        n: 法线 (..., 3)
        h: 微表面法线 (..., 3)
        roughness: 感知粗糙度，内部使用 α = max(r, r_min)²

    Returns:
        D 值 (...)
    """
    return d_term(dot(n, h), alpha_from_roughness(roughness))


def smith_g(n, wi, wo, roughness):
    """height-correlated Smith 遮蔽项 G2，对 wi、wo 对称"""
    alpha = alpha_from_roughness(roughness)
    return 1.0 / (1.0 + smith_lambda(dot(n, wi), alpha) + smith_lambda(dot(n, wo), alpha))


def fresnel_schlick(f0, cos_theta):
    """F = F0 + (1 - F0)(1 - cosθ)^5，f0 形状 (..., 3)，cos_theta 形状 (...)"""
    c = cos_theta.clip(0.0, 1.0)
    weight = ((1.0 - c) ** 5)[..., None]
    return f0 + (1.0 - f0) * weight


# ============================================================================
# BSDF 求值
# ============================================================================


def _eval_bsdf(mat: SurfaceMaterial, wi, wo, n, lobe: str, disney: bool):
    if lobe not in LOBES:
        raise ValueError(f"未知的 lobe: {lobe}")

    cos_i = dot(n, wi)
    cos_o = dot(n, wo)
    valid = (cos_i > 0.0) & (cos_o > 0.0)
    ci = cos_i.clip(_COS_EPS, 1.0)
    co = cos_o.clip(_COS_EPS, 1.0)

    h = normalize(wi + wo)
    cos_d = dot(wi, h).clip(0.0, 1.0)
    metal = mat.metalness

    total = 0.0
    if lobe in ("all", "diffuse"):
        base = mat.albedo * ((1.0 - metal) / math.pi)[..., None]
        if disney:
            fd90 = 0.5 + 2.0 * mat.roughness * cos_d * cos_d
            light = 1.0 + (fd90 - 1.0) * (1.0 - ci) ** 5
            view = 1.0 + (fd90 - 1.0) * (1.0 - co) ** 5
            base = base * (light * view)[..., None]
        total = total + base

    if lobe in ("all", "specular"):
        alpha = alpha_from_roughness(mat.roughness)
        d = d_term(dot(n, h), alpha)
        g = 1.0 / (1.0 + smith_lambda(ci, alpha) + smith_lambda(co, alpha))
        f = fresnel_schlick(mat.f0, cos_d)
        total = total + f * (d * g / (4.0 * ci * co))[..., None]

    total = total + zeros_like(wi)
    return where(valid[..., None], total, zeros_like(total))


def eval_bsdf_primary(mat: SurfaceMaterial, wi, wo, n, lobe: str = "all", disney: bool = True):
    """
    一次着色 BSDF: Disney diffuse × (1 - m) + GGX 镜面

    Args:
        mat: 材质
        wi: 入射方向 (..., 3)，指向外侧
        wo: 出射方向 (..., 3)
        n: 着色法线 (..., 3)
        lobe: "all" | "diffuse" | "specular"
        disney: False 时退化为 Lambert (与 eval_bsdf_indirect 相同)

    Returns:
        RGB BSDF 值 (..., 3)，任一余弦 ≤ 0 时为 0
    """
    return _eval_bsdf(mat, wi, wo, n, lobe, disney)


def eval_bsdf_indirect(mat: SurfaceMaterial, wi, wo, n, lobe: str = "all"):
    """间接着色 BSDF: 漫反射替换为 c_diff (1 - m) / π，镜面项不变"""
    return _eval_bsdf(mat, wi, wo, n, lobe, disney=False)
