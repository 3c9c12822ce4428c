"""
方向采样与 MIS

- 余弦半球采样 (漫反射策略)
- GGX 可见法线 (VNDF) 采样 (镜面策略)
- 环境图亮度重要性采样 (光源策略)
- 漫反射/镜面混合的 BRDF 策略及其 pdf
- balance heuristic 权重

所有采样函数都是 (输入, rng) 的纯函数，支持批量: 法线等输入形状 (N, 3)，
也可以显式传入均匀数 u 代替 rng。
"""

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Optional

import numpy as np

from scripts.brdf import alpha_from_roughness, d_term, smith_g1
from scripts.config import SPEC_PROB_MAX, SPEC_PROB_MIN
from scripts.rng import Rng
from scripts.vecmath import luminance, normalize

INV_PI = 1.0 / math.pi
INV_4PI = 1.0 / (4.0 * math.pi)


class Strategy(IntEnum):
    """采样策略"""

    ENV_LIGHT = 0
    BRDF_DIFFUSE = 1
    BRDF_SPECULAR = 2


@dataclass
class DirectionSample:
    """
    一批方向样本

    direction: (N, 3) 单位向量 (世界空间)
    pdf: (N,) 立体角密度 sr⁻¹，0 表示无效样本
    strategy: (N,) Strategy 取值
    """

    direction: np.ndarray
    pdf: np.ndarray
    strategy: np.ndarray

    def __len__(self) -> int:
        return len(self.pdf)


def _as_batch(v) -> np.ndarray:
    return np.atleast_2d(np.asarray(v, dtype=np.float64))


def _uniforms(rng: Optional[Rng], u, count: int, dims: int) -> np.ndarray:
    if u is not None:
        u = np.asarray(u, dtype=np.float64)
        return np.broadcast_to(u, (count, dims)) if u.ndim == 1 else u
    if rng is None:
        raise ValueError("需要 rng 或 u")
    return rng.uniform((count, dims))


# ============================================================================
# 局部坐标系
# ============================================================================


def orthonormal_basis(n: np.ndarray):
    """
    由单位法线构造正交基 (t, b)，(t, b, n) 为右手系

    无分支构造，n.z = -1 附近也稳定。
    """
    n = _as_batch(n)
    sign = np.where(n[:, 2] >= 0.0, 1.0, -1.0)
    a = -1.0 / (sign + n[:, 2])
    b = n[:, 0] * n[:, 1] * a
    t = np.stack([1.0 + sign * n[:, 0] * n[:, 0] * a, sign * b, -sign * n[:, 0]], axis=-1)
    s = np.stack([b, sign + n[:, 1] * n[:, 1] * a, -n[:, 1]], axis=-1)
    return t, s


def to_world(local: np.ndarray, n: np.ndarray) -> np.ndarray:
    t, s = orthonormal_basis(n)
    n = _as_batch(n)
    return local[:, 0:1] * t + local[:, 1:2] * s + local[:, 2:3] * n


def to_local(v: np.ndarray, n: np.ndarray) -> np.ndarray:
    t, s = orthonormal_basis(n)
    n = _as_batch(n)
    v = _as_batch(v)
    return np.stack([(v * t).sum(-1), (v * s).sum(-1), (v * n).sum(-1)], axis=-1)


# ============================================================================
# 漫反射 / 球面
# ============================================================================


def sample_cosine_hemisphere(n, rng: Optional[Rng] = None, u=None) -> DirectionSample:
    """
    余弦加权半球采样

    Args:
        n: 单位法线 (N, 3) 或 (3,)
        rng: 随机数生成器
        u: 可选的均匀数 (N, 2)

    Returns:
        DirectionSample，pdf = (n·ω)/π
    """
    n = _as_batch(n)
    u = _uniforms(rng, u, len(n), 2)
    r = np.sqrt(u[:, 0])
    phi = 2.0 * math.pi * u[:, 1]
    z = np.sqrt(np.clip(1.0 - u[:, 0], 0.0, 1.0))
    local = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)
    direction = normalize(to_world(local, n))
    pdf = np.clip((direction * n).sum(-1), 0.0, None) * INV_PI
    return DirectionSample(direction, pdf, np.full(len(n), Strategy.BRDF_DIFFUSE, np.int8))


def cosine_hemisphere_pdf(n, wi) -> np.ndarray:
    return np.clip((_as_batch(n) * _as_batch(wi)).sum(-1), 0.0, None) * INV_PI


def sample_uniform_sphere(count: int, rng: Optional[Rng] = None, u=None) -> DirectionSample:
    u = _uniforms(rng, u, count, 2)
    z = 1.0 - 2.0 * u[:, 0]
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = 2.0 * math.pi * u[:, 1]
    direction = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)
    return DirectionSample(
        direction, np.full(count, INV_4PI), np.full(count, Strategy.ENV_LIGHT, np.int8)
    )


# ============================================================================
# GGX
# ============================================================================


def sample_ggx(n, wo, roughness, rng: Optional[Rng] = None, u=None) -> DirectionSample:
    """
    GGX 可见法线采样 (VNDF)

    Args:
        n: 单位法线 (N, 3)
        wo: 出射方向 (N, 3)，要求 n·wo > 0
        roughness: (N,) 或标量，内部截断到 [r_min, 1]
        rng / u: 随机源

    Returns:
        DirectionSample；反射方向落到表面以下时 pdf = 0，调用方丢弃该样本
    """
    n = _as_batch(n)
    wo = np.broadcast_to(_as_batch(wo), n.shape)
    count = len(n)
    u = _uniforms(rng, u, count, 2)
    alpha = alpha_from_roughness(np.broadcast_to(np.asarray(roughness, np.float64), (count,)))

    wo_local = to_local(wo, n)
    # 拉伸到半球构型
    vh = normalize(
        np.stack([alpha * wo_local[:, 0], alpha * wo_local[:, 1], wo_local[:, 2]], axis=-1)
    )
    lensq = vh[:, 0] ** 2 + vh[:, 1] ** 2
    inv_len = np.where(lensq > 0.0, 1.0 / np.sqrt(np.where(lensq > 0.0, lensq, 1.0)), 0.0)
    t1 = np.where(
        (lensq > 0.0)[:, None],
        np.stack([-vh[:, 1] * inv_len, vh[:, 0] * inv_len, np.zeros(count)], axis=-1),
        np.array([1.0, 0.0, 0.0]),
    )
    t2 = np.cross(vh, t1)

    r = np.sqrt(u[:, 0])
    phi = 2.0 * math.pi * u[:, 1]
    p1 = r * np.cos(phi)
    p2 = r * np.sin(phi)
    s = 0.5 * (1.0 + vh[:, 2])
    p2 = (1.0 - s) * np.sqrt(np.clip(1.0 - p1 * p1, 0.0, None)) + s * p2

    nh = (
        p1[:, None] * t1
        + p2[:, None] * t2
        + np.sqrt(np.clip(1.0 - p1 * p1 - p2 * p2, 0.0, None))[:, None] * vh
    )
    m_local = normalize(
        np.stack([alpha * nh[:, 0], alpha * nh[:, 1], np.clip(nh[:, 2], 1e-12, None)], axis=-1)
    )
    wi_local = 2.0 * (wo_local * m_local).sum(-1, keepdims=True) * m_local - wo_local
    direction = normalize(to_world(wi_local, n))
    pdf = ggx_pdf(n, wo, direction, np.broadcast_to(np.asarray(roughness, np.float64), (count,)))
    return DirectionSample(direction, pdf, np.full(count, Strategy.BRDF_SPECULAR, np.int8))


def ggx_pdf(n, wo, wi, roughness) -> np.ndarray:
    """
    VNDF 采样对应的立体角密度: G1(wo)·D(h) / (4 n·wo)

    wi 或 wo 在表面以下时返回 0。
    """
    n = _as_batch(n)
    wo = _as_batch(wo)
    wi = _as_batch(wi)
    alpha = alpha_from_roughness(np.asarray(roughness, dtype=np.float64))
    cos_o = (n * wo).sum(-1)
    cos_i = (n * wi).sum(-1)
    h = normalize(wo + wi)
    d = d_term((n * h).sum(-1), alpha)
    pdf = smith_g1(cos_o, alpha) * d / (4.0 * np.clip(cos_o, 1e-12, None))
    return np.where((cos_i > 0.0) & (cos_o > 0.0), pdf, 0.0)


# ============================================================================
# BRDF 混合策略
# ============================================================================


def specular_probability(k_d, metalness, specular: bool = True) -> np.ndarray:
    """镜面波瓣被选中的概率: F0 亮度 / (F0 亮度 + 漫反射亮度)，截断到 [0.25, 0.9]"""
    k_d = np.asarray(k_d)[..., :3]
    metalness = np.asarray(metalness)
    if not specular:
        return np.zeros(metalness.shape)
    f0 = 0.04 * (1.0 - metalness)[..., None] + k_d * metalness[..., None]
    spec = luminance(f0)
    diff = (1.0 - metalness) * luminance(k_d)
    ratio = spec / np.clip(spec + diff, 1e-12, None)
    return np.clip(ratio, SPEC_PROB_MIN, SPEC_PROB_MAX)


def sample_bsdf(
    n, wo, roughness, p_spec, rng: Optional[Rng] = None, u=None
) -> DirectionSample:
    """
    BRDF 策略: 以 p_spec 概率采样 GGX，否则余弦半球

    u 为 (N, 3)，第一列选择波瓣。返回的 pdf 是混合密度 (见 bsdf_pdf)。
    """
    n = _as_batch(n)
    wo = np.broadcast_to(_as_batch(wo), n.shape)
    count = len(n)
    u = _uniforms(rng, u, count, 3)
    p_spec = np.broadcast_to(np.asarray(p_spec, np.float64), (count,))
    roughness = np.broadcast_to(np.asarray(roughness, np.float64), (count,))

    diffuse = sample_cosine_hemisphere(n, u=u[:, 1:])
    spec = sample_ggx(n, wo, roughness, u=u[:, 1:])
    pick_spec = u[:, 0] < p_spec
    direction = np.where(pick_spec[:, None], spec.direction, diffuse.direction)
    strategy = np.where(pick_spec, Strategy.BRDF_SPECULAR, Strategy.BRDF_DIFFUSE).astype(np.int8)
    pdf = bsdf_pdf(n, wo, direction, roughness, p_spec)
    # GGX 反射到表面以下的样本无效
    pdf = np.where(pick_spec & (spec.pdf <= 0.0), 0.0, pdf)
    return DirectionSample(direction, pdf, strategy)


def bsdf_pdf(n, wo, wi, roughness, p_spec) -> np.ndarray:
    """混合密度 (1 - p_spec)·cos/π + p_spec·ggx_pdf"""
    p_spec = np.asarray(p_spec, np.float64)
    return (1.0 - p_spec) * cosine_hemisphere_pdf(n, wi) + p_spec * ggx_pdf(n, wo, wi, roughness)


# ============================================================================
# 环境图
# ============================================================================


def sample_envmap(env, count: int, rng: Optional[Rng] = None, u=None) -> DirectionSample:
    """
    按亮度 × sinθ 的二维分段常数分布采样环境图

    Args:
        env: 已调用 build_env_cdf 的 EnvironmentMap
        count: 样本数
        rng / u: 随机源，u 形状 (count, 2)

    Returns:
        DirectionSample；全黑环境退化为均匀球面采样，pdf = 1/(4π)
    """
    from scripts.assets import envmap_pdf, uv_to_direction

    if env.marginal_cdf is None:
        raise ValueError("环境图 CDF 尚未构建")
    u = _uniforms(rng, u, count, 2)
    if env.is_black:
        return sample_uniform_sphere(count, u=u)

    height, width = env.height, env.width
    marginal = env.marginal_cdf
    row = np.clip(np.searchsorted(marginal, u[:, 0], side="right") - 1, 0, height - 1)
    row_span = marginal[row + 1] - marginal[row]
    dv = np.clip((u[:, 0] - marginal[row]) / np.where(row_span > 0, row_span, 1.0), 0.0, 1.0 - 1e-12)

    # 每行条件 CDF 加上行号后整体单调，一次 searchsorted 完成所有行
    stacked = (env.conditional_cdf + np.arange(height)[:, None]).ravel()
    pos = np.searchsorted(stacked, row + u[:, 1], side="right")
    col = np.clip(pos - row * (width + 1) - 1, 0, width - 1)
    lo = env.conditional_cdf[row, col]
    col_span = env.conditional_cdf[row, col + 1] - lo
    du = np.clip((u[:, 1] - lo) / np.where(col_span > 0, col_span, 1.0), 0.0, 1.0 - 1e-12)

    tex_u = (col + du) / width
    tex_v = (row + dv) / height
    direction = uv_to_direction(tex_u, tex_v)
    pdf = envmap_pdf(env, direction)
    return DirectionSample(direction, pdf, np.full(count, Strategy.ENV_LIGHT, np.int8))


# ============================================================================
# MIS
# ============================================================================


def mis_balance_weight(pdf_self, n_self, pdf_other, n_other):
    """
    balance heuristic: n_self·p_self / (n_self·p_self + n_other·p_other)

    分母为 0 时返回 0。
    """
    num = np.asarray(n_self * np.asarray(pdf_self, dtype=np.float64))
    denom = num + n_other * np.asarray(pdf_other, dtype=np.float64)
    safe = np.where(denom > 0.0, denom, 1.0)
    weight = np.where(denom > 0.0, num / safe, 0.0)
    return float(weight) if weight.ndim == 0 else weight
