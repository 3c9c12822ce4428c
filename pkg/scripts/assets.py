"""
纹理、环境图与漫反射缓存 (可优化参数集)

存储约定:
- Texture2D.data 形状 (L, H, W, C)，每个材质 (网格) 一层，所有层共享分辨率
- 纹素中心位于 ((x + 0.5)/W, (y + 0.5)/H)，第 0 行对应 v = 0
- 环境图为等距柱状投影，+z 朝上: u = φ/2π，v = θ/π，第 0 行位于 +z 极点；
  u 方向循环，v 方向截断
- 扁平纹素索引 = ((layer·H + y)·W + x)，供伴随 (adjoint) 阶段回写梯度
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from scripts.config import LUMINANCE_WEIGHTS
from scripts.vecmath import dot, normalize, where

logger = logging.getLogger(__name__)

LEAF_NAMES = ("k_d", "k_orm", "normal", "env", "cache")
WRAP_MODES = ("repeat", "clamp")
FILTERS = ("bilinear", "nearest")


def snap_to_float32(data: np.ndarray) -> np.ndarray:
    """原地把 float64 数组舍入到 float32 可表示的值 (RFM1 检查点逐位还原)"""
    data[...] = data.astype(np.float32)
    return data


# ============================================================================
# 纹理
# ============================================================================


@dataclass
class Texture2D:
    """分层二维纹理"""

    data: np.ndarray
    wrap: str = "repeat"
    filter: str = "bilinear"

    def __post_init__(self):
        if self.data.ndim == 3:
            self.data = self.data[None]
        if self.data.ndim != 4 or not 1 <= self.data.shape[-1] <= 4:
            raise ValueError(f"纹理形状必须为 (L, H, W, C)，C ∈ [1, 4]: {self.data.shape}")
        if self.wrap not in WRAP_MODES:
            raise ValueError(f"未知的 wrap 模式: {self.wrap}")
        if self.filter not in FILTERS:
            raise ValueError(f"未知的过滤方式: {self.filter}")
        self.data = np.ascontiguousarray(self.data, dtype=np.float32).astype(np.float64)

    @property
    def layers(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    @classmethod
    def constant(cls, value, layers: int, height: int, width: int, **kwargs) -> "Texture2D":
        value = np.atleast_1d(np.asarray(value, dtype=np.float64))
        data = np.broadcast_to(value, (layers, height, width, len(value))).copy()
        return cls(data, **kwargs)


def _wrap_index(i: np.ndarray, size: int, mode: str) -> np.ndarray:
    if mode == "repeat":
        return np.mod(i, size)
    return np.clip(i, 0, size - 1)


def bilinear_taps(
    u: np.ndarray,
    v: np.ndarray,
    layer: np.ndarray,
    layers: int,
    height: int,
    width: int,
    wrap_u: str = "repeat",
    wrap_v: str = "repeat",
    nearest: bool = False,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    计算 4 个参与插值的扁平纹素索引及权重

    Returns:
        (idx, w)，形状均为 (N, 4)；最近邻模式下权重为 [1, 0, 0, 0]
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    layer = np.clip(np.broadcast_to(np.asarray(layer, dtype=np.int64), u.shape), 0, layers - 1)
    base = layer * height

    if nearest:
        x = _wrap_index(np.floor(u * width).astype(np.int64), width, wrap_u)
        y = _wrap_index(np.floor(v * height).astype(np.int64), height, wrap_v)
        flat = (base + y) * width + x
        idx = np.stack([flat] * 4, axis=-1)
        w = np.zeros(idx.shape)
        w[..., 0] = 1.0
        return idx, w

    fx = u * width - 0.5
    fy = v * height - 0.5
    x0 = np.floor(fx)
    y0 = np.floor(fy)
    tx = fx - x0
    ty = fy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xa = _wrap_index(x0, width, wrap_u)
    xb = _wrap_index(x0 + 1, width, wrap_u)
    ya = _wrap_index(y0, height, wrap_v)
    yb = _wrap_index(y0 + 1, height, wrap_v)

    idx = np.stack(
        [
            (base + ya) * width + xa,
            (base + ya) * width + xb,
            (base + yb) * width + xa,
            (base + yb) * width + xb,
        ],
        axis=-1,
    )
    w = np.stack(
        [(1.0 - tx) * (1.0 - ty), tx * (1.0 - ty), (1.0 - tx) * ty, tx * ty], axis=-1
    )
    return idx, w


def gather(data, idx, w):
    """
    按扁平索引与权重取值，data 可为 numpy 数组或 torch 张量 (..., C)

    Returns:
        (N, C) 插值结果
    """
    channels = data.shape[-1]
    flat = data.reshape(-1, channels)
    if not isinstance(flat, np.ndarray):
        import torch

        idx = torch.from_numpy(np.ascontiguousarray(idx))
        w = torch.from_numpy(np.ascontiguousarray(w))
    return (flat[idx] * w[..., None]).sum(-2)


def texture_taps(tex: Texture2D, uv: np.ndarray, layer=0) -> Tuple[np.ndarray, np.ndarray]:
    """按纹理自身的 wrap / filter 设置计算 taps，uv 形状 (N, 2)"""
    return bilinear_taps(
        uv[:, 0],
        uv[:, 1],
        layer,
        tex.layers,
        tex.height,
        tex.width,
        tex.wrap,
        tex.wrap,
        nearest=tex.filter == "nearest",
    )


def tex_lookup(tex: Texture2D, uv: np.ndarray, layer=0):
    """
    纹理查询

    Args:
        tex: 纹理
        uv: (N, 2) 纹理坐标
        layer: 层号 (N,) 或标量

    Returns:
        (values (N, C), idx (N, 4), w (N, 4))；权重之和恒为 1
    """
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    idx, w = texture_taps(tex, uv, layer)
    return gather(tex.data, idx, w), idx, w


# ============================================================================
# 环境图
# ============================================================================


def direction_to_uv(direction: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    direction = np.atleast_2d(direction)
    theta = np.arccos(np.clip(direction[:, 2], -1.0, 1.0))
    phi = np.mod(np.arctan2(direction[:, 1], direction[:, 0]), 2.0 * math.pi)
    return phi / (2.0 * math.pi), theta / math.pi


def uv_to_direction(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    phi = 2.0 * math.pi * np.asarray(u)
    theta = math.pi * np.asarray(v)
    sin_t = np.sin(theta)
    return np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), np.cos(theta)], axis=-1)


@dataclass
class EnvironmentMap:
    """
    等距柱状环境图

    data: (H, W, 3) 线性辐亮度
    marginal_cdf: (H + 1,) 行边缘分布
    conditional_cdf: (H, W + 1) 行内条件分布
    texel_prob: (H, W) 纹素离散概率
    """

    data: np.ndarray
    marginal_cdf: Optional[np.ndarray] = None
    conditional_cdf: Optional[np.ndarray] = None
    texel_prob: Optional[np.ndarray] = None
    is_black: bool = False

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32).astype(np.float64)
        if self.data.ndim != 3 or self.data.shape[-1] != 3:
            raise ValueError(f"环境图形状必须为 (H, W, 3): {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @classmethod
    def constant(cls, value, height: int, width: int) -> "EnvironmentMap":
        data = np.broadcast_to(np.asarray(value, dtype=np.float64), (height, width, 3)).copy()
        return build_env_cdf(cls(data))

    def mean_luminance(self) -> float:
        r, g, b = LUMINANCE_WEIGHTS
        return float((self.data @ np.array([r, g, b])).mean())


def env_taps(env: EnvironmentMap, direction: np.ndarray):
    u, v = direction_to_uv(direction)
    return bilinear_taps(u, v, 0, 1, env.height, env.width, "repeat", "clamp")


def env_lookup(env: EnvironmentMap, direction: np.ndarray):
    """
    环境图双线性查询

    Returns:
        (rgb (N, 3), idx (N, 4), w (N, 4))
    """
    idx, w = env_taps(env, direction)
    return gather(env.data, idx, w), idx, w


def build_env_cdf(env: EnvironmentMap) -> EnvironmentMap:
    """
    构建亮度 × sinθ 的边缘 / 条件 CDF (原地更新并返回)

    全黑环境图设置 is_black，采样退化为均匀球面。
    """
    height, width = env.height, env.width
    r, g, b = LUMINANCE_WEIGHTS
    lum = np.clip(env.data @ np.array([r, g, b]), 0.0, None)
    sin_t = np.sin((np.arange(height) + 0.5) / height * math.pi)
    weights = lum * sin_t[:, None]

    row_sums = weights.sum(axis=1)
    total = row_sums.sum()

    conditional = np.zeros((height, width + 1))
    safe_rows = np.where(row_sums > 0, row_sums, 1.0)
    conditional[:, 1:] = np.cumsum(weights, axis=1) / safe_rows[:, None]
    # 空行使用线性 CDF
    conditional[row_sums <= 0, 1:] = np.arange(1, width + 1) / width
    conditional[:, -1] = 1.0

    marginal = np.zeros(height + 1)
    if total > 0:
        marginal[1:] = np.cumsum(row_sums) / total
        env.texel_prob = weights / total
        env.is_black = False
    else:
        marginal[1:] = np.arange(1, height + 1) / height
        env.texel_prob = np.full((height, width), 1.0 / (height * width))
        env.is_black = True
        logger.warning("⚠️ 环境图全黑，光源采样退化为均匀球面")
    marginal[-1] = 1.0

    env.marginal_cdf = marginal
    env.conditional_cdf = conditional
    return env


def envmap_pdf(env: EnvironmentMap, direction: np.ndarray) -> np.ndarray:
    """与 sample_envmap 一致的立体角密度"""
    direction = np.atleast_2d(direction)
    if env.is_black:
        return np.full(len(direction), 1.0 / (4.0 * math.pi))
    u, v = direction_to_uv(direction)
    x = np.clip(np.floor(u * env.width).astype(np.int64), 0, env.width - 1)
    y = np.clip(np.floor(v * env.height).astype(np.int64), 0, env.height - 1)
    sin_t = np.clip(np.sin(v * math.pi), 1e-8, None)
    return env.texel_prob[y, x] * env.width * env.height / (2.0 * math.pi * math.pi * sin_t)


# ============================================================================
# 漫反射缓存 / 法线贴图
# ============================================================================


@dataclass
class DiffuseCache:
    """以 UV 为键的间接漫反射出射辐亮度缓存 (与方向无关)"""

    texture: Texture2D

    @classmethod
    def zeros(cls, layers: int, resolution: int) -> "DiffuseCache":
        return cls(Texture2D.constant((0.0, 0.0, 0.0), layers, resolution, resolution))

    def lookup(self, uv: np.ndarray, layer=0):
        return tex_lookup(self.texture, uv, layer)


def apply_normal_map(shading_n, tangent, bitangent, normal_texel):
    """
    切线空间法线扰动

    texel ∈ [0,1]³ 映射到 [-1,1]³；(0.5, 0.5, 1) 为恒等扰动。
    结果长度退化时返回原法线。支持 numpy / torch。
    """
    m = normal_texel[..., :3] * 2.0 - 1.0
    perturbed = (
        m[..., 0:1] * tangent + m[..., 1:2] * bitangent + m[..., 2:3] * shading_n
    )
    length2 = dot(perturbed, perturbed)
    return where((length2 > 1e-12)[..., None], normalize(perturbed), shading_n + 0.0 * perturbed)


# ============================================================================
# 参数集
# ============================================================================


@dataclass
class ParamSet:
    """可优化参数: k_d、k_orm、法线贴图、环境图、漫反射缓存"""

    k_d: Texture2D
    k_orm: Texture2D
    normal: Texture2D
    env: EnvironmentMap
    cache: DiffuseCache
    meta: Dict[str, float] = field(default_factory=dict)

    def leaves(self) -> Dict[str, np.ndarray]:
        """叶子参数数组 (与存储共享内存)"""
        return {
            "k_d": self.k_d.data,
            "k_orm": self.k_orm.data,
            "normal": self.normal.data,
            "env": self.env.data,
            "cache": self.cache.texture.data,
        }

    def copy(self) -> "ParamSet":
        return ParamSet(
            k_d=Texture2D(self.k_d.data.copy(), self.k_d.wrap, self.k_d.filter),
            k_orm=Texture2D(self.k_orm.data.copy(), self.k_orm.wrap, self.k_orm.filter),
            normal=Texture2D(self.normal.data.copy(), self.normal.wrap, self.normal.filter),
            env=build_env_cdf(EnvironmentMap(self.env.data.copy())),
            cache=DiffuseCache(
                Texture2D(
                    self.cache.texture.data.copy(),
                    self.cache.texture.wrap,
                    self.cache.texture.filter,
                )
            ),
            meta=dict(self.meta),
        )

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.leaves().values())


def project_params(params: ParamSet) -> ParamSet:
    """
    投影到合法范围 (原地): k_d、k_orm、法线 ∈ [0, 1]，环境图与缓存 ≥ 0
    并舍入到 float32 可表示的值，保存的检查点可以逐位还原。

    幂等: project(project(θ)) == project(θ)。
    """
    for name in ("k_d", "k_orm", "normal"):
        np.clip(params.leaves()[name], 0.0, 1.0, out=params.leaves()[name])
    np.clip(params.env.data, 0.0, None, out=params.env.data)
    np.clip(params.cache.texture.data, 0.0, None, out=params.cache.texture.data)
    for data in params.leaves().values():
        snap_to_float32(data)
    return params


def save_params(params: ParamSet, out_dir) -> Path:
    """把每个叶子写成 RFM1 文件"""
    from scripts.image_io import write_rfm

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, data in params.leaves().items():
        write_rfm(out_dir / f"{name}.rfm", data)
    logger.info(f"✅ 参数已保存: {out_dir}")
    return out_dir


def load_params(in_dir, like: Optional[ParamSet] = None) -> ParamSet:
    """从 RFM1 目录加载参数；给定 like 时沿用其 wrap / filter 设置"""
    from scripts.image_io import read_rfm

    in_dir = Path(in_dir)
    arrays = {name: read_rfm(in_dir / f"{name}.rfm").astype(np.float64) for name in LEAF_NAMES}

    def _tex(name: str) -> Texture2D:
        ref = getattr(like, name) if like is not None else None
        if name == "cache":
            ref = like.cache.texture if like is not None else None
        if ref is None:
            return Texture2D(arrays[name])
        return Texture2D(arrays[name], ref.wrap, ref.filter)

    return ParamSet(
        k_d=_tex("k_d"),
        k_orm=_tex("k_orm"),
        normal=_tex("normal"),
        env=build_env_cdf(EnvironmentMap(arrays["env"][0])),
        cache=DiffuseCache(_tex("cache")),
    )
