"""
多次蒙特卡洛积分器

渲染分两段:
1. 采样 / 追踪 (numpy + numba): 每个 tile 独立的 Rng 子流，逐层生成方向样本、
   做可见性测试，把所有采样决策 (方向、MIS 估计系数、纹素索引与权重、子顶点
   索引) 记录到 TileTape。
2. 着色 (torch): shade_tape 按层自底向上计算辐亮度。前向渲染在 no_grad 下调用，
   伴随阶段对同一 tape 带梯度重放，因此重放结果与前向值逐位一致。

每个着色点:
- 一次着色点 (level 0) 及关闭加速时的二次着色点: n_light 个环境光样本 +
  n_brdf 个 BRDF 样本，balance heuristic 合并；被遮挡的样本在剩余深度内继续
  追踪到遮挡点，否则贡献为 0
- 自适应二次着色点: 漫反射读缓存，镜面部分只追踪 n_spec_secondary 条 GGX 波瓣光线
"""

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from app.models import RenderConfig
from scripts.assets import (
    ParamSet,
    apply_normal_map,
    env_lookup,
    env_taps,
    envmap_pdf,
    gather,
    texture_taps,
)
from scripts.brdf import SurfaceMaterial, eval_bsdf_indirect, eval_bsdf_primary
from scripts.config import FIREFLY_FACTOR, T_MIN, THREADS_ENV_VAR
from scripts.errors import DataError, TapeMismatchError
from scripts.geometry import Camera, Hit, trace
from scripts.rng import Rng
from scripts.sampling import (
    bsdf_pdf,
    orthonormal_basis,
    sample_bsdf,
    sample_envmap,
    sample_ggx,
    specular_probability,
)
from scripts import vecmath
from scripts.vecmath import dot

logger = logging.getLogger(__name__)

Taps = Tuple[np.ndarray, np.ndarray]


# ============================================================================
# 数据结构
# ============================================================================


@dataclass
class SurfacePoints:
    """
    一批着色点 (法线已翻转到 wo 一侧)

    ns 为插值着色法线 (未做法线贴图扰动)，tangent / bitangent 与 ns 正交。
    """

    position: np.ndarray
    ng: np.ndarray
    ns: np.ndarray
    tangent: np.ndarray
    bitangent: np.ndarray
    uv: np.ndarray
    layer: np.ndarray
    wo: np.ndarray

    def __len__(self) -> int:
        return len(self.position)


@dataclass
class BounceRecord:
    """
    一层着色点的采样记录

    wi / est / env_idx / env_w / child 的前两维为 (M, S)：M 个着色点，每点 S 个样本。
    est 为样本的估计系数 (MIS 合并后的 1/pdf)，无效样本为 0。
    child 指向下一层着色点，不继续追踪的样本指向填充行 (= 下一层点数)。
    """

    adaptive: bool
    disney: bool
    specular: bool
    kd_taps: Taps
    orm_taps: Taps
    normal_taps: Taps
    cache_taps: Optional[Taps]
    ns_geom: np.ndarray
    tangent: np.ndarray
    bitangent: np.ndarray
    wo: np.ndarray
    wi: np.ndarray
    est: np.ndarray
    env_idx: np.ndarray
    env_w: np.ndarray
    child: np.ndarray

    @property
    def points(self) -> int:
        return len(self.wo)

    @property
    def samples(self) -> int:
        return self.wi.shape[1]


@dataclass
class TileTape:
    """
    一个 tile 的完整路径记录 (伴随阶段的输入)

    cam_vertex: (P·spp,) 相机样本对应的一次着色点，Miss 指向填充行
    cam_env_idx / cam_env_w: Miss 样本的环境图纹素，命中样本权重为 0
    """

    tile: int
    x0: int
    y0: int
    width: int
    height: int
    spp: int
    clamp: float
    levels: List[BounceRecord]
    cam_vertex: np.ndarray
    cam_env_idx: np.ndarray
    cam_env_w: np.ndarray
    leaf_shapes: Dict[str, Tuple[int, ...]]
    rays: int = 0

    @property
    def pixels(self) -> int:
        return self.width * self.height


@dataclass
class RenderStats:
    rays: int = 0
    seconds: float = 0.0
    nan_count: int = 0
    workers: int = 1

    @property
    def rays_per_sec(self) -> float:
        return self.rays / self.seconds if self.seconds > 0 else 0.0

    def line(self) -> str:
        return (
            f"rays={self.rays} time={self.seconds:.3f}s rays/sec={self.rays_per_sec:.0f} "
            f"nan={self.nan_count} workers={self.workers}"
        )


@dataclass
class RadianceImage:
    """
    渲染结果

    radiance: (H, W, 3) 线性辐亮度
    sample_count: (H, W) 有效 (有限) 样本数
    diffuse: (H, W, 3) C_diff，一次着色点的 Lambert 漫反射出射辐亮度
    uv / layer / hit / position: 像素中心光线的表面信息
    """

    radiance: np.ndarray
    sample_count: np.ndarray
    diffuse: np.ndarray
    uv: np.ndarray
    layer: np.ndarray
    hit: np.ndarray
    position: np.ndarray
    stats: RenderStats = field(default_factory=RenderStats)
    tapes: Optional[List[TileTape]] = None

    @property
    def width(self) -> int:
        return self.radiance.shape[1]

    @property
    def height(self) -> int:
        return self.radiance.shape[0]


# ============================================================================
# 着色点与材质
# ============================================================================


def surface_points(hit: Hit, mask: np.ndarray, wo: np.ndarray) -> SurfacePoints:
    """从求交结果构造着色点，几何 / 着色法线翻转到 wo 一侧"""
    ng = hit.ng[mask]
    ns = hit.ns[mask]
    wo = wo[mask]
    flip = np.where((ng * wo).sum(-1) < 0.0, -1.0, 1.0)[:, None]
    ng = ng * flip
    ns = ns * flip
    # 插值法线与几何法线不在同侧时退回几何法线
    ns = np.where(((ns * ng).sum(-1) > 0.0)[:, None], ns, ng)

    t = hit.tangent[mask]
    t = t - ns * (t * ns).sum(-1, keepdims=True)
    t_len = np.linalg.norm(t, axis=1, keepdims=True)
    fallback, _ = orthonormal_basis(ns)
    t = np.where(t_len > 1e-8, t / np.where(t_len > 1e-8, t_len, 1.0), fallback)
    b = hit.tangent_sign[mask][:, None] * np.cross(ns, t)
    return SurfacePoints(
        position=hit.position[mask],
        ng=ng,
        ns=ns,
        tangent=t,
        bitangent=b,
        uv=hit.uv[mask],
        layer=hit.material_id[mask],
        wo=wo,
    )


@dataclass
class _MaterialSample:
    k_d: np.ndarray
    roughness: np.ndarray
    metalness: np.ndarray
    normal: np.ndarray


def _material_numpy(params: ParamSet, sp: SurfacePoints):
    kd_taps = texture_taps(params.k_d, sp.uv, sp.layer)
    orm_taps = texture_taps(params.k_orm, sp.uv, sp.layer)
    normal_taps = texture_taps(params.normal, sp.uv, sp.layer)
    k_d = gather(params.k_d.data, *kd_taps)
    orm = gather(params.k_orm.data, *orm_taps)
    texel = gather(params.normal.data, *normal_taps)
    n = apply_normal_map(sp.ns, sp.tangent, sp.bitangent, texel)
    mat = _MaterialSample(k_d, orm[:, 1], orm[:, 2], n)
    return mat, (kd_taps, orm_taps, normal_taps)


def _material_torch(rec: BounceRecord, leaves: Dict[str, torch.Tensor]) -> SurfaceMaterial:
    k_d = gather(leaves["k_d"], *rec.kd_taps)
    orm = gather(leaves["k_orm"], *rec.orm_taps)
    texel = gather(leaves["normal"], *rec.normal_taps)
    n = apply_normal_map(
        torch.from_numpy(rec.ns_geom),
        torch.from_numpy(rec.tangent),
        torch.from_numpy(rec.bitangent),
        texel,
    )
    return SurfaceMaterial(
        k_d=k_d[:, None, :],
        roughness=orm[:, None, 1],
        metalness=orm[:, None, 2],
        shading_normal=n[:, None, :],
        occlusion=orm[:, None, 0],
    )


# ============================================================================
# 采样 / 追踪
# ============================================================================


def _adaptive_level(cfg: RenderConfig, k: int) -> bool:
    if not cfg.adaptive or k < 1:
        return False
    return k == cfg.depth - 1 or cfg.cache_every_bounce


def _repeat(a: np.ndarray, count: int) -> np.ndarray:
    return np.repeat(a, count, axis=0)


def _sample_level(params: ParamSet, sp: SurfacePoints, mat: _MaterialSample, cfg: RenderConfig,
                  k: int, adaptive: bool, rng: Rng):
    """
    为一层着色点生成方向样本

    Returns:
        (wi (M, S, 3), est (M, S), valid (M, S))
    """
    m = len(sp)
    if adaptive:
        s = cfg.n_spec_secondary
        spec = sample_ggx(
            _repeat(mat.normal, s), _repeat(sp.wo, s), _repeat(mat.roughness, s),
            u=rng.uniform((m * s, 2)),
        )
        wi = spec.direction.reshape(m, s, 3)
        pdf = spec.pdf.reshape(m, s)
        est = np.where(pdf > 0.0, 1.0 / (s * np.where(pdf > 0.0, pdf, 1.0)), 0.0)
        pdf_self = pdf
    else:
        n_light, n_brdf = (
            (cfg.n_light, cfg.n_brdf) if k == 0 else (cfg.n_light_secondary, cfg.n_brdf_secondary)
        )
        s = n_light + n_brdf
        p_spec = specular_probability(mat.k_d, mat.metalness, cfg.specular)
        wi_parts, pdf_parts = [], []
        if n_light > 0:
            light = sample_envmap(params.env, m * n_light, u=rng.uniform((m * n_light, 2)))
            wi_parts.append(light.direction.reshape(m, n_light, 3))
            pdf_parts.append(light.pdf.reshape(m, n_light))
        if n_brdf > 0:
            brdf = sample_bsdf(
                _repeat(mat.normal, n_brdf), _repeat(sp.wo, n_brdf),
                _repeat(mat.roughness, n_brdf), _repeat(p_spec, n_brdf),
                u=rng.uniform((m * n_brdf, 3)),
            )
            wi_parts.append(brdf.direction.reshape(m, n_brdf, 3))
            pdf_parts.append(brdf.pdf.reshape(m, n_brdf))
        wi = np.concatenate(wi_parts, axis=1)
        pdf_self = np.concatenate(pdf_parts, axis=1)

        flat_wi = wi.reshape(-1, 3)
        pl = envmap_pdf(params.env, flat_wi).reshape(m, s)
        pb = bsdf_pdf(
            _repeat(mat.normal, s), _repeat(sp.wo, s), flat_wi,
            _repeat(mat.roughness, s), _repeat(p_spec, s),
        ).reshape(m, s)
        denom = n_light * pl + n_brdf * pb
        est = np.where(denom > 0.0, 1.0 / np.where(denom > 0.0, denom, 1.0), 0.0)

    valid = (
        ((sp.ng[:, None, :] * wi).sum(-1) > 0.0)
        & ((mat.normal[:, None, :] * wi).sum(-1) > 0.0)
        & (pdf_self > 0.0)
        & (est > 0.0)
        & np.isfinite(est)
    )
    wi = np.where(valid[..., None], wi, mat.normal[:, None, :])
    est = np.where(valid, est, 0.0)
    return wi, est, valid


def _trace_levels(scene, sp: SurfacePoints, cfg: RenderConfig, rng: Rng, first_level: int = 0):
    """
    从一批着色点开始逐层采样 / 追踪

    Args:
        first_level: 这批着色点所在的层 (0 为一次着色点)

    Returns:
        (levels, rays)
    """
    params = scene.params
    levels: List[BounceRecord] = []
    rays = 0
    k = first_level
    depth = max(cfg.depth, first_level + 1)
    while sp is not None and len(sp) > 0 and k < depth:
        level_rng = rng.spawn(1, k)
        adaptive = _adaptive_level(cfg, k)
        mat, (kd_taps, orm_taps, normal_taps) = _material_numpy(params, sp)
        wi, est, valid = _sample_level(params, sp, mat, cfg, k, adaptive, level_rng)
        m, s = est.shape

        origins = _repeat(sp.position + scene.eps_geom * sp.ng, s)
        dirs = wi.reshape(-1, 3)
        flat_valid = valid.reshape(-1)
        hit = trace(scene.bvh, scene.mesh, origins[flat_valid], dirs[flat_valid], t_min=T_MIN)
        rays += int(flat_valid.sum())

        blocked = np.zeros(m * s, dtype=bool)
        blocked[flat_valid] = hit.valid
        open_sky = flat_valid & ~blocked

        env_idx = np.zeros((m * s, 4), dtype=np.int64)
        env_w = np.zeros((m * s, 4))
        if open_sky.any():
            idx, w = env_taps(params.env, dirs[open_sky])
            env_idx[open_sky] = idx
            env_w[open_sky] = w

        continues = k + 1 < depth
        child_sp = None
        if continues and blocked.any():
            full = Hit(**{
                name: _scatter_hits(getattr(hit, name), flat_valid)
                for name in Hit.__dataclass_fields__
            })
            child_sp = surface_points(full, blocked, -dirs)
        next_count = len(child_sp) if child_sp is not None else 0
        child = np.full(m * s, next_count, dtype=np.int64)
        if next_count:
            child[blocked] = np.arange(next_count)

        cache_taps = None
        if adaptive and cfg.use_diffuse_cache:
            cache_taps = texture_taps(params.cache.texture, sp.uv, sp.layer)

        levels.append(
            BounceRecord(
                adaptive=adaptive,
                disney=cfg.disney_primary and k == 0,
                specular=cfg.specular,
                kd_taps=kd_taps,
                orm_taps=orm_taps,
                normal_taps=normal_taps,
                cache_taps=cache_taps,
                ns_geom=sp.ns,
                tangent=sp.tangent,
                bitangent=sp.bitangent,
                wo=sp.wo,
                wi=wi,
                est=est,
                env_idx=env_idx.reshape(m, s, 4),
                env_w=env_w.reshape(m, s, 4),
                child=child.reshape(m, s),
            )
        )
        sp = child_sp
        k += 1
    return levels, rays


def _scatter_hits(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """把子集求交结果放回完整数组 (未追踪的位置填 0)"""
    out = np.zeros((len(mask),) + values.shape[1:], dtype=values.dtype)
    out[mask] = values
    return out


# ============================================================================
# 着色 (torch，前向与伴随共用)
# ============================================================================


def _shade_level(rec: BounceRecord, leaves: Dict[str, torch.Tensor],
                 child_radiance: Optional[torch.Tensor], want_diffuse: bool):
    m, s = rec.points, rec.samples
    wi = torch.from_numpy(rec.wi)
    est = torch.from_numpy(rec.est)
    wo = torch.from_numpy(rec.wo)[:, None, :]

    li = gather(leaves["env"], rec.env_idx.reshape(-1, 4), rec.env_w.reshape(-1, 4)).reshape(m, s, 3)
    if child_radiance is None:
        child_radiance = li.new_zeros((0, 3))
    padded = torch.cat([child_radiance, li.new_zeros((1, 3))])
    li = li + padded[torch.from_numpy(rec.child)]

    mat = _material_torch(rec, leaves)
    n = mat.shading_normal
    weight = (dot(n, wi).clip(0.0, None) * est)[..., None] * li

    if rec.adaptive:
        f = eval_bsdf_indirect(mat, wi, wo, n, lobe="specular")
    else:
        lobe = "all" if rec.specular else "diffuse"
        f = eval_bsdf_primary(mat, wi, wo, n, lobe=lobe, disney=rec.disney)
    radiance = (f * weight).sum(1)
    if rec.cache_taps is not None:
        radiance = radiance + gather(leaves["cache"], *rec.cache_taps)

    diffuse = None
    if want_diffuse:
        f_diff = eval_bsdf_indirect(mat, wi, wo, n, lobe="diffuse")
        diffuse = (f_diff * weight).sum(1)
    return radiance, diffuse


def shade_levels(levels: List[BounceRecord], leaves: Dict[str, torch.Tensor]):
    """
    自底向上着色

    Returns:
        (一次着色点辐亮度 (M0, 3), 一次着色点 C_diff (M0, 3))；无着色点时为空张量
    """
    child = None
    diffuse = None
    for k in range(len(levels) - 1, -1, -1):
        child, d = _shade_level(levels[k], leaves, child, want_diffuse=k == 0)
        if k == 0:
            diffuse = d
    if child is None:
        empty = leaves["env"].new_zeros((0, 3))
        return empty, empty
    return child, diffuse


def _camera_samples(levels: List[BounceRecord], vertex: np.ndarray, env_idx: np.ndarray,
                    env_w: np.ndarray, clamp: float, leaves: Dict[str, torch.Tensor]):
    """
    逐样本的相机辐亮度与 C_diff

    Returns:
        (radiance (N, 3), 有限掩码 (N,), diffuse (N, 3), diffuse 掩码 (N,))
    """
    l0, d0 = shade_levels(levels, leaves)
    index = torch.from_numpy(vertex)
    zero = leaves["env"].new_zeros((1, 3))

    radiance = torch.cat([l0, zero])[index] + gather(leaves["env"], env_idx, env_w)
    finite = torch.isfinite(radiance).all(-1)
    radiance = torch.where(finite[:, None], radiance, torch.zeros_like(radiance))
    if math.isfinite(clamp):
        radiance = radiance.clamp(max=clamp)

    diffuse = torch.cat([d0, zero])[index]
    diffuse_ok = (index < len(l0)) & torch.isfinite(diffuse).all(-1)
    diffuse = torch.where(diffuse_ok[:, None], diffuse, torch.zeros_like(diffuse))
    return radiance, finite, diffuse, diffuse_ok


def shade_tape(tape: TileTape, leaves: Dict[str, torch.Tensor]):
    """
    由 tape 计算 tile 的像素值

    Args:
        tape: 路径记录
        leaves: 叶子参数张量 (k_d, k_orm, normal, env, cache)

    Returns:
        (C (P, 3), C_diff (P, 3), 样本数 (P,), 非有限样本数)
    """
    radiance, finite, diffuse, diffuse_ok = _camera_samples(
        tape.levels, tape.cam_vertex, tape.cam_env_idx, tape.cam_env_w, tape.clamp, leaves
    )
    pixels, spp = tape.pixels, tape.spp
    count = finite.reshape(pixels, spp).sum(1)
    color = radiance.reshape(pixels, spp, 3).sum(1) / count.clamp(min=1)[:, None]
    d_count = diffuse_ok.reshape(pixels, spp).sum(1)
    c_diff = diffuse.reshape(pixels, spp, 3).sum(1) / d_count.clamp(min=1)[:, None]
    return color, c_diff, count, int((~finite).sum())


def leaf_tensors(params: ParamSet, requires_grad: bool = False) -> Dict[str, torch.Tensor]:
    """与 ParamSet 共享内存的叶子张量；requires_grad 时返回独立副本"""
    leaves = {}
    for name, arr in params.leaves().items():
        t = torch.from_numpy(arr)
        if requires_grad:
            t = t.detach().clone().requires_grad_(True)
        leaves[name] = t
    return leaves


# ============================================================================
# 单点 / 单光线估计
# ============================================================================


def _trace_camera_rays(scene, origins: np.ndarray, dirs: np.ndarray, cfg: RenderConfig, rng: Rng):
    """
    追踪一批相机光线并记录后续各层采样

    Returns:
        (levels, vertex, env_idx, env_w, rays)
    """
    primary = trace(scene.bvh, scene.mesh, origins, dirs)
    sp = surface_points(primary, primary.valid, -dirs)
    levels, rays = _trace_levels(scene, sp, cfg, rng)

    vertex = np.full(len(dirs), len(sp), dtype=np.int64)
    vertex[primary.valid] = np.arange(len(sp))
    env_idx = np.zeros((len(dirs), 4), dtype=np.int64)
    env_w = np.zeros((len(dirs), 4))
    miss = ~primary.valid
    if miss.any():
        idx, w = env_taps(scene.params.env, dirs[miss])
        env_idx[miss] = idx
        env_w[miss] = w
    return levels, vertex, env_idx, env_w, rays + len(dirs)


def shade_direct(scene, sp: SurfacePoints, cfg: Optional[RenderConfig] = None, rng: Optional[Rng] = None):
    """
    一次着色点的 MIS 直接光照

    n_light 个环境光样本与 n_brdf 个 BRDF 样本按 balance heuristic 合并，
    每个样本做遮挡测试，被遮挡样本贡献为 0 (depth = 1 语义)。

    Returns:
        (radiance (M, 3), C_diff (M, 3))
    """
    cfg = (cfg or RenderConfig()).model_copy(update={"depth": 1})
    levels, _ = _trace_levels(scene, sp, cfg, rng or Rng(0))
    with torch.no_grad():
        radiance, diffuse = shade_levels(levels, leaf_tensors(scene.params))
    if len(levels) == 0:
        return np.zeros((len(sp), 3)), np.zeros((len(sp), 3))
    return radiance.numpy(), diffuse.numpy()


def shade_indirect(scene, sp: SurfacePoints, cfg: Optional[RenderConfig] = None,
                   rng: Optional[Rng] = None, level: int = 1) -> np.ndarray:
    """
    遮挡点 (第 level 层着色点) 的出射辐亮度

    adaptive 开启且位于最深层时: 缓存漫反射 + n_spec_secondary 条镜面波瓣光线；
    否则完整 MIS。深度已用完时只计算未被遮挡的环境光。

    Returns:
        (M, 3) 辐亮度
    """
    cfg = cfg or RenderConfig()
    levels, _ = _trace_levels(scene, sp, cfg, rng or Rng(0), first_level=level)
    if len(levels) == 0:
        return np.zeros((len(sp), 3))
    with torch.no_grad():
        radiance, _ = shade_levels(levels, leaf_tensors(scene.params))
    return radiance.numpy()


def estimate_radiance(scene, origins, dirs, cfg: Optional[RenderConfig] = None,
                      rng: Optional[Rng] = None):
    """
    每条光线一个样本的辐亮度估计

    Miss 返回环境图查询值；命中时为直接光照 + 遮挡样本的间接项，并做萤火虫截断。
    非有限样本置 0 并计数。

    Returns:
        (radiance (N, 3), C_diff (N, 3), 非有限样本数)
    """
    cfg = cfg or RenderConfig()
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    origins = np.broadcast_to(origins, dirs.shape)
    levels, vertex, env_idx, env_w, _ = _trace_camera_rays(scene, origins, dirs, cfg, rng or Rng(0))
    with torch.no_grad():
        radiance, finite, diffuse, _ = _camera_samples(
            levels, vertex, env_idx, env_w, firefly_clamp(scene.params, cfg),
            leaf_tensors(scene.params),
        )
    return radiance.numpy(), diffuse.numpy(), int((~finite).sum())


# ============================================================================
# 渲染
# ============================================================================


def resolve_workers(workers: Optional[int] = None) -> int:
    """worker 数: 配置值 (或 CPU 数)，再受 REFMC_THREADS 限制"""
    count = workers or os.cpu_count() or 1
    cap = os.environ.get(THREADS_ENV_VAR)
    if cap:
        try:
            count = min(count, max(1, int(cap)))
        except ValueError:
            logger.warning(f"⚠️ 忽略无效的 {THREADS_ENV_VAR}={cap}")
    return max(1, count)


def firefly_clamp(params: ParamSet, cfg: RenderConfig) -> float:
    if cfg.firefly is not None:
        return float(cfg.firefly)
    mean = params.env.mean_luminance()
    return FIREFLY_FACTOR * mean if mean > 0 else math.inf


def _tiles(width: int, height: int, size: int):
    tiles = []
    for y0 in range(0, height, size):
        for x0 in range(0, width, size):
            tiles.append((x0, y0, min(size, width - x0), min(size, height - y0)))
    return tiles


@dataclass
class _TileResult:
    tape: TileTape
    color: np.ndarray
    diffuse: np.ndarray
    count: np.ndarray
    nan_count: int
    uv: np.ndarray
    layer: np.ndarray
    hit: np.ndarray
    position: np.ndarray


def _trace_tile(scene, camera: Camera, cfg: RenderConfig, rng: Rng, tile_index: int,
                tile, clamp: float) -> Tuple[TileTape, Dict[str, np.ndarray]]:
    x0, y0, w, h = tile
    ys, xs = np.mgrid[y0:y0 + h, x0:x0 + w]
    px = xs.reshape(-1)
    py = ys.reshape(-1)
    spp = cfg.spp

    # 像素中心光线: 辅助缓冲
    origins, dirs = camera.generate_rays(px, py)
    center = trace(scene.bvh, scene.mesh, origins, dirs)
    aux = {
        "uv": center.uv,
        "layer": center.material_id,
        "hit": center.valid,
        "position": center.position,
    }

    jitter = rng.spawn(0).uniform((len(px) * spp, 2))
    origins, dirs = camera.generate_rays(np.repeat(px, spp), np.repeat(py, spp), jitter)
    levels, vertex, env_idx, env_w, rays = _trace_camera_rays(scene, origins, dirs, cfg, rng)

    tape = TileTape(
        tile=tile_index,
        x0=x0,
        y0=y0,
        width=w,
        height=h,
        spp=spp,
        clamp=clamp,
        levels=levels,
        cam_vertex=vertex,
        cam_env_idx=env_idx,
        cam_env_w=env_w,
        leaf_shapes={name: a.shape for name, a in scene.params.leaves().items()},
        rays=rays + len(px),
    )
    return tape, aux


def render(scene, camera: Camera, cfg: Optional[RenderConfig] = None, seed: int = 0,
           record_tape: bool = False, shading_params: Optional[ParamSet] = None) -> RadianceImage:
    """
    渲染一幅图像

    Args:
        scene: Scene
        camera: 针孔相机
        cfg: 渲染配置
        seed: 随机种子；结果与 worker 数无关
        record_tape: 是否保留 TileTape 供伴随阶段使用
        shading_params: 着色用的参数集 (默认 scene.params)。追踪与采样始终使用 scene.params，
            方向与 pdf 不随它变化

    Returns:
        RadianceImage
    """
    cfg = cfg or RenderConfig()
    start = time.perf_counter()
    width, height = camera.width, camera.height
    tiles = _tiles(width, height, cfg.tile_size)
    clamp = firefly_clamp(scene.params, cfg)
    workers = resolve_workers(cfg.workers)
    root = Rng(seed)
    if shading_params is not None:
        shapes = {name: a.shape for name, a in shading_params.leaves().items()}
        if shapes != {name: a.shape for name, a in scene.params.leaves().items()}:
            raise TapeMismatchError(f"着色参数形状与场景参数不一致: {shapes}")
    leaves = leaf_tensors(shading_params if shading_params is not None else scene.params)

    def _run(i: int) -> _TileResult:
        tape, aux = _trace_tile(scene, camera, cfg, root.spawn(i), i, tiles[i], clamp)
        with torch.no_grad():
            color, diffuse, count, nan_count = shade_tape(tape, leaves)
        return _TileResult(
            tape=tape,
            color=color.numpy(),
            diffuse=diffuse.numpy(),
            count=count.numpy(),
            nan_count=nan_count,
            **aux,
        )

    if workers == 1 or len(tiles) == 1:
        results = [_run(i) for i in range(len(tiles))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run, range(len(tiles))))

    radiance = np.zeros((height, width, 3))
    diffuse = np.zeros((height, width, 3))
    count = np.zeros((height, width), dtype=np.int64)
    uv = np.zeros((height, width, 2))
    layer = np.full((height, width), -1, dtype=np.int64)
    hit = np.zeros((height, width), dtype=bool)
    position = np.zeros((height, width, 3))
    stats = RenderStats(workers=workers)
    for res in results:
        t = res.tape
        region = (slice(t.y0, t.y0 + t.height), slice(t.x0, t.x0 + t.width))
        radiance[region] = res.color.reshape(t.height, t.width, 3)
        diffuse[region] = res.diffuse.reshape(t.height, t.width, 3)
        count[region] = res.count.reshape(t.height, t.width)
        uv[region] = res.uv.reshape(t.height, t.width, 2)
        layer[region] = res.layer.reshape(t.height, t.width)
        hit[region] = res.hit.reshape(t.height, t.width)
        position[region] = res.position.reshape(t.height, t.width, 3)
        stats.rays += t.rays
        stats.nan_count += res.nan_count
    stats.seconds = time.perf_counter() - start

    if stats.nan_count:
        logger.warning(f"⚠️ 丢弃 {stats.nan_count} 个非有限样本")
    logger.debug(f"📝 渲染完成 {width}x{height}: {stats.line()}")
    return RadianceImage(
        radiance=radiance,
        sample_count=count,
        diffuse=diffuse,
        uv=uv,
        layer=layer,
        hit=hit,
        position=position,
        stats=stats,
        tapes=[r.tape for r in results] if record_tape else None,
    )


# ============================================================================
# 参考路径追踪器
# ============================================================================


def render_reference(scene, camera: Camera, depth: int = 8, spp: int = 64, seed: int = 0,
                     disney_primary: bool = True, specular: bool = True) -> np.ndarray:
    """
    BSDF 采样的单向路径追踪 (独立于 render 的对照实现，无萤火虫截断)

    depth 为最大散射次数；材质模型与 render 相同 (Disney 漫反射只用于一次着色点)。

    Returns:
        (H, W, 3) 线性辐亮度
    """
    params = scene.params
    rng = Rng(seed).spawn(7)
    ys, xs = np.mgrid[0:camera.height, 0:camera.width]
    px = np.repeat(xs.reshape(-1), spp)
    py = np.repeat(ys.reshape(-1), spp)
    origins, dirs = camera.generate_rays(px, py, rng.spawn(0).uniform((len(px), 2)))

    n = len(dirs)
    radiance = np.zeros((n, 3))
    throughput = np.ones((n, 3))
    alive = np.ones(n, dtype=bool)

    for bounce in range(depth + 1):
        ids = np.flatnonzero(alive)
        if len(ids) == 0:
            break
        hit = trace(scene.bvh, scene.mesh, origins[ids], dirs[ids])
        miss = ids[~hit.valid]
        if len(miss):
            radiance[miss] += throughput[miss] * env_lookup(params.env, dirs[miss])[0]
        alive[miss] = False
        if bounce == depth:
            break
        traced = ids
        ids = ids[hit.valid]
        if len(ids) == 0:
            break

        sp = surface_points(hit, hit.valid, -dirs[traced])
        mat, _ = _material_numpy(params, sp)
        p_spec = specular_probability(mat.k_d, mat.metalness, specular)
        sample = sample_bsdf(
            mat.normal, sp.wo, mat.roughness, p_spec, u=rng.spawn(1, bounce).uniform((len(ids), 3))
        )
        surface = SurfaceMaterial(mat.k_d, mat.roughness, mat.metalness, mat.normal)
        f = eval_bsdf_primary(
            surface, sample.direction, sp.wo, mat.normal,
            lobe="all" if specular else "diffuse",
            disney=disney_primary and bounce == 0,
        )
        cos = (mat.normal * sample.direction).sum(-1)
        ok = (sample.pdf > 0.0) & ((sp.ng * sample.direction).sum(-1) > 0.0) & (cos > 0.0)
        factor = np.where(
            ok[:, None], f * (cos / np.where(ok, sample.pdf, 1.0))[:, None], 0.0
        )
        throughput[ids] *= factor
        alive[ids[~ok]] = False
        origins[ids] = sp.position + scene.eps_geom * sp.ng
        dirs[ids] = sample.direction

    return radiance.reshape(camera.height, camera.width, spp, 3).mean(axis=2)


# ============================================================================
# 漫反射缓存烘焙
# ============================================================================


def _rasterize_texels(mesh, layers: int, resolution: int):
    """
    在 UV 空间光栅化每个三角形，求出纹素中心对应的表面位置

    Returns:
        (prim, b1, b2, flat texel index)
    """
    uvs = mesh.uvs[mesh.indices] * resolution - 0.5
    prims, b1s, b2s, flats = [], [], [], []
    for prim in range(mesh.triangle_count):
        a, b, c = uvs[prim]
        lo = np.floor(np.minimum(np.minimum(a, b), c)).astype(int)
        hi = np.ceil(np.maximum(np.maximum(a, b), c)).astype(int)
        xs = np.arange(max(lo[0], 0), min(hi[0], resolution - 1) + 1)
        ys = np.arange(max(lo[1], 0), min(hi[1], resolution - 1) + 1)
        if len(xs) == 0 or len(ys) == 0:
            continue
        gx, gy = np.meshgrid(xs, ys)
        px = gx.reshape(-1).astype(np.float64)
        py = gy.reshape(-1).astype(np.float64)
        e1 = b - a
        e2 = c - a
        det = e1[0] * e2[1] - e1[1] * e2[0]
        if abs(det) < 1e-14:
            continue
        dx = px - a[0]
        dy = py - a[1]
        w1 = (dx * e2[1] - dy * e2[0]) / det
        w2 = (e1[0] * dy - e1[1] * dx) / det
        inside = (w1 >= -1e-9) & (w2 >= -1e-9) & (w1 + w2 <= 1.0 + 1e-9)
        if not inside.any():
            continue
        layer = int(mesh.material_id[prim])
        prims.append(np.full(int(inside.sum()), prim))
        b1s.append(w1[inside])
        b2s.append(w2[inside])
        flats.append((layer * resolution + gy.reshape(-1)[inside]) * resolution + gx.reshape(-1)[inside])
    if not prims:
        empty = np.zeros(0)
        return empty.astype(np.int64), empty, empty, empty.astype(np.int64)
    return (
        np.concatenate(prims),
        np.concatenate(b1s),
        np.concatenate(b2s),
        np.concatenate(flats).astype(np.int64),
    )


def bake_diffuse_cache(scene, cfg: Optional[RenderConfig] = None, seed: int = 0, spp: int = 16,
                       chunk: int = 4096):
    """
    对每个缓存纹素重新估计 Lambert 漫反射出射辐亮度

    纹素中心通过 UV 光栅化映射到表面，wo 取着色法线方向 (漫反射与 wo 无关)。

    Returns:
        (data (L, R, R, 3), coverage (L, R, R) bool)
    """
    cfg = cfg or RenderConfig()
    cache = scene.params.cache.texture
    layers, resolution = cache.layers, cache.height
    data = np.zeros((layers * resolution * resolution, 3))
    coverage = np.zeros(layers * resolution * resolution, dtype=bool)
    if scene.mesh is None:
        return data.reshape(layers, resolution, resolution, 3), coverage.reshape(layers, resolution, resolution)

    prim, b1, b2, flat = _rasterize_texels(scene.mesh, layers, resolution)
    position, ng, ns, uv, tangent, sign, material = scene.mesh.surface_at(prim, b1, b2)
    # 纹素中心处的 UV 与光栅化坐标一致
    hit = Hit(
        valid=np.ones(len(prim), dtype=bool), t=np.zeros(len(prim)), prim=prim,
        barycentric=np.stack([b1, b2], axis=-1), position=position, ng=ng, ns=ns, uv=uv,
        tangent=tangent, tangent_sign=sign, material_id=material,
    )
    view = _orient(ns, ng)
    leaves = leaf_tensors(scene.params)
    rng = Rng(seed).spawn(11)
    accum = np.zeros((len(prim), 3))
    for start in range(0, len(prim), chunk):
        sel = np.zeros(len(prim), dtype=bool)
        sel[start:start + chunk] = True
        sp = surface_points(hit, sel, view)
        for s in range(spp):
            levels, _ = _trace_levels(scene, sp, cfg, rng.spawn(start, s))
            with torch.no_grad():
                _, d0 = shade_levels(levels, leaves)
            if len(d0):
                accum[start:start + chunk] += np.nan_to_num(d0.numpy())
    accum /= spp
    data[flat] = accum
    coverage[flat] = True
    logger.info(f"✅ 缓存烘焙完成: {int(coverage.sum())} 个纹素, spp={spp}")
    return data.reshape(layers, resolution, resolution, 3), coverage.reshape(layers, resolution, resolution)


def _orient(ns: np.ndarray, ng: np.ndarray) -> np.ndarray:
    """取与几何法线同侧的着色法线作为观察方向"""
    flip = np.where((ns * ng).sum(-1) < 0.0, -1.0, 1.0)[:, None]
    return ns * flip


# ============================================================================
# 评价指标
# ============================================================================


def psnr(img: np.ndarray, ref: np.ndarray, tonemap: bool = True, max_value: float = 255.0) -> float:
    """
    PSNR (dB)

    Args:
        img / ref: 同尺寸图像
        tonemap: True 时先做 Reinhard + sRGB 并放大到 8-bit 范围
        max_value: 峰值

    Returns:
        10·log10(MAX² / MSE)；两图完全相同时返回 math.inf
    """
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise DataError(f"图像尺寸不一致: {img.shape} vs {ref.shape}")
    if tonemap:
        img = vecmath.tonemap(img) * 255.0
        ref = vecmath.tonemap(ref) * 255.0
    mse = float(np.mean((img - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value * max_value / mse)
