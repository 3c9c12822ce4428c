"""
逆渲染优化

- loss_rgb / loss_diff / loss_smooth: torch 计算损失，返回标量与伴随量
- backward: 对每个 tile 的 tape 带梯度重放 shade_tape，按 tile 顺序累加到 GradBuffer
  (采样方向与 pdf 视为常量)
- adam_step: torch.optim.Adam 更新 (张量与 ParamSet 共享内存)，随后投影并重建环境图 CDF
- optimize: 渲染 → 损失 → 伴随 → Adam 的主循环，带缓存预热与发散保护
- finite_difference_check: 固定 tape 的中心差分梯度检查
- crn_finite_difference: 同一种子整幅重新渲染的中心差分
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from app.models import OptimConfig, RenderConfig
from scripts.assets import (
    LEAF_NAMES,
    ParamSet,
    Texture2D,
    build_env_cdf,
    gather,
    project_params,
    save_params,
    texture_taps,
)
from scripts.config import METRICS_FILE, VALIDATION_FILE
from scripts.dataset import Dataset, Frame
from scripts.errors import DataError, DivergenceError, TapeMismatchError
from scripts.image_io import write_png
from scripts.integrator import RadianceImage, TileTape, leaf_tensors, psnr, render, shade_tape
from scripts.rng import Rng, derive_seed
from scripts.vecmath import tonemap

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("iter", "L_rgb", "L_d", "L_orm", "L_diff", "PSNR")


# ============================================================================
# 梯度缓冲
# ============================================================================


@dataclass
class GradBuffer:
    """每个叶子参数一份梯度 (形状与 ParamSet 一致)"""

    grads: Dict[str, np.ndarray]
    counts: Dict[str, int] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: ParamSet) -> "GradBuffer":
        return cls(
            {name: np.zeros_like(a) for name, a in params.leaves().items()},
            {name: 0 for name in LEAF_NAMES},
        )

    def __getitem__(self, name: str) -> np.ndarray:
        return self.grads[name]

    def add(self, name: str, grad: np.ndarray, weight: float = 1.0) -> None:
        if grad.shape != self.grads[name].shape:
            raise TapeMismatchError(
                f"梯度形状不匹配 {name}: {grad.shape} vs {self.grads[name].shape}"
            )
        self.grads[name] += weight * grad
        self.counts[name] = self.counts.get(name, 0) + 1

    def merge(self, other: "GradBuffer", weight: float = 1.0) -> None:
        for name, grad in other.grads.items():
            if other.counts.get(name, 0):
                self.add(name, grad, weight)

    def scale(self, factor: float) -> None:
        for grad in self.grads.values():
            grad *= factor

    def zero(self) -> None:
        for grad in self.grads.values():
            grad.fill(0.0)
        self.counts = {name: 0 for name in self.grads}

    def is_finite(self) -> bool:
        return all(np.isfinite(g).all() for g in self.grads.values())


# ============================================================================
# 损失
# ============================================================================


def loss_rgb(image: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    色调映射后的 MSE

    Returns:
        (loss, dL/dC 与 image 同形状)
    """
    if image.shape != target.shape:
        raise DataError(f"图像尺寸不一致: {image.shape} vs {target.shape}")
    c = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float64)).requires_grad_(True)
    gt = torch.from_numpy(np.ascontiguousarray(target, dtype=np.float64))
    loss = ((tonemap(c) - tonemap(gt)) ** 2).mean()
    (grad,) = torch.autograd.grad(loss, c)
    return float(loss), grad.numpy()


def loss_diff(diffuse: np.ndarray, hit: np.ndarray, uv: np.ndarray, layer: np.ndarray,
              cache: Texture2D) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    漫反射自监督损失: 渲染得到的 C_diff 与缓存查询值的线性 MSE

    只统计命中表面的像素。

    Returns:
        (loss, dL/dC_diff (H, W, 3), dL/dcache (与缓存同形状))
    """
    grad_diff = np.zeros_like(diffuse)
    grad_cache = np.zeros_like(cache.data)
    mask = np.asarray(hit, dtype=bool)
    if not mask.any():
        return 0.0, grad_diff, grad_cache

    idx, w = texture_taps(cache, uv[mask], layer[mask])
    cd = torch.from_numpy(np.ascontiguousarray(diffuse[mask])).requires_grad_(True)
    table = torch.from_numpy(cache.data.copy()).requires_grad_(True)
    pred = gather(table, idx, w)
    loss = ((cd - pred) ** 2).mean()
    g_cd, g_table = torch.autograd.grad(loss, (cd, table))
    grad_diff[mask] = g_cd.numpy()
    return float(loss), grad_diff, g_table.numpy()


def loss_smooth(tex: Texture2D, uv: np.ndarray, layer: np.ndarray, perturb_texels: float,
                n_points: int, rng: Rng, channels: Optional[int] = None) -> Tuple[float, np.ndarray]:
    """
    平滑损失: mean |k(uv) - k(uv + ε)|，ε 为至多 perturb_texels 个纹素的均匀 UV 偏移

    Args:
        tex: 纹理
        uv / layer: 可采样的表面点 (来自像素中心 uv 缓冲)
        perturb_texels: 扰动幅度 (纹素)
        n_points: 采样点数 (有放回)
        rng: 随机源
        channels: 只使用前若干通道 (k_d 忽略 alpha)

    Returns:
        (loss, 纹素梯度)；|·| 在 0 处的次梯度为 0
    """
    if len(uv) == 0:
        return 0.0, np.zeros_like(tex.data)
    pick = rng.integers(len(uv), n_points)
    base = uv[pick]
    offset = (rng.uniform((n_points, 2)) * 2.0 - 1.0) * perturb_texels / np.array([tex.width, tex.height])
    lyr = layer[pick]

    table = torch.from_numpy(tex.data.copy()).requires_grad_(True)
    a = gather(table, *texture_taps(tex, base, lyr))
    b = gather(table, *texture_taps(tex, base + offset, lyr))
    ch = channels or tex.channels
    loss = (a[:, :ch] - b[:, :ch]).abs().mean()
    (grad,) = torch.autograd.grad(loss, table)
    return float(loss), grad.numpy()


# ============================================================================
# 伴随
# ============================================================================


def _check_tape(tape: TileTape, params: ParamSet) -> None:
    for name, arr in params.leaves().items():
        if tape.leaf_shapes.get(name) != arr.shape:
            raise TapeMismatchError(
                f"tape {tape.tile} 记录的 {name} 形状 {tape.leaf_shapes.get(name)} 与参数 {arr.shape} 不一致"
            )
    sizes = {name: int(np.prod(arr.shape[:-1])) for name, arr in params.leaves().items()}
    for rec in tape.levels:
        for name, taps in (("k_d", rec.kd_taps), ("k_orm", rec.orm_taps), ("normal", rec.normal_taps),
                           ("cache", rec.cache_taps), ("env", (rec.env_idx, None))):
            if taps is None or taps[0].size == 0:
                continue
            if taps[0].min() < 0 or taps[0].max() >= sizes[name]:
                raise TapeMismatchError(f"tape {tape.tile} 的 {name} 纹素索引越界")
    if tape.cam_env_idx.size and tape.cam_env_idx.max() >= sizes["env"]:
        raise TapeMismatchError(f"tape {tape.tile} 的环境图索引越界")


def _tile_slice(grad: np.ndarray, tape: TileTape) -> np.ndarray:
    block = grad[tape.y0:tape.y0 + tape.height, tape.x0:tape.x0 + tape.width]
    return np.ascontiguousarray(block.reshape(-1, 3))


def backward(tapes: Sequence[TileTape], grad_color: np.ndarray, grad_diffuse: Optional[np.ndarray],
             params: ParamSet) -> GradBuffer:
    """
    对渲染结果的伴随量求参数梯度

    Args:
        tapes: render(record_tape=True) 返回的 tape
        grad_color: dL/dC (H, W, 3)
        grad_diffuse: dL/dC_diff (H, W, 3)，可为 None
        params: 渲染时使用的参数集

    Returns:
        GradBuffer (按 tile 顺序累加)

    Raises:
        TapeMismatchError: tape 与参数或伴随量形状不一致
    """
    buffer = GradBuffer.zeros_like(params)
    if not tapes:
        return buffer
    height = max(t.y0 + t.height for t in tapes)
    width = max(t.x0 + t.width for t in tapes)
    if grad_color.shape != (height, width, 3):
        raise TapeMismatchError(f"dL/dC 形状 {grad_color.shape} 与图像 {(height, width, 3)} 不一致")
    if grad_diffuse is not None and grad_diffuse.shape != grad_color.shape:
        raise TapeMismatchError(f"dL/dC_diff 形状 {grad_diffuse.shape} 不一致")

    leaves = leaf_tensors(params, requires_grad=True)
    names = list(leaves)
    for tape in sorted(tapes, key=lambda t: t.tile):
        _check_tape(tape, params)
        gc = _tile_slice(grad_color, tape)
        gd = _tile_slice(grad_diffuse, tape) if grad_diffuse is not None else None
        if not gc.any() and (gd is None or not gd.any()):
            continue
        color, diffuse, _, _ = shade_tape(tape, leaves)
        objective = (color * torch.from_numpy(gc)).sum()
        if gd is not None:
            objective = objective + (diffuse * torch.from_numpy(gd)).sum()
        if not objective.requires_grad:
            continue
        grads = torch.autograd.grad(objective, [leaves[n] for n in names], allow_unused=True)
        for name, g in zip(names, grads):
            if g is not None:
                buffer.add(name, g.numpy())
    return buffer


# ============================================================================
# Adam
# ============================================================================


class AdamState:
    """
    Adam 状态

    叶子张量与 ParamSet 的 numpy 数组共享内存，optimizer.step() 原地更新参数。
    """

    def __init__(self, params: ParamSet, cfg: OptimConfig, active: Optional[Iterable[str]] = None):
        self.params = params
        self.tensors = {
            name: torch.from_numpy(arr).requires_grad_(True) for name, arr in params.leaves().items()
        }
        self.active = set(active if active is not None else cfg.optimize)
        self.optimizer = torch.optim.Adam(
            list(self.tensors.values()), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps
        )
        self.step_count = 0
        self.skipped = 0


def adam_step(params: ParamSet, grads: GradBuffer, state: AdamState, cfg: OptimConfig,
              only: Optional[Iterable[str]] = None) -> ParamSet:
    """
    一次 Adam 更新 + 投影

    非有限梯度跳过该叶子并计数；环境图更新后重建 CDF。

    Args:
        only: 本步允许更新的叶子 (默认 state.active)
    """
    allowed = state.active if only is None else state.active & set(only)
    updated = []
    for name, tensor in state.tensors.items():
        grad = grads.grads.get(name)
        if name not in allowed or grad is None:
            tensor.grad = None
            continue
        if not np.all(np.isfinite(grad)):
            tensor.grad = None
            state.skipped += 1
            logger.warning(f"⚠️ 叶子 {name} 的梯度包含非有限值，跳过本步更新")
            continue
        tensor.grad = torch.from_numpy(np.array(grad, dtype=np.float64))
        updated.append(name)

    with torch.no_grad():
        state.optimizer.step()
    for tensor in state.tensors.values():
        tensor.grad = None

    project_params(params)
    if "env" in updated:
        build_env_cdf(params.env)
    state.step_count += 1
    return params


# ============================================================================
# 主循环
# ============================================================================


@dataclass
class OptimResult:
    params: ParamSet
    metrics: List[Dict[str, float]]
    validation: List[Dict[str, float]]
    skipped: int = 0


def _view_schedule(n: int, batch: int, rng: Rng):
    """按打乱的 epoch 循环产生视角批次"""
    epoch = 0
    queue: List[int] = []
    while True:
        while len(queue) < batch:
            queue.extend(int(i) for i in rng.spawn(1, epoch).permutation(n))
            epoch += 1
        yield queue[:batch]
        queue = queue[batch:]


def evaluate_views(scene, frames: Sequence[Frame], cfg: RenderConfig, seed: int) -> float:
    """视角平均 PSNR"""
    values = []
    for i, frame in enumerate(frames):
        image = render(scene, frame.camera, cfg, seed=derive_seed(seed, 1 << 20, i)).radiance
        values.append(psnr(image, frame.image))
    return float(np.mean(values)) if values else math.nan


class _CsvLog:
    def __init__(self, path: Optional[Path], columns: Sequence[str]):
        self.path = path
        self.columns = columns
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="", encoding="utf-8") as f:
                csv.writer(f).writerow(columns)

    def append(self, row: Dict[str, float]) -> None:
        if self.path is None:
            return
        with open(self.path, "a", newline="", encoding="utf-8") as f:
            csv.writer(f).writerow(["" if row.get(c) is None else row.get(c) for c in self.columns])


def optimize(
    scene,
    dataset: Dataset,
    ocfg: Optional[OptimConfig] = None,
    rcfg: Optional[RenderConfig] = None,
    out_dir=None,
    on_iteration: Optional[Callable[[int, Dict[str, float]], None]] = None,
) -> OptimResult:
    """
    逆渲染主循环

    L = L_rgb + w_d·L_d + w_orm·L_orm + w_diff·L_diff。前 warmup 步只用 L_diff 训练缓存。

    Args:
        scene: Scene，scene.params 被原地更新
        dataset: 训练 / 测试视角
        ocfg / rcfg: 优化与渲染配置
        out_dir: 输出目录 (metrics.csv、validation.csv、检查点、预览)；None 时不写盘
        on_iteration: 每步回调 (iteration, metrics)

    Returns:
        OptimResult

    Raises:
        DivergenceError: L_rgb 连续 divergence_patience 步超过历史最小值的 divergence_factor 倍
    """
    ocfg = ocfg or OptimConfig()
    rcfg = rcfg or RenderConfig()
    if not dataset.train:
        raise DataError("数据集为空，无法优化")

    params = scene.params
    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_log = _CsvLog(out_dir / METRICS_FILE if out_dir else None, METRIC_COLUMNS)
    validation_log = _CsvLog(out_dir / VALIDATION_FILE if out_dir else None, ("iter", "PSNR"))

    rng = Rng(ocfg.seed)
    schedule = _view_schedule(len(dataset.train), ocfg.batch, rng.spawn(0))
    state = AdamState(params, ocfg)
    warmup = ocfg.warmup if "cache" in state.active else 0
    eval_frames = dataset.test or dataset.train

    best_rgb = math.inf
    over_count = 0
    metrics: List[Dict[str, float]] = []
    validation: List[Dict[str, float]] = []
    logger.info(
        f"🚀 开始优化: {ocfg.iterations} 步, {len(dataset.train)} 个训练视角, "
        f"优化 {sorted(state.active)}, 预热 {warmup} 步"
    )

    for it in range(ocfg.iterations):
        warm = it < warmup
        views = next(schedule)
        grads = GradBuffer.zeros_like(params)
        terms = {"L_rgb": 0.0, "L_d": 0.0, "L_orm": 0.0, "L_diff": 0.0}
        train_psnr = []

        for view in views:
            frame = dataset.train[view]
            image: RadianceImage = render(
                scene, frame.camera, rcfg, seed=derive_seed(ocfg.seed, it, view), record_tape=not warm
            )
            l_rgb, g_color = loss_rgb(image.radiance, frame.image)
            l_diff, g_diffuse, g_cache = loss_diff(
                image.diffuse, image.hit, image.uv, image.layer, params.cache.texture
            )
            surf_uv = image.uv[image.hit]
            surf_layer = image.layer[image.hit]
            smooth_rng = rng.spawn(2, it, view)
            l_d, g_kd = loss_smooth(
                params.k_d, surf_uv, surf_layer, ocfg.smooth_texels, ocfg.smooth_points,
                smooth_rng.spawn(0), channels=3,
            )
            l_orm, g_orm = loss_smooth(
                params.k_orm, surf_uv, surf_layer, ocfg.smooth_texels, ocfg.smooth_points,
                smooth_rng.spawn(1),
            )

            grads.add("cache", g_cache, ocfg.w_diff)
            if not warm:
                grads.merge(backward(image.tapes, g_color, ocfg.w_diff * g_diffuse, params))
                grads.add("k_d", g_kd, ocfg.w_d)
                grads.add("k_orm", g_orm, ocfg.w_orm)

            terms["L_rgb"] += l_rgb
            terms["L_d"] += l_d
            terms["L_orm"] += l_orm
            terms["L_diff"] += l_diff
            train_psnr.append(psnr(image.radiance, frame.image))

        inv = 1.0 / len(views)
        grads.scale(inv)
        terms = {k: v * inv for k, v in terms.items()}
        adam_step(params, grads, state, ocfg, only=("cache",) if warm else None)

        row = {"iter": it, **terms, "PSNR": float(np.mean(train_psnr))}
        metrics.append(row)
        metrics_log.append(row)
        total = terms["L_rgb"] + ocfg.w_d * terms["L_d"] + ocfg.w_orm * terms["L_orm"] + ocfg.w_diff * terms["L_diff"]
        message = (
            f"📝 iter {it}: L={total:.6f} L_rgb={terms['L_rgb']:.6f} L_d={terms['L_d']:.5f} "
            f"L_orm={terms['L_orm']:.5f} L_diff={terms['L_diff']:.6f} PSNR={row['PSNR']:.2f}"
        )
        if it % ocfg.log_every == 0 or it == ocfg.iterations - 1:
            logger.info(message)
        else:
            logger.debug(message)
        if on_iteration is not None:
            on_iteration(it, row)

        # 发散保护
        l_rgb_now = terms["L_rgb"]
        if not math.isfinite(l_rgb_now):
            over_count += 1
        elif best_rgb > 0 and l_rgb_now > ocfg.divergence_factor * best_rgb:
            over_count += 1
        else:
            over_count = 0
        if math.isfinite(l_rgb_now):
            best_rgb = min(best_rgb, l_rgb_now)
        if over_count >= ocfg.divergence_patience:
            diagnostics = {
                "iteration": it,
                "L_rgb": l_rgb_now,
                "L_rgb_min": best_rgb,
                "steps_over": over_count,
                "skipped_updates": state.skipped,
            }
            if out_dir is not None:
                save_params(params, out_dir / "diverged")
            raise DivergenceError(
                f"优化发散: L_rgb={l_rgb_now:.6g} 连续 {over_count} 步超过最小值 {best_rgb:.6g} 的 "
                f"{ocfg.divergence_factor} 倍",
                diagnostics,
            )

        step = it + 1
        if ocfg.eval_every and step % ocfg.eval_every == 0:
            value = evaluate_views(scene, eval_frames, rcfg, ocfg.seed)
            validation.append({"iter": it, "PSNR": value})
            validation_log.append({"iter": it, "PSNR": value})
            logger.info(f"📝 iter {it}: 验证 PSNR={value:.2f} dB")
        if out_dir is not None:
            if ocfg.checkpoint_every and step % ocfg.checkpoint_every == 0:
                save_params(params, out_dir / "checkpoints" / f"iter_{step:05d}")
            if ocfg.preview_every and step % ocfg.preview_every == 0:
                preview = render(scene, eval_frames[0].camera, rcfg, seed=derive_seed(ocfg.seed, step))
                write_png(out_dir / "previews" / f"iter_{step:05d}.png", tonemap(preview.radiance))

    if out_dir is not None:
        save_params(params, out_dir / "final")
    if state.skipped:
        logger.warning(f"⚠️ 共跳过 {state.skipped} 次非有限梯度更新")
    logger.info(f"✅ 优化完成: {ocfg.iterations} 步")
    return OptimResult(params, metrics, validation, state.skipped)


# ============================================================================
# 梯度检查
# ============================================================================


def _replay_objective(tapes: Sequence[TileTape], leaves: Dict[str, torch.Tensor],
                      grad_color: np.ndarray) -> float:
    total = 0.0
    with torch.no_grad():
        for tape in sorted(tapes, key=lambda t: t.tile):
            color, _, _, _ = shade_tape(tape, leaves)
            total += float((color * torch.from_numpy(_tile_slice(grad_color, tape))).sum())
    return total


def finite_difference_check(
    params: ParamSet,
    tapes: Sequence[TileTape],
    grad_color: np.ndarray,
    leaf: str,
    texels: np.ndarray,
    h: float = 1e-5,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    固定 tape (公共随机数) 的中心差分

    Args:
        params: 参数集
        tapes: 渲染 tape
        grad_color: 输出端权重 (目标为 Σ C·grad_color)
        leaf: 叶子名
        texels: 扁平元素索引 (含通道)
        h: 差分步长

    Returns:
        (有限差分值, 伴随值)，与 texels 同长
    """
    adjoint = backward(tapes, grad_color, None, params)[leaf].reshape(-1)[texels]
    base = {name: t.clone() for name, t in leaf_tensors(params).items()}
    fd = np.zeros(len(texels))
    for i, texel in enumerate(np.asarray(texels)):
        values = []
        for sign in (1.0, -1.0):
            leaves = dict(base)
            perturbed = base[leaf].clone()
            perturbed.view(-1)[texel] += sign * h
            leaves[leaf] = perturbed
            values.append(_replay_objective(tapes, leaves, grad_color))
        fd[i] = (values[0] - values[1]) / (2.0 * h)
    return fd, adjoint


def crn_finite_difference(
    scene,
    camera,
    cfg: RenderConfig,
    seed: int,
    grad_color: np.ndarray,
    picks: Sequence[Tuple[str, int]],
    h: float = 1e-5,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    公共随机数 (同一种子) 下整幅重新渲染的中心差分

    每次扰动只改着色参数，追踪与采样仍用 scene.params，所以 ±h 两次渲染走同一组路径。
    需要 cfg.firefly 为 inf (钳制阈值依赖环境图)。

    Args:
        scene: Scene
        camera: 相机
        cfg: 渲染配置
        seed: 渲染种子
        grad_color: (H, W, 3) 输出端权重 (目标为 Σ C·grad_color)
        picks: (叶子名, 扁平元素索引) 列表
        h: 差分步长

    Returns:
        (有限差分值, 伴随值)，与 picks 同长
    """
    if math.isfinite(cfg.firefly):
        raise DataError("公共随机数差分需要关闭 firefly 钳制 (firefly=inf)")
    image = render(scene, camera, cfg, seed=seed, record_tape=True)
    grads = backward(image.tapes, grad_color, None, scene.params)
    adjoint = np.array([grads[name].reshape(-1)[idx] for name, idx in picks])

    shading = scene.params.copy()
    for name, data in shading.leaves().items():
        data[...] = scene.params.leaves()[name]
    fd = np.zeros(len(picks))
    for i, (name, idx) in enumerate(picks):
        flat = shading.leaves()[name].reshape(-1)
        origin = flat[idx]
        values = []
        for sign in (1.0, -1.0):
            flat[idx] = origin + sign * h
            img = render(scene, camera, cfg, seed=seed, shading_params=shading)
            values.append(float((img.radiance * grad_color).sum()))
        flat[idx] = origin
        fd[i] = (values[0] - values[1]) / (2.0 * h)
    logger.debug("CRN 差分: %d 个参数", len(picks))
    return fd, adjoint
