"""
渲染 / 优化流水线 (Pipeline)

编排各子命令的执行流程:
- run_render: 加载场景 → 渲染 → 写出辐亮度图与 C_diff 辅助图
- run_optimize_pipeline: 加载场景 → 加载数据集 → 优化 → 输出测试视角渲染
- run_make_dataset_pipeline: 加载场景 → 渲染真值数据集
- run_eval: 逐图像 PSNR → CSV

每个步骤的结果写入输出目录下的 run.json (RunManager)。
库函数只抛异常，这里记录步骤失败后继续向上抛出，由 CLI 转换为退出码。
"""

import csv
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from app.models import OptimConfig, RenderConfig, RunStatus
from app.services.run_manager import RunManager
from scripts.assets import load_params
from scripts.dataset import evaluate_dirs, load_dataset, make_dataset
from scripts.errors import DataError, DivergenceError
from scripts.image_io import write_hdr
from scripts.integrator import bake_diffuse_cache, psnr, render
from scripts.optimizer import optimize
from scripts.rng import derive_seed
from scripts.scene import load_scene_file

logger = logging.getLogger(__name__)


def _run_step(run: RunManager, number: int, name: str, func, *args, **kwargs):
    """
    执行单个步骤并记录结果

    func 返回 (value, summary)；summary 写入 run.json 的步骤记录。
    """
    total = run.record.total_steps
    run.update(status=RunStatus.PROCESSING, progress=f"Step {number}/{total}: {name}", current_step=number)
    logger.info(f"[Step {number}/{total}] {name}")
    try:
        value, summary = func(*args, **kwargs)
    except Exception as e:
        logger.error(f"❌ Step {number} 失败: {e}")
        run.add_step_result(number, name, RunStatus.FAILED, error=str(e))
        raise
    run.add_step_result(number, name, RunStatus.COMPLETED, result=summary)
    logger.info(f"✅ Step {number} 完成")
    return value


def _finish(run: RunManager, result: Dict[str, Any]):
    run.update(status=RunStatus.COMPLETED, progress="完成", result=result)
    logger.info(f"🎉 运行完成: {run.run_id}")


def _fail(run: RunManager, error: Exception):
    status = RunStatus.DIVERGED if isinstance(error, DivergenceError) else RunStatus.FAILED
    result = error.diagnostics if isinstance(error, DivergenceError) else None
    run.update(status=status, progress="已终止", error=str(error), result=result)


def _load_scene_step(scene_path):
    scene = load_scene_file(scene_path)
    summary = {
        "scene": str(scene_path),
        "triangles": scene.mesh.triangle_count if scene.mesh is not None else 0,
        "cameras": len(scene.cameras),
    }
    return scene, summary


def aux_path(out_path) -> Path:
    """C_diff 辅助图路径: <stem>_diffuse.hdr"""
    out_path = Path(out_path)
    return out_path.with_name(f"{out_path.stem}_diffuse.hdr")


# ============================================================================
# render
# ============================================================================


def run_render(scene_path, out_path, cfg: RenderConfig, seed: int = 0, camera_index: int = 0):
    """
    渲染场景中的一个相机

    Returns:
        RadianceImage

    Raises:
        DataError: 相机编号越界或文件不可写
    """
    scene = load_scene_file(scene_path)
    if not 0 <= camera_index < len(scene.cameras):
        raise DataError(f"相机编号 {camera_index} 越界 (共 {len(scene.cameras)} 个)")
    logger.info(
        f"🚀 渲染: {camera_index} 号相机, spp={cfg.spp}, depth={cfg.depth}, adaptive={cfg.adaptive}, seed={seed}"
    )
    image = render(scene, scene.cameras[camera_index], cfg, seed=seed)
    write_hdr(out_path, image.radiance)
    write_hdr(aux_path(out_path), image.diffuse)
    logger.info(f"📂 已写出: {out_path}, {aux_path(out_path)}")
    if image.stats.nan_count:
        logger.warning(f"⚠️ 丢弃了 {image.stats.nan_count} 个非有限样本")
    return image


# ============================================================================
# optimize
# ============================================================================


def _render_test_views(scene, dataset, rcfg: RenderConfig, seed: int, out_dir: Path):
    render_dir = out_dir / "renders"
    rows: List[Dict[str, Any]] = []
    for i, frame in enumerate(dataset.test or dataset.train):
        image = render(scene, frame.camera, rcfg, seed=derive_seed(seed, 1 << 21, i)).radiance
        write_hdr(render_dir / f"{frame.name}.hdr", image)
        rows.append({"name": frame.name, "psnr": psnr(image, frame.image)})
    values = [r["psnr"] for r in rows]
    summary = {"views": len(rows), "mean_psnr": float(np.mean(values)) if values else None}
    return (rows, summary), summary


def run_optimize_pipeline(
    scene_path,
    data_dir,
    out_dir,
    ocfg: OptimConfig,
    rcfg: RenderConfig,
    init_dir=None,
    bake_cache: bool = False,
) -> Dict[str, Any]:
    """
    逆渲染完整流水线

    Args:
        scene_path: 场景文件 (几何 + 初始材质 / 环境)
        data_dir: NeRF 风格数据集目录
        out_dir: 输出目录
        ocfg / rcfg: 优化与渲染配置
        init_dir: 可选的 RFM1 检查点目录，覆盖场景中的初始参数
        bake_cache: 优化前用蒙特卡洛估计初始化漫反射缓存

    执行流程:
        Step 1: 加载场景
        Step 2: 加载数据集
        Step 3: 优化
        Step 4: 渲染测试视角
    """
    out_dir = Path(out_dir)
    run = RunManager(out_dir, "optimize", total_steps=4)
    logger.info(f"🚀 优化任务开始: {run.run_id}")
    logger.info(f"📂 输出目录: {out_dir}")

    try:
        scene = _run_step(run, 1, "Load Scene", _load_scene_step, scene_path)
        if init_dir is not None:
            scene = scene.with_params(load_params(init_dir, like=scene.params))
            logger.info(f"📂 从检查点初始化参数: {init_dir}")
        if bake_cache:
            data, coverage = bake_diffuse_cache(scene, rcfg, seed=ocfg.seed)
            scene.params.cache.texture.data[coverage] = data[coverage]
            logger.info(f"✅ 漫反射缓存已烘焙: 覆盖 {int(coverage.sum())} 个纹素")

        def _load_data():
            dataset = load_dataset(data_dir)
            return dataset, {"train": len(dataset.train), "test": len(dataset.test)}

        dataset = _run_step(run, 2, "Load Dataset", _load_data)

        def _optimize():
            result = optimize(scene, dataset, ocfg, rcfg, out_dir=out_dir)
            last = result.metrics[-1] if result.metrics else {}
            summary = {
                "iterations": len(result.metrics),
                "final_L_rgb": last.get("L_rgb"),
                "final_PSNR": last.get("PSNR"),
                "skipped_updates": result.skipped,
            }
            return result, summary

        _run_step(run, 3, "Optimize", _optimize)
        rows, summary = _run_step(
            run, 4, "Render Test Views", _render_test_views, scene, dataset, rcfg, ocfg.seed, out_dir
        )
    except Exception as e:
        _fail(run, e)
        raise

    result = {"out_dir": str(out_dir), "final_params": str(out_dir / "final"), **summary}
    _finish(run, result)
    return result


# ============================================================================
# make-dataset
# ============================================================================


def run_make_dataset_pipeline(
    scene_path,
    out_dir,
    n_views: int,
    spp: int,
    seed: int = 0,
    depth: int = 3,
    width: Optional[int] = None,
    height: Optional[int] = None,
) -> Dict[str, Any]:
    """
    真值数据集生成流水线

    执行流程:
        Step 1: 加载场景
        Step 2: 渲染并写出数据集
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"无法创建目录 {out_dir}: {e}") from e
    run = RunManager(out_dir, "make-dataset", total_steps=2)

    try:
        scene = _run_step(run, 1, "Load Scene", _load_scene_step, scene_path)

        def _make():
            dataset = make_dataset(
                scene, n_views, spp, seed, out_dir, depth=depth, width=width, height=height
            )
            return dataset, {"train": len(dataset.train), "test": len(dataset.test)}

        dataset = _run_step(run, 2, "Render Dataset", _make)
    except Exception as e:
        _fail(run, e)
        raise

    result = {"out_dir": str(out_dir), "train": len(dataset.train), "test": len(dataset.test)}
    _finish(run, result)
    return result


# ============================================================================
# eval
# ============================================================================


def run_eval(render_dir, gt_dir, out_csv=None) -> List[Dict[str, Any]]:
    """逐图像 PSNR，写出 CSV (name, psnr, error)；无穷大写作 inf"""
    rows = evaluate_dirs(render_dir, gt_dir)
    if out_csv is not None:
        out_csv = Path(out_csv)
        try:
            out_csv.parent.mkdir(parents=True, exist_ok=True)
            with open(out_csv, "w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f)
                writer.writerow(["name", "psnr", "error"])
                for row in rows:
                    value = row["psnr"]
                    writer.writerow([row["name"], "" if value is None else f"{value:.6f}", row["error"]])
        except OSError as e:
            raise DataError(f"无法写入 {out_csv}: {e}") from e
        logger.info(f"📂 评估结果已写出: {out_csv}")
    return rows
