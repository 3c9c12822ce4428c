"""
多视角数据集 (NeRF 风格)

目录结构:
    transforms_train.json / transforms_test.json
        {"camera_angle_x": fov_x, "frames": [{"file_path": "train/r_000.hdr",
                                              "transform_matrix": [[...4x4...]]}]}
    train/*.hdr, test/*.hdr    线性辐亮度真值

相机矩阵为 camera-to-world，沿用 NeRF / OpenGL 约定 (相机朝 -Z)。
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from app.models import RenderConfig
from scripts.errors import DataError
from scripts.geometry import Camera, orbit_cameras
from scripts.image_io import read_image, write_hdr
from scripts.integrator import psnr, render
from scripts.rng import derive_seed

logger = logging.getLogger(__name__)

SPLITS = ("train", "test")


@dataclass
class Frame:
    """一个视角: 相机 + 真值图像"""

    name: str
    camera: Camera
    image: np.ndarray


@dataclass
class Dataset:
    """训练 / 测试视角集合"""

    train: List[Frame] = field(default_factory=list)
    test: List[Frame] = field(default_factory=list)
    root: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.train) + len(self.test)

    def validate(self) -> "Dataset":
        """所有图像同尺寸、位姿为刚体变换，否则抛出 DataError"""
        frames = self.train + self.test
        if not self.train:
            raise DataError("数据集没有训练视角")
        shape = frames[0].image.shape
        for frame in frames:
            if frame.image.shape != shape:
                raise DataError(f"图像尺寸不一致: {frame.name} {frame.image.shape} vs {shape}")
            if not frame.camera.is_rigid():
                raise DataError(f"位姿不是刚体变换: {frame.name}")
            audit_image(frame.image, frame.name)
        return self


def audit_image(image: np.ndarray, name: str = "") -> None:
    """NaN / 负值审计"""
    if not np.all(np.isfinite(image)):
        raise DataError(f"图像包含非有限值: {name}")
    if np.any(image < 0.0):
        raise DataError(f"图像包含负值: {name}")


# ============================================================================
# 读写
# ============================================================================


def _read_split(root: Path, split: str) -> List[Frame]:
    path = root / f"transforms_{split}.json"
    if not path.exists():
        return []
    try:
        meta = json.loads(path.read_text(encoding="utf-8"))
        fov_x = float(meta["camera_angle_x"])
        entries = meta["frames"]
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise DataError(f"无法解析 {path}: {e}") from e

    frames = []
    for entry in entries:
        try:
            file_path = Path(entry["file_path"])
            matrix = np.asarray(entry["transform_matrix"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"{path} 中的帧记录无效: {e}") from e
        if not file_path.suffix:
            file_path = file_path.with_suffix(".hdr")
        image_path = root / file_path
        if not image_path.exists():
            raise DataError(f"找不到图像: {image_path}")
        image = read_image(image_path)[..., :3]
        height, width = image.shape[:2]
        frames.append(Frame(file_path.stem, Camera(matrix, fov_x, width, height), image))
    return frames


def load_dataset(root) -> Dataset:
    """
    读取 NeRF 风格数据集

    Raises:
        DataError: 文件缺失、JSON 无效或审计失败
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"数据集目录不存在: {root}")
    dataset = Dataset(_read_split(root, "train"), _read_split(root, "test"), root)
    dataset.validate()
    logger.info(f"📂 数据集已加载: {root} (train={len(dataset.train)}, test={len(dataset.test)})")
    return dataset


def write_dataset(dataset: Dataset, root) -> Path:
    """写出 transforms_{train,test}.json 与 .hdr 图像"""
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"无法创建目录 {root}: {e}") from e

    for split in SPLITS:
        frames = getattr(dataset, split)
        if not frames:
            continue
        entries = []
        for frame in frames:
            rel = Path(split) / f"{frame.name}.hdr"
            write_hdr(root / rel, frame.image)
            entries.append(
                {"file_path": rel.as_posix(), "transform_matrix": frame.camera.c2w.tolist()}
            )
        meta = {"camera_angle_x": frames[0].camera.fov_x, "frames": entries}
        try:
            (root / f"transforms_{split}.json").write_text(
                json.dumps(meta, indent=2), encoding="utf-8"
            )
        except OSError as e:
            raise DataError(f"无法写入 transforms_{split}.json: {e}") from e
    dataset.root = root
    return root


# ============================================================================
# 数据集生成
# ============================================================================


def make_dataset(
    scene,
    n_views: int,
    spp: int,
    seed: int,
    out_dir,
    depth: int = 3,
    width: Optional[int] = None,
    height: Optional[int] = None,
    fov_x: Optional[float] = None,
    radius: Optional[float] = None,
) -> Dataset:
    """
    用本渲染器生成真值数据集

    相机位于场景上半球 (Fibonacci 分布)，真值使用 depth=3、关闭加速的高 spp 渲染；
    第 i 个视角在 i % 3 == 2 时划入测试集 (train:test = 2:1)。

    Args:
        scene: Scene
        n_views: 视角数
        spp: 每像素样本数
        seed: 随机种子；相同种子生成逐位相同的数据集
        out_dir: 输出目录
        depth / width / height / fov_x / radius: 覆盖默认值

    Returns:
        Dataset (图像为写盘前的浮点值)
    """
    if n_views < 1:
        raise DataError("n_views 至少为 1")
    template = scene.cameras[0] if scene.cameras else None
    width = width or (template.width if template else 64)
    height = height or (template.height if template else 64)
    fov_x = fov_x or (template.fov_x if template else math.radians(40.0))
    if radius is None:
        if template is not None:
            radius = float(np.linalg.norm(template.position - scene.center))
        else:
            radius = 3.0 * max(scene.radius, 1e-3)

    cameras = orbit_cameras(n_views, scene.center, radius, fov_x, width, height)
    cfg = RenderConfig(spp=spp, depth=depth, adaptive=False)
    dataset = Dataset()
    for i, camera in enumerate(cameras):
        image = render(scene, camera, cfg, seed=derive_seed(seed, i)).radiance
        name = f"r_{i:03d}"
        audit_image(image, name)
        split = "test" if i % 3 == 2 else "train"
        getattr(dataset, split).append(Frame(name, camera, image))
        logger.info(f"📝 真值视角 {i + 1}/{n_views} 已渲染 ({split})")

    write_dataset(dataset, out_dir)
    logger.info(f"✅ 数据集已生成: {out_dir} (train={len(dataset.train)}, test={len(dataset.test)})")
    return dataset


# ============================================================================
# 评估
# ============================================================================

IMAGE_SUFFIXES = (".hdr", ".png", ".rfm")


def evaluate_dirs(render_dir, gt_dir) -> List[Dict[str, object]]:
    """
    逐图像 PSNR

    按文件名 (不含扩展名) 匹配；尺寸不一致或缺少真值的文件记录错误后继续。
    最后一行为 name="mean"，取有效行的算术平均。

    Returns:
        [{"name", "psnr", "error"}]
    """
    render_dir = Path(render_dir)
    gt_dir = Path(gt_dir)
    if not render_dir.is_dir() or not gt_dir.is_dir():
        raise DataError(f"目录不存在: {render_dir} / {gt_dir}")

    gt_files = {p.stem: p for p in sorted(gt_dir.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
    rows: List[Dict[str, object]] = []
    for path in sorted(render_dir.iterdir()):
        if path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        gt_path = gt_files.get(path.stem)
        if gt_path is None:
            rows.append({"name": path.stem, "psnr": None, "error": "missing ground truth"})
            logger.warning(f"⚠️ 缺少真值: {path.name}")
            continue
        img = read_image(path)[..., :3]
        ref = read_image(gt_path)[..., :3]
        if img.shape != ref.shape:
            message = f"dimension mismatch {img.shape} vs {ref.shape}"
            rows.append({"name": path.stem, "psnr": None, "error": message})
            logger.warning(f"⚠️ {path.name}: {message}")
            continue
        rows.append({"name": path.stem, "psnr": psnr(img, ref), "error": ""})

    values = [r["psnr"] for r in rows if r["psnr"] is not None]
    mean = float(np.mean(values)) if values else None
    rows.append({"name": "mean", "psnr": mean, "error": "" if values else "no valid rows"})
    return rows
