"""
Pydantic 数据模型定义

- RenderConfig / OptimConfig: 渲染与优化参数
- SceneDescription: 场景文件 (YAML) 的结构，未知键一律拒绝
- RunStatus / StepProgress / RunRecord: run.json 中的运行状态
"""

import math
from datetime import datetime
from enum import Enum
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

LeafName = Literal["k_d", "k_orm", "normal", "env", "cache"]
Vec3 = Tuple[float, float, float]


# ============================================================================
# 运行状态
# ============================================================================


class RunStatus(str, Enum):
    """运行状态枚举"""

    PENDING = "pending"
    PROCESSING = "processing"
    COMPLETED = "completed"
    FAILED = "failed"
    DIVERGED = "diverged"


class StepProgress(BaseModel):
    """步骤进度模型"""

    step_number: int = Field(..., description="步骤编号")
    step_name: str = Field(..., description="步骤名称")
    status: RunStatus = Field(..., description="步骤状态")
    result: Optional[Dict[str, Any]] = Field(None, description="步骤执行结果")
    error: Optional[str] = Field(None, description="错误信息")


class RunRecord(BaseModel):
    """run.json 的内容"""

    run_id: str = Field(..., description="运行ID")
    command: str = Field(..., description="子命令")
    status: RunStatus = Field(..., description="当前状态")
    progress: str = Field("", description="进度描述")
    current_step: int = Field(0, description="当前步骤编号")
    total_steps: int = Field(1, description="总步骤数")
    steps: List[StepProgress] = Field(default_factory=list, description="各步骤详情")
    result: Optional[Dict[str, Any]] = Field(None, description="最终结果")
    error: Optional[str] = Field(None, description="错误信息 (如果失败)")
    created_at: datetime = Field(..., description="创建时间")
    updated_at: datetime = Field(..., description="更新时间")
    completed_at: Optional[datetime] = Field(None, description="完成时间")


# ============================================================================
# 渲染 / 优化配置
# ============================================================================


class RenderConfig(BaseModel):
    """渲染配置"""

    model_config = ConfigDict(extra="forbid")

    spp: int = Field(8, ge=1, description="每像素相机样本数")
    n_light: int = Field(8, ge=0, description="一次着色点的环境光采样数")
    n_brdf: int = Field(8, ge=0, description="一次着色点的 BRDF 采样数")
    n_light_secondary: int = Field(4, ge=0, description="二次着色点的环境光采样数")
    n_brdf_secondary: int = Field(4, ge=0, description="二次着色点的 BRDF 采样数")
    depth: int = Field(2, ge=1, le=3, description="最大采样次数 (1-3)")
    n_spec_secondary: int = Field(4, ge=1, description="二次着色点镜面波瓣光线数")
    firefly: Optional[float] = Field(
        None, gt=0, description="单样本辐亮度上限；None 为 50× 环境平均亮度，.inf 关闭"
    )
    use_diffuse_cache: bool = Field(True, description="自适应模式下读取漫反射缓存")
    adaptive: bool = Field(True, description="二次着色点使用缓存 + 镜面波瓣加速")
    disney_primary: bool = Field(True, description="一次着色使用 Disney diffuse")
    specular: bool = Field(True, description="是否包含镜面波瓣")
    cache_every_bounce: bool = Field(False, description="depth=3 时每次反弹都读取缓存")
    tile_size: int = Field(16, ge=1, description="tile 边长 (像素)")
    workers: Optional[int] = Field(None, ge=1, description="worker 数；None 读取 REFMC_THREADS")

    @model_validator(mode="after")
    def _check_sample_counts(self):
        if self.n_light + self.n_brdf < 1:
            raise ValueError("n_light + n_brdf 至少为 1")
        if self.depth > 1 and self.n_light_secondary + self.n_brdf_secondary < 1:
            raise ValueError("n_light_secondary + n_brdf_secondary 至少为 1")
        return self


class OptimConfig(BaseModel):
    """优化配置 (默认值: lr 0.03，权重 0.1 / 0.05 / 1)"""

    model_config = ConfigDict(extra="forbid")

    lr: float = Field(0.03, gt=0, description="Adam 学习率")
    w_d: float = Field(0.1, ge=0, description="k_d 平滑损失权重")
    w_orm: float = Field(0.05, ge=0, description="k_orm 平滑损失权重")
    w_diff: float = Field(1.0, ge=0, description="漫反射自监督损失权重")
    iterations: int = Field(500, ge=0, description="迭代次数")
    batch: int = Field(1, ge=1, description="每步视角数")
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    smooth_texels: float = Field(2.0, gt=0, description="平滑扰动幅度 (纹素)")
    smooth_points: int = Field(4096, ge=1, description="平滑损失采样点数")
    warmup: int = Field(50, ge=0, description="只训练缓存的预热步数")
    optimize: List[LeafName] = Field(
        default_factory=lambda: ["k_d", "k_orm", "normal", "env", "cache"],
        description="参与优化的叶子参数",
    )
    seed: int = Field(0, ge=0)
    log_every: int = Field(10, ge=1)
    checkpoint_every: int = Field(100, ge=0, description="0 表示只保存最终结果")
    preview_every: int = Field(100, ge=0)
    eval_every: int = Field(100, ge=0)
    divergence_factor: float = Field(10.0, gt=1)
    divergence_patience: int = Field(100, ge=1)


# ============================================================================
# 场景描述
# ============================================================================


def _check_unit_values(value, sizes: Tuple[int, ...], name: str):
    if isinstance(value, str):
        return value
    if len(value) not in sizes:
        raise ValueError(f"{name} 需要 {' 或 '.join(map(str, sizes))} 个分量")
    if any(not (0.0 <= v <= 1.0) for v in value):
        raise ValueError(f"{name} 的分量必须在 [0, 1] 内")
    return value


class MaterialSpec(BaseModel):
    """材质绑定: 常量或纹理文件路径 (.png / .hdr / .rfm)"""

    model_config = ConfigDict(extra="forbid")

    k_d: Union[List[float], str] = Field(default_factory=lambda: [0.8, 0.8, 0.8, 1.0])
    k_orm: Union[List[float], str] = Field(default_factory=lambda: [1.0, 0.5, 0.0])
    normal: Union[List[float], str] = Field(default_factory=lambda: [0.5, 0.5, 1.0])

    @field_validator("k_d")
    @classmethod
    def _check_kd(cls, v):
        return _check_unit_values(v, (3, 4), "k_d")

    @field_validator("k_orm", "normal")
    @classmethod
    def _check_three(cls, v, info):
        return _check_unit_values(v, (3,), info.field_name)


class MeshSpec(BaseModel):
    """网格: OBJ 文件或程序化图元 (二选一)"""

    model_config = ConfigDict(extra="forbid")

    name: Optional[str] = None
    file: Optional[str] = None
    primitive: Optional[Literal["plane", "box", "sphere"]] = None
    center: Vec3 = (0.0, 0.0, 0.0)
    size: Vec3 = (2.0, 2.0, 2.0)
    radius: float = Field(1.0, gt=0)
    normal_axis: int = Field(2, ge=0, le=2)
    flip: bool = False
    material: MaterialSpec = Field(default_factory=MaterialSpec)

    @model_validator(mode="after")
    def _one_source(self):
        if (self.file is None) == (self.primitive is None):
            raise ValueError("mesh 必须且只能指定 file 或 primitive 之一")
        return self


class EnvironmentSpec(BaseModel):
    """环境光: 常量颜色或 .hdr 文件 (二选一)"""

    model_config = ConfigDict(extra="forbid")

    constant: Optional[Vec3] = None
    file: Optional[str] = None
    width: int = Field(256, ge=2)
    height: int = Field(128, ge=2)

    @model_validator(mode="after")
    def _one_source(self):
        if (self.constant is None) == (self.file is None):
            raise ValueError("environment 必须且只能指定 constant 或 file 之一")
        if self.constant is not None and any(c < 0 or not math.isfinite(c) for c in self.constant):
            raise ValueError("环境光常量必须为非负有限值")
        return self


class CameraSpec(BaseModel):
    """针孔相机"""

    model_config = ConfigDict(extra="forbid")

    position: Vec3
    look_at: Vec3 = (0.0, 0.0, 0.0)
    up: Vec3 = (0.0, 0.0, 1.0)
    fov: float = Field(40.0, gt=0, lt=180, description="水平视场角 (度)")
    width: int = Field(64, ge=1)
    height: int = Field(64, ge=1)


class SceneDescription(BaseModel):
    """场景描述"""

    model_config = ConfigDict(extra="forbid")

    meshes: List[MeshSpec] = Field(..., min_length=1)
    environment: EnvironmentSpec
    cameras: List[CameraSpec] = Field(..., min_length=1)
    texture_resolution: int = Field(64, ge=1, description="材质纹理分辨率")
    cache_resolution: int = Field(32, ge=1, description="漫反射缓存分辨率")
    scale: float = Field(1.0, gt=0, description="长度单位换算到米的比例")
