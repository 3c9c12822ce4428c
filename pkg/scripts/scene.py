"""
场景描述解析与场景装配

场景文件为 YAML，结构由 app.models.SceneDescription 定义 (未知键一律拒绝)。
- parse_scene / parse_scene_text: YAML → SceneDescription，出错时带行列号
- serialize_scene: SceneDescription → YAML，parse(serialize(d)) == d
- load_scene: SceneDescription → Scene (网格 + BVH + 参数集 + 相机)
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import yaml
from pydantic import ValidationError

from app.models import MaterialSpec, MeshSpec, SceneDescription
from scripts.assets import DiffuseCache, EnvironmentMap, ParamSet, Texture2D, build_env_cdf
from scripts.config import EPS_GEOM_SCALE
from scripts.errors import (
    BadReferenceError,
    DataError,
    MissingFieldError,
    SceneSyntaxError,
    SceneValueError,
    UnknownKeyError,
)
from scripts.geometry import (
    Bvh,
    Camera,
    TriangleMesh,
    build_bvh,
    load_obj,
    look_at,
    make_box,
    make_plane,
    make_uv_sphere,
    merge_meshes,
)
from scripts.image_io import read_hdr, read_image

logger = logging.getLogger(__name__)


# ============================================================================
# Scene
# ============================================================================


@dataclass
class Scene:
    """
    可渲染场景

    mesh 为 None 表示空场景 (所有光线都打到环境图)。
    params 在优化过程中被原地更新，BVH 不变。
    """

    mesh: Optional[TriangleMesh]
    bvh: Optional[Bvh]
    params: ParamSet
    cameras: List[Camera] = field(default_factory=list)
    eps_geom: float = EPS_GEOM_SCALE

    @classmethod
    def build(
        cls, mesh: Optional[TriangleMesh], params: ParamSet, cameras=()
    ) -> "Scene":
        """校验网格、构建 BVH，并检查纹理层数覆盖所有材质号"""
        if mesh is None:
            return cls(None, None, params, list(cameras), EPS_GEOM_SCALE)
        mesh.validate()
        layers_needed = int(mesh.material_id.max()) + 1
        for name in ("k_d", "k_orm", "normal"):
            tex = getattr(params, name)
            if tex.layers < layers_needed:
                raise DataError(f"纹理 {name} 只有 {tex.layers} 层，网格需要 {layers_needed} 层")
        if params.cache.texture.layers < layers_needed:
            raise DataError(f"漫反射缓存只有 {params.cache.texture.layers} 层")
        bvh = build_bvh(mesh)
        eps = EPS_GEOM_SCALE * max(mesh.diagonal(), 1e-6)
        logger.info(
            f"✅ 场景已构建: {mesh.triangle_count} 个三角形, BVH 深度 {bvh.depth}, "
            f"{len(cameras)} 个相机"
        )
        return cls(mesh, bvh, params, list(cameras), eps)

    def with_params(self, params: ParamSet) -> "Scene":
        """共享几何，替换参数集"""
        return Scene(self.mesh, self.bvh, params, self.cameras, self.eps_geom)

    @property
    def center(self) -> np.ndarray:
        if self.mesh is None:
            return np.zeros(3)
        lo, hi = self.mesh.bounds()
        return 0.5 * (lo + hi)

    @property
    def radius(self) -> float:
        return 0.5 * self.mesh.diagonal() if self.mesh is not None else 1.0


def default_params(layers: int, texture_resolution: int, cache_resolution: int, env=None) -> ParamSet:
    """常量初始化的参数集"""
    res = texture_resolution
    if env is None:
        env = EnvironmentMap.constant((1.0, 1.0, 1.0), 128, 256)
    return ParamSet(
        k_d=Texture2D.constant((0.8, 0.8, 0.8, 1.0), layers, res, res),
        k_orm=Texture2D.constant((1.0, 0.5, 0.0), layers, res, res),
        normal=Texture2D.constant((0.5, 0.5, 1.0), layers, res, res),
        env=env,
        cache=DiffuseCache.zeros(layers, cache_resolution),
    )


# ============================================================================
# YAML 解析 (带行列号)
# ============================================================================


def _node_at(root, loc: Tuple) -> Tuple[object, bool]:
    """
    沿 pydantic 错误路径在 YAML 节点树中定位

    Returns:
        (节点, 是否完整匹配)；未知键时返回键节点本身
    """
    node = root
    for i, part in enumerate(loc):
        if isinstance(node, yaml.MappingNode):
            found = None
            for key_node, value_node in node.value:
                if key_node.value == part:
                    found = key_node if i == len(loc) - 1 else value_node
                    break
            if found is None:
                return node, False
            node = found
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int):
            if part >= len(node.value):
                return node, False
            node = node.value[part]
        else:
            return node, False
    return node, True


def _mark(node) -> Tuple[Optional[int], Optional[int]]:
    if node is None or node.start_mark is None:
        return None, None
    return node.start_mark.line + 1, node.start_mark.column + 1


def _translate_validation_error(error: ValidationError, root) -> Exception:
    first = error.errors()[0]
    loc = tuple(first["loc"])
    # union 分支名不属于 YAML 路径
    loc = tuple(p for p in loc if not (isinstance(p, str) and ("[" in p or p in ("str", "float"))))
    path = ".".join(str(p) for p in loc) or "<root>"
    kind = first["type"]
    node, _ = _node_at(root, loc)
    line, column = _mark(node)

    if kind == "extra_forbidden":
        key = str(loc[-1]) if loc else None
        return UnknownKeyError(f"未知键 '{path}'", key=key, line=line, column=column)
    if kind == "missing":
        parent, _ = _node_at(root, loc[:-1])
        line, column = _mark(parent)
        key = str(loc[-1]) if loc else None
        return MissingFieldError(f"缺少必填字段 '{path}'", key=key, line=line, column=column)
    return SceneValueError(
        f"字段 '{path}' 取值非法: {first['msg']}",
        key=str(loc[-1]) if loc else None,
        line=line,
        column=column,
    )


def _file_references(desc: SceneDescription):
    """枚举场景中引用的文件 (路径, YAML 路径)"""
    for i, mesh in enumerate(desc.meshes):
        if mesh.file is not None:
            yield mesh.file, ("meshes", i, "file")
        for name in ("k_d", "k_orm", "normal"):
            value = getattr(mesh.material, name)
            if isinstance(value, str):
                yield value, ("meshes", i, "material", name)
    if desc.environment.file is not None:
        yield desc.environment.file, ("environment", "file")


def parse_scene_text(text: str, base_dir=None, source: str = "<string>") -> SceneDescription:
    """
    解析场景 YAML 文本

    Args:
        text: YAML 文本
        base_dir: 相对路径的基准目录；None 时不检查文件引用
        source: 用于日志的来源名

    Raises:
        SceneSyntaxError / UnknownKeyError / MissingFieldError /
        SceneValueError / BadReferenceError
    """
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        column = mark.column + 1 if mark is not None else None
        raise SceneSyntaxError(f"YAML 语法错误: {getattr(e, 'problem', e)}", line=line, column=column) from e

    if not isinstance(data, dict):
        raise SceneValueError("场景文件顶层必须是映射", line=1, column=1)

    try:
        desc = SceneDescription.model_validate(data)
    except ValidationError as e:
        raise _translate_validation_error(e, root) from e

    if base_dir is not None:
        base_dir = Path(base_dir)
        for ref, loc in _file_references(desc):
            if not (base_dir / ref).is_file():
                node, _ = _node_at(root, loc)
                line, column = _mark(node)
                raise BadReferenceError(
                    f"引用的文件不存在: {ref}", key=str(loc[-1]), line=line, column=column
                )

    logger.debug(f"📂 场景已解析: {source}")
    return desc


def parse_scene(path) -> SceneDescription:
    """读取并校验场景文件，文件引用相对场景文件所在目录"""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"无法读取场景文件 {path}: {e}") from e
    return parse_scene_text(text, base_dir=path.parent, source=str(path))


def serialize_scene(desc: SceneDescription) -> str:
    """SceneDescription → YAML 文本"""
    data = desc.model_dump(mode="json", exclude_none=True)
    return yaml.safe_dump(data, sort_keys=False, allow_unicode=True)


# ============================================================================
# 场景装配
# ============================================================================


def _build_mesh(spec: MeshSpec, base_dir: Path, material_id: int) -> TriangleMesh:
    if spec.file is not None:
        return load_obj(base_dir / spec.file, material_id=material_id)
    if spec.primitive == "plane":
        return make_plane(spec.center, spec.size[:2], spec.normal_axis, spec.flip)
    if spec.primitive == "box":
        return make_box(spec.center, spec.size, inward=spec.flip)
    return make_uv_sphere(spec.center, spec.radius)


def _material_layer(value, channels: int, res: int, base_dir: Path, name: str) -> np.ndarray:
    if isinstance(value, str):
        path = base_dir / value
        data = read_image(path)
        if data.ndim == 4:
            data = data[0]
        elif path.suffix.lower() != ".rfm":
            # 图像第一行对应 v = 1
            data = data[::-1]
        if data.shape[:2] != (res, res):
            raise SceneValueError(
                f"纹理 {value} 尺寸 {data.shape[:2]} 与 texture_resolution={res} 不一致", key=name
            )
    else:
        data = np.broadcast_to(np.asarray(value, dtype=np.float64), (res, res, len(value)))
    if data.shape[-1] < channels:
        pad = np.ones(data.shape[:2] + (channels - data.shape[-1],))
        data = np.concatenate([data, pad], axis=-1)
    return np.clip(data[..., :channels], 0.0, 1.0)


def _build_params(desc: SceneDescription, base_dir: Path) -> ParamSet:
    res = desc.texture_resolution
    materials: List[MaterialSpec] = [m.material for m in desc.meshes]
    k_d = np.stack([_material_layer(m.k_d, 4, res, base_dir, "k_d") for m in materials])
    k_orm = np.stack([_material_layer(m.k_orm, 3, res, base_dir, "k_orm") for m in materials])
    normal = np.stack([_material_layer(m.normal, 3, res, base_dir, "normal") for m in materials])

    env_spec = desc.environment
    if env_spec.file is not None:
        env = build_env_cdf(EnvironmentMap(np.clip(read_hdr(base_dir / env_spec.file), 0.0, None)))
    else:
        env = EnvironmentMap.constant(env_spec.constant, env_spec.height, env_spec.width)

    return ParamSet(
        k_d=Texture2D(k_d),
        k_orm=Texture2D(k_orm),
        normal=Texture2D(normal),
        env=env,
        cache=DiffuseCache.zeros(len(materials), desc.cache_resolution),
    )


def load_scene(desc: SceneDescription, base_dir=".") -> Scene:
    """
    由场景描述装配 Scene

    Args:
        desc: 已校验的场景描述
        base_dir: 相对路径的基准目录

    Returns:
        Scene，第 i 个网格使用第 i 层纹理
    """
    base_dir = Path(base_dir)
    meshes = [_build_mesh(spec, base_dir, i) for i, spec in enumerate(desc.meshes)]
    merged = merge_meshes(meshes)
    if desc.scale != 1.0:
        merged = TriangleMesh(
            merged.positions * desc.scale,
            merged.indices,
            merged.normals,
            merged.uvs,
            merged.material_id,
        )

    cameras = [
        look_at(
            np.asarray(cam.position) * desc.scale,
            np.asarray(cam.look_at) * desc.scale,
            cam.up,
            math.radians(cam.fov),
            cam.width,
            cam.height,
        )
        for cam in desc.cameras
    ]
    return Scene.build(merged, _build_params(desc, base_dir), cameras)


def load_scene_file(path) -> Scene:
    path = Path(path)
    logger.info(f"📂 加载场景: {path}")
    return load_scene(parse_scene(path), path.parent)
