"""
几何: 三角网格、BVH 与光线求交

- TriangleMesh: 顶点 / 索引 / 法线 / UV / 每面材质号
- load_obj: Wavefront OBJ 子集 (v, vt, vn, f；多边形扇形三角化)
- 程序化图元: 平面、立方体、UV 球
- build_bvh: 分箱 SAH 二叉 BVH (numpy 构建)
- trace / occluded: numba 编译的遍历内核，float64 Möller-Trumbore
- Camera: 针孔相机 (NeRF / OpenGL 约定，相机朝 -Z)
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from numba import njit

from scripts.config import (
    BVH_BINS,
    BVH_LEAF_SIZE,
    BVH_MAX_DEPTH,
    BVH_MEDIAN_DEPTH,
    MIN_TRIANGLE_AREA,
    T_MIN,
    TRAVERSAL_STACK_SIZE,
)
from scripts.errors import GeometryError
from scripts.sampling import orthonormal_basis

logger = logging.getLogger(__name__)


# ============================================================================
# 三角网格
# ============================================================================


@dataclass
class TriangleMesh:
    """
    三角网格

    positions: (V, 3) 米
    indices: (F, 3) 顶点索引
    normals: (V, 3) 单位着色法线
    uvs: (V, 2)
    material_id: (F,) 材质 / 纹理层号
    """

    positions: np.ndarray
    indices: np.ndarray
    normals: Optional[np.ndarray] = None
    uvs: Optional[np.ndarray] = None
    material_id: Optional[np.ndarray] = None
    face_tangents: np.ndarray = field(init=False, repr=False)
    tangent_sign: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.indices = np.ascontiguousarray(self.indices, dtype=np.int64).reshape(-1, 3)
        if self.normals is None:
            self.normals = vertex_normals(self.positions, self.indices)
        else:
            n = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            length = np.linalg.norm(n, axis=1, keepdims=True)
            self.normals = np.where(length > 0, n / np.where(length > 0, length, 1.0), 0.0)
        if self.uvs is None:
            self.uvs = np.zeros((len(self.positions), 2))
        self.uvs = np.ascontiguousarray(self.uvs, dtype=np.float64).reshape(-1, 2)
        if self.material_id is None:
            self.material_id = np.zeros(len(self.indices), dtype=np.int64)
        self.material_id = np.asarray(self.material_id, dtype=np.int64).reshape(-1)
        self.face_tangents, self.tangent_sign = face_tangents(
            self.positions, self.indices, self.uvs
        )

    @property
    def triangle_count(self) -> int:
        return len(self.indices)

    @property
    def vertex_count(self) -> int:
        return len(self.positions)

    def triangle_areas(self) -> np.ndarray:
        p = self.positions[self.indices]
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    def bounds(self):
        return self.positions.min(axis=0), self.positions.max(axis=0)

    def diagonal(self) -> float:
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))

    def validate(self, check_winding: bool = False) -> "TriangleMesh":
        """
        检查网格不变量，失败时抛出 GeometryError

        Args:
            check_winding: 是否检查相邻三角形绕序一致 (共享边方向相反)
        """
        if self.triangle_count == 0:
            raise GeometryError("网格为空")
        if self.indices.min() < 0 or self.indices.max() >= self.vertex_count:
            raise GeometryError("顶点索引越界")
        if len(self.normals) != self.vertex_count or len(self.uvs) != self.vertex_count:
            raise GeometryError("法线 / UV 数量与顶点数不一致")
        if len(self.material_id) != self.triangle_count:
            raise GeometryError("材质号数量与三角形数不一致")
        if np.any(self.triangle_areas() <= MIN_TRIANGLE_AREA):
            raise GeometryError("存在退化三角形")
        if not np.all(np.isfinite(self.positions)):
            raise GeometryError("顶点坐标包含非有限值")
        if check_winding:
            edges = np.concatenate(
                [self.indices[:, [0, 1]], self.indices[:, [1, 2]], self.indices[:, [2, 0]]]
            )
            _, counts = np.unique(edges, axis=0, return_counts=True)
            if np.any(counts > 1):
                raise GeometryError("绕序不一致: 存在同向共享边")
        return self

    def surface_at(self, prim: np.ndarray, b1: np.ndarray, b2: np.ndarray):
        """
        重心坐标插值

        Returns:
            (position, geometric normal, shading normal, uv, tangent, tangent_sign, material_id)
        """
        tri = self.indices[prim]
        b0 = 1.0 - b1 - b2
        w = np.stack([b0, b1, b2], axis=-1)[..., None]
        p = self.positions[tri]
        position = (p * w).sum(axis=1)
        ng = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        ng = ng / np.clip(np.linalg.norm(ng, axis=1, keepdims=True), 1e-300, None)
        ns = (self.normals[tri] * w).sum(axis=1)
        ns_len = np.linalg.norm(ns, axis=1, keepdims=True)
        ns = np.where(ns_len > 1e-12, ns / np.where(ns_len > 1e-12, ns_len, 1.0), ng)
        uv = (self.uvs[tri] * w).sum(axis=1)
        return (
            position,
            ng,
            ns,
            uv,
            self.face_tangents[prim],
            self.tangent_sign[prim],
            self.material_id[prim],
        )


def vertex_normals(positions: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """面积加权顶点法线"""
    p = positions[indices]
    face_n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    normals = np.zeros_like(positions)
    for k in range(3):
        np.add.at(normals, indices[:, k], face_n)
    length = np.linalg.norm(normals, axis=1, keepdims=True)
    return np.where(length > 0, normals / np.where(length > 0, length, 1.0), 0.0)


def face_tangents(positions: np.ndarray, indices: np.ndarray, uvs: np.ndarray):
    """由 UV 导数计算每面切线；UV 退化时使用任意正交方向"""
    if len(indices) == 0:
        return np.zeros((0, 3)), np.zeros(0)
    p = positions[indices]
    t = uvs[indices]
    dp1 = p[:, 1] - p[:, 0]
    dp2 = p[:, 2] - p[:, 0]
    duv1 = t[:, 1] - t[:, 0]
    duv2 = t[:, 2] - t[:, 0]
    det = duv1[:, 0] * duv2[:, 1] - duv2[:, 0] * duv1[:, 1]
    ok = np.abs(det) > 1e-12
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)[:, None]
    tangent = (dp1 * duv2[:, 1:2] - dp2 * duv1[:, 1:2]) * inv
    bitangent = (dp2 * duv1[:, 0:1] - dp1 * duv2[:, 0:1]) * inv

    ng = np.cross(dp1, dp2)
    ng = ng / np.clip(np.linalg.norm(ng, axis=1, keepdims=True), 1e-300, None)
    fallback, _ = orthonormal_basis(ng)
    t_len = np.linalg.norm(tangent, axis=1, keepdims=True)
    ok = ok & (t_len[:, 0] > 1e-12)
    tangent = np.where(ok[:, None], tangent / np.where(t_len > 1e-12, t_len, 1.0), fallback)
    sign = np.where((np.cross(ng, tangent) * bitangent).sum(axis=1) < 0.0, -1.0, 1.0)
    sign = np.where(ok, sign, 1.0)
    return tangent, sign


# ============================================================================
# OBJ / 程序化图元
# ============================================================================


def _obj_index(token: str, count: int) -> int:
    i = int(token)
    return i - 1 if i > 0 else count + i


def load_obj(path, material_id: int = 0) -> TriangleMesh:
    """
    读取 Wavefront OBJ 子集

    Args:
        path: .obj 文件路径
        material_id: 赋给所有三角形的材质号

    Returns:
        TriangleMesh；缺少法线时按面积加权计算

    Raises:
        GeometryError: 文件无法解析或没有三角形
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise GeometryError(f"无法读取 OBJ 文件 {path}: {e}") from e

    v: List[List[float]] = []
    vt: List[List[float]] = []
    vn: List[List[float]] = []
    corners = {}
    out_p, out_t, out_n, faces = [], [], [], []
    has_normals = True

    for lineno, raw in enumerate(text.splitlines(), start=1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        tag, args = parts[0], parts[1:]
        try:
            if tag == "v":
                v.append([float(a) for a in args[:3]])
            elif tag == "vt":
                vt.append([float(a) for a in args[:2]])
            elif tag == "vn":
                vn.append([float(a) for a in args[:3]])
            elif tag == "f":
                if len(args) < 3:
                    raise ValueError("面至少需要 3 个顶点")
                face = []
                for corner in args:
                    fields = corner.split("/")
                    vi = _obj_index(fields[0], len(v))
                    ti = _obj_index(fields[1], len(vt)) if len(fields) > 1 and fields[1] else -1
                    ni = _obj_index(fields[2], len(vn)) if len(fields) > 2 and fields[2] else -1
                    key = (vi, ti, ni)
                    if key not in corners:
                        corners[key] = len(out_p)
                        out_p.append(v[vi])
                        out_t.append(vt[ti] if ti >= 0 else [0.0, 0.0])
                        out_n.append(vn[ni] if ni >= 0 else [0.0, 0.0, 0.0])
                        has_normals = has_normals and ni >= 0
                    face.append(corners[key])
                # 扇形三角化
                for k in range(1, len(face) - 1):
                    faces.append([face[0], face[k], face[k + 1]])
        except (ValueError, IndexError) as e:
            raise GeometryError(f"OBJ 解析失败 {path}:{lineno}: {e}") from e

    if not faces:
        raise GeometryError(f"OBJ 文件没有三角形: {path}")

    positions = np.asarray(out_p, dtype=np.float64)
    indices = np.asarray(faces, dtype=np.int64)
    mesh = TriangleMesh(
        positions=positions,
        indices=indices,
        normals=np.asarray(out_n) if has_normals else None,
        uvs=np.asarray(out_t),
        material_id=np.full(len(indices), material_id),
    )
    mesh = drop_degenerate(mesh)
    logger.info(f"📂 已加载 OBJ: {path.name} ({mesh.triangle_count} 个三角形)")
    return mesh


def drop_degenerate(mesh: TriangleMesh) -> TriangleMesh:
    keep = mesh.triangle_areas() > MIN_TRIANGLE_AREA
    if keep.all():
        return mesh
    logger.warning(f"⚠️ 丢弃 {int((~keep).sum())} 个退化三角形")
    return TriangleMesh(
        mesh.positions, mesh.indices[keep], mesh.normals, mesh.uvs, mesh.material_id[keep]
    )


def make_plane(
    center=(0.0, 0.0, 0.0), size=(2.0, 2.0), normal_axis: int = 2, flip: bool = False
) -> TriangleMesh:
    """轴对齐矩形，UV 覆盖 [0,1]²，法线朝 +axis (flip 时朝 -axis)"""
    a, b = [(1, 2), (2, 0), (0, 1)][normal_axis]
    hx, hy = size[0] / 2.0, size[1] / 2.0
    corners = np.zeros((4, 3))
    for i, (sx, sy) in enumerate([(-1, -1), (1, -1), (1, 1), (-1, 1)]):
        corners[i, a] = sx * hx
        corners[i, b] = sy * hy
    corners += np.asarray(center, dtype=np.float64)
    uvs = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    indices = np.array([[0, 1, 2], [0, 2, 3]])
    normal = np.zeros(3)
    normal[normal_axis] = -1.0 if flip else 1.0
    if flip:
        indices = indices[:, ::-1]
    return TriangleMesh(corners, indices, np.tile(normal, (4, 1)), uvs)


def make_box(center=(0.0, 0.0, 0.0), size=(1.0, 1.0, 1.0), inward: bool = False) -> TriangleMesh:
    """六个面组成的立方体，每个面独立 UV；inward 时法线朝内"""
    center = np.asarray(center, dtype=np.float64)
    half = np.asarray(size, dtype=np.float64) / 2.0
    faces = []
    for axis in range(3):
        a, b = [(1, 2), (2, 0), (0, 1)][axis]
        for side in (-1.0, 1.0):
            offset = np.zeros(3)
            offset[axis] = side * half[axis]
            face = make_plane(
                center + offset,
                (2.0 * half[a], 2.0 * half[b]),
                axis,
                flip=(side < 0) != inward,
            )
            faces.append(face)
    return merge_meshes(faces, material_ids=[0] * len(faces))


def make_uv_sphere(
    center=(0.0, 0.0, 0.0), radius: float = 1.0, rings: int = 32, segments: int = 64
) -> TriangleMesh:
    """经纬球，u 沿经度、v 沿纬度 (v = 0 在 -z 极)"""
    center = np.asarray(center, dtype=np.float64)
    v = np.linspace(0.0, 1.0, rings + 1)
    u = np.linspace(0.0, 1.0, segments + 1)
    uu, vv = np.meshgrid(u, v)
    theta = math.pi * (1.0 - vv)
    phi = 2.0 * math.pi * uu
    normals = np.stack(
        [np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], axis=-1
    ).reshape(-1, 3)
    positions = center + radius * normals
    uvs = np.stack([uu, vv], axis=-1).reshape(-1, 2)

    indices = []
    cols = segments + 1
    for r in range(rings):
        for s in range(segments):
            i0 = r * cols + s
            i1 = i0 + 1
            i2 = i0 + cols
            i3 = i2 + 1
            if r > 0:
                indices.append([i0, i1, i3])
            if r < rings - 1:
                indices.append([i0, i3, i2])
    return TriangleMesh(positions, np.asarray(indices), normals, uvs)


def merge_meshes(
    meshes: Sequence[TriangleMesh], material_ids: Optional[Sequence[int]] = None
) -> TriangleMesh:
    """合并网格；默认第 i 个网格的材质号为 i"""
    if not meshes:
        raise GeometryError("没有可合并的网格")
    if material_ids is None:
        material_ids = list(range(len(meshes)))
    positions, indices, normals, uvs, mids = [], [], [], [], []
    offset = 0
    for mesh, mid in zip(meshes, material_ids):
        positions.append(mesh.positions)
        indices.append(mesh.indices + offset)
        normals.append(mesh.normals)
        uvs.append(mesh.uvs)
        mids.append(np.full(mesh.triangle_count, mid, dtype=np.int64))
        offset += mesh.vertex_count
    return TriangleMesh(
        np.concatenate(positions),
        np.concatenate(indices),
        np.concatenate(normals),
        np.concatenate(uvs),
        np.concatenate(mids),
    )


# ============================================================================
# BVH 构建
# ============================================================================


@dataclass
class Bvh:
    """
    扁平化 BVH

    count[i] > 0 表示叶子，三角形为 prim[start[i] : start[i] + count[i]]；
    否则 left[i] / right[i] 为子节点。
    """

    node_min: np.ndarray
    node_max: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    prim: np.ndarray
    v0: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    depth: int

    @property
    def node_count(self) -> int:
        return len(self.count)

    def leaves(self) -> np.ndarray:
        return np.nonzero(self.count > 0)[0]


def _surface_area(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    d = hi - lo
    return 2.0 * (d[..., 0] * d[..., 1] + d[..., 1] * d[..., 2] + d[..., 2] * d[..., 0])


def _sah_split(ids, centroid, tri_min, tri_max):
    """分箱 SAH，返回左侧掩码；找不到有效划分时返回 None"""
    c = centroid[ids]
    cmin = c.min(axis=0)
    extent = c.max(axis=0) - cmin
    best_cost = np.inf
    best_mask = None
    for axis in range(3):
        if extent[axis] <= 0.0:
            continue
        bins = np.minimum(
            ((c[:, axis] - cmin[axis]) / extent[axis] * BVH_BINS).astype(np.int64), BVH_BINS - 1
        )
        counts = np.bincount(bins, minlength=BVH_BINS)
        bin_min = np.full((BVH_BINS, 3), np.inf)
        bin_max = np.full((BVH_BINS, 3), -np.inf)
        np.minimum.at(bin_min, bins, tri_min[ids])
        np.maximum.at(bin_max, bins, tri_max[ids])

        left_min = np.minimum.accumulate(bin_min, axis=0)[:-1]
        left_max = np.maximum.accumulate(bin_max, axis=0)[:-1]
        right_min = np.minimum.accumulate(bin_min[::-1], axis=0)[::-1][1:]
        right_max = np.maximum.accumulate(bin_max[::-1], axis=0)[::-1][1:]
        left_count = np.cumsum(counts)[:-1]
        right_count = np.cumsum(counts[::-1])[::-1][1:]

        valid = (left_count > 0) & (right_count > 0)
        if not valid.any():
            continue
        with np.errstate(invalid="ignore"):
            cost = left_count * _surface_area(left_min, left_max) + right_count * _surface_area(
                right_min, right_max
            )
        cost = np.where(valid, cost, np.inf)
        split = int(np.argmin(cost))
        if cost[split] < best_cost:
            best_cost = cost[split]
            best_mask = bins <= split
    return best_mask


def build_bvh(mesh: TriangleMesh) -> Bvh:
    """
    构建分箱 SAH BVH

    Args:
        mesh: 三角网格

    Returns:
        Bvh，深度 ≤ 64

    Raises:
        GeometryError: 网格为空
    """
    if mesh is None or mesh.triangle_count == 0:
        raise GeometryError("无法为空网格构建 BVH")

    tris = mesh.positions[mesh.indices]
    tri_min = tris.min(axis=1)
    tri_max = tris.max(axis=1)
    centroid = tris.mean(axis=1)
    count_total = len(tris)
    order = np.arange(count_total)

    node_min: List[np.ndarray] = []
    node_max: List[np.ndarray] = []
    left: List[int] = []
    right: List[int] = []
    start: List[int] = []
    count: List[int] = []

    def new_node() -> int:
        node_min.append(np.zeros(3))
        node_max.append(np.zeros(3))
        left.append(-1)
        right.append(-1)
        start.append(0)
        count.append(0)
        return len(count) - 1

    scale = max(float(np.abs(tris).max()), 1e-12)
    pad = 1e-12 * scale
    max_depth = 0
    stack = [(new_node(), 0, count_total, 0)]
    while stack:
        node, lo, hi, depth = stack.pop()
        ids = order[lo:hi]
        node_min[node] = tri_min[ids].min(axis=0) - pad
        node_max[node] = tri_max[ids].max(axis=0) + pad
        max_depth = max(max_depth, depth)
        n = hi - lo
        if n <= BVH_LEAF_SIZE or depth >= BVH_MAX_DEPTH - 1:
            start[node] = lo
            count[node] = n
            continue

        mask = None
        if depth < BVH_MEDIAN_DEPTH:
            mask = _sah_split(ids, centroid, tri_min, tri_max)
        if mask is None:
            # 中位数划分
            c = centroid[ids]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            ranked = np.argsort(c[:, axis], kind="stable")
            mask = np.zeros(n, dtype=bool)
            mask[ranked[: n // 2]] = True

        order[lo:hi] = np.concatenate([ids[mask], ids[~mask]])
        mid = lo + int(mask.sum())
        l_node = new_node()
        r_node = new_node()
        left[node] = l_node
        right[node] = r_node
        stack.append((r_node, mid, hi, depth + 1))
        stack.append((l_node, lo, mid, depth + 1))

    v0 = np.ascontiguousarray(tris[:, 0])
    bvh = Bvh(
        node_min=np.ascontiguousarray(node_min),
        node_max=np.ascontiguousarray(node_max),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        start=np.asarray(start, dtype=np.int64),
        count=np.asarray(count, dtype=np.int64),
        prim=np.ascontiguousarray(order, dtype=np.int64),
        v0=v0,
        e1=np.ascontiguousarray(tris[:, 1] - tris[:, 0]),
        e2=np.ascontiguousarray(tris[:, 2] - tris[:, 0]),
        depth=max_depth,
    )
    logger.info(f"✅ BVH 构建完成: {bvh.node_count} 个节点, 深度 {max_depth}")
    return bvh


# ============================================================================
# numba 遍历内核
# ============================================================================


@njit(cache=True, nogil=True)
def _safe_inv(d):
    if abs(d) < 1e-30:
        d = math.copysign(1e-30, d)
    return 1.0 / d


@njit(cache=True, nogil=True)
def _hit_box(node_min, node_max, node, ox, oy, oz, ix, iy, iz, t0, t1):
    ta = (node_min[node, 0] - ox) * ix
    tb = (node_max[node, 0] - ox) * ix
    near = min(ta, tb)
    far = max(ta, tb)
    ta = (node_min[node, 1] - oy) * iy
    tb = (node_max[node, 1] - oy) * iy
    near = max(near, min(ta, tb))
    far = min(far, max(ta, tb))
    ta = (node_min[node, 2] - oz) * iz
    tb = (node_max[node, 2] - oz) * iz
    near = max(near, min(ta, tb))
    far = min(far, max(ta, tb))
    # 放宽远端，抵消舍入误差
    far *= 1.0000000000000004
    return max(near, t0) <= min(far, t1)


@njit(cache=True, nogil=True)
def _intersect(v0, e1, e2, k, ox, oy, oz, dx, dy, dz):
    """float64 Möller-Trumbore，边界包含在内；未命中返回 t = -1"""
    px = dy * e2[k, 2] - dz * e2[k, 1]
    py = dz * e2[k, 0] - dx * e2[k, 2]
    pz = dx * e2[k, 1] - dy * e2[k, 0]
    det = e1[k, 0] * px + e1[k, 1] * py + e1[k, 2] * pz
    if det == 0.0:
        return -1.0, 0.0, 0.0
    inv = 1.0 / det
    sx = ox - v0[k, 0]
    sy = oy - v0[k, 1]
    sz = oz - v0[k, 2]
    b1 = (sx * px + sy * py + sz * pz) * inv
    if b1 < 0.0 or b1 > 1.0:
        return -1.0, 0.0, 0.0
    qx = sy * e1[k, 2] - sz * e1[k, 1]
    qy = sz * e1[k, 0] - sx * e1[k, 2]
    qz = sx * e1[k, 1] - sy * e1[k, 0]
    b2 = (dx * qx + dy * qy + dz * qz) * inv
    if b2 < 0.0 or b1 + b2 > 1.0:
        return -1.0, 0.0, 0.0
    t = (e2[k, 0] * qx + e2[k, 1] * qy + e2[k, 2] * qz) * inv
    return t, b1, b2


@njit(cache=True, nogil=True)
def _closest_hit_kernel(
    orig, dirs, tmin, tmax, node_min, node_max, left, right, start, count, prim,
    v0, e1, e2, out_t, out_prim, out_b1, out_b2,
):
    stack = np.empty(TRAVERSAL_STACK_SIZE, np.int64)
    for r in range(orig.shape[0]):
        ox, oy, oz = orig[r, 0], orig[r, 1], orig[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        ix, iy, iz = _safe_inv(dx), _safe_inv(dy), _safe_inv(dz)
        t0 = tmin[r]
        best = tmax[r]
        best_prim = -1
        best_b1 = 0.0
        best_b2 = 0.0
        stack[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if not _hit_box(node_min, node_max, node, ox, oy, oz, ix, iy, iz, t0, best):
                continue
            c = count[node]
            if c > 0:
                for j in range(start[node], start[node] + c):
                    k = prim[j]
                    t, b1, b2 = _intersect(v0, e1, e2, k, ox, oy, oz, dx, dy, dz)
                    if t > t0 and t < tmax[r]:
                        # 距离相同时取编号较小的三角形，保证与遍历顺序无关
                        if t < best or (t == best and best_prim >= 0 and k < best_prim):
                            best = t
                            best_prim = k
                            best_b1 = b1
                            best_b2 = b2
            else:
                stack[sp] = right[node]
                stack[sp + 1] = left[node]
                sp += 2
        out_t[r] = best
        out_prim[r] = best_prim
        out_b1[r] = best_b1
        out_b2[r] = best_b2


@njit(cache=True, nogil=True)
def _any_hit_kernel(
    orig, dirs, tmin, tmax, node_min, node_max, left, right, start, count, prim,
    v0, e1, e2, out_hit,
):
    stack = np.empty(TRAVERSAL_STACK_SIZE, np.int64)
    for r in range(orig.shape[0]):
        ox, oy, oz = orig[r, 0], orig[r, 1], orig[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        ix, iy, iz = _safe_inv(dx), _safe_inv(dy), _safe_inv(dz)
        t0 = tmin[r]
        t1 = tmax[r]
        found = False
        stack[0] = 0
        sp = 1
        while sp > 0 and not found:
            sp -= 1
            node = stack[sp]
            if not _hit_box(node_min, node_max, node, ox, oy, oz, ix, iy, iz, t0, t1):
                continue
            c = count[node]
            if c > 0:
                for j in range(start[node], start[node] + c):
                    t, b1, b2 = _intersect(v0, e1, e2, prim[j], ox, oy, oz, dx, dy, dz)
                    if t > t0 and t < t1:
                        found = True
                        break
            else:
                stack[sp] = right[node]
                stack[sp + 1] = left[node]
                sp += 2
        out_hit[r] = found


@njit(cache=True, nogil=True)
def _brute_force_kernel(orig, dirs, tmin, tmax, v0, e1, e2, out_t, out_prim, out_b1, out_b2):
    for r in range(orig.shape[0]):
        best = tmax[r]
        best_prim = -1
        best_b1 = 0.0
        best_b2 = 0.0
        for k in range(v0.shape[0]):
            t, b1, b2 = _intersect(
                v0, e1, e2, k, orig[r, 0], orig[r, 1], orig[r, 2], dirs[r, 0], dirs[r, 1], dirs[r, 2]
            )
            if t > tmin[r] and t < tmax[r] and t < best:
                best = t
                best_prim = k
                best_b1 = b1
                best_b2 = b2
        out_t[r] = best
        out_prim[r] = best_prim
        out_b1[r] = best_b1
        out_b2[r] = best_b2


# ============================================================================
# 求交接口
# ============================================================================


@dataclass
class Hit:
    """
    一批光线的求交结果，valid = False 表示 Miss

    ng 为几何法线 (由绕序决定朝向)，ns 为插值着色法线。
    """

    valid: np.ndarray
    t: np.ndarray
    prim: np.ndarray
    barycentric: np.ndarray
    position: np.ndarray
    ng: np.ndarray
    ns: np.ndarray
    uv: np.ndarray
    tangent: np.ndarray
    tangent_sign: np.ndarray
    material_id: np.ndarray

    def __len__(self) -> int:
        return len(self.valid)


def _ray_arrays(origins, dirs, t_min, t_max):
    origins = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
    dirs = np.ascontiguousarray(np.atleast_2d(dirs), dtype=np.float64)
    origins = np.ascontiguousarray(np.broadcast_to(origins, dirs.shape))
    n = len(dirs)
    tmin = np.ascontiguousarray(np.broadcast_to(np.asarray(t_min, np.float64), (n,)))
    tmax = np.ascontiguousarray(np.broadcast_to(np.asarray(t_max, np.float64), (n,)))
    return origins, dirs, tmin, tmax


def _make_hit(mesh: Optional[TriangleMesh], t, prim, b1, b2) -> Hit:
    n = len(t)
    valid = prim >= 0
    position = np.zeros((n, 3))
    ng = np.zeros((n, 3))
    ns = np.zeros((n, 3))
    uv = np.zeros((n, 2))
    tangent = np.zeros((n, 3))
    sign = np.ones(n)
    material = np.full(n, -1, dtype=np.int64)
    if valid.any():
        p, g, s, u, tg, sg, mid = mesh.surface_at(prim[valid], b1[valid], b2[valid])
        position[valid] = p
        ng[valid] = g
        ns[valid] = s
        uv[valid] = u
        tangent[valid] = tg
        sign[valid] = sg
        material[valid] = mid
    return Hit(
        valid=valid,
        t=np.where(valid, t, np.inf),
        prim=prim,
        barycentric=np.stack([b1, b2], axis=-1),
        position=position,
        ng=ng,
        ns=ns,
        uv=uv,
        tangent=tangent,
        tangent_sign=sign,
        material_id=material,
    )


def trace(
    bvh: Optional[Bvh],
    mesh: Optional[TriangleMesh],
    origins,
    dirs,
    t_min: float = T_MIN,
    t_max: float = np.inf,
) -> Hit:
    """
    最近交点查询

    Args:
        bvh / mesh: 场景几何；为 None 时视为空场景 (全部 Miss)
        origins: (N, 3) 或 (3,)
        dirs: (N, 3) 单位方向
        t_min / t_max: 有效区间 (t_min, t_max)

    Returns:
        Hit 批量结果
    """
    origins, dirs, tmin, tmax = _ray_arrays(origins, dirs, t_min, t_max)
    n = len(dirs)
    out_t = np.full(n, np.inf)
    out_prim = np.full(n, -1, dtype=np.int64)
    out_b1 = np.zeros(n)
    out_b2 = np.zeros(n)
    if bvh is not None and n > 0:
        _closest_hit_kernel(
            origins, dirs, tmin, tmax, bvh.node_min, bvh.node_max, bvh.left, bvh.right,
            bvh.start, bvh.count, bvh.prim, bvh.v0, bvh.e1, bvh.e2,
            out_t, out_prim, out_b1, out_b2,
        )
    return _make_hit(mesh, out_t, out_prim, out_b1, out_b2)


def occluded(
    bvh: Optional[Bvh],
    mesh: Optional[TriangleMesh],
    origins,
    dirs,
    t_max=np.inf,
    t_min: float = T_MIN,
) -> np.ndarray:
    """可见性查询: (t_min, t_max) 内存在任意交点时为 True，提前退出"""
    origins, dirs, tmin, tmax = _ray_arrays(origins, dirs, t_min, t_max)
    out = np.zeros(len(dirs), dtype=np.bool_)
    if bvh is not None and len(dirs) > 0:
        _any_hit_kernel(
            origins, dirs, tmin, tmax, bvh.node_min, bvh.node_max, bvh.left, bvh.right,
            bvh.start, bvh.count, bvh.prim, bvh.v0, bvh.e1, bvh.e2, out,
        )
    return out


def trace_brute_force(mesh: TriangleMesh, origins, dirs, t_min: float = T_MIN, t_max=np.inf) -> Hit:
    """逐三角形求交，作为 BVH 的对照"""
    origins, dirs, tmin, tmax = _ray_arrays(origins, dirs, t_min, t_max)
    n = len(dirs)
    tris = mesh.positions[mesh.indices]
    v0 = np.ascontiguousarray(tris[:, 0])
    e1 = np.ascontiguousarray(tris[:, 1] - tris[:, 0])
    e2 = np.ascontiguousarray(tris[:, 2] - tris[:, 0])
    out_t = np.full(n, np.inf)
    out_prim = np.full(n, -1, dtype=np.int64)
    out_b1 = np.zeros(n)
    out_b2 = np.zeros(n)
    _brute_force_kernel(origins, dirs, tmin, tmax, v0, e1, e2, out_t, out_prim, out_b1, out_b2)
    return _make_hit(mesh, out_t, out_prim, out_b1, out_b2)


# ============================================================================
# 相机
# ============================================================================


@dataclass
class Camera:
    """
    针孔相机

    c2w: 4×4 相机到世界矩阵 (NeRF / OpenGL 约定: 相机看向 -Z，+Y 向上)
    fov_x: 水平视场角 (弧度)
    """

    c2w: np.ndarray
    fov_x: float
    width: int
    height: int

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64).reshape(4, 4)

    @property
    def position(self) -> np.ndarray:
        return self.c2w[:3, 3]

    def generate_rays(self, px: np.ndarray, py: np.ndarray, jitter: Optional[np.ndarray] = None):
        """
        生成像素光线

        Args:
            px / py: 像素列 / 行 (N,)，第 0 行在图像顶部
            jitter: (N, 2) 像素内偏移，默认像素中心 (0.5, 0.5)

        Returns:
            (origins (N, 3), dirs (N, 3))
        """
        px = np.asarray(px, dtype=np.float64)
        py = np.asarray(py, dtype=np.float64)
        if jitter is None:
            jitter = np.full((len(px), 2), 0.5)
        tan_half = math.tan(0.5 * self.fov_x)
        x = (2.0 * (px + jitter[:, 0]) / self.width - 1.0) * tan_half
        y = (1.0 - 2.0 * (py + jitter[:, 1]) / self.height) * tan_half * self.height / self.width
        d_cam = np.stack([x, y, -np.ones_like(x)], axis=-1)
        dirs = d_cam @ self.c2w[:3, :3].T
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        origins = np.broadcast_to(self.position, dirs.shape).copy()
        return origins, dirs

    def is_rigid(self, tol: float = 1e-4) -> bool:
        r = self.c2w[:3, :3]
        return (
            np.allclose(r @ r.T, np.eye(3), atol=tol)
            and abs(np.linalg.det(r) - 1.0) < tol
            and np.allclose(self.c2w[3], [0.0, 0.0, 0.0, 1.0], atol=tol)
        )


def look_at(eye, target, up=(0.0, 0.0, 1.0), fov_x: float = math.radians(40.0),
            width: int = 64, height: int = 64) -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    if abs(float(np.dot(forward, up))) > 1.0 - 1e-6:
        up = np.array([0.0, 1.0, 0.0]) if abs(forward[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)
    c2w = np.eye(4)
    c2w[:3, 0] = right
    c2w[:3, 1] = true_up
    c2w[:3, 2] = -forward
    c2w[:3, 3] = eye
    return Camera(c2w, fov_x, width, height)


def orbit_cameras(
    count: int,
    center=(0.0, 0.0, 0.0),
    radius: float = 4.0,
    fov_x: float = math.radians(40.0),
    width: int = 64,
    height: int = 64,
    min_elevation: float = 0.15,
) -> List[Camera]:
    """上半球 Fibonacci 分布的环绕相机，z 分量 ∈ [min_elevation, 1)"""
    center = np.asarray(center, dtype=np.float64)
    golden = math.pi * (3.0 - math.sqrt(5.0))
    cameras = []
    for i in range(count):
        z = 1.0 - (i + 0.5) / count * (1.0 - min_elevation)
        r = math.sqrt(max(0.0, 1.0 - z * z))
        phi = i * golden
        eye = center + radius * np.array([r * math.cos(phi), r * math.sin(phi), z])
        cameras.append(look_at(eye, center, (0.0, 0.0, 1.0), fov_x, width, height))
    return cameras
