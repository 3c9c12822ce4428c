"""
测试共享夹具: 小尺寸场景

场景都由程序化图元构建，纹理分辨率很低，保证默认测试集在几十秒内跑完。
"""

import math

import numpy as np
import pytest

from app.models import RenderConfig
from scripts.assets import DiffuseCache, EnvironmentMap, ParamSet, Texture2D, build_env_cdf
from scripts.geometry import look_at, make_plane, make_uv_sphere, merge_meshes
from scripts.scene import Scene


def make_params(layers=1, kd=(0.7, 0.7, 0.7, 1.0), orm=(1.0, 1.0, 0.0), env=(1.0, 1.0, 1.0),
                res=4, cache_res=8, env_size=(16, 32)) -> ParamSet:
    return ParamSet(
        k_d=Texture2D.constant(kd, layers, res, res),
        k_orm=Texture2D.constant(orm, layers, res, res),
        normal=Texture2D.constant((0.5, 0.5, 1.0), layers, res, res),
        env=EnvironmentMap.constant(env, *env_size),
        cache=DiffuseCache.zeros(layers, cache_res),
    )


def lambert_config(**kwargs) -> RenderConfig:
    """纯 Lambert 着色 (无镜面、无 Disney 修正)"""
    values = dict(depth=1, disney_primary=False, specular=False, firefly=math.inf, workers=1)
    values.update(kwargs)
    return RenderConfig(**values)


@pytest.fixture
def sphere_scene():
    """albedo 0.7 的漫反射球 + 常量白色环境光"""
    mesh = make_uv_sphere((0.0, 0.0, 0.0), 1.0, rings=16, segments=32)
    camera = look_at((0.0, -4.0, 0.0), (0.0, 0.0, 0.0), fov_x=math.radians(40.0), width=16, height=16)
    return Scene.build(mesh, make_params(), [camera])


@pytest.fixture
def plane_scene():
    """朝上的 2×2 平面，相机斜上方俯视"""
    mesh = make_plane((0.0, 0.0, 0.0), (2.0, 2.0), 2)
    camera = look_at((0.0, -1.5, 1.5), (0.0, 0.0, 0.0), fov_x=math.radians(30.0), width=16, height=16)
    params = make_params(kd=(0.5, 0.4, 0.3, 1.0), orm=(1.0, 0.6, 0.0), res=8)
    return Scene.build(mesh, params, [camera])


@pytest.fixture
def glossy_plane_scene():
    """金属平面 + 有亮斑的环境图 (用于 MIS / 梯度测试)"""
    mesh = make_plane((0.0, 0.0, 0.0), (2.0, 2.0), 2)
    camera = look_at((0.0, -1.5, 1.5), (0.0, 0.0, 0.0), fov_x=math.radians(30.0), width=8, height=8)
    params = make_params(kd=(0.6, 0.5, 0.4, 1.0), orm=(1.0, 0.35, 0.5), res=4, env_size=(16, 32))
    env = params.env.data
    env[:] = 0.2
    env[3:5, 6:9] = 40.0
    params.env = EnvironmentMap(env)
    build_env_cdf(params.env)
    return Scene.build(mesh, params, [camera])


@pytest.fixture
def two_planes_scene():
    """两面相对的镜面平面夹一个漫反射球"""
    left = make_plane((-1.5, 0.0, 0.0), (3.0, 3.0), 0)
    right = make_plane((1.5, 0.0, 0.0), (3.0, 3.0), 0, flip=True)
    ball = make_uv_sphere((0.0, 0.0, 0.0), 0.5, rings=12, segments=24)
    mesh = merge_meshes([left, right, ball])
    params = make_params(layers=3, res=4)
    params.k_d.data[2] = np.array([0.8, 0.3, 0.2, 1.0])
    params.k_orm.data[:2] = np.array([1.0, 0.05, 1.0])
    params.k_orm.data[2] = np.array([1.0, 0.8, 0.0])
    camera = look_at((0.6, -4.0, 1.0), (0.0, 0.0, 0.0), fov_x=math.radians(45.0), width=16, height=16)
    return Scene.build(mesh, params, [camera])


MINIMAL_SCENE_YAML = """\
meshes:
  - primitive: sphere
    radius: 1.0
environment:
  constant: [1.0, 1.0, 1.0]
cameras:
  - position: [0.0, -4.0, 0.0]
    width: 8
    height: 8
texture_resolution: 4
cache_resolution: 4
"""


@pytest.fixture
def minimal_scene_file(tmp_path):
    path = tmp_path / "scene.yaml"
    path.write_text(MINIMAL_SCENE_YAML, encoding="utf-8")
    return path
