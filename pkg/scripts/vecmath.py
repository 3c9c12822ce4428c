"""
numpy / torch 通用的向量运算

BRDF、法线贴图和色调映射既要在采样阶段用 numpy 计算，也要在梯度回放阶段
用 torch 计算。这里的函数只使用两者共有的运算 (.sum / .clip / ** / 索引)，
需要分派的地方通过 _is_torch 判断。
"""

import numpy as np
import torch

from scripts.config import LUMINANCE_WEIGHTS


def _is_torch(x) -> bool:
    return isinstance(x, torch.Tensor)


def dot(a, b):
    """最后一维点积，(..., 3) × (..., 3) → (...)"""
    return (a * b).sum(-1)


def normalize(v, eps: float = 1e-12):
    length = dot(v, v).clip(eps * eps, None) ** 0.5
    return v / length[..., None]


def cross(a, b):
    if _is_torch(a) or _is_torch(b):
        a, b = torch.broadcast_tensors(torch.as_tensor(a), torch.as_tensor(b))
        return torch.linalg.cross(a, b, dim=-1)
    return np.cross(a, b)


def where(cond, a, b):
    """逐元素选择，torch 分支要求 a、b 都是张量"""
    if _is_torch(a) or _is_torch(b):
        if not _is_torch(cond):
            cond = torch.from_numpy(np.asarray(cond))
        return torch.where(cond, a, b)
    return np.where(cond, a, b)


def zeros_like(x):
    return torch.zeros_like(x) if _is_torch(x) else np.zeros_like(x)


def luminance(rgb):
    r, g, b = LUMINANCE_WEIGHTS
    return rgb[..., 0] * r + rgb[..., 1] * g + rgb[..., 2] * b


def reinhard(x):
    x = x.clip(0.0, None)
    return x / (1.0 + x)


def srgb_encode(x):
    """线性 → sRGB，pow 分支先截断，避免 0 处导数为无穷"""
    low = x * 12.92
    high = 1.055 * x.clip(0.0031308, None) ** (1.0 / 2.4) - 0.055
    return where(x <= 0.0031308, low, high)


def tonemap(x):
    """Reinhard 压缩后做 sRGB 编码，输出范围 [0, 1)"""
    return srgb_encode(reinhard(x))
