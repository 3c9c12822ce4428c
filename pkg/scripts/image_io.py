"""
图像读写

- Radiance .hdr (RGBE): 读取支持平铺与新式 RLE 扫描线，写入使用新式 RLE
- PNG (8-bit): 通过 imageio 读写
- RFM1 原始浮点转储: b"RFM1" + uint32 ×4 (layers, height, width, channels)
  + 小端 float32 数据
"""

import io
import logging
import re
from pathlib import Path
from typing import Tuple

import imageio.v3 as iio
import numpy as np

from scripts.config import RFM_MAGIC
from scripts.errors import DataError

logger = logging.getLogger(__name__)

_RESOLUTION_RE = re.compile(rb"-Y (\d+) \+X (\d+)")


# ============================================================================
# RGBE
# ============================================================================


def rgbe_to_rgb(rgbe: np.ndarray) -> np.ndarray:
    """uint8 (..., 4) → float (..., 3)"""
    rgb = rgbe[..., :3].astype(np.float64)
    e = rgbe[..., 3:].astype(np.int32)
    scale = np.where(e > 0, np.ldexp(1.0, e - (128 + 8)), 0.0)
    return rgb * scale


def rgb_to_rgbe(rgb: np.ndarray) -> np.ndarray:
    """float (..., 3) → uint8 (..., 4)"""
    rgb = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, None)
    peak = rgb.max(axis=-1)
    mantissa, exponent = np.frexp(peak)
    valid = peak > 1e-32
    scale = np.where(valid, mantissa * 256.0 / np.where(valid, peak, 1.0), 0.0)
    out = np.zeros(rgb.shape[:-1] + (4,), dtype=np.uint8)
    out[..., :3] = np.clip(np.floor(rgb * scale[..., None]), 0, 255).astype(np.uint8)
    out[..., 3] = np.where(valid, np.clip(exponent + 128, 0, 255), 0).astype(np.uint8)
    return out


def _parse_header(stream) -> Tuple[int, int]:
    first = stream.readline()
    if not first.startswith(b"#?"):
        raise DataError("不是 Radiance HDR 文件 (缺少 #? 标识)")
    fmt = None
    while True:
        line = stream.readline()
        if line == b"":
            raise DataError("HDR 头部意外结束")
        line = line.rstrip(b"\n")
        if line == b"":
            break
        if line.startswith(b"FORMAT="):
            fmt = line[len(b"FORMAT="):]
    if fmt is not None and fmt != b"32-bit_rle_rgbe":
        raise DataError(f"不支持的 HDR 格式: {fmt.decode(errors='replace')}")
    match = _RESOLUTION_RE.match(stream.readline())
    if match is None:
        raise DataError("HDR 分辨率行必须为 '-Y <h> +X <w>'")
    height, width = int(match.group(1)), int(match.group(2))
    return width, height


def _read_exact(stream, count: int) -> bytes:
    data = stream.read(count)
    if len(data) != count:
        raise DataError("HDR 数据意外结束")
    return data


def _parse_rle(width: int, stream) -> np.ndarray:
    buffer = np.zeros((width, 4), np.uint8)
    for c in range(4):
        i = 0
        while i < width:
            b = _read_exact(stream, 1)[0]
            if b > 128:
                count = b - 128
                if i + count > width:
                    raise DataError("HDR RLE 游程越界")
                buffer[i:i + count, c] = _read_exact(stream, 1)[0]
            else:
                count = b
                if count == 0 or i + count > width:
                    raise DataError("HDR RLE 数据损坏")
                buffer[i:i + count, c] = np.frombuffer(_read_exact(stream, count), np.uint8)
            i += count
    return buffer


def _parse_scanline(width: int, stream) -> np.ndarray:
    head = _read_exact(stream, 4)
    if 8 <= width <= 0x7FFF and head[0] == 2 and head[1] == 2 and head[2] < 128:
        if (head[2] << 8) + head[3] != width:
            raise DataError("HDR 扫描线宽度不匹配")
        return _parse_rle(width, stream)
    # 平铺 RGBE
    rest = _read_exact(stream, 4 * (width - 1))
    return np.frombuffer(head + rest, np.uint8).reshape(width, 4)


def _rle_encode(channel: bytes) -> bytes:
    out = bytearray()
    n = len(channel)
    i = 0
    while i < n:
        run = 1
        while i + run < n and run < 127 and channel[i + run] == channel[i]:
            run += 1
        if run >= 4:
            out += bytes((128 + run, channel[i]))
            i += run
            continue
        j = i
        while j < n and j - i < 128:
            if j + 3 < n and channel[j] == channel[j + 1] == channel[j + 2] == channel[j + 3]:
                break
            j += 1
        out.append(j - i)
        out += channel[i:j]
        i = j
    return bytes(out)


def read_hdr(path) -> np.ndarray:
    """
    读取 Radiance .hdr

    Returns:
        (H, W, 3) float64 线性辐亮度
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"无法读取 HDR 文件 {path}: {e}") from e
    stream = io.BytesIO(raw)
    width, height = _parse_header(stream)
    rgb = np.zeros((height, width, 3))
    for y in range(height):
        rgb[y] = rgbe_to_rgb(_parse_scanline(width, stream))
    return rgb


def write_hdr(path, rgb: np.ndarray) -> Path:
    """写入 Radiance .hdr (新式 RLE)"""
    path = Path(path)
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[-1] != 3:
        raise DataError(f"HDR 图像形状必须为 (H, W, 3): {rgb.shape}")
    height, width = rgb.shape[:2]
    rgbe = rgb_to_rgbe(rgb)

    body = bytearray()
    use_rle = 8 <= width <= 0x7FFF
    for y in range(height):
        if use_rle:
            body += bytes((2, 2, width >> 8, width & 0xFF))
            for c in range(4):
                body += _rle_encode(rgbe[y, :, c].tobytes())
        else:
            body += rgbe[y].tobytes()

    header = (
        b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n" + f"-Y {height} +X {width}\n".encode()
    )
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(header + bytes(body))
    except OSError as e:
        raise DataError(f"无法写入 HDR 文件 {path}: {e}") from e
    return path


# ============================================================================
# PNG
# ============================================================================


def read_png(path) -> np.ndarray:
    """读取 8-bit PNG，返回 [0, 1] 浮点 (H, W, C)"""
    try:
        img = iio.imread(Path(path))
    except (OSError, ValueError) as e:
        raise DataError(f"无法读取 PNG 文件 {path}: {e}") from e
    img = np.asarray(img, dtype=np.float64) / 255.0
    return img[..., None] if img.ndim == 2 else img


def write_png(path, img: np.ndarray) -> Path:
    """写入 8-bit PNG，输入为 [0, 1] 浮点"""
    path = Path(path)
    data = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if data.ndim == 3 and data.shape[-1] == 1:
        data = data[..., 0]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        iio.imwrite(path, data)
    except OSError as e:
        raise DataError(f"无法写入 PNG 文件 {path}: {e}") from e
    return path


# ============================================================================
# RFM1
# ============================================================================


def write_rfm(path, data: np.ndarray) -> Path:
    """写入 RFM1 转储，(H, W, C) 视为单层"""
    path = Path(path)
    data = np.asarray(data)
    if data.ndim == 3:
        data = data[None]
    if data.ndim != 4:
        raise DataError(f"RFM1 数据必须为 3 维或 4 维: {data.shape}")
    header = RFM_MAGIC + np.array(data.shape, dtype="<u4").tobytes()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(header + np.ascontiguousarray(data, dtype="<f4").tobytes())
    except OSError as e:
        raise DataError(f"无法写入 RFM1 文件 {path}: {e}") from e
    return path


def read_rfm(path) -> np.ndarray:
    """读取 RFM1 转储，返回 (L, H, W, C) float32"""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"无法读取 RFM1 文件 {path}: {e}") from e
    if raw[:4] != RFM_MAGIC or len(raw) < 20:
        raise DataError(f"不是 RFM1 文件: {path}")
    dims = tuple(int(d) for d in np.frombuffer(raw[4:20], dtype="<u4"))
    expected = int(np.prod(dims)) * 4
    if len(raw) - 20 != expected:
        raise DataError(f"RFM1 数据长度不匹配: {path}")
    return np.frombuffer(raw[20:], dtype="<f4").reshape(dims).copy()


def read_image(path) -> np.ndarray:
    """按扩展名读取 .hdr / .png / .rfm"""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".hdr":
        return read_hdr(path)
    if suffix == ".png":
        return read_png(path)
    if suffix == ".rfm":
        data = read_rfm(path).astype(np.float64)
        return data[0] if data.shape[0] == 1 else data
    raise DataError(f"不支持的图像格式: {path}")
