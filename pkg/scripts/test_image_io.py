"""
测试 .hdr / PNG / RFM1 读写
"""

import numpy as np
import pytest

from scripts.errors import DataError
from scripts.image_io import (
    read_hdr,
    read_image,
    read_png,
    read_rfm,
    rgb_to_rgbe,
    rgbe_to_rgb,
    write_hdr,
    write_png,
    write_rfm,
)
from scripts.rng import Rng


def test_rgbe_precision():
    rgb = Rng(0).uniform((64, 3)) * 100.0
    back = rgbe_to_rgb(rgb_to_rgbe(rgb))
    peak = rgb.max(axis=1, keepdims=True)
    assert np.all(np.abs(back - rgb) <= peak / 128.0)


def test_rgbe_zero():
    assert np.array_equal(rgbe_to_rgb(rgb_to_rgbe(np.zeros((1, 3)))), np.zeros((1, 3)))


@pytest.mark.parametrize("width", [4, 16, 40])
def test_hdr_write_read(tmp_path, width):
    """宽度 < 8 时使用平铺扫描线，否则使用 RLE"""
    img = Rng(width).uniform((5, width, 3)) * 4.0
    img[:, : width // 2] = 1.5
    path = write_hdr(tmp_path / "img.hdr", img)
    back = read_hdr(path)
    assert back.shape == img.shape
    peak = img.max(axis=-1, keepdims=True)
    assert np.all(np.abs(back - img) <= peak / 128.0)
    # 写出的文件再读再写逐字节一致
    write_hdr(tmp_path / "again.hdr", back)
    assert (tmp_path / "again.hdr").read_bytes() == path.read_bytes()


def test_hdr_rejects_garbage(tmp_path):
    path = tmp_path / "bad.hdr"
    path.write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(DataError):
        read_hdr(path)
    with pytest.raises(DataError):
        read_hdr(tmp_path / "missing.hdr")


def test_png_write_read(tmp_path):
    img = np.linspace(0.0, 1.0, 4 * 4 * 3).reshape(4, 4, 3)
    path = write_png(tmp_path / "img.png", img)
    back = read_png(path)
    assert back.shape == (4, 4, 3)
    assert np.allclose(back, img, atol=0.5 / 255.0 + 1e-9)


def test_rfm_write_read(tmp_path):
    data = Rng(1).uniform((2, 3, 4, 3)).astype(np.float32)
    path = write_rfm(tmp_path / "x.rfm", data)
    assert path.read_bytes()[:4] == b"RFM1"
    assert np.array_equal(read_rfm(path), data)
    assert read_image(path).shape == (2, 3, 4, 3)
    write_rfm(tmp_path / "single.rfm", data[0])
    assert read_image(tmp_path / "single.rfm").shape == (3, 4, 3)


def test_rfm_truncated(tmp_path):
    path = write_rfm(tmp_path / "x.rfm", np.zeros((1, 2, 2, 3)))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(DataError):
        read_rfm(path)


def test_read_image_unknown_suffix(tmp_path):
    with pytest.raises(DataError):
        read_image(tmp_path / "x.exr")
