"""
测试计数器型随机数生成器
"""

import numpy as np

from scripts.rng import Rng, derive_seed

# 自由度 99、p = 0.001 的卡方临界值
CHI2_CRITICAL_99 = 148.2


def test_same_seed_same_stream():
    """相同种子逐位相同"""
    a = Rng(42).uniform(1000)
    b = Rng(42).uniform(1000)
    assert np.array_equal(a, b)


def test_different_seed_different_stream():
    assert not np.array_equal(Rng(1).uniform(100), Rng(2).uniform(100))


def test_spawn_is_deterministic_and_decorrelated():
    root = Rng(7)
    a = root.spawn(3, 1).uniform(5000)
    b = Rng(7).spawn(3, 1).uniform(5000)
    c = root.spawn(3, 2).uniform(5000)
    assert np.array_equal(a, b)
    assert abs(np.corrcoef(a, c)[0, 1]) < 0.05


def test_spawn_does_not_consume_parent():
    """派生子流不改变父流"""
    parent = Rng(5)
    parent.spawn(0).uniform(10)
    assert np.array_equal(parent.uniform(10), Rng(5).uniform(10))


def test_uniform_range_and_chi_square():
    draws = Rng(2024).uniform(1_000_000)
    assert draws.min() >= 0.0 and draws.max() < 1.0
    counts, _ = np.histogram(draws, bins=100, range=(0.0, 1.0))
    expected = len(draws) / 100
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < CHI2_CRITICAL_99


def test_derive_seed():
    assert derive_seed(1, 2) == derive_seed(1, 2)
    assert derive_seed(1, 2) != derive_seed(2, 1)
    assert 0 <= derive_seed(0) < 2**64
