"""
计数器型随机数生成器

基于 numpy 的 Philox (counter-based) bit generator。通过 SeedSequence 的
spawn_key 为每个 tile / 每层反弹派生独立的子流，保证:
- 相同 seed ⇒ 相同样本流
- 渲染结果与 worker 数量、tile 执行顺序无关
"""

from typing import Any, Dict, Tuple

import numpy as np

_SEED_MASK = (1 << 64) - 1


class Rng:
    """
    可派生子流的随机数生成器

    Args:
        seed: 64 位整数种子
        key: 派生路径 (例如 (tile, level))
    """

    def __init__(self, seed: int = 0, key: Tuple[int, ...] = ()):
        self.seed = int(seed) & _SEED_MASK
        self.key = tuple(int(k) for k in key)
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self._generator = np.random.Generator(np.random.Philox(sequence))

    def spawn(self, *keys: int) -> "Rng":
        """派生子流，子流之间互不相关"""
        return Rng(self.seed, self.key + tuple(keys))

    def uniform(self, shape) -> np.ndarray:
        """[0, 1) 上的 float64 均匀样本"""
        return self._generator.random(shape)

    def integers(self, high: int, size) -> np.ndarray:
        return self._generator.integers(0, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    @property
    def state(self) -> Dict[str, Any]:
        """Philox 计数器状态"""
        return self._generator.bit_generator.state

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, key={self.key})"


def derive_seed(*parts: int) -> int:
    """把多个整数合成一个 64 位种子 (用于每轮迭代的渲染种子)"""
    state = np.random.SeedSequence([int(p) & _SEED_MASK for p in parts]).generate_state(
        2, dtype=np.uint32
    )
    return (int(state[0]) << 32) | int(state[1])
