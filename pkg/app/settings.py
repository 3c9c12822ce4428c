"""
配置加载

config/default.yaml 结构:
    render:  RenderConfig 字段
    optim:   OptimConfig 字段

相对路径按项目根目录解析，解析结果按路径缓存在类变量中。
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import yaml
from pydantic import ValidationError

from app.models import OptimConfig, RenderConfig
from scripts.errors import DataError

logger = logging.getLogger(__name__)

PROJECT_ROOT = Path(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
DEFAULT_CONFIG = "config/default.yaml"


class Settings:
    """YAML 配置加载器"""

    # 类变量，缓存已解析的配置文件 {绝对路径: 原始字典}
    _cache: Dict[Path, Dict[str, Any]] = {}

    def __init__(self, config_path=DEFAULT_CONFIG):
        """
        Args:
            config_path: 配置文件路径；相对路径基于项目根目录
        """
        path = Path(config_path)
        if not path.is_absolute():
            # 优先当前目录，其次项目根目录
            path = path if path.exists() else PROJECT_ROOT / path
        self.config_path = path.resolve()

        if self.config_path not in Settings._cache:
            logger.debug(f"📂 加载配置: {self.config_path}")
            Settings._cache[self.config_path] = self._load()
        self.raw = Settings._cache[self.config_path]

    def _load(self) -> Dict[str, Any]:
        try:
            with open(self.config_path, "r", encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except OSError as e:
            raise DataError(f"无法读取配置文件 {self.config_path}: {e}") from e
        except yaml.YAMLError as e:
            raise DataError(f"配置文件 YAML 语法错误 {self.config_path}: {e}") from e
        if not isinstance(data, dict):
            raise DataError(f"配置文件顶层必须是映射: {self.config_path}")
        unknown = set(data) - {"render", "optim"}
        if unknown:
            raise DataError(f"配置文件包含未知段: {sorted(unknown)}")
        return data

    @classmethod
    def clear_cache(cls):
        cls._cache.clear()

    def render_config(self, overrides: Optional[Dict[str, Any]] = None) -> RenderConfig:
        """render 段 + 命令行覆盖项 (值为 None 的覆盖项忽略)"""
        return self._build(RenderConfig, "render", overrides)

    def optim_config(self, overrides: Optional[Dict[str, Any]] = None) -> OptimConfig:
        return self._build(OptimConfig, "optim", overrides)

    def _build(self, model, section: str, overrides: Optional[Dict[str, Any]]):
        values = dict(self.raw.get(section) or {})
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        try:
            return model.model_validate(values)
        except ValidationError as e:
            raise DataError(f"配置段 '{section}' 无效 ({self.config_path}): {e}") from e


def load_configs(
    config_path=DEFAULT_CONFIG,
    render_overrides: Optional[Dict[str, Any]] = None,
    optim_overrides: Optional[Dict[str, Any]] = None,
) -> Tuple[RenderConfig, OptimConfig]:
    settings = Settings(config_path)
    return settings.render_config(render_overrides), settings.optim_config(optim_overrides)
