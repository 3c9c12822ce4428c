"""
异常定义

库代码只负责抛出异常，CLI / pipeline 层负责捕获、记录日志并转换为退出码:
- DataError 及其子类 → 2
- DivergenceError → 3
"""

from typing import Any, Dict, Optional


class RenderError(Exception):
    """渲染器异常基类"""


class GeometryError(RenderError, ValueError):
    """网格无效 (空网格、越界索引、退化三角形、OBJ 解析失败)"""


class TapeMismatchError(RenderError, ValueError):
    """路径记录 (tape) 与参数或梯度形状不匹配"""


class DataError(RenderError):
    """文件不可读写、数据集审计失败、图像尺寸不一致"""


class DivergenceError(RenderError):
    """优化发散，附带诊断信息"""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class SceneError(DataError):
    """
    场景文件错误基类

    Args:
        message: 错误描述
        key: 出错的键名 (可选)
        line: 行号，从 1 开始 (可选)
        column: 列号，从 1 开始 (可选)
    """

    def __init__(
        self,
        message: str,
        key: Optional[str] = None,
        line: Optional[int] = None,
        column: Optional[int] = None,
    ):
        self.key = key
        self.line = line
        self.column = column
        location = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{location}")


class SceneSyntaxError(SceneError):
    """YAML 语法错误"""


class MissingFieldError(SceneError):
    """缺少必填字段"""


class UnknownKeyError(SceneError):
    """未知键 (拼写错误)"""


class BadReferenceError(SceneError):
    """引用的文件不存在"""


class SceneValueError(SceneError):
    """字段取值非法"""
