"""
运行状态管理 (Run Manager)

每个输出目录一个 run.json，记录子命令的执行状态:
1. 线程安全的状态更新 (threading.Lock)
2. 每次变更原子写入 (临时文件 + replace)
3. 步骤级别的结果 / 错误记录
"""

import json
import logging
import threading
import uuid
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional

from app.models import RunRecord, RunStatus, StepProgress
from scripts.config import RUN_STATUS_FILE

logger = logging.getLogger(__name__)


class RunManager:
    """
    run.json 的读写者

    Args:
        out_dir: 输出目录 (run.json 写在其中)
        command: 子命令名
        total_steps: 总步骤数
        run_id: 运行ID，默认随机生成
    """

    def __init__(self, out_dir, command: str, total_steps: int = 1, run_id: Optional[str] = None):
        self._lock = threading.Lock()
        self.path = Path(out_dir) / RUN_STATUS_FILE
        now = datetime.now()
        self.record = RunRecord(
            run_id=run_id or uuid.uuid4().hex[:12],
            command=command,
            status=RunStatus.PENDING,
            progress="运行已创建，等待执行",
            total_steps=total_steps,
            created_at=now,
            updated_at=now,
        )
        with self._lock:
            self._save()
        logger.info(f"✅ 运行已创建: {self.record.run_id} ({command})")

    @property
    def run_id(self) -> str:
        return self.record.run_id

    def _save(self):
        """持久化到 run.json；调用前应持有 _lock"""
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            temp_file = self.path.with_suffix(".tmp")
            with open(temp_file, "w", encoding="utf-8") as f:
                json.dump(self.record.model_dump(mode="json"), f, ensure_ascii=False, indent=2)
            temp_file.replace(self.path)
        except OSError as e:
            logger.error(f"❌ 保存运行状态失败: {e}")

    def update(
        self,
        status: Optional[RunStatus] = None,
        progress: Optional[str] = None,
        current_step: Optional[int] = None,
        result: Optional[Dict[str, Any]] = None,
        error: Optional[str] = None,
    ):
        """更新运行状态 (线程安全)"""
        with self._lock:
            record = self.record
            if status is not None:
                record.status = status
            if progress is not None:
                record.progress = progress
            if current_step is not None:
                record.current_step = current_step
            if result is not None:
                record.result = result
            if error is not None:
                record.error = error
            record.updated_at = datetime.now()
            if status in (RunStatus.COMPLETED, RunStatus.FAILED, RunStatus.DIVERGED):
                record.completed_at = record.updated_at
            self._save()
        logger.debug(f"📝 运行已更新: {self.run_id} - {status} - {progress}")

    def add_step_result(
        self,
        step_number: int,
        step_name: str,
        status: RunStatus,
        result: Optional[Dict[str, Any]] = None,
        error: Optional[str] = None,
    ):
        """记录步骤结果，同编号步骤覆盖旧记录"""
        step = StepProgress(
            step_number=step_number, step_name=step_name, status=status, result=result, error=error
        )
        with self._lock:
            steps = self.record.steps
            index = next((i for i, s in enumerate(steps) if s.step_number == step_number), None)
            if index is not None:
                steps[index] = step
            else:
                steps.append(step)
            self._save()

    @staticmethod
    def load(out_dir) -> RunRecord:
        path = Path(out_dir) / RUN_STATUS_FILE
        with open(path, "r", encoding="utf-8") as f:
            return RunRecord.model_validate(json.load(f))
