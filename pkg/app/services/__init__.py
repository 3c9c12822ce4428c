"""渲染 / 优化任务的流水线与运行状态记录"""
