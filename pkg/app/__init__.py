"""命令行入口、配置模型与服务层"""
