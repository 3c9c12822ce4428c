"""
Configuration constants for the renderer and optimizer

数值常量集中在这里，渲染/优化模块统一从此处导入。
"""

# === 材质参数 ===
# 粗糙度下限，避免 GGX 退化为 delta 波瓣
R_MIN = 0.04
# 非金属的基础反射率 F0
DIELECTRIC_F0 = 0.04

# === 几何容差 ===
# 光线最小参数 t
T_MIN = 1e-4
# 法线偏移 = EPS_GEOM_SCALE × 场景对角线长度
EPS_GEOM_SCALE = 1e-4
# 三角形最小面积
MIN_TRIANGLE_AREA = 1e-12

# === BVH 构建 ===
BVH_LEAF_SIZE = 4
BVH_MAX_DEPTH = 64
# 超过该深度后改用中位数划分，保证深度上限
BVH_MEDIAN_DEPTH = 48
BVH_BINS = 12
TRAVERSAL_STACK_SIZE = 128

# === 渲染默认值 ===
TILE_SIZE = 16
# 萤火虫截断 = FIREFLY_FACTOR × 环境图平均亮度
FIREFLY_FACTOR = 50.0
ENV_DEFAULT_WIDTH = 256
ENV_DEFAULT_HEIGHT = 128

# Rec.709 亮度权重
LUMINANCE_WEIGHTS = (0.2126, 0.7152, 0.0722)

# BRDF 混合采样中镜面波瓣的概率范围
SPEC_PROB_MIN = 0.25
SPEC_PROB_MAX = 0.9

# === 优化默认值 ===
WARMUP_ITERATIONS = 50
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 100

# === 文件格式 ===
RFM_MAGIC = b"RFM1"
RUN_STATUS_FILE = "run.json"
METRICS_FILE = "metrics.csv"
VALIDATION_FILE = "validation.csv"

# 并发上限环境变量
THREADS_ENV_VAR = "REFMC_THREADS"
