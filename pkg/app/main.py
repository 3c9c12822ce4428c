"""
命令行入口

    python -m app.main render --scene config/scenes/sphere.yaml --out out/sphere.hdr --spp 64
    python -m app.main optimize --scene <file> --data <dir> --config config/default.yaml --out <dir>
    python -m app.main eval <render_dir> <gt_dir> --out metrics.csv
    python -m app.main make-dataset --scene <file> --out <dir> --views 12 --spp 256
    python -m app.main selftest

退出码: 0 成功，1 用法错误，2 数据错误，3 优化发散。
环境变量 REFMC_THREADS 限制渲染 worker 数。
"""

import argparse
import logging
import sys
from typing import List, Optional

from scripts.errors import DataError, DivergenceError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


# ============================================================================
# 日志配置
# ============================================================================


def setup_logging(log_file: Optional[str] = "app.log", verbose: bool = False):
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file:
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=handlers,
        force=True,
    )


# ============================================================================
# 参数解析
# ============================================================================


class UsageError(Exception):
    """命令行用法错误"""


class CliParser(argparse.ArgumentParser):
    """用法错误抛出 UsageError，由 main 统一映射为退出码 1"""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> CliParser:
    parser = CliParser(prog="mcrender", description="多次蒙特卡洛采样渲染器与逆渲染优化器")
    parser.add_argument("--log-file", default="app.log", help="日志文件 (空字符串表示不写文件)")
    parser.add_argument("-v", "--verbose", action="store_true", help="输出 DEBUG 日志")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    p = sub.add_parser("render", help="渲染场景中的一个相机")
    p.add_argument("--scene", required=True, help="场景 YAML 文件")
    p.add_argument("--out", required=True, help="输出 .hdr 路径 (另写 <stem>_diffuse.hdr)")
    p.add_argument("--spp", type=int, help="每像素样本数")
    p.add_argument("--depth", type=int, choices=(1, 2, 3), help="采样次数")
    p.add_argument("--no-adaptive", action="store_true", help="二次着色点使用完整 MIS")
    p.add_argument("--no-cache", action="store_true", help="自适应模式下不读取漫反射缓存")
    p.add_argument("--seed", type=int, default=0, help="随机种子")
    p.add_argument("--camera", type=int, default=0, help="相机编号")
    p.add_argument("--workers", type=int, help="worker 数 (默认读取 REFMC_THREADS)")
    p.add_argument("--config", default=None, help="配置 YAML (默认 config/default.yaml)")

    p = sub.add_parser("optimize", help="从多视角图像恢复材质 / 环境光")
    p.add_argument("--scene", required=True, help="场景 YAML 文件")
    p.add_argument("--data", required=True, help="NeRF 风格数据集目录")
    p.add_argument("--config", default=None, help="配置 YAML (render / optim 段)")
    p.add_argument("--out", required=True, help="输出目录")
    p.add_argument("--iterations", type=int, help="覆盖 optim.iterations")
    p.add_argument("--lr", type=float, help="覆盖 optim.lr")
    p.add_argument("--seed", type=int, help="覆盖 optim.seed")
    p.add_argument("--spp", type=int, help="覆盖 render.spp")
    p.add_argument("--depth", type=int, choices=(1, 2, 3), help="覆盖 render.depth")
    p.add_argument("--init", default=None, help="RFM1 检查点目录，作为初始参数")
    p.add_argument("--bake-cache", action="store_true", help="优化前烘焙漫反射缓存")

    p = sub.add_parser("eval", help="逐图像 PSNR")
    p.add_argument("render_dir", help="渲染结果目录")
    p.add_argument("gt_dir", help="真值目录")
    p.add_argument("--out", default=None, help="输出 CSV")

    p = sub.add_parser("make-dataset", help="用本渲染器生成真值数据集")
    p.add_argument("--scene", required=True, help="场景 YAML 文件")
    p.add_argument("--out", required=True, help="输出目录")
    p.add_argument("--views", type=int, default=12, help="视角数 (train:test = 2:1)")
    p.add_argument("--spp", type=int, default=256, help="每像素样本数")
    p.add_argument("--depth", type=int, default=3, choices=(1, 2, 3), help="采样次数")
    p.add_argument("--seed", type=int, default=0, help="随机种子")
    p.add_argument("--width", type=int, help="图像宽度 (默认取场景第一个相机)")
    p.add_argument("--height", type=int, help="图像高度")

    p = sub.add_parser("selftest", help="运行测试套件")
    p.add_argument("--slow", action="store_true", help="包含耗时的验收测试")
    p.add_argument("pytest_args", nargs="*", help="透传给 pytest 的参数")
    return parser


# ============================================================================
# 子命令
# ============================================================================


def cmd_render(args) -> int:
    from app.services.pipeline import run_render
    from app.settings import Settings

    cfg = Settings(args.config or "config/default.yaml").render_config(
        {
            "spp": args.spp,
            "depth": args.depth,
            "adaptive": False if args.no_adaptive else None,
            "use_diffuse_cache": False if args.no_cache else None,
            "workers": args.workers,
        }
    )
    image = run_render(args.scene, args.out, cfg, seed=args.seed, camera_index=args.camera)
    print(image.stats.line())
    return EXIT_OK


def cmd_optimize(args) -> int:
    from app.services.pipeline import run_optimize_pipeline
    from app.settings import load_configs

    rcfg, ocfg = load_configs(
        args.config or "config/default.yaml",
        render_overrides={"spp": args.spp, "depth": args.depth},
        optim_overrides={"iterations": args.iterations, "lr": args.lr, "seed": args.seed},
    )
    result = run_optimize_pipeline(
        args.scene, args.data, args.out, ocfg, rcfg, init_dir=args.init, bake_cache=args.bake_cache
    )
    print(f"final_params={result['final_params']} mean_psnr={result['mean_psnr']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from app.services.pipeline import run_eval

    rows = run_eval(args.render_dir, args.gt_dir, args.out)
    for row in rows:
        value = "-" if row["psnr"] is None else f"{row['psnr']:.3f}"
        print(f"{row['name']}\t{value}\t{row['error']}")
    return EXIT_OK


def cmd_make_dataset(args) -> int:
    from app.services.pipeline import run_make_dataset_pipeline

    result = run_make_dataset_pipeline(
        args.scene, args.out, args.views, args.spp, seed=args.seed, depth=args.depth,
        width=args.width, height=args.height,
    )
    print(f"train={result['train']} test={result['test']} out={result['out_dir']}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    import pytest

    from app.settings import PROJECT_ROOT

    pytest_args = [str(PROJECT_ROOT / "scripts"), "-q"]
    if args.slow:
        pytest_args += ["-m", "slow or not slow"]
    return int(pytest.main(pytest_args + list(args.pytest_args)))


COMMANDS = {
    "render": cmd_render,
    "optimize": cmd_optimize,
    "eval": cmd_eval,
    "make-dataset": cmd_make_dataset,
    "selftest": cmd_selftest,
}


# ============================================================================
# 启动入口
# ============================================================================


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

    setup_logging(args.log_file or None, args.verbose)
    try:
        return COMMANDS[args.command](args)
    except DivergenceError as e:
        logger.error(f"❌ 优化发散: {e} {e.diagnostics}")
        return EXIT_DIVERGED
    except (DataError, FileNotFoundError) as e:
        logger.error(f"❌ {e}")
        return EXIT_DATA
    except Exception as e:
        logger.error(f"❌ 未处理的异常: {e}", exc_info=True)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
