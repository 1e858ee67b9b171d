"""adaptrack 命令行入口：simulate / train / track / eval / analyze / gradcheck"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from adaptrack import __version__
from adaptrack.config import ABLATIONS, Config, ConfigError, apply_overrides, resolve_config
from adaptrack.diffcore import GradCheckError, ShapeError
from adaptrack.formats import FormatError, write_metrics_csv, write_mot
from adaptrack.geometry import GeometryError
from adaptrack.identity import IdentityError
from adaptrack.metrics import MetricError
from adaptrack.model import CheckpointError, load_checkpoint
from adaptrack.pipeline import (
    GRADCHECK_NAMES,
    analyze_scenario,
    evaluate_files,
    gradcheck_suite,
    load_scenarios,
    simulate_to_dir,
    track_scenario,
    train_from_dirs,
)
from adaptrack.simkit import SimulationError
from adaptrack.spatial import DepthError
from adaptrack.temporal import TemporalError
from adaptrack.tracker import TrackerError
from adaptrack.training import TrainingError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

DOMAIN_ERRORS = (
    ConfigError, FormatError, CheckpointError, SimulationError, TrainingError, TrackerError,
    MetricError, DepthError, TemporalError, IdentityError, GeometryError, ShapeError, GradCheckError,
    OSError,
)


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="配置文件（.ini 或 .json），缺省时使用内置默认值")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="覆盖配置项，可重复")
    parser.add_argument("--ablation", help=f"消融预设（可用前缀）: {', '.join(ABLATIONS)}")
    parser.add_argument("--seed", type=int, help="同时覆盖 run.seed 和 scenario.seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptrack", description="带空间/时间/身份适配器的多目标跟踪玩具实验")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("simulate", help="生成合成场景")
    _common(p)
    p.add_argument("--preset", choices=["linear", "crossing", "circular", "random-walk"])
    p.add_argument("--sequences", type=int, default=1, help="序列数，>1 时写入 seqNN 子目录")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="在场景上训练玩具模型")
    _common(p)
    p.add_argument("--data", type=Path, nargs="+", required=True, help="场景目录（或包含多个场景的目录）")
    p.add_argument("--out", type=Path, required=True, help="检查点路径 (.npz)")
    p.add_argument("--curves", type=Path, help="逐轮损失 CSV")

    p = sub.add_parser("track", help="在线跟踪一个场景，输出 MOTChallenge 结果")
    _common(p)
    p.add_argument("--checkpoint", type=Path, help="模型检查点；与 --oracle 二选一")
    p.add_argument("--oracle", action="store_true", help="使用真值框和真值身份嵌入")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="计算 HOTA / IDF1 / MOTA")
    p.add_argument("--gt", type=Path, action="append", required=True, help="真值文件，可重复")
    p.add_argument("--pred", type=Path, action="append", required=True, help="预测文件，与 --gt 一一对应")
    p.add_argument("--csv", type=Path, help="同时写出 metric,value CSV")

    p = sub.add_parser("analyze", help="嵌入相似度、时间注意力与深度注意力分析")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="输出目录")
    p.add_argument("--frame", type=int, help="相似度矩阵使用的帧（1 起），默认取检测最多的帧")
    p.add_argument("--identity", type=int, default=1, help="注意力图使用的真值身份（1 起）")

    p = sub.add_parser("gradcheck", help="中心差分梯度检查")
    _common(p)
    p.add_argument("--all", action="store_true", help="检查全部运算和损失")
    p.add_argument("names", nargs="*", help="只检查指定项")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def _config(args: argparse.Namespace) -> Config:
    config = resolve_config(args.config, args.overrides, args.ablation)
    if args.seed is not None:
        config = apply_overrides(config, [f"run.seed={args.seed}", f"scenario.seed={args.seed}"])
    return config


def cmd_simulate(args: argparse.Namespace) -> int:
    config = _config(args)
    scenario = config.scenario
    if args.preset:
        scenario = scenario.model_copy(update={"preset": args.preset})
    if args.sequences < 1:
        raise ConfigError(f"--sequences 必须 ≥ 1: {args.sequences}")
    for path in simulate_to_dir(scenario, args.out, args.sequences):
        print(f"场景已写入: {path}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    result = train_from_dirs(_config(args), args.data, args.out, args.curves)
    if result.history:
        print(f"最终损失: {result.history[-1]}")
    print(f"检查点已写入: {args.out}")
    return EXIT_OK


def cmd_track(args: argparse.Namespace) -> int:
    if args.oracle == (args.checkpoint is not None):
        raise ConfigError("必须且只能指定 --checkpoint 或 --oracle 之一")
    if args.oracle:
        config, model = _config(args), None
    else:
        model = load_checkpoint(args.checkpoint)
        config = model.config
    scenario = load_scenarios([args.data], with_depth=model is not None and config.ablation.sa)[0]
    records = track_scenario(scenario, model, config)
    write_mot(args.out, records)
    print(f"跟踪结果已写入: {args.out}（{len(records)} 条）")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    if len(args.gt) != len(args.pred):
        raise ConfigError(f"--gt 与 --pred 数量不一致: {len(args.gt)} vs {len(args.pred)}")
    result = evaluate_files(list(zip(args.gt, args.pred)))
    for name, value in result.as_dict().items():
        print(f"{name}={value:.1f}" if isinstance(value, float) else f"{name}={value}")
    if args.csv:
        write_metrics_csv(args.csv, result.as_dict())
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    scenario = load_scenarios([args.data], with_depth=model.config.ablation.sa)[0]
    frame_index = None if args.frame is None else args.frame - 1
    if frame_index is not None and not 0 <= frame_index < scenario.n_frames:
        raise ConfigError(f"--frame 超出范围 1..{scenario.n_frames}: {args.frame}")
    result = analyze_scenario(model, scenario, args.out, frame_index, identity=args.identity - 1)
    print(f"top-3 相似度 > 0.9 的比例: {result.high_fraction:.4f}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    if not args.all and not args.names:
        print("请指定 --all 或检查项名称", file=sys.stderr)
        return EXIT_USAGE
    unknown = sorted(set(args.names) - set(GRADCHECK_NAMES))
    if unknown:
        print(f"未知的梯度检查项: {', '.join(unknown)}，可用: {', '.join(GRADCHECK_NAMES)}", file=sys.stderr)
        return EXIT_USAGE
    config = _config(args)
    results = gradcheck_suite(None if args.all else args.names, args.instances, config.run.seed)
    failed = [name for name, err in results.items() if not err < args.tol]
    for name, err in results.items():
        print(f"{name:<14} {err:.3e} {'FAIL' if name in failed else 'ok'}")
    print(f"max_rel_error={max(results.values()):.3e}")
    if failed:
        print(f"梯度检查未通过: {', '.join(failed)}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "track": cmd_track,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "gradcheck": cmd_gradcheck,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    执行一次命令

    Returns:
        int: 0 成功，1 用法错误，2 数据错误
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse 用法错误退出码为 2，--help/--version 为 0
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE

    try:
        return COMMANDS[args.command](args)
    except DOMAIN_ERRORS as e:
        logger.debug("命令失败", exc_info=True)
        print(f"错误: {e}", file=sys.stderr)
        return EXIT_DATA


def main():
    """主入口"""
    logging.basicConfig(
        level=logging.DEBUG if os.environ.get("ADAPTRACK_DEBUG") == "1" else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
    )
    sys.exit(run())


if __name__ == "__main__":
    main()
