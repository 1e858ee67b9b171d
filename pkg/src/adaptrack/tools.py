"""MCP工具结果格式化"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

from adaptrack.config import ScenarioConfig
from adaptrack.metrics import EvalResult

PERCENT_METRICS = ("HOTA", "DetA", "AssA", "IDF1", "MOTA")
COUNT_METRICS = ("TP", "FP", "FN", "IDSW", "IDTP", "IDFP", "IDFN")


def format_eval_result(result: EvalResult, sequences: int = 1) -> str:
    """格式化评测结果为Markdown表格"""
    values = result.as_dict()
    lines = [f"## 评测结果 (共{sequences}个序列)\n"]
    lines.append("| 指标 | 数值 |")
    lines.append("|------|------|")
    for name in PERCENT_METRICS:
        lines.append(f"| {name} | {values[name]:.2f} |")
    lines.append("")
    lines.append("| 计数 | 数值 |")
    lines.append("|------|------|")
    for name in COUNT_METRICS:
        lines.append(f"| {name} | {values[name]} |")
    return "\n".join(lines)


def format_simulation(paths: Sequence[Path], scenario: ScenarioConfig) -> str:
    if not paths:
        return "## 模拟结果\n\n没有生成任何场景。"

    lines = [f"## 模拟结果 (共{len(paths)}个场景)\n"]
    lines.append(
        f"预设 **{scenario.preset}**，{scenario.n_objects} 个目标，{scenario.n_frames} 帧，"
        f"种子 {scenario.seed}"
    )
    lines.append("")
    for path in paths:
        lines.append(f"- `{path}`")
    return "\n".join(lines)


def format_ablation_list(ablations: Mapping[str, Mapping[str, object]]) -> str:
    """格式化消融预设为Markdown表格"""
    lines = ["## 消融预设\n"]
    lines.append("| 名称 | 覆盖项 |")
    lines.append("|------|--------|")

    for name, values in ablations.items():
        overrides = ", ".join(f"{k}={v}" for k, v in values.items()) or "-"
        lines.append(f"| {name} | {overrides} |")

    return "\n".join(lines)
