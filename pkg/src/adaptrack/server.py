"""adaptrack MCP Server 主入口"""

from __future__ import annotations

import asyncio
import logging
import os
import sys
from pathlib import Path
from typing import Optional

from mcp.server import Server
from mcp.server.stdio import stdio_server
from mcp.types import Tool, TextContent

from adaptrack.config import ABLATIONS, DEFAULT_CONFIG_PATH, Config, ConfigError, apply_overrides, load_config
from adaptrack.formats import FormatError
from adaptrack.metrics import MetricError
from adaptrack.pipeline import evaluate_files, simulate_to_dir
from adaptrack.simkit import SimulationError
from adaptrack.tools import format_ablation_list, format_eval_result, format_simulation

logger = logging.getLogger(__name__)

TOOLS = [
    Tool(
        name="mot_eval",
        description="用 HOTA / IDF1 / MOTA 评测 MOTChallenge 格式的跟踪结果",
        inputSchema={
            "type": "object",
            "properties": {
                "gt": {
                    "type": "string",
                    "description": "真值文件路径",
                },
                "pred": {
                    "type": "string",
                    "description": "预测文件路径",
                },
            },
            "required": ["gt", "pred"],
        },
    ),
    Tool(
        name="mot_simulate",
        description="按预设生成合成跟踪场景（真值、检测、外观码、深度网格）",
        inputSchema={
            "type": "object",
            "properties": {
                "out": {
                    "type": "string",
                    "description": "输出目录",
                },
                "preset": {
                    "type": "string",
                    "enum": ["linear", "crossing", "circular", "random-walk"],
                    "description": "运动预设（可选，默认使用配置）",
                },
                "seed": {
                    "type": "integer",
                    "description": "随机种子（可选）",
                },
                "n_objects": {
                    "type": "integer",
                    "description": "目标数（可选）",
                },
                "n_frames": {
                    "type": "integer",
                    "description": "帧数（可选）",
                },
                "sequences": {
                    "type": "integer",
                    "description": "序列数（可选，默认1）",
                    "default": 1,
                },
            },
            "required": ["out"],
        },
    ),
    Tool(
        name="mot_list_ablations",
        description="列出可用的消融预设",
        inputSchema={
            "type": "object",
            "properties": {},
        },
    ),
]


def _startup_config() -> Config:
    """存在默认配置文件时读取，否则使用内置默认值"""
    if DEFAULT_CONFIG_PATH.exists():
        return load_config(DEFAULT_CONFIG_PATH)
    return Config()


async def handle_tool(name: str, arguments: dict, config: Config) -> str:
    """
    执行一次工具调用并返回Markdown文本

    Raises:
        ConfigError, FormatError, MetricError, SimulationError: 由 call_tool 转成文本
    """
    if name == "mot_list_ablations":
        return format_ablation_list(ABLATIONS)

    if name == "mot_eval":
        result = await asyncio.to_thread(evaluate_files, [(Path(arguments["gt"]), Path(arguments["pred"]))])
        return format_eval_result(result)

    if name == "mot_simulate":
        overrides = [f"scenario.{key}={arguments[key]}"
                     for key in ("preset", "seed", "n_objects", "n_frames") if key in arguments]
        scenario = apply_overrides(config, overrides).scenario
        sequences = int(arguments.get("sequences", 1))
        if sequences < 1:
            raise ConfigError(f"sequences 必须 ≥ 1: {sequences}")
        paths = await asyncio.to_thread(simulate_to_dir, scenario, Path(arguments["out"]), sequences)
        return format_simulation(paths, scenario)

    return f"未知工具: {name}"


def create_server(config: Optional[Config] = None) -> Server:
    """创建MCP Server实例"""
    server = Server("adaptrack")

    # 加载配置
    if config is None:
        try:
            config = _startup_config()
        except ConfigError as e:
            logger.error(f"配置加载失败: {e}")
            # 仍然创建server，但工具调用时会报错
            config = None

    @server.list_tools()
    async def list_tools() -> list[Tool]:
        """列出可用工具"""
        return TOOLS

    @server.call_tool()
    async def call_tool(name: str, arguments: dict) -> list[TextContent]:
        """处理工具调用"""
        try:
            if config is None:
                raise ConfigError(f"配置未加载，请检查 {DEFAULT_CONFIG_PATH}")
            result = await handle_tool(name, arguments or {}, config)
            return [TextContent(type="text", text=result)]

        except ConfigError as e:
            return [TextContent(type="text", text=f"配置错误: {e}")]
        except FormatError as e:
            return [TextContent(type="text", text=f"文件错误: {e}")]
        except (MetricError, SimulationError) as e:
            return [TextContent(type="text", text=f"计算错误: {e}")]
        except Exception as e:
            logger.exception(f"工具调用异常: {e}")
            return [TextContent(type="text", text=f"内部错误: {e}")]

    return server


def main():
    """主入口"""
    logging.basicConfig(
        level=logging.DEBUG if os.environ.get("ADAPTRACK_DEBUG") == "1" else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
    )
    server = create_server()

    async def run():
        async with stdio_server() as (read_stream, write_stream):
            await server.run(read_stream, write_stream, server.create_initialization_options())

    asyncio.run(run())


if __name__ == "__main__":
    main()
