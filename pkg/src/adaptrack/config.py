"""配置加载和校验模块"""

from __future__ import annotations

import configparser
import json
import logging
import os
from pathlib import Path
from typing import Literal, Optional, Sequence

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

logger = logging.getLogger(__name__)

# 默认配置文件路径
DEFAULT_CONFIG_PATH = Path.home() / ".adaptrack" / "config.ini"

SEED_ENV = "FDTA_SEED"


class ConfigError(Exception):
    """配置相关错误"""
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelConfig(_Section):
    """模型尺寸"""
    dim: int = Field(64, ge=2)
    heads: int = Field(2, ge=1)
    ta_layers: int = Field(6, ge=1)
    depth_encoder_layers: int = Field(2, ge=0)
    fusion_layers: int = Field(1, ge=1)
    depth_bins: int = Field(12, ge=1)
    d_min: float = Field(1e-3, gt=0)
    d_max: float = 256.0
    n_pe: int = Field(64, ge=2)
    token_pool: int = Field(4, ge=1)
    encoder_hidden: int = Field(64, ge=1)
    phi_hidden: int = Field(64, ge=1)
    id_temperature: float = Field(0.1, gt=0)

    @model_validator(mode="after")
    def _check(self) -> ModelConfig:
        if self.dim % self.heads or self.dim % 2:
            raise ValueError(f"dim={self.dim} 必须是偶数且能被 heads={self.heads} 整除")
        if self.d_max <= self.d_min:
            raise ValueError(f"深度范围无效: [{self.d_min}, {self.d_max}]")
        return self


class LossWeights(_Section):
    """损失系数"""
    cls: float = Field(2.0, ge=0)
    bbox: float = Field(5.0, ge=0)
    giou: float = Field(2.0, ge=0)
    id: float = Field(1.0, ge=0)
    depth: float = Field(1.0, ge=0)
    ia: float = Field(1.0, ge=0)


class AblationConfig(_Section):
    """适配器开关与消融子开关，彼此独立"""
    sa: bool = True
    ta: bool = True
    ia: bool = True
    depth_pe: bool = True
    missing_mode: Literal["mask", "zero-vector", "off"] = "mask"
    depth_layer_order: Literal["self-vision-depth", "depth-self-vision", "self-depth-vision", "none"] = \
        "self-vision-depth"
    contrastive: bool = True
    cfe: bool = True
    iou_filter: bool = True
    fg_weighting: bool = True


class RunConfig(_Section):
    """训练参数"""
    T: int = Field(30, ge=1)
    tau: float = Field(0.1, gt=0)
    fg_weight: float = Field(7.0, ge=1)
    epochs: int = Field(20, ge=0)
    learning_rate: float = Field(1e-4, gt=0)
    weight_decay: float = Field(5e-4, ge=0)
    ia_warmup_epochs: int = Field(1, ge=0)
    seed: int = 0
    clips_per_scenario: int = Field(1, ge=1)
    max_interval: int = Field(4, ge=1)
    occlusion_prob: float = Field(0.1, ge=0, lt=1)
    switch_prob: float = Field(0.1, ge=0, lt=1)
    iou_threshold: float = Field(0.5, gt=0, le=1)


class ScenarioConfig(_Section):
    """合成场景"""
    n_objects: int = Field(8, ge=1)
    n_frames: int = Field(200, ge=1)
    arena_width: float = Field(640.0, gt=0)
    arena_height: float = Field(480.0, gt=0)
    preset: Literal["linear", "crossing", "circular", "random-walk"] = "crossing"
    occlusion_rate: float = Field(0.0, ge=0, lt=1)
    detection_noise: float = Field(0.0, ge=0)
    drop_prob: float = Field(0.0, ge=0, lt=1)
    appearance_dim: int = Field(16, ge=1)
    base_similarity: float = Field(0.0, ge=0, lt=1)
    appearance_noise: float = Field(0.05, ge=0)
    noise_dim: int = Field(4, ge=0)
    box_scale: float = Field(0.06, gt=0, lt=0.5)
    depth_grid: int = Field(32, ge=4)
    depth_near: float = Field(2.0, gt=0)
    depth_far: float = Field(60.0, gt=0)
    seed: int = 0

    @field_validator("depth_grid")
    @classmethod
    def _grid(cls, v: int) -> int:
        if v % 4:
            raise ValueError(f"depth_grid 必须是 4 的倍数: {v}")
        return v

    @model_validator(mode="after")
    def _check(self) -> ScenarioConfig:
        if self.appearance_dim < self.n_objects + 1:
            raise ValueError(
                f"appearance_dim={self.appearance_dim} 必须 ≥ n_objects+1={self.n_objects + 1}"
            )
        if self.depth_far <= self.depth_near:
            raise ValueError("depth_far 必须大于 depth_near")
        return self


class TrackerConfig(_Section):
    """在线跟踪"""
    similarity_threshold: float = 0.3
    max_misses: int = Field(30, ge=1)
    score_threshold: float = Field(0.5, ge=0, le=1)


class Config(BaseModel):
    """完整配置"""
    model_config = ConfigDict(extra="forbid")

    model: ModelConfig = Field(default_factory=ModelConfig)
    loss: LossWeights = Field(default_factory=LossWeights)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    run: RunConfig = Field(default_factory=RunConfig)
    scenario: ScenarioConfig = Field(default_factory=ScenarioConfig)
    tracker: TrackerConfig = Field(default_factory=TrackerConfig)

    @model_validator(mode="after")
    def _check(self) -> Config:
        if self.ablation.ta and self.run.T < 2:
            raise ValueError(f"启用时间适配器时 T 必须 ≥ 2: {self.run.T}")
        return self


EXAMPLE_CONFIG = """\
# adaptrack 配置，未列出的键使用默认值

[model]
dim = 64
heads = 2
ta_layers = 6
depth_bins = 12

[loss]
cls = 2.0
bbox = 5.0
giou = 2.0
id = 1.0
depth = 1.0
ia = 1.0

[ablation]
sa = true
ta = true
ia = true
missing_mode = mask

[run]
T = 30
epochs = 20
learning_rate = 1e-4
weight_decay = 5e-4
seed = 0

[scenario]
preset = crossing
n_objects = 8
n_frames = 200
base_similarity = 0.9

[tracker]
similarity_threshold = 0.3
max_misses = 30
"""

# 消融预设：名称 → 覆盖 [ablation] 段的键值
ABLATIONS: dict[str, dict[str, object]] = {
    "full": {},
    "none": {"sa": False, "ta": False, "ia": False},
    "sa-only": {"ta": False, "ia": False},
    "ta-only": {"sa": False, "ia": False},
    "ia-only": {"sa": False, "ta": False},
    "sa+ta": {"ia": False},
    "sa+ia": {"ta": False},
    "ta+ia": {"sa": False},
    "no-depth-pe": {"depth_pe": False},
    "depth-self-vision": {"depth_layer_order": "depth-self-vision"},
    "self-depth-vision": {"depth_layer_order": "self-depth-vision"},
    "no-fg-weight": {"fg_weighting": False},
    "ta-zero-vector": {"sa": False, "ia": False, "missing_mode": "zero-vector"},
    "ta-no-missing": {"sa": False, "ia": False, "missing_mode": "off"},
    "ia-raw": {"sa": False, "ta": False, "cfe": False, "iou_filter": False},
    "ia-cfe": {"sa": False, "ta": False, "iou_filter": False},
    "ia-no-cl": {"sa": False, "ta": False, "contrastive": False},
}


def _parse_ini(text: str) -> dict:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    parser.read_string(text)
    return {section: dict(parser.items(section)) for section in parser.sections()}


def load_config(config_path: Optional[Path] = None) -> Config:
    """
    加载配置文件

    Args:
        config_path: 配置文件路径，默认为 ~/.adaptrack/config.ini；.json 后缀按 JSON 解析

    Returns:
        Config: 配置对象

    Raises:
        ConfigError: 配置文件不存在、格式错误或校验失败
    """
    if config_path is None:
        config_path = DEFAULT_CONFIG_PATH

    config_path = Path(config_path)

    if not config_path.exists():
        # 创建目录和示例配置
        config_path.parent.mkdir(parents=True, exist_ok=True)
        if config_path.suffix == ".json":
            example = json.dumps(_parse_ini(EXAMPLE_CONFIG), ensure_ascii=False, indent=2)
        else:
            example = EXAMPLE_CONFIG
        config_path.write_text(example, encoding="utf-8")
        raise ConfigError(
            f"配置文件不存在，示例配置已创建: {config_path}\n"
            "请按需修改后重新运行"
        )

    text = config_path.read_text(encoding="utf-8")
    try:
        if config_path.suffix == ".json":
            config_data = json.loads(text)
        else:
            config_data = _parse_ini(text)
    except (json.JSONDecodeError, configparser.Error) as e:
        raise ConfigError(f"配置文件格式错误: {e}")

    try:
        config = Config.model_validate(config_data)
    except ValidationError as e:
        raise ConfigError(f"配置校验失败: {e}")

    logger.debug(f"配置加载成功: {config_path}")
    return config


def apply_overrides(config: Config, overrides: Sequence[str]) -> Config:
    """
    应用 section.key=value 形式的覆盖，返回新配置

    Raises:
        ConfigError: 覆盖项格式错误或校验失败
    """
    if not overrides:
        return config
    data = config.model_dump()
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"覆盖项格式应为 section.key=value: {item!r}")
        if section not in data:
            raise ConfigError(f"未知配置段: {section}")
        data[section][name.strip()] = value.strip()
    try:
        return Config.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"配置校验失败: {e}")


def find_ablation(name: str) -> tuple[str, dict[str, object]]:
    """
    根据名称查找消融预设

    Returns:
        tuple[str, dict]: (预设名称, 覆盖项)

    Raises:
        ConfigError: 未找到或匹配歧义
    """
    # 1. 精确匹配
    if name in ABLATIONS:
        return name, ABLATIONS[name]

    # 2. 前缀匹配
    matches = [(preset, values) for preset, values in ABLATIONS.items() if preset.startswith(name)]

    if len(matches) == 1:
        return matches[0]

    if len(matches) > 1:
        names = ", ".join(m[0] for m in matches)
        raise ConfigError(f"消融名称 '{name}' 匹配多个: {names}，请指定更精确的名称")

    # 3. 未找到
    available = ", ".join(ABLATIONS)
    raise ConfigError(f"未找到消融预设 '{name}'，可用: {available}")


def apply_ablation(config: Config, name: str) -> Config:
    preset, values = find_ablation(name)
    logger.info(f"使用消融预设: {preset}")
    return apply_overrides(config, [f"ablation.{k}={v}" for k, v in values.items()])


def resolve_config(
    config_path: Optional[Path] = None,
    overrides: Sequence[str] = (),
    ablation: Optional[str] = None,
) -> Config:
    """
    配置文件 → 消融预设 → --set 覆盖 → FDTA_SEED 环境变量，依次生效；
    未给出路径时使用默认配置
    """
    config = load_config(config_path) if config_path is not None else Config()
    if ablation:
        config = apply_ablation(config, ablation)
    config = apply_overrides(config, overrides)
    seed = os.environ.get(SEED_ENV)
    if seed is not None:
        try:
            int(seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} 必须是整数: {seed!r}")
        config = apply_overrides(config, [f"run.seed={seed}", f"scenario.seed={seed}"])
    return config
