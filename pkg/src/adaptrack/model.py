"""玩具跟踪模型：编码器、空间/时间/身份适配器、检测头，以及检查点读写"""

from __future__ import annotations

import io
import logging
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from adaptrack.config import Config
from adaptrack.diffcore import Linear, Mlp, Module, ShapeError, Tensor, as_tensor, parameter, softmax
from adaptrack.simkit import (
    Scenario,
    ToyEncoder,
    encoder_inputs,
    make_rng,
    pyramid_channels,
    render_pyramid,
)
from adaptrack.spatial import (
    LAYER_ORDERS,
    DepthBranch,
    DepthOutputs,
    FusionBlock,
    avg_pool,
    depth_attention_maps,
    fuse_depth,
    lid_bins,
)
from adaptrack.temporal import TemporalAdapter
from adaptrack.tracker import FrameDetections

logger = logging.getLogger(__name__)

STREAM_MODEL = 4
CONFIG_KEY = "__config__"


class CheckpointError(Exception):
    """检查点无法读取"""
    pass


@dataclass
class FrameOutput:
    embeddings: Tensor
    depth: Optional[DepthOutputs] = None


class TrackingModel(Module):
    """
    全部参数在构造时按固定顺序创建，开关只决定前向路径，
    因此任意消融配置的检查点结构相同。
    """

    def __init__(self, config: Config):
        self.config = config
        m, s, a = config.model, config.scenario, config.ablation
        rng = make_rng(config.run.seed, STREAM_MODEL)
        channels = pyramid_channels(s)
        self.bins = lid_bins(m.depth_bins, m.d_min, m.d_max)
        self.arena = (s.arena_width, s.arena_height)

        self.encoder = ToyEncoder(4 + s.appearance_dim + s.noise_dim, m.encoder_hidden, m.dim, rng)
        self.visual_proj = Linear(channels, m.dim, rng)
        self.fusion = [FusionBlock(m.dim, m.heads, rng, zero_depth=True) for _ in range(m.fusion_layers)]
        self.depth = DepthBranch(channels, m.dim, m.heads, self.bins, m.n_pe,
                                 m.depth_encoder_layers, m.token_pool, rng)
        self.temporal = TemporalAdapter(m.dim, m.heads, m.ta_layers, rng,
                                        missing_mode=a.missing_mode, zero_residual=True)
        self.cls_head = Linear(m.dim, 2, rng)
        self.new_logit = parameter(np.zeros(1))

    def _encode(self, boxes: np.ndarray, observations: np.ndarray,
                pyramid: Sequence[np.ndarray]) -> tuple[Tensor, Tensor]:
        x = self.encoder(encoder_inputs(boxes, observations, self.arena))
        pooled = avg_pool(pyramid[0], self.config.model.token_pool)
        return x, self.visual_proj(pooled.reshape(-1, pooled.shape[-1]))

    def embed_frame(
        self,
        boxes: np.ndarray,
        observations: np.ndarray,
        pyramid: Sequence[np.ndarray],
        fg_mask: Optional[np.ndarray] = None,
        depth_targets: Optional[np.ndarray] = None,
    ) -> FrameOutput:
        """编码检测并做视觉/深度融合；关闭空间适配器时不经过深度分支"""
        a = self.config.ablation
        x, visual = self._encode(boxes, observations, pyramid)
        f8, f16, f32 = pyramid
        if not a.sa:
            return FrameOutput(fuse_depth(x, visual, None, None, self.fusion, "none"))

        if fg_mask is None:
            fg_mask = np.zeros(f8.shape[:2], dtype=bool)
        out = self.depth(f8, f16, f32, fg_mask, depth_targets, use_pe=a.depth_pe)
        x = fuse_depth(x, visual, out.tokens, out.pe, self.fusion, a.depth_layer_order)
        return FrameOutput(x, out)

    def depth_attention(self, boxes: np.ndarray, observations: np.ndarray,
                        pyramid: Sequence[np.ndarray]) -> Optional[np.ndarray]:
        """单帧目标对深度 token 的交叉注意力 (L, heads, N, P')；没有深度层时为 None"""
        a = self.config.ablation
        if not a.sa or "depth" not in LAYER_ORDERS[a.depth_layer_order]:
            return None
        x, visual = self._encode(boxes, observations, pyramid)
        f8, f16, f32 = pyramid
        out = self.depth(f8, f16, f32, np.zeros(f8.shape[:2], dtype=bool), None, use_pe=a.depth_pe)
        return depth_attention_maps(x, visual, out.tokens, out.pe, self.fusion, a.depth_layer_order)

    def heads(self, embeddings: Tensor) -> tuple[Tensor, Tensor]:
        """框偏移（以检测框宽高为单位）和 [背景, 目标] 概率"""
        return self.box_head(embeddings), softmax(self.cls_head(embeddings), axis=-1)

    @staticmethod
    def refine_boxes(boxes: np.ndarray, offsets: Tensor) -> Tensor:
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        scale = np.concatenate([boxes[:, 2:], boxes[:, 2:]], axis=1)
        return as_tensor(boxes) + offsets * scale


def embed_scenario(model: TrackingModel, scenario: Scenario) -> list[FrameDetections]:
    """逐帧计算嵌入与精炼框，供在线跟踪使用"""
    frames = []
    for idx, det in enumerate(scenario.detections):
        if len(det) == 0:
            frames.append(FrameDetections(det.frame, det.boxes, det.scores, det.observations,
                                          np.zeros((0, model.config.model.dim))))
            continue
        out = model.embed_frame(det.boxes, det.observations, render_pyramid(scenario, idx))
        offsets, _ = model.heads(out.embeddings)
        boxes = model.refine_boxes(det.boxes, offsets).data
        boxes[:, 2:] = np.maximum(boxes[:, 2:], 1.0)
        frames.append(FrameDetections(det.frame, boxes, det.scores, det.observations,
                                      out.embeddings.data.copy()))
    return frames


# ---------------------------------------------------------------- 检查点


def _write_npz(path: Path, arrays: dict[str, np.ndarray]) -> None:
    """固定时间戳的 npz，相同内容得到相同字节"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def save_checkpoint(path: Path, model: TrackingModel) -> None:
    """命名参数 + 内嵌 JSON 配置"""
    arrays = model.state_dict()
    arrays[CONFIG_KEY] = np.array(model.config.model_dump_json())
    _write_npz(path, arrays)
    logger.info(f"检查点已保存: {path}（{len(arrays) - 1} 个参数）")


def load_checkpoint(path: Path) -> TrackingModel:
    """
    Raises:
        CheckpointError: 文件不存在、缺少配置或参数不匹配
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"检查点不存在: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            if CONFIG_KEY not in data.files:
                raise CheckpointError(f"检查点缺少配置: {path}")
            config = Config.model_validate_json(str(data[CONFIG_KEY]))
            state = {k: data[k] for k in data.files if k != CONFIG_KEY}
    except (OSError, ValueError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"检查点无法读取: {path}: {e}")
    model = TrackingModel(config)
    try:
        model.load_state_dict(state)
    except ShapeError as e:
        raise CheckpointError(f"检查点参数不匹配: {e}")
    return model
