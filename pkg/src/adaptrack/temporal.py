"""时间适配器：轨迹窗口、因果+缺失双重注意力掩码、L 层掩码 Transformer 编码器"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from adaptrack.diffcore import (
    Module,
    Tensor,
    TransformerEncoderLayer,
    as_tensor,
    parameter,
    sinusoidal_pe,
    stack,
)

logger = logging.getLogger(__name__)

# mask: [empty] 令牌 + 双重掩码；zero-vector: 零向量 + 因果掩码；off: [empty] 令牌 + 因果掩码
MISSING_MODES = ("mask", "zero-vector", "off")

Slot = Union[Tensor, np.ndarray]


class TemporalError(Exception):
    """轨迹窗口或编码器输入无效"""
    pass


@dataclass
class TrajectoryWindow:
    """单个身份最近 T 帧的嵌入，缺失帧存放 [empty] 令牌"""
    identity: int
    embeddings: list[Slot]
    presence: list[bool]
    frames: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.embeddings:
            raise TemporalError("轨迹窗口为空")
        if len(self.embeddings) != len(self.presence):
            raise TemporalError(
                f"嵌入数 {len(self.embeddings)} 与存在标记数 {len(self.presence)} 不一致"
            )
        if self.frames and len(self.frames) != len(self.presence):
            raise TemporalError("帧号数与窗口长度不一致")

    @property
    def T(self) -> int:
        return len(self.presence)

    @classmethod
    def from_slots(
        cls,
        identity: int,
        slots: Sequence[Optional[Slot]],
        empty: Slot,
        frames: Optional[Sequence[int]] = None,
    ) -> TrajectoryWindow:
        """None 槽位填入 [empty] 令牌"""
        embeddings = [empty if s is None else s for s in slots]
        presence = [s is not None for s in slots]
        return cls(identity, embeddings, presence, list(frames or []))

    def last_present(self) -> int:
        for j in range(self.T - 1, -1, -1):
            if self.presence[j]:
                return j
        raise TemporalError(f"身份 {self.identity} 的窗口没有任何检测")


def build_dual_mask(presence: Sequence[bool], causal: bool = True, missing: bool = True) -> np.ndarray:
    """
    M[j,k] = 1 当 k > j 或第 k 帧未检测到；对角线始终为 0

    Args:
        presence: 每帧是否检测到
        causal: 屏蔽未来帧
        missing: 屏蔽缺失帧

    Returns:
        np.ndarray: (T, T) 的 uint8 矩阵
    """
    present = np.asarray(presence, dtype=bool)
    T = present.shape[0]
    if T < 1:
        raise TemporalError("窗口长度必须 ≥ 1")
    mask = np.zeros((T, T), dtype=np.uint8)
    if causal:
        mask |= np.triu(np.ones((T, T), dtype=np.uint8), k=1)
    if missing:
        mask |= np.broadcast_to(~present, (T, T)).astype(np.uint8)
    np.fill_diagonal(mask, 0)
    return mask


def slot_positions(T: int, dim: int) -> np.ndarray:
    """按槽位 0..T-1 的正弦位置编码 (T, dim)"""
    return np.stack([sinusoidal_pe(j, dim) for j in range(T)])


class TemporalAdapter(Module):
    """
    L 层 pre-norm 编码器，共享一个可学习 [empty] 令牌

    zero_residual=True 时各层残差分支的输出投影初始化为零，初始时 TA 是恒等映射。
    """

    def __init__(self, dim: int, heads: int, layers: int, rng: np.random.Generator,
                 missing_mode: str = "mask", zero_residual: bool = False):
        if missing_mode not in MISSING_MODES:
            raise TemporalError(f"未知的缺失处理方式: {missing_mode}")
        self.dim = dim
        self.missing_mode = missing_mode
        self.empty_token = parameter(rng.normal(0.0, 0.1, size=dim))
        self.layers = [TransformerEncoderLayer(dim, heads, rng, zero_residual=zero_residual) for _ in range(layers)]

    def window(self, identity: int, slots: Sequence[Optional[Slot]],
               frames: Optional[Sequence[int]] = None) -> TrajectoryWindow:
        return TrajectoryWindow.from_slots(identity, slots, self.empty_token, frames)

    def inputs(self, window: TrajectoryWindow) -> Tensor:
        rows = []
        for emb, present in zip(window.embeddings, window.presence):
            emb = as_tensor(emb)
            if emb.shape != (self.dim,):
                raise TemporalError(f"槽位形状 {emb.shape} 与模型维度 {self.dim} 不符")
            if not present and self.missing_mode == "zero-vector":
                emb = Tensor(np.zeros(self.dim))
            rows.append(emb)
        return stack(rows) + Tensor(slot_positions(window.T, self.dim))

    def mask(self, window: TrajectoryWindow) -> np.ndarray:
        return build_dual_mask(window.presence, missing=self.missing_mode == "mask")


def temporal_encode(window: TrajectoryWindow, encoder: TemporalAdapter) -> Tensor:
    """
    F̂_traj = TA(F_traj, M)

    槽位位置编码只参与注意力，输出时减去，精炼嵌入与检测嵌入在同一空间里比较。

    Returns:
        Tensor: (T, dim)，位置 j 只依赖 j 及之前已检测的帧
    """
    x = encoder.inputs(window)
    mask = encoder.mask(window)
    for layer in encoder.layers:
        x = layer(x, mask)
    return x - Tensor(slot_positions(window.T, encoder.dim))


def attention_maps(window: TrajectoryWindow, encoder: TemporalAdapter) -> np.ndarray:
    """每层每头的注意力权重 (L, heads, T, T)"""
    temporal_encode(window, encoder)
    return np.stack([layer.attn.last_weights for layer in encoder.layers])
