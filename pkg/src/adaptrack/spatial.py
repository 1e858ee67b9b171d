"""空间适配器：LID 深度离散化、期望深度头、前景加权深度损失、深度位置编码与深度交叉注意力融合"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from adaptrack.diffcore import (
    Linear,
    Module,
    MultiHeadAttention,
    LayerNorm,
    Mlp,
    Tensor,
    TransformerEncoderLayer,
    as_tensor,
    maximum,
    minimum,
    softmax,
)
from adaptrack.geometry import PROB_FLOOR

logger = logging.getLogger(__name__)

DEFAULT_D_MIN = 1e-3
DEFAULT_D_MAX = 256.0

# 融合块内各注意力层的顺序
LAYER_ORDERS: dict[str, tuple[str, ...]] = {
    "self-vision-depth": ("self", "vision", "depth"),
    "self-depth-vision": ("self", "depth", "vision"),
    "depth-self-vision": ("depth", "self", "vision"),
    "none": ("self", "vision"),
}


class DepthError(Exception):
    """深度分箱、深度值或深度监督无效"""
    pass


@dataclass(frozen=True)
class DepthBins:
    """K 个前景箱加一个背景箱 b_K = d_max"""
    K: int
    d_min: float
    d_max: float
    values: tuple[float, ...]
    bin_size: float

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


def lid_bins(K: int, d_min: float = DEFAULT_D_MIN, d_max: float = DEFAULT_D_MAX) -> DepthBins:
    """
    线性递增离散化 (LID)

    bin_size = 2(d_max - d_min) / (K(1+K))
    b_i = (i + 0.5)^2 · bin_size/2 - bin_size/8 + d_min, i < K；b_K = d_max

    Raises:
        DepthError: K < 1 或深度范围反向
    """
    if K < 1:
        raise DepthError(f"分箱数必须 ≥ 1: {K}")
    if not (math.isfinite(d_min) and math.isfinite(d_max)) or d_max <= d_min:
        raise DepthError(f"深度范围无效: [{d_min}, {d_max}]")
    bin_size = 2.0 * (d_max - d_min) / (K * (1.0 + K))
    i = np.arange(K, dtype=np.float64)
    values = (i + 0.5) ** 2 * bin_size / 2.0 - bin_size / 8.0 + d_min
    values = np.append(values, d_max)
    return DepthBins(K=K, d_min=d_min, d_max=d_max, values=tuple(values.tolist()), bin_size=bin_size)


def discretize_depth(depth: float, bins: DepthBins) -> int:
    """
    最近箱值的下标，越界自动落到两端，平局取较小下标

    Raises:
        DepthError: NaN 深度
    """
    if math.isnan(depth):
        raise DepthError("深度为 NaN")
    return int(np.argmin(np.abs(bins.as_array() - depth)))


def discretize_depth_map(depth: np.ndarray, bins: DepthBins) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    if np.isnan(depth).any():
        raise DepthError("深度图包含 NaN")
    # argmin 取第一个最小值，平局落在较小下标
    return np.argmin(np.abs(depth[..., None] - bins.as_array()), axis=-1)


def depth_expectation(probs, bins: DepthBins) -> Tensor:
    """
    d̂ = Σ_i d_i · b_i

    Raises:
        DepthError: 概率未归一化（偏差 > 1e-6）或通道数不是 K+1
    """
    probs = as_tensor(probs)
    if probs.shape[-1] != bins.K + 1:
        raise DepthError(f"概率通道数 {probs.shape[-1]} != K+1 = {bins.K + 1}")
    total = probs.data.sum(axis=-1)
    if np.abs(total - 1.0).max() > 1e-6 or (probs.data < 0).any():
        raise DepthError("深度概率未归一化")
    return probs @ bins.as_array()


@dataclass
class DepthField:
    """逐像素箱概率、期望深度、前景掩码和训练用目标箱"""
    probs: Tensor
    expected: Tensor
    fg_mask: np.ndarray
    targets: Optional[np.ndarray] = None

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.probs.shape[0], self.probs.shape[1]


def weighted_depth_loss(
    field: DepthField,
    bins: DepthBins,
    fg_weight: float = 7.0,
    alpha_t: float = 0.25,
    gamma: float = 2.0,
) -> Tensor:
    """
    前景加权的焦点深度损失 (1/N) Σ w_ij · FL(d_ij, d̄_ij)

    Raises:
        DepthError: 缺少目标、目标越界或 fg_weight < 1
    """
    if field.targets is None:
        raise DepthError("深度场缺少目标箱")
    if fg_weight < 1.0:
        raise DepthError(f"前景权重必须 ≥ 1: {fg_weight}")
    targets = np.asarray(field.targets)
    if targets.shape != field.grid_shape:
        raise DepthError(f"目标形状 {targets.shape} 与深度场 {field.grid_shape} 不符")
    if targets.min() < 0 or targets.max() > bins.K:
        raise DepthError(f"目标箱下标越界: [{targets.min()}, {targets.max()}]")

    rows, cols = np.indices(targets.shape)
    p_t = maximum(field.probs[rows.ravel(), cols.ravel(), targets.ravel()], PROB_FLOOR)
    focal = -alpha_t * (1.0 - p_t) ** gamma * p_t.log()
    weights = np.where(np.asarray(field.fg_mask).ravel(), fg_weight, 1.0)
    return (focal * weights).sum() / float(targets.size)


def rasterize_foreground(boxes: np.ndarray, grid_shape: tuple[int, int],
                         arena: tuple[float, float]) -> np.ndarray:
    """
    GT 框并集的栅格化掩码，与框边界相交的像素也算前景

    Args:
        boxes: (N, 4) xywh，图像单位
        grid_shape: (rows, cols)
        arena: (W, H) 图像尺寸
    """
    mask = np.zeros(grid_shape, dtype=bool)
    for c0, c1, r0, r1 in _box_cells(boxes, grid_shape, arena):
        mask[r0:r1, c0:c1] = True
    return mask


def _box_cells(boxes, grid_shape, arena):
    rows, cols = grid_shape
    sx = arena[0] / cols
    sy = arena[1] / rows
    for x, y, w, h in np.asarray(boxes, dtype=np.float64).reshape(-1, 4):
        if x + w < 0 or y + h < 0 or x > arena[0] or y > arena[1]:
            continue
        c0 = int(np.clip(math.floor(x / sx), 0, cols - 1))
        r0 = int(np.clip(math.floor(y / sy), 0, rows - 1))
        c1 = int(np.clip(math.floor((x + w) / sx), c0, cols - 1)) + 1
        r1 = int(np.clip(math.floor((y + h) / sy), r0, rows - 1)) + 1
        yield c0, c1, r0, r1


def box_cells(boxes, grid_shape, arena) -> list[tuple[int, int, int, int]]:
    """每个框覆盖的 (c0, c1, r0, r1) 半开像素区间"""
    return list(_box_cells(boxes, grid_shape, arena))


class DepthPeTable(Module):
    """可学习深度位置编码表，[d_min, d_max] 线性映射到 N_pe 个表项"""

    def __init__(self, n_pe: int, dim: int, d_min: float, d_max: float,
                 rng: Optional[np.random.Generator] = None):
        if n_pe < 2:
            raise DepthError(f"深度位置编码表至少需要 2 项: {n_pe}")
        if d_max <= d_min:
            raise DepthError(f"深度范围无效: [{d_min}, {d_max}]")
        rng = rng or np.random.default_rng(0)
        self.n_pe = n_pe
        self.dim = dim
        self.d_min = d_min
        self.d_max = d_max
        self.table = Tensor(rng.normal(0.0, 0.1, size=(n_pe, dim)), requires_grad=True)

    def coordinate(self, depth) -> Tensor:
        depth = as_tensor(depth)
        u = (depth - self.d_min) * (float(self.n_pe - 1) / (self.d_max - self.d_min))
        return maximum(minimum(u, float(self.n_pe - 1)), 0.0)


def depth_pe(depth, table: DepthPeTable) -> Tensor:
    """
    PE_d = (1-δ)·PE[⌊u⌋] + δ·PE[⌈u⌉]，δ = u - ⌊u⌋

    Args:
        depth: 任意形状的深度值
        table: 深度位置编码表

    Returns:
        Tensor: 形状 depth.shape + (dim,)
    """
    depth = as_tensor(depth)
    if not np.isfinite(depth.data).all():
        raise DepthError("深度值非有限")
    u = table.coordinate(depth)
    lo = np.floor(u.data).astype(np.int64)
    hi = np.minimum(lo + 1, table.n_pe - 1)
    delta = (u - lo.astype(np.float64)).reshape(*u.shape, 1)
    return (1.0 - delta) * table.table[lo] + delta * table.table[hi]


def _bilinear_matrix(out_size: int, in_size: int) -> np.ndarray:
    """半像素对齐的双线性插值矩阵 (out, in)"""
    m = np.zeros((out_size, in_size))
    scale = in_size / out_size
    for o in range(out_size):
        src = min(max((o + 0.5) * scale - 0.5, 0.0), in_size - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, in_size - 1)
        w = src - i0
        m[o, i0] += 1.0 - w
        m[o, i1] += w
    return m


def upsample_bilinear(f, size: tuple[int, int]) -> Tensor:
    """(h, w, C) → (H, W, C)"""
    f = as_tensor(f)
    ry = _bilinear_matrix(size[0], f.shape[0])
    rx = _bilinear_matrix(size[1], f.shape[1])
    chw = f.transpose(2, 0, 1)
    up = Tensor(ry) @ chw @ Tensor(rx.T)
    return up.transpose(1, 2, 0)


def pyramid_average(f8, f16, f32) -> Tensor:
    """
    F_avg = (f8 + up(f16) + up(f32)) / 3，特征为通道在后的 (H, W, C)

    Raises:
        DepthError: 分辨率不是 1 : 1/2 : 1/4 或通道数不同
    """
    f8, f16, f32 = as_tensor(f8), as_tensor(f16), as_tensor(f32)
    h, w, c = f8.shape
    if f16.shape != (h // 2, w // 2, c) or f32.shape != (h // 4, w // 4, c) or h % 4 or w % 4:
        raise DepthError(f"金字塔尺寸不兼容: {f8.shape}, {f16.shape}, {f32.shape}")
    return (f8 + upsample_bilinear(f16, (h, w)) + upsample_bilinear(f32, (h, w))) / 3.0


def avg_pool(f: Tensor, k: int) -> Tensor:
    """(H, W, ...) 上 k×k 平均池化"""
    f = as_tensor(f)
    if k == 1:
        return f
    h, w = f.shape[0], f.shape[1]
    if h % k or w % k:
        raise DepthError(f"池化尺寸 {k} 不整除网格 {h}x{w}")
    rest = f.shape[2:]
    return f.reshape(h // k, k, w // k, k, *rest).mean(axis=(1, 3))


class FusionBlock(Module):
    """解码块：自注意力、视觉交叉注意力、深度交叉注意力（键上加 PE_d）、前馈"""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, zero_depth: bool = False):
        self.norm_self = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.norm_vision = LayerNorm(dim)
        self.vision_attn = MultiHeadAttention(dim, heads, rng)
        self.norm_depth = LayerNorm(dim)
        self.depth_attn = MultiHeadAttention(dim, heads, rng, zero_out=zero_depth)
        self.norm_ffn = LayerNorm(dim)
        self.ffn = Mlp([dim, 2 * dim, dim], rng)

    def __call__(self, x: Tensor, visual: Tensor, depth: Optional[Tensor],
                 pe: Optional[Tensor], order: Sequence[str]) -> Tensor:
        for step in order:
            if step == "self":
                h = self.norm_self(x)
                x = x + self.self_attn(h, h, h)
            elif step == "vision":
                x = x + self.vision_attn(self.norm_vision(x), visual, visual)
            elif step == "depth":
                keys = depth if pe is None else depth + pe
                x = x + self.depth_attn(self.norm_depth(x), keys, depth)
        return x + self.ffn(self.norm_ffn(x))


def fuse_depth(
    objects: Tensor,
    visual: Tensor,
    depth: Optional[Tensor],
    pe: Optional[Tensor],
    blocks: Sequence[FusionBlock],
    order: str = "self-vision-depth",
) -> Tensor:
    """
    把深度特征注入目标嵌入

    Args:
        objects: (N, d) 目标嵌入
        visual: (P, d) 视觉特征
        depth: (P', d) 深度特征 F_D，None 时跳过深度层
        pe: (P', d) 深度位置编码，只加在深度键上；None 表示关闭 Depth PE
        blocks: 融合块
        order: LAYER_ORDERS 中的层顺序

    Raises:
        DepthError: 未知顺序或维度不一致
    """
    if order not in LAYER_ORDERS:
        raise DepthError(f"未知的深度层顺序: {order}")
    steps = LAYER_ORDERS[order]
    if depth is None:
        steps = tuple(s for s in steps if s != "depth")
    objects = as_tensor(objects)
    if objects.shape[0] == 0:
        return objects
    dims = {objects.shape[-1], as_tensor(visual).shape[-1]}
    if depth is not None:
        dims.add(depth.shape[-1])
    if len(dims) != 1:
        raise DepthError(f"融合输入维度不一致: {sorted(dims)}")
    x = objects
    for block in blocks:
        x = block(x, visual, depth, pe, steps)
    return x


def depth_attention_maps(objects: Tensor, visual: Tensor, depth: Tensor, pe: Optional[Tensor],
                         blocks: Sequence[FusionBlock], order: str = "self-vision-depth") -> np.ndarray:
    """
    目标对深度 token 的交叉注意力权重 (L, heads, N, P')

    Raises:
        DepthError: 层顺序里没有深度层
    """
    if "depth" not in LAYER_ORDERS.get(order, ()):
        raise DepthError(f"层顺序 {order} 不含深度交叉注意力")
    objects = as_tensor(objects)
    if objects.shape[0] == 0:
        return np.zeros((len(blocks), blocks[0].depth_attn.heads if blocks else 0, 0, depth.shape[0]))
    for block in blocks:
        block.depth_attn.last_weights = None
    fuse_depth(objects, visual, depth, pe, blocks, order)
    return np.stack([block.depth_attn.last_weights for block in blocks])


@dataclass
class DepthOutputs:
    field: DepthField
    tokens: Tensor
    token_depth: Tensor
    pe: Optional[Tensor]


class DepthBranch(Module):
    """
    玩具尺度的深度分支：每层 1×1 投影、金字塔平均、两层稠密提取器、
    K+1 箱深度头、期望深度、L_enc 层深度编码器和深度位置编码
    """

    def __init__(self, in_channels: int, dim: int, heads: int, bins: DepthBins,
                 n_pe: int, encoder_layers: int, token_pool: int, rng: np.random.Generator):
        self.bins = bins
        self.token_pool = token_pool
        self.level_proj = [Linear(in_channels, dim, rng) for _ in range(3)]
        self.extractor = [Linear(dim, dim, rng), Linear(dim, dim, rng)]
        self.head = Linear(dim, bins.K + 1, rng)
        self.token_proj = Linear(dim, dim, rng)
        self.encoder = [TransformerEncoderLayer(dim, heads, rng) for _ in range(encoder_layers)]
        self.pe_table = DepthPeTable(n_pe, dim, bins.d_min, bins.d_max, rng)

    def __call__(self, f8, f16, f32, fg_mask: np.ndarray,
                 targets: Optional[np.ndarray] = None, use_pe: bool = True) -> DepthOutputs:
        levels = [proj(as_tensor(f)) for proj, f in zip(self.level_proj, (f8, f16, f32))]
        dense = pyramid_average(*levels)
        for layer in self.extractor:
            dense = layer(dense).relu()
        probs = softmax(self.head(dense), axis=-1)
        expected = depth_expectation(probs, self.bins)
        field = DepthField(probs=probs, expected=expected, fg_mask=fg_mask, targets=targets)

        pooled = avg_pool(dense, self.token_pool)
        tokens = self.token_proj(pooled.reshape(-1, pooled.shape[-1]))
        for layer in self.encoder:
            tokens = layer(tokens)
        token_depth = avg_pool(expected, self.token_pool).reshape(-1)
        pe = depth_pe(token_depth, self.pe_table) if use_pe else None
        return DepthOutputs(field=field, tokens=tokens, token_depth=token_depth, pe=pe)
