"""框、重叠度量、检测损失分量和匈牙利匹配"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from adaptrack.diffcore import Tensor, as_tensor, maximum, minimum, softmax

logger = logging.getLogger(__name__)

# 矩形矩阵中被禁止配对的代价
SENTINEL = 1e9
# p_t 的下限，避免 log(0)
PROB_FLOOR = 1e-12


class GeometryError(Exception):
    """无效框或代价矩阵"""
    pass


@dataclass(frozen=True)
class Box2D:
    """左上角 (x, y) 加宽高 (w, h)，与 MOTChallenge 文件一致"""
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        values = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in values):
            raise GeometryError(f"框坐标非有限: {values}")
        if self.w < 0 or self.h < 0:
            raise GeometryError(f"框宽高为负: w={self.w}, h={self.h}")

    @classmethod
    def from_array(cls, values: Sequence[float]) -> Box2D:
        x, y, w, h = (float(v) for v in values)
        return cls(x, y, w, h)

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    def corners(self) -> tuple[float, float, float, float]:
        return self.x, self.y, self.x + self.w, self.y + self.h


@dataclass
class Assignment:
    """匹配对及其总代价"""
    pairs: list[tuple[int, int]] = field(default_factory=list)
    cost: float = 0.0

    def row_to_col(self) -> dict[int, int]:
        return dict(self.pairs)


def iou(a: Box2D, b: Box2D) -> float:
    """交并比，零面积框返回 0"""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N,4) 与 (M,4) xywh 框的 IoU 矩阵"""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    ax1, ay1 = a[:, 0:1], a[:, 1:2]
    ax2, ay2 = ax1 + a[:, 2:3], ay1 + a[:, 3:4]
    bx1, by1 = b[None, :, 0], b[None, :, 1]
    bx2, by2 = bx1 + b[None, :, 2], by1 + b[None, :, 3]
    iw = np.maximum(0.0, np.minimum(ax2, bx2) - np.maximum(ax1, bx1))
    ih = np.maximum(0.0, np.minimum(ay2, by2) - np.maximum(ay1, by1))
    inter = iw * ih
    union = a[:, 2:3] * a[:, 3:4] + (b[:, 2] * b[:, 3])[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0.0, inter / union, 0.0)
    return out


def _components(box) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    t = as_tensor(box.as_array() if isinstance(box, Box2D) else box)
    return t[..., 0], t[..., 1], t[..., 2], t[..., 3]


def giou_loss_tensor(pred, gt) -> Tensor:
    """
    1 - GIoU 的可微版本

    Raises:
        GeometryError: 两个框都退化
    """
    px, py, pw, ph = _components(pred)
    gx, gy, gw, gh = _components(gt)
    if np.all(pw.data * ph.data <= 0) and np.all(gw.data * gh.data <= 0):
        raise GeometryError("两个框都退化，GIoU 未定义")
    iw = (minimum(px + pw, gx + gw) - maximum(px, gx)).relu()
    ih = (minimum(py + ph, gy + gh) - maximum(py, gy)).relu()
    inter = iw * ih
    union = pw * ph + gw * gh - inter
    cw = maximum(px + pw, gx + gw) - minimum(px, gx)
    ch = maximum(py + ph, gy + gh) - minimum(py, gy)
    enclose = cw * ch
    giou = inter / union - (enclose - union) / enclose
    return 1.0 - giou


def giou_loss(a: Box2D, b: Box2D) -> float:
    return giou_loss_tensor(a, b).item()


def l1_box_loss_tensor(pred, gt) -> Tensor:
    return (as_tensor(pred.as_array() if isinstance(pred, Box2D) else pred)
            - as_tensor(gt.as_array() if isinstance(gt, Box2D) else gt)).abs().sum()


def l1_box_loss(a: Box2D, b: Box2D) -> float:
    """(x,y,w,h) 差的绝对值之和"""
    return l1_box_loss_tensor(a, b).item()


def focal_loss(p, target: int, alpha_t: float = 0.25, gamma: float = 2.0) -> Tensor:
    """
    -α_t (1-p_t)^γ log p_t，p_t 下限截断在 1e-12

    Args:
        p: 概率向量（可以是计算图中的张量）
        target: 目标类别下标
    """
    p = as_tensor(p)
    if not 0 <= target < p.shape[-1]:
        raise GeometryError(f"类别下标越界: {target}")
    p_t = maximum(p[..., target], PROB_FLOOR)
    return -alpha_t * (1.0 - p_t) ** gamma * p_t.log()


def focal_loss_from_logits(logits, target: int, alpha_t: float = 0.25, gamma: float = 2.0) -> Tensor:
    return focal_loss(softmax(logits, axis=-1), target, alpha_t, gamma)


def hungarian(cost) -> Assignment:
    """
    最小总代价的最大匹配，矩形矩阵直接求解

    Returns:
        Assignment: 大小为 min(R, C)

    Raises:
        GeometryError: 代价非有限或不小于 SENTINEL 的上界
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return Assignment()
    if cost.ndim != 2:
        raise GeometryError(f"代价矩阵必须是二维: {cost.shape}")
    if not np.isfinite(cost).all():
        raise GeometryError("代价矩阵包含非有限值")
    if np.abs(cost).max() > SENTINEL:
        raise GeometryError(f"代价超过哨兵值 {SENTINEL:g}")
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    total = float(sum(cost[r, c] for r, c in pairs))
    return Assignment(pairs=pairs, cost=total)


def gated_assignment(cost: np.ndarray, allowed: np.ndarray) -> list[tuple[int, int]]:
    """只在 allowed 为真的位置配对：先最大化配对数，再最小化代价"""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return []
    gated = np.where(allowed, cost, SENTINEL)
    result = hungarian(gated)
    return [(r, c) for r, c in result.pairs if allowed[r, c]]
